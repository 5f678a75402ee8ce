"""Quadtree index tree over the token grid.

Levels are numbered 1 (coarsest) .. r (finest).  Level ``m`` is a square
grid of ``side(m)`` tokens per side; every coarse token owns the 2x2 block
of tokens below it.  Child slots are numbered row-major inside that block::

    slot 0 = (2i, 2j)    slot 1 = (2i, 2j+1)
    slot 2 = (2i+1, 2j)  slot 3 = (2i+1, 2j+1)
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

# (row offset, col offset) of child slot s inside the parent's 2x2 block
CHILD_OFFSETS = ((0, 0), (0, 1), (1, 0), (1, 1))


@dataclass(frozen=True, order=True)
class TokenIndex:
    level: int
    row: int
    col: int


@dataclass(frozen=True)
class IndexTree:
    levels: int
    sides: tuple[int, ...]
    windows: tuple[int, ...]

    def side(self, m: int) -> int:
        self._check_level(m)
        return self.sides[m - 1]

    def window(self, m: int) -> int:
        self._check_level(m)
        return self.windows[m - 1]

    def size(self, m: int) -> int:
        """Number of tokens |I^(m)| on level m."""
        return self.side(m) ** 2

    @property
    def finest(self) -> int:
        return self.levels

    def tokens(self, m: int) -> list[TokenIndex]:
        s = self.side(m)
        return [TokenIndex(m, i, j) for i in range(s) for j in range(s)]

    def flat(self, i: TokenIndex) -> int:
        """Row-major position of a token within its level."""
        return i.row * self.side(i.level) + i.col

    def window_offsets(self, m: int) -> list[tuple[int, int]]:
        h = self.window(m) // 2
        return [(di, dj) for di in range(-h, h + 1) for dj in range(-h, h + 1)]

    def _check_level(self, m: int) -> None:
        if not 1 <= m <= self.levels:
            raise ValueError(f"level {m} outside 1..{self.levels}")

    def _check_index(self, i: TokenIndex) -> None:
        s = self.side(i.level)
        if not (0 <= i.row < s and 0 <= i.col < s):
            raise ValueError(f"{i} outside the {s}x{s} grid of level {i.level}")


def build_tree(finest_side: int, levels: int, windows: Sequence[int] | None = None) -> IndexTree:
    """Build a quadtree whose finest level is ``finest_side`` x ``finest_side`` tokens.

    ``windows`` lists the (odd) attention window width per level, coarse to
    fine; it defaults to 3 everywhere.
    """
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    if finest_side < 1:
        raise ValueError(f"finest_side must be positive, got {finest_side}")
    if finest_side % (2 ** (levels - 1)):
        raise ValueError(
            f"finest_side {finest_side} is not divisible by 2**(levels-1) = {2 ** (levels - 1)}"
        )
    if windows is None:
        windows = [3] * levels
    windows = tuple(int(w) for w in windows)
    if len(windows) != levels:
        raise ValueError(f"expected {levels} window sizes, got {len(windows)}")
    for w in windows:
        if w < 1 or w % 2 == 0:
            raise ValueError(f"window sizes must be odd positive integers, got {w}")
    sides = tuple(finest_side // 2 ** (levels - m) for m in range(1, levels + 1))
    return IndexTree(levels=levels, sides=sides, windows=windows)


def children(tree: IndexTree, i: TokenIndex) -> list[TokenIndex]:
    tree._check_index(i)
    if i.level >= tree.levels:
        raise ValueError(f"{i} is on the finest level and has no children")
    return [TokenIndex(i.level + 1, 2 * i.row + a, 2 * i.col + b) for a, b in CHILD_OFFSETS]


def parent(tree: IndexTree, i: TokenIndex) -> TokenIndex:
    tree._check_index(i)
    if i.level <= 1:
        raise ValueError(f"{i} is on the coarsest level and has no parent")
    return TokenIndex(i.level - 1, i.row // 2, i.col // 2)


def child_slot(i: TokenIndex) -> int:
    """Slot of ``i`` inside its parent's 2x2 block."""
    return 2 * (i.row % 2) + (i.col % 2)


def neighbors(tree: IndexTree, i: TokenIndex) -> list[TokenIndex]:
    """Same-level tokens in the window centred on ``i`` (clipped, self included, row-major)."""
    tree._check_index(i)
    s = tree.side(i.level)
    h = tree.window(i.level) // 2
    return [
        TokenIndex(i.level, a, b)
        for a in range(max(0, i.row - h), min(s, i.row + h + 1))
        for b in range(max(0, i.col - h), min(s, i.col + h + 1))
    ]
