"""Explicit block-matrix form of the nested attention (small instances only).

The V-cycle computes ``h = G_h v`` with

    G_h = sum_{m<r} D^(r-1)T ... D^(m)T G_loc^(m) R^(m) ... R^(r-1) + G_loc^(r)

where ``R^(m)``/``D^(m)`` are block-sparse transfer matrices and
``G_loc^(m)`` holds the windowed attention weights of level ``m``.  Vectors
are flattened token-major (row-major over the grid), channel-minor.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .hattn import LevelParams, reduce_level
from .hierarchy import CHILD_OFFSETS, IndexTree

MAX_TOKENS = 4096


def _check_size(tree: IndexTree) -> None:
    n = tree.size(tree.levels)
    if n > MAX_TOKENS:
        raise ValueError(f"{n} finest tokens exceeds the dense materialisation guard of {MAX_TOKENS}")


def transfer_matrix(blocks: np.ndarray, coarse_side: int) -> sp.csr_matrix:
    """Block-sparse matrix with ``blocks[s]`` at (parent i, child (i, s)).

    ``blocks`` has shape ``(4, C_coarse, C_fine)``; the result maps a flattened
    fine field to a flattened coarse field.
    """
    _, cc, cf = blocks.shape
    fine_side = 2 * coarse_side
    rows, cols, vals = [], [], []
    ri, ci = np.meshgrid(np.arange(cc), np.arange(cf), indexing="ij")
    for a in range(coarse_side):
        for b in range(coarse_side):
            parent = a * coarse_side + b
            for s, (da, db) in enumerate(CHILD_OFFSETS):
                child = (2 * a + da) * fine_side + (2 * b + db)
                rows.append((parent * cc + ri).ravel())
                cols.append((child * cf + ci).ravel())
                vals.append(blocks[s].ravel())
    shape = (coarse_side ** 2 * cc, fine_side ** 2 * cf)
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=shape)


def local_attention_matrix(q: np.ndarray, k: np.ndarray, window: int,
                           normalize: bool = False, scale: bool = False) -> np.ndarray:
    """Dense N x N windowed attention weights of one level (``q``, ``k``: (s, s, C))."""
    s = q.shape[0]
    c = q.shape[-1]
    alpha = 1.0 / np.sqrt(c) if scale else 1.0
    rows, cols = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
    rows, cols = rows.ravel(), cols.ravel()
    h = window // 2
    near = (np.abs(rows[:, None] - rows[None, :]) <= h) & (np.abs(cols[:, None] - cols[None, :]) <= h)
    qf = q.reshape(-1, c)
    kf = k.reshape(-1, c)
    scores = (qf @ kf.T) * alpha
    if normalize:
        scores = np.where(near, scores, -np.inf)
        scores = scores - scores.max(axis=1, keepdims=True)
        g = np.exp(scores)
        return g / g.sum(axis=1, keepdims=True)
    return np.where(near, np.exp(scores), 0.0)


def level_contributions(params: LevelParams, tree: IndexTree, q: np.ndarray, k: np.ndarray,
                        normalize: bool = False, scale: bool = False) -> dict[int, np.ndarray]:
    """Dense contribution of every level to G_h, keyed by level."""
    _check_size(tree)
    params.validate(tree)
    r = tree.levels
    widths = params.widths
    qs = {r: q[None]}
    ks = {r: k[None]}
    for m in range(r - 1, 0, -1):
        qs[m] = reduce_level(qs[m + 1], params.rq[m - 1])
        ks[m] = reduce_level(ks[m + 1], params.rk[m - 1])
    R = {m: transfer_matrix(params.rv[m - 1], tree.side(m)) for m in range(1, r)}
    D = {m: transfer_matrix(params.d[m - 1], tree.side(m)) for m in range(1, r)}
    out = {}
    for m in range(1, r + 1):
        g = local_attention_matrix(qs[m][0], ks[m][0], tree.window(m), normalize, scale)
        mat = sp.kron(sp.csr_matrix(g), sp.identity(widths[m - 1]), format="csr")
        for j in range(m, r):
            mat = D[j].T @ mat @ R[j]
        out[m] = mat.toarray()
    return out


def materialize_gh(params: LevelParams, tree: IndexTree, q: np.ndarray, k: np.ndarray,
                   normalize: bool = False, scale: bool = False) -> np.ndarray:
    """Assemble G_h for one sample; ``q``, ``k`` are finest-level (s, s, C) arrays."""
    return sum(level_contributions(params, tree, q, k, normalize, scale).values())


def numerical_rank(block: np.ndarray, rel_tol: float = 1e-10) -> int:
    sv = np.linalg.svd(block, compute_uv=False)
    if sv.size == 0 or sv[0] == 0.0:
        return 0
    return int(np.sum(sv > rel_tol * sv[0]))


def offdiag_rank_check(contribution: np.ndarray, tree: IndexTree, m: int, width: int,
                       rel_tol: float = 1e-10) -> int:
    """Largest numerical rank over the off-diagonal level-``m`` blocks of a contribution.

    A block couples the finest-level descendants of two distinct level-``m``
    tokens; ``width`` is the finest channel count.
    """
    r = tree.levels
    if m >= r:
        raise ValueError("the finest level contribution is window-sparse, not low rank")
    fine = tree.side(r)
    span = 2 ** (r - m)
    s = tree.side(m)

    def dofs(a: int, b: int) -> np.ndarray:
        rr, cc = np.meshgrid(np.arange(a * span, (a + 1) * span),
                             np.arange(b * span, (b + 1) * span), indexing="ij")
        tok = (rr * fine + cc).ravel()
        return (tok[:, None] * width + np.arange(width)[None, :]).ravel()

    cells = [(a, b) for a in range(s) for b in range(s)]
    idx = {c: dofs(*c) for c in cells}
    worst = 0
    for ci in cells:
        for cj in cells:
            if ci == cj:
                continue
            worst = max(worst, numerical_rank(contribution[np.ix_(idx[ci], idx[cj])], rel_tol))
    return worst


def flop_count(tree: IndexTree, widths) -> dict:
    """Closed-form V-cycle cost: per level w^2 |I^m| C^m + 2 |I^m| C^m C^(m-1)."""
    widths = list(widths)
    if len(widths) != tree.levels:
        raise ValueError(f"expected {tree.levels} widths, got {len(widths)}")
    per_level = []
    for m in range(1, tree.levels + 1):
        n = tree.size(m)
        cost = tree.window(m) ** 2 * n * widths[m - 1]
        if m > 1:
            cost += 2 * n * widths[m - 1] * widths[m - 2]
        per_level.append(cost)
    return {"per_level": per_level, "total": sum(per_level)}


def dense_flop_count(tokens: int, width: int) -> int:
    """All-pairs attention: scores plus weighted sum, N^2 (C + C)."""
    return 2 * tokens * tokens * width
