"""Hierarchically nested attention: reduce, per-level local attention,
decompose & mix, and the V-cycle that strings them together.

Token fields are arrays of shape ``(B, s, s, C)``: a batch of ``s x s`` token
grids with ``C`` channels.  Level ``m`` of an :class:`IndexTree` has
``s = tree.side(m)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .diffcore import softmax_rows, softmax_rows_backward
from .hierarchy import CHILD_OFFSETS, IndexTree


@dataclass
class LevelParams:
    """Learnable tensors of one V-cycle.

    ``rq[m-1]``, ``rk[m-1]``, ``rv[m-1]`` and ``d[m-1]`` hold the four child-slot
    matrices of level ``m`` stacked as ``(4, C_m, C_{m+1})``.
    """

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    rq: list[np.ndarray] = field(default_factory=list)
    rk: list[np.ndarray] = field(default_factory=list)
    rv: list[np.ndarray] = field(default_factory=list)
    d: list[np.ndarray] = field(default_factory=list)

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(r.shape[1] for r in self.rq) + (self.wq.shape[0],)

    @property
    def levels(self) -> int:
        return len(self.rq) + 1

    def zeros_like(self) -> "LevelParams":
        z = np.zeros_like
        return LevelParams(z(self.wq), z(self.wk), z(self.wv),
                           [z(a) for a in self.rq], [z(a) for a in self.rk],
                           [z(a) for a in self.rv], [z(a) for a in self.d])

    def validate(self, tree: IndexTree | None = None) -> None:
        widths = self.widths
        r = self.levels
        for name in ("rk", "rv", "d"):
            if len(getattr(self, name)) != r - 1:
                raise ValueError(f"{name} has {len(getattr(self, name))} levels, expected {r - 1}")
        for w in (self.wq, self.wk, self.wv):
            if w.shape != (widths[-1], widths[-1]):
                raise ValueError(f"projection shape {w.shape} != {(widths[-1],) * 2}")
        for m in range(1, r):
            want = (4, widths[m - 1], widths[m])
            for name in ("rq", "rk", "rv", "d"):
                got = getattr(self, name)[m - 1].shape
                if got != want:
                    raise ValueError(f"{name} level {m} has shape {got}, expected {want}")
        if tree is not None and tree.levels != r:
            raise ValueError(f"tree has {tree.levels} levels, parameters have {r}")


def random_level_params(widths: Sequence[int], rng: np.random.Generator,
                        scale: float = 1.0) -> LevelParams:
    """Gaussian parameters, handy for tests and oracle checks."""
    widths = list(widths)
    c = widths[-1]

    def mat(*shape):
        return scale * rng.standard_normal(shape) / np.sqrt(shape[-1])

    r = len(widths)
    return LevelParams(
        mat(c, c), mat(c, c), mat(c, c),
        [mat(4, widths[m - 1], widths[m]) for m in range(1, r)],
        [mat(4, widths[m - 1], widths[m]) for m in range(1, r)],
        [mat(4, widths[m - 1], widths[m]) for m in range(1, r)],
        [mat(4, widths[m - 1], widths[m]) for m in range(1, r)],
    )


class FlopCounter:
    """Tally of multiply-add operations, split by kind."""

    def __init__(self):
        self.counts: dict[str, int] = {}

    def add(self, kind: str, n: int) -> None:
        self.counts[kind] = self.counts.get(kind, 0) + int(n)

    @property
    def total(self) -> int:
        return sum(self.counts.values())


def _tokens(x: np.ndarray) -> int:
    return int(np.prod(x.shape[:-1]))


def qkv(f: np.ndarray, wq: np.ndarray, wk: np.ndarray, wv: np.ndarray, counter=None):
    c = f.shape[-1]
    if wq.shape[1] != c or wk.shape[1] != c or wv.shape[1] != c:
        raise ValueError(f"token width {c} does not match projections {wq.shape}")
    if counter is not None:
        counter.add("qkv", 3 * _tokens(f) * c * wq.shape[0])
    return f @ wq.T, f @ wk.T, f @ wv.T


def _outer_sum(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """sum over tokens of a_t b_t^T."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def reduce_level(fine: np.ndarray, R: np.ndarray, counter=None) -> np.ndarray:
    """Aggregate each 2x2 block of children into its parent: sum_s R_s @ child_s."""
    if fine.shape[1] < 2 or fine.shape[1] % 2:
        raise ValueError(f"cannot reduce a level of side {fine.shape[1]}")
    if R.shape[0] != 4 or R.shape[2] != fine.shape[-1]:
        raise ValueError(f"reduce matrices {R.shape} incompatible with width {fine.shape[-1]}")
    out = None
    for s, (a, b) in enumerate(CHILD_OFFSETS):
        term = fine[:, a::2, b::2, :] @ R[s].T
        out = term if out is None else out + term
    if counter is not None:
        counter.add("reduce", _tokens(fine) * R.shape[1] * R.shape[2])
    return out


def reduce_level_backward(dcoarse: np.ndarray, fine: np.ndarray, R: np.ndarray):
    """Return (dfine, dR)."""
    dfine = np.empty_like(fine)
    dR = np.empty_like(R)
    for s, (a, b) in enumerate(CHILD_OFFSETS):
        child = fine[:, a::2, b::2, :]
        dfine[:, a::2, b::2, :] = dcoarse @ R[s]
        dR[s] = _outer_sum(dcoarse, child)
    return dfine, dR


def decompose_mix(coarse_h: np.ndarray, fine_h: np.ndarray, D: np.ndarray, counter=None) -> np.ndarray:
    """Add D_s^T h_parent onto every child (i, s); returns a new fine field."""
    if fine_h.shape[1] != 2 * coarse_h.shape[1] or fine_h.shape[0] != coarse_h.shape[0]:
        raise ValueError(f"levels not adjacent: coarse {coarse_h.shape}, fine {fine_h.shape}")
    if D.shape != (4, coarse_h.shape[-1], fine_h.shape[-1]):
        raise ValueError(f"decompose matrices {D.shape} incompatible with widths")
    out = fine_h.copy()
    for s, (a, b) in enumerate(CHILD_OFFSETS):
        out[:, a::2, b::2, :] += coarse_h @ D[s]
    if counter is not None:
        counter.add("decompose", _tokens(fine_h) * D.shape[1] * D.shape[2])
    return out


def decompose_mix_backward(dout: np.ndarray, coarse_h: np.ndarray, D: np.ndarray):
    """Return (dcoarse, dfine, dD)."""
    dcoarse = np.zeros_like(coarse_h)
    dD = np.empty_like(D)
    for s, (a, b) in enumerate(CHILD_OFFSETS):
        g = dout[:, a::2, b::2, :]
        dcoarse += g @ D[s].T
        dD[s] = _outer_sum(coarse_h, g)
    return dcoarse, dout, dD


def _window_offsets(window: int) -> list[tuple[int, int]]:
    h = window // 2
    return [(di, dj) for di in range(-h, h + 1) for dj in range(-h, h + 1)]


def _spans(s: int, d: int) -> tuple[slice, slice]:
    """(destination, source) slices so that dest[i] = src[i + d] where valid."""
    return slice(max(0, -d), min(s, s - d)), slice(max(0, d), min(s, s + d))


def _shift(x: np.ndarray, di: int, dj: int) -> np.ndarray:
    s = x.shape[1]
    out = np.zeros_like(x)
    ri, rs = _spans(s, di)
    ci, cs = _spans(s, dj)
    out[:, ri, ci] = x[:, rs, cs]
    return out


def _unshift_add(acc: np.ndarray, g: np.ndarray, di: int, dj: int) -> None:
    s = acc.shape[1]
    ri, rs = _spans(s, di)
    ci, cs = _spans(s, dj)
    acc[:, rs, cs] += g[:, ri, ci]


def _valid(s: int, di: int, dj: int) -> np.ndarray:
    m = np.zeros((s, s), dtype=bool)
    ri, _ = _spans(s, di)
    ci, _ = _spans(s, dj)
    m[ri, ci] = True
    return m


def local_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, window: int,
                    normalize: bool = True, scale: bool = True, counter=None):
    """Windowed attention on one level: h_i = sum_{j in N(i)} G(q_i, k_j) v_j.

    G = exp(q.k / sqrt(C)) (``scale`` toggles the 1/sqrt(C)), softmax-normalised
    over the clipped window when ``normalize`` is set.  Returns ``(h, cache)``.
    """
    if q.shape != k.shape or q.shape[:-1] != v.shape[:-1]:
        raise ValueError(f"q {q.shape}, k {k.shape}, v {v.shape} are not on one level")
    s = q.shape[1]
    alpha = 1.0 / np.sqrt(q.shape[-1]) if scale else 1.0
    offsets = _window_offsets(window)
    masks = np.stack([_valid(s, di, dj) for di, dj in offsets], axis=-1)
    ks = [_shift(k, di, dj) for di, dj in offsets]
    vs = [_shift(v, di, dj) for di, dj in offsets]
    scores = np.stack([np.sum(q * kk, axis=-1) for kk in ks], axis=-1) * alpha
    if normalize:
        weights, _ = softmax_rows(scores, np.broadcast_to(masks, scores.shape))
    else:
        weights = np.where(masks, np.exp(scores), 0.0)
    h = np.zeros(v.shape, dtype=np.result_type(v, weights))
    for o, vv in enumerate(vs):
        h += weights[..., o, None] * vv
    if counter is not None:
        counter.add("attention", int(masks.sum()) * q.shape[0] * (q.shape[-1] + v.shape[-1]))
    cache = (q, ks, vs, weights, offsets, alpha, normalize)
    return h, cache


def local_attention_backward(dh: np.ndarray, cache):
    """Return (dq, dk, dv)."""
    q, ks, vs, weights, offsets, alpha, normalize = cache
    dweights = np.stack([np.sum(dh * vv, axis=-1) for vv in vs], axis=-1)
    if normalize:
        dscores = softmax_rows_backward(dweights, weights)
    else:
        dscores = dweights * weights
    dscores = dscores * alpha
    dq = np.zeros_like(q)
    dk = np.zeros_like(q)
    dv = np.zeros_like(vs[0])
    for o, (di, dj) in enumerate(offsets):
        ds = dscores[..., o, None]
        dq += ds * ks[o]
        _unshift_add(dk, ds * q, di, dj)
        _unshift_add(dv, weights[..., o, None] * dh, di, dj)
    return dq, dk, dv


def v_cycle(f: np.ndarray, params: LevelParams, tree: IndexTree,
            normalize: bool = True, scale: bool = True, counter=None):
    """One hierarchically nested attention pass over finest-level tokens ``f``.

    Returns ``(h, cache)`` with ``h`` on the finest level.
    """
    r = tree.levels
    params.validate(tree)
    if f.ndim != 4 or f.shape[1] != tree.side(r) or f.shape[2] != tree.side(r):
        raise ValueError(f"tokens {f.shape} do not match finest level side {tree.side(r)}")
    q, k, v = {}, {}, {}
    q[r], k[r], v[r] = qkv(f, params.wq, params.wk, params.wv, counter)
    for m in range(r - 1, 0, -1):
        q[m] = reduce_level(q[m + 1], params.rq[m - 1], counter)
        k[m] = reduce_level(k[m + 1], params.rk[m - 1], counter)
        v[m] = reduce_level(v[m + 1], params.rv[m - 1], counter)
    h, att = {}, {}
    for m in range(r, 0, -1):
        h[m], att[m] = local_attention(q[m], k[m], v[m], tree.window(m), normalize, scale, counter)
    for m in range(1, r):
        h[m + 1] = decompose_mix(h[m], h[m + 1], params.d[m - 1], counter)
    cache = (f, params, tree, q, k, v, h, att)
    return h[r], cache


def v_cycle_backward(dout: np.ndarray, cache):
    """Return (df, grads) where grads is a :class:`LevelParams` of gradients."""
    f, params, tree, q, k, v, h, att = cache
    r = tree.levels
    g = params.zeros_like()
    dh = {r: dout}
    for m in range(r - 1, 0, -1):
        dcoarse, dfine, g.d[m - 1] = decompose_mix_backward(dh[m + 1], h[m], params.d[m - 1])
        dh[m + 1] = dfine
        dh[m] = dcoarse
    dq, dk, dv = {}, {}, {}
    for m in range(1, r + 1):
        dq[m], dk[m], dv[m] = local_attention_backward(dh[m], att[m])
    for m in range(1, r):
        a, g.rq[m - 1] = reduce_level_backward(dq[m], q[m + 1], params.rq[m - 1])
        dq[m + 1] += a
        a, g.rk[m - 1] = reduce_level_backward(dk[m], k[m + 1], params.rk[m - 1])
        dk[m + 1] += a
        a, g.rv[m - 1] = reduce_level_backward(dv[m], v[m + 1], params.rv[m - 1])
        dv[m + 1] += a
    f2 = f.reshape(-1, f.shape[-1])
    g.wq = dq[r].reshape(-1, dq[r].shape[-1]).T @ f2
    g.wk = dk[r].reshape(-1, dk[r].shape[-1]).T @ f2
    g.wv = dv[r].reshape(-1, dv[r].shape[-1]).T @ f2
    df = dq[r] @ params.wq + dk[r] @ params.wk + dv[r] @ params.wv
    return df, g


def dense_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                    normalize: bool = True, scale: bool = True, counter=None) -> np.ndarray:
    """All-pairs attention over tokens ``(..., N, C)``; O(N^2) by construction."""
    alpha = 1.0 / np.sqrt(q.shape[-1]) if scale else 1.0
    scores = (q @ np.swapaxes(k, -1, -2)) * alpha
    if normalize:
        weights, _ = softmax_rows(scores)
    else:
        weights = np.exp(scores)
    if counter is not None:
        n = q.shape[-2]
        counter.add("attention", n * n * int(np.prod(q.shape[:-2])) * (q.shape[-1] + v.shape[-1]))
    return weights @ v
