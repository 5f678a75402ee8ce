"""Differentiable primitives with hand-written backward passes.

Every forward returns ``(out, cache)``; the matching ``*_backward`` takes the
upstream gradient and the cache.  Arrays are float64 throughout and carry an
arbitrary number of leading batch axes.
"""
from __future__ import annotations

from typing import Callable, Iterator, Mapping

import numpy as np
from scipy.special import erf

LN_EPS = 1e-5


class ParamStore:
    """Named parameter tensors, each with a gradient accumulator of the same shape."""

    def __init__(self, params: Mapping[str, np.ndarray] | None = None):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = np.array(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def accumulate(self, grads: Mapping[str, np.ndarray]) -> None:
        for name, g in grads.items():
            self.grads[name] += g

    def count(self) -> int:
        """Total number of scalar parameters."""
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, value in self.params.items():
            out.add(name, value.copy())
        return out


def _check_shape(W, x, b=None):
    if W.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise ValueError(f"affine: weight {W.shape} incompatible with input {x.shape}")
    if b is not None and b.shape != (W.shape[0],):
        raise ValueError(f"affine: bias {b.shape} does not match weight {W.shape}")


def affine(W: np.ndarray, b: np.ndarray | None, x: np.ndarray):
    """y = x @ W.T + b over the last axis."""
    _check_shape(W, x, b)
    y = x @ W.T
    if b is not None:
        y = y + b
    return y, (W, x, b is not None)


def affine_backward(dy: np.ndarray, cache):
    """Return (dW, db, dx); db is None for a bias-free map."""
    W, x, has_bias = cache
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dW = dy2.T @ x2
    db = dy2.sum(axis=0) if has_bias else None
    dx = dy @ W
    return dW, db, dx


def softmax_rows(z: np.ndarray, mask: np.ndarray | None = None):
    """Softmax over the last axis, stabilised by the row maximum.

    Entries where ``mask`` is False get weight exactly zero.
    """
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    zmax = np.max(z, axis=-1, keepdims=True)
    e = np.exp(z - zmax)
    p = e / e.sum(axis=-1, keepdims=True)
    return p, p


def softmax_rows_backward(dp: np.ndarray, p: np.ndarray) -> np.ndarray:
    return p * (dp - np.sum(dp * p, axis=-1, keepdims=True))


def gelu(x: np.ndarray):
    """Exact GELU, x * Phi(x)."""
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    return x * cdf, (x, cdf)


def gelu_backward(dy: np.ndarray, cache) -> np.ndarray:
    x, cdf = cache
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return dy * (cdf + x * pdf)


def layer_norm(x: np.ndarray, scale: np.ndarray, shift: np.ndarray, eps: float = LN_EPS):
    """Normalise over the last (channel) axis, then apply scale and shift."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * scale + shift, (xhat, inv, scale)


def layer_norm_backward(dy: np.ndarray, cache):
    """Return (dx, dscale, dshift)."""
    xhat, inv, scale = cache
    c = xhat.shape[-1]
    dxhat = dy * scale
    dx = inv / c * (c * dxhat - dxhat.sum(axis=-1, keepdims=True)
                    - xhat * np.sum(dxhat * xhat, axis=-1, keepdims=True))
    lead = tuple(range(dy.ndim - 1))
    return dx, np.sum(dy * xhat, axis=lead), np.sum(dy, axis=lead)


def grad_check(
    fn: Callable[[ParamStore], tuple[float, Mapping[str, np.ndarray]]],
    store: ParamStore,
    h: float = 1e-5,
    names: list[str] | None = None,
) -> float:
    """Compare analytic gradients against central differences.

    ``fn(store)`` must return ``(loss, grads)`` with ``grads`` keyed like the
    store.  The error for one tensor is ``|g - g_fd| / (|g_fd| + 1e-12)``
    measured in the Euclidean norm; the maximum over tensors is returned.
    The store is left unchanged.
    """
    if not 1e-7 <= h <= 1e-4:
        raise ValueError(f"step h={h} outside [1e-7, 1e-4]")
    _, grads = fn(store)
    worst = 0.0
    for name in names or store.names():
        p = store.params[name]
        analytic = np.asarray(grads.get(name, np.zeros_like(p)), dtype=np.float64)
        fd = np.zeros_like(p)
        flat = p.reshape(-1)
        fd_flat = fd.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            fp, _ = fn(store)
            flat[idx] = orig - h
            fm, _ = fn(store)
            flat[idx] = orig
            fd_flat[idx] = (fp - fm) / (2.0 * h)
        err = np.linalg.norm(analytic - fd) / (np.linalg.norm(fd) + 1e-12)
        worst = max(worst, float(err))
    return worst
