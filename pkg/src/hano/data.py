"""Multiscale elliptic benchmark data.

Fields live on node grids that include the boundary: ``n`` points per axis
spanning the domain ([0, 1] for Darcy, [-1, 1] for the trigonometric case).
Solutions satisfy -div(a grad u) = f with u = 0 on the boundary.
"""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial

import numpy as np
import scipy.sparse as sp

from . import fileformat

log = logging.getLogger(__name__)

DATASET_MAGIC = b"HANODS01"
TRIG_TERMS = 6


class ConvergenceError(RuntimeError):
    def __init__(self, iterations: int, residual: float):
        super().__init__(f"CG did not converge in {iterations} iterations "
                         f"(relative residual {residual:.3e})")
        self.iterations = iterations
        self.residual = residual


def node_grid(n: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    return np.linspace(lo, hi, n)


# --- Gaussian random fields ------------------------------------------------

def kl_eigenvalues(M: int, c: float) -> np.ndarray:
    """lambda_k = (pi^2 |k|^2 + c)^-2 for k in [0, M)^2."""
    k = np.arange(M)
    k2 = k[:, None] ** 2 + k[None, :] ** 2
    return (np.pi ** 2 * k2 + c) ** -2.0


def kl_basis(n: int, M: int) -> np.ndarray:
    """Neumann cosine modes eta_k cos(k pi x) on the unit node grid, shape (n, M)."""
    x = node_grid(n)
    k = np.arange(M)
    eta = np.where(k == 0, 1.0, np.sqrt(2.0))
    return eta[None, :] * np.cos(np.pi * x[:, None] * k[None, :])


def sample_grf(n: int, c: float, M: int = 64, rng=None) -> np.ndarray:
    """Draw a field from N(0, (-Lap + c)^-2) with zero Neumann data via a truncated KL sum."""
    if M < 1:
        raise ValueError(f"truncation M must be >= 1, got {M}")
    if c <= 0:
        raise ValueError(f"c must be positive, got {c}")
    rng = np.random.default_rng(rng)
    z = rng.standard_normal((M, M))
    phi = kl_basis(n, M)
    return phi @ (z * np.sqrt(kl_eigenvalues(M, c))) @ phi.T


def two_phase(x: np.ndarray, a_max: float, a_min: float) -> np.ndarray:
    """a_max where x > 0, a_min elsewhere (zero maps to a_min)."""
    return np.where(np.asarray(x) > 0, float(a_max), float(a_min))


# --- multiscale trigonometric coefficient ----------------------------------

def trig_frequencies(rng) -> np.ndarray:
    """a_k ~ U[2^(k-1), 1.5 * 2^(k-1)] for k = 1..6."""
    lo = 2.0 ** np.arange(TRIG_TERMS)
    return rng.uniform(lo, 1.5 * lo)


def trig_coefficient(n: int, rng=None, freqs: np.ndarray | None = None) -> np.ndarray:
    """prod_k (1 + cos(a_k pi (x1 + x2)) / 2)(1 + sin(a_k pi (x2 - 3 x1)) / 2) on (-1, 1)^2."""
    if freqs is None:
        freqs = trig_frequencies(np.random.default_rng(rng))
    x = node_grid(n, -1.0, 1.0)
    x1, x2 = np.meshgrid(x, x, indexing="ij")
    a = np.ones((n, n))
    for ak in freqs:
        a *= (1.0 + 0.5 * np.cos(ak * np.pi * (x1 + x2))) * (1.0 + 0.5 * np.sin(ak * np.pi * (x2 - 3.0 * x1)))
    return a


# --- finite-difference Darcy solver ----------------------------------------

def darcy_matrix(a: np.ndarray, h: float) -> sp.csr_matrix:
    """Five-point flux operator on the interior nodes, harmonic-mean edge coefficients.

    Rows are scaled by h^2, so the system reads A u = h^2 f.
    """
    n = a.shape[0]
    m = n - 2
    hx = 2.0 * a[:-1, :] * a[1:, :] / (a[:-1, :] + a[1:, :])   # edge (i+1/2, j)
    hy = 2.0 * a[:, :-1] * a[:, 1:] / (a[:, :-1] + a[:, 1:])   # edge (i, j+1/2)
    north = hx[:-1, 1:-1]   # between i-1 and i, interior i
    south = hx[1:, 1:-1]
    west = hy[1:-1, :-1]
    east = hy[1:-1, 1:]
    idx = np.arange(m * m).reshape(m, m)
    rows = [idx.ravel()]
    cols = [idx.ravel()]
    vals = [(north + south + west + east).ravel()]
    for coef, sl_from, sl_to in (
        (north[1:, :], idx[1:, :], idx[:-1, :]),
        (south[:-1, :], idx[:-1, :], idx[1:, :]),
        (west[:, 1:], idx[:, 1:], idx[:, :-1]),
        (east[:, :-1], idx[:, :-1], idx[:, 1:]),
    ):
        rows.append(sl_from.ravel())
        cols.append(sl_to.ravel())
        vals.append(-coef.ravel())
    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(m * m, m * m))
    return A


def pcg(A, b: np.ndarray, tol: float, maxiter: int):
    """Jacobi-preconditioned conjugate gradients; returns (x, iterations, relative residual)."""
    dinv = 1.0 / A.diagonal()
    x = np.zeros_like(b)
    r = b.copy()
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return x, 0, 0.0
    z = dinv * r
    p = z.copy()
    rz = r @ z
    res = 1.0
    for it in range(1, maxiter + 1):
        Ap = A @ p
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        if np.linalg.norm(r) <= tol * bnorm:
            # the recursive residual drifts from the true one; replace and restart if needed
            r = b - A @ x
            res = np.linalg.norm(r) / bnorm
            if res <= tol:
                return x, it, res
            z = dinv * r
            p = z.copy()
            rz = r @ z
            continue
        res = np.linalg.norm(r) / bnorm
        z = dinv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise ConvergenceError(maxiter, res)


@dataclass
class DarcySolution:
    u: np.ndarray
    iterations: int
    residual: float


def solve_darcy(a: np.ndarray, f: np.ndarray | float = 1.0, tol: float = 1e-10,
                length: float = 1.0, maxiter: int | None = None) -> DarcySolution:
    """Solve -div(a grad u) = f, u = 0 on the boundary, on an n x n node grid of side ``length``."""
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n) or n < 3:
        raise ValueError(f"coefficient must be square with side >= 3, got {a.shape}")
    if not np.all(a > 0):
        raise ValueError("coefficient must be strictly positive")
    f = np.broadcast_to(np.asarray(f, dtype=np.float64), (n, n))
    h = length / (n - 1)
    A = darcy_matrix(a, h)
    b = h * h * f[1:-1, 1:-1].ravel()
    x, it, res = pcg(A, b, tol, maxiter or 20 * n)
    u = np.zeros((n, n))
    u[1:-1, 1:-1] = x.reshape(n - 2, n - 2)
    return DarcySolution(u, it, res)


# --- resampling ------------------------------------------------------------

def _interp_matrix(n_old: int, n_new: int) -> np.ndarray:
    pos = np.linspace(0.0, n_old - 1, n_new)
    lo = np.clip(np.floor(pos).astype(int), 0, max(n_old - 2, 0))
    t = pos - lo
    P = np.zeros((n_new, n_old))
    rows = np.arange(n_new)
    if n_old == 1:
        P[:, 0] = 1.0
        return P
    P[rows, lo] += 1.0 - t
    P[rows, lo + 1] += t
    return P


def bilinear_resample(field: np.ndarray, new_n: int) -> np.ndarray:
    """Bilinear interpolation between node grids spanning the same square.

    Works on the last two axes, so batches and channels pass through.
    """
    if new_n < 2:
        raise ValueError(f"new_n must be >= 2, got {new_n}")
    field = np.asarray(field, dtype=np.float64)
    n = field.shape[-1]
    if n == new_n:
        return field.copy()
    P = _interp_matrix(n, new_n)
    return P @ field @ P.T


# --- datasets --------------------------------------------------------------

@dataclass
class DatasetHeader:
    generator: str
    seed: int
    resolution: int
    samples: int
    params: dict = field(default_factory=dict)
    fields: int = 2
    version: int = fileformat.VERSION


def sample_seed(seed: int, index: int) -> int:
    return int(seed) ^ int(index)


def darcy_sample(index: int, n: int, seed: int, a_max: float, a_min: float, c: float,
                 M: int, tol: float):
    rng = np.random.default_rng(sample_seed(seed, index))
    a = two_phase(sample_grf(n, c, M, rng), a_max, a_min)
    sol = solve_darcy(a, 1.0, tol)
    return a, sol.u, sol.residual


def trig_sample(index: int, n: int, seed: int, tol: float, refine: int = 2):
    """Coefficient at ``n`` nodes; solution computed on a grid refined ``refine`` times, then resampled."""
    rng = np.random.default_rng(sample_seed(seed, index))
    freqs = trig_frequencies(rng)
    a = trig_coefficient(n, freqs=freqs)
    nf = refine * (n - 1) + 1
    sol = solve_darcy(trig_coefficient(nf, freqs=freqs), 1.0, tol, length=2.0)
    return a, bilinear_resample(sol.u, n), sol.residual


def _run(fn, count: int, workers: int):
    if workers <= 1:
        return [fn(i) for i in range(count)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(count)))


def _assemble(results, header: DatasetHeader):
    samples = np.stack([np.stack([a, u]) for a, u, _ in results])
    residual = max(r for _, _, r in results)
    summary = {
        "generator": header.generator,
        "samples": header.samples,
        "resolution": header.resolution,
        "a_min": float(samples[:, 0].min()),
        "a_max": float(samples[:, 0].max()),
        "max_residual": float(residual),
    }
    return samples, summary


def generate_darcy(n: int, count: int, seed: int, a_max: float = 12.0, a_min: float = 3.0,
                   c: float = 9.0, M: int = 64, tol: float = 1e-10, workers: int = 1):
    """Two-phase Darcy dataset; returns (header, samples[count, 2, n, n], summary)."""
    fn = partial(darcy_sample, n=n, seed=seed, a_max=a_max, a_min=a_min, c=c, M=M, tol=tol)
    header = DatasetHeader("darcy", seed, n, count,
                           {"a_max": a_max, "a_min": a_min, "c": c, "M": M, "tol": tol})
    samples, summary = _assemble(_run(fn, count, workers), header)
    return header, samples, summary


def generate_trig(n: int, count: int, seed: int, tol: float = 1e-9, workers: int = 1):
    """Multiscale trigonometric dataset on (-1, 1)^2.

    The default tolerance is looser than for Darcy: with contrast ~1e4 the
    float64 residual floor on the refined grid sits near 1e-10.
    """
    fn = partial(trig_sample, n=n, seed=seed, tol=tol)
    header = DatasetHeader("trig", seed, n, count, {"terms": TRIG_TERMS, "refine": 2, "tol": tol})
    samples, summary = _assemble(_run(fn, count, workers), header)
    return header, samples, summary


def write_dataset(path, header: DatasetHeader, samples: np.ndarray) -> None:
    samples = np.asarray(samples, dtype=np.float64)
    want = (header.samples, header.fields, header.resolution, header.resolution)
    if samples.shape != want:
        raise ValueError(f"samples shape {samples.shape} does not match header {want}")
    meta = {"generator": header.generator, "seed": header.seed, "params": header.params}
    fileformat.atomic_write(path, fileformat.pack(DATASET_MAGIC, header.samples, header.resolution,
                                                  header.fields, meta, samples))


def read_dataset(path):
    """Return ``(header, samples)``; raises :class:`fileformat.FormatError` on damage."""
    with open(path, "rb") as fh:
        data = fh.read()
    count, n, fields, meta, payload = fileformat.unpack(data, DATASET_MAGIC)
    if payload.size != count * fields * n * n:
        raise fileformat.FormatError(
            f"payload holds {payload.size} values, header implies {count * fields * n * n}")
    header = DatasetHeader(meta["generator"], meta["seed"], n, count, meta.get("params", {}), fields)
    return header, payload.reshape(count, fields, n, n)
