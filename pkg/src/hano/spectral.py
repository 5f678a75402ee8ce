"""Unitary 2-D DFT, relative L2 / H1 losses and the per-frequency error spectrum.

Coefficients are stored in numpy FFT layout; :func:`frequencies` gives the
integer frequency of every slot, with the Nyquist index reported as +n/2 so
that each axis covers (-n/2, n/2].
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


def frequencies(n: int) -> np.ndarray:
    """Integer frequencies of the DFT slots along one axis, in (-n/2, n/2]."""
    xi = np.rint(np.fft.fftfreq(n) * n).astype(int)
    if n % 2 == 0:
        xi[xi == -n // 2] = n // 2
    return xi


def freq_weights(n: int, include_l2: bool = False) -> np.ndarray:
    """|xi|^2 on the n x n frequency grid (plus 1 when ``include_l2``)."""
    xi = frequencies(n)
    w = (xi[:, None] ** 2 + xi[None, :] ** 2).astype(np.float64)
    return w + 1.0 if include_l2 else w


def _check_square(f: np.ndarray) -> int:
    if f.ndim < 2 or f.shape[-1] != f.shape[-2]:
        raise ValueError(f"expected square fields in the last two axes, got shape {f.shape}")
    return f.shape[-1]


def dft2(f: np.ndarray, method: str = "fft") -> np.ndarray:
    """F(f)(xi) = (1/n) sum_x f(x) exp(-2 pi i x.xi / n) over the last two axes.

    ``method="direct"`` evaluates the sums with explicit DFT matrices.
    """
    n = _check_square(f)
    if method == "fft":
        return np.fft.fft2(f, norm="ortho")
    if method == "direct":
        xi = frequencies(n)
        x = np.arange(n)
        M = np.exp(-2j * np.pi * np.outer(xi, x) / n) / np.sqrt(n)
        return M @ f @ M.T
    raise ValueError(f"unknown DFT method {method!r}")


def idft2(F: np.ndarray) -> np.ndarray:
    return np.fft.ifft2(F, norm="ortho")


def h_norm(u: np.ndarray, include_l2: bool = False) -> np.ndarray:
    """sqrt(sum_xi |xi|^2 |F(u)(xi)|^2) per field."""
    n = _check_square(u)
    F = dft2(u)
    return np.sqrt(np.sum(freq_weights(n, include_l2) * np.abs(F) ** 2, axis=(-2, -1)))


def rel_l2(pred: np.ndarray, target: np.ndarray):
    """Per-sample ||target - pred|| / ||target||; returns (errors, cache)."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    tnorm = np.sqrt(np.sum(target ** 2, axis=(-2, -1)))
    if np.any(tnorm == 0.0):
        raise ValueError("relative L2 error undefined: target has zero l2 norm")
    diff = pred - target
    enorm = np.sqrt(np.sum(diff ** 2, axis=(-2, -1)))
    return enorm / tnorm, (diff, enorm, tnorm)


def rel_l2_backward(derr: np.ndarray, cache) -> np.ndarray:
    """Gradient w.r.t. pred given the gradient w.r.t. each per-sample error."""
    diff, enorm, tnorm = cache
    safe = np.where(enorm > 0, enorm, 1.0)
    coef = np.where(enorm > 0, derr / (safe * tnorm), 0.0)
    return coef[..., None, None] * diff


def rel_h1(pred: np.ndarray, target: np.ndarray, include_l2: bool = False):
    """Per-sample ||target - pred||_h / ||target||_h; returns (errors, cache)."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    n = _check_square(target)
    w = freq_weights(n, include_l2)
    tnorm = np.sqrt(np.sum(w * np.abs(dft2(target)) ** 2, axis=(-2, -1)))
    if np.any(tnorm == 0.0):
        raise ValueError("relative H1 error undefined: target has zero h-seminorm (constant field)")
    E = dft2(pred - target)
    enorm = np.sqrt(np.sum(w * np.abs(E) ** 2, axis=(-2, -1)))
    return enorm / tnorm, (E, w, enorm, tnorm)


def rel_h1_backward(derr: np.ndarray, cache) -> np.ndarray:
    """The seminorm is a weighted l2 norm after a unitary map, so its gradient
    is the adjoint transform of the weighted coefficients."""
    E, w, enorm, tnorm = cache
    safe = np.where(enorm > 0, enorm, 1.0)
    coef = np.where(enorm > 0, derr / (safe * tnorm), 0.0)
    return coef[..., None, None] * np.real(idft2(w * E))


@dataclass
class SpectrumReport:
    """Mean absolute DFT error per retained frequency, per epoch and split."""

    freqs: list[tuple[int, int]]
    rows: list[tuple[int, str, int, int, float]] = field(default_factory=list)

    def add(self, epoch: int, split: str, errors) -> None:
        if len(errors) != len(self.freqs):
            raise ValueError(f"{len(errors)} errors for {len(self.freqs)} frequencies")
        for (x1, x2), e in zip(self.freqs, errors):
            self.rows.append((int(epoch), split, int(x1), int(x2), float(e)))

    def table(self, split: str) -> tuple[list[int], np.ndarray]:
        """(epochs, errors[epoch, freq]) for one split."""
        epochs = sorted({r[0] for r in self.rows if r[1] == split})
        pos = {f: j for j, f in enumerate(self.freqs)}
        out = np.zeros((len(epochs), len(self.freqs)))
        ei = {e: i for i, e in enumerate(epochs)}
        for e, s, x1, x2, v in self.rows:
            if s == split:
                out[ei[e], pos[(x1, x2)]] = v
        return epochs, out

    def write_csv(self, path) -> None:
        write_spectrum_csv(path, self.rows)


def dominant_frequencies(targets, K: int = 20) -> list[tuple[int, int]]:
    """The K frequencies with largest mean |F(u)(xi)|, ties broken by xi."""
    targets = np.asarray(targets, dtype=np.float64)
    if targets.ndim == 2:
        targets = targets[None]
    if len(targets) == 0:
        raise ValueError("no target fields given")
    n = _check_square(targets)
    if K < 1 or K > n * n:
        raise ValueError(f"K={K} must lie in [1, {n * n}]")
    mag = np.abs(dft2(targets)).mean(axis=0)
    xi = frequencies(n)
    cand = [(-mag[a, b], int(xi[a]), int(xi[b])) for a in range(n) for b in range(n)]
    cand.sort()
    return [(x1, x2) for _, x1, x2 in cand[:K]]


def _slots(n: int, freqs) -> tuple[np.ndarray, np.ndarray]:
    xi = frequencies(n)
    pos = {int(v): i for i, v in enumerate(xi)}
    return (np.array([pos[f[0]] for f in freqs]), np.array([pos[f[1]] for f in freqs]))


def freq_error_spectrum(preds, targets, K: int = 20, freqs=None):
    """Mean over samples of |F(u - pred)(xi)| at the K dominating frequencies.

    Returns ``(freqs, errors)``.  ``freqs`` may be fixed in advance (e.g. from
    the training targets) so that rows from different splits line up.
    """
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.ndim == 2:
        preds, targets = preds[None], targets[None]
    if len(preds) == 0 or len(targets) == 0:
        raise ValueError("empty prediction or target list")
    if preds.shape != targets.shape:
        raise ValueError(f"shape mismatch {preds.shape} vs {targets.shape}")
    n = _check_square(targets)
    if freqs is None:
        freqs = dominant_frequencies(targets, K)
    a, b = _slots(n, freqs)
    err = np.abs(dft2(targets - preds))[:, a, b].mean(axis=0)
    return list(freqs), err


def target_spectrum(targets, freqs) -> np.ndarray:
    """Mean |F(u)(xi)| of the targets at the given frequencies (used to normalise errors)."""
    targets = np.asarray(targets, dtype=np.float64)
    if targets.ndim == 2:
        targets = targets[None]
    a, b = _slots(targets.shape[-1], freqs)
    return np.abs(dft2(targets))[:, a, b].mean(axis=0)


SPECTRUM_HEADER = ["epoch", "split", "xi1", "xi2", "mean_abs_err"]


def write_spectrum_csv(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SPECTRUM_HEADER)
        for epoch, split, x1, x2, err in rows:
            w.writerow([epoch, split, x1, x2, repr(float(err))])


def read_spectrum_csv(path) -> SpectrumReport:
    rows = []
    with open(Path(path), newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != SPECTRUM_HEADER:
            raise ValueError(f"unexpected spectrum header {header}")
        for epoch, split, x1, x2, err in reader:
            rows.append((int(epoch), split, int(x1), int(x2), float(err)))
    freqs = []
    for r in rows:
        if (r[2], r[3]) not in freqs:
            freqs.append((r[2], r[3]))
    return SpectrumReport(freqs=freqs, rows=rows)
