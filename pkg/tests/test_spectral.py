import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from hano.spectral import (SpectrumReport, dft2, dominant_frequencies, freq_error_spectrum,
                           frequencies, h_norm, idft2, read_spectrum_csv, rel_h1, rel_h1_backward,
                           rel_l2, rel_l2_backward, target_spectrum)


def dft_oracle(f):
    """O(n^4) quadruple sum with the (-n/2, n/2] frequency convention."""
    n = f.shape[0]
    xi = frequencies(n)
    F = np.zeros((n, n), complex)
    for a in range(n):
        for b in range(n):
            for x1 in range(n):
                for x2 in range(n):
                    F[a, b] += f[x1, x2] * np.exp(-2j * np.pi * (x1 * xi[a] + x2 * xi[b]) / n)
    return F / n


@pytest.mark.parametrize("n", [4, 5, 8])
def test_dft_matches_oracle(rng, n):
    f = rng.standard_normal((n, n))
    np.testing.assert_allclose(dft2(f), dft_oracle(f), atol=1e-12)
    np.testing.assert_allclose(dft2(f, "direct"), dft_oracle(f), atol=1e-12)


def test_frequencies():
    assert list(frequencies(4)) == [0, 1, 2, -1]
    assert list(frequencies(5)) == [0, 1, 2, -2, -1]


def test_inverse(rng):
    f = rng.standard_normal((3, 8, 8))
    np.testing.assert_allclose(idft2(dft2(f)).real, f, atol=1e-13)


def test_h_norm_of_mode():
    n = 16
    x = np.arange(n)
    u = np.cos(2 * np.pi * 3 * x / n)[:, None] * np.ones(n)[None, :]
    # energy sits at xi = (+-3, 0): seminorm^2 = 9 * ||u||^2
    np.testing.assert_allclose(h_norm(u), 3 * np.linalg.norm(u))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (6, 6), elements=st.floats(-10, 10)), st.floats(-100, 100))
def test_rel_h1_constant_shift(u, c):
    if h_norm(u) < 1e-6:
        return
    p = u + np.linspace(-1, 1, 36).reshape(6, 6)
    e1, _ = rel_h1(p, u)
    e2, _ = rel_h1(p + c, u + c)
    np.testing.assert_allclose(e1, e2, rtol=1e-9, atol=1e-12)


def test_errors_on_degenerate_targets():
    with pytest.raises(ValueError):
        rel_h1(np.zeros((4, 4)), np.ones((4, 4)))
    with pytest.raises(ValueError):
        rel_l2(np.ones((4, 4)), np.zeros((4, 4)))
    with pytest.raises(ValueError):
        rel_l2(np.ones((4, 4)), np.ones((4, 5)))


@pytest.mark.parametrize("which", ["l2", "h1"])
def test_loss_backward(rng, which):
    fn, bw = (rel_l2, rel_l2_backward) if which == "l2" else (rel_h1, rel_h1_backward)
    p, u = rng.standard_normal((2, 6, 6)), rng.standard_normal((2, 6, 6))
    w = np.array([0.3, -1.2])
    e, cache = fn(p, u)
    g = bw(w, cache)
    h = 1e-6
    for i in np.ndindex(p.shape):
        o = p[i]
        p[i] = o + h
        fp = float(fn(p, u)[0] @ w)
        p[i] = o - h
        fm = float(fn(p, u)[0] @ w)
        p[i] = o
        assert abs((fp - fm) / (2 * h) - g[i]) < 1e-6


def test_zero_error_gradient_is_finite(rng):
    u = rng.standard_normal((4, 4))
    _, cache = rel_h1(u.copy(), u)
    assert np.all(rel_h1_backward(np.ones(()), cache) == 0)


def test_dominant_frequencies_and_spectrum(rng):
    n = 16
    x = np.arange(n)
    u = (5 + 2 * np.cos(2 * np.pi * x / n))[:, None] * np.ones(n)[None, :]
    u = np.stack([u, u])
    fr = dominant_frequencies(u, 3)
    assert fr[0] == (0, 0)
    assert set(fr[1:]) == {(1, 0), (-1, 0)}
    freqs, err = freq_error_spectrum(np.zeros_like(u), u, freqs=fr)
    np.testing.assert_allclose(err, target_spectrum(u, fr))
    with pytest.raises(ValueError):
        dominant_frequencies(u, 0)


def test_spectrum_csv_roundtrip(tmp_path):
    rep = SpectrumReport([(0, 0), (1, -1)])
    rep.add(1, "train", [0.5, 0.25])
    rep.add(1, "test", [0.125, 1e-17])
    rep.write_csv(tmp_path / "s.csv")
    raw = (tmp_path / "s.csv").read_bytes()
    assert b"\r" not in raw and raw.startswith(b"epoch,split,xi1,xi2,mean_abs_err\n")
    back = read_spectrum_csv(tmp_path / "s.csv")
    assert back.rows == rep.rows and back.freqs == rep.freqs
    ep, tab = back.table("test")
    assert ep == [1] and tab[0, 0] == 0.125
    with pytest.raises(ValueError):
        rep.add(2, "train", [1.0])
