import numpy as np
import pytest

from hano.hattn import (FlopCounter, decompose_mix, dense_attention, local_attention,
                        local_attention_backward, qkv, random_level_params, reduce_level,
                        v_cycle, v_cycle_backward)
from hano.hierarchy import TokenIndex, build_tree, children, neighbors


def naive_local(q, k, v, window, normalize, scale):
    """Per-token loop over the clipped window; the reference for local_attention."""
    tree = build_tree(q.shape[1], 1, (window,))
    alpha = 1 / np.sqrt(q.shape[-1]) if scale else 1.0
    h = np.zeros_like(v)
    for b in range(q.shape[0]):
        for i in tree.tokens(1):
            nb = neighbors(tree, i)
            w = np.array([np.exp(alpha * q[b, i.row, i.col] @ k[b, j.row, j.col]) for j in nb])
            if normalize:
                w = w / w.sum()
            h[b, i.row, i.col] = sum(wj * v[b, j.row, j.col] for wj, j in zip(w, nb))
    return h


@pytest.mark.parametrize("window", [1, 3, 5])
@pytest.mark.parametrize("normalize,scale", [(True, True), (False, False), (True, False)])
def test_local_attention_matches_loop(rng, window, normalize, scale):
    q, k, v = (rng.standard_normal((2, 6, 6, 3)) * 0.5 for _ in range(3))
    h, _ = local_attention(q, k, v, window, normalize, scale)
    np.testing.assert_allclose(h, naive_local(q, k, v, window, normalize, scale), atol=1e-13)


def test_full_window_is_dense(rng):
    q, k, v = (rng.standard_normal((1, 4, 4, 3)) for _ in range(3))
    h, _ = local_attention(q, k, v, 7)
    d = dense_attention(q.reshape(1, 16, 3), k.reshape(1, 16, 3), v.reshape(1, 16, 3))
    np.testing.assert_allclose(h.reshape(1, 16, 3), d, atol=1e-13)


def test_reduce_and_decompose_match_tree(rng):
    tree = build_tree(4, 2)
    fine = rng.standard_normal((1, 4, 4, 3))
    R = rng.standard_normal((4, 2, 3))
    D = rng.standard_normal((4, 2, 3))
    coarse = reduce_level(fine, R)
    ch = rng.standard_normal((1, 2, 2, 2))
    mixed = decompose_mix(ch, fine, D)
    for i in tree.tokens(1):
        want = sum(R[s] @ fine[0, c.row, c.col] for s, c in enumerate(children(tree, i)))
        np.testing.assert_allclose(coarse[0, i.row, i.col], want)
        for s, c in enumerate(children(tree, i)):
            np.testing.assert_allclose(mixed[0, c.row, c.col], fine[0, c.row, c.col] + D[s].T @ ch[0, i.row, i.col])


def test_reduce_rejects_odd():
    with pytest.raises(ValueError):
        reduce_level(np.zeros((1, 3, 3, 2)), np.zeros((4, 2, 2)))


def _fd_check(fn, x, grad, rng, samples=12, h=1e-6):
    for _ in range(samples):
        i = tuple(rng.integers(0, s) for s in x.shape)
        o = x[i]
        x[i] = o + h
        p = fn()
        x[i] = o - h
        m = fn()
        x[i] = o
        assert abs((p - m) / (2 * h) - grad[i]) < 1e-6 * max(1.0, abs(grad[i]))


@pytest.mark.parametrize("normalize", [True, False])
def test_local_attention_backward(rng, normalize):
    q, k, v = (rng.standard_normal((1, 4, 4, 2)) * 0.5 for _ in range(3))
    w = rng.standard_normal((1, 4, 4, 2))
    h, cache = local_attention(q, k, v, 3, normalize)
    dq, dk, dv = local_attention_backward(w, cache)
    loss = lambda: float(np.sum(local_attention(q, k, v, 3, normalize)[0] * w))
    for x, g in ((q, dq), (k, dk), (v, dv)):
        _fd_check(loss, x, g, rng)


@pytest.mark.parametrize("levels", [1, 2, 3])
def test_v_cycle_backward(rng, levels):
    tree = build_tree(8, levels)
    p = random_level_params([3] * levels, rng, 0.5)
    f = rng.standard_normal((2, 8, 8, 3)) * 0.5
    w = rng.standard_normal((2, 8, 8, 3))
    _, cache = v_cycle(f, p, tree)
    df, g = v_cycle_backward(w, cache)
    loss = lambda: float(np.sum(v_cycle(f, p, tree)[0] * w))
    _fd_check(loss, f, df, rng)
    _fd_check(loss, p.wq, g.wq, rng)
    _fd_check(loss, p.wv, g.wv, rng)
    for m in range(levels - 1):
        for name in ("rq", "rk", "rv", "d"):
            _fd_check(loss, getattr(p, name)[m], getattr(g, name)[m], rng, samples=4)


def test_v_cycle_validates(rng):
    p = random_level_params([3, 3], rng)
    with pytest.raises(ValueError):
        v_cycle(np.zeros((1, 8, 8, 3)), p, build_tree(8, 3))
    with pytest.raises(ValueError):
        v_cycle(np.zeros((1, 4, 4, 3)), p, build_tree(8, 2))


def test_flop_counter_scales(rng):
    p = random_level_params([4, 4, 4], rng)
    totals = []
    for s in (16, 32):
        c = FlopCounter()
        v_cycle(rng.standard_normal((1, s, s, 4)), p, build_tree(s, 3), counter=c)
        totals.append(c.total)
        assert set(c.counts) == {"qkv", "reduce", "attention", "decompose"}
    assert 3.5 <= totals[1] / totals[0] <= 4.5


def test_qkv_width_check(rng):
    with pytest.raises(ValueError):
        qkv(np.zeros((1, 2, 2, 3)), *(np.zeros((3, 4)),) * 3)
