import numpy as np
import pytest
from dataclasses import replace

from hano.hattn import qkv, random_level_params, v_cycle
from hano.hierarchy import build_tree
from hano.hmatrix import (dense_flop_count, flop_count, level_contributions, materialize_gh,
                          numerical_rank, offdiag_rank_check, transfer_matrix)


def _setup(rng, side, levels, width):
    tree = build_tree(side, levels)
    p = random_level_params([width] * levels, rng, 0.5)
    f = 0.5 * rng.standard_normal((1, side, side, width))
    return tree, p, f, qkv(f, p.wq, p.wk, p.wv)


@pytest.mark.parametrize("levels", [1, 2, 3])
def test_oracle_matches_v_cycle(rng, levels):
    tree, p, f, (q, k, v) = _setup(rng, 8, levels, 3)
    G = materialize_gh(p, tree, q[0], k[0])
    h, _ = v_cycle(f, p, tree, normalize=False, scale=False)
    assert np.abs(G @ v.reshape(-1) - h.reshape(-1)).max() < 1e-12


def test_oracle_detects_corruption(rng):
    tree, p, f, (q, k, v) = _setup(rng, 8, 2, 2)
    G = materialize_gh(p, tree, q[0], k[0])
    bad = replace(p, d=[p.d[0] + 1e-3])
    h, _ = v_cycle(f, bad, tree, normalize=False, scale=False)
    assert np.abs(G @ v.reshape(-1) - h.reshape(-1)).max() > 1e-8


def test_transfer_matrix_is_reduce(rng):
    from hano.hattn import reduce_level
    fine = rng.standard_normal((1, 4, 4, 3))
    R = rng.standard_normal((4, 2, 3))
    np.testing.assert_allclose(transfer_matrix(R, 2) @ fine.reshape(-1), reduce_level(fine, R).reshape(-1))


def test_offdiag_ranks_bounded(rng):
    tree, p, f, (q, k, v) = _setup(rng, 8, 3, 2)
    contrib = level_contributions(p, tree, q[0], k[0])
    for m in (1, 2):
        assert 1 <= offdiag_rank_check(contrib[m], tree, m, 2) <= 2
    with pytest.raises(ValueError):
        offdiag_rank_check(contrib[3], tree, 3, 2)


def test_numerical_rank():
    a = np.outer([1.0, 2, 3], [1.0, 0, 1]) + np.outer([0.0, 1, 0], [1.0, 1, 1])
    assert numerical_rank(a) == 2
    assert numerical_rank(np.zeros((3, 3))) == 0


def test_size_guard(rng):
    tree = build_tree(128, 2)
    p = random_level_params([1, 1], rng)
    with pytest.raises(ValueError):
        level_contributions(p, tree, np.zeros((128, 128, 1)), np.zeros((128, 128, 1)))


def test_flop_ratios():
    prev = None
    for s in (16, 32, 64, 128):
        tot = flop_count(build_tree(s, 5), [32] * 5)["total"]
        if prev:
            assert 3.5 <= tot / prev <= 5.0
        prev = tot
    assert dense_flop_count(32 * 32, 8) / dense_flop_count(16 * 16, 8) == 16
    with pytest.raises(ValueError):
        flop_count(build_tree(16, 2), [4])
