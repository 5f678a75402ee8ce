import numpy as np
import pytest
from dataclasses import replace

from hano import fileformat
from hano.diffcore import grad_check
from hano.model import (HanoConfig, TOY_CONFIG, eval_at_resolution, forward, init_params,
                        load_checkpoint, param_count, patchify, save_checkpoint, unpatchify)
from hano.trainer import batch_loss


def test_param_count_matches_store():
    for cfg in (TOY_CONFIG, HanoConfig(), HanoConfig(levels=2, widths=(4, 6), windows=(3, 5), mlp_ratio=0)):
        assert init_params(cfg).params.count() == param_count(cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        HanoConfig(levels=2, widths=(4,), windows=(3, 3))
    with pytest.raises(ValueError):
        HanoConfig(levels=1, widths=(4,), windows=(4,))
    with pytest.raises(ValueError):
        HanoConfig.from_dict({"levels": 1, "bogus": 2})
    with pytest.raises(ValueError):
        TOY_CONFIG.token_side(60)
    assert HanoConfig.from_dict(TOY_CONFIG.to_dict()) == TOY_CONFIG


def test_patchify_roundtrip(rng):
    x = rng.standard_normal((2, 8, 8, 3))
    t = patchify(x, 4)
    assert t.shape == (2, 2, 2, 48)
    np.testing.assert_array_equal(t[0, 1, 0, :3], x[0, 4, 0])
    np.testing.assert_array_equal(unpatchify(t, 4, 3), x)


def test_forward_shapes_and_determinism(rng):
    s = init_params(TOY_CONFIG, seed=3, zero_decoder=False)
    a = rng.standard_normal((2, 32, 32))
    u = forward(s, a)
    assert u.shape == (2, 32, 32) and np.all(np.isfinite(u))
    np.testing.assert_array_equal(u, forward(init_params(TOY_CONFIG, seed=3, zero_decoder=False), a))
    # zero decoder starts from the constant (bias) prediction
    assert np.all(forward(init_params(TOY_CONFIG, seed=3), a) == 0)
    with pytest.raises(ValueError):
        forward(s, rng.standard_normal((2, 36, 36)))


@pytest.mark.parametrize("loss", ["l2", "h1"])
def test_model_gradients(tiny_config, rng, loss):
    s = init_params(replace(tiny_config, mlp_ratio=1), seed=1, zero_decoder=False)
    a = rng.standard_normal((2, 16, 16))
    u = rng.standard_normal((2, 16, 16))
    names = ["embed.W", "cycle0.wq", "cycle0.rk1", "cycle0.d2", "cycle0.ln.scale", "cycle0.mlp1.W",
             "decoder.W", "decoder.b"]
    assert grad_check(lambda st: batch_loss(replace(s, params=st), a, u, loss), s.params,
                      names=names) < 1e-5


def test_checkpoint_roundtrip(tmp_path):
    s = init_params(replace(TOY_CONFIG, resolution=32), seed=5, zero_decoder=False)
    save_checkpoint(tmp_path / "m.hck", s)
    t = load_checkpoint(tmp_path / "m.hck")
    assert t.config == s.config
    assert t.params.names() == s.params.names()
    for n in s.params.names():
        assert t.params[n].tobytes() == s.params[n].tobytes()
    raw = bytearray((tmp_path / "m.hck").read_bytes())
    raw[-100] ^= 0x10
    (tmp_path / "bad.hck").write_bytes(bytes(raw))
    with pytest.raises(fileformat.FormatError):
        load_checkpoint(tmp_path / "bad.hck")


def test_eval_at_resolution(rng):
    s = init_params(replace(TOY_CONFIG, resolution=32), seed=0, zero_decoder=False)
    a = rng.standard_normal((1, 32, 32))
    np.testing.assert_array_equal(eval_at_resolution(s, a), forward(s, a))
    assert eval_at_resolution(s, rng.standard_normal((1, 63, 63))).shape == (1, 63, 63)
