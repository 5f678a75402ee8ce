"""The full network: patch embedding, k nested-attention cycles, unpatchify decoder.

One cycle maps tokens ``t`` to ``t + LN(vcycle(t))`` followed by a residual
token-wise GELU feed-forward block (disabled with ``mlp_ratio=0``).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import fileformat
from .data import bilinear_resample
from .diffcore import (ParamStore, affine, affine_backward, gelu, gelu_backward,
                       layer_norm, layer_norm_backward)
from .hattn import LevelParams, v_cycle, v_cycle_backward
from .hierarchy import IndexTree, build_tree

CHECKPOINT_MAGIC = b"HANOCK01"


@dataclass(frozen=True)
class HanoConfig:
    levels: int = 5
    widths: tuple = (32, 32, 32, 32, 32)
    windows: tuple = (3, 3, 3, 3, 3)
    patch: int = 4
    cycles: int = 2
    mlp_ratio: int = 2
    normalize: bool = True
    scale: bool = True
    coords: bool = True
    d_a: int = 1
    d_u: int = 1
    resolution: int | None = None
    input_shift: float = 0.0
    input_scale: float = 1.0
    output_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "windows", tuple(int(w) for w in self.windows))
        self.validate()

    @property
    def d_in(self) -> int:
        return self.d_a + (2 if self.coords else 0)

    @property
    def width(self) -> int:
        return self.widths[-1]

    def validate(self) -> None:
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if len(self.widths) != self.levels or len(self.windows) != self.levels:
            raise ValueError("widths and windows need one entry per level")
        if any(w < 1 for w in self.widths):
            raise ValueError(f"channel widths must be positive: {self.widths}")
        if any(w < 1 or w % 2 == 0 for w in self.windows):
            raise ValueError(f"window sizes must be odd positive integers: {self.windows}")
        if self.patch < 1 or self.cycles < 1 or self.mlp_ratio < 0:
            raise ValueError("patch and cycles must be >= 1, mlp_ratio >= 0")
        if self.d_a < 1 or self.d_u < 1:
            raise ValueError("channel counts d_a, d_u must be >= 1")
        if self.input_scale <= 0 or self.output_scale <= 0:
            raise ValueError("input_scale and output_scale must be positive")
        if self.resolution is not None:
            self.token_side(self.resolution)

    def token_side(self, n: int) -> int:
        if n % self.patch:
            raise ValueError(f"resolution {n} is not divisible by patch size {self.patch}")
        s = n // self.patch
        if s % 2 ** (self.levels - 1):
            raise ValueError(f"token grid side {s} is not divisible by 2**{self.levels - 1}")
        return s

    def tree(self, n: int) -> IndexTree:
        return build_tree(self.token_side(n), self.levels, self.windows)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["windows"] = list(self.windows)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HanoConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


TOY_CONFIG = HanoConfig(levels=3, widths=(8, 8, 8), windows=(3, 3, 3), patch=4, cycles=2)


@dataclass
class ModelState:
    config: HanoConfig
    params: ParamStore = field(default_factory=ParamStore)


def _shapes(cfg: HanoConfig) -> list[tuple[str, tuple, str]]:
    """(name, shape, kind) for every parameter; kind in weight/bias/ones."""
    C = cfg.width
    pp = cfg.patch * cfg.patch
    out = [("embed.W", (C, pp * cfg.d_in), "weight"), ("embed.b", (C,), "bias")]
    for c in range(cfg.cycles):
        pre = f"cycle{c}."
        out += [(pre + n, (C, C), "weight") for n in ("wq", "wk", "wv")]
        for m in range(1, cfg.levels):
            shape = (4, cfg.widths[m - 1], cfg.widths[m])
            out += [(f"{pre}{n}{m}", shape, n) for n in ("rq", "rk", "rv", "d")]
        out += [(pre + "ln.scale", (C,), "ones"), (pre + "ln.shift", (C,), "bias")]
        if cfg.mlp_ratio:
            H = cfg.mlp_ratio * C
            out += [(pre + "mlp1.W", (H, C), "weight"), (pre + "mlp1.b", (H,), "bias"),
                    (pre + "mlp2.W", (C, H), "weight"), (pre + "mlp2.b", (C,), "bias")]
    out += [("decoder.W", (pp * cfg.d_u, C), "weight"), ("decoder.b", (pp * cfg.d_u,), "bias")]
    return out


def param_count(cfg: HanoConfig) -> int:
    """Closed-form parameter count."""
    C, pp, r = cfg.width, cfg.patch ** 2, cfg.levels
    transfer = 4 * 4 * sum(cfg.widths[m - 1] * cfg.widths[m] for m in range(1, r))
    mlp = 2 * cfg.mlp_ratio * C * C + cfg.mlp_ratio * C + C if cfg.mlp_ratio else 0
    per_cycle = 3 * C * C + transfer + 2 * C + mlp
    return (C * pp * cfg.d_in + C) + cfg.cycles * per_cycle + (pp * cfg.d_u * C + pp * cfg.d_u)


def init_params(cfg: HanoConfig, seed: int = 0, zero_decoder: bool = True) -> ModelState:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases zero; LN scales one.

    The decoder weight starts at zero unless ``zero_decoder`` is False: a
    random unpatchify map injects patch-scale noise that the H1 loss then
    spends most of a short schedule removing.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for name, shape, kind in _shapes(cfg):
        if kind == "bias":
            value = np.zeros(shape)
        elif kind == "ones":
            value = np.ones(shape)
        else:
            # transfer matrices (4, C_m, C_m+1): reduce sums 4 children, decompose reads one parent
            fan_in = shape[-1] if kind == "weight" else (4 * shape[2] if kind != "d" else shape[1])
            bound = 1.0 / np.sqrt(fan_in)
            value = rng.uniform(-bound, bound, size=shape)
            if zero_decoder and name == "decoder.W":
                value = np.zeros(shape)
        store.add(name, value)
    return ModelState(cfg, store)


def level_params(store: ParamStore, cfg: HanoConfig, c: int) -> LevelParams:
    pre = f"cycle{c}."
    r = range(1, cfg.levels)
    return LevelParams(store[pre + "wq"], store[pre + "wk"], store[pre + "wv"],
                       [store[f"{pre}rq{m}"] for m in r], [store[f"{pre}rk{m}"] for m in r],
                       [store[f"{pre}rv{m}"] for m in r], [store[f"{pre}d{m}"] for m in r])


def _level_grads(g: LevelParams, cfg: HanoConfig, c: int) -> dict[str, np.ndarray]:
    pre = f"cycle{c}."
    out = {pre + "wq": g.wq, pre + "wk": g.wk, pre + "wv": g.wv}
    for m in range(1, cfg.levels):
        out[f"{pre}rq{m}"] = g.rq[m - 1]
        out[f"{pre}rk{m}"] = g.rk[m - 1]
        out[f"{pre}rv{m}"] = g.rv[m - 1]
        out[f"{pre}d{m}"] = g.d[m - 1]
    return out


def _as_channels(a: np.ndarray, d: int) -> np.ndarray:
    """Accept (n, n), (B, n, n) or (B, n, n, d) and return (B, n, n, d)."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    if a.ndim == 3:
        a = a[..., None]
    if a.ndim != 4 or a.shape[-1] != d or a.shape[1] != a.shape[2]:
        raise ValueError(f"expected input of shape (B, n, n[, {d}]), got {a.shape}")
    return a


def input_features(cfg: HanoConfig, a: np.ndarray) -> np.ndarray:
    """Normalised coefficient plus (x1, x2) grid coordinates in [0, 1]."""
    a = (_as_channels(a, cfg.d_a) - cfg.input_shift) / cfg.input_scale
    if not cfg.coords:
        return a
    B, n = a.shape[0], a.shape[1]
    x = np.linspace(0.0, 1.0, n)
    x1, x2 = np.meshgrid(x, x, indexing="ij")
    xy = np.broadcast_to(np.stack([x1, x2], axis=-1), (B, n, n, 2))
    return np.concatenate([a, xy], axis=-1)


def patchify(x: np.ndarray, p: int) -> np.ndarray:
    """(B, n, n, d) -> (B, n/p, n/p, p*p*d), flattened in (row, col, channel) order."""
    B, n, _, d = x.shape
    if n % p:
        raise ValueError(f"resolution {n} is not divisible by patch size {p}")
    s = n // p
    return x.reshape(B, s, p, s, p, d).transpose(0, 1, 3, 2, 4, 5).reshape(B, s, s, p * p * d)


def unpatchify(t: np.ndarray, p: int, d: int) -> np.ndarray:
    B, s = t.shape[0], t.shape[1]
    return t.reshape(B, s, s, p, p, d).transpose(0, 1, 3, 2, 4, 5).reshape(B, s * p, s * p, d)


def patch_embed(state: ModelState, a: np.ndarray):
    """Non-overlapping p x p patches -> one affine map -> finest-level tokens."""
    cfg = state.config
    feats = input_features(cfg, a)
    cfg.token_side(feats.shape[1])
    patches = patchify(feats, cfg.patch)
    return affine(state.params["embed.W"], state.params["embed.b"], patches)


def forward(state: ModelState, a: np.ndarray, keep_cache: bool = False):
    """Predict u on the input grid.  Returns (B, n, n) for scalar outputs.

    With ``keep_cache`` the result is ``(u, cache)`` for :func:`backward`.
    """
    cfg = state.config
    P = state.params
    t, emb_cache = patch_embed(state, a)
    tree = cfg.tree(t.shape[1] * cfg.patch)
    cycles = []
    for c in range(cfg.cycles):
        pre = f"cycle{c}."
        h, vc = v_cycle(t, level_params(P, cfg, c), tree, cfg.normalize, cfg.scale)
        l, ln = layer_norm(h, P[pre + "ln.scale"], P[pre + "ln.shift"])
        t = t + l
        mlp = None
        if cfg.mlp_ratio:
            z, a1 = affine(P[pre + "mlp1.W"], P[pre + "mlp1.b"], t)
            g, gc = gelu(z)
            y, a2 = affine(P[pre + "mlp2.W"], P[pre + "mlp2.b"], g)
            t = t + y
            mlp = (a1, gc, a2)
        cycles.append((vc, ln, mlp))
    y, dec = affine(P["decoder.W"], P["decoder.b"], t)
    u = unpatchify(y, cfg.patch, cfg.d_u) * cfg.output_scale
    if cfg.d_u == 1:
        u = u[..., 0]
    if keep_cache:
        return u, (emb_cache, cycles, dec)
    return u


def backward(state: ModelState, du: np.ndarray, cache) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every parameter, given dL/du."""
    cfg = state.config
    emb_cache, cycles, dec = cache
    du = np.asarray(du, dtype=np.float64)
    if cfg.d_u == 1:
        du = du[..., None]
    grads: dict[str, np.ndarray] = {}
    dy = patchify(du * cfg.output_scale, cfg.patch)
    grads["decoder.W"], grads["decoder.b"], dt = affine_backward(dy, dec)
    for c in range(cfg.cycles - 1, -1, -1):
        pre = f"cycle{c}."
        vc, ln, mlp = cycles[c]
        if mlp is not None:
            a1, gc, a2 = mlp
            grads[pre + "mlp2.W"], grads[pre + "mlp2.b"], dg = affine_backward(dt, a2)
            dz = gelu_backward(dg, gc)
            grads[pre + "mlp1.W"], grads[pre + "mlp1.b"], dx = affine_backward(dz, a1)
            dt = dt + dx
        dh, grads[pre + "ln.scale"], grads[pre + "ln.shift"] = layer_norm_backward(dt, ln)
        df, g = v_cycle_backward(dh, vc)
        grads.update(_level_grads(g, cfg, c))
        dt = dt + df
    grads["embed.W"], grads["embed.b"], _ = affine_backward(dt, emb_cache)
    return grads


def eval_at_resolution(state: ModelState, a: np.ndarray) -> np.ndarray:
    """Resample the input to the training resolution, predict, resample back."""
    cfg = state.config
    a = np.asarray(a, dtype=np.float64)
    n_in = a.shape[-1] if cfg.d_a == 1 else a.shape[-2]
    if cfg.resolution is None or n_in == cfg.resolution:
        return forward(state, a)
    if cfg.d_a != 1 or cfg.d_u != 1:
        raise ValueError("resolution transfer is implemented for scalar fields only")
    u = forward(state, bilinear_resample(a, cfg.resolution))
    return bilinear_resample(u, n_in)


def save_checkpoint(path, state: ModelState) -> None:
    P = state.params
    names = P.names()
    meta = {"config": state.config.to_dict(),
            "params": [[name, list(P[name].shape)] for name in names]}
    payload = np.concatenate([P[name].ravel() for name in names]) if names else np.zeros(0)
    data = fileformat.pack(CHECKPOINT_MAGIC, len(names), state.config.resolution or 0, 0, meta, payload)
    fileformat.atomic_write(path, data)


def load_checkpoint(path) -> ModelState:
    with open(path, "rb") as fh:
        data = fh.read()
    count, _, _, meta, payload = fileformat.unpack(data, CHECKPOINT_MAGIC)
    cfg = HanoConfig.from_dict(meta["config"])
    store = ParamStore()
    pos = 0
    for name, shape in meta["params"]:
        size = int(np.prod(shape))
        if pos + size > payload.size:
            raise fileformat.FormatError("checkpoint payload shorter than its parameter table")
        store.add(name, payload[pos:pos + size].reshape(shape))
        pos += size
    if pos != payload.size or count != len(store):
        raise fileformat.FormatError("checkpoint payload does not match its parameter table")
    return ModelState(cfg, store)


def with_normalization(cfg: HanoConfig, a: np.ndarray, u: np.ndarray, resolution: int) -> HanoConfig:
    """Config whose input/output scaling is fitted to training data."""
    a = np.asarray(a, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    return replace(cfg, resolution=resolution, input_shift=float(a.mean()),
                   input_scale=float(a.std()) or 1.0, output_scale=float(np.sqrt(np.mean(u * u))) or 1.0)
