"""Training loop: Adam with decoupled weight decay, one-cycle schedule,
train/val/test protocol and per-epoch spectral-bias tracking."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import read_dataset
from .diffcore import ParamStore
from .model import (HanoConfig, ModelState, backward, forward, init_params, save_checkpoint,
                    with_normalization)
from .spectral import (SpectrumReport, dominant_frequencies, freq_error_spectrum, rel_h1,
                       rel_h1_backward, rel_l2, rel_l2_backward)

log = logging.getLogger(__name__)

HISTORY_HEADER = ["epoch", "train_loss", "train_l2", "test_l2", "train_h1", "test_h1", "lr", "seconds"]


@dataclass(frozen=True)
class TrainConfig:
    max_lr: float = 1e-3
    final_lr: float = 1e-5
    weight_decay: float = 1e-4
    batch_size: int = 4
    epochs: int = 50
    loss: str = "h1"
    seed: int = 0
    n_train: int = 100
    n_val: int = 10
    n_test: int = 20
    warmup: float = 0.3
    start_factor: float = 25.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    spectrum_k: int = 20
    eval_batch: int = 32

    def __post_init__(self):
        if self.max_lr < 0 or self.final_lr < 0 or self.weight_decay < 0:
            raise ValueError("learning rates and weight decay must be non-negative")
        if self.final_lr > self.max_lr:
            raise ValueError(f"final_lr {self.final_lr} exceeds max_lr {self.max_lr}")
        if self.loss not in ("l2", "h1"):
            raise ValueError(f"loss must be 'l2' or 'h1', got {self.loss!r}")
        if self.batch_size < 1 or self.epochs < 1 or self.n_train < 1 or self.n_test < 0 or self.n_val < 0:
            raise ValueError("batch_size, epochs, n_train must be >= 1 and split sizes >= 0")
        if not 0.0 < self.warmup < 1.0 or self.start_factor < 1.0:
            raise ValueError("warmup must lie in (0, 1) and start_factor >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# --- optimisation -----------------------------------------------------------

class AdamState:
    def __init__(self, store: ParamStore):
        self.m = {k: np.zeros_like(v) for k, v in store.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in store.params.items()}
        self.t = 0


def adam_step(params: ParamStore, state: AdamState, lr: float, betas=(0.9, 0.999),
              eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """In-place Adam update with bias correction and decoupled weight decay."""
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.params.items():
        g = params.grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            p -= lr * weight_decay * p
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def one_cycle_lr(step: int, total_steps: int, max_lr: float = 1e-3, final_lr: float = 1e-5,
                 warmup: float = 0.3, start_factor: float = 25.0) -> float:
    """Linear warm-up from max_lr/start_factor to max_lr, then cosine annealing to final_lr."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    if total_steps == 1:
        return max_lr
    peak = warmup * total_steps
    if step <= peak:
        start = max_lr / start_factor
        return start + (max_lr - start) * step / peak
    t = (step - peak) / (total_steps - 1 - peak)
    return final_lr + (max_lr - final_lr) * 0.5 * (1.0 + math.cos(math.pi * t))


# --- losses and evaluation ---------------------------------------------------

def batch_loss(state: ModelState, a: np.ndarray, u: np.ndarray, loss: str = "h1"):
    """Mean relative loss over a batch and its parameter gradients."""
    pred, cache = forward(state, a, keep_cache=True)
    if loss == "h1":
        err, ec = rel_h1(pred, u)
        dpred = rel_h1_backward(np.full(len(err), 1.0 / len(err)), ec)
    elif loss == "l2":
        err, ec = rel_l2(pred, u)
        dpred = rel_l2_backward(np.full(len(err), 1.0 / len(err)), ec)
    else:
        raise ValueError(f"unknown loss {loss!r}")
    return float(err.mean()), backward(state, dpred, cache)


def predict(state: ModelState, a: np.ndarray, batch: int = 32) -> np.ndarray:
    return np.concatenate([forward(state, a[i:i + batch]) for i in range(0, len(a), batch)])


def evaluate(state: ModelState, a: np.ndarray, u: np.ndarray, batch: int = 32, preds=None):
    """(mean relative L2, mean relative H1) over the samples of a split."""
    if len(a) == 0:
        raise ValueError("cannot evaluate an empty split")
    if preds is None:
        preds = predict(state, a, batch)
    return float(rel_l2(preds, u)[0].mean()), float(rel_h1(preds, u)[0].mean())


# --- history -----------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_l2: float
    test_l2: float
    train_h1: float
    test_h1: float
    lr: float
    seconds: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    spectrum: SpectrumReport | None = None
    val_metric: list[float] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HISTORY_HEADER)
            for r in self.records:
                w.writerow([r.epoch] + [repr(float(getattr(r, k))) for k in HISTORY_HEADER[1:]])


def read_history_csv(path) -> TrainHistory:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        if next(reader) != HISTORY_HEADER:
            raise ValueError(f"{path} is not a training history file")
        recs = [EpochRecord(int(row[0]), *map(float, row[1:])) for row in reader]
    return TrainHistory(recs)


# --- training ----------------------------------------------------------------

@dataclass
class Splits:
    a_train: np.ndarray
    u_train: np.ndarray
    a_val: np.ndarray
    u_val: np.ndarray
    a_test: np.ndarray
    u_test: np.ndarray


def split_dataset(samples: np.ndarray, cfg: TrainConfig) -> Splits:
    """Fixed, disjoint train/val/test split in file order."""
    need = cfg.n_train + cfg.n_val + cfg.n_test
    if need > len(samples):
        raise ValueError(f"splits need {need} samples, dataset holds {len(samples)}")
    a, u = samples[:, 0], samples[:, 1]
    i, j = cfg.n_train, cfg.n_train + cfg.n_val
    return Splits(a[:i], u[:i], a[i:j], u[i:j], a[j:need], u[j:need])


def train(model_cfg: HanoConfig, data, cfg: TrainConfig, out_dir=None):
    """Train from a dataset path (or a ``(N, 2, n, n)`` sample array).

    Returns ``(best_state, history, last_state)``; the best state is picked by
    the validation error of the selected loss (training error when there is no
    validation split).  With ``out_dir`` the history and spectrum CSVs and the
    ``best.hck`` / ``last.hck`` checkpoints are rewritten after every epoch.
    """
    if isinstance(data, (str, Path)):
        _, samples = read_dataset(data)
    else:
        samples = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(samples)):
        raise ValueError("dataset contains non-finite values")
    sp = split_dataset(samples, cfg)
    n = samples.shape[-1]
    model_cfg = with_normalization(model_cfg, sp.a_train, sp.u_train, n)
    state = init_params(model_cfg, cfg.seed)
    opt = AdamState(state.params)
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = math.ceil(cfg.n_train / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    freqs = dominant_frequencies(sp.u_train, min(cfg.spectrum_k, n * n))
    history = TrainHistory(spectrum=SpectrumReport(freqs))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    best_metric, best_params = math.inf, state.params.copy()
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(cfg.n_train)
        losses = []
        lr = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            lr = one_cycle_lr(step, total, cfg.max_lr, cfg.final_lr, cfg.warmup, cfg.start_factor)
            loss, grads = batch_loss(state, sp.a_train[idx], sp.u_train[idx], cfg.loss)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise FloatingPointError(
                    f"non-finite loss/gradient at epoch {epoch}, step {step} (lr={lr:.3e}, loss={loss})")
            state.params.zero_grad()
            state.params.accumulate(grads)
            adam_step(state.params, opt, lr, (cfg.beta1, cfg.beta2), cfg.eps, cfg.weight_decay)
            losses.append(loss)
            step += 1
        p_train = predict(state, sp.a_train, cfg.eval_batch)
        tr_l2, tr_h1 = evaluate(state, sp.a_train, sp.u_train, preds=p_train)
        if cfg.n_test:
            p_test = predict(state, sp.a_test, cfg.eval_batch)
            te_l2, te_h1 = evaluate(state, sp.a_test, sp.u_test, preds=p_test)
        else:
            p_test, te_l2, te_h1 = None, math.nan, math.nan
        if cfg.n_val:
            va_l2, va_h1 = evaluate(state, sp.a_val, sp.u_val, cfg.eval_batch)
        else:
            va_l2, va_h1 = tr_l2, tr_h1
        metric = va_h1 if cfg.loss == "h1" else va_l2
        history.val_metric.append(metric)
        if metric < best_metric:
            best_metric, best_params = metric, state.params.copy()
        history.spectrum.add(epoch, "train", freq_error_spectrum(p_train, sp.u_train, freqs=freqs)[1])
        if p_test is not None:
            history.spectrum.add(epoch, "test", freq_error_spectrum(p_test, sp.u_test, freqs=freqs)[1])
        rec = EpochRecord(epoch, float(np.mean(losses)), tr_l2, te_l2, tr_h1, te_h1, lr,
                          time.perf_counter() - t0)
        history.records.append(rec)
        log.info("epoch %d loss %.4e train_l2 %.4e test_l2 %.4e test_h1 %.4e lr %.2e",
                 epoch, rec.train_loss, tr_l2, te_l2, te_h1, lr)
        if out is not None:
            history.write_csv(out / "history.csv")
            history.spectrum.write_csv(out / "spectrum.csv")
            save_checkpoint(out / "last.hck", state)
            save_checkpoint(out / "best.hck", ModelState(model_cfg, best_params))
    return ModelState(model_cfg, best_params), history, state
