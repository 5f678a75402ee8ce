"""Command-line entry point: ``hano <command> [flags]``.

Machine-readable results go to stdout (CSV or one JSON line); logs go to
stderr.  Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

log = logging.getLogger("hano")


class UsageError(Exception):
    pass


def _default_seed() -> int:
    env = os.environ.get("HANO_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"HANO_SEED must be an integer, got {env!r}")


def _positive(name, value):
    if value is None or value < 1:
        raise UsageError(f"--{name} must be a positive integer")


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


# --- data generation -------------------------------------------------------

def cmd_gen_darcy(args):
    from .data import generate_darcy, write_dataset
    _positive("resolution", args.resolution)
    _positive("samples", args.samples)
    if args.resolution < 3:
        raise UsageError("--resolution must be at least 3")
    if not 0 < args.amin <= args.amax:
        raise UsageError("need 0 < --amin <= --amax")
    if args.c <= 0:
        raise UsageError("--c must be positive")
    header, samples, summary = generate_darcy(args.resolution, args.samples, args.seed, args.amax,
                                              args.amin, args.c, args.modes, args.tol, args.threads)
    write_dataset(args.out, header, samples)
    _emit(summary | {"out": str(args.out)})


def cmd_gen_trig(args):
    from .data import generate_trig, write_dataset
    _positive("resolution", args.resolution)
    _positive("samples", args.samples)
    if args.resolution < 3:
        raise UsageError("--resolution must be at least 3")
    header, samples, summary = generate_trig(args.resolution, args.samples, args.seed, args.tol, args.threads)
    write_dataset(args.out, header, samples)
    _emit(summary | {"out": str(args.out)})


# --- training / evaluation ---------------------------------------------------

def load_config(path, preset: str = "full"):
    """Model and train configs from JSON ``{"model": {...}, "train": {...}}``.

    Unknown keys at any level are errors; absent keys take the preset defaults.
    """
    from .model import TOY_CONFIG, HanoConfig
    from .trainer import TrainConfig
    model = TOY_CONFIG if preset == "toy" else HanoConfig()
    train = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        if not isinstance(doc, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = set(doc) - {"model", "train"}
        if unknown:
            raise UsageError(f"unknown config sections: {sorted(unknown)}")
        try:
            model = HanoConfig.from_dict(model.to_dict() | doc.get("model", {}))
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad model config: {exc}")
        train = doc.get("train", {})
    return model, train


def cmd_train(args):
    from .plots import plot_history, plot_spectrum
    from .spectral import target_spectrum
    from .data import read_dataset
    from .trainer import TrainConfig, split_dataset, train
    model_cfg, train_over = load_config(args.config, args.preset)
    over = dict(train_over)
    for key, val in (("loss", args.loss), ("epochs", args.epochs), ("batch_size", args.batch),
                     ("seed", args.seed), ("n_train", args.n_train), ("n_val", args.n_val),
                     ("n_test", args.n_test)):
        if val is not None:
            over[key] = val
    try:
        tcfg = TrainConfig.from_dict(over)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad train config: {exc}")
    out = Path(args.out)
    _, samples = read_dataset(args.data)
    try:
        split_dataset(samples, tcfg)
        model_cfg.token_side(samples.shape[-1])
    except ValueError as exc:
        raise UsageError(str(exc))
    best, history, _ = train(model_cfg, samples, tcfg, out)
    plot_history(history, out / "history.png")
    sp = split_dataset(samples, tcfg)
    ref_split, ref_u = ("test", sp.u_test) if tcfg.n_test else ("train", sp.u_train)
    plot_spectrum(history.spectrum, out / f"spectrum_{ref_split}.png", ref_split,
                  target_spectrum(ref_u, history.spectrum.freqs))
    last = history.records[-1]
    _emit({"epochs": last.epoch, "loss": tcfg.loss, "train_l2": last.train_l2, "test_l2": last.test_l2,
           "train_h1": last.train_h1, "test_h1": last.test_h1, "out": str(out)})


def cmd_eval(args):
    from .data import read_dataset
    from .model import eval_at_resolution, load_checkpoint
    from .spectral import rel_h1, rel_l2
    state = load_checkpoint(args.checkpoint)
    _, samples = read_dataset(args.data)
    a, u = samples[:, 0], samples[:, 1]
    if args.start or args.count:
        stop = args.start + args.count if args.count else None
        a, u = a[args.start:stop], u[args.start:stop]
    if len(a) == 0:
        raise UsageError("selected split is empty")
    preds = np.concatenate([eval_at_resolution(state, a[i:i + 32]) for i in range(0, len(a), 32)])
    _emit({"rel_l2": float(rel_l2(preds, u)[0].mean()), "rel_h1": float(rel_h1(preds, u)[0].mean()),
           "samples": int(len(a)), "resolution": int(a.shape[-1]),
           "train_resolution": state.config.resolution})


def cmd_spectral_report(args):
    from .plots import plot_spectrum
    from .spectral import SpectrumReport, freq_error_spectrum, read_spectrum_csv, target_spectrum
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.spectrum is not None:
        report = read_spectrum_csv(args.spectrum)
        report.write_csv(out / "spectrum.csv")
        for split in sorted({r[1] for r in report.rows}):
            plot_spectrum(report, out / f"spectrum_{split}.png", split)
        _emit({"rows": len(report.rows), "frequencies": len(report.freqs), "out": str(out)})
        return
    if args.checkpoint is None or args.data is None:
        raise UsageError("spectral-report needs --spectrum, or both --checkpoint and --data")
    from .data import read_dataset
    from .model import eval_at_resolution, load_checkpoint
    state = load_checkpoint(args.checkpoint)
    _, samples = read_dataset(args.data)
    a, u = samples[:, 0], samples[:, 1]
    n = u.shape[-1]
    if not 1 <= args.k <= n * n:
        raise UsageError(f"--k must lie in [1, {n * n}]")
    preds = np.concatenate([eval_at_resolution(state, a[i:i + 32]) for i in range(0, len(a), 32)])
    freqs, err = freq_error_spectrum(preds, u, args.k)
    report = SpectrumReport(freqs)
    report.add(0, "data", err)
    report.write_csv(out / "spectrum.csv")
    ref = target_spectrum(u, freqs)
    plot_spectrum(report, out / "spectrum_data.png", "data", ref)
    _emit({"frequencies": [list(f) for f in freqs], "mean_abs_err": [float(e) for e in err],
           "normalised": [float(e) for e in err / ref], "out": str(out)})


# --- certification and benchmarking ----------------------------------------

def verify_hmatrix(tokens: int, levels: int, seed: int, width: int = 2, corrupt: bool = False) -> dict:
    from .hattn import qkv, random_level_params, v_cycle
    from .hierarchy import build_tree
    from .hmatrix import MAX_TOKENS, level_contributions, offdiag_rank_check
    side = int(round(np.sqrt(tokens)))
    if side * side != tokens:
        raise UsageError(f"--tokens {tokens} is not a perfect square")
    if tokens > MAX_TOKENS:
        raise UsageError(f"--tokens {tokens} exceeds the {MAX_TOKENS}-token guard")
    try:
        tree = build_tree(side, levels)
    except ValueError as exc:
        raise UsageError(str(exc))
    rng = np.random.default_rng(seed)
    widths = [width] * levels
    params = random_level_params(widths, rng, 0.5)
    f = 0.5 * rng.standard_normal((1, side, side, width))
    q, k, v = qkv(f, params.wq, params.wk, params.wv)
    contrib = level_contributions(params, tree, q[0], k[0])
    G = sum(contrib.values())
    nested_params = params
    if corrupt and levels > 1:
        nested_params = replace(params, d=[d.copy() for d in params.d])
        nested_params.d[0][0, 0, 0] += 1.0
    h, _ = v_cycle(f, nested_params, tree, normalize=False, scale=False)
    diff = float(np.abs(G @ v.reshape(-1) - h.reshape(-1)).max())
    ranks = {m: offdiag_rank_check(contrib[m], tree, m, width) for m in range(1, levels)}
    ok = diff < 1e-10 and all(ranks[m] <= widths[m - 1] for m in ranks)
    return {"tokens": tokens, "levels": levels, "seed": seed, "max_abs_diff": diff,
            "ranks": {str(m): r for m, r in ranks.items()}, "pass": bool(ok)}


def cmd_verify_hmatrix(args):
    report = verify_hmatrix(args.tokens, args.levels, args.seed, args.width, args.corrupt)
    _emit(report)
    return 0 if report["pass"] else 1


def bench_complexity(sides, patch: int = 4, levels: int = 5, width: int = 32, repeats: int = 3,
                     seed: int = 0) -> list[dict]:
    from .hattn import random_level_params, v_cycle
    from .hierarchy import build_tree
    from .hmatrix import dense_flop_count, flop_count
    rng = np.random.default_rng(seed)
    params = random_level_params([width] * levels, rng)
    rows = []
    for n in sides:
        if n % patch:
            raise UsageError(f"side {n} is not divisible by patch {patch}")
        s = n // patch
        try:
            tree = build_tree(s, levels)
        except ValueError as exc:
            raise UsageError(str(exc))
        f = rng.standard_normal((1, s, s, width))
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            v_cycle(f, params, tree)
            times.append(time.perf_counter() - t0)
        rows.append({"side": n, "tokens": s * s, "hier_flops": flop_count(tree, [width] * levels)["total"],
                     "dense_flops": dense_flop_count(s * s, width), "hier_ms": 1e3 * float(np.median(times))})
    return rows


def cmd_bench_complexity(args):
    from .plots import plot_complexity
    try:
        sides = [int(x) for x in args.sides.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"--sides must be comma-separated integers, got {args.sides!r}")
    if len(sides) < 1 or sides != sorted(sides) or len(set(sides)) != len(sides):
        raise UsageError("--sides must be strictly ascending")
    rows = bench_complexity(sides, args.patch, args.levels, args.width, args.repeats, args.seed)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["side", "tokens", "hier_flops", "dense_flops", "hier_ms"])
    for r in rows:
        w.writerow([r["side"], r["tokens"], r["hier_flops"], r["dense_flops"], f"{r['hier_ms']:.3f}"])
    text = buf.getvalue()
    if args.out:
        out = Path(args.out)
        out.write_text(text, encoding="utf-8")
        plot_complexity(rows, out.with_suffix(".png"))
    sys.stdout.write(text)
    bad = []
    for prev, cur in zip(rows, rows[1:]):
        step = cur["tokens"] / prev["tokens"]
        ratio = cur["hier_flops"] / prev["hier_flops"]
        if step == 4 and not 3.5 <= ratio <= 5.0:
            bad.append((prev["side"], cur["side"], ratio))
    if bad:
        log.error("hierarchical flop ratio outside [3.5, 5.0]: %s", bad)
        return 1
    return 0


# --- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hano", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    p.add_argument("--threads", type=int, default=1, help="worker processes for sample-parallel work")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-darcy", help="two-phase Darcy dataset")
    g.add_argument("--resolution", type=int, default=64)
    g.add_argument("--samples", type=int, required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--amax", type=float, default=12.0)
    g.add_argument("--amin", type=float, default=3.0)
    g.add_argument("--c", type=float, default=9.0)
    g.add_argument("--modes", type=int, default=64, help="KL modes per axis")
    g.add_argument("--tol", type=float, default=1e-10)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_darcy)

    g = sub.add_parser("gen-trig", help="multiscale trigonometric dataset")
    g.add_argument("--resolution", type=int, default=64)
    g.add_argument("--samples", type=int, required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--tol", type=float, default=1e-9)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_trig)

    t = sub.add_parser("train", help="train a model; writes CSVs, checkpoints and figures to --out")
    t.add_argument("--data", required=True)
    t.add_argument("--loss", choices=["l2", "h1"])
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--config", help="JSON file with 'model' and 'train' sections")
    t.add_argument("--preset", choices=["full", "toy"], default="full",
                   help="model defaults: full-size (r=5, C=32) or the small CPU config")
    t.add_argument("--n-train", type=int)
    t.add_argument("--n-val", type=int)
    t.add_argument("--n-test", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="relative L2/H1 of a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--start", type=int, default=0, help="first sample to evaluate")
    e.add_argument("--count", type=int, default=0, help="number of samples (0 = to the end)")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify-hmatrix", help="nested V-cycle vs explicit G_h certification")
    v.add_argument("--tokens", type=int, default=16)
    v.add_argument("--levels", type=int, default=2)
    v.add_argument("--width", type=int, default=2)
    v.add_argument("--seed", type=int)
    v.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    v.set_defaults(func=cmd_verify_hmatrix)

    b = sub.add_parser("bench-complexity", help="flop counts and wall time of one V-cycle")
    b.add_argument("--sides", default="64,128,256,512", help="input resolutions in pixels")
    b.add_argument("--patch", type=int, default=4)
    b.add_argument("--levels", type=int, default=5)
    b.add_argument("--width", type=int, default=32)
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--seed", type=int)
    b.add_argument("--out", help="CSV path; a .png plot is written beside it")
    b.set_defaults(func=cmd_bench_complexity)

    s = sub.add_parser("spectral-report", help="per-frequency error spectrum CSV and figure")
    s.add_argument("--checkpoint")
    s.add_argument("--data")
    s.add_argument("--spectrum", help="render an existing spectrum CSV instead")
    s.add_argument("--k", type=int, default=20)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_spectral_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if hasattr(args, "seed") and args.seed is None:
            args.seed = _default_seed()
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        if getattr(args, "out", None) and args.func in (cmd_gen_darcy, cmd_gen_trig):
            parent = Path(args.out).parent
            if not parent.is_dir():
                raise UsageError(f"output directory {parent} does not exist")
        rc = args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"hano: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure: report and exit 1
        log.debug("traceback", exc_info=True)
        print(f"hano: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return rc or 0


if __name__ == "__main__":
    sys.exit(main())
