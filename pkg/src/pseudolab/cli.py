"""Command-line entry point.

Subcommands: synth, pretrain, adapt, sweep, eval, selftest. Option values
resolve in three layers: built-in defaults, then a key=value --config file,
then explicit flags (flags win). Unknown config keys are rejected. Every
run stamps its fully-resolved configuration as config.txt in the output
directory, so any run can be replayed from the stamp plus its seed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from itertools import product
from pathlib import Path

import numpy as np

from . import loop
from .dataset import DatasetFormatError, SplitSpec, load_dataset, save_dataset, split, synth_generate
from .model import INITIAL_SCHEDULE, PRETRAIN_SCHEDULE, RETRAIN_SCHEDULE, load_checkpoint, save_checkpoint
from .selection import SelectionConfig, write_selection_report
from .selfcheck import run_selftests
from .tensor import SeededRng

log = logging.getLogger(__name__)

_F_SWEEP = 21

SWEEP_GAMMAS = (0.7, 0.9, 0.99)
SWEEP_MODELS = (1, 2, 4)
SWEEP_FRACTIONS = (0.005, 0.01, 0.05)


def _parse_pair(text: str) -> tuple[float, float]:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected 'lo,hi', got {text!r}")
    return parts[0], parts[1]


def _parse_ints(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    return tuple(int(p) for p in text.split(","))


def _parse_floats(text: str) -> tuple[float, ...]:
    text = text.strip()
    if not text:
        return ()
    return tuple(float(p) for p in text.split(","))


def _parse_grid(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected 'FxT', got {text!r}")
    return int(parts[0]), int(parts[1])


def _read_kv_config(path: Path) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _coerce(text: str, template):
    if isinstance(template, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(template, int):
        return int(text)
    if isinstance(template, float):
        return float(text)
    return text


def _resolve(parser: argparse.ArgumentParser, args: argparse.Namespace, defaults: dict) -> dict:
    """defaults <- config file <- explicit flags; unknown keys rejected."""
    resolved = dict(defaults)
    provided = {k: v for k, v in vars(args).items() if k not in ("config", "func")}
    cfg_path = getattr(args, "config", None)
    if cfg_path:
        try:
            file_values = _read_kv_config(Path(cfg_path))
        except OSError as exc:
            parser.error(f"cannot read config file: {exc}")
        for key, text in file_values.items():
            if key not in defaults:
                parser.error(f"unknown config key {key!r} in {cfg_path}")
            try:
                resolved[key] = _coerce(text, defaults[key])
            except ValueError as exc:
                parser.error(f"config key {key!r}: {exc}")
    resolved.update(provided)
    return resolved


def _require(parser: argparse.ArgumentParser, cfg: dict, *keys: str) -> None:
    for key in keys:
        if cfg.get(key) in (None, ""):
            parser.error(f"--{key.replace('_', '-')} is required")


def _default_out(kind: str, seed: int) -> str:
    return f"runs/{kind}-{time.strftime('%Y%m%d-%H%M%S')}-seed{seed}"


def _stamp_config(out_dir: Path, cfg: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"{k}={cfg[k]}" for k in sorted(cfg)]
    (out_dir / "config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _schedules(cfg: dict):
    pre = PRETRAIN_SCHEDULE.with_epochs(cfg.get("pretrain_epochs") or PRETRAIN_SCHEDULE.epochs)
    ini = INITIAL_SCHEDULE.with_epochs(cfg.get("initial_epochs") or INITIAL_SCHEDULE.epochs)
    ret = RETRAIN_SCHEDULE.with_epochs(cfg.get("retrain_epochs") or RETRAIN_SCHEDULE.epochs)
    return pre, ini, ret


def _selection_config(cfg: dict) -> SelectionConfig:
    return SelectionConfig(
        gamma=cfg["gamma"],
        tau_p=cfg["tau_p"],
        tau_n=cfg["tau_n"],
        kappa_p=cfg["kappa_p"],
        kappa_n=cfg["kappa_n"],
        negative_learning=cfg["negative_learning"],
    )


def _run_config(cfg: dict) -> loop.RunConfig:
    pre, ini, ret = _schedules(cfg)
    return loop.RunConfig(
        models=cfg["models"],
        mc_passes=cfg["mc_passes"],
        repetitions=cfg["repetitions"],
        label_fraction=cfg["fraction"],
        per_class_minimum=cfg["per_class_min"],
        selection=_selection_config(cfg),
        mc_dropout=cfg["mc_dropout"],
        dropout_rate=cfg["dropout_rate"],
        pretrain_schedule=pre,
        initial_schedule=ini,
        retrain_schedule=ret,
        seed=cfg["seed"],
        warm_start=cfg["warm_start"],
        pseudo_labeling=not cfg["baseline"],
        probe_gammas=_parse_floats(cfg["probe_gammas"]) if cfg.get("probe_gammas") else (),
    )


# ---------------------------------------------------------------- synth

SYNTH_DEFAULTS = {
    "out": "",
    "counts": "",
    "seed": 0,
    "snr": "0,10",
    "slopes": "-0.8,0.8",
    "grid": "32x32",
    "noise_sigma": 1.0,
}


def cmd_synth(parser, args) -> int:
    cfg = _resolve(parser, args, SYNTH_DEFAULTS)
    _require(parser, cfg, "out", "counts")
    counts = list(_parse_ints(cfg["counts"]))
    data = synth_generate(
        counts,
        snr_range=_parse_pair(cfg["snr"]),
        chirp_slope_range=_parse_pair(cfg["slopes"]),
        seed=cfg["seed"],
        grid_shape=_parse_grid(cfg["grid"]),
        noise_sigma=cfg["noise_sigma"],
    )
    out = Path(cfg["out"])
    save_dataset(data, out)
    _stamp_config(out, cfg)
    print(f"wrote {len(data)} snapshots ({counts}) to {out}")
    return 0


# ------------------------------------------------------------- pretrain

PRETRAIN_DEFAULTS = {
    "data": "",
    "out": "",
    "seed": 0,
    "pretrain_epochs": 0,  # 0 = schedule default
    "dropout_rate": 0.3,
}


def cmd_pretrain(parser, args) -> int:
    cfg = _resolve(parser, args, PRETRAIN_DEFAULTS)
    _require(parser, cfg, "data")
    if not cfg["out"]:
        cfg["out"] = _default_out("pretrain", cfg["seed"])
    source = load_dataset(cfg["data"]).to_labeled()
    pre, _, _ = _schedules(cfg)
    run_cfg = loop.RunConfig(
        dropout_rate=cfg["dropout_rate"], seed=cfg["seed"], pretrain_schedule=pre, mc_dropout=cfg["dropout_rate"] > 0
    )
    state = loop.pretrain(source, run_cfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(state, out / "pretrained.ckpt")
    _stamp_config(out, cfg)
    print(f"pretrained on {len(source)} snapshots for {pre.epochs} epochs -> {out / 'pretrained.ckpt'}")
    return 0


# ---------------------------------------------------------------- adapt

ADAPT_DEFAULTS = {
    "pretrained": "",
    "data": "",
    "test": "",
    "out": "",
    "fraction": 0.01,
    "per_class_min": 5,
    "models": 4,
    "mc_passes": 5,
    "repetitions": 7,
    "gamma": 0.9,
    "tau_p": 0.70,
    "tau_n": 0.05,
    "kappa_p": 0.05,
    "kappa_n": 0.005,
    "negative_learning": False,
    "mc_dropout": True,
    "dropout_rate": 0.3,
    "seed": 0,
    "warm_start": True,
    "baseline": False,
    "probe_gammas": "",
    "initial_epochs": 0,
    "retrain_epochs": 0,
    "selection_reports": True,
}


def _load_target(cfg: dict):
    ds = load_dataset(cfg["data"])
    if np.all(ds.labels >= 0):
        spec = SplitSpec(cfg["fraction"], seed=cfg["seed"], per_class_minimum=cfg["per_class_min"])
        return split(ds.to_labeled(), spec)
    labeled, pool = ds.partition()
    test = load_dataset(cfg["test"]).to_labeled() if cfg["test"] else None
    return labeled, pool, test


def cmd_adapt(parser, args) -> int:
    cfg = _resolve(parser, args, ADAPT_DEFAULTS)
    _require(parser, cfg, "pretrained", "data")
    if not cfg["out"]:
        cfg["out"] = _default_out("adapt", cfg["seed"])
    pretrained = load_checkpoint(cfg["pretrained"])
    labeled, pool, test = _load_target(cfg)
    run_cfg = _run_config(cfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _stamp_config(out, cfg)

    sink = None
    if cfg["selection_reports"]:
        truth = pool.hidden_truth

        def sink(rep, cube, mask):
            write_selection_report(out / f"selection_rep{rep}.csv", cube, mask, truth)

    members, run_log = loop.adapt(pretrained, labeled, pool, run_cfg, test=test, report_sink=sink)
    loop.write_run_outputs(out, run_log, members, run_cfg)
    print(
        f"adapt: {len(labeled)} labeled + pool {len(pool)}, M={run_cfg.models}, "
        f"final accuracy {run_log.final_accuracy:.2f}% -> {out}"
    )
    return 0


# ---------------------------------------------------------------- sweep

SWEEP_DEFAULTS = {
    "source": "",
    "target": "",
    "out": "",
    "seed": 0,
    "repetitions": 7,
    "per_class_min": 5,
    "tau_p": 0.70,
    "tau_n": 0.05,
    "kappa_p": 0.05,
    "kappa_n": 0.005,
    "dropout_rate": 0.3,
    "pretrain_epochs": 0,
    "initial_epochs": 0,
    "retrain_epochs": 0,
    "workers": 1,
}


def sweep_cells() -> list[dict]:
    """The fixed hyperparameter grid, one dict per cell (108 cells)."""
    cells = []
    for idx, (gamma, models, fraction, mc, nl) in enumerate(
        product(SWEEP_GAMMAS, SWEEP_MODELS, SWEEP_FRACTIONS, (True, False), (True, False))
    ):
        cells.append(
            {
                "cell": idx,
                "gamma": gamma,
                "models": models,
                "fraction": fraction,
                "mc_dropout": mc,
                "negative_learning": nl,
            }
        )
    return cells


def _run_sweep_cell(payload: dict) -> dict:
    cell = payload["cell"]
    target = load_dataset(payload["target"]).to_labeled()
    pretrained = load_checkpoint(payload["pretrained"])
    seed = payload["cell_seed"]
    spec = SplitSpec(cell["fraction"], seed=seed, per_class_minimum=payload["per_class_min"])
    labeled, pool, test = split(target, spec)
    selection = SelectionConfig(
        gamma=cell["gamma"],
        tau_p=payload["tau_p"],
        tau_n=payload["tau_n"],
        kappa_p=payload["kappa_p"],
        kappa_n=payload["kappa_n"],
        negative_learning=cell["negative_learning"],
    )
    run_cfg = loop.RunConfig(
        models=cell["models"],
        repetitions=payload["repetitions"],
        label_fraction=cell["fraction"],
        per_class_minimum=payload["per_class_min"],
        selection=selection,
        mc_dropout=cell["mc_dropout"],
        dropout_rate=payload["dropout_rate"],
        initial_schedule=INITIAL_SCHEDULE.with_epochs(payload["initial_epochs"] or INITIAL_SCHEDULE.epochs),
        retrain_schedule=RETRAIN_SCHEDULE.with_epochs(payload["retrain_epochs"] or RETRAIN_SCHEDULE.epochs),
        seed=seed,
    )
    _, run_log = loop.adapt(pretrained, labeled, pool, run_cfg, test=test)
    sel_fracs = [r.selected_fraction for r in run_log.records]
    correct = [r.pseudo_correct_fraction for r in run_log.records if r.pseudo_correct_fraction == r.pseudo_correct_fraction]
    return {
        **cell,
        "seed": seed,
        "final_accuracy": run_log.final_accuracy,
        "final_ece": run_log.final_ece,
        "mean_selected_fraction": float(np.mean(sel_fracs)) if sel_fracs else 0.0,
        "mean_pseudo_correct": float(np.mean(correct)) if correct else float("nan"),
    }


SWEEP_COLUMNS = [
    "cell",
    "gamma",
    "models",
    "fraction",
    "mc_dropout",
    "negative_learning",
    "seed",
    "final_accuracy",
    "final_ece",
    "mean_selected_fraction",
    "mean_pseudo_correct",
]


def cmd_sweep(parser, args) -> int:
    cfg = _resolve(parser, args, SWEEP_DEFAULTS)
    _require(parser, cfg, "source", "target")
    if not cfg["out"]:
        cfg["out"] = _default_out("sweep", cfg["seed"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _stamp_config(out, cfg)

    source = load_dataset(cfg["source"]).to_labeled()
    pre, _, _ = _schedules(cfg)
    pre_cfg = loop.RunConfig(dropout_rate=cfg["dropout_rate"], seed=cfg["seed"], pretrain_schedule=pre)
    pretrained = loop.pretrain(source, pre_cfg)
    ckpt_path = out / "pretrained.ckpt"
    save_checkpoint(pretrained, ckpt_path)

    base = SeededRng(cfg["seed"])
    payloads = []
    for cell in sweep_cells():
        payloads.append(
            {
                "cell": cell,
                "cell_seed": base.fork(_F_SWEEP, cell["cell"]).seed,
                "target": cfg["target"],
                "pretrained": str(ckpt_path),
                "per_class_min": cfg["per_class_min"],
                "tau_p": cfg["tau_p"],
                "tau_n": cfg["tau_n"],
                "kappa_p": cfg["kappa_p"],
                "kappa_n": cfg["kappa_n"],
                "dropout_rate": cfg["dropout_rate"],
                "repetitions": cfg["repetitions"],
                "initial_epochs": cfg["initial_epochs"],
                "retrain_epochs": cfg["retrain_epochs"],
            }
        )

    if cfg["workers"] > 1:
        import multiprocessing as mp
        from concurrent.futures import ProcessPoolExecutor

        ctx = mp.get_context("spawn")
        with ProcessPoolExecutor(max_workers=cfg["workers"], mp_context=ctx) as pool:
            rows = list(pool.map(_run_sweep_cell, payloads))
    else:
        rows = []
        for payload in payloads:
            rows.append(_run_sweep_cell(payload))
            log.info("cell %d/%d done", payload["cell"]["cell"] + 1, len(payloads))

    lines = [",".join(SWEEP_COLUMNS)]
    for row in rows:
        lines.append(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c]) for c in SWEEP_COLUMNS))
    (out / "results.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"sweep: {len(rows)} cells -> {out / 'results.csv'}")
    return 0


# ----------------------------------------------------------------- eval

EVAL_DEFAULTS = {"data": "", "checkpoints": "", "out": ""}


def cmd_eval(parser, args) -> int:
    cfg = _resolve(parser, args, EVAL_DEFAULTS)
    _require(parser, cfg, "data", "checkpoints")
    models = [load_checkpoint(p) for p in cfg["checkpoints"].split(",") if p]
    test = load_dataset(cfg["data"]).to_labeled()
    acc, cal = loop.evaluate(models, test)
    print(f"accuracy {acc:.3f}%  ece {cal:.5f}  ({len(models)} model(s), {len(test)} samples)")
    if cfg["out"]:
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.json").write_text(
            json.dumps({"accuracy": acc, "ece": cal, "models": len(models), "samples": len(test)}, sort_keys=True),
            encoding="utf-8",
        )
        _stamp_config(out, cfg)
    return 0


# ------------------------------------------------------------- selftest


def cmd_selftest(parser, args) -> int:
    results = run_selftests()
    failures = 0
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        failures += 0 if ok else 1
    print(f"{len(results) - failures}/{len(results)} checks passed")
    return 0 if failures == 0 else 1


# ----------------------------------------------------------------- main


def _add_common(sp):
    sp.add_argument("--config", help="key=value config file; explicit flags win")
    sp.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    sp.add_argument("--out", default=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pseudolab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    sp = sub.add_parser("synth", help="generate a synthetic chirp/noise dataset")
    _add_common(sp)
    sp.add_argument("--counts", default=S, help="per-class sample counts, e.g. 12500,1000")
    sp.add_argument("--snr", default=S, help="SNR range in dB, e.g. 0,10")
    sp.add_argument("--slopes", default=S, help="chirp slope range in bins/bin")
    sp.add_argument("--grid", default=S, help="grid shape FxT, e.g. 32x32")
    sp.add_argument("--noise-sigma", dest="noise_sigma", type=float, default=S)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("pretrain", help="train a source-regime checkpoint")
    _add_common(sp)
    sp.add_argument("--data", default=S, help="labeled source dataset directory")
    sp.add_argument("--pretrain-epochs", dest="pretrain_epochs", type=int, default=S)
    sp.add_argument("--dropout-rate", dest="dropout_rate", type=float, default=S)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("adapt", help="run the pseudo-label adaptation loop")
    _add_common(sp)
    sp.add_argument("--pretrained", default=S, help="source checkpoint file")
    sp.add_argument("--data", default=S, help="target dataset directory (labeled, or mixed with -1 labels)")
    sp.add_argument("--test", default=S, help="test dataset directory (only for pre-split mixed data)")
    sp.add_argument("--fraction", type=float, default=S, help="labeled fraction of the target train portion")
    sp.add_argument("--per-class-min", dest="per_class_min", type=int, default=S)
    sp.add_argument("--models", type=int, default=S, help="ensemble size M")
    sp.add_argument("--mc-passes", dest="mc_passes", type=int, default=S, help="stochastic passes C per model")
    sp.add_argument("--repetitions", type=int, default=S)
    sp.add_argument("--gamma", type=float, default=S, help="softmax acceptance threshold")
    sp.add_argument("--tau-p", dest="tau_p", type=float, default=S)
    sp.add_argument("--tau-n", dest="tau_n", type=float, default=S)
    sp.add_argument("--kappa-p", dest="kappa_p", type=float, default=S)
    sp.add_argument("--kappa-n", dest="kappa_n", type=float, default=S)
    sp.add_argument("--negative-learning", dest="negative_learning", action=argparse.BooleanOptionalAction, default=S)
    sp.add_argument("--mc-dropout", dest="mc_dropout", action=argparse.BooleanOptionalAction, default=S)
    sp.add_argument("--dropout-rate", dest="dropout_rate", type=float, default=S)
    sp.add_argument("--warm-start", dest="warm_start", action=argparse.BooleanOptionalAction, default=S)
    sp.add_argument("--baseline", action=argparse.BooleanOptionalAction, default=S, help="disable selection, keep the epoch budget")
    sp.add_argument("--probe-gammas", dest="probe_gammas", default=S, help="extra thresholds to count selections at")
    sp.add_argument("--initial-epochs", dest="initial_epochs", type=int, default=S)
    sp.add_argument("--retrain-epochs", dest="retrain_epochs", type=int, default=S)
    sp.add_argument("--selection-reports", dest="selection_reports", action=argparse.BooleanOptionalAction, default=S)
    sp.set_defaults(func=cmd_adapt)

    sp = sub.add_parser("sweep", help="grid over gamma, M, fraction, MC dropout and NL")
    _add_common(sp)
    sp.add_argument("--source", default=S, help="labeled source dataset directory")
    sp.add_argument("--target", default=S, help="labeled target dataset directory")
    sp.add_argument("--repetitions", type=int, default=S)
    sp.add_argument("--per-class-min", dest="per_class_min", type=int, default=S)
    sp.add_argument("--dropout-rate", dest="dropout_rate", type=float, default=S)
    sp.add_argument("--pretrain-epochs", dest="pretrain_epochs", type=int, default=S)
    sp.add_argument("--initial-epochs", dest="initial_epochs", type=int, default=S)
    sp.add_argument("--retrain-epochs", dest="retrain_epochs", type=int, default=S)
    sp.add_argument("--workers", type=int, default=S, help="parallel worker processes")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("eval", help="score checkpoint(s) on a labeled dataset")
    _add_common(sp)
    sp.add_argument("--data", default=S)
    sp.add_argument("--checkpoints", default=S, help="comma-separated checkpoint files")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("selftest", help="run the invariant battery")
    sp.set_defaults(func=cmd_selftest)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(parser, args)
    except (OSError, DatasetFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
