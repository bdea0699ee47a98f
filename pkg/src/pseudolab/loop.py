"""Adaptation pipeline: pretrain, ensemble fine-tune, pseudo-label, retrain.

One "repetition" is a pseudo-label/retrain round: predict the unlabeled
pool with the M members (optionally with MC dropout), vote, merge the
accepted pseudo-labels with the labeled sliver, and retrain every member.
Members start from shared pretrained weights and diverge through
seed-dependent batch order and dropout masks. The pseudo set is rebuilt
from scratch each round. All randomness derives from the run seed, so a
run is bit-reproducible; the pool's hidden truth feeds metrics only and
never touches a weight.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataset import LabeledSet, UnlabeledPool
from .model import (
    INITIAL_SCHEDULE,
    PRETRAIN_SCHEDULE,
    RETRAIN_SCHEDULE,
    ClassifierState,
    OptimizerConfig,
    flatten_grids,
    init_classifier,
    predict_probs,
    save_checkpoint,
    targets_from_labels,
    train,
)
from .selection import SelectionConfig, vote
from .tensor import SeededRng
from .uncertainty import ece, predict_cube

__all__ = [
    "RunConfig",
    "RepetitionRecord",
    "RunLog",
    "pretrain",
    "adapt",
    "evaluate",
    "ensemble_probs",
    "run_log_csv",
    "run_summary_json",
    "write_run_outputs",
]

log = logging.getLogger(__name__)

# rng fork purposes
_F_PRETRAIN = 11
_F_TRAIN = 12
_F_CUBE = 13
_F_HEAD = 14


@dataclass(frozen=True)
class RunConfig:
    """Everything one adaptation run depends on.

    `warm_start=False` restarts members from the pretrained weights each
    repetition and retrains them on the merged set with the (longer)
    initial schedule instead of continuing with the short retrain one.
    `pseudo_labeling=False` keeps the identical epoch budget but trains on
    the labeled sliver alone (the selection-disabled baseline).
    `reinit_head` redraws each member's output layer from its own seed, so
    ensemble members genuinely differ in initial weights instead of only
    in batch order and dropout masks.
    `probe_gammas` logs, per repetition, how many pool samples the vote
    would select at alternative softmax thresholds.
    """

    models: int = 4
    mc_passes: int = 5
    repetitions: int = 7
    label_fraction: float = 0.01
    per_class_minimum: int = 5
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    mc_dropout: bool = True
    dropout_rate: float = 0.3
    pretrain_schedule: OptimizerConfig = PRETRAIN_SCHEDULE
    initial_schedule: OptimizerConfig = INITIAL_SCHEDULE
    retrain_schedule: OptimizerConfig = RETRAIN_SCHEDULE
    seed: int = 0
    warm_start: bool = True
    pseudo_labeling: bool = True
    reinit_head: bool = False
    probe_gammas: tuple[float, ...] = ()

    def __post_init__(self):
        if self.models < 1:
            raise ValueError(f"need at least one model, got {self.models}")
        if self.mc_passes < 1:
            raise ValueError(f"need at least one MC pass, got {self.mc_passes}")
        if self.repetitions < 1:
            raise ValueError(f"need at least one repetition, got {self.repetitions}")
        if not 0.0 < self.label_fraction <= 1.0:
            raise ValueError(f"label_fraction must be in (0, 1], got {self.label_fraction}")
        if self.mc_dropout and self.dropout_rate <= 0.0:
            raise ValueError("mc_dropout requires dropout_rate > 0")


@dataclass
class RepetitionRecord:
    repetition: int
    n_selected: int
    n_negative: int
    selected_fraction: float
    pseudo_correct_fraction: float  # nan when the pool has no truth channel
    test_accuracy: float  # nan when no test set was supplied
    test_ece: float
    final_train_loss: float
    loss_curve: list[float]
    probe_counts: dict[str, int] = field(default_factory=dict)


@dataclass
class RunLog:
    records: list[RepetitionRecord]
    final_accuracy: float
    final_ece: float
    initial_loss_curve: list[float]


def _ensemble_members(pretrained: ClassifierState, config: RunConfig) -> list[ClassifierState]:
    members = []
    for i in range(config.models):
        st = pretrained.copy()
        st.seed = config.seed + i  # per-member seed = base seed + model index
        st.dropout_rate = config.dropout_rate
        if config.reinit_head:
            rng = SeededRng(st.seed).fork(_F_HEAD)
            w3 = st.params["w3"]
            st.params["w3"] = rng.gaussian(w3.shape, sigma=1.0 / np.sqrt(w3.shape[0]))
            st.params["b3"] = np.zeros_like(st.params["b3"])
            st.momentum["w3"] = np.zeros_like(w3)
            st.momentum["b3"] = np.zeros_like(st.params["b3"])
        members.append(st)
    return members


def _mean_curve(histories: list[list]) -> list[float]:
    if not histories or not histories[0]:
        return []
    return [float(np.mean([h[e][1] for h in histories])) for e in range(len(histories[0]))]


def pretrain(source: LabeledSet, config: RunConfig) -> ClassifierState:
    """Train a fresh classifier on the source-regime data."""
    if len(source) == 0:
        raise ValueError("source set is empty")
    x = flatten_grids(source.grids)
    t = targets_from_labels(source.labels, source.num_classes)
    state = init_classifier(x.shape[1], source.num_classes, config.dropout_rate, seed=config.seed)
    rng = SeededRng(config.seed).fork(_F_PRETRAIN)
    return train(state, x, t, config.pretrain_schedule, rng)


def adapt(
    pretrained: ClassifierState,
    target_labeled: LabeledSet,
    pool: UnlabeledPool,
    config: RunConfig,
    test: LabeledSet | None = None,
    report_sink=None,
) -> tuple[list[ClassifierState], RunLog]:
    """Run the full pseudo-label/retrain loop on the target regime.

    `test`, when given, is used for per-repetition metrics only.
    `report_sink(rep, cube, mask)` is called once per repetition with the
    prediction cube and the vote result, for selection reports.
    """
    if len(target_labeled) == 0:
        raise ValueError("target labeled set is empty")
    k = target_labeled.num_classes
    x_lab = flatten_grids(target_labeled.grids)
    t_lab = targets_from_labels(target_labeled.labels, k)
    x_pool = flatten_grids(pool.grids) if len(pool) else np.empty((0, x_lab.shape[1]), np.float32)

    members = _ensemble_members(pretrained, config)
    init_hist: list[list] = [[] for _ in members]
    for i, st in enumerate(members):
        train(st, x_lab, t_lab, config.initial_schedule, SeededRng(st.seed).fork(_F_TRAIN, 0), history=init_hist[i])

    records: list[RepetitionRecord] = []
    for rep in range(1, config.repetitions + 1):
        n_sel = 0
        n_neg = 0
        correct_frac = float("nan")
        probe_counts: dict[str, int] = {}
        sel_x = sel_t = None
        if config.pseudo_labeling and len(x_pool):
            cube_seed = SeededRng(config.seed).fork(_F_CUBE, rep).seed
            cube = predict_cube(members, x_pool, config.mc_passes, config.mc_dropout, cube_seed)
            mask = vote(cube, config.selection)
            n_sel = mask.n_selected()
            n_neg = mask.n_negative()
            for pg in config.probe_gammas:
                probe_counts[repr(float(pg))] = vote(cube, replace(config.selection, gamma=pg)).n_selected()
            sel = mask.selected_rows
            if pool.hidden_truth is not None and n_sel:
                correct_frac = float((mask.pseudo_label[sel] == pool.hidden_truth[sel]).mean())
            if report_sink is not None:
                report_sink(rep, cube, mask)
            if n_sel:
                sel_x = x_pool[sel]
                sel_t = mask.polarity[sel].astype(np.float32)
            else:
                log.info("repetition %d selected nothing; training on labeled data alone", rep)

        if sel_x is not None:
            x_merged = np.concatenate([x_lab, sel_x])
            t_merged = np.concatenate([t_lab, sel_t])
        else:
            x_merged, t_merged = x_lab, t_lab

        if not config.warm_start:
            members = _ensemble_members(pretrained, config)
        schedule = config.retrain_schedule if config.warm_start else config.initial_schedule
        histories: list[list] = [[] for _ in members]
        for i, st in enumerate(members):
            train(st, x_merged, t_merged, schedule, SeededRng(st.seed).fork(_F_TRAIN, rep), history=histories[i])

        if test is not None:
            acc, cal = evaluate(members, test)
        else:
            acc, cal = float("nan"), float("nan")
        curve = _mean_curve(histories)
        records.append(
            RepetitionRecord(
                repetition=rep,
                n_selected=n_sel,
                n_negative=n_neg,
                selected_fraction=n_sel / len(x_pool) if len(x_pool) else 0.0,
                pseudo_correct_fraction=correct_frac,
                test_accuracy=acc,
                test_ece=cal,
                final_train_loss=curve[-1] if curve else float("nan"),
                loss_curve=curve,
                probe_counts=probe_counts,
            )
        )
        log.info(
            "repetition %d: selected %d/%d (%.1f%% correct), test acc %.2f%%",
            rep,
            n_sel,
            len(x_pool),
            100.0 * correct_frac if correct_frac == correct_frac else float("nan"),
            acc,
        )

    run_log = RunLog(
        records=records,
        final_accuracy=records[-1].test_accuracy,
        final_ece=records[-1].test_ece,
        initial_loss_curve=_mean_curve(init_hist),
    )
    return members, run_log


def ensemble_probs(models: list[ClassifierState], grids: np.ndarray) -> np.ndarray:
    """Mean of the members' deterministic class probabilities."""
    x = flatten_grids(grids)
    acc = np.zeros((len(x), models[0].num_classes), dtype=np.float64)
    for st in models:
        acc += predict_probs(st, x)
    return (acc / len(models)).astype(np.float32)


def evaluate(models: list[ClassifierState], test: LabeledSet) -> tuple[float, float]:
    """Accuracy (%) and ECE of the ensemble-mean prediction on a test set."""
    if len(test) == 0:
        raise ValueError("test set is empty")
    probs = ensemble_probs(models, test.grids)
    pred = probs.argmax(axis=1)  # ties go to the lowest class index
    acc = float((pred == test.labels).mean() * 100.0)
    return acc, ece(probs, test.labels)


def _fmt(value) -> str:
    if isinstance(value, float):
        return "" if value != value else repr(value)
    return str(value)


def run_log_csv(run_log: RunLog) -> str:
    """Deterministic CSV text, one row per repetition."""
    probe_keys = sorted({k for r in run_log.records for k in r.probe_counts}, key=float)
    header = [
        "repetition",
        "n_selected",
        "n_negative",
        "selected_fraction",
        "pseudo_correct_fraction",
        "test_accuracy",
        "test_ece",
        "final_train_loss",
    ] + [f"selected_at_{k}" for k in probe_keys]
    lines = [",".join(header)]
    for r in run_log.records:
        row = [
            str(r.repetition),
            str(r.n_selected),
            str(r.n_negative),
            _fmt(r.selected_fraction),
            _fmt(r.pseudo_correct_fraction),
            _fmt(r.test_accuracy),
            _fmt(r.test_ece),
            _fmt(r.final_train_loss),
        ] + [str(r.probe_counts.get(k, "")) for k in probe_keys]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def run_summary_json(run_log: RunLog, config: RunConfig | None = None) -> str:
    payload = {
        "final_accuracy": run_log.final_accuracy,
        "final_ece": run_log.final_ece,
        "initial_loss_curve": run_log.initial_loss_curve,
        "repetitions": [asdict(r) for r in run_log.records],
    }
    if config is not None:
        payload["config"] = asdict(config)
    return json.dumps(payload, sort_keys=True, indent=2)


def write_run_outputs(out_dir, run_log: RunLog, members: list[ClassifierState] | None = None, config: RunConfig | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "runlog.csv").write_text(run_log_csv(run_log), encoding="utf-8")
    (out / "summary.json").write_text(run_summary_json(run_log, config), encoding="utf-8")
    if members:
        for i, st in enumerate(members):
            save_checkpoint(st, out / f"member{i}.ckpt")
