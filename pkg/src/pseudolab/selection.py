"""Pseudo-label selection: hard labels, confidence and uncertainty gates, voting.

Selections are expressed as a per-(sample, class) polarity: +1 means "train
this class as present", -1 "train it as absent" (negative learning), 0
"ignore". At most one +1 per row; a row's pseudo-label is its +1 class.

Gate orientation: positives require HIGH confidence (p >= tau_p), negatives
require LOW confidence (p <= tau_n); the uncertainty gates additionally
require the vote spread u(p) to be small (u <= kappa_p resp. kappa_n).
Boundary comparisons are inclusive. Ensemble voting accepts a sample only
when every model's argmax agrees and the pooled mean probability of that
class reaches the softmax threshold gamma.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .uncertainty import UncertaintySummary, _check_cube

__all__ = [
    "SelectionConfig",
    "SelectionMask",
    "hard_labels",
    "select_confidence",
    "select_uncertainty",
    "vote",
    "selection_report",
    "write_selection_report",
]

MODES = ("confidence_only", "uncertainty_gated")

# population std of values in [0, 1] cannot exceed 0.5, so kappa = 0.5
# disables the uncertainty gates entirely
STD_UPPER_BOUND = 0.5


@dataclass(frozen=True)
class SelectionConfig:
    gamma: float = 0.9
    tau_p: float = 0.70
    tau_n: float = 0.05
    kappa_p: float = 0.05
    kappa_n: float = 0.005
    negative_learning: bool = False
    mode: str = "uncertainty_gated"

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must be in (0, 1), got {self.gamma}")
        if not 0.0 <= self.tau_n < self.tau_p <= 1.0:
            raise ValueError(f"need 0 <= tau_n < tau_p <= 1, got tau_n={self.tau_n}, tau_p={self.tau_p}")
        if self.kappa_p < 0 or self.kappa_n < 0:
            raise ValueError("kappa thresholds must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


@dataclass
class SelectionMask:
    """Per-sample, per-class selection indicators.

    `g[n, k] == 1` iff entry (n, k) is selected with either polarity;
    `pseudo_label[n]` is the +1 class of row n, or -1 when the row carries
    no positive.
    """

    g: np.ndarray  # [N, K] uint8
    polarity: np.ndarray  # [N, K] int8 in {-1, 0, +1}
    pseudo_label: np.ndarray  # [N] int64, -1 = none

    def __post_init__(self):
        self.g = np.asarray(self.g, dtype=np.uint8)
        self.polarity = np.asarray(self.polarity, dtype=np.int8)
        self.pseudo_label = np.asarray(self.pseudo_label, dtype=np.int64)

    @property
    def selected_rows(self) -> np.ndarray:
        return self.pseudo_label >= 0

    def n_selected(self) -> int:
        return int(self.selected_rows.sum())

    def n_negative(self) -> int:
        return int((self.polarity == -1).sum())

    def validate(self) -> None:
        if not np.array_equal(self.g, (self.polarity != 0).astype(np.uint8)):
            raise AssertionError("g must mark exactly the nonzero-polarity entries")
        if ((self.polarity == 1).sum(axis=1) > 1).any():
            raise AssertionError("more than one positive in a row")
        rows_with_pos = (self.polarity == 1).any(axis=1)
        if not np.array_equal(rows_with_pos, self.pseudo_label >= 0):
            raise AssertionError("pseudo_label must be set exactly on rows with a +1")


def hard_labels(probs: np.ndarray, gamma: float) -> np.ndarray:
    """Hard per-class labels: 1 iff p >= gamma (inclusive boundary)."""
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must be in (0, 1), got {gamma}")
    p = np.asarray(probs)
    return (p >= gamma).astype(np.uint8)


def _assemble(pos_cand: np.ndarray, neg_cand: np.ndarray | None, score: np.ndarray) -> SelectionMask:
    """Resolve candidates into a mask; the +1 goes to the best-scoring
    positive candidate per row (ties to the lowest class index)."""
    n, k = pos_cand.shape
    polarity = np.zeros((n, k), dtype=np.int8)
    pseudo = np.full(n, -1, dtype=np.int64)
    any_pos = pos_cand.any(axis=1)
    if any_pos.any():
        masked = np.where(pos_cand, score.astype(np.float64), -np.inf)
        winners = masked.argmax(axis=1)
        rows = np.flatnonzero(any_pos)
        polarity[rows, winners[rows]] = 1
        pseudo[rows] = winners[rows]
    if neg_cand is not None:
        neg = neg_cand & (polarity != 1)
        polarity[neg] = -1
    g = (polarity != 0).astype(np.uint8)
    return SelectionMask(g, polarity, pseudo)


def select_confidence(probs: np.ndarray, config: SelectionConfig) -> SelectionMask:
    """Confidence-gated selection.

    Positive where p >= tau_p; negative where p <= tau_n, emitted only when
    negative learning is on.
    """
    p = np.asarray(probs)
    pos = p >= config.tau_p
    neg = (p <= config.tau_n) if config.negative_learning else None
    return _assemble(pos, neg, p)


def select_uncertainty(summary: UncertaintySummary, config: SelectionConfig) -> SelectionMask:
    """Uncertainty-gated selection on pooled vote statistics.

    Positive where u(p) <= kappa_p and p >= tau_p; negative (when negative
    learning is on) where u(p) <= kappa_n and p <= tau_n. p is the pooled
    mean, u the pooled std, so with kappa_p = kappa_n = 0.5 this reduces to
    :func:`select_confidence` on the pooled mean.
    """
    p = np.asarray(summary.mean)
    u = np.asarray(summary.std)
    pos = (u <= config.kappa_p) & (p >= config.tau_p)
    neg = ((u <= config.kappa_n) & (p <= config.tau_n)) if config.negative_learning else None
    return _assemble(pos, neg, p)


def vote(cube: np.ndarray, config: SelectionConfig) -> SelectionMask:
    """Unanimous-argmax ensemble voting with a pooled mean-softmax threshold.

    Each model casts the argmax of its C-pass mean probability. A sample is
    accepted only if all M votes agree on one class c* AND the pooled
    (M*C) mean probability of c* is >= gamma; otherwise the row stays
    unselected. With negative learning on, accepted rows additionally get
    -1 at classes whose pooled mean is <= tau_n with pooled std <= kappa_n.
    """
    cube = _check_cube(cube)
    m, c, n, k = cube.shape
    per_model_mean = cube.mean(axis=1, dtype=np.float64)  # [M, N, K]
    votes = per_model_mean.argmax(axis=2)  # [M, N], ties to lowest index
    unanimous = np.all(votes == votes[0], axis=0)  # [N]
    flat = cube.reshape(m * c, n, k).astype(np.float64)
    pooled_mean = flat.mean(axis=0)
    pooled_std = flat.std(axis=0)

    cstar = votes[0]
    accept = unanimous & (pooled_mean[np.arange(n), cstar] >= config.gamma)
    polarity = np.zeros((n, k), dtype=np.int8)
    pseudo = np.full(n, -1, dtype=np.int64)
    rows = np.flatnonzero(accept)
    polarity[rows, cstar[rows]] = 1
    pseudo[rows] = cstar[rows]
    if config.negative_learning:
        neg = (pooled_mean <= config.tau_n) & (pooled_std <= config.kappa_n) & accept[:, None]
        neg &= polarity != 1  # the voted class is never a negative
        polarity[neg] = -1
    g = (polarity != 0).astype(np.uint8)
    return SelectionMask(g, polarity, pseudo)


def selection_report(cube: np.ndarray, mask: SelectionMask, truth: np.ndarray | None = None) -> list[dict]:
    """Per-sample rows for selection statistics (CSV-ready dicts)."""
    cube = _check_cube(cube)
    m, c, n, k = cube.shape
    votes = cube.mean(axis=1, dtype=np.float64).argmax(axis=2)
    unanimous = np.all(votes == votes[0], axis=0)
    flat = cube.reshape(m * c, n, k).astype(np.float64)
    pooled_mean = flat.mean(axis=0)
    pooled_std = flat.std(axis=0)
    best = pooled_mean.argmax(axis=1)
    rows = []
    for i in range(n):
        rows.append(
            {
                "sample_id": i,
                "unanimous": int(unanimous[i]),
                "pooled_mean_max": repr(float(pooled_mean[i, best[i]])),
                "pooled_std_max": repr(float(pooled_std[i, best[i]])),
                "pseudo_label": int(mask.pseudo_label[i]),
                "truth_if_known": int(truth[i]) if truth is not None else "",
            }
        )
    return rows


def write_selection_report(path, cube: np.ndarray, mask: SelectionMask, truth: np.ndarray | None = None) -> None:
    rows = selection_report(cube, mask, truth)
    fields = ["sample_id", "unanimous", "pooled_mean_max", "pooled_std_max", "pseudo_label", "truth_if_known"]
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
