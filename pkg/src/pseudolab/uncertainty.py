"""Prediction cubes from MC-dropout passes and ensemble members, plus ECE.

A prediction cube stacks class probabilities as [M models, C stochastic
passes, N samples, K classes]. With MC dropout on, each model contributes C
independent dropout passes; with it off (ensembles-only mode) each model
contributes one deterministic pass replicated across the C axis, keeping
downstream shapes uniform and per-model spread exactly zero. Prediction
uncertainty u(p) is the population standard deviation of a class
probability across the pooled M*C votes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import DatasetFormatError
from .model import ClassifierState, _forward_logits, _softmax_keep_dtype, flatten_grids, make_dropout_mask
from .tensor import SeededRng, mean_std

__all__ = [
    "UncertaintySummary",
    "predict_cube",
    "summarize",
    "ece",
    "save_cube",
    "load_cube",
]

_PREDICT_CHUNK = 8192


@dataclass
class UncertaintySummary:
    """Per-(sample, class) vote statistics derived from a prediction cube."""

    mean: np.ndarray  # [N, K] pooled over M*C
    std: np.ndarray  # [N, K] pooled over M*C, population
    per_model_mean: np.ndarray  # [M, N, K] over the C axis
    per_model_std: np.ndarray  # [M, N, K]


def _check_cube(cube: np.ndarray) -> np.ndarray:
    cube = np.asarray(cube, dtype=np.float32)
    if cube.ndim != 4:
        raise ValueError(f"prediction cube must be [M, C, N, K], got shape {cube.shape}")
    if cube.shape[0] < 1 or cube.shape[1] < 1:
        raise ValueError("cube needs M >= 1 and C >= 1")
    return cube


def _eval_probs(state: ClassifierState, x: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    out = np.empty((len(x), state.num_classes), dtype=np.float32)
    for start in range(0, len(x), _PREDICT_CHUNK):
        stop = min(start + _PREDICT_CHUNK, len(x))
        m = mask[start:stop] if mask is not None else None
        out[start:stop] = _softmax_keep_dtype(_forward_logits(state.params, x[start:stop], m))
    return out


def predict_cube(
    models: Sequence[ClassifierState],
    pool,
    passes: int,
    mc_dropout: bool,
    seed: int,
) -> np.ndarray:
    """Build the [M, C, N, K] probability cube for a pool of snapshots.

    `pool` may be an UnlabeledPool, a [N, F, T] grid stack or pre-flattened
    [N, D] rows. Pass (m, c) draws its dropout mask from the fork (m, c) of
    `seed`, so the cube is reproducible and independent of evaluation order
    or chunking.
    """
    if len(models) < 1:
        raise ValueError("need at least one model")
    if passes < 1:
        raise ValueError("need at least one pass")
    if mc_dropout:
        flat = [i for i, m in enumerate(models) if m.dropout_rate <= 0.0]
        if flat:
            raise ValueError(f"mc_dropout requested but models {flat} have dropout_rate 0")
    x = flatten_grids(getattr(pool, "grids", pool))
    n = len(x)
    k = models[0].num_classes
    base = SeededRng(seed)
    cube = np.empty((len(models), passes, n, k), dtype=np.float32)
    for mi, state in enumerate(models):
        if not mc_dropout:
            cube[mi] = _eval_probs(state, x, None)[None, :, :]
            continue
        for c in range(passes):
            rng = base.fork(mi, c)
            mask = make_dropout_mask(rng, (n, state.params["b2"].shape[0]), state.dropout_rate)
            cube[mi, c] = _eval_probs(state, x, mask)
    return cube


def summarize(cube: np.ndarray) -> UncertaintySummary:
    """Pooled (over M*C) and per-model (over C) mean/std of the cube."""
    cube = _check_cube(cube)
    m, c, n, k = cube.shape
    pooled_mean, pooled_std = mean_std(cube.reshape(m * c, n, k), axis=0)
    per_model_mean, per_model_std = mean_std(cube, axis=1)
    return UncertaintySummary(pooled_mean, pooled_std, per_model_mean, per_model_std)


def ece(probs: np.ndarray, true_labels: np.ndarray, bins: int = 10) -> float:
    """Expected calibration error with equal-width confidence bins on (0, 1].

    Confidence is the max-class probability, the prediction its argmax.
    ECE = sum_b (n_b / N) * |accuracy_b - mean confidence_b|; empty bins
    contribute nothing.
    """
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    p = np.asarray(probs)
    if p.ndim != 2:
        raise ValueError(f"probs must be [N, K], got shape {p.shape}")
    y = np.asarray(true_labels, dtype=np.int64)
    if y.shape != (len(p),):
        raise ValueError("labels length does not match probs")
    if len(y) == 0:
        return 0.0
    if y.min() < 0 or y.max() >= p.shape[1]:
        raise ValueError(f"labels must lie in [0, {p.shape[1]})")
    conf = p.max(axis=1).astype(np.float64)
    pred = p.argmax(axis=1)
    correct = (pred == y).astype(np.float64)
    idx = np.clip(np.ceil(conf * bins).astype(np.int64) - 1, 0, bins - 1)
    n_b = np.bincount(idx, minlength=bins)
    conf_b = np.bincount(idx, weights=conf, minlength=bins)
    acc_b = np.bincount(idx, weights=correct, minlength=bins)
    total = 0.0
    for b in range(bins):
        if n_b[b]:
            total += (n_b[b] / len(y)) * abs(acc_b[b] / n_b[b] - conf_b[b] / n_b[b])
    return float(total)


def save_cube(cube: np.ndarray, path) -> None:
    """Export a cube as manifest.json + cube.bin (little-endian float32)."""
    cube = _check_cube(cube)
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    m, c, n, k = cube.shape
    manifest = {"version": 1, "M": m, "C": c, "N": n, "K": k}
    (path / "manifest.json").write_text(json.dumps(manifest, sort_keys=True), encoding="utf-8")
    (path / "cube.bin").write_bytes(cube.astype("<f4").tobytes())


def load_cube(path) -> np.ndarray:
    path = Path(path)
    man_path = path / "manifest.json"
    if not man_path.is_file():
        raise DatasetFormatError(f"missing manifest.json in {path}")
    try:
        manifest = json.loads(man_path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DatasetFormatError(f"malformed manifest.json: {exc}") from exc
    if manifest.get("version") != 1:
        raise DatasetFormatError(f"unsupported cube version {manifest.get('version')!r}")
    try:
        m, c, n, k = (int(manifest[x]) for x in ("M", "C", "N", "K"))
    except KeyError as exc:
        raise DatasetFormatError(f"manifest.json missing field {exc}") from exc
    blob = (path / "cube.bin").read_bytes()
    expected = m * c * n * k * 4
    if len(blob) != expected:
        raise DatasetFormatError(
            f"cube.bin holds {len(blob)} bytes, expected {expected}; "
            f"data diverges at byte offset {min(len(blob), expected)}"
        )
    return np.frombuffer(blob, dtype="<f4").reshape(m, c, n, k).copy()
