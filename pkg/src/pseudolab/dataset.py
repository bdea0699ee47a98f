"""Snapshot data model, synthetic chirp/noise generator, disk format, splits.

A snapshot is an F x T grid of spectrogram-like intensities. Class 0 is
plain Gaussian background noise; classes >= 1 add a linear-frequency chirp
ridge whose slope, width and SNR are drawn per sample. Labeled data and the
unlabeled pool are separate types: the pool keeps its ground truth (when it
has one) in an evaluation-only channel that training code never touches.

On-disk format (one directory per dataset):
  manifest.json  {"version": 1, "count": N, "F": F, "T": T, "K": K,
                  "labels": [int, ...]}    label -1 means unlabeled
  grids.bin      count*F*T little-endian float32 values, row-major,
                  samples concatenated in manifest order
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import SeededRng

__all__ = [
    "DatasetFormatError",
    "Snapshot",
    "LabeledSet",
    "UnlabeledPool",
    "SnapshotSet",
    "SplitSpec",
    "synth_generate",
    "split",
    "save_dataset",
    "load_dataset",
]

MIN_GRID = 8


class DatasetFormatError(ValueError):
    """An on-disk dataset directory is malformed."""


def _check_grids(grids: np.ndarray) -> np.ndarray:
    grids = np.ascontiguousarray(grids, dtype=np.float32)
    if grids.ndim != 3:
        raise ValueError(f"grids must be [N, F, T], got shape {grids.shape}")
    _, f, t = grids.shape
    if f < MIN_GRID or t < MIN_GRID:
        raise ValueError(f"grid must be at least {MIN_GRID}x{MIN_GRID}, got {f}x{t}")
    if not np.all(np.isfinite(grids)):
        raise ValueError("grids contain non-finite intensities")
    return grids


@dataclass(frozen=True)
class Snapshot:
    """One F x T intensity grid with an optional class label."""

    grid: np.ndarray
    label: int | None = None


@dataclass
class LabeledSet:
    """Snapshots whose labels are all known and visible to training."""

    grids: np.ndarray  # [N, F, T] float32
    labels: np.ndarray  # [N] int64 in {0..K-1}
    num_classes: int

    def __post_init__(self):
        self.grids = _check_grids(self.grids)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape != (len(self.grids),):
            raise ValueError("labels length does not match grids")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.grids)

    def snapshot(self, i: int) -> Snapshot:
        return Snapshot(grid=self.grids[i], label=int(self.labels[i]))

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass
class UnlabeledPool:
    """Snapshots without visible labels.

    `hidden_truth`, when present, is a metrics-only channel (e.g. selection
    correctness); no training op reads it.
    """

    grids: np.ndarray
    num_classes: int
    hidden_truth: np.ndarray | None = None

    def __post_init__(self):
        self.grids = _check_grids(self.grids)
        if self.hidden_truth is not None:
            self.hidden_truth = np.asarray(self.hidden_truth, dtype=np.int64)
            if self.hidden_truth.shape != (len(self.grids),):
                raise ValueError("hidden_truth length does not match grids")

    def __len__(self) -> int:
        return len(self.grids)

    def snapshot(self, i: int) -> Snapshot:
        return Snapshot(grid=self.grids[i], label=None)


@dataclass
class SnapshotSet:
    """Mixed container mirroring the disk format: label -1 means unlabeled."""

    grids: np.ndarray
    labels: np.ndarray  # [N] int64, -1 or {0..K-1}
    num_classes: int

    def __post_init__(self):
        self.grids = _check_grids(self.grids)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape != (len(self.grids),):
            raise ValueError("labels length does not match grids")
        if len(self.labels) and (self.labels.min() < -1 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must be -1 or lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.grids)

    def to_labeled(self) -> LabeledSet:
        if np.any(self.labels < 0):
            raise ValueError("set contains unlabeled snapshots")
        return LabeledSet(self.grids, self.labels, self.num_classes)

    def partition(self) -> tuple[LabeledSet, UnlabeledPool]:
        """Split into labeled rows and an unlabeled pool (no hidden truth)."""
        lab = self.labels >= 0
        labeled = LabeledSet(self.grids[lab], self.labels[lab], self.num_classes)
        pool = UnlabeledPool(self.grids[~lab], self.num_classes, hidden_truth=None)
        return labeled, pool


@dataclass(frozen=True)
class SplitSpec:
    """Stratified labeled/unlabeled/test split parameters.

    The labeled subset per class is round-half-up(fraction * class count in
    the train portion), floored at `per_class_minimum`.
    """

    label_fraction: float
    seed: int
    per_class_minimum: int = 5
    test_fraction: float = 0.2

    def __post_init__(self):
        if not 0.0 < self.label_fraction <= 1.0:
            raise ValueError(f"label_fraction must be in (0, 1], got {self.label_fraction}")
        if self.per_class_minimum < 1:
            raise ValueError("per_class_minimum must be >= 1")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ValueError("test_fraction must be in [0, 1)")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def synth_generate(
    n_per_class,
    snr_range: tuple[float, float] = (0.0, 10.0),
    chirp_slope_range: tuple[float, float] = (-0.8, 0.8),
    seed: int = 0,
    grid_shape: tuple[int, int] = (32, 32),
    noise_sigma: float = 1.0,
    width_range: tuple[float, float] = (1.5, 1.5),
    noise_sigma_range: tuple[float, float] | None = None,
) -> LabeledSet:
    """Generate a labeled synthetic chirp-vs-noise dataset.

    Class 0 grids are Gaussian background noise (sigma `noise_sigma`).
    Class c >= 1 grids add a Gaussian-profile ridge along f = f0 + s*t with
    slope s drawn from the c-th equal sub-band of `chirp_slope_range`, width
    from `width_range` (bins), and peak amplitude 10**(snr_db/20) against
    the nominal unit noise floor, snr_db drawn from `snr_range`.
    `noise_sigma_range`, when given, draws the noise level per sample
    (receiver-gain variation: grid energy alone then no longer separates
    the classes, and the effective ridge contrast spreads around the
    nominal SNR). Deterministic per seed; each sample draws from its own
    forked stream so generation order does not matter.
    """
    counts = [int(c) for c in n_per_class]
    if any(c < 0 for c in counts):
        raise ValueError(f"class counts must be >= 0, got {counts}")
    total = sum(counts)
    if total == 0:
        raise ValueError("at least one sample is required")
    if snr_range[0] > snr_range[1]:
        raise ValueError(f"snr_range lo > hi: {snr_range}")
    if chirp_slope_range[0] > chirp_slope_range[1]:
        raise ValueError(f"chirp_slope_range lo > hi: {chirp_slope_range}")
    if width_range[0] > width_range[1] or width_range[0] <= 0:
        raise ValueError(f"bad width_range: {width_range}")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    if noise_sigma_range is not None and not 0 <= noise_sigma_range[0] <= noise_sigma_range[1]:
        raise ValueError(f"bad noise_sigma_range: {noise_sigma_range}")
    f_bins, t_bins = grid_shape
    if f_bins < MIN_GRID or t_bins < MIN_GRID:
        raise ValueError(f"grid must be at least {MIN_GRID}x{MIN_GRID}")

    k = len(counts)
    base = SeededRng(seed)
    grids = np.empty((total, f_bins, t_bins), dtype=np.float32)
    labels = np.empty(total, dtype=np.int64)
    t_axis = np.arange(t_bins, dtype=np.float64)
    f_axis = np.arange(f_bins, dtype=np.float64)

    i = 0
    for cls, n in enumerate(counts):
        for _ in range(n):
            rng = base.fork(i)
            grid = np.zeros((f_bins, t_bins), dtype=np.float32)
            # draw order fixed: sigma (only when a range is set), then
            # slope, width, snr, f0 for chirp classes
            if noise_sigma_range is None:
                sigma = noise_sigma
            else:
                sigma_draw = float(rng.uniform(()))
            if cls >= 1:
                lo, hi = chirp_slope_range
                band = (hi - lo) / max(k - 1, 1)
                s_lo = lo + (cls - 1) * band
                slope = s_lo + float(rng.uniform(())) * band
                width = width_range[0] + float(rng.uniform(())) * (width_range[1] - width_range[0])
                snr_db = snr_range[0] + float(rng.uniform(())) * (snr_range[1] - snr_range[0])
                sweep = slope * (t_bins - 1)
                f0_lo = 1.5 + max(0.0, -sweep)
                f0_hi = (f_bins - 2.5) - max(0.0, sweep)
                if f0_hi < f0_lo:  # slope too steep for the grid: center the ridge
                    f0 = (f_bins - 1) / 2.0 - sweep / 2.0
                    rng.uniform(())  # keep the draw count uniform across samples
                else:
                    f0 = f0_lo + float(rng.uniform(())) * (f0_hi - f0_lo)
                if noise_sigma_range is not None:
                    sigma = noise_sigma_range[0] + sigma_draw * (noise_sigma_range[1] - noise_sigma_range[0])
                centers = f0 + slope * t_axis
                # SNR is quoted against the nominal unit noise floor
                amp = 10.0 ** (snr_db / 20.0)
                ridge = amp * np.exp(-((f_axis[:, None] - centers[None, :]) ** 2) / (2.0 * width * width))
                grid += ridge.astype(np.float32)
            elif noise_sigma_range is not None:
                sigma = noise_sigma_range[0] + sigma_draw * (noise_sigma_range[1] - noise_sigma_range[0])
            if sigma > 0:
                grid += sigma * rng.gaussian((f_bins, t_bins))
            grids[i] = grid
            labels[i] = cls
            i += 1
    return LabeledSet(grids, labels, num_classes=k)


def split(data: LabeledSet, spec: SplitSpec) -> tuple[LabeledSet, UnlabeledPool, LabeledSet]:
    """Stratified split into (labeled, unlabeled pool, test).

    A disjoint stratified `test_fraction` holdout is carved first; the
    remaining train portion is split per class into a labeled sliver of
    size max(round-half-up(fraction * n_c), per_class_minimum) plus the
    pool. The pool keeps its truth in the metrics-only channel. Every input
    snapshot lands in exactly one of the three outputs.
    """
    if len(data) == 0:
        raise ValueError("cannot split an empty dataset")
    base = SeededRng(spec.seed)
    lab_idx: list[np.ndarray] = []
    pool_idx: list[np.ndarray] = []
    test_idx: list[np.ndarray] = []
    for cls in range(data.num_classes):
        idx = np.flatnonzero(data.labels == cls)
        if len(idx) == 0:
            continue
        shuffled = idx[base.fork(cls).permutation(len(idx))]
        n_test = _round_half_up(spec.test_fraction * len(idx))
        train_part = shuffled[n_test:]
        n_lab = max(_round_half_up(spec.label_fraction * len(train_part)), spec.per_class_minimum)
        if n_lab > len(train_part):
            raise ValueError(
                f"class {cls}: cannot label {n_lab} of {len(train_part)} train samples "
                f"(fraction {spec.label_fraction}, per_class_minimum {spec.per_class_minimum})"
            )
        test_idx.append(shuffled[:n_test])
        lab_idx.append(train_part[:n_lab])
        pool_idx.append(train_part[n_lab:])

    def _gather(parts: list[np.ndarray]) -> np.ndarray:
        if not parts:
            return np.empty(0, dtype=np.int64)
        return np.sort(np.concatenate(parts))

    li, pi, ti = _gather(lab_idx), _gather(pool_idx), _gather(test_idx)
    labeled = LabeledSet(data.grids[li], data.labels[li], data.num_classes)
    pool = UnlabeledPool(data.grids[pi], data.num_classes, hidden_truth=data.labels[pi])
    test = LabeledSet(data.grids[ti], data.labels[ti], data.num_classes)
    return labeled, pool, test


def _labels_for_save(ds) -> np.ndarray:
    if isinstance(ds, UnlabeledPool):
        # truth stays hidden: the format only carries public labels
        return np.full(len(ds), -1, dtype=np.int64)
    return np.asarray(ds.labels, dtype=np.int64)


def save_dataset(ds, path) -> None:
    """Write a LabeledSet / UnlabeledPool / SnapshotSet as a dataset directory."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    grids = np.ascontiguousarray(ds.grids, dtype=np.float32)
    n, f, t = grids.shape
    manifest = {
        "version": 1,
        "count": n,
        "F": f,
        "T": t,
        "K": int(ds.num_classes),
        "labels": [int(x) for x in _labels_for_save(ds)],
    }
    (path / "manifest.json").write_text(json.dumps(manifest, sort_keys=True), encoding="utf-8")
    (path / "grids.bin").write_bytes(grids.astype("<f4").tobytes())


def load_dataset(path) -> SnapshotSet:
    """Read a dataset directory; inverse of :func:`save_dataset`.

    Raises :class:`DatasetFormatError` on malformed manifests, version or
    length mismatches (with the byte offset where the data file diverges
    from the declared size).
    """
    path = Path(path)
    man_path = path / "manifest.json"
    if not man_path.is_file():
        raise DatasetFormatError(f"missing manifest.json in {path}")
    try:
        manifest = json.loads(man_path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DatasetFormatError(f"malformed manifest.json: {exc}") from exc
    if not isinstance(manifest, dict):
        raise DatasetFormatError("manifest.json must contain an object")
    for key in ("version", "count", "F", "T", "K", "labels"):
        if key not in manifest:
            raise DatasetFormatError(f"manifest.json missing field {key!r}")
    if manifest["version"] != 1:
        raise DatasetFormatError(f"unsupported dataset version {manifest['version']!r}")
    n, f, t, k = (int(manifest[x]) for x in ("count", "F", "T", "K"))
    labels = manifest["labels"]
    if len(labels) != n:
        raise DatasetFormatError(f"manifest count {n} but {len(labels)} labels present")
    blob_path = path / "grids.bin"
    if not blob_path.is_file():
        raise DatasetFormatError(f"missing grids.bin in {path}")
    blob = blob_path.read_bytes()
    expected = n * f * t * 4
    if len(blob) != expected:
        raise DatasetFormatError(
            f"grids.bin holds {len(blob)} bytes, expected {expected}; "
            f"data diverges at byte offset {min(len(blob), expected)}"
        )
    grids = np.frombuffer(blob, dtype="<f4").reshape(n, f, t).astype(np.float32)
    if not np.all(np.isfinite(grids)):
        raise DatasetFormatError("grids.bin contains non-finite values")
    try:
        return SnapshotSet(grids, np.asarray(labels, dtype=np.int64), num_classes=k)
    except ValueError as exc:
        raise DatasetFormatError(str(exc)) from exc
