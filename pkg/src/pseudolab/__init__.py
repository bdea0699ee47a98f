"""Uncertainty-gated pseudo-labeling for semi-supervised adaptation.

A classifier trained on a label-rich source regime is adapted to a
sparsely-labeled target regime by pseudo-labeling the unlabeled pool with
an ensemble vote: M models (optionally with C Monte-Carlo dropout passes
each) must agree unanimously, and the pooled mean softmax of the voted
class must clear a threshold, before a sample joins the training set for
the next retraining round.
"""

from .dataset import (
    DatasetFormatError,
    LabeledSet,
    Snapshot,
    SnapshotSet,
    SplitSpec,
    UnlabeledPool,
    load_dataset,
    save_dataset,
    split,
    synth_generate,
)
from .loop import RunConfig, RunLog, adapt, evaluate, pretrain
from .model import (
    INITIAL_SCHEDULE,
    PRETRAIN_SCHEDULE,
    RETRAIN_SCHEDULE,
    ClassifierState,
    OptimizerConfig,
    init_classifier,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .selection import SelectionConfig, SelectionMask, hard_labels, select_confidence, select_uncertainty, vote
from .tensor import SeededRng, ShapeError, matmul, mean_std, softmax
from .uncertainty import UncertaintySummary, ece, predict_cube, summarize

__version__ = "0.1.0"

__all__ = [
    "DatasetFormatError",
    "LabeledSet",
    "Snapshot",
    "SnapshotSet",
    "SplitSpec",
    "UnlabeledPool",
    "load_dataset",
    "save_dataset",
    "split",
    "synth_generate",
    "RunConfig",
    "RunLog",
    "adapt",
    "evaluate",
    "pretrain",
    "INITIAL_SCHEDULE",
    "PRETRAIN_SCHEDULE",
    "RETRAIN_SCHEDULE",
    "ClassifierState",
    "OptimizerConfig",
    "init_classifier",
    "load_checkpoint",
    "save_checkpoint",
    "train",
    "SelectionConfig",
    "SelectionMask",
    "hard_labels",
    "select_confidence",
    "select_uncertainty",
    "vote",
    "SeededRng",
    "ShapeError",
    "matmul",
    "mean_std",
    "softmax",
    "UncertaintySummary",
    "ece",
    "predict_cube",
    "summarize",
    "__version__",
]
