"""Feed-forward classifier, masked binary cross-entropy, SGD, checkpoints.

Fixed topology: flattened grid -> 128 -> 64 -> K logits with ReLU hidden
activations and one inverted-dropout site on the 64-unit activation (so
eval needs no rescaling). Targets are per-sample per-class entries in
{+1 learn-positive, -1 learn-negative, 0 ignore}; the loss averages over
non-ignored entries only and is differentiated through the softmax.

All math runs in the dtype of the weights: float32 in production, float64
when verifying gradients against finite differences.
"""

from __future__ import annotations

import json
import logging
import struct
from bisect import bisect_right
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .tensor import SeededRng, ShapeError

__all__ = [
    "OptimizerConfig",
    "PRETRAIN_SCHEDULE",
    "INITIAL_SCHEDULE",
    "RETRAIN_SCHEDULE",
    "ClassifierState",
    "init_classifier",
    "flatten_grids",
    "targets_from_labels",
    "forward",
    "loss_and_grads",
    "bce_loss",
    "effective_lr",
    "sgd_step",
    "train",
    "predict_probs",
    "save_checkpoint",
    "load_checkpoint",
]

log = logging.getLogger(__name__)

HIDDEN = (128, 64)
PARAM_ORDER = ("w1", "b1", "w2", "b2", "w3", "b3")
PROB_CLAMP = 1e-7

_CKPT_MAGIC = b"PLCKPT1\n"


@dataclass(frozen=True)
class OptimizerConfig:
    epochs: int
    milestones: tuple[int, ...] = ()
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    gamma: float = 0.1

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        ms = tuple(self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"milestones must be strictly increasing, got {ms}")
        if ms and ms[-1] >= self.epochs:
            raise ValueError(f"milestones {ms} must all be < epochs ({self.epochs})")

    def with_epochs(self, epochs: int, milestones: tuple[int, ...] | None = None) -> "OptimizerConfig":
        if milestones is None:
            milestones = tuple(m for m in self.milestones if m < epochs)
        return replace(self, epochs=epochs, milestones=milestones)


PRETRAIN_SCHEDULE = OptimizerConfig(epochs=200, milestones=(120, 160))
INITIAL_SCHEDULE = OptimizerConfig(epochs=100, milestones=(60, 80))
RETRAIN_SCHEDULE = OptimizerConfig(epochs=20, milestones=(12, 16))


@dataclass
class ClassifierState:
    """Weights, momentum buffers and bookkeeping for one classifier.

    Single-owner while training; safe to share for inference once trained.
    """

    params: dict[str, np.ndarray]
    momentum: dict[str, np.ndarray]
    dropout_rate: float
    seed: int
    epochs_trained: int = 0

    @property
    def input_dim(self) -> int:
        return self.params["w1"].shape[0]

    @property
    def num_classes(self) -> int:
        return self.params["w3"].shape[1]

    def copy(self) -> "ClassifierState":
        return ClassifierState(
            params={k: v.copy() for k, v in self.params.items()},
            momentum={k: v.copy() for k, v in self.momentum.items()},
            dropout_rate=self.dropout_rate,
            seed=self.seed,
            epochs_trained=self.epochs_trained,
        )

    def check_finite(self) -> None:
        for name, value in self.params.items():
            if not np.all(np.isfinite(value)):
                raise FloatingPointError(f"parameter {name} went non-finite")


def init_classifier(
    input_dim: int,
    num_classes: int,
    dropout_rate: float = 0.3,
    seed: int = 0,
    hidden: tuple[int, int] = HIDDEN,
) -> ClassifierState:
    """Gaussian init with sigma = 1/sqrt(fan_in); biases zero."""
    if not 0.0 <= dropout_rate < 1.0:
        raise ValueError(f"dropout_rate must be in [0, 1), got {dropout_rate}")
    h1, h2 = hidden
    rng = SeededRng(seed)
    dims = [(input_dim, h1), (h1, h2), (h2, num_classes)]
    params: dict[str, np.ndarray] = {}
    for i, (fan_in, fan_out) in enumerate(dims, start=1):
        params[f"w{i}"] = rng.gaussian((fan_in, fan_out), sigma=1.0 / np.sqrt(fan_in))
        params[f"b{i}"] = np.zeros(fan_out, dtype=np.float32)
    momentum = {k: np.zeros_like(v) for k, v in params.items()}
    return ClassifierState(params, momentum, dropout_rate, seed)


def flatten_grids(grids: np.ndarray) -> np.ndarray:
    """[N, F, T] grids -> [N, F*T] float32 rows."""
    grids = np.asarray(grids, dtype=np.float32)
    if grids.ndim == 2:
        return np.ascontiguousarray(grids)
    if grids.ndim != 3:
        raise ShapeError(f"expected [N, F, T] grids, got {grids.shape}")
    return np.ascontiguousarray(grids.reshape(len(grids), -1))


def targets_from_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Labeled rows: +1 at the true class, 0 (ignore) elsewhere."""
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(labels), num_classes), dtype=np.float32)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _softmax_keep_dtype(z: np.ndarray) -> np.ndarray:
    x = z.astype(np.float64, copy=False)
    x = x - x.max(axis=1, keepdims=True)
    e = np.exp(x)
    return (e / e.sum(axis=1, keepdims=True)).astype(z.dtype)


def make_dropout_mask(rng: SeededRng, shape, rate: float, dtype=np.float32) -> np.ndarray:
    """Inverted-dropout mask: zeros with probability `rate`, survivors 1/(1-rate)."""
    keep = 1.0 - rate
    return (rng.bernoulli(shape, keep) / np.asarray(keep, dtype=np.float32)).astype(dtype)


def forward(
    state: ClassifierState,
    batch: np.ndarray,
    mode: str = "eval",
    rng: SeededRng | None = None,
    mc_dropout: bool = False,
    dropout_mask: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Run the network; returns (logits, probs).

    Train mode (or `mc_dropout` in eval mode) applies inverted dropout to
    the penultimate activation, drawing the mask from `rng` unless one is
    passed explicitly. Eval mode without `mc_dropout` is deterministic.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(batch)
    if x.ndim != 2 or x.shape[1] != state.input_dim:
        raise ShapeError(f"batch shape {x.shape} does not match input width {state.input_dim}")
    use_dropout = (mode == "train" or mc_dropout) and state.dropout_rate > 0.0
    mask = dropout_mask
    if use_dropout and mask is None:
        if rng is None:
            raise ValueError("dropout is active but no rng was provided")
        mask = make_dropout_mask(rng, (len(x), HIDDEN[1]), state.dropout_rate, dtype=x.dtype)
    if not use_dropout:
        mask = None
    logits = _forward_logits(state.params, x, mask)
    return logits, _softmax_keep_dtype(logits)


def _forward_logits(params, x, mask):
    h1 = np.maximum(x @ params["w1"] + params["b1"], 0)
    h2 = np.maximum(h1 @ params["w2"] + params["b2"], 0)
    if mask is not None:
        h2 = h2 * mask
    return h2 @ params["w3"] + params["b3"]


def bce_loss(probs: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Masked binary cross-entropy and its gradient w.r.t. the logits.

    loss = -mean over entries with t != 0 of
           [ 1{t=+1} log p + 1{t=-1} log(1-p) ],  p clamped to [1e-7, 1-1e-7].
    Entries with t = 0 contribute nothing; if everything is ignored the
    loss is 0 with a zero gradient.
    """
    t = np.asarray(targets)
    p = np.asarray(probs)
    if p.shape != t.shape:
        raise ShapeError(f"probs {p.shape} and targets {t.shape} differ")
    pos = t == 1
    neg = t == -1
    n = int(pos.sum()) + int(neg.sum())
    if n == 0:
        return 0.0, np.zeros_like(p)
    p64 = p.astype(np.float64, copy=False)
    pc = np.clip(p64, PROB_CLAMP, 1.0 - PROB_CLAMP)
    loss = -(np.log(pc[pos]).sum() + np.log(1.0 - pc[neg]).sum()) / n
    g = np.zeros_like(p64)
    g[pos] = -1.0 / pc[pos]
    g[neg] = 1.0 / (1.0 - pc[neg])
    g /= n
    # chain through softmax: dL/dz_j = p_j * (g_j - sum_k g_k p_k)
    dz = p64 * (g - np.sum(g * p64, axis=1, keepdims=True))
    return float(loss), dz.astype(p.dtype)


def _loss_grads_probs(params, x, targets, dropout_mask):
    a1 = x @ params["w1"] + params["b1"]
    h1 = np.maximum(a1, 0)
    a2 = h1 @ params["w2"] + params["b2"]
    h2 = np.maximum(a2, 0)
    h2d = h2 * dropout_mask if dropout_mask is not None else h2
    z = h2d @ params["w3"] + params["b3"]
    p = _softmax_keep_dtype(z)
    loss, dz = bce_loss(p, targets)

    dw3 = h2d.T @ dz
    db3 = dz.sum(axis=0)
    dh2 = dz @ params["w3"].T
    if dropout_mask is not None:
        dh2 = dh2 * dropout_mask
    da2 = dh2 * (a2 > 0)
    dw2 = h1.T @ da2
    db2 = da2.sum(axis=0)
    dh1 = da2 @ params["w2"].T
    da1 = dh1 * (a1 > 0)
    dw1 = x.T @ da1
    db1 = da1.sum(axis=0)
    grads = {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2, "w3": dw3, "b3": db3}
    return loss, grads, p


def loss_and_grads(
    state: ClassifierState,
    x: np.ndarray,
    targets: np.ndarray,
    dropout_mask: np.ndarray | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Forward + backward for one batch; deterministic given the mask."""
    loss, grads, _ = _loss_grads_probs(state.params, x, targets, dropout_mask)
    return loss, grads


def effective_lr(config: OptimizerConfig, epoch: int) -> float:
    """lr * gamma^(number of milestones <= epoch)."""
    return config.lr * config.gamma ** bisect_right(list(config.milestones), epoch)


def sgd_step(state: ClassifierState, grads: dict[str, np.ndarray], config: OptimizerConfig, epoch: int) -> ClassifierState:
    """v <- momentum*v + (grad + weight_decay*w);  w <- w - lr_eff*v."""
    lr_eff = effective_lr(config, epoch)
    for name in PARAM_ORDER:
        w = state.params[name]
        g = grads[name]
        if config.weight_decay:
            g = g + config.weight_decay * w
        v = state.momentum[name]
        v *= config.momentum
        v += g
        w -= lr_eff * v
    return state


def train(
    state: ClassifierState,
    x: np.ndarray,
    targets: np.ndarray,
    config: OptimizerConfig,
    rng: SeededRng,
    history: list | None = None,
) -> ClassifierState:
    """Shuffled-minibatch SGD for `config.epochs` epochs.

    The shuffle order and dropout masks come from `rng`, so identical seeds
    give identical final weights. Per-epoch mean loss and (train-batch)
    accuracy are appended to `history` when given and logged at DEBUG.
    """
    x = np.asarray(x, dtype=np.float32)
    t = np.asarray(targets, dtype=np.float32)
    n = len(x)
    if n == 0:
        raise ValueError("training set is empty")
    if t.shape != (n, state.num_classes):
        raise ShapeError(f"targets shape {t.shape} does not match ({n}, {state.num_classes})")
    pos_cls = t.argmax(axis=1)
    has_pos = t.max(axis=1) == 1.0
    bsz = config.batch_size
    rate = state.dropout_rate
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        losses = []
        correct = 0
        seen = 0
        for start in range(0, n, bsz):
            idx = perm[start : start + bsz]
            xb = x[idx]
            tb = t[idx]
            mask = make_dropout_mask(rng, (len(idx), HIDDEN[1]), rate) if rate > 0 else None
            loss, grads, probs = _loss_grads_probs(state.params, xb, tb, dropout_mask=mask)
            # accuracy over rows that carry a positive target, from the same pass
            hp = has_pos[idx]
            if hp.any():
                correct += int((probs[hp].argmax(axis=1) == pos_cls[idx][hp]).sum())
                seen += int(hp.sum())
            sgd_step(state, grads, config, epoch)
            losses.append(loss)
        mean_loss = float(np.mean(losses))
        acc = correct / seen if seen else float("nan")
        if history is not None:
            history.append((epoch, mean_loss, acc))
        log.debug("epoch %d: loss %.5f acc %.4f", epoch, mean_loss, acc)
        state.check_finite()
    state.epochs_trained += config.epochs
    return state


def predict_probs(state: ClassifierState, x: np.ndarray, batch_size: int = 4096) -> np.ndarray:
    """Deterministic eval-mode class probabilities for [N, D] inputs."""
    x = np.asarray(x, dtype=np.float32)
    out = np.empty((len(x), state.num_classes), dtype=np.float32)
    for start in range(0, len(x), batch_size):
        chunk = x[start : start + batch_size]
        out[start : start + len(chunk)] = _softmax_keep_dtype(_forward_logits(state.params, chunk, None))
    return out


def save_checkpoint(state: ClassifierState, path) -> None:
    """Single-file checkpoint: magic, manifest JSON, float32 LE weight blob."""
    manifest = {
        "version": 1,
        "dropout_rate": state.dropout_rate,
        "seed": state.seed,
        "epochs_trained": state.epochs_trained,
        "params": [[name, list(state.params[name].shape)] for name in PARAM_ORDER],
    }
    man = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = b"".join(state.params[n].astype("<f4").tobytes() for n in PARAM_ORDER)
    blob += b"".join(state.momentum[n].astype("<f4").tobytes() for n in PARAM_ORDER)
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(man)))
        fh.write(man)
        fh.write(blob)


def load_checkpoint(path) -> ClassifierState:
    raw = Path(path).read_bytes()
    if not raw.startswith(_CKPT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    off = len(_CKPT_MAGIC)
    (man_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    manifest = json.loads(raw[off : off + man_len].decode("utf-8"))
    off += man_len
    if manifest.get("version") != 1:
        raise ValueError(f"unsupported checkpoint version {manifest.get('version')!r}")
    params: dict[str, np.ndarray] = {}
    momentum: dict[str, np.ndarray] = {}
    for target in (params, momentum):
        for name, shape in manifest["params"]:
            count = int(np.prod(shape)) if shape else 1
            end = off + 4 * count
            if end > len(raw):
                raise ValueError(f"{path}: checkpoint blob truncated at byte {len(raw)}")
            target[name] = np.frombuffer(raw[off:end], dtype="<f4").reshape(shape).copy()
            off = end
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes after weight blob")
    return ClassifierState(
        params=params,
        momentum=momentum,
        dropout_rate=float(manifest["dropout_rate"]),
        seed=int(manifest["seed"]),
        epochs_trained=int(manifest["epochs_trained"]),
    )
