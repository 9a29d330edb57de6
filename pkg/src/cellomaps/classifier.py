"""Compact growth-pattern classifier over CellOMap tiles.

Pipeline: fixed binary dilation front (5x5 all-ones, then 2x2 max pool)
-> three 3x3 conv/ReLU layers, max pooled after the first two -> global
average pool -> dense -> softmax over the six patterns. Trained with focal
loss and Adam, with random flips.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .codec import square_dilate
from .errors import (
    DegenerateProbabilityWarning,
    EmptyDataset,
    MalformedInput,
    OddTileSide,
    ShapeMismatch,
)
from .evaluation import macro_f1_score
from .tiler import NUM_PATTERNS

log = logging.getLogger(__name__)

PROB_EPS = 1e-12
DEFAULT_GAMMA = 0.7
LOSSES = ("focal", "cross_entropy", "weighted_cross_entropy")
CHECKPOINT_FORMAT = "cellomaps-classifier"


@dataclass(frozen=True)
class FocalLossParams:
    gamma: float = DEFAULT_GAMMA
    alpha: tuple[float, ...] = (1.0,) * NUM_PATTERNS

    def __post_init__(self):
        if self.gamma < 0:
            raise MalformedInput(f"gamma must be non-negative, got {self.gamma}")
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        if any(a <= 0 for a in self.alpha):
            raise MalformedInput("focal alpha weights must be positive")

    @property
    def num_classes(self) -> int:
        return len(self.alpha)


def focal_loss(probabilities, true_class: int, params: FocalLossParams = FocalLossParams()) -> float:
    """-sum_i alpha_i (1 - p_i)^gamma y_i log p_i for a one-hot y.

    Only the true-class term survives the one-hot. A zero true-class
    probability is clamped to ``PROB_EPS`` with a warning.
    """
    p = np.asarray(probabilities, dtype=np.float64)
    if p.ndim != 1 or p.size != params.num_classes:
        raise ShapeMismatch(f"expected {params.num_classes} probabilities, got shape {p.shape}")
    if not 0 <= true_class < p.size:
        raise MalformedInput(f"true class {true_class} out of range")
    pt = float(p[true_class])
    if pt <= 0.0:
        warnings.warn("true-class probability is 0; clamped before log",
                      DegenerateProbabilityWarning, stacklevel=2)
        pt = PROB_EPS
    modulator = 1.0 if params.gamma == 0 else (1.0 - pt) ** params.gamma
    return -params.alpha[true_class] * modulator * math.log(pt)


def cross_entropy(probabilities, true_class: int) -> float:
    return -math.log(max(float(np.asarray(probabilities)[true_class]), PROB_EPS))


def focal_loss_logits(logits: np.ndarray, targets: np.ndarray, gamma: float, alpha: np.ndarray):
    """Mean focal loss over a batch and its gradient w.r.t. the logits.

    Works from log-softmax, so no clamping is needed on this path.
    """
    logp = nn.log_softmax(logits)
    p = np.exp(logp)
    n = logits.shape[0]
    rows = np.arange(n)
    logp_t = logp[rows, targets]
    p_t = p[rows, targets]
    q = -np.expm1(logp_t)  # 1 - p_t without cancellation
    a = alpha[targets]
    if gamma == 0:
        mod = np.ones_like(q)
        slope = np.zeros_like(q)
    else:
        mod = q ** gamma
        with np.errstate(divide="ignore", invalid="ignore"):
            slope = np.where(q > 0, gamma * q ** (gamma - 1) * p_t * logp_t, 0.0)
    losses = -a * mod * logp_t
    # dL/dz_j = -a [(1-p_t)^g - g (1-p_t)^(g-1) p_t log p_t] (delta_tj - p_j)
    onehot = np.zeros_like(p)
    onehot[rows, targets] = 1.0
    coef = -a * (mod - slope)
    dlogits = coef[:, None] * (onehot - p) / n
    return float(losses.mean()), dlogits.astype(logits.dtype, copy=False)


def inverse_frequency_weights(labels: Sequence[int], num_classes: int = NUM_PATTERNS) -> np.ndarray:
    """Static class weights 1/count, normalised to mean 1 over present classes."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=num_classes).astype(np.float64)
    w = np.ones(num_classes)
    present = counts > 0
    w[present] = 1.0 / counts[present]
    w[present] /= w[present].mean()
    return w


def dilate_front(tile: np.ndarray) -> np.ndarray:
    """5x5 all-ones binary dilation (zero padded) then 2x2/2 max pool, per channel."""
    tile = np.asarray(tile, dtype=bool)
    if tile.ndim == 2:
        tile = tile[None]
    h, w = tile.shape[-2:]
    if h != w:
        raise ShapeMismatch(f"tile must be square, got {h}x{w}")
    if h % 2:
        raise OddTileSide(f"tile side {h} is odd")
    d = square_dilate(tile, 2)
    c = d.shape[0]
    return d.reshape(c, h // 2, 2, w // 2, 2).any(axis=(2, 4))


@dataclass
class PredictionRecord:
    slide_id: str
    x: int
    y: int
    probabilities: np.ndarray
    predicted: int = field(init=False)

    def __post_init__(self):
        self.probabilities = np.asarray(self.probabilities, dtype=np.float64)
        # np.argmax returns the lowest index among ties
        self.predicted = int(np.argmax(self.probabilities))


@dataclass
class ClassifierModel:
    params: dict[str, np.ndarray]
    in_channels: int = 3
    conv_channels: tuple[int, ...] = (16, 32, 64)
    num_classes: int = NUM_PATTERNS
    tile_size: int = 448
    merge_channels: bool = False

    @classmethod
    def create(cls, in_channels: int = 3, tile_size: int = 448, conv_channels=(16, 32, 64),
               num_classes: int = NUM_PATTERNS, seed: int = 0, dtype=np.float32,
               merge_channels: bool = False, zero_head: bool = True) -> "ClassifierModel":
        """He-initialised conv stack; the head starts at zero unless ``zero_head`` is off.

        With ``merge_channels`` all input planes are OR-ed into one before the
        front (the untyped single-channel ablation).
        """
        if tile_size % (2 ** len(conv_channels)) or tile_size % 2:
            raise ShapeMismatch(
                f"tile size {tile_size} must be divisible by {2 ** max(len(conv_channels), 1)}"
            )
        rng = np.random.default_rng(seed)
        params: dict[str, np.ndarray] = {}
        cin = 1 if merge_channels else in_channels
        for i, cout in enumerate(conv_channels, start=1):
            params[f"conv{i}.w"] = nn.he_normal(rng, (3, 3, cin, cout), 9 * cin, dtype)
            params[f"conv{i}.b"] = np.full(cout, 0.01, dtype=dtype)
            cin = cout
        if zero_head:
            params["head.w"] = np.zeros((cin, num_classes), dtype=dtype)
        else:
            params["head.w"] = nn.he_normal(rng, (cin, num_classes), cin, dtype)
        params["head.b"] = np.zeros(num_classes, dtype=dtype)
        return cls(params, in_channels, tuple(conv_channels), num_classes, tile_size, merge_channels)

    @property
    def dtype(self):
        return self.params["head.w"].dtype

    def astype(self, dtype) -> "ClassifierModel":
        other = copy.deepcopy(self)
        other.params = {k: v.astype(dtype) for k, v in self.params.items()}
        return other

    def copy(self) -> "ClassifierModel":
        return copy.deepcopy(self)

    # network proper; x is the front output as (N, H, W, C)
    def logits(self, x: np.ndarray, keep_cache: bool = False):
        caches = []
        n_conv = len(self.conv_channels)
        for i in range(1, n_conv + 1):
            z, conv_cache = nn.conv3x3_forward(x, self.params[f"conv{i}.w"], self.params[f"conv{i}.b"])
            x, relu_mask = nn.relu_forward(z)
            pool_cache = None
            if i < n_conv:
                x, pool_cache = nn.maxpool2_forward(x)
            if keep_cache:
                caches.append((conv_cache, relu_mask, pool_cache))
        pooled = x.mean(axis=(1, 2))
        out = pooled @ self.params["head.w"] + self.params["head.b"]
        return out, (caches, pooled, x.shape)

    def backward(self, dlogits: np.ndarray, cache) -> dict[str, np.ndarray]:
        caches, pooled, feat_shape = cache
        grads = {
            "head.w": pooled.T @ dlogits,
            "head.b": dlogits.sum(axis=0),
        }
        if not caches:
            return grads
        n, h, w, c = feat_shape
        dpooled = dlogits @ self.params["head.w"].T
        dx = np.broadcast_to(dpooled[:, None, None, :] / (h * w), feat_shape)
        for i in range(len(caches), 0, -1):
            conv_cache, relu_mask, pool_cache = caches[i - 1]
            if pool_cache is not None:
                dx = nn.maxpool2_backward(dx, pool_cache)
            dz = nn.relu_backward(dx, relu_mask)
            dx, grads[f"conv{i}.w"], grads[f"conv{i}.b"] = nn.conv3x3_backward(
                dz, conv_cache, need_dx=i > 1
            )
        return grads

    def prepare(self, pixels: np.ndarray) -> np.ndarray:
        """Binary (C, S, S) tile -> front output as (S/2, S/2, C') bool."""
        pixels = np.asarray(pixels, dtype=bool)
        if pixels.ndim != 3 or pixels.shape[1:] != (self.tile_size, self.tile_size):
            raise ShapeMismatch(
                f"expected a (C, {self.tile_size}, {self.tile_size}) tile, got {pixels.shape}"
            )
        if pixels.shape[0] != self.in_channels:
            raise ShapeMismatch(f"expected {self.in_channels} channels, got {pixels.shape[0]}")
        if self.merge_channels:
            pixels = pixels.any(axis=0, keepdims=True)
        return dilate_front(pixels).transpose(1, 2, 0)

    def predict_proba(self, fronts: np.ndarray, batch_size: int = 32) -> np.ndarray:
        out = []
        for start in range(0, len(fronts), batch_size):
            x = np.asarray(fronts[start:start + batch_size], dtype=self.dtype)
            z, _ = self.logits(x)
            out.append(nn.softmax(z.astype(np.float64)))
        if not out:
            return np.zeros((0, self.num_classes))
        return np.concatenate(out)


def forward(model: ClassifierModel, tile) -> PredictionRecord:
    pixels = getattr(tile, "pixels", tile)
    probs = model.predict_proba(model.prepare(pixels)[None])[0]
    return PredictionRecord(getattr(tile, "slide_id", ""), getattr(tile, "x", 0), getattr(tile, "y", 0), probs)


def predict(model: ClassifierModel, tiles: Sequence, batch_size: int = 32) -> list[PredictionRecord]:
    records = []
    for start in range(0, len(tiles), batch_size):
        chunk = tiles[start:start + batch_size]
        fronts = np.stack([model.prepare(t.pixels) for t in chunk])
        probs = model.predict_proba(fronts, batch_size)
        records.extend(PredictionRecord(t.slide_id, t.x, t.y, p) for t, p in zip(chunk, probs))
    return records


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    epochs: int = 20
    seed: int = 0
    hflip: float = 0.5
    vflip: float = 0.5
    loss: str = "focal"
    gamma: float = DEFAULT_GAMMA

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise MalformedInput("learning rate must be non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise MalformedInput("batch size must be positive and epochs non-negative")
        if self.loss not in LOSSES:
            raise MalformedInput(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if not (0 <= self.hflip <= 1 and 0 <= self.vflip <= 1):
            raise MalformedInput("flip probabilities must lie in [0, 1]")


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    val_macro_f1: float


@dataclass
class TrainResult:
    model: ClassifierModel
    history: list[EpochLog]
    best_epoch: int


def loss_weights(config: TrainConfig, labels: Sequence[int], num_classes: int):
    """(gamma, alpha) realising the configured loss."""
    if config.loss == "focal":
        return config.gamma, np.ones(num_classes)
    if config.loss == "cross_entropy":
        return 0.0, np.ones(num_classes)
    return 0.0, inverse_frequency_weights(labels, num_classes)


def _label_index(tile) -> int:
    label = tile.label
    return label if isinstance(label, (int, np.integer)) else label.index


def flip_batch(x: np.ndarray, hflip: np.ndarray, vflip: np.ndarray) -> np.ndarray:
    """Flip (N, H, W, C) samples along W where ``hflip`` and along H where ``vflip``."""
    x = x.copy()
    x[hflip] = x[hflip, :, ::-1]
    x[vflip] = x[vflip, ::-1]
    return x


def train(model: ClassifierModel, tiles: Sequence, val: Sequence, config: TrainConfig = TrainConfig()) -> TrainResult:
    """Adam training; keeps the parameters with the best validation macro-F1.

    Tiles need ``.pixels`` and ``.label``. The front is computed once per
    tile: the dilation kernel is symmetric and the pool grid aligned on an
    even side, so flipping after the front equals flipping before it.
    """
    if not tiles or not val:
        raise EmptyDataset("training and validation sets must be non-empty")
    model = model.copy()
    dtype = model.dtype
    x_train = np.stack([model.prepare(t.pixels) for t in tiles])
    y_train = np.array([_label_index(t) for t in tiles])
    x_val = np.stack([model.prepare(t.pixels) for t in val])
    y_val = np.array([_label_index(t) for t in val])
    gamma, alpha = loss_weights(config, y_train, model.num_classes)
    opt = nn.Adam(model.params, lr=config.learning_rate)

    best_params = {k: v.copy() for k, v in model.params.items()}
    best_f1, best_epoch = -1.0, 0
    history: list[EpochLog] = []
    n = len(x_train)
    for epoch in range(1, config.epochs + 1):
        # one stream per epoch, indexed by tile position: order and flips are seed-determined
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(n)
        hflips = rng.random(n) < config.hflip
        vflips = rng.random(n) < config.vflip
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            xb = flip_batch(x_train[idx], hflips[idx], vflips[idx]).astype(dtype)
            z, cache = model.logits(xb, keep_cache=True)
            loss, dz = focal_loss_logits(z, y_train[idx], gamma, alpha)
            grads = model.backward(dz, cache)
            opt.step(model.params, grads)
            total += loss * len(idx)
        probs = model.predict_proba(x_val, config.batch_size)
        val_loss, _ = focal_loss_logits(np.log(np.maximum(probs, PROB_EPS)), y_val, gamma, alpha)
        f1 = macro_f1_score(y_val, probs.argmax(axis=1), model.num_classes)
        history.append(EpochLog(epoch, total / n, val_loss, f1))
        log.info("epoch %d train_loss %.5f val_loss %.5f val_macro_f1 %.4f", epoch, total / n, val_loss, f1)
        if f1 > best_f1:
            best_f1, best_epoch = f1, epoch
            best_params = {k: v.copy() for k, v in model.params.items()}
    model.params = best_params
    return TrainResult(model, history, best_epoch)


def analytic_gradients(model: ClassifierModel, tile, true_class: int,
                       loss: FocalLossParams = FocalLossParams()) -> dict[str, np.ndarray]:
    """Backprop gradients of the single-tile loss, in float64."""
    model = model.astype(np.float64)
    x = model.prepare(getattr(tile, "pixels", tile))[None].astype(np.float64)
    z, cache = model.logits(x, keep_cache=True)
    _, dz = focal_loss_logits(z, np.array([true_class]), loss.gamma, np.asarray(loss.alpha))
    return model.backward(dz, cache)


def gradient_check(model: ClassifierModel, tile, true_class: int, epsilon: float = 1e-5,
                   loss: FocalLossParams = FocalLossParams(), floor: float = 1e-8) -> float:
    """Max relative error between backprop and central differences over all parameters."""
    if not 1e-7 <= epsilon <= 1e-4:
        raise MalformedInput("epsilon must lie in [1e-7, 1e-4]")
    analytic = analytic_gradients(model, tile, true_class, loss)
    model = model.astype(np.float64)
    x = model.prepare(getattr(tile, "pixels", tile))[None].astype(np.float64)
    y = np.array([true_class])
    alpha = np.asarray(loss.alpha, dtype=np.float64)

    def loss_fn():
        return focal_loss_logits(model.logits(x)[0], y, loss.gamma, alpha)[0]

    numeric = nn.numeric_gradients(model.params, loss_fn, epsilon)
    return nn.max_relative_error(analytic, numeric, floor)


def save_checkpoint(model: ClassifierModel, path) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "config": {
            "in_channels": model.in_channels,
            "conv_channels": list(model.conv_channels),
            "num_classes": model.num_classes,
            "tile_size": model.tile_size,
            "merge_channels": model.merge_channels,
        },
        "params": {
            name: {"shape": list(p.shape), "dtype": str(p.dtype), "data": p.astype(np.float64).ravel().tolist()}
            for name, p in model.params.items()
        },
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_checkpoint(path) -> ClassifierModel:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != 1:
            raise MalformedInput(f"{path}: not a version-1 classifier checkpoint")
        cfg = doc["config"]
        params = {
            name: np.array(spec["data"], dtype=np.float64).astype(spec["dtype"]).reshape(spec["shape"])
            for name, spec in doc["params"].items()
        }
        return ClassifierModel(params, cfg["in_channels"], tuple(cfg["conv_channels"]),
                               cfg["num_classes"], cfg["tile_size"], cfg["merge_channels"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise MalformedInput(f"{path}: bad checkpoint ({exc})") from None


def write_training_log(history: Sequence[EpochLog], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_loss", "val_macro_f1"])
        for h in history:
            writer.writerow([h.epoch, repr(h.train_loss), repr(h.val_loss), repr(h.val_macro_f1)])


PREDICTION_COLUMNS = ["slide_id", "x", "y"] + [f"p{i}" for i in range(NUM_PATTERNS)] + ["predicted"]


def write_predictions(records: Sequence[PredictionRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PREDICTION_COLUMNS)
        for r in records:
            writer.writerow([r.slide_id, r.x, r.y, *(repr(float(p)) for p in r.probabilities), r.predicted])


def read_predictions(path) -> list[PredictionRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(PREDICTION_COLUMNS) - set(reader.fieldnames):
            raise MalformedInput(f"{path}: predictions need columns {', '.join(PREDICTION_COLUMNS)}")
        try:
            return [
                PredictionRecord(r["slide_id"], int(r["x"]), int(r["y"]),
                                 [float(r[f"p{i}"]) for i in range(NUM_PATTERNS)])
                for r in reader
            ]
        except ValueError as exc:
            raise MalformedInput(f"{path}: {exc}") from None
