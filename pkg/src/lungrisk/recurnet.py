"""3-D recurrence CNN over 50 mm ROIs and per-patient score aggregation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DivergenceError, ShapeError
from .forest import roc_auc
from .imgproc import ROI_SIZE, Roi3D
from .neuralcore import (
    AdamState,
    AugmentationConfig,
    Conv3d,
    Dense,
    Dropout,
    LeakyReLU,
    MaxPool3d,
    Model,
    Sigmoid,
    adam_step,
    augment,
    weighted_bce,
)
from .neuralcore.checkpoint import register_model
from .segnet import TrainResult, partition_counts

log = logging.getLogger(__name__)

# in-plane transforms only; the slice stack is not mirrored or rotated in z
RECUR_AUGMENTATION = AugmentationConfig(brightness=0.1, rotation_deg=10.0, shear_deg=5.0, zoom=0.1, flip_prob=0.5)


@dataclass
class RecurNetConfig:
    filters: tuple[int, int, int, int] = (32, 64, 128, 256)
    alpha: float = 0.1
    pool: int = 3
    dense: tuple[int, int, int, int] = (1024, 512, 256, 2)
    dropout: float = 0.25
    pos_weight: float = 3.0
    lr: float = 1e-4
    epochs: int = 80
    batch_size: int = 4
    seed: int = 0
    roi_size: int = ROI_SIZE
    augmentation: AugmentationConfig | None = field(default_factory=lambda: RECUR_AUGMENTATION)

    def validate(self):
        if len(self.filters) != 4 or len(self.dense) != 4:
            raise ConfigError("recurnet needs exactly four conv units and four dense layers")
        if self.dense[-1] != 2:
            raise ConfigError(f"recurnet head must have 2 units, got {self.dense[-1]}")
        if self.flat_features() <= 0:
            raise ConfigError(f"roi_size {self.roi_size} too small for two /{self.pool} poolings")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout {self.dropout} outside [0, 1)")
        return self

    def pooled_extent(self) -> int:
        return (self.roi_size // self.pool) // self.pool

    def flat_features(self) -> int:
        return self.filters[3] * self.pooled_extent() ** 3

    @classmethod
    def from_dict(cls, d: Mapping) -> "RecurNetConfig":
        d = dict(d)
        d.pop("dtype", None)
        aug = d.get("augmentation")
        if isinstance(aug, Mapping):
            d["augmentation"] = AugmentationConfig(**aug)
        d["filters"] = tuple(d.get("filters", cls.filters))
        d["dense"] = tuple(d.get("dense", cls.dense))
        return cls(**d)


class RecurNet(Model):
    """conv-lrelu x2, pool, conv-lrelu x2, pool, flatten, 4 dense layers, sigmoid.

    Each dense layer receives a dropout of its input; hidden dense layers
    are LeakyReLU-activated.
    """

    kind = "recurnet"

    def __init__(self, cfg: RecurNetConfig, dtype=np.float32):
        super().__init__(cfg.validate(), dtype)
        rng = np.random.default_rng(cfg.seed)
        drop_rng = np.random.default_rng(cfg.seed + 7919)
        self.trunk = []
        c = 1
        for i, f in enumerate(cfg.filters):
            self.trunk.append(self.add(f"conv{i}", Conv3d(c, f, 3, 1, rng=rng, dtype=dtype)))
            self.trunk.append(self.add(f"conv{i}.lrelu", LeakyReLU(cfg.alpha)))
            if i in (1, 3):
                self.trunk.append(self.add(f"pool{i // 2}", MaxPool3d(cfg.pool)))
            c = f
        self.head = []
        n_in = cfg.flat_features()
        for j, width in enumerate(cfg.dense):
            self.head.append(self.add(f"fc{j}.dropout", Dropout(cfg.dropout, rng=drop_rng)))
            self.head.append(self.add(f"fc{j}", Dense(n_in, width, rng=rng, dtype=dtype)))
            if j < len(cfg.dense) - 1:
                self.head.append(self.add(f"fc{j}.lrelu", LeakyReLU(cfg.alpha)))
            n_in = width
        self.head.append(self.add("head.sigmoid", Sigmoid()))
        self._trunk_shape = None

    def forward(self, x, train=False):
        x = np.asarray(x, dtype=self.dtype)
        r = self.config.roi_size
        if x.ndim != 5 or x.shape[1:] != (1, r, r, r):
            raise ShapeError(f"recurnet expects (N, 1, {r}, {r}, {r}) input, got {x.shape}")
        h = x
        for layer in self.trunk:
            h = layer.forward(h, train)
        self._trunk_shape = h.shape
        h = h.reshape(len(h), -1)
        for layer in self.head:
            h = layer.forward(h, train)
        return h

    def backward(self, grad):
        g = grad
        for layer in reversed(self.head):
            g = layer.backward(g)
        g = g.reshape(self._trunk_shape)
        for layer in reversed(self.trunk):
            g = layer.backward(g)
        return g

    def shape_trace(self, batch: int = 1) -> list[tuple[str, tuple[int, ...]]]:
        """Output shape after every trunk layer and the flatten, computed from the specs."""
        r = self.config.roi_size
        shape = (batch, 1, r, r, r)
        trace = []
        for layer in self.trunk:
            if layer.kind == "conv3d":
                shape = (batch, layer.out_channels) + shape[2:]
            elif layer.kind == "maxpool3d":
                shape = shape[:2] + tuple(s // layer.size for s in shape[2:])
            trace.append((layer.name, shape))
        trace.append(("flatten", (batch, math.prod(shape[1:]))))
        return trace


def build_recurnet(cfg: RecurNetConfig, dtype=np.float32) -> RecurNet:
    return RecurNet(cfg, dtype)


def _from_config(d: dict) -> RecurNet:
    return RecurNet(RecurNetConfig.from_dict(d), np.dtype(d.get("dtype", "float32")))


register_model(RecurNet.kind, _from_config)


def recurnet_param_count(cfg: RecurNetConfig) -> int:
    total, c = 0, 1
    for f in cfg.filters:
        total += c * f * 27 + f
        c = f
    n_in = cfg.flat_features()
    for width in cfg.dense:
        total += n_in * width + width
        n_in = width
    return total


# ---------------------------------------------------------------------------
# inference


@dataclass(frozen=True)
class RiskScore:
    nodule_id: str
    probability: float

    @property
    def label(self) -> int:
        return int(self.probability >= 0.5)


def _roi_batch(rois, size) -> np.ndarray:
    arrs = [r.voxels if isinstance(r, Roi3D) else np.asarray(r) for r in rois]
    for a in arrs:
        if a.shape != (size, size, size):
            raise ShapeError(f"ROI must be {size}x{size}x{size}, got {a.shape}")
    return np.stack(arrs)[:, None]


def recurnet_scores(model: RecurNet, rois, batch_size: int = 4) -> np.ndarray:
    """Recurrence-unit probabilities (index 1 of the head) for a list of ROIs."""
    if len(rois) == 0:
        return np.zeros(0)
    x = _roi_batch(rois, model.config.roi_size)
    out = []
    for i in range(0, len(x), batch_size):
        out.append(model.forward(x[i:i + batch_size], train=False)[:, 1])
    return np.concatenate(out).astype(np.float64)


def recurnet_predict(model: RecurNet, roi: Roi3D | np.ndarray, nodule_id: str = "") -> RiskScore:
    p = float(recurnet_scores(model, [roi])[0])
    if not math.isfinite(p):
        raise DivergenceError(f"non-finite recurrence score for nodule {nodule_id!r}")
    return RiskScore(nodule_id, p)


def aggregate_patient_score(scores: Sequence[RiskScore | float]) -> float:
    """The most confident score, i.e. the one farthest from 0.5; ties go to the higher value.

    Distances are compared after rounding to 12 decimals so mirror pairs such
    as 0.3 and 0.7 count as tied despite float rounding.
    """
    if len(scores) == 0:
        raise ContractError("aggregate_patient_score needs at least one score")
    values = [s.probability if isinstance(s, RiskScore) else float(s) for s in scores]
    return max(values, key=lambda p: (round(abs(p - 0.5), 12), p))


# ---------------------------------------------------------------------------
# split and training


@dataclass
class RecurrenceSplit:
    train: list[str]
    val: list[str]
    test: list[str]

    def role(self, patient_id: str) -> str | None:
        for name in ("train", "val", "test"):
            if patient_id in getattr(self, name):
                return name
        return None

    def to_json(self) -> str:
        return json.dumps({"train": self.train, "val": self.val, "test": self.test}, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RecurrenceSplit":
        d = json.loads(text)
        return cls(d["train"], d["val"], d["test"])


def make_recurrence_split(labels: Mapping[str, bool], ratios=(0.6, 0.2, 0.2), seed: int = 0) -> RecurrenceSplit:
    """Patient-wise split, apportioned separately within each recurrence class."""
    pos = sorted(p for p, y in labels.items() if y)
    neg = sorted(p for p, y in labels.items() if not y)
    if not pos or not neg:
        raise ContractError("make_recurrence_split needs both recurrence classes")
    rng = np.random.default_rng(seed)
    parts = [[], [], []]
    for group in (pos, neg):
        order = [group[i] for i in rng.permutation(len(group))]
        counts = partition_counts(len(group), ratios, strict=False)
        start = 0
        for k, c in enumerate(counts):
            parts[k].extend(order[start:start + c])
            start += c
    for k, r in enumerate(ratios):
        if r > 0 and not parts[k]:
            raise ContractError(f"too few patients ({len(labels)}) for split ratios {tuple(ratios)}")
    return RecurrenceSplit(*(sorted(p) for p in parts))


@dataclass
class RoiSet:
    rois: np.ndarray  # (N, 50, 50, 50) float32
    labels: np.ndarray  # (N,) 0/1

    def __len__(self):
        return len(self.rois)


def _val_auc(model, data: RoiSet, batch_size) -> float:
    if len(data) == 0 or data.labels.min() == data.labels.max():
        return float("nan")
    return roc_auc(recurnet_scores(model, list(data.rois), batch_size), data.labels)


def train_recurnet(train: RoiSet, val: RoiSet | None, cfg: RecurNetConfig, model: RecurNet | None = None) -> TrainResult:
    """Positive-weighted BCE over both sigmoid units against one-hot targets, with Adam.

    Restores the state with the best validation AUC; when validation AUC is
    undefined (one class only), the latest epoch wins.
    """
    cfg.validate()
    if len(train) == 0:
        raise ContractError("train_recurnet: empty training set")
    model = model or build_recurnet(cfg)
    rng = np.random.default_rng(cfg.seed + 1)
    state = AdamState(lr=cfg.lr)
    params = [p for _, p, _ in model.parameters()]
    history = []
    best = (-math.inf, 0, None)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            rois = train.rois[idx]
            if cfg.augmentation is not None:
                rois = np.stack([augment(r, None, cfg.augmentation, rng)[0] for r in rois])
            y = train.labels[idx].astype(np.float64)
            target = np.stack([1 - y, y], axis=1)
            model.zero_grad()
            pred = model.forward(rois[:, None], train=True)
            loss, grad = weighted_bce(pred, target, cfg.pos_weight)
            if not math.isfinite(loss):
                raise DivergenceError(f"recurnet loss became {loss} at epoch {epoch}, step {model.step}")
            model.backward(grad)
            adam_step(params, [g for _, _, g in model.parameters()], state)
            model.step += 1
            losses.append(loss)
        train_loss = float(np.mean(losses))
        auc = _val_auc(model, val, cfg.batch_size) if val is not None else float("nan")
        history.append((epoch, train_loss, auc))
        log.info("recurnet epoch %d loss %.5f val_auc %.4f", epoch, train_loss, auc)
        score = auc if math.isfinite(auc) else -math.inf
        if best[2] is None or score > best[0] or score == best[0] == -math.inf:
            best = (score, epoch, model.state())
    if best[2] is not None:
        model.load_state(best[2])
    return TrainResult(model, history, best[1])
