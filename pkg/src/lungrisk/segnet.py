"""Residual U-Net for 2-D nodule segmentation: model, split, training, metrics."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DivergenceError, ShapeError
from .imgproc import Slice2D, ceiling_mask
from .ingest import NoduleRecord
from .neuralcore import (
    AdamState,
    AugmentationConfig,
    BatchNorm,
    Concat,
    Conv2d,
    Model,
    Project1x1,
    ReLU,
    ResidualAdd,
    Sigmoid,
    Upsample2x,
    adam_step,
    augment,
    weighted_bce,
)
from .neuralcore.checkpoint import register_model

log = logging.getLogger(__name__)

THRESHOLD = 0.5


@dataclass
class SegNetConfig:
    input_size: int = 256
    widths: tuple[int, ...] = (64, 128, 256)
    bridge: int = 512
    pos_weight: float = 12.0
    lr: float = 1e-4
    augmentation: AugmentationConfig | None = field(default_factory=AugmentationConfig)
    epochs: int = 60
    batch_size: int = 4
    seed: int = 0

    def validate(self):
        if self.input_size < 8 or self.input_size % (2 ** len(self.widths)):
            raise ConfigError(
                f"input_size {self.input_size} must be divisible by 2^{len(self.widths)} (one halving per contracting unit)"
            )
        if len(self.widths) < 1:
            raise ConfigError("need at least one contracting unit")
        if any(b != 2 * a for a, b in zip(self.widths, self.widths[1:])):
            raise ConfigError(f"contracting widths must double at each unit, got {self.widths}")
        if self.pos_weight <= 0 or self.lr <= 0 or self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("pos_weight and lr must be positive, epochs >= 0, batch_size >= 1")
        return self

    @classmethod
    def from_dict(cls, d: Mapping) -> "SegNetConfig":
        d = dict(d)
        d.pop("dtype", None)
        aug = d.get("augmentation")
        if isinstance(aug, Mapping):
            d["augmentation"] = AugmentationConfig(**aug)
        d["widths"] = tuple(d.get("widths", cls.widths))
        return cls(**d)


class _Unit:
    """Pre-activated residual unit: (BN-ReLU-conv) x2 plus a 1x1 projection of the input."""

    def __init__(self, model, prefix, c_in, c_out, stride, rng, dtype):
        add = model.add
        self.bn1 = add(f"{prefix}.bn1", BatchNorm(c_in, dtype=dtype))
        self.act1 = add(f"{prefix}.relu1", ReLU())
        self.conv1 = add(f"{prefix}.conv1", Conv2d(c_in, c_out, 3, stride, rng=rng, dtype=dtype))
        self.bn2 = add(f"{prefix}.bn2", BatchNorm(c_out, dtype=dtype))
        self.act2 = add(f"{prefix}.relu2", ReLU())
        self.conv2 = add(f"{prefix}.conv2", Conv2d(c_out, c_out, 3, 1, rng=rng, dtype=dtype))
        self.proj = add(f"{prefix}.proj", Project1x1(c_in, c_out, stride, rng=rng, dtype=dtype))
        self.add = add(f"{prefix}.add", ResidualAdd())

    def forward(self, x, train):
        h = self.conv1.forward(self.act1.forward(self.bn1.forward(x, train), train), train)
        h = self.conv2.forward(self.act2.forward(self.bn2.forward(h, train), train), train)
        return self.add.forward((h, self.proj.forward(x, train)), train)

    def backward(self, g):
        gh, gs = self.add.backward(g)
        gh = self.bn2.backward(self.act2.backward(self.conv2.backward(gh)))
        gx = self.bn1.backward(self.act1.backward(self.conv1.backward(gh)))
        return gx + self.proj.backward(gs)


class SegNet(Model):
    """Residual U-Net.

    Contracting units halve resolution with their first (stride-2) conv; the
    bridge is a single BN-ReLU-conv; each expanding unit concatenates the
    mirrored contracting output, upsamples 2x, then runs a stride-1 residual
    unit. A 1x1 conv and sigmoid produce the probability map.
    """

    kind = "segnet"

    def __init__(self, cfg: SegNetConfig, dtype=np.float32):
        super().__init__(cfg.validate(), dtype)
        rng = np.random.default_rng(cfg.seed)
        self.down = []
        c_in = 1
        for i, w in enumerate(cfg.widths):
            self.down.append(_Unit(self, f"down{i}", c_in, w, 2, rng, dtype))
            c_in = w
        self.bridge_bn = self.add("bridge.bn", BatchNorm(c_in, dtype=dtype))
        self.bridge_act = self.add("bridge.relu", ReLU())
        self.bridge_conv = self.add("bridge.conv", Conv2d(c_in, cfg.bridge, 3, 1, rng=rng, dtype=dtype))
        self.up = []
        c_in = cfg.bridge
        for j, w in enumerate(reversed(cfg.widths)):
            cat = self.add(f"up{j}.concat", Concat())
            ups = self.add(f"up{j}.upsample", Upsample2x())
            unit = _Unit(self, f"up{j}", c_in + w, w, 1, rng, dtype)
            self.up.append((cat, ups, unit))
            c_in = w
        self.head = self.add("head.conv", Conv2d(c_in, 1, 1, 1, rng=rng, dtype=dtype))
        self.sigmoid = self.add("head.sigmoid", Sigmoid())

    def forward(self, x, train=False):
        x = np.asarray(x, dtype=self.dtype)
        size = self.config.input_size
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (size, size):
            raise ShapeError(f"segnet expects (N, 1, {size}, {size}) input, got {x.shape}")
        skips = []
        h = x
        for unit in self.down:
            h = unit.forward(h, train)
            skips.append(h)
        h = self.bridge_conv.forward(self.bridge_act.forward(self.bridge_bn.forward(h, train), train), train)
        for (cat, ups, unit), skip in zip(self.up, reversed(skips)):
            h = unit.forward(ups.forward(cat.forward((h, skip), train), train), train)
        return self.sigmoid.forward(self.head.forward(h, train), train)

    def backward(self, grad):
        g = self.head.backward(self.sigmoid.backward(grad))
        skip_grads = []
        for cat, ups, unit in reversed(self.up):
            g, gskip = cat.backward(ups.backward(unit.backward(g)))
            skip_grads.append(gskip)
        # skip_grads now runs from the shallowest skip to the deepest
        g = self.bridge_bn.backward(self.bridge_act.backward(self.bridge_conv.backward(g)))
        for unit, gskip in zip(reversed(self.down), reversed(skip_grads)):
            g = unit.backward(g + gskip)
        return g


def build_segnet(cfg: SegNetConfig, dtype=np.float32) -> SegNet:
    return SegNet(cfg, dtype)


def _from_config(d: dict) -> SegNet:
    return SegNet(SegNetConfig.from_dict(d), np.dtype(d.get("dtype", "float32")))


register_model(SegNet.kind, _from_config)


def segnet_param_count(cfg: SegNetConfig) -> int:
    """Closed-form parameter count of the architecture ``build_segnet`` assembles."""

    def conv(cin, cout, k):
        return cin * cout * k * k + cout

    def unit(cin, cout):
        return 2 * cin + conv(cin, cout, 3) + 2 * cout + conv(cout, cout, 3) + conv(cin, cout, 1)

    total, c = 0, 1
    for w in cfg.widths:
        total += unit(c, w)
        c = w
    total += 2 * c + conv(c, cfg.bridge, 3)
    c = cfg.bridge
    for w in reversed(cfg.widths):
        total += unit(c + w, w)
        c = w
    return total + conv(c, 1, 1)


# ---------------------------------------------------------------------------
# inference


def _as_batch(images) -> np.ndarray:
    if isinstance(images, Slice2D):
        images = images.pixels
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None, None]
    elif arr.ndim == 3:
        arr = arr[:, None]
    return arr


def segnet_predict(model: SegNet, s, batch_size: int = 8) -> np.ndarray:
    """Lung-gated probability map(s): sigmoid output times the ceiling mask of the input."""
    single = isinstance(s, Slice2D) or np.ndim(s) == 2
    x = _as_batch(s)
    out = np.empty(x.shape, dtype=np.float32)
    for i in range(0, len(x), batch_size):
        chunk = x[i:i + batch_size]
        out[i:i + batch_size] = model.forward(chunk, train=False) * ceiling_mask(chunk)
    out = out[:, 0]
    return out[0] if single else out


# ---------------------------------------------------------------------------
# split


@dataclass(frozen=True)
class SliceRef:
    patient_id: str
    series_path: str
    z: int


@dataclass
class SegSplit:
    train: list[SliceRef]
    val: list[SliceRef]
    test: list[SliceRef]
    patients: dict[str, list[str]] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "patients": self.patients,
                **{k: [dataclasses.astuple(r) for r in getattr(self, k)] for k in ("train", "val", "test")},
            },
            indent=1,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "SegSplit":
        d = json.loads(text)
        refs = {k: [SliceRef(*r) for r in d[k]] for k in ("train", "val", "test")}
        return cls(patients=d["patients"], **refs)


def partition_counts(n: int, ratios: Sequence[float], strict: bool = True) -> list[int]:
    """Largest-remainder apportionment of ``n`` items over ``ratios``.

    With ``strict``, a partition with a positive ratio may not end up empty.
    """
    if abs(sum(ratios) - 1.0) > 1e-9 or any(r < 0 for r in ratios):
        raise ContractError(f"split ratios {ratios} must be non-negative and sum to 1")
    raw = [r * n for r in ratios]
    counts = [int(math.floor(v)) for v in raw]
    order = sorted(range(len(ratios)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    for c, r in zip(counts, ratios):
        if strict and r > 0 and c == 0:
            raise ContractError(f"too few patients ({n}) for split ratios {tuple(ratios)}")
    return counts


def make_split(
    nodules: Sequence[NoduleRecord],
    ratios: Sequence[float] = (0.6, 0.2, 0.2),
    seed: int = 0,
    tissue_slices: Mapping[str, Sequence[int]] | None = None,
) -> SegSplit:
    """Patient-wise split; train/val get every nodule-bearing slice, test only primary slices.

    ``tissue_slices`` maps a patient id to the z indices whose ground-truth
    mask is nonempty; without it, primary slices stand in everywhere.
    """
    patients = sorted({n.patient_id for n in nodules})
    counts = partition_counts(len(patients), ratios)
    order = np.random.default_rng(seed).permutation(len(patients))
    shuffled = [patients[i] for i in order]
    groups = {
        "train": sorted(shuffled[: counts[0]]),
        "val": sorted(shuffled[counts[0]: counts[0] + counts[1]]),
        "test": sorted(shuffled[counts[0] + counts[1]:]),
    }
    by_patient: dict[str, list[NoduleRecord]] = {}
    for n in nodules:
        by_patient.setdefault(n.patient_id, []).append(n)

    def primaries(pid):
        return sorted({SliceRef(pid, n.series_path, n.primary_slice_index) for n in by_patient[pid]}, key=lambda r: r.z)

    def all_slices(pid):
        if tissue_slices is None or pid not in tissue_slices:
            return primaries(pid)
        series = by_patient[pid][0].series_path
        return [SliceRef(pid, series, int(z)) for z in sorted(set(tissue_slices[pid]))]

    return SegSplit(
        train=[r for pid in groups["train"] for r in all_slices(pid)],
        val=[r for pid in groups["val"] for r in all_slices(pid)],
        test=[r for pid in groups["test"] for r in primaries(pid)],
        patients=groups,
    )


# ---------------------------------------------------------------------------
# metrics


def dice(pred, truth) -> float:
    pred = np.asarray(pred) > 0
    truth = np.asarray(truth) > 0
    if pred.shape != truth.shape:
        raise ShapeError(f"dice: shapes {pred.shape} and {truth.shape} differ")
    total = int(pred.sum()) + int(truth.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, truth).sum()) / total


@dataclass
class SegMetrics:
    dice: float
    recall: float
    precision: float


def seg_metrics(preds: Sequence[np.ndarray], truths: Sequence[np.ndarray]) -> SegMetrics:
    """Mean per-image dice; recall and precision from pooled pixel counts."""
    if len(preds) == 0 or len(preds) != len(truths):
        raise ContractError(f"seg_metrics needs equally long nonempty lists, got {len(preds)} and {len(truths)}")
    tp = fp = fn = 0
    dices = []
    for p, t in zip(preds, truths):
        p = np.asarray(p) > 0
        t = np.asarray(t) > 0
        dices.append(dice(p, t))
        tp += int(np.sum(p & t))
        fp += int(np.sum(p & ~t))
        fn += int(np.sum(~p & t))
    recall = tp / (tp + fn) if tp + fn else float("nan")
    precision = tp / (tp + fp) if tp + fp else float("nan")
    return SegMetrics(float(np.mean(dices)), recall, precision)


# ---------------------------------------------------------------------------
# training


@dataclass
class SliceSet:
    """Preprocessed slices at network resolution and their masks."""

    images: np.ndarray  # (N, H, W) float32
    masks: np.ndarray  # (N, H, W) uint8

    def __len__(self):
        return len(self.images)


@dataclass
class TrainResult:
    model: Model
    log: list[tuple[int, float, float]]
    best_epoch: int

    def log_csv(self, metric: str = "val_dice") -> str:
        lines = [f"epoch,train_loss,{metric}"]
        lines += [f"{e},{loss:.8f},{m:.8f}" for e, loss, m in self.log]
        return "\n".join(lines) + "\n"


def _binary_dice_mean(model, data: SliceSet, batch_size) -> float:
    probs = segnet_predict(model, data.images, batch_size)
    return float(np.mean([dice(p >= THRESHOLD, t) for p, t in zip(probs, data.masks)]))


def train_segnet(train: SliceSet, val: SliceSet | None, cfg: SegNetConfig, model: SegNet | None = None) -> TrainResult:
    """Minimize positive-weighted BCE of the lung-gated output with Adam.

    The model state with the best validation dice (train dice when there is
    no validation set) is restored before returning.
    """
    cfg.validate()
    if len(train) == 0:
        raise ContractError("train_segnet: empty training set")
    model = model or build_segnet(cfg)
    rng = np.random.default_rng(cfg.seed + 1)
    state = AdamState(lr=cfg.lr)
    params = [p for _, p, _ in model.parameters()]
    history = []
    best = (-1.0, 0, None)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            imgs, masks = train.images[idx], train.masks[idx]
            if cfg.augmentation is not None:
                pairs = [augment(im, mk, cfg.augmentation, rng) for im, mk in zip(imgs, masks)]
                imgs = np.stack([p[0] for p in pairs])
                masks = np.stack([p[1] for p in pairs])
            x = imgs[:, None].astype(model.dtype)
            gate = ceiling_mask(x)
            model.zero_grad()
            prob = model.forward(x, train=True)
            loss, grad = weighted_bce(prob * gate, masks[:, None], cfg.pos_weight)
            if not math.isfinite(loss):
                raise DivergenceError(f"segnet loss became {loss} at epoch {epoch}, step {model.step}")
            model.backward(grad * gate)
            adam_step(params, [g for _, _, g in model.parameters()], state)
            model.step += 1
            losses.append(loss)
        train_loss = float(np.mean(losses))
        score = _binary_dice_mean(model, val if val is not None and len(val) else train, cfg.batch_size)
        history.append((epoch, train_loss, score))
        log.info("segnet epoch %d loss %.5f val_dice %.4f", epoch, train_loss, score)
        if score > best[0]:
            best = (score, epoch, model.state())
    if best[2] is not None:
        model.load_state(best[2])
    return TrainResult(model, history, best[1])
