"""Binary checkpoint files.

Layout (little-endian)::

    magic      4 bytes  b"LRCK"
    version    uint32
    hdr_len    uint32
    header     hdr_len bytes of UTF-8 JSON: model kind + config, layer-spec
               table, tensor table [(name, shape), ...], step, seed
    payload    float32 values of every tensor, in tensor-table order
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from ..errors import FormatError, ShapeError
from .model import Model

MAGIC = b"LRCK"
VERSION = 1

_BUILDERS: dict[str, Callable[[dict], Model]] = {}


def register_model(kind: str, builder: Callable[[dict], Model]):
    _BUILDERS[kind] = builder


@dataclass
class ModelCheckpoint:
    model_kind: str
    config: dict
    layer_specs: list[dict]
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    seed: int = 0


def checkpoint_of(model: Model, seed: int = 0) -> ModelCheckpoint:
    return ModelCheckpoint(
        model_kind=model.kind,
        config=model.config_dict(),
        layer_specs=model.layer_table(),
        tensors=model.state(),
        step=model.step,
        seed=seed,
    )


def save_checkpoint(model_or_ckpt, path: str | Path, seed: int = 0) -> Path:
    ckpt = model_or_ckpt if isinstance(model_or_ckpt, ModelCheckpoint) else checkpoint_of(model_or_ckpt, seed)
    names = list(ckpt.tensors)
    header = {
        "model_kind": ckpt.model_kind,
        "config": ckpt.config,
        "layers": ckpt.layer_specs,
        "tensors": [[n, list(ckpt.tensors[n].shape)] for n in names],
        "step": ckpt.step,
        "seed": ckpt.seed,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(ckpt.tensors[n], dtype="<f4").tobytes())
    return path


def load_checkpoint(path: str | Path) -> ModelCheckpoint:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (magic-number mismatch)")
    version, hdr_len = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if len(data) < 12 + hdr_len:
        raise FormatError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(data[12:12 + hdr_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint header ({exc})") from None
    offset = 12 + hdr_len
    tensors = {}
    for name, shape in header["tensors"]:
        count = math.prod(shape)
        end = offset + 4 * count
        if end > len(data):
            raise FormatError(f"{path}: truncated checkpoint payload at tensor {name}")
        tensors[name] = np.frombuffer(data[offset:end], dtype="<f4").reshape(shape).astype(np.float32)
        offset = end
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes after payload")
    return ModelCheckpoint(
        header["model_kind"], header["config"], header["layers"], tensors, header["step"], header["seed"]
    )


def load_into(model: Model, ckpt: ModelCheckpoint) -> Model:
    """Copy checkpoint tensors into ``model`` after checking the layer and shape tables."""
    specs = {s["name"]: s for s in ckpt.layer_specs}
    for entry in model.layer_table():
        name = entry["name"]
        saved = specs.get(name)
        if saved is None:
            raise ShapeError(f"layer {name}: missing from checkpoint")
        if saved["kind"] != entry["kind"] or saved["hyper"] != entry["hyper"]:
            raise ShapeError(f"layer {name}: checkpoint spec {saved['kind']} {saved['hyper']} != model spec {entry['kind']} {entry['hyper']}")
    if len(specs) != len(model.layers):
        extra = sorted(set(specs) - set(model.layers))
        raise ShapeError(f"checkpoint has layers the model lacks: {', '.join(extra)}")
    state = model.state()
    for name, value in state.items():
        if name not in ckpt.tensors:
            raise ShapeError(f"layer {name.split('.')[0]}: tensor {name} missing from checkpoint")
        if ckpt.tensors[name].shape != value.shape:
            raise ShapeError(f"layer {name.split('.')[0]}: tensor {name} shape {ckpt.tensors[name].shape} != {value.shape}")
    model.load_state(ckpt.tensors)
    model.step = ckpt.step
    return model


def restore_model(ckpt: ModelCheckpoint) -> Model:
    if ckpt.model_kind not in _BUILDERS:
        raise FormatError(f"unknown model kind {ckpt.model_kind!r} in checkpoint")
    return load_into(_BUILDERS[ckpt.model_kind](ckpt.config), ckpt)
