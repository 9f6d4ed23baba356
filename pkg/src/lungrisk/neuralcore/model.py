"""Shared bookkeeping for the two fixed architectures."""

from __future__ import annotations

import dataclasses

import numpy as np

from .layers import Dropout, Layer


class Model:
    """Owns named layers; subclasses wire them in ``forward``/``backward``.

    ``kind`` and ``config`` are enough to rebuild an identical architecture,
    which is what checkpoints rely on.
    """

    kind = "model"

    def __init__(self, config, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.layers: dict[str, Layer] = {}
        self.step = 0

    def config_dict(self) -> dict:
        if dataclasses.is_dataclass(self.config):
            cfg = dataclasses.asdict(self.config)
        else:
            cfg = dict(self.config)
        cfg["dtype"] = self.dtype.name
        return cfg

    def add(self, name: str, layer: Layer) -> Layer:
        if name in self.layers:
            raise ValueError(f"duplicate layer name {name!r}")
        layer.name = name
        self.layers[name] = layer
        return layer

    def parameters(self):
        """(qualified name, value, grad) triples in a stable order."""
        out = []
        for lname, layer in self.layers.items():
            for pname in layer.params:
                out.append((f"{lname}.{pname}", layer.params[pname], layer.grads[pname]))
        return out

    def buffers(self):
        out = []
        for lname, layer in self.layers.items():
            for bname, value in layer.buffers.items():
                out.append((f"{lname}.{bname}", value))
        return out

    def param_count(self) -> int:
        return sum(v.size for _, v, _ in self.parameters())

    def zero_grad(self):
        for layer in self.layers.values():
            layer.zero_grad()

    def set_dropout_frozen(self, frozen: bool):
        for layer in self.layers.values():
            if isinstance(layer, Dropout):
                layer.frozen = frozen

    def state(self) -> dict[str, np.ndarray]:
        """Copy of all parameters and buffers, keyed by qualified name."""
        st = {name: value.copy() for name, value, _ in self.parameters()}
        st.update({name: value.copy() for name, value in self.buffers()})
        return st

    def load_state(self, state: dict[str, np.ndarray]):
        for lname, layer in self.layers.items():
            for pname in list(layer.params):
                layer.params[pname][...] = state[f"{lname}.{pname}"]
            for bname in list(layer.buffers):
                layer.buffers[bname] = np.array(state[f"{lname}.{bname}"], dtype=layer.buffers[bname].dtype)

    def layer_table(self) -> list[dict]:
        return [{"name": name, **layer.spec.as_dict()} for name, layer in self.layers.items()]

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def __call__(self, x, train=False):
        return self.forward(x, train)
