"""Central finite-difference checks of analytic gradients."""

from __future__ import annotations

import numpy as np

from .layers import Dropout

# tensors whose gradient is identically zero (a conv bias feeding batchnorm)
# are measured against this fraction of the largest gradient in the model
SCALE_FLOOR = 1e-3


def _scale(a) -> float:
    return float(np.max(np.abs(a))) if np.size(a) else 0.0


def _dropouts(model):
    layers = getattr(model, "layers", None)
    if isinstance(layers, dict):
        return {k: v for k, v in layers.items() if isinstance(v, Dropout)}
    layer = getattr(model, "layer", None)
    return {"": layer} if isinstance(layer, Dropout) else {}


def twin(model, dtype=np.float64):
    """Same architecture and weights in another precision (for 32-bit checks)."""
    from .checkpoint import _BUILDERS

    cfg = model.config_dict()
    cfg["dtype"] = np.dtype(dtype).name
    other = _BUILDERS[model.kind](cfg)
    other.load_state({k: v.astype(dtype) for k, v in model.state().items()})
    return other


def grad_check(
    model,
    x,
    target,
    loss,
    eps: float = 1e-6,
    max_checks: int | None = 64,
    check_input: bool = True,
    seed: int = 0,
    reference=None,
    return_details: bool = False,
):
    """Max relative error between backprop and central differences.

    ``model`` needs ``forward(x, train)``, ``backward(grad)``, ``zero_grad()``
    and ``parameters()`` returning ``(name, value, grad)``; ``loss(pred,
    target)`` returns ``(value, grad_wrt_pred)``. At most ``max_checks``
    random entries per tensor are perturbed.

    Differences are taken on ``reference`` when given: a copy of ``model`` in
    higher precision, so a float32 backward is compared against a function
    whose finite differences are not swamped by float32 rounding. Dropout
    masks are frozen after the first forward (and copied to the reference) so
    every evaluation sees the same function.

    The error of a tensor is ``max|analytic - numeric|`` divided by
    ``max(max|analytic|, max|numeric|, SCALE_FLOOR * largest gradient)``.
    """
    rng = np.random.default_rng(seed)
    ref = reference if reference is not None else model
    for d in _dropouts(model).values():
        d.frozen = False
    model.zero_grad()
    pred = model.forward(x, train=True)
    drops, ref_drops = _dropouts(model), _dropouts(ref)
    for d in drops.values():
        d.frozen = True
    _, g = loss(pred, target)
    gx = model.backward(g)
    analytic = {name: grad.astype(np.float64) for name, _, grad in model.parameters()}
    ref_x = np.array(x, dtype=getattr(ref, "dtype", None) or np.asarray(x).dtype, copy=True)
    if ref is not model:
        for name, d in ref_drops.items():
            if name in drops and drops[name]._mask is not None:
                d._mask = drops[name]._mask.astype(ref_x.dtype)
                d.frozen = True

    def f():
        return loss(ref.forward(ref_x, train=True), target)[0]

    def pick(size):
        if max_checks is None or size <= max_checks:
            return np.arange(size)
        return np.sort(rng.choice(size, size=max_checks, replace=False))

    targets = [(name, value) for name, value, _ in ref.parameters()]
    if check_input:
        targets.append(("<input>", ref_x))
        analytic["<input>"] = np.asarray(gx, dtype=np.float64)
    largest = max((_scale(a) for a in analytic.values()), default=0.0)
    details = {}
    try:
        for name, value in targets:
            flat = value.reshape(-1)
            idx = pick(flat.size)
            numeric = np.empty(len(idx))
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + eps
                up = f()
                flat[i] = orig - eps
                down = f()
                flat[i] = orig
                numeric[j] = (up - down) / (2 * eps)
            a = analytic[name].reshape(-1)[idx]
            denom = max(_scale(a), _scale(numeric), SCALE_FLOOR * largest)
            details[name] = float(np.max(np.abs(a - numeric)) / denom) if denom > 0 else 0.0
    finally:
        for d in list(drops.values()) + list(ref_drops.values()):
            d.frozen = False
    worst = max(details.values()) if details else 0.0
    return (worst, details) if return_details else worst


class LayerHarness:
    """Wrap one layer as a model so ``grad_check`` can drive it."""

    def __init__(self, layer, dtype=None):
        self.layer = layer
        self._dtype = dtype

    @property
    def dtype(self):
        if self._dtype is not None:
            return np.dtype(self._dtype)
        for p in self.layer.params.values():
            return p.dtype
        return None

    def forward(self, x, train=False):
        return self.layer.forward(x, train)

    def backward(self, grad):
        return self.layer.backward(grad)

    def zero_grad(self):
        self.layer.zero_grad()

    def parameters(self):
        return [(k, self.layer.params[k], self.layer.grads[k]) for k in self.layer.params]


def projection_loss(weights):
    """Loss sum(pred * weights); a generic scalar head for layer checks."""
    weights = np.asarray(weights, dtype=np.float64)

    def loss(pred, _target):
        return float(np.sum(pred.astype(np.float64) * weights)), weights.astype(pred.dtype)

    return loss
