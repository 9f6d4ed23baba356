"""Real-time augmentation: brightness, rotation, shear, zoom, horizontal flip.

The same in-plane affine map is applied to the image (bilinear) and to the
mask (nearest). 3-D inputs ``(D, H, W)`` are transformed slice by slice in the
x-y plane. Brightness is multiplicative so background zeros stay zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..errors import ContractError


@dataclass(frozen=True)
class AugmentationConfig:
    brightness: float = 0.10  # factor drawn from [1 - b, 1 + b]
    rotation_deg: float = 10.0
    shear_deg: float = 5.0
    zoom: float = 0.10  # factor drawn from [1 - z, 1 + z]
    flip_prob: float = 0.5

    def __post_init__(self):
        if min(self.brightness, self.rotation_deg, self.shear_deg, self.zoom) < 0:
            raise ContractError("augmentation ranges must be non-negative half-widths")
        if not 0 <= self.flip_prob <= 1:
            raise ContractError(f"flip probability {self.flip_prob} outside [0, 1]")

    @classmethod
    def identity(cls) -> "AugmentationConfig":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0)


def _affine(rotation_deg, shear_deg, zoom):
    """Forward 2x2 map in (y, x) index space."""
    th, sh = math.radians(rotation_deg), math.radians(shear_deg)
    rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    shear = np.array([[1.0, 0.0], [math.tan(sh), 1.0]])
    return rot @ shear * zoom


def _warp(arr, inverse2, order):
    h, w = arr.shape[-2:]
    center = np.array([(h - 1) / 2, (w - 1) / 2])
    offset2 = center - inverse2 @ center
    if arr.ndim == 2:
        matrix, offset = inverse2, offset2
    else:
        matrix = np.eye(3)
        matrix[1:, 1:] = inverse2
        offset = np.concatenate([[0.0], offset2])
    return ndimage.affine_transform(arr, matrix, offset=offset, order=order, mode="constant", cval=0.0)


def augment(image, mask=None, cfg: AugmentationConfig | None = None, rng: np.random.Generator | None = None):
    """Return ``(image, mask)`` after one random draw per operation.

    Draw order is fixed (brightness, rotation, shear, zoom, flip) so a given
    generator state always yields the same transform.
    """
    cfg = cfg or AugmentationConfig()
    if rng is None:
        raise ContractError("augment needs an explicit random generator")
    image = np.asarray(image)
    if mask is not None and np.shape(mask) != image.shape:
        raise ContractError(f"mask shape {np.shape(mask)} differs from image shape {image.shape}")
    factor = 1 + rng.uniform(-cfg.brightness, cfg.brightness)
    rotation = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)
    shear = rng.uniform(-cfg.shear_deg, cfg.shear_deg)
    zoom = 1 + rng.uniform(-cfg.zoom, cfg.zoom)
    flip = rng.random() < cfg.flip_prob

    out = image.astype(np.float64)
    out_mask = None if mask is None else np.asarray(mask)
    forward = _affine(rotation, shear, zoom)
    if not np.allclose(forward, np.eye(2), rtol=0, atol=1e-12):
        inverse = np.linalg.inv(forward)
        out = _warp(out, inverse, order=1)
        if out_mask is not None:
            out_mask = _warp(out_mask.astype(np.float64), inverse, order=0)
    if flip:
        out = out[..., ::-1]
        if out_mask is not None:
            out_mask = out_mask[..., ::-1]
    if factor != 1:
        out = out * factor
    out = np.clip(out, 0.0, 1.0).astype(image.dtype if np.issubdtype(image.dtype, np.floating) else np.float32)
    if out_mask is not None:
        out_mask = (np.ascontiguousarray(out_mask) > 0.5).astype(np.asarray(mask).dtype)
    return np.ascontiguousarray(out), out_mask
