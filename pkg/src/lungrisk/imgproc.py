"""Deterministic slice/volume processing between the scanner data and the networks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial.distance import pdist

from .errors import ContractError, SegmentationFailure
from .ingest import CtVolume, MaskVolume

HU_WINDOW = (-1000.0, 400.0)
LUNG_THRESHOLD = 0.35
CLOSING_RADIUS = 3
ROI_SIZE = 50
AIR_HU = -1000.0


@dataclass
class Slice2D:
    pixels: np.ndarray  # float32 [y][x]
    spacing_mm: tuple[float, float] = (1.0, 1.0)
    provenance: tuple[str, int] = ("", 0)
    empty: bool = False

    def with_pixels(self, pixels, **changes) -> "Slice2D":
        kwargs = dict(spacing_mm=self.spacing_mm, provenance=self.provenance, empty=self.empty)
        kwargs.update(changes)
        return Slice2D(pixels, **kwargs)


@dataclass
class ConnectedComponent:
    pixels: np.ndarray  # (k, 2) int array of (y, x), raster order
    mean_activation: float

    @property
    def area_px(self) -> int:
        return len(self.pixels)

    @property
    def centroid(self) -> tuple[float, float]:
        c = self.pixels.mean(axis=0)
        return float(c[0]), float(c[1])


@dataclass
class Roi3D:
    voxels: np.ndarray  # float32 [50][50][50], values in [0, 1]
    source_center_mm: tuple[float, float, float]
    fill_fraction: float


@dataclass
class GeometricFeatures:
    diameter_mm: float = 0.0
    perimeter_mm: float = 0.0
    mean_attenuation_hu: float = 0.0
    empty: bool = False


def disk(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    return (r[:, None] ** 2 + r[None, :] ** 2) <= radius * radius


EIGHT = np.ones((3, 3), dtype=bool)


# ---------------------------------------------------------------------------
# slice preprocessing


def normalize_hu(raw: np.ndarray, window=HU_WINDOW, spacing_mm=(1.0, 1.0), provenance=("", 0)) -> Slice2D:
    low, high = float(window[0]), float(window[1])
    if not low < high:
        raise ContractError(f"degenerate HU window ({low}, {high})")
    pixels = np.clip((np.asarray(raw, dtype=np.float64) - low) / (high - low), 0.0, 1.0)
    return Slice2D(pixels.astype(np.float32), tuple(spacing_mm), tuple(provenance))


def lung_field_mask(pixels: np.ndarray, threshold: float = LUNG_THRESHOLD, min_area: int | None = None) -> np.ndarray:
    """Binary lung-field mask of a normalized slice.

    Dark pixels inside the body, in components that do not touch the image
    border, then closed with a radius-3 disk and hole-filled (nodules inside
    the lung become part of the field).
    """
    if min_area is None:
        min_area = max(4, pixels.size // 2000)
    support = pixels > 0
    if not support.any():
        return np.zeros(pixels.shape, dtype=bool)
    body = ndimage.binary_fill_holes(ndimage.binary_closing(support, disk(CLOSING_RADIUS)) | support)
    dark = (pixels < threshold) & body
    labels, n = ndimage.label(dark, structure=EIGHT)
    if n == 0:
        return np.zeros(pixels.shape, dtype=bool)
    edge = np.unique(np.concatenate([labels[0], labels[-1], labels[:, 0], labels[:, -1]]))
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    keep = sizes >= min_area
    keep[edge] = False
    keep[0] = False
    candidates = keep[labels]
    if not candidates.any():
        return candidates
    return ndimage.binary_fill_holes(ndimage.binary_closing(candidates, disk(CLOSING_RADIUS)) | candidates)


def isolate_lung_fields(s: Slice2D) -> Slice2D:
    lung = lung_field_mask(s.pixels)
    out = np.where(lung, s.pixels, 0).astype(np.float32)
    return s.with_pixels(out, empty=not bool((out > 0).any()))


def enhance_contrast(s: Slice2D) -> Slice2D:
    """Histogram equalization restricted to the nonzero (lung) pixels."""
    lung = s.pixels > 0
    if not lung.any():
        return s
    values = s.pixels[lung].astype(np.float64)
    ordered = np.sort(values)
    cdf = np.searchsorted(ordered, values, side="right") / ordered.size
    out = np.zeros_like(s.pixels, dtype=np.float32)
    out[lung] = cdf
    return s.with_pixels(out)


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Bilinear weights with corner pixels aligned."""
    if n_in == n_out:
        return np.eye(n_in)
    coords = np.zeros(n_out) if n_out == 1 else np.linspace(0, n_in - 1, n_out)
    lo = np.clip(np.floor(coords).astype(int), 0, n_in - 1)
    hi = np.clip(lo + 1, 0, n_in - 1)
    w = coords - lo
    mat = np.zeros((n_out, n_in))
    mat[np.arange(n_out), lo] += 1 - w
    mat[np.arange(n_out), hi] += w
    return mat


def bilinear_resize(arr: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    ry = _interp_matrix(arr.shape[0], shape[0])
    rx = _interp_matrix(arr.shape[1], shape[1])
    return (ry @ np.asarray(arr, dtype=np.float64) @ rx.T)


def nearest_resize(arr: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    iy = np.minimum((np.arange(shape[0]) + 0.5) * arr.shape[0] / shape[0], arr.shape[0] - 1).astype(int)
    ix = np.minimum((np.arange(shape[1]) + 0.5) * arr.shape[1] / shape[1], arr.shape[1] - 1).astype(int)
    return arr[iy][:, ix]


def resize_slice(s: Slice2D, target: tuple[int, int]) -> Slice2D:
    h, w = int(target[0]), int(target[1])
    if h < 8 or w < 8 or h % 8 or w % 8:
        raise ContractError(f"resize target {target} must be >= 8 and divisible by 8")
    src_h, src_w = s.pixels.shape
    if (h, w) == (src_h, src_w):
        return s
    pixels = bilinear_resize(s.pixels, (h, w)).astype(np.float32)
    spacing = (s.spacing_mm[0] * src_h / h, s.spacing_mm[1] * src_w / w)
    return s.with_pixels(pixels, spacing_mm=spacing)


def preprocess_slice(raw: np.ndarray, target=None, window=HU_WINDOW, spacing_mm=(1.0, 1.0), provenance=("", 0)) -> Slice2D:
    """normalize -> isolate lung fields -> enhance contrast -> resize."""
    s = normalize_hu(raw, window, spacing_mm, provenance)
    s = isolate_lung_fields(s)
    s = enhance_contrast(s)
    if target is not None:
        s = resize_slice(s, target)
    return s


def ceiling_mask(s: Slice2D | np.ndarray) -> np.ndarray:
    pixels = s.pixels if isinstance(s, Slice2D) else np.asarray(s)
    return (pixels > 0).astype(np.float32)


# ---------------------------------------------------------------------------
# components and post-processing


def connected_components(mask: np.ndarray, prob: np.ndarray | None = None) -> list[ConnectedComponent]:
    """8-connected components, ordered by their first pixel in raster order."""
    mask = np.asarray(mask) > 0
    labels, n = ndimage.label(mask, structure=EIGHT)
    if n == 0:
        return []
    flat = labels.ravel()
    order = np.argsort(flat, kind="stable")
    counts = np.bincount(flat, minlength=n + 1)
    bounds = np.cumsum(counts)
    width = mask.shape[1]
    values = None if prob is None else np.asarray(prob, dtype=np.float64).ravel()
    comps = []
    for k in range(1, n + 1):
        idx = order[bounds[k - 1]:bounds[k]]
        pixels = np.stack([idx // width, idx % width], axis=1)
        mean = 1.0 if values is None else float(values[idx].mean())
        comps.append(ConnectedComponent(pixels, mean))
    comps.sort(key=lambda c: (int(c.pixels[0, 0]), int(c.pixels[0, 1])))
    return comps


def select_densest_region(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Keep only the component of ``prob >= threshold`` with the highest mean activation."""
    prob = np.asarray(prob)
    out = np.zeros(prob.shape, dtype=np.uint8)
    comps = connected_components(prob >= threshold, prob)
    if not comps:
        return out
    best = comps[0]
    for c in comps[1:]:
        if c.mean_activation > best.mean_activation or (
            c.mean_activation == best.mean_activation and c.area_px > best.area_px
        ):
            best = c
    out[best.pixels[:, 0], best.pixels[:, 1]] = 1
    return out


# ---------------------------------------------------------------------------
# world-coordinate resampling and ROI


def _iso_coords(n: int, spacing: float) -> np.ndarray:
    # voxel i of the 1 mm grid, as a fractional index of the source grid;
    # both grids share the outer faces of voxel 0
    n_out = max(1, int(np.floor(n * spacing + 0.5)))
    return (np.arange(n_out) + 0.5) / spacing - 0.5


def _lerp_axis(arr: np.ndarray, coords: np.ndarray, axis: int) -> np.ndarray:
    n = arr.shape[axis]
    c = np.clip(coords, 0, n - 1)
    lo = np.floor(c).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    w = (c - lo).reshape([-1 if a == axis else 1 for a in range(arr.ndim)])
    return np.take(arr, lo, axis=axis) * (1 - w) + np.take(arr, hi, axis=axis) * w


def _iso_header(header, dims):
    origin = tuple(o - s / 2 + 0.5 for o, s in zip(header.origin_mm, header.spacing_mm))
    return header.replace(dims=dims, spacing_mm=(1.0, 1.0, 1.0), origin_mm=origin, slice_positions_mm=None)


def resample_isotropic(v: CtVolume) -> CtVolume:
    """Trilinear resampling onto a 1 mm grid; values stay float in memory."""
    out = v.voxels.astype(np.float64)
    for axis, spacing in enumerate(v.header.spacing_mm):
        if spacing == 1.0:
            continue
        out = _lerp_axis(out, _iso_coords(out.shape[axis], spacing), axis)
    return CtVolume(_iso_header(v.header, out.shape), out.astype(np.float32))


def resample_mask(m: MaskVolume) -> MaskVolume:
    out = m.voxels
    for axis, spacing in enumerate(m.header.spacing_mm):
        n = out.shape[axis]
        idx = np.clip(np.floor(_iso_coords(n, spacing) + 0.5).astype(int), 0, n - 1)
        out = np.take(out, idx, axis=axis)
    return MaskVolume(_iso_header(m.header, out.shape), np.ascontiguousarray(out, dtype=np.uint8))


def iso_index(index: int, spacing: float) -> int:
    """Index on the 1 mm grid whose voxel contains the center of source voxel ``index``."""
    return int(np.floor((index + 0.5) * spacing))


def _window(center: int, size: int, extent: int) -> tuple[int, int, int]:
    """(source start, copied count, destination offset) of a ``size`` window on one axis."""
    if extent >= size:
        start = min(max(center - size // 2, 0), extent - size)
        return start, size, 0
    return 0, extent, (size - extent) // 2


def extract_roi(v: CtVolume, m: MaskVolume, main_z: int | None = None, window=HU_WINDOW, size: int = ROI_SIZE) -> Roi3D:
    """Cut a size^3 cube around the mask on isotropic, aligned volume and mask.

    x-y are centered on the mask centroid; z spans the main slice with
    size//2 slices before and size//2 - 1 after. Windows are shifted inward at
    the volume boundary; padding (air) only happens when an axis is shorter
    than the window.
    """
    if v.header.dims != m.header.dims:
        raise ContractError(f"volume dims {v.header.dims} and mask dims {m.header.dims} differ")
    coords = np.argwhere(m.voxels > 0)
    if len(coords) == 0:
        raise SegmentationFailure("empty mask: segmentation localized no nodule")
    centroid = coords.mean(axis=0)
    cz = int(np.floor(centroid[0] + 0.5)) if main_z is None else int(main_z)
    cy, cx = (int(np.floor(c + 0.5)) for c in centroid[1:])
    cube = np.full((size, size, size), AIR_HU, dtype=np.float64)
    src, dst = [], []
    center_idx = []
    for center, extent in zip((cz, cy, cx), v.header.dims):
        start, count, offset = _window(center, size, extent)
        src.append(slice(start, start + count))
        dst.append(slice(offset, offset + count))
        center_idx.append(start - offset + (size - 1) / 2)
    cube[tuple(dst)] = v.voxels[tuple(src)]
    copied = int(np.prod([s.stop - s.start for s in src]))
    low, high = window
    voxels = np.clip((cube - low) / (high - low), 0.0, 1.0).astype(np.float32)
    center_mm = tuple(
        float(o + s * c) for o, s, c in zip(v.header.origin_mm, v.header.spacing_mm, center_idx)
    )
    return Roi3D(voxels, center_mm, copied / size**3)


# ---------------------------------------------------------------------------
# geometry


def marching_squares_perimeter(mask: np.ndarray, spacing_mm=(1.0, 1.0)) -> float:
    """Length of the 0.5 iso-contour of a binary mask, in mm.

    Crossing points of a binary image sit at edge midpoints, so each 2x2 cell
    contributes a fixed length depending on its corner pattern.
    """
    m = np.pad(np.asarray(mask) > 0, 1).astype(np.int8)
    tl, tr, bl, br = m[:-1, :-1], m[:-1, 1:], m[1:, :-1], m[1:, 1:]
    count = tl + tr + bl + br
    sy, sx = float(spacing_mm[0]), float(spacing_mm[1])
    diag = np.hypot(0.5 * sy, 0.5 * sx)
    corner_cells = np.count_nonzero((count == 1) | (count == 3))
    diagonal_pairs = np.count_nonzero((count == 2) & (tl == br))
    horizontal = np.count_nonzero((count == 2) & (tl == tr))  # row split, crosses the cell in x
    vertical = np.count_nonzero((count == 2) & (tl == bl))
    return float(corner_cells * diag + diagonal_pairs * 2 * diag + horizontal * sx + vertical * sy)


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    m = np.asarray(mask) > 0
    inner = ndimage.binary_erosion(m, structure=ndimage.generate_binary_structure(2, 1), border_value=0)
    return np.argwhere(m & ~inner)


def geometric_features(mask: np.ndarray, hu: np.ndarray, spacing_mm=(1.0, 1.0)) -> GeometricFeatures:
    mask = np.asarray(mask) > 0
    if not mask.any():
        return GeometricFeatures(empty=True)
    pts = boundary_pixels(mask) * np.asarray(spacing_mm, dtype=np.float64)
    diameter = float(pdist(pts).max()) if len(pts) > 1 else 0.0
    return GeometricFeatures(
        diameter_mm=diameter,
        perimeter_mm=marching_squares_perimeter(mask, spacing_mm),
        mean_attenuation_hu=float(np.asarray(hu, dtype=np.float64)[mask].mean()),
    )
