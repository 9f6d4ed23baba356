"""Analytic CT phantoms: soft-tissue body, two air-filled lungs, spherical nodules.

Clinical rows follow a documented generative rule. With ``d`` the diameter
of a patient's largest nodule (mm):

    stage index  = clip(round(6 (d - d_lo) / (d_hi - d_lo) + N(0, stage_noise)), 0, 6)
    logit        = diameter_coupling (d - diameter_ref) + stage_coupling (stage index - 3) + base_logit
    recurrence   = logit + label_noise * Logistic(0, 1) > 0

so ``label_noise = 0`` makes recurrence a threshold on diameter alone
(when ``stage_coupling = 0``). ``d_lo``/``d_hi`` are twice the radius range.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ConfigError, ContractError
from ..ingest import (
    GENDERS,
    STAGES,
    CtVolume,
    MaskVolume,
    NoduleRecord,
    PatientRecord,
    make_ct,
    make_mask,
    write_clinical_table,
    write_volume,
)

SUPERSAMPLE = 6
STUDY_END_DAYS = 3000
MAX_PLACEMENT_TRIES = 200


@dataclass
class PhantomSpec:
    dims: tuple[int, int, int] = (96, 128, 128)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    body_hu: float = 40.0
    lung_hu: float = -850.0
    lung_noise_hu: float = 20.0
    nodule_hu: float = 30.0
    radius_mm: tuple[float, float] = (4.0, 10.0)
    nodules: tuple[int, int] = (1, 3)
    diameter_coupling: float = 0.6
    diameter_ref: float = 14.0
    stage_coupling: float = 0.0
    stage_noise: float = 1.5
    base_logit: float = 0.0
    label_noise: float = 1.0
    adjuvant_rate: float = 0.3
    seed: int = 0

    def validate(self) -> "PhantomSpec":
        if len(self.dims) != 3 or min(self.dims) < 8:
            raise ConfigError(f"phantom dims {self.dims} must be three extents >= 8")
        lo, hi = self.radius_mm
        if not 0 < lo <= hi:
            raise ConfigError(f"phantom radius range {self.radius_mm} must satisfy 0 < lo <= hi")
        if not 0 <= self.nodules[0] <= self.nodules[1]:
            raise ConfigError(f"phantom nodule count range {self.nodules} is invalid")
        # the nodule must fit strictly inside the narrowest lung semi-axis, with a voxel to spare
        if hi + max(self.spacing) >= min(self.lung_axes_mm()):
            raise ContractError(
                f"infeasible phantom geometry: nodule radius {hi} mm does not fit in lung semi-axes "
                f"{tuple(round(a, 2) for a in self.lung_axes_mm())} mm"
            )
        return self

    def extent_mm(self) -> np.ndarray:
        return np.array(self.dims) * np.array(self.spacing)

    def lung_axes_mm(self) -> tuple[float, float, float]:
        ez, ey, ex = self.extent_mm()
        return (0.38 * ez, 0.30 * ey, 0.16 * ex)

    def lung_centers_mm(self) -> list[np.ndarray]:
        c = self.center_mm()
        off = 0.21 * self.extent_mm()[2]
        return [c + np.array([0.0, 0.0, -off]), c + np.array([0.0, 0.0, off])]

    def center_mm(self) -> np.ndarray:
        # world coordinate of voxel i is i * spacing (origin 0)
        return (np.array(self.dims) - 1) * np.array(self.spacing) / 2

    def body_radius_mm(self) -> float:
        return 0.45 * min(self.extent_mm()[1:])


@dataclass
class PhantomNodule:
    center_mm: tuple[float, float, float]
    radius_mm: float

    @property
    def diameter_mm(self) -> float:
        return 2 * self.radius_mm


def _grid(spec: PhantomSpec):
    z, y, x = (np.arange(n) * s for n, s in zip(spec.dims, spec.spacing))
    return z[:, None, None], y[None, :, None], x[None, None, :]


def _in_ellipsoid(points, center, axes) -> np.ndarray:
    return sum(((p - c) / a) ** 2 for p, c, a in zip(points, center, axes)) <= 1.0


def lung_mask(spec: PhantomSpec) -> np.ndarray:
    pts = _grid(spec)
    axes = spec.lung_axes_mm()
    return _in_ellipsoid(pts, spec.lung_centers_mm()[0], axes) | _in_ellipsoid(pts, spec.lung_centers_mm()[1], axes)


def body_mask(spec: PhantomSpec) -> np.ndarray:
    z, y, x = _grid(spec)
    c = spec.center_mm()
    disk = (y - c[1]) ** 2 + (x - c[2]) ** 2 <= spec.body_radius_mm() ** 2
    return np.broadcast_to(disk, spec.dims)


def sphere_fraction(spec: PhantomSpec, nodule: PhantomNodule) -> tuple[tuple[slice, ...], np.ndarray]:
    """Fraction of each voxel inside the sphere, from SUPERSAMPLE^3 subsamples, over its bounding box."""
    sp = np.array(spec.spacing)
    c = np.array(nodule.center_mm)
    lo = np.maximum(np.floor((c - nodule.radius_mm) / sp - 1).astype(int), 0)
    hi = np.minimum(np.ceil((c + nodule.radius_mm) / sp + 2).astype(int), spec.dims)
    offs = (np.arange(SUPERSAMPLE) + 0.5) / SUPERSAMPLE - 0.5
    axes = []
    for a in range(3):
        centers = np.arange(lo[a], hi[a]) * sp[a]
        axes.append((centers[:, None] + offs[None, :] * sp[a]).ravel() - c[a])
    dz, dy, dx = axes
    inside = (dz[:, None, None] ** 2 + dy[None, :, None] ** 2 + dx[None, None, :] ** 2) <= nodule.radius_mm**2
    shape = tuple(int(h - l) for l, h in zip(lo, hi))
    frac = inside.reshape(shape[0], SUPERSAMPLE, shape[1], SUPERSAMPLE, shape[2], SUPERSAMPLE).mean(axis=(1, 3, 5))
    return tuple(slice(int(l), int(h)) for l, h in zip(lo, hi)), frac


def sphere_mask(frac: np.ndarray) -> np.ndarray:
    """The round(sum(frac)) most-covered voxels, so the mask volume tracks the sphere volume.

    Thresholding coverage at 0.5 loses several percent on small spheres
    (boundary voxels with the center inside but under half coverage dominate).
    """
    k = int(np.floor(frac.sum() + 0.5))
    order = np.argsort(-frac, axis=None, kind="stable")[:k]
    out = np.zeros(frac.size, dtype=np.uint8)
    out[order] = 1
    return out.reshape(frac.shape)


def _sphere_inside_lung(spec: PhantomSpec, nodule: PhantomNodule, lung_index: int) -> bool:
    # sample the sphere surface densely; every point must be inside the lung ellipsoid, one voxel in
    center = spec.lung_centers_mm()[lung_index]
    axes = np.array(spec.lung_axes_mm()) - max(spec.spacing)
    golden = math.pi * (3 - math.sqrt(5))
    k = np.arange(400)
    zc = 1 - 2 * (k + 0.5) / len(k)
    r = np.sqrt(1 - zc**2)
    pts = np.stack([zc, r * np.cos(golden * k), r * np.sin(golden * k)], axis=1) * nodule.radius_mm + nodule.center_mm
    return bool(np.all(np.sum(((pts - center) / axes) ** 2, axis=1) <= 1.0))


def place_nodules(spec: PhantomSpec, count: int, rng: np.random.Generator) -> list[PhantomNodule]:
    placed: list[PhantomNodule] = []
    lo, hi = spec.radius_mm
    for _ in range(count):
        for _ in range(MAX_PLACEMENT_TRIES):
            radius = float(rng.uniform(lo, hi))
            lung = int(rng.integers(2))
            axes = np.array(spec.lung_axes_mm())
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            center = spec.lung_centers_mm()[lung] + direction * axes * rng.uniform(0, 1) ** (1 / 3)
            cand = PhantomNodule(tuple(float(v) for v in center), radius)
            if not _sphere_inside_lung(spec, cand, lung):
                continue
            if any(np.linalg.norm(center - np.array(p.center_mm)) < radius + p.radius_mm + 2 * max(spec.spacing) for p in placed):
                continue
            placed.append(cand)
            break
        else:
            raise ContractError(f"infeasible phantom geometry: could not place nodule {len(placed) + 1} of {count}")
    return placed


def render_volume(spec: PhantomSpec, nodules: list[PhantomNodule], rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """HU voxels (int16) and the binary nodule mask."""
    body = body_mask(spec)
    lungs = lung_mask(spec)
    hu = np.full(spec.dims, -1000.0)
    hu[body] = spec.body_hu
    noise = rng.normal(0.0, spec.lung_noise_hu, size=spec.dims)
    hu[lungs] = spec.lung_hu + noise[lungs]
    mask = np.zeros(spec.dims, dtype=np.uint8)
    for n in nodules:
        box, frac = sphere_fraction(spec, n)
        lung_part = hu[box]
        hu[box] = lung_part * (1 - frac) + (spec.nodule_hu + noise[box]) * frac
        mask[box] |= sphere_mask(frac)
    return np.round(hu).astype(np.int16), mask


def _stage_index(spec: PhantomSpec, d: float, rng) -> int:
    d_lo, d_hi = 2 * spec.radius_mm[0], 2 * spec.radius_mm[1]
    span = max(d_hi - d_lo, 1e-9)
    return int(np.clip(np.round(6 * (d - d_lo) / span + rng.normal(0, spec.stage_noise)), 0, 6))


def recurrence_logit(spec: PhantomSpec, d: float, stage_index: int) -> float:
    return spec.diameter_coupling * (d - spec.diameter_ref) + spec.stage_coupling * (stage_index - 3) + spec.base_logit


def clinical_row(spec: PhantomSpec, pid: str, nodules: list[PhantomNodule], rng) -> tuple[PatientRecord, bool]:
    d = max((n.diameter_mm for n in nodules), default=float(np.mean(spec.radius_mm)) * 2)
    stage = _stage_index(spec, d, rng)
    u = float(rng.uniform(1e-12, 1 - 1e-12))
    recur = recurrence_logit(spec, d, stage) + spec.label_noise * math.log(u / (1 - u)) > 0
    surgery = int(rng.integers(10, 90))
    progression = surgery + int(rng.integers(90, 1500)) if recur else None
    chemo = (surgery + int(rng.integers(20, 60)),) if rng.uniform() < spec.adjuvant_rate else ()
    record = PatientRecord(
        patient_id=pid,
        stage=STAGES[stage],
        gender=GENDERS[int(rng.integers(2))],
        age=float(rng.integers(45, 85)),
        surgery_days=surgery,
        progression_days=progression,
        chemo_days=chemo,
        residual_disease=False,
        last_contact_days=STUDY_END_DAYS,
        study_end_days=STUDY_END_DAYS,
        treatment_kind="surgery",
    )
    return record, recur


@dataclass
class PhantomCase:
    patient: PatientRecord
    nodules: list[NoduleRecord]
    ct: CtVolume
    mask: MaskVolume
    spheres: list[PhantomNodule]
    recurrence: bool


def generate_patient(spec: PhantomSpec, pid: str, rng: np.random.Generator, n_nodules: int | None = None) -> PhantomCase:
    if n_nodules is None:
        n_nodules = int(rng.integers(spec.nodules[0], spec.nodules[1] + 1))
    spheres = place_nodules(spec, n_nodules, rng)
    hu, mask = render_volume(spec, spheres, rng)
    ct = make_ct(hu, tuple(float(s) for s in spec.spacing))
    series = f"volumes/{pid}.hdr"
    records = []
    for i, s in enumerate(sorted(spheres, key=lambda s: -s.radius_mm)):
        z = int(np.clip(np.floor(s.center_mm[0] / spec.spacing[0] + 0.5), 0, spec.dims[0] - 1))
        records.append(NoduleRecord(pid, f"{pid}-n{i}", series, round(s.diameter_mm, 3), z, 4))
    if not spheres:
        # keep a row pointing at the middle slice so the scan can still be run through the chain
        records.append(NoduleRecord(pid, f"{pid}-n0", series, 0.0, spec.dims[0] // 2, 4))
    patient, recur = clinical_row(spec, pid, spheres, rng)
    return PhantomCase(patient, records, ct, make_mask(mask, like=ct.header), spheres, recur)


@dataclass
class PhantomDataset:
    root: Path
    patients: list[PatientRecord]
    nodules: list[NoduleRecord]
    recurrence: dict[str, bool]


def generate_phantom_dataset(spec: PhantomSpec, n_patients: int, root, with_nodules: bool = True, prefix: str = "P") -> PhantomDataset:
    """Write ``clinical.csv``, ``volumes/<id>.hdr|raw`` and ``masks/<id>.hdr|raw`` under ``root``."""
    spec.validate()
    if n_patients < 1:
        raise ContractError(f"n_patients must be >= 1, got {n_patients}")
    root = Path(root)
    (root / "volumes").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    patients, nodules, labels = [], [], {}
    seeds = np.random.SeedSequence(spec.seed).spawn(n_patients)
    width = max(3, len(str(n_patients - 1)))
    for i, ss in enumerate(seeds):
        pid = f"{prefix}{i:0{width}d}"
        case = generate_patient(spec, pid, np.random.default_rng(ss), None if with_nodules else 0)
        write_volume(case.ct, root / "volumes" / f"{pid}.hdr")
        write_volume(case.mask, root / "masks" / f"{pid}.hdr")
        patients.append(case.patient)
        nodules.extend(case.nodules)
        labels[pid] = case.recurrence
    write_clinical_table(root / "clinical.csv", patients, nodules)
    return PhantomDataset(root, patients, nodules, labels)
