"""Volume/mask files, clinical tables, cohort cleaning and label derivation.

Volume files are a small text header plus a raw little-endian payload in
z-major order::

    dims: 64 96 96
    spacing_mm: 1.5 1.0 1.0
    origin_mm: 0.0 0.0 0.0
    value_kind: hounsfield-int16
    data_path: p0001.raw
    slice_positions_mm: 0.0 1.5 3.0 ...      (optional)

Triples are ordered (z, y, x).
"""

from __future__ import annotations

import csv
import enum
import hashlib
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, FormatError, ShapeError

HU_MIN = -1024
HU_MAX = 3071

VALUE_KINDS = {
    "hounsfield-int16": np.dtype("<i2"),
    "mask-uint8": np.dtype("u1"),
}

_HEADER_KEYS = ("dims", "spacing_mm", "origin_mm", "value_kind", "data_path")
_OPTIONAL_KEYS = ("slice_positions_mm",)


def _fmt_floats(values: Iterable[float]) -> str:
    return " ".join(repr(float(v)) for v in values)


@dataclass(frozen=True)
class VolumeHeader:
    dims: tuple[int, int, int]
    spacing_mm: tuple[float, float, float]
    origin_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)
    value_kind: str = "hounsfield-int16"
    data_path: str = ""
    slice_positions_mm: tuple[float, ...] | None = None

    def __post_init__(self):
        if len(self.dims) != 3 or any(int(d) < 1 for d in self.dims):
            raise ContractError(f"dims must be three extents >= 1, got {self.dims}")
        if len(self.spacing_mm) != 3 or any(not s > 0 for s in self.spacing_mm):
            raise ContractError(f"spacing_mm must be three positive values, got {self.spacing_mm}")
        if len(self.origin_mm) != 3:
            raise ContractError(f"origin_mm must have three entries, got {self.origin_mm}")
        if self.value_kind not in VALUE_KINDS:
            raise FormatError(f"value_kind: unknown kind {self.value_kind!r}")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))
        object.__setattr__(self, "origin_mm", tuple(float(o) for o in self.origin_mm))
        if self.slice_positions_mm is not None:
            object.__setattr__(
                self, "slice_positions_mm", tuple(float(p) for p in self.slice_positions_mm)
            )

    @property
    def element_width(self) -> int:
        return VALUE_KINDS[self.value_kind].itemsize

    @property
    def payload_bytes(self) -> int:
        return math.prod(self.dims) * self.element_width

    def replace(self, **changes) -> "VolumeHeader":
        kwargs = {
            "dims": self.dims,
            "spacing_mm": self.spacing_mm,
            "origin_mm": self.origin_mm,
            "value_kind": self.value_kind,
            "data_path": self.data_path,
            "slice_positions_mm": self.slice_positions_mm,
        }
        kwargs.update(changes)
        return VolumeHeader(**kwargs)

    def to_text(self) -> str:
        lines = [
            f"dims: {' '.join(str(d) for d in self.dims)}",
            f"spacing_mm: {_fmt_floats(self.spacing_mm)}",
            f"origin_mm: {_fmt_floats(self.origin_mm)}",
            f"value_kind: {self.value_kind}",
            f"data_path: {self.data_path}",
        ]
        if self.slice_positions_mm is not None:
            lines.append(f"slice_positions_mm: {_fmt_floats(self.slice_positions_mm)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "VolumeHeader":
        raw: dict[str, str] = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            key, sep, value = line.partition(":")
            key = key.strip()
            if not sep or key not in _HEADER_KEYS + _OPTIONAL_KEYS:
                raise FormatError(f"header line {lineno}: malformed header key {key!r}")
            if key in raw:
                raise FormatError(f"header line {lineno}: duplicate key {key!r}")
            raw[key] = value.strip()
        for key in _HEADER_KEYS:
            if key not in raw:
                raise FormatError(f"{key}: missing from header")

        def numbers(key, conv, count=None):
            try:
                vals = tuple(conv(tok) for tok in raw[key].split())
            except ValueError:
                raise FormatError(f"{key}: unparseable value {raw[key]!r}") from None
            if count is not None and len(vals) != count:
                raise FormatError(f"{key}: expected {count} values, got {len(vals)}")
            return vals

        if raw["value_kind"] not in VALUE_KINDS:
            raise FormatError(f"value_kind: unknown kind {raw['value_kind']!r}")
        positions = None
        if "slice_positions_mm" in raw:
            positions = numbers("slice_positions_mm", float)
        try:
            return cls(
                dims=numbers("dims", int, 3),
                spacing_mm=numbers("spacing_mm", float, 3),
                origin_mm=numbers("origin_mm", float, 3),
                value_kind=raw["value_kind"],
                data_path=raw["data_path"],
                slice_positions_mm=positions,
            )
        except ContractError as exc:
            raise FormatError(str(exc)) from None


@dataclass
class CtVolume:
    header: VolumeHeader
    voxels: np.ndarray  # int16, [z][y][x]

    def __post_init__(self):
        if self.header.value_kind != "hounsfield-int16":
            raise ContractError("CtVolume requires value_kind hounsfield-int16")
        _check_extents(self.header, self.voxels)
        if self.voxels.size and (self.voxels.min() < HU_MIN or self.voxels.max() > HU_MAX):
            raise ContractError(f"HU values outside [{HU_MIN}, {HU_MAX}]")


@dataclass
class MaskVolume:
    header: VolumeHeader
    voxels: np.ndarray  # uint8 in {0, 1}

    def __post_init__(self):
        if self.header.value_kind != "mask-uint8":
            raise ContractError("MaskVolume requires value_kind mask-uint8")
        _check_extents(self.header, self.voxels)
        if self.voxels.size and self.voxels.max() > 1:
            raise ContractError("mask voxels must be 0 or 1")


def _check_extents(header: VolumeHeader, voxels: np.ndarray) -> None:
    if tuple(voxels.shape) != header.dims:
        raise ShapeError(f"voxel extents {voxels.shape} differ from header dims {header.dims}")


def read_volume(path: str | Path) -> CtVolume | MaskVolume:
    path = Path(path)
    try:
        text = path.read_text(encoding="ascii")
    except FileNotFoundError:
        raise FormatError(f"header file not found: {path}") from None
    except UnicodeDecodeError:
        raise FormatError(f"header is not ASCII text: {path}") from None
    header = VolumeHeader.from_text(text)
    payload_path = path.parent / header.data_path
    try:
        payload = payload_path.read_bytes()
    except (FileNotFoundError, IsADirectoryError):
        raise FormatError(f"data_path: payload file not found: {payload_path}") from None
    if len(payload) != header.payload_bytes:
        raise FormatError(
            f"data_path: payload size mismatch, expected {header.payload_bytes} bytes "
            f"for dims {header.dims}, found {len(payload)}"
        )
    dtype = VALUE_KINDS[header.value_kind]
    voxels = np.frombuffer(payload, dtype=dtype).reshape(header.dims).astype(dtype.newbyteorder("="))
    if header.value_kind == "mask-uint8":
        return MaskVolume(header, voxels)
    return CtVolume(header, voxels)


def write_volume(volume: CtVolume | MaskVolume, path: str | Path, data_path: str | None = None) -> Path:
    """Write header to ``path`` and the payload next to it.

    The payload name defaults to the header's ``data_path`` or, when that is
    empty, ``<stem>.raw``.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = volume.header
    name = data_path or header.data_path or (path.stem + ".raw")
    if name != header.data_path:
        header = header.replace(data_path=name)
    dtype = VALUE_KINDS[header.value_kind]
    (path.parent / name).write_bytes(np.ascontiguousarray(volume.voxels, dtype=dtype).tobytes())
    path.write_text(header.to_text(), encoding="ascii")
    return path


def make_ct(voxels: np.ndarray, spacing_mm, origin_mm=(0.0, 0.0, 0.0), **extra) -> CtVolume:
    voxels = np.asarray(voxels, dtype=np.int16)
    header = VolumeHeader(tuple(voxels.shape), tuple(spacing_mm), tuple(origin_mm), "hounsfield-int16", **extra)
    return CtVolume(header, voxels)


def make_mask(voxels: np.ndarray, like: VolumeHeader | None = None, spacing_mm=None, origin_mm=None) -> MaskVolume:
    voxels = (np.asarray(voxels) > 0).astype(np.uint8)
    if like is not None:
        spacing_mm = spacing_mm or like.spacing_mm
        origin_mm = origin_mm or like.origin_mm
    header = VolumeHeader(
        tuple(voxels.shape), tuple(spacing_mm or (1.0, 1.0, 1.0)), tuple(origin_mm or (0.0, 0.0, 0.0)),
        "mask-uint8",
    )
    return MaskVolume(header, voxels)


def series_identity(path: str | Path) -> str:
    """Identity key for a series: dims + spacing + payload hash."""
    vol = read_volume(path)
    digest = hashlib.sha256(np.ascontiguousarray(vol.voxels).tobytes()).hexdigest()
    return f"{vol.header.dims}|{vol.header.spacing_mm}|{digest}"


# ---------------------------------------------------------------------------
# clinical table

STAGES = ("IA", "IB", "IIA", "IIB", "IIIA", "IIIB", "IV")
GENDERS = ("male", "female")
TREATMENTS = ("surgery", "chemo", "radiation", "other")

CLINICAL_COLUMNS = (
    "patient_id", "nodule_id", "stage", "gender", "age", "treatment_kind",
    "surgery_days", "progression_days", "chemo_days", "residual_disease",
    "last_contact_days", "study_end_days", "diameter_mm", "primary_slice_index",
    "series_path",
)
# annotator_count is optional in the table (recurrence cohorts carry no annotations)
OPTIONAL_COLUMNS = ("annotator_count",)


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    stage: str
    gender: str
    age: float
    surgery_days: int | None
    progression_days: int | None
    chemo_days: tuple[int, ...]
    residual_disease: bool
    last_contact_days: int
    study_end_days: int
    treatment_kind: str

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ContractError(f"stage: unknown enumerant {self.stage!r}")
        for name in ("surgery_days", "progression_days", "last_contact_days", "study_end_days"):
            val = getattr(self, name)
            if val is not None and val < 0:
                raise ContractError(f"{name}: negative day offset {val}")
        if any(d < 0 for d in self.chemo_days):
            raise ContractError("chemo_days: negative day offset")


@dataclass(frozen=True)
class NoduleRecord:
    patient_id: str
    nodule_id: str
    series_path: str
    diameter_mm: float
    primary_slice_index: int
    annotator_count: int = 4


def _parse_enum(value, choices, row, col):
    if value not in choices:
        raise FormatError(f"row {row}, column {col}: unknown enumerant {value!r}")
    return value


def _parse_number(value, conv, row, col, optional=False, nonneg=True):
    if value == "":
        if optional:
            return None
        raise FormatError(f"row {row}, column {col}: required value is empty")
    try:
        num = conv(value)
    except ValueError:
        raise FormatError(f"row {row}, column {col}: unparseable number {value!r}") from None
    if nonneg and num < 0:
        raise FormatError(f"row {row}, column {col}: negative value {value!r}")
    return num


def _parse_flag(value, row, col):
    v = value.strip().lower()
    if v in ("1", "true", "yes"):
        return True
    if v in ("0", "false", "no", ""):
        return False
    raise FormatError(f"row {row}, column {col}: unparseable flag {value!r}")


def parse_clinical_rows(text: str) -> tuple[list[PatientRecord], list[NoduleRecord]]:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None:
        raise FormatError("clinical table is empty")
    missing = [c for c in CLINICAL_COLUMNS if c not in reader.fieldnames]
    if missing:
        raise FormatError(f"missing required column(s): {', '.join(missing)}")
    patients: dict[str, PatientRecord] = {}
    nodules: list[NoduleRecord] = []
    for rowno, row in enumerate(reader, 2):
        row = {k: (v or "").strip() for k, v in row.items() if k is not None}
        chemo = ()
        if row["chemo_days"]:
            chemo = tuple(
                _parse_number(tok.strip(), int, rowno, "chemo_days") for tok in row["chemo_days"].split(";")
            )
        patient = PatientRecord(
            patient_id=row["patient_id"],
            stage=_parse_enum(row["stage"], STAGES, rowno, "stage"),
            gender=_parse_enum(row["gender"], GENDERS, rowno, "gender"),
            age=_parse_number(row["age"], float, rowno, "age"),
            surgery_days=_parse_number(row["surgery_days"], int, rowno, "surgery_days", optional=True),
            progression_days=_parse_number(row["progression_days"], int, rowno, "progression_days", optional=True),
            chemo_days=chemo,
            residual_disease=_parse_flag(row["residual_disease"], rowno, "residual_disease"),
            last_contact_days=_parse_number(row["last_contact_days"], int, rowno, "last_contact_days"),
            study_end_days=_parse_number(row["study_end_days"], int, rowno, "study_end_days"),
            treatment_kind=_parse_enum(row["treatment_kind"], TREATMENTS, rowno, "treatment_kind"),
        )
        previous = patients.setdefault(patient.patient_id, patient)
        if previous != patient:
            raise FormatError(f"row {rowno}: patient {patient.patient_id} fields disagree with an earlier row")
        if row["nodule_id"]:
            annot = row.get("annotator_count", "")
            nodules.append(
                NoduleRecord(
                    patient_id=row["patient_id"],
                    nodule_id=row["nodule_id"],
                    series_path=row["series_path"],
                    diameter_mm=_parse_number(row["diameter_mm"], float, rowno, "diameter_mm"),
                    primary_slice_index=_parse_number(row["primary_slice_index"], int, rowno, "primary_slice_index"),
                    annotator_count=4 if annot == "" else _parse_number(annot, int, rowno, "annotator_count"),
                )
            )
    return list(patients.values()), nodules


def read_clinical_table(path: str | Path) -> tuple[list[PatientRecord], list[NoduleRecord]]:
    return parse_clinical_rows(Path(path).read_text())


def _fmt_opt(value) -> str:
    return "" if value is None else str(value)


def format_clinical_rows(patients: Sequence[PatientRecord], nodules: Sequence[NoduleRecord]) -> str:
    by_patient: dict[str, list[NoduleRecord]] = {}
    for n in nodules:
        by_patient.setdefault(n.patient_id, []).append(n)
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(CLINICAL_COLUMNS + OPTIONAL_COLUMNS)
    for p in patients:
        base = [
            p.patient_id, None, p.stage, p.gender, repr(float(p.age)), p.treatment_kind,
            _fmt_opt(p.surgery_days), _fmt_opt(p.progression_days),
            ";".join(str(d) for d in p.chemo_days), int(p.residual_disease),
            p.last_contact_days, p.study_end_days,
        ]
        rows = by_patient.get(p.patient_id) or [None]
        for n in rows:
            if n is None:
                writer.writerow(base[:1] + [""] + base[2:] + ["", "", "", ""])
            else:
                writer.writerow(
                    base[:1] + [n.nodule_id] + base[2:]
                    + [repr(float(n.diameter_mm)), n.primary_slice_index, n.series_path, n.annotator_count]
                )
    return out.getvalue()


def write_clinical_table(path: str | Path, patients, nodules) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_clinical_rows(patients, nodules))
    return path


# ---------------------------------------------------------------------------
# cleaning


class Reason(str, enum.Enum):
    # segmentation cohort, scan level (checked in this order)
    SLICE_THICKNESS = "SLICE_THICKNESS"
    MISSING_SLICES = "MISSING_SLICES"
    INCONSISTENT_SPACING = "INCONSISTENT_SPACING"
    # segmentation cohort, nodule level
    DIAMETER_LT_3MM = "DIAMETER_LT_3MM"
    FEW_ANNOTATORS = "FEW_ANNOTATORS"
    # recurrence cohort, patient level
    NONSURGICAL_PRIMARY = "NONSURGICAL_PRIMARY"
    RESIDUAL_DISEASE = "RESIDUAL_DISEASE"
    LOST_CONTACT = "LOST_CONTACT"
    MULTIPLE_SERIES = "MULTIPLE_SERIES"
    NO_ELIGIBLE_NODULE = "NO_ELIGIBLE_NODULE"
    # recurrence cohort, nodule level
    DIAMETER_LT_4MM = "DIAMETER_LT_4MM"


@dataclass
class CleaningReport:
    kept: list[str] = field(default_factory=list)
    excluded: list[tuple[str, Reason]] = field(default_factory=list)

    def reason(self, item_id: str) -> Reason | None:
        for i, r in self.excluded:
            if i == item_id:
                return r
        return None

    def is_kept(self, item_id: str) -> bool:
        return item_id in self.kept

    def merge(self, other: "CleaningReport") -> "CleaningReport":
        return CleaningReport(self.kept + other.kept, self.excluded + other.excluded)


MAX_SLICE_THICKNESS_MM = 2.5
SPACING_TOLERANCE_MM = 0.01


def _scan_reason(header: VolumeHeader) -> Reason | None:
    if header.spacing_mm[0] > MAX_SLICE_THICKNESS_MM:
        return Reason.SLICE_THICKNESS
    pos = header.slice_positions_mm
    if pos is None:
        return None
    if len(pos) != header.dims[0]:
        return Reason.MISSING_SLICES
    if len(pos) < 2:
        return None
    steps = np.diff(np.asarray(pos, dtype=float))
    step = float(np.median(steps))
    irregular = np.abs(steps - step) > SPACING_TOLERANCE_MM
    if not irregular.any() and step != 0:
        return None
    if step != 0:
        # every irregular gap a whole multiple (>= 2) of the step: slices were dropped
        multiples = steps[irregular] / step
        whole = np.round(multiples)
        if np.all(whole >= 2) and np.all(np.abs(steps[irregular] - whole * step) <= SPACING_TOLERANCE_MM):
            return Reason.MISSING_SLICES
    return Reason.INCONSISTENT_SPACING


def clean_segmentation_scan(
    header: VolumeHeader, nodules: Sequence[NoduleRecord], scan_id: str | None = None
) -> CleaningReport:
    """Apply the segmentation-cohort exclusion rules to one scan and its nodules.

    The scan id (default: the header's data_path) and every nodule id land in
    exactly one of kept/excluded. A scan-level exclusion cascades to its nodules.
    """
    scan_id = scan_id or header.data_path
    report = CleaningReport()
    scan_reason = _scan_reason(header)
    if scan_reason is not None:
        report.excluded.append((scan_id, scan_reason))
    else:
        report.kept.append(scan_id)
    for n in nodules:
        if scan_reason is not None:
            report.excluded.append((n.nodule_id, scan_reason))
        elif n.diameter_mm < 3.0:
            report.excluded.append((n.nodule_id, Reason.DIAMETER_LT_3MM))
        elif n.annotator_count < 3:
            report.excluded.append((n.nodule_id, Reason.FEW_ANNOTATORS))
        else:
            report.kept.append(n.nodule_id)
    return report


def clean_recurrence_patient(
    p: PatientRecord,
    nodules: Sequence[NoduleRecord],
    series_key: Callable[[str], object] | None = None,
) -> CleaningReport:
    """Apply the recurrence-cohort exclusion rules to one patient.

    ``series_key`` maps a series path to an identity; series with equal keys
    count as the same scan. The default compares paths.
    """
    report = CleaningReport()
    reason = None
    if p.treatment_kind != "surgery":
        reason = Reason.NONSURGICAL_PRIMARY
    elif p.residual_disease:
        reason = Reason.RESIDUAL_DISEASE
    elif p.last_contact_days < p.study_end_days:
        reason = Reason.LOST_CONTACT
    else:
        key = series_key or (lambda s: s)
        identities = {key(n.series_path) for n in nodules}
        if len(identities) > 1:
            reason = Reason.MULTIPLE_SERIES
    nodule_reasons = []
    for n in nodules:
        if reason is not None:
            nodule_reasons.append((n.nodule_id, reason))
        elif n.diameter_mm < 4.0:
            nodule_reasons.append((n.nodule_id, Reason.DIAMETER_LT_4MM))
        else:
            nodule_reasons.append((n.nodule_id, None))
    if reason is None and not any(r is None for _, r in nodule_reasons):
        reason = Reason.NO_ELIGIBLE_NODULE
    if reason is None:
        report.kept.append(p.patient_id)
    else:
        report.excluded.append((p.patient_id, reason))
    for nid, r in nodule_reasons:
        if r is None:
            report.kept.append(nid)
        else:
            report.excluded.append((nid, r))
    return report


def clean_recurrence_cohort(patients, nodules, series_key=None) -> CleaningReport:
    by_patient: dict[str, list[NoduleRecord]] = {}
    for n in nodules:
        by_patient.setdefault(n.patient_id, []).append(n)
    report = CleaningReport()
    for p in patients:
        report = report.merge(clean_recurrence_patient(p, by_patient.get(p.patient_id, []), series_key))
    return report


# ---------------------------------------------------------------------------
# labels


def derive_recurrence_label(p: PatientRecord) -> bool:
    """True iff progression happened strictly after surgery."""
    if p.surgery_days is None:
        raise ContractError(f"patient {p.patient_id}: surgery_days absent, cannot derive recurrence")
    return p.progression_days is not None and p.progression_days > p.surgery_days


def derive_adjuvant_flag(p: PatientRecord) -> bool:
    if p.surgery_days is None:
        raise ContractError(f"patient {p.patient_id}: surgery_days absent, cannot derive adjuvant flag")
    return any(d > p.surgery_days for d in p.chemo_days)


def consensus_mask(masks: Sequence[MaskVolume], min_votes: int = 2) -> MaskVolume:
    """Pixel-level vote over annotator masks: 1 where at least ``min_votes`` agree."""
    if not masks:
        raise ContractError("consensus_mask needs at least one mask")
    ref = masks[0].header
    for m in masks[1:]:
        if m.header.dims != ref.dims or m.header.spacing_mm != ref.spacing_mm:
            raise ShapeError(
                f"mask header mismatch: dims {m.header.dims} spacing {m.header.spacing_mm} "
                f"vs dims {ref.dims} spacing {ref.spacing_mm}"
            )
    votes = np.zeros(ref.dims, dtype=np.int16)
    for m in masks:
        votes += m.voxels
    return MaskVolume(ref, (votes >= min_votes).astype(np.uint8))
