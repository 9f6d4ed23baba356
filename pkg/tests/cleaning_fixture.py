"""30-row clinical fixture and its hand-derived truth table.

Every exclusion reason appears at least once, plus boundary cases for the
diameter cut-offs, equal-day label rules and reason precedence.
"""

from pathlib import Path

import numpy as np

from lungrisk.ingest import (
    Reason,
    VolumeHeader,
    clean_recurrence_cohort,
    clean_segmentation_scan,
    derive_adjuvant_flag,
    derive_recurrence_label,
    read_clinical_table,
)

FIXTURE = Path(__file__).parent / "fixtures" / "clinical_30.csv"

R = Reason
KEPT = None

# recurrence cohort, patient level
RECUR_PATIENTS = {
    "R01": KEPT,
    "R02": KEPT,
    "R03": R.NONSURGICAL_PRIMARY,
    "R04": R.NONSURGICAL_PRIMARY,
    "R05": R.RESIDUAL_DISEASE,
    "R06": R.LOST_CONTACT,
    "R07": R.MULTIPLE_SERIES,
    "R08": R.NO_ELIGIBLE_NODULE,  # only nodule is 3.0 mm
    "R09": R.NO_ELIGIBLE_NODULE,  # no nodule rows at all
    "R10": KEPT,
    "R11": KEPT,
    "R12": KEPT,
    "R13": KEPT,                  # two nodules, same series
    "R14": KEPT,                  # contact beyond study end
    "R15": R.NONSURGICAL_PRIMARY,
    "R16": R.NONSURGICAL_PRIMARY,  # also residual: treatment checked first
    "R17": R.RESIDUAL_DISEASE,     # also lost contact
    "R18": R.LOST_CONTACT,         # also two series
    "R19": KEPT,
    "R20": KEPT,
    "R21": R.NO_ELIGIBLE_NODULE,   # both nodules under 4 mm
    "R22": KEPT,
    "R23": KEPT,
}

# recurrence cohort, nodule level
RECUR_NODULES = {
    "R01-N1": KEPT,
    "R02-N1": KEPT,
    "R02-N2": R.DIAMETER_LT_4MM,
    "R03-N1": R.NONSURGICAL_PRIMARY,
    "R04-N1": R.NONSURGICAL_PRIMARY,
    "R05-N1": R.RESIDUAL_DISEASE,
    "R06-N1": R.LOST_CONTACT,
    "R07-N1": R.MULTIPLE_SERIES,
    "R07-N2": R.MULTIPLE_SERIES,
    "R08-N1": R.DIAMETER_LT_4MM,
    "R10-N1": KEPT,
    "R11-N1": KEPT,
    "R12-N1": KEPT,               # exactly 4.0 mm
    "R13-N1": KEPT,
    "R13-N2": KEPT,
    "R14-N1": KEPT,
    "R15-N1": R.NONSURGICAL_PRIMARY,
    "R16-N1": R.NONSURGICAL_PRIMARY,
    "R17-N1": R.RESIDUAL_DISEASE,
    "R18-N1": R.LOST_CONTACT,
    "R18-N2": R.LOST_CONTACT,
    "R19-N1": KEPT,
    "R19-N2": R.DIAMETER_LT_4MM,
    "R19-N3": KEPT,
    "R20-N1": KEPT,
    "R21-N1": R.DIAMETER_LT_4MM,
    "R21-N2": R.DIAMETER_LT_4MM,
    "R22-N1": KEPT,
    "R23-N1": KEPT,
}

# (recurrence, adjuvant) for every kept patient
LABELS = {
    "R01": (True, False),   # chemo before surgery
    "R02": (False, True),
    "R10": (False, False),  # progression on the surgery day
    "R11": (False, False),  # progression before surgery, chemo on the surgery day
    "R12": (False, False),
    "R13": (True, False),
    "R14": (False, False),
    "R19": (True, False),
    "R20": (True, True),    # chemo on both sides of surgery
    "R22": (True, False),   # one day after surgery
    "R23": (False, True),
}

# segmentation cohort: series that fail the scan checks
_BAD_SERIES = {
    "ct/R07b.hdr": "thick",
    "ct/R18b.hdr": "gap",
    "ct/R06.hdr": "jitter",
}

SEG_SCANS = {
    "ct/R07b.hdr": R.SLICE_THICKNESS,
    "ct/R18b.hdr": R.MISSING_SLICES,
    "ct/R06.hdr": R.INCONSISTENT_SPACING,
}

# segmentation cohort, nodule level (everything not listed is kept)
SEG_NODULES = {
    "R05-N1": R.FEW_ANNOTATORS,
    "R06-N1": R.INCONSISTENT_SPACING,  # two annotators too, scan rule wins
    "R07-N2": R.SLICE_THICKNESS,
    "R13-N2": R.FEW_ANNOTATORS,
    "R18-N2": R.MISSING_SLICES,
    "R19-N2": R.DIAMETER_LT_3MM,
    "R21-N2": R.DIAMETER_LT_3MM,
}


def series_header(path: str) -> VolumeHeader:
    kind = _BAD_SERIES.get(path)
    step = 3.0 if kind == "thick" else 1.25
    positions = list(np.arange(10) * step)
    if kind == "gap":
        positions = positions[:4] + [p + step for p in positions[4:]]
    elif kind == "jitter":
        positions[5] += 0.4
    return VolumeHeader(
        dims=(10, 8, 8), spacing_mm=(step, 0.7, 0.7), origin_mm=(0.0, 0.0, 0.0),
        value_kind="hounsfield-int16", data_path=path, slice_positions_mm=positions,
    )


def run_cleaning(path=FIXTURE):
    """Returns (recurrence report, segmentation report, labels of kept patients)."""
    patients, nodules = read_clinical_table(path)
    recur = clean_recurrence_cohort(patients, nodules)
    by_series: dict[str, list] = {}
    for n in nodules:
        by_series.setdefault(n.series_path, []).append(n)
    seg = None
    for series, group in by_series.items():
        rep = clean_segmentation_scan(series_header(series), group, scan_id=series)
        seg = rep if seg is None else seg.merge(rep)
    labels = {
        p.patient_id: (derive_recurrence_label(p), derive_adjuvant_flag(p))
        for p in patients
        if recur.is_kept(p.patient_id)
    }
    return recur, seg, labels


def mismatches(recur, seg, labels) -> list[str]:
    """Every disagreement with the truth table, empty when all match."""
    out = []
    expected_recur = {**RECUR_PATIENTS, **RECUR_NODULES}
    seen = set(recur.kept) | {i for i, _ in recur.excluded}
    if seen != set(expected_recur):
        out.append(f"recurrence ids differ: {sorted(seen ^ set(expected_recur))}")
    for item, want in expected_recur.items():
        got = None if recur.is_kept(item) else recur.reason(item)
        if got != want:
            out.append(f"recurrence {item}: expected {want}, got {got}")
    seg_ids = set(seg.kept) | {i for i, _ in seg.excluded}
    for item in seg_ids:
        want = SEG_SCANS.get(item) or SEG_NODULES.get(item)
        got = None if seg.is_kept(item) else seg.reason(item)
        if got != want:
            out.append(f"segmentation {item}: expected {want}, got {got}")
    if len(seg_ids) != len(seg.kept) + len(seg.excluded):
        out.append("segmentation report lists an id twice")
    if labels != LABELS:
        out.append(f"labels differ: expected {LABELS}, got {labels}")
    return out
