"""Pipeline commands. Each is a pure function of (config, seed, input files).

A run directory collects every artifact of one experiment; later commands
read what earlier ones wrote (checkpoints and split manifests) and never
re-split.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np

from ..errors import ContractError, FormatError, PathError
from ..forest import (
    CLINICAL_FEATURES,
    FEATURE_NAMES,
    ForestModel,
    build_feature_vector,
    cross_validate,
    fit_forest,
    load_forest,
    overall_table,
    predict_proba,
    save_forest,
    stage_subgroup_metrics,
    subgroup_table,
)
from ..imgproc import (
    GeometricFeatures,
    Roi3D,
    Slice2D,
    bilinear_resize,
    extract_roi,
    geometric_features,
    iso_index,
    nearest_resize,
    preprocess_slice,
    resample_isotropic,
    resample_mask,
    select_densest_region,
)
from ..ingest import (
    CtVolume,
    MaskVolume,
    NoduleRecord,
    PatientRecord,
    VolumeHeader,
    clean_recurrence_cohort,
    clean_segmentation_scan,
    consensus_mask,
    derive_recurrence_label,
    make_mask,
    read_clinical_table,
    read_volume,
    write_volume,
)
from ..neuralcore.checkpoint import load_checkpoint, restore_model, save_checkpoint
from ..recurnet import (
    RecurrenceSplit,
    RoiSet,
    aggregate_patient_score,
    make_recurrence_split,
    recurnet_scores,
    train_recurnet,
)
from ..segnet import THRESHOLD, SegSplit, SliceSet, make_split, seg_metrics, segnet_predict, train_segnet
from .config import PipelineConfig, format_config
from .phantom import generate_phantom_dataset

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
SEG_CKPT, RECUR_CKPT = "seg.ckpt", "recur.ckpt"
SEG_SPLIT, RECUR_SPLIT = "seg_split.json", "recur_split.json"
FOREST, CLINICAL_FOREST = "forest.lrrf", "forest_clinical.lrrf"
FEATURES = "features.csv"
PROPOSED, BASELINE = "Proposed Random Forest Model", "Staging and Clinical Random Forest Model"
NO_NODULE = "no nodule localized"


# ---------------------------------------------------------------------------
# run directory


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_tree(root: Path) -> str:
    """Digest over relative names and contents of every file under ``root``."""
    h = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        h.update(p.relative_to(root).as_posix().encode() + b"\0")
        h.update(sha256_file(p).encode())
    return h.hexdigest()


def make_run_dir(out_dir, seed: int, now: datetime | None = None) -> Path:
    stamp = (now or datetime.now()).strftime("%Y%m%d-%H%M%S")
    base = Path(out_dir) / f"run-{stamp}-{seed}"
    path, i = base, 1
    while path.exists():
        path = base.with_name(f"{base.name}.{i}")
        i += 1
    path.mkdir(parents=True)
    return path


class Run:
    """An existing run directory and its manifest."""

    def __init__(self, path, cfg: PipelineConfig):
        self.path = Path(path)
        if not self.path.is_dir():
            raise PathError(f"run directory {self.path} does not exist")
        self.cfg = cfg

    def file(self, name: str) -> Path:
        return self.path / name

    def require(self, name: str, producer: str) -> Path:
        p = self.file(name)
        if not p.exists():
            raise PathError(f"{p} is missing; run `{producer}` first")
        return p

    def write_text(self, name: str, text: str) -> Path:
        p = self.file(name)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text)
        return p

    def record(self, command: str, inputs: dict[str, str], outputs: list[str]):
        mpath = self.file(MANIFEST)
        manifest = json.loads(mpath.read_text()) if mpath.exists() else {"commands": {}}
        manifest["seed"] = self.cfg.seed
        manifest["commands"][command] = {
            "config": format_config(self.cfg).splitlines(),
            "inputs": dict(sorted(inputs.items())),
            "outputs": {name: sha256_file(self.file(name)) for name in sorted(outputs)},
        }
        mpath.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def open_run(cfg: PipelineConfig, run_dir=None) -> Run:
    path = Path(run_dir) if run_dir is not None else make_run_dir(cfg.out_dir, cfg.seed)
    return Run(path, cfg)


# ---------------------------------------------------------------------------
# cohort access


@dataclass
class Cohort:
    root: Path
    patients: list[PatientRecord]
    nodules: list[NoduleRecord]
    _volumes: dict = field(default_factory=dict, repr=False)

    def nodules_of(self, pid: str) -> list[NoduleRecord]:
        return [n for n in self.nodules if n.patient_id == pid]

    def header(self, series: str) -> VolumeHeader:
        path = self.root / series
        if not path.is_file():
            raise PathError(f"volume header {path} does not exist")
        return VolumeHeader.from_text(path.read_text(encoding="ascii"))

    def volume(self, series: str) -> CtVolume:
        # one volume at a time is enough: callers walk the cohort series by series
        if series not in self._volumes:
            self._volumes.clear()
            vol = read_volume(self.root / series)
            if not isinstance(vol, CtVolume):
                raise FormatError(f"{series} is not a CT volume")
            self._volumes[series] = vol
        return self._volumes[series]

    def truth(self, series: str) -> MaskVolume:
        """Ground-truth mask: consensus of ``masks/<stem>_a*.hdr`` when present, else ``masks/<stem>.hdr``."""
        stem = Path(series).stem
        annotators = sorted((self.root / "masks").glob(f"{stem}_a*.hdr"))
        if annotators:
            return consensus_mask([read_volume(p) for p in annotators])
        path = self.root / "masks" / f"{stem}.hdr"
        if not path.is_file():
            raise PathError(f"ground-truth mask {path} does not exist")
        return read_volume(path)

    def digests(self) -> dict[str, str]:
        out = {"clinical.csv": sha256_file(self.root / "clinical.csv")}
        for sub in ("volumes", "masks"):
            if (self.root / sub).is_dir():
                out[f"{sub}/"] = sha256_tree(self.root / sub)
        return out


def load_cohort(root) -> Cohort:
    root = Path(root)
    if not root.is_dir():
        raise PathError(f"data root {root} does not exist")
    table = root / "clinical.csv"
    if not table.is_file():
        raise PathError(f"clinical table {table} does not exist")
    patients, nodules = read_clinical_table(table)
    return Cohort(root, patients, nodules)


# ---------------------------------------------------------------------------
# per-slice and per-nodule processing


def seg_input(ct: CtVolume, z: int, cfg: PipelineConfig, series: str = "") -> Slice2D:
    if not 0 <= z < ct.header.dims[0]:
        raise ContractError(f"slice index {z} outside volume with {ct.header.dims[0]} slices")
    size = cfg.seg.input_size
    return preprocess_slice(ct.voxels[z], (size, size), cfg.hu_window, ct.header.spacing_mm[1:], (series, z))


@dataclass
class Localization:
    nodule_id: str
    z: int
    prob: np.ndarray  # native in-plane resolution
    mask: np.ndarray  # post-processed, native resolution
    features: GeometricFeatures

    @property
    def empty(self) -> bool:
        return not self.mask.any()


def localize(model, ct: CtVolume, z: int, cfg: PipelineConfig, nodule_id: str = "") -> Localization:
    """Segment slice ``z`` and keep the densest region, at the native slice resolution."""
    s = seg_input(ct, z, cfg, nodule_id)
    prob = np.clip(bilinear_resize(segnet_predict(model, s), ct.voxels[z].shape), 0.0, 1.0)
    mask = select_densest_region(prob, THRESHOLD)
    feats = geometric_features(mask, ct.voxels[z], ct.header.spacing_mm[1:])
    return Localization(nodule_id, z, prob, mask, feats)


def nodule_roi(ct: CtVolume, iso: CtVolume, loc: Localization, cfg: PipelineConfig) -> Roi3D:
    """ROI around a 2-D predicted mask: its in-plane footprint is placed on the 1 mm grid at the main slice."""
    sz, sy, sx = ct.header.spacing_mm
    plane = make_mask(loc.mask[None], spacing_mm=(1.0, sy, sx))
    footprint = resample_mask(plane).voxels[0]
    vol = np.zeros(iso.header.dims, dtype=np.uint8)
    main_z = min(iso_index(loc.z, sz), iso.header.dims[0] - 1)
    vol[main_z] = footprint
    return extract_roi(iso, MaskVolume(iso.header.replace(value_kind="mask-uint8"), vol), main_z, cfg.hu_window)


def slice_set(cohort: Cohort, refs, cfg: PipelineConfig) -> SliceSet:
    size = cfg.seg.input_size
    images = np.zeros((len(refs), size, size), dtype=np.float32)
    masks = np.zeros((len(refs), size, size), dtype=np.uint8)
    order = sorted(range(len(refs)), key=lambda i: (refs[i].series_path, refs[i].z))
    truth_cache = {}
    for i in order:
        r = refs[i]
        ct = cohort.volume(r.series_path)
        if r.series_path not in truth_cache:
            truth_cache.clear()
            truth_cache[r.series_path] = cohort.truth(r.series_path)
        images[i] = seg_input(ct, r.z, cfg, r.series_path).pixels
        masks[i] = nearest_resize(truth_cache[r.series_path].voxels[r.z], (size, size))
    return SliceSet(images, masks)


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _num(v) -> str:
    return "NA" if v is None else repr(float(v))


# ---------------------------------------------------------------------------
# gen-phantom


def cmd_gen_phantom(cfg: PipelineConfig, with_nodules: bool = True) -> dict:
    cfg = cfg.seeded()
    ds = generate_phantom_dataset(cfg.phantom, cfg.n_patients, cfg.data_root, with_nodules=with_nodules)
    return {"data_root": str(ds.root), "patients": len(ds.patients), "nodules": len(ds.nodules),
            "recurrences": int(sum(ds.recurrence.values()))}


# ---------------------------------------------------------------------------
# train-seg


def _seg_cohort(cohort: Cohort) -> tuple[list[NoduleRecord], list[tuple[str, str, str]]]:
    kept, rows = [], []
    series = sorted({n.series_path for n in cohort.nodules})
    for s in series:
        nods = [n for n in cohort.nodules if n.series_path == s]
        rep = clean_segmentation_scan(cohort.header(s), nods, scan_id=s)
        for item in rep.kept:
            rows.append((item, "kept", ""))
        for item, reason in rep.excluded:
            rows.append((item, "excluded", reason.value))
        kept.extend(n for n in nods if rep.is_kept(n.nodule_id))
    return kept, rows


def _tissue_slices(cohort: Cohort, nodules) -> dict[str, list[int]]:
    out = {}
    for pid in sorted({n.patient_id for n in nodules}):
        series = next(n.series_path for n in nodules if n.patient_id == pid)
        truth = cohort.truth(series).voxels
        out[pid] = [int(z) for z in np.flatnonzero(truth.reshape(len(truth), -1).any(axis=1))]
    return out


def load_seg_split(run: Run, cohort: Cohort | None = None, cfg: PipelineConfig | None = None) -> SegSplit:
    path = run.file(SEG_SPLIT)
    if path.exists():
        return SegSplit.from_json(path.read_text())
    if cohort is None:
        raise PathError(f"{path} is missing; run `train-seg` first")
    kept, _ = _seg_cohort(cohort)
    if not kept:
        raise ContractError("segmentation cohort is empty after cleaning")
    tissue = _tissue_slices(cohort, kept) if cfg.seg_slices == "all" else None
    split = make_split(kept, cfg.seg_split, cfg.seed, tissue)
    run.write_text(SEG_SPLIT, split.to_json())
    return split


def cmd_train_seg(cfg: PipelineConfig, run: Run) -> dict:
    cfg = cfg.seeded().validate()
    cohort = load_cohort(cfg.data_root)
    _, rows = _seg_cohort(cohort)
    run.write_text("seg_cleaning.csv", _csv(rows, ("item", "status", "reason")))
    split = load_seg_split(run, cohort, cfg)
    train = slice_set(cohort, split.train, cfg)
    val = slice_set(cohort, split.val, cfg) if split.val else None
    log.info("train-seg: %d train / %d val slices", len(train), 0 if val is None else len(val))
    result = train_segnet(train, val, cfg.seg)
    save_checkpoint(result.model, run.file(SEG_CKPT), cfg.seed)
    run.write_text("seg_log.csv", result.log_csv("val_dice" if val is not None else "train_dice"))
    final = result.log[-1][2]
    run.record("train-seg", cohort.digests(), [SEG_CKPT, SEG_SPLIT, "seg_log.csv", "seg_cleaning.csv"])
    return {"train_slices": len(train), "val_slices": 0 if val is None else len(val),
            "best_epoch": result.best_epoch, "final_val_dice": final}


# ---------------------------------------------------------------------------
# train-recur


@dataclass
class RecurCohort:
    patients: list[PatientRecord]
    nodules: dict[str, list[NoduleRecord]]
    labels: dict[str, bool]


def _recur_cohort(cohort: Cohort, run: Run) -> RecurCohort:
    rep = clean_recurrence_cohort(cohort.patients, cohort.nodules)
    rows = [(i, "kept", "") for i in rep.kept] + [(i, "excluded", r.value) for i, r in rep.excluded]
    run.write_text("recur_cleaning.csv", _csv(rows, ("item", "status", "reason")))
    patients = [p for p in cohort.patients if rep.is_kept(p.patient_id)]
    nodules = {p.patient_id: [n for n in cohort.nodules_of(p.patient_id) if rep.is_kept(n.nodule_id)] for p in patients}
    return RecurCohort(patients, nodules, {p.patient_id: derive_recurrence_label(p) for p in patients})


def load_recur_split(run: Run, rc: RecurCohort | None = None, cfg: PipelineConfig | None = None) -> RecurrenceSplit:
    path = run.file(RECUR_SPLIT)
    if path.exists():
        return RecurrenceSplit.from_json(path.read_text())
    if rc is None:
        raise PathError(f"{path} is missing; run `train-recur` first")
    split = make_recurrence_split(rc.labels, cfg.recur_split, cfg.seed)
    run.write_text(RECUR_SPLIT, split.to_json())
    return split


@dataclass
class PatientFindings:
    patient_id: str
    localizations: list[Localization]
    rois: dict[str, Roi3D]

    @property
    def found(self) -> list[Localization]:
        return [loc for loc in self.localizations if not loc.empty]

    @property
    def skipped(self) -> list[str]:
        return [loc.nodule_id for loc in self.localizations if loc.empty]


def find_nodules(seg_model, ct: CtVolume, nodules: list[NoduleRecord], cfg: PipelineConfig, pid: str) -> PatientFindings:
    locs = [localize(seg_model, ct, n.primary_slice_index, cfg, n.nodule_id) for n in nodules]
    iso = resample_isotropic(ct) if any(not loc.empty for loc in locs) else None
    rois = {loc.nodule_id: nodule_roi(ct, iso, loc, cfg) for loc in locs if not loc.empty}
    return PatientFindings(pid, locs, rois)


def _findings(cohort: Cohort, rc: RecurCohort, pids, seg_model, cfg) -> dict[str, PatientFindings]:
    out = {}
    for pid in pids:
        nodules = rc.nodules[pid]
        ct = cohort.volume(nodules[0].series_path)
        out[pid] = find_nodules(seg_model, ct, nodules, cfg, pid)
    return out


def _restore(path):
    return restore_model(load_checkpoint(path))


def cmd_train_recur(cfg: PipelineConfig, run: Run) -> dict:
    cfg = cfg.seeded().validate()
    seg_model = _restore(run.require(SEG_CKPT, "train-seg"))
    cohort = load_cohort(cfg.data_root)
    rc = _recur_cohort(cohort, run)
    split = load_recur_split(run, rc, cfg)
    report_rows, sets = [], {}
    for part in ("train", "val"):
        pids = getattr(split, part)
        found = _findings(cohort, rc, pids, seg_model, cfg)
        rois, labels, skipped = [], [], []
        for pid in pids:
            f = found[pid]
            skipped.extend(f.skipped)
            for loc in f.found:
                rois.append(f.rois[loc.nodule_id].voxels)
                labels.append(int(rc.labels[pid]))
        r = cfg.recur.roi_size
        sets[part] = RoiSet(np.array(rois, dtype=np.float32).reshape(-1, r, r, r), np.array(labels, dtype=int))
        report_rows.append((part, len(pids), len(rois) + len(skipped), len(rois), len(skipped), ";".join(skipped)))
        for nid in skipped:
            log.warning("train-recur: no nodule localized for %s; skipped", nid)
    run.write_text("recur_report.csv", _csv(report_rows, ("partition", "patients", "nodules", "rois", "skipped", "skipped_ids")))
    if len(sets["train"]) == 0:
        raise ContractError("train-recur: segmentation localized no training nodule")
    result = train_recurnet(sets["train"], sets["val"] if len(sets["val"]) else None, cfg.recur)
    save_checkpoint(result.model, run.file(RECUR_CKPT), cfg.seed)
    run.write_text("recur_log.csv", result.log_csv("val_auc"))
    run.record(
        "train-recur",
        {**cohort.digests(), SEG_CKPT: sha256_file(run.file(SEG_CKPT))},
        [RECUR_CKPT, RECUR_SPLIT, "recur_log.csv", "recur_report.csv", "recur_cleaning.csv"],
    )
    return {"train_rois": len(sets["train"]), "val_rois": len(sets["val"]),
            "skipped": sum(row[4] for row in report_rows), "best_epoch": result.best_epoch}


# ---------------------------------------------------------------------------
# fit-forest


def patient_features(p: PatientRecord, findings: PatientFindings, recur_model):
    """(FeatureVector, per-nodule scores), or None when nothing was localized.

    Geometry comes from the largest localized nodule; the network score is
    the most confident nodule score.
    """
    found = findings.found
    if not found:
        return None
    scores = recurnet_scores(recur_model, [findings.rois[loc.nodule_id] for loc in found])
    largest = max(found, key=lambda loc: loc.features.diameter_mm)
    fv = build_feature_vector(p, largest.features, aggregate_patient_score(list(scores)))
    return fv, dict(zip((loc.nodule_id for loc in found), scores))


FEATURE_HEADER = ("patient_id", "partition", "stage", "label") + FEATURE_NAMES


def _read_features(text: str) -> list[dict]:
    return list(csv.DictReader(io.StringIO(text)))


def _variant_xy(rows, names):
    X = np.array([[float(r[n]) for n in names] for r in rows], dtype=np.float64).reshape(len(rows), len(names))
    y = np.array([int(r["label"]) for r in rows], dtype=int)
    return X, y


def _evaluate_forests(rows, models: dict[str, ForestModel]):
    test = [r for r in rows if r["partition"] == "test"]
    metrics, preds = {}, []
    for name, model in models.items():
        X, y = _variant_xy(test, model.feature_names)
        p = predict_proba(model, X) if len(test) else np.zeros(0)
        metrics[name] = stage_subgroup_metrics(p, y, [r["stage"] for r in test])
        preds.extend((name, r["patient_id"], r["label"], repr(float(v))) for r, v in zip(test, p))
    return metrics, preds


def _write_forest_tables(run: Run, rows, models) -> dict:
    metrics, preds = _evaluate_forests(rows, models)
    run.write_text("table_v.csv", overall_table(metrics))
    run.write_text("table_vi.csv", subgroup_table(metrics))
    run.write_text("test_predictions.csv", _csv(preds, ("model", "patient_id", "label", "probability")))
    return metrics


def cmd_fit_forest(cfg: PipelineConfig, run: Run) -> dict:
    cfg = cfg.seeded().validate()
    seg_model = _restore(run.require(SEG_CKPT, "train-seg"))
    recur_model = _restore(run.require(RECUR_CKPT, "train-recur"))
    split = load_recur_split(run)
    cohort = load_cohort(cfg.data_root)
    rc = _recur_cohort(cohort, run)
    rows, score_rows, dropped = [], [], []
    for p in rc.patients:
        part = split.role(p.patient_id)
        if part is None:
            raise ContractError(f"patient {p.patient_id} is missing from the split manifest")
        found = _findings(cohort, rc, [p.patient_id], seg_model, cfg)[p.patient_id]
        result = patient_features(p, found, recur_model)
        if result is None:
            dropped.append(p.patient_id)
            continue
        fv, scores = result
        row = {"patient_id": p.patient_id, "partition": part, "stage": p.stage, "label": str(int(rc.labels[p.patient_id]))}
        row.update({n: repr(float(getattr(fv, n))) for n in FEATURE_NAMES})
        rows.append(row)
        score_rows.extend((p.patient_id, nid, repr(float(s))) for nid, s in scores.items())
    run.write_text(FEATURES, _csv([[r[k] for k in FEATURE_HEADER] for r in rows], FEATURE_HEADER))
    run.write_text("nodule_scores.csv", _csv(score_rows, ("patient_id", "nodule_id", "score")))
    run.write_text("forest_dropped.csv", _csv([(pid, NO_NODULE) for pid in dropped], ("patient_id", "reason")))
    fit_rows = [r for r in rows if r["partition"] in ("train", "val")]
    grid = (cfg.forest_estimators, cfg.forest_depths)
    models, cv_rows = {}, []
    for name, names, fname in ((BASELINE, CLINICAL_FEATURES, CLINICAL_FOREST), (PROPOSED, FEATURE_NAMES, FOREST)):
        X, y = _variant_xy(fit_rows, names)
        cv = cross_validate(X, y, grid, cfg.forest_folds, cfg.seed)
        for (n, d), s in sorted(cv.scores.items(), key=lambda kv: (kv[0][0], float("inf") if kv[0][1] is None else kv[0][1])):
            cv_rows.append((name, n, "none" if d is None else d, repr(s)))
        models[name] = fit_forest(X, y, cv.n_estimators, cv.max_depth, cfg.seed, feature_names=names)
        save_forest(models[name], run.file(fname))
    run.write_text("forest_cv.csv", _csv(cv_rows, ("model", "n_estimators", "max_depth", "mean_val_auc")))
    metrics = _write_forest_tables(run, rows, models)
    run.record(
        "fit-forest",
        {**cohort.digests(), SEG_CKPT: sha256_file(run.file(SEG_CKPT)), RECUR_CKPT: sha256_file(run.file(RECUR_CKPT))},
        [FOREST, CLINICAL_FOREST, FEATURES, "nodule_scores.csv", "forest_dropped.csv", "forest_cv.csv",
         "table_v.csv", "table_vi.csv", "test_predictions.csv", "recur_cleaning.csv"],
    )
    return {"patients": len(rows), "dropped": len(dropped),
            "proposed_auc": metrics[PROPOSED].auc, "baseline_auc": metrics[BASELINE].auc}


# ---------------------------------------------------------------------------
# predict


@dataclass
class Prediction:
    patient_id: str
    status: str
    probability: float | None = None
    label: int | None = None
    network_score: float | None = None
    out_dir: Path | None = None

    @property
    def localized(self) -> bool:
        return self.status == "ok"


def cmd_predict(cfg: PipelineConfig, run: Run, volume_path, clinical_path, patient_id: str | None = None) -> Prediction:
    """Full chain on one patient; an empty segmentation yields an explicit no-nodule result."""
    cfg = cfg.seeded().validate(need_data=False)
    seg_model = _restore(run.require(SEG_CKPT, "train-seg"))
    recur_model = _restore(run.require(RECUR_CKPT, "train-recur"))
    forest = load_forest(run.require(FOREST, "fit-forest"))
    for p in (volume_path, clinical_path):
        if not Path(p).is_file():
            raise PathError(f"{p} does not exist")
    ct = read_volume(volume_path)
    if not isinstance(ct, CtVolume):
        raise FormatError(f"{volume_path} is not a CT volume")
    patients, nodules = read_clinical_table(clinical_path)
    if patient_id is None:
        if len(patients) != 1:
            raise ContractError(f"{clinical_path} holds {len(patients)} patients; pass --patient")
        patient = patients[0]
    else:
        matches = [p for p in patients if p.patient_id == patient_id]
        if not matches:
            raise ContractError(f"patient {patient_id} not in {clinical_path}")
        patient = matches[0]
    rows = [n for n in nodules if n.patient_id == patient.patient_id]
    if not rows:
        raise ContractError(f"patient {patient.patient_id} has no nodule rows naming a primary slice")
    out = run.file(f"predict/{patient.patient_id}")
    out.mkdir(parents=True, exist_ok=True)
    findings = find_nodules(seg_model, ct, rows, cfg, patient.patient_id)
    pred_mask = np.zeros(ct.header.dims, dtype=np.uint8)
    for loc in findings.localizations:
        pred_mask[loc.z] |= loc.mask
    write_volume(MaskVolume(ct.header.replace(value_kind="mask-uint8", data_path="", slice_positions_mm=None), pred_mask),
                 out / "pred_mask.hdr")
    result = patient_features(patient, findings, recur_model)
    pred = Prediction(patient.patient_id, NO_NODULE, out_dir=out)
    score_rows = []
    if result is not None:
        fv, scores = result
        for nid, roi in findings.rois.items():
            np.save(out / f"roi_{nid}.npy", roi.voxels)
        score_rows = [(nid, repr(float(s))) for nid, s in scores.items()]
        prob = float(predict_proba(forest, fv))
        pred = Prediction(patient.patient_id, "ok", prob, int(prob >= 0.5), fv.network_score, out)
    (out / "scores.csv").write_text(_csv(score_rows, ("nodule_id", "score")))
    (out / "report.csv").write_text(_csv(
        [(pred.patient_id, pred.status, _num(pred.probability), "NA" if pred.label is None else pred.label, _num(pred.network_score))],
        ("patient_id", "status", "probability", "label", "network_score"),
    ))
    return pred


# ---------------------------------------------------------------------------
# evaluate


def seg_table(metrics) -> str:
    return _csv([("Proposed Model", f"{metrics.dice:.4f}", f"{metrics.recall:.4f}", f"{metrics.precision:.4f}")],
                ("Architecture", "Dice Coefficient", "Recall", "Precision"))


def cmd_evaluate(cfg: PipelineConfig, run: Run) -> dict:
    """Test-partition segmentation metrics before/after post-processing; forest tables when present."""
    cfg = cfg.seeded().validate()
    seg_model = _restore(run.require(SEG_CKPT, "train-seg"))
    split = load_seg_split(run)
    if not split.test:
        raise ContractError("segmentation split has an empty test partition")
    cohort = load_cohort(cfg.data_root)
    before, after, truths = [], [], []
    for ref in sorted(split.test, key=lambda r: (r.series_path, r.z)):
        ct = cohort.volume(ref.series_path)
        loc = localize(seg_model, ct, ref.z, cfg)
        before.append((loc.prob >= THRESHOLD).astype(np.uint8))
        after.append(loc.mask)
        truths.append(cohort.truth(ref.series_path).voxels[ref.z])
    pre, post = seg_metrics(before, truths), seg_metrics(after, truths)
    run.write_text("table_ii.csv", seg_table(pre))
    run.write_text("table_iii.csv", seg_table(post))
    outputs = ["table_ii.csv", "table_iii.csv"]
    summary = {"test_slices": len(truths), "dice_before": pre.dice, "dice_after": post.dice}
    if run.file(FEATURES).exists() and run.file(FOREST).exists() and run.file(CLINICAL_FOREST).exists():
        rows = _read_features(run.file(FEATURES).read_text())
        models = {BASELINE: load_forest(run.file(CLINICAL_FOREST)), PROPOSED: load_forest(run.file(FOREST))}
        metrics = _write_forest_tables(run, rows, models)
        outputs += ["table_v.csv", "table_vi.csv", "test_predictions.csv"]
        summary.update(proposed_auc=metrics[PROPOSED].auc, baseline_auc=metrics[BASELINE].auc)
    run.record("evaluate", {**cohort.digests(), SEG_CKPT: sha256_file(run.file(SEG_CKPT))}, outputs)
    return summary
