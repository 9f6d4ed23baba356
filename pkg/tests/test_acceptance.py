"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL (...)`` line and the
session summary repeats them. The two training surrogates (7 and 8) take
roughly 15 and 20 minutes on one CPU core.
"""

import math
import time
from pathlib import Path

import numpy as np

from cleaning_fixture import mismatches, run_cleaning
from conftest import record_criterion
from gradcases import LAYER_CASES, layer_error, network_error
from lungrisk.forest import Confusion, roc_auc, stage_subgroup_metrics
from lungrisk.imgproc import extract_roi, resample_isotropic, select_densest_region
from lungrisk.ingest import make_ct, make_mask
from lungrisk.neuralcore import Conv, Dense, bce, weighted_bce
from lungrisk.pipeline import PhantomSpec, PipelineConfig, parse_config_text
from lungrisk.pipeline import commands as C
from lungrisk.pipeline.cli import main
from lungrisk.pipeline.phantom import PhantomNodule, generate_phantom_dataset, sphere_fraction, sphere_mask
from lungrisk.segnet import SegNetConfig, dice, make_split, segnet_predict, train_segnet
from oracles import densest_oracle, flood_components, naive_conv, naive_dense, pair_auc, set_dice

# fixed 12-patient cohort; expected confusion matrices worked out by hand
STAGES12 = ["IA", "IA", "IB", "IB", "IA", "IIA", "IIB", "IIA", "IIIA", "IIIB", "IV", "IV"]
LABELS12 = [1, 0, 0, 1, 0, 0, 1, 1, 0, 0, 1, 1]
PROBS12 = [0.8, 0.3, 0.6, 0.2, 0.1, 0.7, 0.9, 0.4, 0.2, 0.55, 0.95, 0.5]
EXPECTED12 = {
    "I": Confusion(tp=1, fp=1, tn=2, fn=1),
    "II": Confusion(tp=1, fp=1, tn=0, fn=1),
    "III": Confusion(tp=0, fp=1, tn=1, fn=0),
    "IV": Confusion(tp=2, fp=0, tn=0, fn=0),
}

SEG_PHANTOM = PhantomSpec(dims=(64, 96, 96), spacing=(1.5, 1.0, 1.0), seed=0)
SEG_NET = dict(input_size=64, widths=(16, 32, 64), bridge=128, lr=1e-4)

RECURRENCE_CFG = """
seed = 0
data.n_patients = 120
data.dims = 64,96,96
data.spacing = 1.5,1,1
seg.input_size = 64
seg.widths = 16,32,64
seg.bridge = 128
seg.lr = 1e-4
seg.epochs = 40
seg.slices = primary
recur.filters = 4,8,16,32
recur.dense = 64,32,16,2
recur.epochs = 15
"""

TINY_CFG = """
seed = 3
data.n_patients = 12
data.dims = 32,64,64
data.spacing = 1.5,1,1
data.radius_mm = 3,6
data.diameter_ref = 9
seg.input_size = 32
seg.widths = 4,8,16
seg.bridge = 16
seg.epochs = 2
seg.slices = primary
recur.filters = 2,2,4,4
recur.dense = 8,8,4,2
recur.epochs = 2
forest.n_estimators = 5,10
forest.max_depth = 2,none
forest.folds = 2
"""


def rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def test_criterion_1_kernels():
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst, kinds = 0.0, {"conv2d": 0, "conv3d": 0, "dense": 0}
    for i in range(100):
        kind = ("conv2d", "conv3d", "dense")[i % 3]
        kinds[kind] += 1
        if kind == "dense":
            n_in, n_out, n = (int(v) for v in rng.integers(1, 12, size=3))
            layer = Dense(n_in, n_out, rng=rng, dtype=np.float64)
            layer.params["bias"] = rng.normal(size=n_out)
            x = rng.normal(size=(n, n_in))
            err = rel_err(layer.forward(x), naive_dense(x, layer.params["weight"], layer.params["bias"]))
        else:
            nd = 2 if kind == "conv2d" else 3
            c_in, c_out = (int(v) for v in rng.integers(1, 4, size=2))
            layer = Conv(nd, c_in, c_out, int(rng.choice([1, 3])), int(rng.choice([1, 2])), rng=rng, dtype=np.float64)
            layer.params["bias"] = rng.normal(size=c_out)
            spatial = tuple(int(v) for v in rng.integers(1, 8 if nd == 2 else 6, size=nd))
            x = rng.normal(size=(int(rng.integers(1, 3)), c_in) + spatial)
            y = layer.forward(x)
            ref = naive_conv(x, layer.params["weight"], layer.params["bias"], layer.stride)
            err = rel_err(y, ref) if y.shape == ref.shape else math.inf
        worst = max(worst, err)
    elapsed = time.perf_counter() - start
    ok = worst < 1e-5 and elapsed < 120
    record_criterion(1, ok, f"max rel err {worst:.2e} over {kinds}, {elapsed:.1f}s")
    assert ok


def test_criterion_2_gradients():
    start = time.perf_counter()
    errs = {}
    for name in sorted(LAYER_CASES):
        errs[(name, 64)] = layer_error(name, 64)
        errs[(name, 32)] = layer_error(name, 32)
    for kind in ("segnet", "recurnet"):
        errs[(kind, 64)] = network_error(kind, 64)
        errs[(kind, 32)] = network_error(kind, 32)
    elapsed = time.perf_counter() - start
    worst64 = max(v for (_, b), v in errs.items() if b == 64)
    worst32 = max(v for (_, b), v in errs.items() if b == 32)
    failed = [f"{n}@{b}" for (n, b), v in errs.items() if v >= (1e-6 if b == 64 else 1e-3)]
    ok = not failed and elapsed < 300
    record_criterion(2, ok, f"64-bit max {worst64:.1e}, 32-bit max {worst32:.1e}, {len(errs)} checks, "
                            f"{elapsed:.0f}s, failed {failed}")
    assert ok


def test_criterion_3_loss_and_dice_oracles():
    rng = np.random.default_rng(3)
    bce_gap = 0.0
    for _ in range(200):
        n = int(rng.integers(1, 40))
        h, y = rng.random(n), (rng.random(n) < 0.5).astype(float)
        bce_gap = max(bce_gap, abs(weighted_bce(h, y, 1.0)[0] - bce(h, y)))
    scalar_gap = abs(weighted_bce(np.array([0.5]), np.array([1.0]), 12.0)[0] - 12 * math.log(2))
    exact = reflexive = symmetric = True
    for _ in range(1000):
        shape = tuple(int(v) for v in rng.integers(1, 16, size=2))
        a = rng.random(shape) < rng.random()
        b = rng.random(shape) < rng.random()
        exact &= dice(a, b) == set_dice(a, b)
        symmetric &= dice(a, b) == dice(b, a)
        reflexive &= dice(a, a) == 1.0
    ok = bce_gap <= 1e-9 and scalar_gap <= 1e-9 and exact and reflexive and symmetric
    record_criterion(3, ok, f"w=1 gap {bce_gap:.1e}, 12 ln2 gap {scalar_gap:.1e}, dice exact={exact} "
                            f"reflexive={reflexive} symmetric={symmetric}")
    assert ok


def test_criterion_4_metric_oracles():
    rng = np.random.default_rng(4)
    gap = 0.0
    for i in range(200):
        n = int(rng.integers(2, 60))
        labels = np.arange(n) % 2
        rng.shuffle(labels)
        # every other set is coarsely rounded so ties are exercised
        scores = rng.random(n) if i % 2 else np.round(rng.random(n), 1)
        gap = max(gap, abs(roc_auc(scores, labels) - pair_auc(scores, labels)))
    m = stage_subgroup_metrics(PROBS12, LABELS12, STAGES12)
    groups_ok = all(m.groups[g].confusion == c for g, c in EXPECTED12.items())
    derived_ok = (m.stage_i_accuracy == 3 / 5 and m.stage_i_recall == 1 / 2
                  and m.stage_ii_accuracy == 1 / 3 and m.stage_ii_precision == 1 / 2
                  and m.accuracy == 7 / 12 and m.recall == 4 / 6 and m.precision == 4 / 7)
    ok = gap <= 1e-12 and groups_ok and derived_ok
    record_criterion(4, ok, f"AUC vs pair count max gap {gap:.1e}, subgroup confusions={groups_ok}, "
                            f"derived rates={derived_ok}")
    assert ok


def test_criterion_5_geometry():
    rng = np.random.default_rng(5)
    shapes_ok = 0
    for i in range(1000):
        dims = tuple(int(d) for d in rng.integers(8, 72, size=3))
        vox = np.zeros(dims, np.uint8)
        # half the placements sit on a face, edge or corner
        c = [int(rng.integers(0, d)) for d in dims]
        if i % 2:
            for ax in rng.choice(3, size=int(rng.integers(1, 4)), replace=False):
                c[ax] = 0 if rng.random() < 0.5 else dims[ax] - 1
        vox[tuple(c)] = 1
        roi = extract_roi(make_ct(np.zeros(dims), (1, 1, 1)), make_mask(vox))
        shapes_ok += roi.voxels.shape == (50, 50, 50)

    iso = rng.integers(-1000, 400, size=(9, 10, 11))
    identity_err = float(np.max(np.abs(resample_isotropic(make_ct(iso, (1.0, 1.0, 1.0))).voxels - iso)))

    ramp_err = 0.0
    for spacing in [(2.5, 1.0, 1.0), (1.5, 0.75, 1.25), (3.0, 0.5, 0.5)]:
        dims = (12, 10, 9)
        z, y, x = np.meshgrid(*(np.arange(n) for n in dims), indexing="ij")
        out = resample_isotropic(make_ct(3 * z + 2 * y - x, spacing)).voxels
        coords = [(np.arange(m) + 0.5) / s - 0.5 for m, s in zip(out.shape, spacing)]
        inside = np.ix_(*[(c >= 0) & (c <= n - 1) for c, n in zip(coords, dims)])
        cz, cy, cx = np.meshgrid(*coords, indexing="ij")
        expected = 3 * cz + 2 * cy - cx
        ramp_err = max(ramp_err, float(np.max(np.abs(out[inside] - expected[inside])) / np.abs(expected).max()))

    sphere_err = 0.0
    for radius, spacing in [(3.0, (1, 1, 1)), (5.0, (1, 1, 1)), (8.0, (1, 1, 1)), (5.0, (1.5, 0.8, 0.8))]:
        spec = PhantomSpec(dims=(40, 40, 40), spacing=spacing)
        center = tuple(20 * s + 0.3 for s in spacing)
        _, frac = sphere_fraction(spec, PhantomNodule(center, radius))
        vol = sphere_mask(frac).sum() * math.prod(spacing)
        sphere_err = max(sphere_err, abs(vol - 4 / 3 * math.pi * radius**3) / (4 / 3 * math.pi * radius**3))

    ok = shapes_ok == 1000 and identity_err <= 1e-6 and ramp_err <= 1e-5 and sphere_err < 0.02
    record_criterion(5, ok, f"ROI 50^3 {shapes_ok}/1000, identity {identity_err:.1e}, ramp {ramp_err:.1e}, "
                            f"sphere volume {100 * sphere_err:.2f}%")
    assert ok


def test_criterion_6_post_processing():
    rng = np.random.default_rng(6)
    single = agree = 0
    for _ in range(1000):
        shape = tuple(int(v) for v in rng.integers(4, 24, size=2))
        prob = rng.random(shape) ** rng.uniform(0.3, 3.0)
        out = select_densest_region(prob)
        single += len(flood_components(out)) <= 1
        agree += bool(np.array_equal(out, densest_oracle(prob)))
    ok = single == 1000 and agree == 1000
    record_criterion(6, ok, f"<=1 component {single}/1000, oracle agreement {agree}/1000")
    assert ok


def _slice_mean_dice(model, data, post=False):
    probs = segnet_predict(model, data.images)
    picks = [select_densest_region(p) if post else p >= 0.5 for p in probs]
    return float(np.mean([dice(m, t) for m, t in zip(picks, data.masks)]))


def test_criterion_7_segmentation_surrogate(tmp_path):
    root = tmp_path / "phantom"
    generate_phantom_dataset(SEG_PHANTOM, 30, root)
    cfg = PipelineConfig(data_root=str(root), phantom=SEG_PHANTOM, seg=SegNetConfig(**SEG_NET)).seeded()
    cohort = C.load_cohort(root)
    kept, _ = C._seg_cohort(cohort)

    # overfit eight primary slices without augmentation; at 1e-4 this takes several hundred epochs
    few = make_split(kept, (0.7, 0.15, 0.15), 0, None)
    train8 = C.slice_set(cohort, few.train[:8], cfg)
    start = time.perf_counter()
    overfit = SegNetConfig(**{**SEG_NET, "lr": 3e-4}, epochs=150, augmentation=None, seed=0)
    result = train_segnet(train8, None, overfit)
    overfit_s = time.perf_counter() - start
    train_dice = _slice_mean_dice(result.model, train8)

    # 200 training slices, held-out dice on the test patients' primary slices
    split = make_split(kept, (0.7, 0.15, 0.15), 0, C._tissue_slices(cohort, kept))
    pick = np.random.default_rng(0).choice(len(split.train), 200, replace=False)
    train = C.slice_set(cohort, [split.train[i] for i in sorted(pick)], cfg)
    val = C.slice_set(cohort, split.val, cfg)
    test = C.slice_set(cohort, split.test, cfg)
    start = time.perf_counter()
    result = train_segnet(train, val, SegNetConfig(**SEG_NET, epochs=40, seed=0))
    train_s = time.perf_counter() - start
    pre, post = _slice_mean_dice(result.model, test), _slice_mean_dice(result.model, test, post=True)

    ok = train_dice >= 0.95 and post >= 0.80 and train_s < 1800
    record_criterion(7, ok, f"8-slice train dice {train_dice:.3f} ({overfit_s:.0f}s); 200-slice held-out dice "
                            f"{post:.3f} post-processed / {pre:.3f} raw on {len(test)} slices, {train_s:.0f}s")
    assert ok


def test_criterion_8_recurrence_surrogate(tmp_path):
    cfg = parse_config_text(RECURRENCE_CFG + f"data.root = {tmp_path / 'data'}\n")
    start = time.perf_counter()
    C.cmd_gen_phantom(cfg)
    (tmp_path / "run").mkdir()
    run = C.open_run(cfg, tmp_path / "run")
    C.cmd_train_seg(cfg, run)
    C.cmd_train_recur(cfg, run)
    out = C.cmd_fit_forest(cfg, run)
    elapsed = time.perf_counter() - start
    proposed, baseline = out["proposed_auc"], out["baseline_auc"]
    ok = proposed is not None and baseline is not None and proposed >= 0.85 and proposed > baseline and elapsed < 3600
    record_criterion(8, ok, f"fused forest AUC {proposed:.3f} vs clinical-only {baseline:.3f}, "
                            f"{out['patients']} patients scored, {elapsed / 60:.1f} min")
    assert ok


METRIC_FILES = ("seg_log.csv", "recur_log.csv", "features.csv", "nodule_scores.csv", "forest_cv.csv",
                "table_ii.csv", "table_iii.csv", "table_v.csv", "table_vi.csv", "test_predictions.csv",
                "seg_split.json", "recur_split.json", "manifest.json")


def _chain(root: Path, data: Path, name: str):
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY_CFG + f"data.root = {data}\n")
    run = root / name
    run.mkdir()
    base = ["--config", str(cfg)]
    for verb in ("train-seg", "train-recur", "fit-forest", "evaluate"):
        assert main([verb, *base, "--run-dir", str(run)]) == 0, verb
    pid = sorted(p.name[:-4] for p in (data / "volumes").glob("*.hdr"))[0]
    assert main(["predict", *base, "--run-dir", str(run), "--volume", str(data / "volumes" / f"{pid}.hdr"),
                 "--clinical", str(data / "clinical.csv"), "--patient", pid]) == 0
    return run, pid


def test_criterion_9_determinism(tmp_path, capsys):
    for d in ("a", "b"):
        (tmp_path / d).mkdir()
        (tmp_path / d / "tiny.cfg").write_text(TINY_CFG + f"data.root = {tmp_path / d / 'data'}\n")
        assert main(["gen-phantom", "--config", str(tmp_path / d / "tiny.cfg")]) == 0
    same_data = C.sha256_tree(tmp_path / "a" / "data") == C.sha256_tree(tmp_path / "b" / "data")

    data = tmp_path / "a" / "data"
    runs = [_chain(tmp_path, data, name) for name in ("r1", "r2")]
    capsys.readouterr()
    differ = []
    names = list(METRIC_FILES) + [f"predict/{runs[0][1]}/report.csv"]
    for name in names:
        if (runs[0][0] / name).read_bytes() != (runs[1][0] / name).read_bytes():
            differ.append(name)
    ok = same_data and not differ
    record_criterion(9, ok, f"phantom identical={same_data}, {len(names) - len(differ)}/{len(names)} "
                            f"metric files byte-identical, differing {differ}")
    assert ok


def test_criterion_10_cleaning_fixture():
    recur, seg, labels = run_cleaning()
    problems = mismatches(recur, seg, labels)
    kept = len(recur.kept)
    ok = not problems
    record_criterion(10, ok, f"{kept} recurrence-cohort records kept, {len(recur.excluded)} excluded, "
                             f"{len(labels)} labels; mismatches {problems[:3]}")
    assert ok
