import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lungrisk.errors import ConfigError, ContractError, ShapeError
from lungrisk.ingest import NoduleRecord
from lungrisk.neuralcore import AugmentationConfig
from lungrisk.segnet import (
    SegNetConfig,
    SegSplit,
    SliceSet,
    build_segnet,
    dice,
    make_split,
    partition_counts,
    seg_metrics,
    segnet_param_count,
    segnet_predict,
    train_segnet,
)
from oracles import set_dice


def toy_slices(n=4, size=16, seed=0):
    """Lung square with a bright disk; the disk is the mask."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:size, :size]
    imgs, masks = [], []
    for _ in range(n):
        img = np.zeros((size, size), np.float32)
        img[2:-2, 2:-2] = rng.uniform(0.05, 0.4, size=(size - 4, size - 4))
        cy, cx = rng.integers(5, size - 5, size=2)
        disk = (yy - cy) ** 2 + (xx - cx) ** 2 <= 4
        img[disk] = 0.95
        imgs.append(img)
        masks.append(disk.astype(np.uint8))
    return SliceSet(np.stack(imgs), np.stack(masks))


class TestArchitecture:
    @pytest.mark.parametrize(
        "cfg",
        [SegNetConfig(), SegNetConfig(input_size=128, widths=(8, 16, 32), bridge=64), SegNetConfig(input_size=16, widths=(4,), bridge=3)],
    )
    def test_param_count_closed_form(self, cfg):
        assert build_segnet(cfg).param_count() == segnet_param_count(cfg)

    def test_output_shape_and_range(self, rng):
        model = build_segnet(SegNetConfig(input_size=16, widths=(2, 4), bridge=4))
        out = model.forward(rng.random((3, 1, 16, 16)))
        assert out.shape == (3, 1, 16, 16)
        assert out.dtype == np.float32
        assert np.all((out > 0) & (out < 1))

    def test_wrong_input(self):
        model = build_segnet(SegNetConfig(input_size=16, widths=(2, 4), bridge=4))
        with pytest.raises(ShapeError, match="16"):
            model.forward(np.zeros((1, 1, 32, 32)))

    @pytest.mark.parametrize(
        "kw", [dict(input_size=18, widths=(2, 4)), dict(widths=(8, 12)), dict(lr=0.0)]
    )
    def test_invalid_config(self, kw):
        with pytest.raises(ConfigError):
            SegNetConfig(**kw).validate()

    def test_prediction_is_lung_gated(self, rng):
        model = build_segnet(SegNetConfig(input_size=16, widths=(2, 4), bridge=4))
        img = rng.random((16, 16)).astype(np.float32)
        img[:, :8] = 0
        prob = segnet_predict(model, img)
        assert prob.shape == (16, 16)
        assert np.all(prob[:, :8] == 0)


class TestDice:
    def test_matches_set_overlap(self, rng):
        for _ in range(1000):
            shape = tuple(rng.integers(1, 12, size=2))
            a = rng.random(shape) < rng.random()
            b = rng.random(shape) < rng.random()
            assert dice(a, b) == set_dice(a, b)

    @given(st.lists(st.booleans(), min_size=1, max_size=40), st.lists(st.booleans(), min_size=1, max_size=40))
    def test_symmetric_and_reflexive(self, xs, ys):
        n = min(len(xs), len(ys))
        a, b = np.array(xs[:n]), np.array(ys[:n])
        assert dice(a, b) == dice(b, a)
        assert dice(a, a) == 1.0
        assert 0.0 <= dice(a, b) <= 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            dice(np.zeros(3), np.zeros(4))

    def test_metrics_pool_pixels(self):
        p = [np.array([1, 1, 0, 0]), np.array([0, 0, 0, 0])]
        t = [np.array([1, 0, 0, 0]), np.array([0, 0, 1, 1])]
        m = seg_metrics(p, t)
        assert m.dice == pytest.approx((2 / 3 + 0) / 2)
        assert m.recall == pytest.approx(1 / 3)
        assert m.precision == pytest.approx(1 / 2)


def nodules(n_patients, per=2):
    return [
        NoduleRecord(f"P{i:02d}", f"P{i:02d}-N{j}", f"v/P{i:02d}.hdr", 8.0, 3 + 4 * j)
        for i in range(n_patients)
        for j in range(per)
    ]


class TestSplit:
    @given(st.integers(0, 200), st.lists(st.integers(0, 10), min_size=2, max_size=4))
    def test_partition_counts(self, n, weights):
        if sum(weights) == 0:
            return
        ratios = [w / sum(weights) for w in weights]
        counts = partition_counts(n, ratios, strict=False)
        assert sum(counts) == n
        for c, r in zip(counts, ratios):
            assert abs(c - r * n) < 1 + 1e-9

    def test_patient_disjoint(self):
        tissue = {f"P{i:02d}": [2, 3, 4, 7] for i in range(10)}
        split = make_split(nodules(10), seed=3, tissue_slices=tissue)
        groups = [set(split.patients[k]) for k in ("train", "val", "test")]
        assert sum(len(g) for g in groups) == 10
        assert not (groups[0] & groups[1]) and not (groups[0] & groups[2]) and not (groups[1] & groups[2])
        assert [len(g) for g in groups] == [6, 2, 2]
        # test keeps primary slices only, train every tissue slice
        assert {r.z for r in split.test} == {3, 7}
        assert len(split.train) == 6 * 4

    def test_deterministic_and_serializable(self):
        a = make_split(nodules(8), seed=5)
        assert a == make_split(nodules(8), seed=5)
        assert SegSplit.from_json(a.to_json()) == a

    def test_too_few_patients(self):
        with pytest.raises(ContractError):
            make_split(nodules(2))


class TestTraining:
    def test_loss_falls_and_dice_rises(self):
        data = toy_slices(4)
        cfg = SegNetConfig(input_size=16, widths=(4, 8), bridge=8, epochs=30, lr=3e-3, augmentation=None, seed=1)
        result = train_segnet(data, None, cfg)
        losses = [l for _, l, _ in result.log]
        assert losses[-1] < 0.5 * losses[0]
        assert max(d for _, _, d in result.log) > 0.5

    def test_restores_best_epoch(self):
        data = toy_slices(2)
        cfg = SegNetConfig(input_size=16, widths=(2, 4), bridge=4, epochs=4, lr=1e-3, augmentation=None, seed=2)
        result = train_segnet(data, data, cfg)
        best = max(result.log, key=lambda r: r[2])
        assert result.best_epoch == best[0]
        probs = segnet_predict(result.model, data.images)
        mean = np.mean([dice(p >= 0.5, t) for p, t in zip(probs, data.masks)])
        assert mean == pytest.approx(best[2])

    def test_same_seed_same_log(self):
        data = toy_slices(3)
        cfg = SegNetConfig(input_size=16, widths=(2, 4), bridge=4, epochs=2, augmentation=AugmentationConfig(), seed=7)
        assert train_segnet(data, None, cfg).log_csv() == train_segnet(data, None, cfg).log_csv()

    def test_empty_training_set(self):
        empty = SliceSet(np.zeros((0, 16, 16), np.float32), np.zeros((0, 16, 16), np.uint8))
        with pytest.raises(ContractError):
            train_segnet(empty, None, SegNetConfig(input_size=16, widths=(2,), bridge=2))
