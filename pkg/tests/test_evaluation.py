import csv
import json

import numpy as np
import pytest
import torch

from conftest import tiny_backbone
from stssl.dataset import GeoTemporal, SyntheticWorldConfig, build_world, render_synthetic
from stssl.evaluation import (average_precision, evaluate, make_probe_grid, mean_average_precision,
                              ood_metadata_eval, predict_logits, prior_probe, pseudo_stats, sample_ood_locations)
from stssl.model import build_model
from stssl.ssl_losses import PseudoBatch, fixmatch_pseudo
from stssl.train import Ablations, TrainConfig, run_training


def _brute_force_ap(scores, targets) -> float | None:
    """O(n^2) AP: the rank of a sample counts everything scored higher, ties going to the lower index."""
    n = len(scores)
    rank = [1 + sum(1 for j in range(n) if scores[j] > scores[i] or (scores[j] == scores[i] and j < i))
            for i in range(n)]
    pos = [i for i in range(n) if targets[i]]
    if not pos:
        return None
    precisions = [sum(1 for j in pos if rank[j] <= rank[i]) / rank[i] for i in pos]
    return sum(precisions) / len(precisions)


class TestAveragePrecision:
    def test_hand_example(self):
        assert average_precision(np.array([0.9, 0.8, 0.7]), np.array([1, 0, 1])) == pytest.approx(
            (1 / 1 + 2 / 3) / 2, abs=1e-12)

    def test_perfect_ranking(self):
        rng = np.random.default_rng(0)
        targets = (rng.random((40, 5)) < 0.3).astype(int)
        targets[0] = 1
        scores = targets + rng.uniform(0, 0.5, targets.shape)
        m, per_class = mean_average_precision(scores, targets)
        assert m == 1.0 and all(ap == 1.0 for ap in per_class)

    def test_ties_resolved_by_index(self):
        # equal scores: earlier sample ranks first, so the positive in front gives AP 1
        assert average_precision(np.zeros(3), np.array([1, 0, 0])) == 1.0
        assert average_precision(np.zeros(3), np.array([0, 0, 1])) == pytest.approx(1 / 3)

    def test_random_matches_brute_force(self):
        rng = np.random.default_rng(1)
        scores = rng.normal(size=(50, 5))
        targets = rng.random((50, 5)) < 0.4
        m, per_class = mean_average_precision(scores, targets)
        ref = [_brute_force_ap(scores[:, k], targets[:, k]) for k in range(5)]
        np.testing.assert_allclose(per_class, ref, atol=1e-6)
        assert m == pytest.approx(np.mean(ref), abs=1e-6)

    def test_oracle_over_100_random_instances(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            n, k = int(rng.integers(1, 201)), int(rng.integers(1, 11))
            # coarse scores make ties common
            scores = np.round(rng.random((n, k)), 1)
            targets = rng.random((n, k)) < rng.uniform(0.05, 0.9)
            ref = [_brute_force_ap(scores[:, c], targets[:, c]) for c in range(k)]
            valid = [r for r in ref if r is not None]
            if not valid:
                with pytest.raises(ValueError):
                    mean_average_precision(scores, targets)
                continue
            m, per_class = mean_average_precision(scores, targets)
            assert [p is None for p in per_class] == [r is None for r in ref]
            assert m == pytest.approx(np.mean(valid), abs=1e-6)

    def test_empty_classes_dropped_from_mean(self):
        scores = np.array([[0.9, 0.1], [0.2, 0.8]])
        targets = np.array([[1, 0], [0, 0]])
        m, per_class = mean_average_precision(scores, targets)
        assert per_class[1] is None and m == 1.0

    def test_errors(self):
        with pytest.raises(ValueError):
            mean_average_precision(np.zeros((3, 2)), np.zeros((3, 2)))
        with pytest.raises(ValueError):
            average_precision(np.array([np.nan, 0.0]), np.array([1, 0]))
        with pytest.raises(ValueError):
            mean_average_precision(np.zeros((3, 2)), np.zeros((3, 3)))


class TestPseudoStats:
    def test_empty_mask(self):
        pb = PseudoBatch(torch.tensor([0, 1, 2]), torch.zeros(3))
        assert pseudo_stats(pb, torch.tensor([0, 1, 2])) == (None, 0.0)

    def test_perfect(self):
        pb = PseudoBatch(torch.tensor([0, 1, 2]), torch.ones(3))
        assert pseudo_stats(pb, torch.tensor([0, 1, 2])) == (1.0, 1.0)

    def test_mixed_ten_slots(self):
        targets = torch.tensor([0, 1, 2, 3, 0, 1, 2, 3, 0, 1])
        truth = torch.tensor([0, 1, 0, 3, 1, 1, 2, 0, 0, 2])
        weights = torch.tensor([1, 1, 1, 0, 1, 0, 1, 1, 0, 0], dtype=torch.float32)
        # passing slots 0,1,2,4,6,7 -> correct at 0,1,6
        quality, quantity = pseudo_stats(PseudoBatch(targets, weights), truth)
        assert quantity == pytest.approx(6 / 10)
        assert quality == pytest.approx(3 / 6)

    def test_multilabel_slots(self):
        targets = torch.tensor([[1, 0], [0, 1]])
        weights = torch.tensor([[1.0, 1.0], [0.0, 1.0]])
        truth = torch.tensor([[1, 1], [0, 1]])
        assert pseudo_stats(PseudoBatch(targets, weights), truth) == (pytest.approx(2 / 3), pytest.approx(3 / 4))

    def test_bounds_and_monotone_in_threshold(self):
        logits = torch.randn(256, 6, generator=torch.Generator().manual_seed(0)) * 2
        truth = torch.randint(0, 6, (256,), generator=torch.Generator().manual_seed(1))
        quantities = []
        for tau in np.linspace(0.55, 1.0, 10):
            quality, quantity = pseudo_stats(fixmatch_pseudo(logits, float(tau)), truth)
            assert 0.0 <= quantity <= 1.0
            assert quality is None or 0.0 <= quality <= 1.0
            quantities.append(quantity)
        assert all(a >= b for a, b in zip(quantities, quantities[1:]))


class TestEvaluate:
    def test_batch_size_independent(self, small_dataset):
        model = build_model(tiny_backbone("teacher"), seed=1)
        a = evaluate(model, small_dataset, batch_size=1)
        b = evaluate(model, small_dataset, batch_size=32)
        assert a.mAP == pytest.approx(b.mAP, abs=1e-5)
        assert a.accuracy == b.accuracy

    def test_pure_function(self, small_dataset):
        model = build_model(tiny_backbone("student"), seed=2)
        model.train()
        a, b = evaluate(model, small_dataset), evaluate(model, small_dataset)
        assert a == b
        assert model.training  # mode restored

    def test_report_bounds(self, small_dataset):
        r = evaluate(build_model(tiny_backbone("student"), seed=3), small_dataset)
        assert 0 <= r.mAP <= 1 and 0 <= r.accuracy <= 1
        assert r.mAP == pytest.approx(np.mean([ap for ap in r.per_class_ap if ap is not None]))

    def test_label_space_mismatch(self, small_dataset):
        with pytest.raises(ValueError):
            evaluate(build_model(tiny_backbone("student", num_classes=5)), small_dataset)
        with pytest.raises(ValueError, match="px"):
            predict_logits(build_model(tiny_backbone("student", image_size=12)), small_dataset)

    def test_memorizing_model_reaches_ceiling(self, small_dataset):
        cfg = TrainConfig(teacher=tiny_backbone("teacher"), student=tiny_backbone("student"), mode="supervised",
                          n_l=16, n_u=4, total_steps=400, base_lr=1e-2, log_interval=100, seed=0)
        ids = small_dataset.ids[:16]
        state = run_training(cfg, small_dataset, ids, small_dataset.ids[16:]).state
        report = evaluate(state.models["student"], small_dataset.subset(np.arange(16)))
        assert report.accuracy >= 0.95


class TestOOD:
    def test_student_bitwise_invariant_and_identity_substitution(self, small_dataset):
        teacher = build_model(tiny_backbone("teacher"), seed=4)
        student = build_model(tiny_backbone("student"), seed=5)
        subs = sample_ood_locations((-50, 50), (-100, 100), n=5, seed=0)
        rep = ood_metadata_eval(teacher, student, small_dataset, subs)
        assert rep.student_invariant
        assert all(s == rep.student_baseline for s in rep.student_scores)
        assert rep.student_baseline == evaluate(student, small_dataset).accuracy
        assert len(rep.teacher_scores) == 5
        assert rep.teacher_std == pytest.approx(np.std(rep.teacher_scores, ddof=1))

        # overriding every sample with its own metadata changes nothing
        one = small_dataset.subset(np.arange(1))
        m = one.meta_array()[0]
        same = ood_metadata_eval(teacher, student, one, [GeoTemporal(float(m[0]), float(m[1]), float(m[2]))],
                                 component="both")
        assert same.teacher_scores == [same.teacher_baseline]

    def test_metadata_model_as_student_is_rejected(self, small_dataset):
        teacher = build_model(tiny_backbone("teacher"), seed=4)
        subs = [GeoTemporal(80.0, 170.0), GeoTemporal(-80.0, -170.0)]
        with pytest.raises(AssertionError):
            ood_metadata_eval(teacher, teacher, small_dataset, subs)

    def test_errors(self, small_dataset):
        t, s = build_model(tiny_backbone("teacher")), build_model(tiny_backbone("student"))
        with pytest.raises(ValueError):
            ood_metadata_eval(t, s, small_dataset, [])
        with pytest.raises(ValueError):
            ood_metadata_eval(t, s, small_dataset, [GeoTemporal(0, 0)], component="altitude")

    def test_sampled_locations_outside_box(self):
        for g in sample_ood_locations((-50, 50), (-100, 100), n=20, margin=5, seed=3):
            assert not (-55 <= g.latitude <= 55 and -105 <= g.longitude <= 105)

    def test_report_rows(self, small_dataset):
        rep = ood_metadata_eval(build_model(tiny_backbone("teacher")), build_model(tiny_backbone("student")),
                                small_dataset, [GeoTemporal(85.0, 0.0), GeoTemporal(-85.0, 0.0)])
        rows = rep.rows()
        assert [r["model"] for r in rows] == ["student", "teacher", "teacher", "student"]
        assert rows[3]["std"] == 0.0
        json.dumps(rep.to_dict())


@pytest.fixture(scope="module")
def locked_teacher():
    """Teacher trained on a two-class world where class 0 only occurs in region 0.

    The two classes look identical in images, so only metadata separates them.
    """
    cfg = SyntheticWorldConfig(samples_total=600, num_classes=2, num_regions=4, image_size=8, seed=5,
                               spatial_dependence_strength=1.0, locked_class=0, locked_region=0,
                               pair_frequency_gap=0.0)
    world = build_world(cfg)
    ds = render_synthetic(cfg, "train", world).to_dataset(world)
    tc = TrainConfig(teacher=tiny_backbone("teacher", num_classes=2), student=tiny_backbone("student", num_classes=2),
                     n_l=32, n_u=8, total_steps=1500, base_lr=1e-2, lambda_u=0.0,
                     ablations=Ablations(single_model=True), log_interval=500, seed=0)
    state = run_training(tc, ds, ds.ids, ds.ids).state
    return cfg, world, state.ema_model("teacher")


class TestPriorProbe:
    def test_default_grid_shape(self):
        g = make_probe_grid((-50, 50), (-100, 100))
        assert len(g.points) == 64 * 64 + 24
        space = g.points[np.array(g.kind) == "space"]
        assert space[:, 0].min() == -90 and space[:, 0].max() == 90  # clipped at the poles
        assert space[:, 1].min() == -180 and space[:, 1].max() == 180
        g = make_probe_grid((0, 10), (0, 20), margin=0.5)
        space = g.points[np.array(g.kind) == "space"]
        assert (space[:, 0].min(), space[:, 0].max()) == (-5, 15)
        assert (space[:, 1].min(), space[:, 1].max()) == (-10, 30)

    def test_zero_head_gives_flat_surface(self):
        model = build_model(tiny_backbone("teacher"), seed=0)
        with torch.no_grad():
            model.head.weight.zero_()
            model.head.bias.zero_()
        g = make_probe_grid((-50, 50), (-100, 100), n_lat=8, n_lon=8, n_days=6)
        res = prior_probe(model, g)
        np.testing.assert_allclose(res.confidences, 0.25, atol=1e-7)
        ml = build_model(tiny_backbone("teacher", task_mode="multi-label"), seed=0)
        with torch.no_grad():
            ml.head.weight.zero_()
            ml.head.bias.zero_()
        np.testing.assert_allclose(prior_probe(ml, g).confidences, 0.5, atol=1e-7)

    def test_deterministic(self):
        model = build_model(tiny_backbone("teacher"), seed=1)
        g = make_probe_grid((-50, 50), (-100, 100), n_lat=8, n_lon=8)
        np.testing.assert_array_equal(prior_probe(model, g).confidences, prior_probe(model, g).confidences)

    def test_requires_metadata_model(self):
        with pytest.raises(ValueError):
            prior_probe(build_model(tiny_backbone("student")), make_probe_grid((0, 1), (0, 1), n_lat=2, n_lon=2))

    def test_csv_and_sidecar(self, tmp_path):
        model = build_model(tiny_backbone("teacher"), seed=1)
        g = make_probe_grid((-50, 50), (-100, 100), n_lat=4, n_lon=4, n_days=3, day=None)
        res = prior_probe(model, g, model_id="m1")
        path = res.to_csv(tmp_path / "probe.csv", config_hash="abc123")
        with path.open() as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 16 + 3
        assert rows[0]["day_of_year"] == "" and rows[-1]["kind"] == "time"
        np.testing.assert_array_equal([float(r["p_2"]) for r in rows], res.confidences[:, 2])
        side = json.loads(path.with_suffix(".json").read_text())
        assert side == {"model_id": "m1", "config_hash": "abc123", "n_lat": 4, "n_lon": 4, "n_days": 3}

    def test_locked_class_region_margin(self, locked_teacher):
        cfg, world, teacher = locked_teacher
        g = make_probe_grid(cfg.lat_range, cfg.lon_range, margin=0.0, n_lat=16, n_lon=16)
        res = prior_probe(teacher, g)
        space = np.array(g.kind) == "space"
        region = world.region_of(g.points[space, 0], g.points[space, 1])
        conf = res.confidences[space, 0]
        assert conf[region == 0].mean() - conf[region != 0].mean() >= 0.2
