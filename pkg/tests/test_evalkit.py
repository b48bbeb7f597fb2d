import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from crackseg import evalkit
from crackseg.evalkit import ConfusionCounts

import oracles


def _pair(rng, h=4, w=4, quantized=False):
    prob = rng.integers(0, 101, (h, w)) / 100 if quantized else rng.random((h, w))
    gt = (rng.random((h, w)) < 0.3).astype(np.uint8)
    return prob, gt


class TestBinarize:
    def test_half_plane_at_operating_threshold(self):
        assert evalkit.binarize(np.full((3, 3), 0.5), 0.48).all()

    def test_gt_recovered_from_binary_probabilities(self, rng):
        gt = (rng.random((6, 6)) < 0.4).astype(np.uint8)
        for m in (0.01, 0.48, 0.99):
            np.testing.assert_array_equal(evalkit.binarize(gt.astype(float), m), gt)

    @pytest.mark.parametrize("m", [0.0, 1.0, -0.1])
    def test_threshold_outside_open_interval(self, m):
        with pytest.raises(ValueError):
            evalkit.binarize(np.zeros((2, 2)), m)

    def test_monotone_in_threshold(self, rng):
        prob = rng.random((8, 8))
        grid = evalkit.threshold_grid()
        masks = [evalkit.binarize(prob, m) for m in grid]
        for lo, hi in zip(masks, masks[1:]):
            assert not np.any(hi > lo)


class TestConfusion:
    def test_identical(self, rng):
        gt = (rng.random((5, 5)) < 0.5)
        c = evalkit.confusion(gt, gt)
        assert c.fp == c.fn == 0

    def test_all_crack_prediction(self):
        gt = np.array([[1, 0], [0, 0]])
        assert evalkit.confusion(np.ones((2, 2)), gt) == ConfusionCounts(tp=1, tn=0, fp=3, fn=0)

    def test_complement(self, rng):
        gt = (rng.random((5, 5)) < 0.5)
        c = evalkit.confusion(~gt, gt)
        assert c.tp == c.tn == 0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            evalkit.confusion(np.zeros((2, 2)), np.zeros((2, 3)))

    @given(arrays(np.bool_, (5, 7)), arrays(np.bool_, (5, 7)))
    def test_counts_sum_to_pixels(self, a, b):
        assert evalkit.confusion(a, b).total == 35


class TestRatios:
    def test_hand_example(self):
        p, r, f = evalkit.precision_recall_f(ConfusionCounts(tp=1, tn=0, fp=3, fn=0))
        assert (p, r) == (0.25, 1.0)
        assert f == pytest.approx(0.4, abs=1e-15)

    def test_empty_empty_is_perfect(self):
        assert evalkit.precision_recall_f(ConfusionCounts(0, 10, 0, 0)) == (1.0, 1.0, 1.0)

    def test_zero_numerator(self):
        assert evalkit.precision_recall_f(ConfusionCounts(tp=0, tn=3, fp=2, fn=4)) == (0.0, 0.0, 0.0)

    def test_accuracy_miou_hand_example(self):
        a, miou = evalkit.accuracy_miou(ConfusionCounts(tp=1, tn=0, fp=3, fn=0))
        assert a == 0.25
        assert miou == 0.125

    def test_perfect_and_all_background(self):
        assert evalkit.accuracy_miou(ConfusionCounts(5, 11, 0, 0)) == (1.0, 1.0)
        assert evalkit.accuracy_miou(ConfusionCounts(0, 16, 0, 0)) == (1.0, 1.0)

    def test_empty_total(self):
        with pytest.raises(ValueError):
            evalkit.accuracy_miou(ConfusionCounts(0, 0, 0, 0))


class TestSweeps:
    def test_grid(self):
        grid = evalkit.threshold_grid()
        assert len(grid) == 99
        assert list(grid) == oracles.GRID

    def test_perfect_single_image(self, rng):
        gt = (rng.random((6, 6)) < 0.4).astype(np.uint8)
        ds, bp, br, m, sweep = evalkit.dataset_best_f([gt.astype(float)], [gt])
        assert (ds, bp, br, m) == (1.0, 1.0, 1.0, 0.01)
        assert all(row.f == 1.0 for row in sweep)

    @pytest.mark.parametrize("quantized", [False, True])
    def test_dataset_best_f_matches_oracle(self, rng, quantized):
        for _ in range(10):
            prob, gt = _pair(rng, quantized=quantized)
            ds, bp, br, m, sweep = evalkit.dataset_best_f([prob], [gt])
            ref = oracles.report([prob.tolist()], [gt.tolist()])
            assert (ds, bp, br, m) == (ref["ds"], ref["bp"], ref["br"], ref["best_threshold"])
            assert [(r.m, r.precision, r.recall, r.f) for r in sweep] == [s[:4] for s in ref["sweep"]]

    def test_image_best_f_two_images(self):
        # image 1: best F 0.4 (one crack pixel, everything predicted crack); image 2: perfect
        gt1 = np.array([[1, 0], [0, 0]])
        prob1 = np.full((2, 2), 0.995)
        gt2 = np.array([[1, 0], [0, 1]])
        prob2 = gt2.astype(float)
        assert evalkit.image_best_f([prob1, prob2], [gt1, gt2]) == pytest.approx(0.7, abs=1e-15)

    def test_misaligned(self):
        with pytest.raises(ValueError):
            evalkit.dataset_best_f([np.zeros((2, 2))], [])
        with pytest.raises(ValueError):
            evalkit.image_best_f([np.zeros((2, 2)), np.zeros((2, 2))], [np.zeros((2, 2))])

    def test_max_properties(self, rng):
        probs, gts = zip(*(_pair(rng, 6, 6) for _ in range(4)))
        ds, _, _, _, sweep = evalkit.dataset_best_f(probs, gts)
        assert all(ds >= row.f for row in sweep)
        is_score = evalkit.image_best_f(probs, gts)
        for m in evalkit.threshold_grid():
            fixed = np.mean([evalkit.precision_recall_f(evalkit.confusion(p >= m, g))[2] for p, g in zip(probs, gts)])
            assert is_score >= fixed - 1e-15

    def test_permutation_invariance(self, rng):
        probs, gts = zip(*(_pair(rng, 5, 5) for _ in range(5)))
        a = evalkit.evaluate_dataset(list(probs), list(gts))
        order = rng.permutation(5)
        b = evalkit.evaluate_dataset([probs[i] for i in order], [gts[i] for i in order])
        assert (a.accuracy, a.miou, a.ds, a.bp, a.br, a.best_threshold) == \
            (b.accuracy, b.miou, b.ds, b.bp, b.br, b.best_threshold)
        assert a.is_score == pytest.approx(b.is_score, abs=1e-15)


class TestGuidedFilter:
    def test_radius_zero_identity(self, rng):
        prob, guide = rng.random((7, 9)), rng.random((7, 9))
        np.testing.assert_array_equal(evalkit.guided_filter(prob, guide, radius=0, eps=1e-3), prob)
        np.testing.assert_array_equal(evalkit.guided_filter(prob, guide, radius=0, eps=0.0), prob)

    @pytest.mark.parametrize("radius", [1, 2, 4])
    def test_self_guided_identity(self, rng, radius):
        prob = rng.random((12, 10))
        prob[:4, :4] = 0.3  # flat region
        out = evalkit.guided_filter(prob, prob, radius=radius, eps=0.0)
        np.testing.assert_allclose(out, prob, atol=1e-6, rtol=0)

    def test_constant_guide_is_double_box(self, rng):
        prob = rng.random((6, 6))
        guide = np.full((6, 6), 0.37)
        once = oracles.box_mean_direct(prob.tolist(), 1)
        twice = np.array(oracles.box_mean_direct(once, 1))
        np.testing.assert_allclose(evalkit.guided_filter(prob, guide, radius=1, eps=1e-3), twice, atol=1e-9, rtol=0)

    def test_large_eps_limit(self, rng):
        prob, guide = rng.random((8, 8)), rng.random((8, 8))
        twice = np.array(oracles.box_mean_direct(oracles.box_mean_direct(prob.tolist(), 2), 2))
        np.testing.assert_allclose(evalkit.guided_filter(prob, guide, radius=2, eps=1e9), twice, atol=1e-8)

    def test_output_clamped(self, rng):
        prob = (rng.random((16, 16)) > 0.5).astype(float)
        guide = rng.random((16, 16))
        out = evalkit.guided_filter(prob, guide, radius=2, eps=1e-6)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_errors(self):
        with pytest.raises(ValueError):
            evalkit.guided_filter(np.zeros((3, 3)), np.zeros((3, 4)))
        with pytest.raises(ValueError):
            evalkit.guided_filter(np.zeros((3, 3)), np.zeros((3, 3)), radius=-1)
        with pytest.raises(ValueError):
            evalkit.guided_filter(np.zeros((3, 3)), np.zeros((3, 3)), eps=-1.0)


class TestEvaluateDataset:
    def test_perfect(self, rng):
        gts = [(rng.random((8, 8)) < 0.3).astype(np.uint8) for _ in range(3)]
        r = evalkit.evaluate_dataset([g.astype(float) for g in gts], gts)
        assert (r.accuracy, r.miou, r.ds, r.is_score, r.bp, r.br) == (1.0,) * 6

    def test_matches_oracle(self, rng):
        probs, gts = zip(*(_pair(rng, 5, 6) for _ in range(3)))
        r = evalkit.evaluate_dataset(list(probs), list(gts))
        ref = oracles.report([p.tolist() for p in probs], [g.tolist() for g in gts])
        for key in ("accuracy", "miou", "ds", "bp", "br", "best_threshold"):
            assert getattr(r, key) == ref[key], key
        assert r.is_score == pytest.approx(ref["is_score"], abs=1e-12)

    def test_guided_filter_changes_noisy_report(self, rng):
        gts, probs, guides = [], [], []
        for _ in range(3):
            gt = np.zeros((32, 32), np.uint8)
            gt[:, 14:18] = 1
            noisy = np.clip(gt * 0.7 + 0.15 + rng.normal(0, 0.25, gt.shape), 0, 1)
            gts.append(gt)
            probs.append(noisy)
            guides.append(gt * 0.8 + 0.1)
        plain = evalkit.evaluate_dataset(probs, gts)
        refined = evalkit.evaluate_dataset(probs, gts, guides=guides, gf_params={"radius": 2, "eps": 1e-2})
        assert refined.guided_filter == {"radius": 2, "eps": 1e-2}
        assert refined.ds > plain.ds
        assert refined.accuracy != plain.accuracy

    def test_report_json_and_csv(self, rng, tmp_path):
        probs, gts = zip(*(_pair(rng, 5, 5) for _ in range(2)))
        r = evalkit.evaluate_dataset(list(probs), list(gts))
        r.write_json(tmp_path / "r.json")
        r.write_sweep_csv(tmp_path / "s.csv")
        data = json.loads((tmp_path / "r.json").read_text())
        assert data["schema"] == evalkit.REPORT_SCHEMA
        assert data["ds"] == max(row["f"] for row in data["sweep"])
        lines = (tmp_path / "s.csv").read_text().splitlines()
        assert lines[0] == "m,precision,recall,f" and len(lines) == 100
        back = evalkit.MetricReport.from_json((tmp_path / "r.json").read_text())
        assert back == r

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 4), st.integers(0, 2**32 - 1))
    def test_scores_are_fractions(self, n, seed):
        rng = np.random.default_rng(seed)
        probs, gts = zip(*(_pair(rng, 3, 4) for _ in range(n)))
        r = evalkit.evaluate_dataset(list(probs), list(gts))
        for v in (r.accuracy, r.miou, r.ds, r.is_score, r.bp, r.br):
            assert 0.0 <= v <= 1.0
        assert r.ds == max(row.f for row in r.sweep)
        best = [row for row in r.sweep if row.m == r.best_threshold][0]
        assert (best.precision, best.recall) == (r.bp, r.br)
