import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cpn.evaluation import (
    PAPER_SCALES, best_beta_sweep, cam_to_mask, format_report, is_unimodal_or_flat, miou, multiscale_cam,
    renormalize, single_scale_cam, write_report,
)
from cpn.network import CPNModel


@pytest.fixture(scope="module")
def model():
    return CPNModel(3, seed=3)


def iou_loop(preds, gts, c):
    inter = union = 0
    for p, g in zip(preds, gts):
        for a, b in zip(p.ravel(), g.ravel()):
            inter += a == c and b == c
            union += a == c or b == c
    return inter / union if union else None


class TestMiou:
    def test_hand_case(self):
        rep = miou([np.array([0, 1, 0, 0])], [np.array([0, 1, 1, 0])], 2)
        assert rep.per_class[0] == pytest.approx(2 / 3)
        assert rep.per_class[1] == pytest.approx(1 / 2)
        assert rep.miou == pytest.approx(7 / 12)

    def test_identity(self, rng):
        m = rng.integers(0, 4, size=(8, 8))
        rep = miou([m], [m], 4)
        assert rep.miou == 1 and np.all(rep.per_class == 1)

    def test_disjoint_class(self):
        rep = miou([np.array([1, 0])], [np.array([0, 1])], 2)
        assert rep.per_class[1] == 0

    def test_undefined_excluded(self):
        rep = miou([np.array([0, 1])], [np.array([0, 1])], 3)
        assert np.isnan(rep.per_class[2]) and rep.miou == 1

    def test_extent_mismatch(self):
        with pytest.raises(ValueError, match="extent"):
            miou([np.zeros((2, 2), int)], [np.zeros((2, 3), int)], 2)

    def test_loop_oracle_and_invariants(self, rng):
        preds = [rng.integers(0, 4, size=(5, 6)) for _ in range(4)]
        gts = [rng.integers(0, 4, size=(5, 6)) for _ in range(4)]
        rep = miou(preds, gts, 4)
        for c in range(4):
            assert rep.per_class[c] == pytest.approx(iou_loop(preds, gts, c), abs=1e-12)
        order = [2, 0, 3, 1]
        perm = miou([preds[i] for i in order], [gts[i] for i in order], 4)
        np.testing.assert_array_equal(perm.per_class, rep.per_class)
        assert np.mean(np.r_[rep.bg_iou, rep.per_class[1:]]) == pytest.approx(rep.miou, abs=1e-9)
        defined = rep.per_class[~np.isnan(rep.per_class)]
        assert defined.min() <= rep.miou <= defined.max()

    def test_report_output(self, tmp_path):
        rep = miou([np.array([0, 1, 0, 0])], [np.array([0, 1, 1, 0])], 2)
        rep.beta = 0.3
        text = format_report(rep)
        assert "66.67" in text and "58.33" in text and "beta" in text
        write_report(rep, tmp_path / "r.tsv")
        rows = dict(line.split("\t") for line in (tmp_path / "r.tsv").read_text().splitlines()[1:])
        assert float(rows["mIoU"]) == pytest.approx(7 / 12) and float(rows["beta"]) == 0.3


class TestMask:
    def test_endpoints(self, rng):
        stack = rng.uniform(0.01, 1, size=(4, 3, 3))
        assert np.all(cam_to_mask(stack, 0.0) > 0)
        assert np.all(cam_to_mask(stack, 1.0000001) == 0)

    def test_hand_2x2(self):
        stack = np.zeros((3, 2, 2))
        stack[1] = [[0.9, 0.2], [0.3, 0.5]]
        stack[2] = [[0.1, 0.25], [0.3, 0.6]]
        # ties go to the lower id: (1,0) has 0.3 == beta == class1 == class2
        np.testing.assert_array_equal(cam_to_mask(stack, 0.3), [[1, 0], [0, 2]])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.1, 10))
    def test_scale_invariance(self, seed, k):
        rng = np.random.default_rng(seed)
        stack = rng.uniform(size=(3, 4, 4))
        np.testing.assert_array_equal(cam_to_mask(stack * k, 0.4 * k), cam_to_mask(stack, 0.4))

    def test_sweep_matches_direct_masks(self, rng):
        stacks = [renormalize(rng.uniform(size=(4, 6, 6))) for _ in range(3)]
        gts = [rng.integers(0, 4, size=(6, 6)) for _ in range(3)]
        beta, rep, curve = best_beta_sweep(stacks, gts, [0.2, 0.5, 0.8])
        direct = miou([cam_to_mask(s, beta) for s in stacks], gts, 4)
        assert rep.miou == pytest.approx(direct.miou) and rep.beta == beta
        assert max(curve) == rep.miou and len(curve) == 3

    def test_single_beta(self, rng):
        beta, _, curve = best_beta_sweep([renormalize(rng.uniform(size=(2, 3, 3)))],
                                         [np.zeros((3, 3), int)], [0.45])
        assert beta == 0.45 and len(curve) == 1
        with pytest.raises(ValueError):
            best_beta_sweep([np.zeros((2, 1, 1))], [np.zeros((1, 1), int)], [])

    def test_tie_prefers_smaller_beta(self):
        stack = np.zeros((2, 1, 2))
        stack[1] = [[0.9, 0.0]]
        beta, _, _ = best_beta_sweep([stack], [np.array([[1, 0]])], [0.6, 0.1, 0.3])
        assert beta == 0.1

    def test_unimodal(self):
        assert is_unimodal_or_flat([0.1, 0.3, 0.3, 0.2])
        assert is_unimodal_or_flat([0.5] * 4)
        assert not is_unimodal_or_flat([0.1, 0.3, 0.2, 0.4])


class TestMultiscale:
    def test_renormalize(self):
        stack = np.zeros((3, 2, 2))
        stack[0] = 0.7
        stack[1] = [[2.0, -1.0], [1.0, 0.0]]
        stack[2] = 5.0
        out = renormalize(stack, [1, 0])
        np.testing.assert_array_equal(out[0], 0.7)
        np.testing.assert_allclose(out[1], [[1, 0], [0.5, 0]])
        np.testing.assert_array_equal(out[2], 0)

    def test_singleton_is_single_scale(self, model, rng):
        img, labels = rng.uniform(size=(3, 32, 32)), np.array([1, 0, 1])
        ms = multiscale_cam(model, img, labels, [1.0]).stack
        np.testing.assert_allclose(ms, single_scale_cam(model, img, labels), atol=1e-12)

    def test_repeat_scale_idempotent(self, model, rng):
        img, labels = rng.uniform(size=(3, 32, 32)), np.array([1, 1, 0])
        a = multiscale_cam(model, img, labels, [1.0]).stack
        b = multiscale_cam(model, img, labels, [1.0, 1.0]).stack
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_paper_scales_shape(self, model, rng):
        img = rng.uniform(size=(3, 32, 32))
        res = multiscale_cam(model, img, np.array([1, 1, 1]), PAPER_SCALES)
        assert PAPER_SCALES == (0.5, 1.0, 1.5, 2.0)
        assert res.stack.shape == (4, 8, 8) and res.skipped == []
        assert res.stack[1:].max() <= 1 + 1e-12

    def test_degenerate_scale_skipped(self, model, rng, caplog):
        img = rng.uniform(size=(3, 16, 16))
        with caplog.at_level(logging.WARNING):
            res = multiscale_cam(model, img, np.array([1, 0, 0]), [0.1, 1.0])
        assert res.skipped == [0.1] and "degenerate" in caplog.text
        with pytest.raises(ValueError):
            multiscale_cam(model, img, np.array([1, 0, 0]), [0.1])
        with pytest.raises(ValueError):
            multiscale_cam(model, img, np.array([1, 0, 0]), [])
