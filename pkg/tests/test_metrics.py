import numpy as np
import pytest

from mdcseg.metrics import (cost_efficiency, dsc, evaluate_pair, hausdorff,
                            miou, per_class_iou)
from mdcseg.noise import corruption_rate


def test_dsc_identical_nonempty():
    m = (np.random.default_rng(0).uniform(size=(8, 8)) > 0.5).astype(np.uint8)
    assert dsc(m, m) == 1.0


def test_dsc_disjoint():
    a = np.zeros((4, 4), np.uint8)
    b = np.zeros((4, 4), np.uint8)
    a[0, 0] = 1
    b[3, 3] = 1
    assert dsc(a, b) == 0.0


def test_dsc_half_overlap():
    a = np.zeros((4, 4), np.uint8)
    a[0] = 1
    b = np.zeros((4, 4), np.uint8)
    b[0, 2:] = 1
    b[1, :2] = 1
    assert dsc(a, b) == pytest.approx(0.5)


def test_dsc_both_empty_is_one():
    z = np.zeros((3, 3), np.uint8)
    assert dsc(z, z) == 1.0


def test_dsc_symmetric():
    rng = np.random.default_rng(1)
    a = (rng.uniform(size=(6, 6)) > 0.5).astype(np.uint8)
    b = (rng.uniform(size=(6, 6)) > 0.5).astype(np.uint8)
    assert dsc(a, b) == dsc(b, a)


def test_dsc_is_one_minus_corruption_rate():
    rng = np.random.default_rng(2)
    a = (rng.uniform(size=(8, 8)) > 0.4).astype(np.uint8)
    b = (rng.uniform(size=(8, 8)) > 0.6).astype(np.uint8)
    assert dsc(a, b) == pytest.approx(1.0 - corruption_rate(a, b), abs=1e-15)


def test_miou_identical():
    m = np.random.default_rng(3).integers(0, 3, size=(5, 5))
    assert miou(m, m, 3) == 1.0


def test_miou_hand_case_two_pixels():
    pred = np.array([[0, 1]])
    gt = np.array([[0, 0]])
    assert miou(pred, gt, 2) == pytest.approx(0.25)


def test_miou_total_disagreement():
    pred = np.zeros((3, 3), np.int64)
    gt = np.ones((3, 3), np.int64)
    assert miou(pred, gt, 2) == 0.0


def test_miou_absent_class_counts_as_one():
    pred = np.zeros((2, 2), np.int64)
    gt = np.zeros((2, 2), np.int64)
    assert per_class_iou(pred, gt, 3) == [1.0, 1.0, 1.0]


def test_miou_foreground_only_flag():
    pred = np.array([[0, 1]])
    gt = np.array([[0, 0]])
    assert miou(pred, gt, 2, foreground_only=True) == 0.0


def test_miou_permutation_invariant():
    rng = np.random.default_rng(4)
    pred = rng.integers(0, 3, size=(6, 6))
    gt = rng.integers(0, 3, size=(6, 6))
    perm = np.array([2, 0, 1])
    assert miou(perm[pred], perm[gt], 3) == pytest.approx(miou(pred, gt, 3))


def test_miou_rejects_out_of_range():
    with pytest.raises(ValueError):
        miou(np.array([[3]]), np.array([[0]]), 2)


def test_hausdorff_identical():
    m = (np.random.default_rng(5).uniform(size=(8, 8)) > 0.5).astype(np.uint8)
    assert hausdorff(m, m) == 0.0


def test_hausdorff_two_single_pixels():
    a = np.zeros((6, 6), np.uint8)
    b = np.zeros((6, 6), np.uint8)
    a[0, 0] = 1
    b[3, 4] = 1
    assert hausdorff(a, b) == pytest.approx(5.0)


def test_hausdorff_empty_vs_nonempty_is_diagonal():
    pred = np.zeros((3, 4), np.uint8)
    gt = np.zeros((3, 4), np.uint8)
    gt[1, 1] = 1
    assert hausdorff(pred, gt) == pytest.approx(np.sqrt(13.0))


def test_hausdorff_both_empty():
    z = np.zeros((5, 5), np.uint8)
    assert hausdorff(z, z) == 0.0


def test_hausdorff_symmetric():
    rng = np.random.default_rng(6)
    a = (rng.uniform(size=(7, 7)) > 0.6).astype(np.uint8)
    b = (rng.uniform(size=(7, 7)) > 0.6).astype(np.uint8)
    assert hausdorff(a, b) == hausdorff(b, a)


def test_hausdorff_uses_boundaries_not_interiors():
    # A filled disk and the same disk with the interior removed share the
    # boundary, so the distance is zero.
    yy, xx = np.mgrid[0:15, 0:15]
    full = (((yy - 7) ** 2 + (xx - 7) ** 2) <= 25).astype(np.uint8)
    from mdcseg.metrics import _boundary_points
    ring = np.zeros_like(full)
    pts = _boundary_points(full)
    ring[pts[:, 0], pts[:, 1]] = 1
    assert hausdorff(full, ring) == 0.0


def test_cost_efficiency_examples():
    assert cost_efficiency(0.0, 3.0, 2.0, 5.0, 4.0) == 0.0
    assert cost_efficiency(3.0, 2.0, 1.0, 1.0, 1.0) == pytest.approx(3.0)


def test_cost_efficiency_formula():
    ce = cost_efficiency(1.11, 3.2, 2.8, 7.8, 7.2)
    overhead = (3.2 / 2.8) * (7.8 / 7.2) - 1.0
    assert ce == pytest.approx(1.11 / overhead)


def test_cost_efficiency_unit_ratio_faults():
    with pytest.raises(ZeroDivisionError):
        cost_efficiency(1.0, 2.0, 2.0, 3.0, 3.0)
    with pytest.raises(ValueError):
        cost_efficiency(1.0, 0.0, 2.0, 3.0, 3.0)


def test_evaluate_pair_bundles_fields():
    rng = np.random.default_rng(7)
    pred = (rng.uniform(size=(8, 8)) > 0.5).astype(np.int64)
    gt = (rng.uniform(size=(8, 8)) > 0.5).astype(np.int64)
    res = evaluate_pair(pred, gt, 2)
    assert 0.0 <= res.miou <= 1.0
    assert 0.0 <= res.dsc <= 1.0
    assert res.hd >= 0.0
    assert len(res.per_class_iou) == 2
