import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dvrview.evaluation import (
    DEFAULT_TOLERANCES,
    EstimatedViewpoint,
    error_map,
    estimate_many,
    estimate_viewpoint,
    geodesic_errors,
    tolerance_accuracy,
    topk_region_accuracy,
)
from dvrview.viewsphere import SpherePixelization, SphericalDirection, geodesic_distance

P = SpherePixelization(2)


def centers(labels):
    return [P.center_of(int(lab)) for lab in labels]


def antipodal_label(lab):
    return int(np.argmin(P.center_vectors @ P.center_vectors[lab]))


def test_one_hot_estimate():
    e = estimate_viewpoint(np.eye(48)[17], P)
    assert e == EstimatedViewpoint(17, 0.0)


def test_uniform_estimate_exhaustive():
    e = estimate_viewpoint(np.full(48, 1 / 48), P)
    c0 = P.center_of(0)
    oracle = sum(geodesic_distance(c0, P.center_of(i)) for i in range(48)) / 48
    assert e.label == 0 and e.sigma == pytest.approx(oracle, abs=1e-9)


def test_tie_goes_to_lower_index():
    d = np.zeros(48)
    d[[9, 30]] = 0.5
    assert estimate_viewpoint(d, P).label == 9


@given(st.lists(st.floats(0, 1), min_size=48, max_size=48).filter(lambda v: sum(v) > 0))
def test_sigma_zero_iff_one_hot(v):
    d = np.array(v) / sum(v)
    _, s = estimate_many(d, P)
    assert (s[0] == 0.0) == (np.count_nonzero(d) == 1)


def test_perfect_and_antipodal():
    labels = np.arange(48)
    rep = tolerance_accuracy(labels, centers(labels), P)
    assert rep.accuracies == (1.0,) * 5
    anti = [antipodal_label(i) for i in labels]
    rep = tolerance_accuracy(anti, centers(labels), P)
    assert all(a == 0.0 for t, a in zip(rep.tolerances, rep.accuracies) if t <= 15)


def test_hand_counted_fixture():
    # ground truths offset in elevation from an equatorial label center by known angles
    lab = int(np.flatnonzero(np.abs(P.center_elevations) < 1e-12)[0])
    c = P.center_of(lab)
    offsets = [0.0, 1.0, 3.0, 4.9, 6.0, 7.5, 9.0, 10.5, 12.0, 20.0]
    gts = [SphericalDirection(c.azimuth, o) for o in offsets]
    errs = geodesic_errors([lab] * 10, gts, P, reference="direction")
    np.testing.assert_allclose(errs, offsets, atol=1e-9)
    rep = tolerance_accuracy([lab] * 10, gts, P, reference="direction")
    assert rep.accuracies == (0.2, 0.4, 0.6, 0.8, 0.9)
    preds = [EstimatedViewpoint(lab, 0.0)] * 10
    assert tolerance_accuracy(preds, gts, P, reference="direction") == rep


def test_center_reference_ignores_jitter():
    rng = np.random.default_rng(0)
    labels = rng.integers(48, size=200)
    gts = [P.random_direction_within(int(lab), rng) for lab in labels]
    assert np.all(geodesic_errors(labels, gts, P) == 0.0)
    assert np.all(geodesic_errors(labels, gts, P, "direction") > 0.0)


@given(st.lists(st.integers(0, 47), min_size=1, max_size=30), st.integers(0, 2 ** 31))
def test_accuracy_monotone_in_tolerance(gt, seed):
    rng = np.random.default_rng(seed)
    preds = rng.integers(48, size=len(gt))
    rep = tolerance_accuracy(preds, centers(gt), P, tolerances=(1, 20, 40, 60, 90, 180))
    assert all(b >= a for a, b in zip(rep.accuracies, rep.accuracies[1:]))
    assert rep.accuracies[-1] == 1.0


def test_error_map():
    labels = np.arange(48)
    assert error_map(labels, centers(labels), P).total == 0
    preds = labels.copy()
    preds[11] = antipodal_label(11)
    m = error_map(preds, centers(labels), P, tolerance=5.0)
    assert np.flatnonzero(m.counts).tolist() == [11] and m.counts[11] == 1


def test_error_map_reconciles_with_accuracy():
    rng = np.random.default_rng(4)
    gt = rng.integers(48, size=300)
    preds = np.where(rng.random(300) < 0.6, gt, rng.integers(48, size=300))
    for tol in DEFAULT_TOLERANCES:
        rep = tolerance_accuracy(preds, centers(gt), P, tolerances=(tol,))
        m = error_map(preds, centers(gt), P, tolerance=tol)
        assert m.total == round((1 - rep.accuracies[0]) * 300)


def test_topk_single_equals_accuracy():
    labels = np.arange(48)
    a = topk_region_accuracy(np.eye(48), 1, centers(labels), P)
    b = tolerance_accuracy(labels, centers(labels), P)
    assert a.accuracies == b.accuracies


def test_topk_uniform_exhaustive():
    # with all ties the k chosen labels are 0..k-1
    rng = np.random.default_rng(2)
    gt = rng.integers(48, size=25)
    dists = np.full((25, 48), 1 / 48)
    tols = (30.0, 60.0)
    rep = topk_region_accuracy(dists, 12, centers(gt), P, tols)
    for j, tol in enumerate(tols):
        frac = [sum(geodesic_distance(P.center_of(i), P.center_of(int(g))) <= tol for i in range(12)) / 12
                for g in gt]
        assert rep.accuracies[j] == pytest.approx(np.mean(frac), abs=1e-12)


def test_topk_full_set():
    gt = [5, 20]
    rep = topk_region_accuracy(np.full((2, 48), 1 / 48), 48, centers(gt), P, (45.0,))
    within = [sum(geodesic_distance(P.center_of(i), P.center_of(g)) <= 45.0 for i in range(48)) for g in gt]
    assert rep.accuracies[0] == pytest.approx(np.mean(within) / 48, abs=1e-12)


def test_errors():
    with pytest.raises(ValueError):
        topk_region_accuracy(np.eye(48)[:1], 49, centers([0]), P)
    with pytest.raises(ValueError):
        tolerance_accuracy([0, 1], centers([0]), P)
    with pytest.raises(ValueError):
        geodesic_errors([0], centers([0]), P, reference="nearest")
    with pytest.raises(ValueError):
        estimate_viewpoint(np.ones(12) / 12, P)


def test_report_csv(tmp_path):
    rep = tolerance_accuracy([0, 1], centers([0, 2]), P)
    rep.to_csv(tmp_path / "r.csv")
    rows = (tmp_path / "r.csv").read_text().splitlines()
    assert rows[0] == "metric,tolerance_deg,accuracy,n,reference" and len(rows) == 6
    assert rep.at(15) == 0.5 and rep.as_dict()["acc_2"] == 0.5
