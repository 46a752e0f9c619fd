import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dvrview.viewsphere import (
    SpherePixelization,
    SphericalDirection,
    angular_distance,
    build_pixelization,
    geodesic_distance,
    ring2xyf,
    to_unit_vectors,
    xyf2loc,
)

NSIDES = (1, 2, 4, 14)

azimuths = st.floats(0.0, 360.0, exclude_max=True, allow_nan=False)
elevations = st.floats(-90.0, 90.0, allow_nan=False)


def ring_centers(nside):
    """Label centers straight from the published ring layout, in RING order."""
    az, el = [], []
    for i in range(1, 4 * nside):
        if i < nside or i > 3 * nside:
            k = i if i < nside else 4 * nside - i
            z = 1.0 - k * k / (3.0 * nside * nside)
            z = z if i < nside else -z
            phis = [(j - 0.5) * math.pi / (2 * k) for j in range(1, 4 * k + 1)]
        else:
            z = 4.0 / 3.0 - 2.0 * i / (3.0 * nside)
            fodd = 1.0 if (i + nside) % 2 else 0.5
            phis = [(j - fodd) * math.pi / (2 * nside) for j in range(1, 4 * nside + 1)]
        for phi in phis:
            az.append(math.degrees(phi) % 360.0)
            el.append(math.degrees(math.asin(z)))
    return np.array(az), np.array(el)


def pixel_vertices(nside, label):
    ix, iy, face = ring2xyf(nside, label)
    out = set()
    for a in (0, 1):
        for b in (0, 1):
            z, phi = xyf2loc((ix + a) / nside, (iy + b) / nside, face)
            r = math.sqrt(max(0.0, 1.0 - float(z) ** 2))
            v = (r * math.cos(float(phi)), r * math.sin(float(phi)), float(z))
            out.add(tuple(round(c, 9) + 0.0 for c in v))
    return out


# -- construction --------------------------------------------------------------


@pytest.mark.parametrize("nside,n", [(1, 12), (2, 48), (4, 192), (14, 2352)])
def test_label_count(nside, n):
    assert build_pixelization(nside).n_pixels == n
    assert len(SpherePixelization(nside)) == n


@pytest.mark.parametrize("bad", [0, -1, 1.5])
def test_invalid_nside(bad):
    with pytest.raises(ValueError):
        SpherePixelization(bad)


@pytest.mark.parametrize("nside", NSIDES)
def test_centers_match_ring_formula(nside):
    p = SpherePixelization(nside)
    az, el = ring_centers(nside)
    np.testing.assert_allclose(p.center_elevations, el, atol=1e-9)
    d = angular_distance(p.center_azimuths, p.center_elevations, az, el)
    assert d.max() < 1e-9


@pytest.mark.parametrize("nside", NSIDES)
def test_round_trip_exact(nside):
    p = SpherePixelization(nside)
    labels = np.arange(p.n_pixels)
    assert np.array_equal(p.labels_of(p.center_azimuths, p.center_elevations), labels)
    for lab in (0, p.n_pixels // 2, p.n_pixels - 1):
        assert p.label_of(p.center_of(lab)) == lab


def test_nside1_equator_and_distinct():
    p = SpherePixelization(1)
    assert np.allclose(p.center_elevations[4:8], 0.0, atol=1e-12)
    assert np.allclose(p.center_elevations[:4], math.degrees(math.asin(2.0 / 3.0)))
    v = p.center_vectors
    assert len({tuple(np.round(x, 9)) for x in v}) == 12


@pytest.mark.parametrize("nside", NSIDES)
def test_pole_label_independent_of_azimuth(nside):
    p = SpherePixelization(nside)
    az = np.linspace(0.0, 359.9, 97)
    north = p.labels_of(az, np.full_like(az, 90.0))
    south = p.labels_of(az, np.full_like(az, -90.0))
    assert len(set(north.tolist())) == 1 and north[0] < 4
    assert len(set(south.tolist())) == 1 and south[0] >= p.n_pixels - 4


def test_equal_area_monte_carlo():
    # uniform directions land in each label with probability 1/N
    p = SpherePixelization(4)
    rng = np.random.default_rng(7)
    n = 10_000
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    az = np.degrees(np.arctan2(v[:, 1], v[:, 0])) % 360.0
    el = np.degrees(np.arcsin(np.clip(v[:, 2], -1, 1)))
    counts = np.bincount(p.labels_of(az, el), minlength=p.n_pixels)
    q = 1.0 / p.n_pixels
    assert np.all(np.abs(counts - n * q) <= 5.0 * math.sqrt(n * q * (1 - q)))


def test_rejects_bad_labels_and_directions():
    p = SpherePixelization(2)
    for bad in (-1, 48, 2.5):
        with pytest.raises(ValueError):
            p.center_of(bad)
    with pytest.raises(ValueError):
        SphericalDirection(0.0, 90.5)
    with pytest.raises(ValueError):
        p.labels_of([0.0], [91.0])


@given(azimuths, elevations)
def test_azimuth_normalized(az, el):
    d = SphericalDirection(az - 720.0, el)
    assert 0.0 <= d.azimuth < 360.0
    assert geodesic_distance(d, SphericalDirection(az, el)) < 1e-6


# -- metric --------------------------------------------------------------------


def test_distance_examples():
    o = SphericalDirection(0, 0)
    assert geodesic_distance(o, o) == 0.0
    assert geodesic_distance(o, SphericalDirection(90, 0)) == pytest.approx(90.0, abs=1e-12)
    assert geodesic_distance(o, SphericalDirection(180, 0)) == pytest.approx(180.0, abs=1e-12)
    assert geodesic_distance(SphericalDirection(10, 90), SphericalDirection(250, 90)) < 1e-12


def test_metric_properties_random_triples():
    rng = np.random.default_rng(3)
    n = 10_000
    az = rng.uniform(0, 360, (3, n))
    el = np.degrees(np.arcsin(rng.uniform(-1, 1, (3, n))))
    ab = angular_distance(az[0], el[0], az[1], el[1])
    ba = angular_distance(az[1], el[1], az[0], el[0])
    bc = angular_distance(az[1], el[1], az[2], el[2])
    ac = angular_distance(az[0], el[0], az[2], el[2])
    assert np.array_equal(ab, ba)
    assert np.all(ac <= ab + bc + 1e-9)
    assert np.all((ab >= 0) & (ab <= 180))


@given(azimuths, elevations)
def test_distance_to_antipode(az, el):
    u = to_unit_vectors(az, el)
    anti = SphericalDirection.from_vector(-u)
    assert geodesic_distance(SphericalDirection(az, el), anti) == pytest.approx(180.0, abs=1e-6)


def test_small_angles_accurate():
    d = float(angular_distance(0.0, 0.0, 1e-7, 0.0))
    assert d == pytest.approx(1e-7, rel=1e-9)


# -- neighbours ----------------------------------------------------------------


@pytest.mark.parametrize("nside", (1, 2, 4, 14))
def test_four_edge_neighbours_everywhere(nside):
    p = SpherePixelization(nside)
    for lab in range(p.n_pixels):
        nb = p.edge_neighbors(lab)
        assert len(set(nb)) == 4 and lab not in nb


@pytest.mark.parametrize("nside", (1, 2, 4))
def test_neighbours_match_shared_vertex_geometry(nside):
    p = SpherePixelization(nside)
    verts = [pixel_vertices(nside, lab) for lab in range(p.n_pixels)]
    for a in range(p.n_pixels):
        oracle = {b for b in range(p.n_pixels) if b != a and len(verts[a] & verts[b]) == 2}
        assert set(p.edge_neighbors(a)) == oracle


def test_neighbour_symmetry_nside2():
    p = SpherePixelization(2)
    for a in range(p.n_pixels):
        for b in range(p.n_pixels):
            assert (a in p.neighbors(b, 1)) == (b in p.neighbors(a, 1))


def test_interior_label_nside14():
    p = SpherePixelization(14)
    lab = p.label_of(SphericalDirection(37.0, 12.0))
    nb = p.neighbors(lab, 1)
    assert len(nb) == 5 and lab in nb


@given(st.integers(0, 47), st.integers(0, 4))
def test_neighbourhoods_nest(lab, n):
    p = SpherePixelization(2)
    assert p.neighbors(lab, 0).members == {lab}
    assert p.neighbors(lab, n).members <= p.neighbors(lab, n + 1).members


# -- sampling inside a region --------------------------------------------------


def test_random_direction_containment_and_determinism():
    p = SpherePixelization(2)
    rng = np.random.default_rng(0)
    for i in range(10_000):
        lab = i % p.n_pixels
        assert p.label_of(p.random_direction_within(lab, rng)) == lab
    a = p.random_direction_within(5, np.random.default_rng(9))
    b = p.random_direction_within(5, np.random.default_rng(9))
    assert a == b


def test_random_direction_mean_at_center():
    # an equatorial-belt label is mirror symmetric about its center in both angles
    p = SpherePixelization(2)
    lab = int(np.flatnonzero(np.abs(p.center_elevations) < 1e-12)[0])
    c = p.center_of(lab)
    rng = np.random.default_rng(1)
    n = 10_000
    d = [p.random_direction_within(lab, rng) for _ in range(n)]
    daz = np.array([(x.azimuth - c.azimuth + 180.0) % 360.0 - 180.0 for x in d])
    el = np.array([x.elevation for x in d])
    assert abs(daz.mean()) < 3 * daz.std() / math.sqrt(n)
    assert abs(el.mean() - c.elevation) < 3 * el.std() / math.sqrt(n)


# -- soft targets --------------------------------------------------------------


def test_soft_target_basics():
    p = SpherePixelization(2)
    q = p.soft_target(10, 1)
    assert q[10] == 1.0
    members = p.neighbors(10, 1).members
    assert np.all(q[list(members)] > 0)
    assert np.all(q[[i for i in range(48) if i not in members]] == 0)
    one_hot = p.soft_target(10, 0)
    assert np.array_equal(one_hot, np.eye(48)[10])


def test_default_unit_gives_mean_neighbour_weight():
    p = SpherePixelization(2)
    ds = []
    for a in range(p.n_pixels):
        for b in p.edge_neighbors(a):
            ds.append(geodesic_distance(p.center_of(a), p.center_of(b)))
    unit = np.mean(ds) / math.log(1.0 / 0.36)
    assert p.default_unit == pytest.approx(unit, rel=1e-12)
    assert math.exp(-np.mean(ds) / p.default_unit) == pytest.approx(0.36, rel=1e-12)


@given(st.integers(0, 47), st.integers(0, 3), st.floats(0.5, 50.0))
def test_soft_target_range(lab, n, unit):
    q = SpherePixelization(2).soft_target(lab, n, unit)
    assert q[lab] == 1.0 and q.max() == 1.0 and q.min() >= 0.0


def test_soft_target_rejects_bad_unit():
    with pytest.raises(ValueError):
        SpherePixelization(2).soft_target(0, 1, 0.0)


def test_csv_export():
    text = SpherePixelization(2).to_csv()
    rows = text.strip().splitlines()
    assert rows[0] == "label,azimuth_deg,elevation_deg" and len(rows) == 49
