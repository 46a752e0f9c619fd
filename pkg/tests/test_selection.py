import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dvrview.model import NetworkSpec, init_params, predict
from dvrview.render import LightingConfig
from dvrview.selection import (
    CollectedImageSet,
    cosine_similarity,
    determine_category,
    exponential_weight,
    max_cosine,
    render_set,
    select_viewpoint,
    similarity_weight,
    viewing_map,
    vote,
)
from dvrview.transfer import designed_tf
from dvrview.viewsphere import SpherePixelization
from dvrview.volume import synth_volume

P = SpherePixelization(2)
SPEC = NetworkSpec(input_size=(16, 16, 3), conv_channels=(4,), hidden=(8,), n_outputs=48)


@pytest.fixture(scope="module")
def scene():
    v = synth_volume("asymmetric-blobs", (24, 24, 24))
    tf = designed_tf("blobs_context")
    return v, tf


def random_dists(n, seed):
    d = np.random.default_rng(seed).random((n, 48)) ** 4
    return d / d.sum(axis=1, keepdims=True)


# -- viewing map ---------------------------------------------------------------


def test_viewing_map_properties():
    one = np.eye(48)[[6]]
    assert np.array_equal(viewing_map(one).values, one[0])
    d = random_dists(1, 0)
    np.testing.assert_allclose(viewing_map(np.concatenate([d, d])).values, 2 * d[0], atol=1e-12)
    many = random_dists(37, 1)
    vm = viewing_map(many)
    assert vm.n_images == 37 and abs(vm.values.sum() - 37) < 1e-6
    with pytest.raises(ValueError):
        viewing_map(np.zeros((0, 48)))


# -- weights -------------------------------------------------------------------


def test_exponential_weight_values():
    for n in (1, 7, 100, 5000):
        assert exponential_weight(0.5, n) == 1.0
    assert abs(exponential_weight(0.6, 100) - math.e) < 1e-12
    with pytest.raises(ValueError):
        exponential_weight(0.5, 0)


@given(st.floats(-1, 1), st.floats(-1, 1), st.integers(1, 200))
def test_exponential_weight_monotone(a, b, n):
    wa, wb = exponential_weight(a, n), exponential_weight(b, n)
    if a > b and (a - b) * n / 10 > 1e-12:
        assert wa > wb
    assert wa > 0


@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.floats(0.01, 100))
def test_cosine_bounds_and_scale(v, c):
    rng = np.random.default_rng(0)
    u = rng.normal(size=3)
    s = cosine_similarity(u, v)
    assert -1.0 <= s <= 1.0
    assert cosine_similarity(u * c, np.array(v) * c) == pytest.approx(s, abs=1e-12)


def test_cosine_zero_vector():
    assert cosine_similarity([0, 0, 0], [1, 2, 3]) == 0.0
    assert max_cosine([1.0, 0.0], [[0.0, 1.0], [2.0, 0.0]]) == pytest.approx(1.0)


# -- voting --------------------------------------------------------------------


def test_single_voter():
    d = random_dists(1, 3)
    for w in (0.01, 1.0, 50.0):
        assert vote(d, [w])[0] == int(np.argmax(d[0]))


def test_identical_voters():
    d = random_dists(1, 4)
    assert vote(np.concatenate([d, d]), [1.0, 3.0])[0] == vote(d, [1.0])[0]


def test_three_voter_brute_force():
    d = np.zeros((3, 48))
    d[0, [2, 10]] = [0.7, 0.3]
    d[1, [10, 20]] = [0.6, 0.4]
    d[2, [2, 20]] = [0.1, 0.9]
    w = [1.5, 1.0, 0.8]
    best, best_v = None, -1.0
    for lab in range(48):
        total = sum(w[i] * d[i, lab] for i in range(3))
        if total > best_v:
            best, best_v = lab, total
    label, totals = vote(d, w)
    assert label == best == 2
    assert totals[2] == pytest.approx(1.5 * 0.7 + 0.8 * 0.1, abs=1e-15)


def test_vote_errors():
    with pytest.raises(ValueError):
        vote(random_dists(2, 0), [1.0])


# -- rendering-based pieces ----------------------------------------------------


def test_self_similarity(scene):
    v, tf = scene
    ext = init_params(SPEC, 0)
    renders = render_set(v, tf.opacity, tf.colors, 9, P, 4, np.random.default_rng(5), (16, 16))
    assert renders.shape == (4, 16, 16, 3)
    w = similarity_weight(v, tf.opacity, tf.colors, renders[2], 9, ext, P, 4, np.random.default_rng(5))
    assert abs(w - 1.0) < 1e-6


def test_render_set_backgrounds(scene):
    v, tf = scene
    imgs = render_set(v, tf.opacity, tf.colors, 0, P, 4, np.random.default_rng(0), (16, 16))
    corners = imgs[:, 0, 0, 0]
    assert corners[0] == 0 and corners[1] == 255


def test_select_single_voter_equivalence(scene):
    v, tf = scene
    net = init_params(SPEC, 1)
    img = render_set(v, tf.opacity, tf.colors, 30, P, 1, np.random.default_rng(0), (16, 16))
    res = select_viewpoint(v, tf.opacity, tf.colors, CollectedImageSet(img), net, P, k=2, seed=0)
    dist, _ = predict(net, img)
    assert res.optimal == int(np.argmax(dist[0])) and res.weights.shape == (1,)


def test_select_deterministic(scene, tmp_path):
    v, tf = scene
    net = init_params(SPEC, 2)
    imgs = np.concatenate([render_set(v, tf.opacity, tf.colors, lab, P, 2, np.random.default_rng(lab), (16, 16))
                           for lab in (3, 17)])
    a = select_viewpoint(v, tf.opacity, tf.colors, CollectedImageSet(imgs), net, P, k=2, seed=4)
    b = select_viewpoint(v, tf.opacity, tf.colors, CollectedImageSet(imgs), net, P, k=2, seed=4)
    assert a.to_dict() == b.to_dict()
    a.to_json(tmp_path / "v.json")
    assert (tmp_path / "v.json").read_text().startswith("{")


def test_determine_category_unanimous(scene):
    v, tf = scene
    spec = NetworkSpec(input_size=(16, 16, 3), conv_channels=(2,), hidden=(4,), n_outputs=3)
    clf = init_params(spec, 0)
    clf.tensors["fc1.w"][...] = 0.0
    clf.tensors["fc1.b"][...] = [0.0, 5.0, 0.0]
    clf.meta["categories"] = ["a", "b", "others"]
    light = LightingConfig()
    tag = determine_category(v, tf.opacity, tf.colors, clf, m=3, rng=np.random.default_rng(1), light=light)
    assert tag.name == "b" and tag.index == 1
    again = determine_category(v, tf.opacity, tf.colors, clf, m=3, rng=np.random.default_rng(1), light=light)
    assert again == tag


def test_collected_set_validation():
    with pytest.raises(ValueError):
        CollectedImageSet(np.zeros((2, 4, 4)))
    assert CollectedImageSet(np.zeros((2, 4, 4, 3), np.uint8)).names == ("image0", "image1")
