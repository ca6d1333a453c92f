import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import brute_force_ten_fold
from intraloss.data import DatasetSpec, generate
from intraloss.errors import DegenerateClass, InsufficientData, ShapeMismatch
from intraloss.evaluation import (
    SphereDump,
    anisotropy_index,
    class_statistics,
    distribution_report,
    margin_proxy,
    mean_direction,
    min_interclass_angle,
    sphere_dump,
    ten_fold_accuracy,
    verification_accuracy,
)
from intraloss.geometry import l2_normalize_rows
from intraloss.intra import IntraConfig
from intraloss.margins import MarginConfig, Scheme


def rotation(rng, d):
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def cluster(elong, n=1000, spread=0.05, seed=0):
    ds = generate(DatasetSpec(num_classes=2, samples_per_class=n, input_dim=3, cluster_spread=spread,
                              elongation=elong, seed=seed))
    return ds.inputs[ds.labels == 0]


# -- class statistics -------------------------------------------------------------

def test_identical_samples_zero_radius():
    e = np.tile([[0.0, 0.6, 0.8]], (5, 1))
    s = class_statistics(e, np.zeros(5, dtype=int))[0]
    assert s.radius_p50 == pytest.approx(0.0, abs=1e-7) and s.radius_p95 == pytest.approx(0.0, abs=1e-7)


def test_symmetric_pair_radius():
    t = math.radians(10)
    e = np.array([[math.cos(t), math.sin(t), 0.0], [math.cos(t), -math.sin(t), 0.0]])
    s = class_statistics(e, [0, 0])[0]
    np.testing.assert_allclose(s.mean_direction, [1.0, 0.0, 0.0], atol=1e-12)
    assert s.radius_p50 == pytest.approx(t, abs=1e-12)


def test_mean_direction_matches_grid_search():
    members = cluster(3.0, n=60, spread=0.3, seed=2)
    mu = mean_direction(members)
    theta = np.radians(np.arange(0, 180.5, 0.5))
    phi = np.radians(np.arange(0, 360, 0.5))
    T, P = np.meshgrid(theta, phi, indexing="ij")
    grid = np.stack([np.sin(T) * np.cos(P), np.sin(T) * np.sin(P), np.cos(T)], axis=-1).reshape(-1, 3)
    best = grid[np.argmax(grid @ members.sum(axis=0))]
    assert math.degrees(math.acos(min(1.0, best @ mu))) < 2.0


def test_degenerate_classes():
    with pytest.raises(DegenerateClass):
        mean_direction([[1.0, 0.0], [-1.0, 0.0]])
    with pytest.raises(DegenerateClass):
        class_statistics([[1.0, 0.0]], [0])


# -- anisotropy -------------------------------------------------------------------

def test_isotropic_cluster_index():
    m = cluster(1.0)
    assert 1.0 <= anisotropy_index(m, mean_direction(m)) <= 1.3


def test_elongated_cluster_index():
    m = cluster(4.0)
    assert 3.0 <= anisotropy_index(m, mean_direction(m)) <= 5.0


def test_tangent_line_index_huge():
    t = np.linspace(-0.2, 0.2, 50)
    m = np.stack([np.cos(t), np.sin(t), np.zeros_like(t)], axis=1)
    assert anisotropy_index(m, mean_direction(m)) > 1e4


def test_anisotropy_low_dimension_and_degenerate():
    assert anisotropy_index(l2_normalize_rows([[1.0, 0.1], [1.0, -0.2]]), np.array([1.0, 0.0])) == 1.0
    with pytest.raises(DegenerateClass):
        anisotropy_index(np.eye(3)[:2], np.array([1.0, 0.0, 0.0]))


@given(st.integers(0, 2**32 - 1), st.sampled_from([3, 4, 6]))
def test_anisotropy_rotation_invariant(seed, d):
    rng = np.random.default_rng(seed)
    base = np.eye(d)[0]
    m = l2_normalize_rows(base + 0.2 * rng.standard_normal((40, d)) * np.linspace(1, 3, d))
    q = rotation(rng, d)
    before = anisotropy_index(m, mean_direction(m))
    mr = m @ q.T
    after = anisotropy_index(mr, mean_direction(mr))
    assert before >= 1.0
    assert abs(before - after) < 1e-9 * max(1.0, before)


# -- margin ---------------------------------------------------------------------------

def test_margin_proxy_hand_example():
    a = [[math.cos(t), math.sin(t), 0.0] for t in (-0.1, 0.0, 0.1)]
    b = [[math.cos(t), math.sin(t), 0.0] for t in (0.9, 1.0, 1.1)]
    stats = class_statistics(np.array(a + b), [0, 0, 0, 1, 1, 1])
    p95 = np.percentile([0.1, 0.0, 0.1], 95)
    assert margin_proxy(stats) == pytest.approx(1.0 - 2 * p95, abs=1e-12)
    assert min_interclass_angle(np.array(a + b), [0, 0, 0, 1, 1, 1]) == pytest.approx(1.0, abs=1e-12)


# -- verification ---------------------------------------------------------------------

def test_separated_scores_perfect():
    scores = np.concatenate([np.linspace(0.6, 0.9, 20), np.linspace(-0.5, 0.3, 20)])
    issame = np.array([True] * 20 + [False] * 20)
    order = np.random.default_rng(0).permutation(40)
    acc, thr = ten_fold_accuracy(scores[order], issame[order])
    assert acc == 1.0 and 0.3 < thr < 0.6


def test_identically_distributed_near_chance():
    rng = np.random.default_rng(1)
    scores = rng.uniform(-1, 1, size=4000)
    issame = rng.random(4000) < 0.5
    acc, _ = ten_fold_accuracy(scores, issame)
    assert abs(acc - 0.5) < 0.05


@given(st.integers(0, 2**32 - 1), st.integers(10, 45), st.integers(2, 12))
def test_ten_fold_matches_brute_force(seed, n, levels):
    rng = np.random.default_rng(seed)
    # coarse levels force plenty of ties
    scores = rng.integers(0, levels, size=n) / levels
    issame = rng.random(n) < 0.5
    acc, _ = ten_fold_accuracy(scores, issame)
    assert acc == brute_force_ten_fold(list(scores), list(issame))


@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100), st.floats(-5, 5))
def test_verification_invariant_under_positive_affine_maps(seed, a, b):
    rng = np.random.default_rng(seed)
    scores = np.round(rng.uniform(-1, 1, size=60), 3)
    issame = rng.random(60) < 0.5
    acc, _ = ten_fold_accuracy(scores, issame)
    acc2, _ = ten_fold_accuracy(a * scores + b, issame)
    assert acc == acc2 and 0.0 <= acc <= 1.0


def test_ten_fold_errors():
    with pytest.raises(InsufficientData):
        ten_fold_accuracy(np.zeros(5), np.zeros(5, dtype=bool))
    with pytest.raises(ShapeMismatch):
        ten_fold_accuracy(np.zeros(20), np.zeros(19, dtype=bool))


def test_verification_accuracy_uses_cosine(rng):
    e = rng.standard_normal((30, 4))
    pairs = rng.integers(0, 30, size=(20, 2))
    issame = rng.random(20) < 0.5
    a1, _ = verification_accuracy(e, pairs, issame)
    a2, _ = verification_accuracy(e * rng.uniform(0.5, 3.0, size=(30, 1)), pairs, issame)
    assert a1 == a2


# -- report and dump ------------------------------------------------------------------------

def test_distribution_report_fields():
    ds = generate(DatasetSpec(num_classes=3, samples_per_class=30, seed=1))
    pairs = np.array([[i, j] for i in range(0, 90, 7) for j in range(3, 90, 11)][:40])
    issame = ds.labels[pairs[:, 0]] == ds.labels[pairs[:, 1]]
    rep = distribution_report(ds.inputs * 3.0, ds.labels, pairs, issame)
    assert [c["label"] for c in rep["per_class"]] == [0, 1, 2]
    for c in rep["per_class"]:
        assert c["angular_radius_p50_rad"] <= c["angular_radius_p95_rad"]
        assert c["anisotropy_index"] >= 1.0
        assert abs(np.linalg.norm(c["mean_direction"]) - 1) < 1e-12
    g = rep["global"]
    assert 0.0 <= g["verification_accuracy"] <= 1.0
    assert g["min_interclass_mean_angle_rad"] > g["margin_proxy_rad"]
    assert distribution_report(ds.inputs, ds.labels)["global"]["verification_accuracy"] is None


def test_sphere_dump_saturated():
    w = np.array([[1.0, 0.0], [0.0, 1.0]])
    d = sphere_dump(np.array([[2.0, 0.0]]), [0], w, MarginConfig(Scheme.NORM, scale_s=30.0))
    assert d.z[0] == pytest.approx(30.0)
    assert d.p[0] == pytest.approx(math.exp(30) / (math.exp(30) + 1), abs=1e-15)
    assert abs(d.grad_softmax[0]) < 1e-12
    np.testing.assert_allclose(d.embeddings, [[1.0, 0.0]])


def test_sphere_dump_uniform():
    c = 4
    w = np.array([[0.0] * c, [1.0] * c, [0.0] * c])
    d = sphere_dump(np.array([[1.0, 0.0, 1.0]]), [2], w, MarginConfig(Scheme.NORM))
    assert d.grad_softmax[0] == pytest.approx(1 / c - 1, abs=1e-15)


def test_sphere_dump_bounds_and_round_trip(tmp_path, rng):
    m = MarginConfig(Scheme.ADDITIVE_COSINE)
    e = rng.standard_normal((25, 3))
    labels = rng.integers(0, 4, 25)
    d = sphere_dump(e, labels, rng.standard_normal((3, 4)), m, IntraConfig.for_margin(m), sample_ids=np.arange(25) + 100)
    assert np.all(d.grad_softmax >= -1) and np.all(d.grad_softmax <= 0)
    assert np.all(np.abs(np.linalg.norm(d.embeddings, axis=1) - 1) < 1e-12)
    assert np.all(d.grad_intra <= 0)
    d.write_csv(tmp_path / "dump.csv")
    back = SphereDump.read_csv(tmp_path / "dump.csv")
    np.testing.assert_array_equal(back.sample_ids, d.sample_ids)
    np.testing.assert_array_equal(back.labels, d.labels)
    for name in ("embeddings", "z", "p", "grad_softmax", "grad_intra"):
        np.testing.assert_allclose(getattr(back, name), getattr(d, name), rtol=1e-15, atol=0)
