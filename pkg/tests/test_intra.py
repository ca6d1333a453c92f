import math
from dataclasses import replace

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import central_diff, rel_err
from intraloss.errors import EmptyBatch, ShapeMismatch, UnsupportedScheme
from intraloss.intra import (
    IntraConfig,
    IntraResult,
    combined_forward,
    get_gradient,
    get_term,
    intra_forward,
    maxout_term,
    optimum_point,
)
from intraloss.margins import MarginConfig, Scheme, forward, logits_forward, softmax_xent

CFG = IntraConfig(alpha=5.0, gamma=0.9, optimum_point=19.5)
B = CFG.beta
zs = st.floats(-1e6, 1e6, allow_nan=False)


def test_optimum_points():
    assert optimum_point(MarginConfig(Scheme.ADDITIVE_COSINE, 30.0, m2=0.35)) == pytest.approx(19.5, abs=1e-12)
    assert optimum_point(MarginConfig(Scheme.MULTIPLICATIVE_ANGULAR, 30.0, m1=4)) == 30.0
    assert optimum_point(MarginConfig(Scheme.NORM, 30.0)) == 30.0
    assert optimum_point(MarginConfig(Scheme.ADDITIVE_ANGULAR, 1.0, m3=0.0)) == 1.0
    assert optimum_point(MarginConfig(Scheme.ADDITIVE_ANGULAR, 30.0, m3=0.5)) == pytest.approx(30 * math.cos(0.5))
    with pytest.raises(UnsupportedScheme):
        optimum_point(MarginConfig(Scheme.PLAIN))


def test_optimum_is_max_target_logit():
    for scheme in (Scheme.NORM, Scheme.MULTIPLICATIVE_ANGULAR, Scheme.ADDITIVE_COSINE, Scheme.ADDITIVE_ANGULAR):
        cfg = MarginConfig(scheme)
        feats = np.array([[1.0, 0.0], [0.0, 1.0]])
        logits, _ = logits_forward(feats, feats.T, [0, 1], cfg)
        assert logits[0, 0] == pytest.approx(optimum_point(cfg), abs=1e-12)


def test_beta_in_logit_units():
    cfg = IntraConfig.for_margin(MarginConfig(Scheme.ADDITIVE_COSINE, 30.0, m2=0.35))
    assert cfg.beta == pytest.approx(18.6, abs=1e-12)
    assert cfg.beta < cfg.optimum_point
    with pytest.raises(ValueError):
        IntraConfig(alpha=0.0)
    with pytest.raises(ValueError):
        IntraConfig(gamma=-1.0)


def test_get_term_examples():
    assert get_term(B, CFG) == pytest.approx(math.log(2) / 5, abs=1e-15)
    assert get_term(B + 100, CFG) < 1e-200
    mpmath.mp.dps = 50
    exact = 10 + mpmath.log1p(mpmath.exp(-50)) / 5
    assert exact - 10 < mpmath.mpf("1e-20")
    assert abs(get_term(B - 10, CFG) - float(exact)) < 1e-14


def test_get_gradient_examples():
    assert get_gradient(B, CFG) == -0.5
    assert get_gradient(-1e6, CFG) == -1.0
    assert get_gradient(np.array([B]), CFG)[0] == -0.5


def test_get_gradient_matches_finite_differences(rng):
    z = rng.uniform(B - 3, B + 3, size=50)
    num = central_diff(lambda v: float(np.sum(get_term(v, CFG))), z)
    assert np.max(np.abs(num - get_gradient(z, CFG))) < 1e-7


@given(zs, zs)
def test_get_term_monotone_decreasing(a, b):
    lo, hi = min(a, b), max(a, b)
    assert get_term(lo, CFG) >= get_term(hi, CFG)


@given(zs, zs, st.floats(0, 1))
def test_get_term_convex(a, b, t):
    mid = t * a + (1 - t) * b
    lhs = get_term(mid, CFG)
    rhs = t * get_term(a, CFG) + (1 - t) * get_term(b, CFG)
    assert lhs <= rhs + 1e-9 * max(1.0, abs(rhs))


@given(zs)
def test_stable_for_large_arguments(z):
    assert math.isfinite(get_term(z, CFG)) and math.isfinite(get_gradient(z, CFG))
    assert get_term(z, CFG) >= maxout_term(z, CFG)


def test_intra_forward_examples():
    res = intra_forward(np.array([B]), np.array([0.5]), CFG)
    assert res.l_intra == pytest.approx(0.5 * 0.5 * math.log(2) / 5, abs=1e-15)
    assert res.l_intra == pytest.approx(0.034657, abs=1e-6)
    res = intra_forward(np.zeros(3), np.array([0.2, 0.4, 0.6]), CFG)
    assert res.w_intra == pytest.approx(0.4, abs=1e-15)


def test_converged_batch_vanishes(rng):
    z = rng.uniform(-50, 50, size=8)
    res = intra_forward(z, np.full(8, 1.0 - 1e-12), CFG)
    assert abs(res.l_intra) < 1e-9
    assert np.max(np.abs(res.grad_target_logits)) < 1e-12


@given(st.integers(0, 2**32 - 1), st.integers(1, 20))
def test_intra_forward_bounds(seed, n):
    rng = np.random.default_rng(seed)
    z = rng.uniform(-40, 40, size=n)
    p = rng.uniform(0, 1, size=n)
    res = intra_forward(z, p, CFG)
    per_sample = res.grad_target_logits * n
    assert np.all(per_sample <= 0)
    assert np.all(per_sample >= -res.w_intra * (1 - p) - 1e-15)
    assert np.all(res.per_sample_get >= 0)


def test_auto_switch(rng):
    z = rng.uniform(-20, 10, size=16)
    p = rng.uniform(0, 0.01, size=16)
    res = intra_forward(z, p, CFG)
    assert abs(res.l_intra) < 0.01 * res.per_sample_get.max()


def test_regional_mask(rng):
    z = rng.uniform(-20, 20, size=6)
    p = np.array([0.3, 0.5, 1 - 1e-7, 1 - 1e-9, 0.9, 0.1])
    res = intra_forward(z, p, CFG)
    per_sample = np.abs(res.grad_target_logits * 6)
    assert np.all(per_sample[[2, 3]] < 1e-6 * res.w_intra)


def test_intra_forward_errors():
    with pytest.raises(EmptyBatch):
        intra_forward(np.array([]), np.array([]), CFG)
    with pytest.raises(ShapeMismatch):
        intra_forward(np.zeros(2), np.zeros(3), CFG)


def _base(rng, n=4, scheme=Scheme.ADDITIVE_COSINE):
    f = rng.standard_normal((n, 3))
    w = rng.standard_normal((3, 4))
    y = rng.integers(0, 4, size=n)
    return f, w, y, MarginConfig(scheme)


def test_combined_identity_when_saturated(rng):
    f, w, y, m = _base(rng)
    base = forward(f, w, y, m)
    zero = intra_forward(base.target_logits, np.ones(4), CFG)
    loss, grad = combined_forward(base, zero)
    np.testing.assert_array_equal(grad, base.grad_logits)
    assert loss == base.loss + zero.l_intra


def test_combined_additive():
    base = forward([[1.0, 0.0]], [[1.0, 0.0], [0.0, 1.0]], [0], MarginConfig(Scheme.NORM, scale_s=1.0))
    g = base.grad_logits.copy()
    g[0, 0] = -0.1
    base = replace(base, grad_logits=g)
    extra = IntraResult(l_intra=0.0, w_intra=0.5, per_sample_get=np.zeros(1), grad_target_logits=np.array([-0.4]))
    _, grad = combined_forward(base, extra)
    assert grad[0, 0] == pytest.approx(-0.5, abs=1e-15)
    with pytest.raises(ShapeMismatch):
        combined_forward(base, IntraResult(0.0, 0.5, np.zeros(2), np.zeros(2)))


@pytest.mark.parametrize("scheme", [Scheme.NORM, Scheme.MULTIPLICATIVE_ANGULAR, Scheme.ADDITIVE_COSINE,
                                    Scheme.ADDITIVE_ANGULAR])
def test_combined_gradient_finite_differences(rng, scheme):
    f, w, y, m = _base(rng, scheme=scheme)
    f *= 0.3  # keep logits in the unsaturated region
    icfg = IntraConfig.for_margin(m)
    base = forward(f, w, y, m)
    res = intra_forward(base.target_logits, base.target_probs, icfg)
    _, grad_logits = combined_forward(base, res)
    gf, gw = base.backprop(grad_logits)
    w_frozen, p_frozen = res.w_intra, base.target_probs.copy()

    def total(ff, ww):
        logits, _ = logits_forward(ff, ww, y, m)
        loss, _, _ = softmax_xent(logits, y)
        z = logits[np.arange(len(y)), y]
        return loss + w_frozen * np.mean((1 - p_frozen) * get_term(z, icfg))

    assert rel_err(gf, central_diff(lambda x: total(x, w), f)) < 1e-5
    assert rel_err(gw, central_diff(lambda x: total(f, x), w)) < 1e-5


def test_enhanced_gradient_bound(rng):
    f, w, y, m = _base(rng, n=10)
    base = forward(f, w, y, m)
    res = intra_forward(base.target_logits, base.target_probs, IntraConfig.for_margin(m))
    _, grad = combined_forward(base, res)
    t = grad[np.arange(10), y] * 10
    assert np.all(t <= 0) and np.all(t >= -(1 + res.w_intra))
