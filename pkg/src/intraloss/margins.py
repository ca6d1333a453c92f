"""Hypersphere softmax losses with angular/cosine margins.

Every scheme is a transform applied to the target logit only:

    norm                    s * cos(theta)
    multiplicative_angular  s * psi(theta)        (SphereFace, normalized)
    additive_cosine         s * (cos(theta) - m2) (AM-Softmax / CosFace)
    additive_angular        s * cos(theta + m3)   (ArcFace)

``plain`` is the unnormalized zero-bias softmax over raw inner products.
Gradients are derived by hand and chained through the L2 normalization of
features (rows) and class weights (columns).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import chebyshev

from .errors import DomainError, LabelOutOfRange, ShapeMismatch, ZeroNormRow
from .geometry import as_matrix, normalize_jacobian_apply

_DOMAIN_TOL = 1e-12


class Scheme(str, enum.Enum):
    PLAIN = "plain"
    NORM = "norm"
    MULTIPLICATIVE_ANGULAR = "multiplicative_angular"
    ADDITIVE_COSINE = "additive_cosine"
    ADDITIVE_ANGULAR = "additive_angular"


@dataclass(frozen=True)
class LambdaSchedule:
    """Hyperbolic annealing ``max(min, base / (1 + decay * t))``."""

    base: float = 1000.0
    min: float = 5.0
    decay: float = 0.1


@dataclass(frozen=True)
class MarginConfig:
    scheme: Scheme = Scheme.ADDITIVE_COSINE
    scale_s: float = 30.0
    m1: int = 4
    m2: float = 0.35
    m3: float = 0.5
    lambda_schedule: LambdaSchedule = field(default_factory=LambdaSchedule)

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        if not self.scale_s > 0:
            raise DomainError(f"scale_s must be positive, got {self.scale_s}")
        if int(self.m1) != self.m1 or self.m1 < 1:
            raise DomainError(f"m1 must be an integer >= 1, got {self.m1}")
        object.__setattr__(self, "m1", int(self.m1))
        if not 0.0 <= self.m2 < 1.0:
            raise DomainError(f"m2 must lie in [0, 1), got {self.m2}")
        if not 0.0 <= self.m3 < math.pi / 2:
            raise DomainError(f"m3 must lie in [0, pi/2), got {self.m3}")

    @property
    def normalized(self) -> bool:
        return self.scheme is not Scheme.PLAIN


def lambda_at(iteration: int, schedule: LambdaSchedule) -> float:
    return max(schedule.min, schedule.base / (1.0 + schedule.decay * iteration))


def _segment(theta, m1):
    k = np.floor(m1 * np.asarray(theta) / math.pi)
    return np.clip(k, 0, m1 - 1)


def psi(theta: float, m1: int, lam: float) -> float:
    """Monotone extension of ``cos(m1 * theta)`` over ``[0, pi]``."""
    if not (-_DOMAIN_TOL <= theta <= math.pi + _DOMAIN_TOL):
        raise DomainError(f"theta={theta} outside [0, pi]")
    theta = min(max(theta, 0.0), math.pi)
    k = int(_segment(theta, m1))
    sign = -1.0 if k % 2 else 1.0
    return (sign * math.cos(m1 * theta) - 2 * k + lam * math.cos(theta)) / (1.0 + lam)


def _check_cos(cos_theta):
    c = np.asarray(cos_theta, dtype=np.float64)
    if np.any(np.abs(c) > 1.0 + _DOMAIN_TOL) or not np.all(np.isfinite(c)):
        raise DomainError("cosine outside [-1, 1]")
    return np.clip(c, -1.0, 1.0)


def _transform(c: np.ndarray, config: MarginConfig, lam: float):
    """Target logits and their derivative w.r.t. the cosine, elementwise."""
    s = config.scale_s
    scheme = config.scheme
    if scheme in (Scheme.NORM, Scheme.PLAIN):
        return s * c, np.full_like(c, s)
    if scheme is Scheme.ADDITIVE_COSINE:
        return s * (c - config.m2), np.full_like(c, s)
    if scheme is Scheme.ADDITIVE_ANGULAR:
        cm, sm = math.cos(config.m3), math.sin(config.m3)
        sin_t = np.sqrt(np.maximum(1.0 - c * c, 0.0))
        z = s * (c * cm - sin_t * sm)
        with np.errstate(divide="ignore", invalid="ignore"):
            dz = s * (cm + sm * c / sin_t)
        return z, dz
    # multiplicative angular: (-1)^k cos(m1 theta) == (-1)^k T_m1(cos theta)
    m1 = config.m1
    k = _segment(np.arccos(c), m1)
    sign = np.where(k % 2 == 1, -1.0, 1.0)
    basis = np.zeros(m1 + 1)
    basis[m1] = 1.0
    t_m = chebyshev.chebval(c, basis)
    dt_m = chebyshev.chebval(c, chebyshev.chebder(basis))
    z = s * (sign * t_m - 2.0 * k + lam * c) / (1.0 + lam)
    dz = s * (sign * dt_m + lam) / (1.0 + lam)
    return z, dz


def target_logit(cos_theta: float, config: MarginConfig, lam: float | None = None) -> float:
    c = _check_cos(cos_theta)
    if lam is None:
        lam = config.lambda_schedule.min
    z, _ = _transform(np.atleast_1d(c), config, lam)
    return float(z[0])


def decision_boundary_residual(cos_t1: float, cos_t2: float, config: MarginConfig) -> float:
    """Class-1 side of the binary decision surface; positive when class 1 wins.

    The multiplicative scheme uses the monotone ``psi`` with ``lam = 0``,
    which equals ``cos(m1 * theta1)`` on ``[0, pi / m1]``.
    """
    c1 = float(_check_cos(cos_t1))
    c2 = float(_check_cos(cos_t2))
    scheme = config.scheme
    if scheme in (Scheme.NORM, Scheme.PLAIN):
        return c1 - c2
    if scheme is Scheme.ADDITIVE_COSINE:
        return (c1 - config.m2) - c2
    if scheme is Scheme.ADDITIVE_ANGULAR:
        return c1 * math.cos(config.m3) - math.sqrt(max(1.0 - c1 * c1, 0.0)) * math.sin(config.m3) - c2
    return psi(math.acos(c1), config.m1, 0.0) - c2


@dataclass(frozen=True)
class LossResult:
    loss: float
    target_logits: np.ndarray
    target_probs: np.ndarray
    logits: np.ndarray
    grad_logits: np.ndarray
    grad_features: np.ndarray
    grad_weights: np.ndarray
    _cache: dict = field(repr=False, compare=False)

    def backprop(self, grad_logits) -> tuple[np.ndarray, np.ndarray]:
        """Chain an arbitrary logit gradient back to (features, weights)."""
        return _backward(self._cache, np.asarray(grad_logits, dtype=np.float64))


def _check_inputs(feats, weights, labels):
    f = as_matrix(feats)
    w = as_matrix(weights)
    y = np.asarray(labels)
    if f.shape[1] != w.shape[0]:
        raise ShapeMismatch(f"feats {f.shape} incompatible with weights {w.shape}")
    if y.shape != (f.shape[0],):
        raise ShapeMismatch(f"labels shape {y.shape} does not match batch size {f.shape[0]}")
    if f.shape[0] == 0:
        raise ShapeMismatch("empty batch")
    if y.size and (not np.issubdtype(y.dtype, np.integer) or y.min() < 0 or y.max() >= w.shape[1]):
        raise LabelOutOfRange(f"labels must be integers in [0, {w.shape[1]})")
    return f, w, y.astype(np.intp)


def logits_forward(feats, weights, labels, config: MarginConfig, lambda_now: float | None = None):
    """Margin-modified logit matrix plus the cache needed for backprop."""
    f, w, y = _check_inputs(feats, weights, labels)
    if lambda_now is None:
        lambda_now = config.lambda_schedule.min
    rows = np.arange(f.shape[0])
    if config.normalized:
        f_norm = np.linalg.norm(f, axis=1)
        w_norm = np.linalg.norm(w, axis=0)
        if np.any(~(f_norm > 1e-30)) or np.any(~(w_norm > 1e-30)):
            raise ZeroNormRow("zero-norm feature or class weight")
        fn = f / f_norm[:, None]
        wn = w / w_norm[None, :]
        cos = np.clip(fn @ wn, -1.0, 1.0)
        logits = config.scale_s * cos
        z, dz = _transform(cos[rows, y], config, lambda_now)
        logits[rows, y] = z
    else:
        fn, wn, cos = f, w, None
        logits = f @ w
        dz = np.ones(f.shape[0])
    cache = {"f": f, "w": w, "fn": fn, "wn": wn, "y": y, "dz": dz, "config": config, "cos": cos}
    return logits, cache


def _backward(cache, grad_logits):
    config = cache["config"]
    y = cache["y"]
    rows = np.arange(y.shape[0])
    if grad_logits.shape != (cache["f"].shape[0], cache["w"].shape[1]):
        raise ShapeMismatch(f"grad_logits shape {grad_logits.shape}")
    if not config.normalized:
        return grad_logits @ cache["w"].T, cache["f"].T @ grad_logits
    d_cos = config.scale_s * grad_logits
    d_cos[rows, y] = grad_logits[rows, y] * cache["dz"]
    d_fn = d_cos @ cache["wn"].T
    d_wn = cache["fn"].T @ d_cos
    grad_f = normalize_jacobian_apply(cache["f"], d_fn)
    grad_w = normalize_jacobian_apply(cache["w"].T, d_wn.T).T
    return grad_f, grad_w


def softmax_xent(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy, row softmax, and target log-probabilities."""
    rows = np.arange(logits.shape[0])
    top = np.argmax(logits, axis=1)
    shifted = logits - logits[rows, top][:, None]
    # log1p over the non-max terms keeps precision when one class dominates
    rest = np.exp(shifted)
    rest[rows, top] = 0.0
    log_norm = np.log1p(rest.sum(axis=1, keepdims=True))
    log_p = shifted - log_norm
    target_log_p = log_p[rows, labels]
    return float(-target_log_p.mean()), np.exp(log_p), target_log_p


def forward(feats, weights, labels, config: MarginConfig, lambda_now: float | None = None) -> LossResult:
    logits, cache = logits_forward(feats, weights, labels, config, lambda_now)
    y = cache["y"]
    n = y.shape[0]
    rows = np.arange(n)
    loss, probs, target_log_p = softmax_xent(logits, y)
    grad_logits = probs.copy()
    grad_logits[rows, y] -= 1.0
    grad_logits /= n
    grad_f, grad_w = _backward(cache, grad_logits)
    return LossResult(
        loss=loss,
        target_logits=logits[rows, y].copy(),
        target_probs=np.exp(target_log_p),
        logits=logits,
        grad_logits=grad_logits,
        grad_features=grad_f,
        grad_weights=grad_w,
        _cache=cache,
    )


def non_smooth_mask(cos_target: np.ndarray, config: MarginConfig, tol: float = 1e-4) -> np.ndarray:
    """Samples whose target cosine sits where the margin transform has a kink."""
    c = np.asarray(cos_target, dtype=np.float64)
    if not config.normalized:
        return np.zeros(c.shape, dtype=bool)
    mask = np.abs(c) > 1.0 - tol
    if config.scheme is Scheme.MULTIPLICATIVE_ANGULAR:
        theta = np.arccos(np.clip(c, -1.0, 1.0))
        bounds = np.arange(1, config.m1) * math.pi / config.m1
        if bounds.size:
            mask |= np.min(np.abs(theta[:, None] - bounds[None, :]), axis=1) < tol
    return mask
