"""IntraLoss: a softplus gradient-enhancing term on the target logit.

For each sample the term ``Get = softplus(alpha * (beta - z)) / alpha``
keeps pushing the target logit ``z`` towards the scheme's optimum ``O_p``
after the softmax gradient ``P - 1`` has saturated. ``beta = O_p - gamma``
is the logit where the extra gradient is exactly -0.5.

The batch loss is ``w * mean((1 - P) * Get)`` with ``w = mean(P)``. Both
probability weights are held constant during backprop, so the gradient
w.r.t. ``z`` is the weighted sigmoid ``-w (1 - P) / (1 + exp(-alpha (beta - z)))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyBatch, ShapeMismatch, UnsupportedScheme
from .margins import LossResult, MarginConfig, Scheme


def optimum_point(config: MarginConfig) -> float:
    """Largest attainable target logit, i.e. the logit at zero angle."""
    s = config.scale_s
    if config.scheme is Scheme.NORM:
        return s
    if config.scheme is Scheme.MULTIPLICATIVE_ANGULAR:
        return s * math.cos(0.0 * config.m1)
    if config.scheme is Scheme.ADDITIVE_COSINE:
        return s * (math.cos(0.0) - config.m2)
    if config.scheme is Scheme.ADDITIVE_ANGULAR:
        return s * math.cos(0.0 + config.m3)
    raise UnsupportedScheme(f"no bounded optimum for scheme {config.scheme.value!r}")


@dataclass(frozen=True)
class IntraConfig:
    alpha: float = 5.0
    gamma: float = 0.9
    optimum_point: float = 19.5

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")

    @classmethod
    def for_margin(cls, margin: MarginConfig, alpha: float = 5.0, gamma: float = 0.9) -> "IntraConfig":
        return cls(alpha=alpha, gamma=gamma, optimum_point=optimum_point(margin))

    @property
    def beta(self) -> float:
        return self.optimum_point - self.gamma

    # The probability weights are always treated as constants.
    stop_gradient_weights = True


def maxout_term(z, config: IntraConfig):
    """Hinge ``max(beta - z, 0)``; reference only, not used for training."""
    return np.maximum(config.beta - np.asarray(z, dtype=np.float64), 0.0)


def get_term(z, config: IntraConfig):
    u = config.beta - np.asarray(z, dtype=np.float64)
    out = np.maximum(u, 0.0) + np.log1p(np.exp(-config.alpha * np.abs(u))) / config.alpha
    return float(out) if out.ndim == 0 else out


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def get_gradient(z, config: IntraConfig):
    u = config.beta - np.asarray(z, dtype=np.float64)
    out = -_sigmoid(config.alpha * u)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class IntraResult:
    l_intra: float
    w_intra: float
    per_sample_get: np.ndarray
    grad_target_logits: np.ndarray


def intra_forward(target_logits, target_probs, config: IntraConfig) -> IntraResult:
    z = np.asarray(target_logits, dtype=np.float64)
    p = np.asarray(target_probs, dtype=np.float64)
    if z.size == 0:
        raise EmptyBatch("IntraLoss needs at least one sample")
    if z.shape != p.shape:
        raise ShapeMismatch(f"logits {z.shape} vs probs {p.shape}")
    n = z.shape[0]
    w = float(p.mean())
    get = np.asarray(get_term(z, config), dtype=np.float64).reshape(z.shape)
    slack = 1.0 - p
    l_intra = w * float(np.mean(slack * get))
    grad = w * slack * np.asarray(get_gradient(z, config)).reshape(z.shape) / n
    return IntraResult(l_intra=l_intra, w_intra=w, per_sample_get=get, grad_target_logits=grad)


def combined_forward(base: LossResult, intra: IntraResult) -> tuple[float, np.ndarray]:
    """Total loss ``L_s + L_intra`` and its gradient w.r.t. the logits."""
    n = base.grad_logits.shape[0]
    if intra.grad_target_logits.shape != (n,):
        raise ShapeMismatch(f"intra batch {intra.grad_target_logits.shape} vs base batch {n}")
    grad = base.grad_logits.copy()
    labels = base._cache["y"]
    grad[np.arange(n), labels] += intra.grad_target_logits
    return base.loss + intra.l_intra, grad
