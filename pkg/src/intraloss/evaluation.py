"""Distribution statistics for trained embeddings.

Measures how tight and how round each class is on the sphere, how far apart
the classes sit, and how well cosine similarity verifies same/different
pairs under ten-fold threshold selection.
"""

from __future__ import annotations

import csv
import itertools
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateClass, InsufficientData, ShapeMismatch
from .geometry import l2_normalize_rows, tangent_basis
from .intra import IntraConfig, get_gradient
from .margins import MarginConfig, logits_forward, softmax_xent

N_FOLDS = 10


@dataclass(frozen=True)
class ClassStats:
    label: int
    count: int
    mean_direction: np.ndarray
    radius_p50: float
    radius_p95: float
    angles: np.ndarray


def mean_direction(embeddings) -> np.ndarray:
    m = np.asarray(embeddings, dtype=np.float64).mean(axis=0)
    norm = np.linalg.norm(m)
    if norm < 1e-9:
        raise DegenerateClass(f"class mean has norm {norm:.3e}")
    return m / norm


def class_statistics(embeddings, labels) -> dict[int, ClassStats]:
    """Per-class normalized mean direction and angular radius percentiles."""
    e = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    out = {}
    for lab in np.unique(labels):
        members = e[labels == lab]
        if members.shape[0] < 2:
            raise DegenerateClass(f"class {lab} has fewer than 2 samples")
        mu = mean_direction(members)
        angles = np.arccos(np.clip(members @ mu, -1.0, 1.0))
        p50, p95 = np.percentile(angles, [50, 95])
        out[int(lab)] = ClassStats(int(lab), members.shape[0], mu, float(p50), float(p95), angles)
    return out


def tangent_coordinates(members, mu) -> np.ndarray:
    """Log-map of unit vectors onto the tangent plane at ``mu``, in an orthonormal basis."""
    members = np.asarray(members, dtype=np.float64)
    cosines = np.clip(members @ mu, -1.0, 1.0)
    theta = np.arccos(cosines)
    t = members - cosines[:, None] * mu
    tn = np.linalg.norm(t, axis=1)
    safe = tn > 1e-15
    v = np.zeros_like(members)
    v[safe] = (theta[safe] / tn[safe])[:, None] * t[safe]
    return v @ tangent_basis(mu).T


def anisotropy_index(members, mu) -> float:
    """sqrt of the largest-to-smallest eigenvalue ratio of the tangent covariance."""
    members = np.asarray(members, dtype=np.float64)
    n, d = members.shape
    if n < d:
        raise DegenerateClass(f"need at least {d} samples for a {d}-dim anisotropy estimate, got {n}")
    if d < 3:
        return 1.0
    coords = tangent_coordinates(members, mu)
    cov = np.atleast_2d(np.cov(coords, rowvar=False)) + 1e-12 * np.eye(d - 1)
    ev = np.linalg.eigvalsh(cov)
    return float(math.sqrt(ev[-1] / ev[0]))


def interclass_angles(means: dict[int, np.ndarray]) -> dict[tuple[int, int], float]:
    out = {}
    for a, b in itertools.combinations(sorted(means), 2):
        out[(a, b)] = float(np.arccos(np.clip(means[a] @ means[b], -1.0, 1.0)))
    return out


def min_interclass_angle(embeddings, labels) -> float:
    e = l2_normalize_rows(embeddings)
    labels = np.asarray(labels)
    means = {int(k): mean_direction(e[labels == k]) for k in np.unique(labels)}
    return min(interclass_angles(means).values())


def margin_proxy(stats: dict[int, ClassStats]) -> float:
    """Smallest gap between two classes after subtracting both p95 radii."""
    means = {k: s.mean_direction for k, s in stats.items()}
    return min(
        ang - stats[a].radius_p95 - stats[b].radius_p95
        for (a, b), ang in interclass_angles(means).items()
    )


# ---------------------------------------------------------------------------
# verification


def _best_threshold(scores, issame):
    uniq = np.unique(scores)
    cands = (uniq[:-1] + uniq[1:]) / 2.0 if uniq.shape[0] > 1 else uniq
    pos = np.sort(scores[issame])
    neg = np.sort(scores[~issame])
    # predicted "same" iff score > threshold
    tp = pos.shape[0] - np.searchsorted(pos, cands, side="right")
    tn = np.searchsorted(neg, cands, side="right")
    acc = (tp + tn) / scores.shape[0]
    i = int(np.argmax(acc))  # first maximum == smallest threshold
    return float(cands[i])


def ten_fold_accuracy(scores, issame, n_folds: int = N_FOLDS) -> tuple[float, float]:
    """Mean held-out accuracy and the most frequently chosen threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    issame = np.asarray(issame, dtype=bool)
    if scores.shape != issame.shape:
        raise ShapeMismatch(f"scores {scores.shape} vs labels {issame.shape}")
    if scores.shape[0] < n_folds:
        raise InsufficientData(f"need at least {n_folds} pairs, got {scores.shape[0]}")
    folds = np.array_split(np.arange(scores.shape[0]), n_folds)
    accs, thresholds = [], []
    for k, test in enumerate(folds):
        train = np.concatenate([f for j, f in enumerate(folds) if j != k])
        t = _best_threshold(scores[train], issame[train])
        thresholds.append(t)
        accs.append(float(np.mean((scores[test] > t) == issame[test])))
    counts = Counter(thresholds)
    top = max(counts.values())
    best = min(t for t, c in counts.items() if c == top)
    # correctly rounded, so the result does not depend on summation order
    return math.fsum(accs) / n_folds, best


def pair_scores(embeddings, pairs) -> np.ndarray:
    e = l2_normalize_rows(embeddings)
    pairs = np.asarray(pairs)
    return np.clip(np.sum(e[pairs[:, 0]] * e[pairs[:, 1]], axis=1), -1.0, 1.0)


def verification_accuracy(embeddings, pairs, issame) -> tuple[float, float]:
    """Ten-fold cosine verification; ``pairs`` index rows of ``embeddings``."""
    return ten_fold_accuracy(pair_scores(embeddings, pairs), issame)


# ---------------------------------------------------------------------------
# reports


def distribution_report(embeddings, labels, pairs=None, issame=None) -> dict:
    """JSON-ready summary; embeddings need not be normalized."""
    e = l2_normalize_rows(embeddings)
    labels = np.asarray(labels)
    stats = class_statistics(e, labels)
    per_class = []
    for k in sorted(stats):
        s = stats[k]
        per_class.append({
            "label": k,
            "count": s.count,
            "mean_direction": [float(v) for v in s.mean_direction],
            "angular_radius_p50_rad": s.radius_p50,
            "angular_radius_p95_rad": s.radius_p95,
            "anisotropy_index": anisotropy_index(e[labels == k], s.mean_direction),
        })
    means = {k: s.mean_direction for k, s in stats.items()}
    glob = {
        "min_interclass_mean_angle_rad": min(interclass_angles(means).values()),
        "margin_proxy_rad": margin_proxy(stats),
        "mean_p95_radius_rad": float(np.mean([c["angular_radius_p95_rad"] for c in per_class])),
        "mean_anisotropy_index": float(np.mean([c["anisotropy_index"] for c in per_class])),
        "verification_accuracy": None,
        "best_threshold": None,
    }
    if pairs is not None:
        acc, thr = verification_accuracy(e, pairs, issame)
        glob["verification_accuracy"] = acc
        glob["best_threshold"] = thr
    return {"per_class": per_class, "global": glob}


@dataclass(frozen=True)
class SphereDump:
    sample_ids: np.ndarray
    labels: np.ndarray
    embeddings: np.ndarray
    z: np.ndarray
    p: np.ndarray
    grad_softmax: np.ndarray
    grad_intra: np.ndarray

    def write_csv(self, path):
        d = self.embeddings.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_id", "label"] + [f"e{i}" for i in range(d)]
                       + ["z", "p", "grad_softmax", "grad_intra"])
            for i in range(self.labels.shape[0]):
                floats = list(self.embeddings[i]) + [self.z[i], self.p[i], self.grad_softmax[i], self.grad_intra[i]]
                w.writerow([int(self.sample_ids[i]), int(self.labels[i])] + [repr(float(v)) for v in floats])

    @classmethod
    def read_csv(cls, path):
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = list(reader)
        d = sum(1 for h in header if h.startswith("e") and h[1:].isdigit())
        vals = np.array([[float(v) for v in r[2:]] for r in rows]).reshape(len(rows), d + 4)
        return cls(
            sample_ids=np.array([int(r[0]) for r in rows]),
            labels=np.array([int(r[1]) for r in rows]),
            embeddings=vals[:, :d],
            z=vals[:, d], p=vals[:, d + 1], grad_softmax=vals[:, d + 2], grad_intra=vals[:, d + 3],
        )


def sphere_dump(embeddings, labels, weights, margin: MarginConfig, intra: IntraConfig | None = None,
                lambda_now: float | None = None, sample_ids=None) -> SphereDump:
    """Per-sample target logit, probability and target-logit gradients.

    ``grad_softmax`` is ``P - 1``; ``grad_intra`` is ``w (1 - P) dGet/dz``
    with ``w`` the mean target probability over the dumped set, both
    without the batch ``1/n`` factor.
    """
    e = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    logits, cache = logits_forward(e, weights, labels, margin, lambda_now)
    rows = np.arange(labels.shape[0])
    _, _, target_log_p = softmax_xent(logits, cache["y"])
    z = logits[rows, cache["y"]]
    p = np.exp(target_log_p)
    if intra is not None:
        g_intra = p.mean() * (1.0 - p) * get_gradient(z, intra)
    else:
        g_intra = np.zeros_like(p)
    ids = rows if sample_ids is None else np.asarray(sample_ids)
    return SphereDump(ids, labels.copy(), l2_normalize_rows(e), z, p, p - 1.0, np.asarray(g_intra, dtype=np.float64))
