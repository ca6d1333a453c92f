"""Embedding backbones with hand-written backprop and a two-stage SGD loop.

Stage 1 optimizes the margin softmax loss alone. From ``stage2_start`` on,
the IntraLoss term joins (``L_s + L_intra``), or, for the negative control,
replaces it (``intra_only``).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import LabeledDataset
from .errors import NonFiniteLoss, ShapeMismatch
from .intra import IntraConfig, combined_forward, get_term, intra_forward
from .margins import MarginConfig, forward, lambda_at, logits_forward, non_smooth_mask, softmax_xent

log = logging.getLogger(__name__)

LOOKUP = "lookup"
MLP = "mlp"


class LookupTable:
    """One free embedding vector per training sample."""

    kind = LOOKUP

    def __init__(self, table):
        self.params = {"table": np.asarray(table, dtype=np.float64)}

    @classmethod
    def init(cls, num_rows, embed_dim, rng, scale=0.1):
        return cls(scale * rng.standard_normal((num_rows, embed_dim)))

    @property
    def embed_dim(self):
        return self.params["table"].shape[1]

    def forward(self, rows, inputs=None):
        return self.params["table"][rows], rows

    def backward(self, rows, grad_feats):
        g = np.zeros_like(self.params["table"])
        np.add.at(g, rows, grad_feats)
        return {"table": g}

    def copy(self):
        return LookupTable(self.params["table"].copy())


class MLPBackbone:
    """``tanh(x W1 + b1) W2 + b2``."""

    kind = MLP

    def __init__(self, w1, b1, w2, b2):
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in
                       (("w1", w1), ("b1", b1), ("w2", w2), ("b2", b2))}
        if self.params["w1"].shape[1] != self.params["w2"].shape[0]:
            raise ShapeMismatch("hidden dimensions of w1 and w2 disagree")

    @classmethod
    def init(cls, input_dim, hidden_dim, embed_dim, rng):
        w1 = rng.standard_normal((input_dim, hidden_dim)) / math.sqrt(input_dim)
        w2 = rng.standard_normal((hidden_dim, embed_dim)) / math.sqrt(hidden_dim)
        return cls(w1, np.zeros(hidden_dim), w2, np.zeros(embed_dim))

    @property
    def embed_dim(self):
        return self.params["w2"].shape[1]

    def forward(self, rows, inputs):
        x = np.asarray(inputs, dtype=np.float64)
        h = np.tanh(x @ self.params["w1"] + self.params["b1"])
        return h @ self.params["w2"] + self.params["b2"], (x, h)

    def backward(self, cache, grad_feats):
        x, h = cache
        dh = (grad_feats @ self.params["w2"].T) * (1.0 - h * h)
        return {
            "w1": x.T @ dh,
            "b1": dh.sum(axis=0),
            "w2": h.T @ grad_feats,
            "b2": grad_feats.sum(axis=0),
        }

    def copy(self):
        return MLPBackbone(**{k: v.copy() for k, v in self.params.items()})


def make_backbone(kind, *, num_rows, input_dim, embed_dim, hidden_dim, rng):
    if kind == LOOKUP:
        return LookupTable.init(num_rows, embed_dim, rng)
    if kind == MLP:
        return MLPBackbone.init(input_dim, hidden_dim, embed_dim, rng)
    raise ValueError(f"unknown backbone kind {kind!r}")


def init_class_weights(embed_dim, num_classes, rng):
    w = rng.standard_normal((embed_dim, num_classes))
    return w / np.linalg.norm(w, axis=0, keepdims=True)


def sgd_step(params, grads, state, lr, momentum, weight_decay):
    """Momentum SGD with L2 weight decay folded into the velocity.

    ``v <- momentum * v + grad + weight_decay * param``; ``param <- param - lr * v``.
    Returns new ``(params, state)`` dicts; inputs are not modified.
    """
    new_params, new_state = {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"{name}: grad {g.shape} vs param {p.shape}")
        v = state.get(name)
        v = np.zeros_like(p) if v is None else v
        v = momentum * v + g + weight_decay * p
        new_state[name] = v
        new_params[name] = p - lr * v
    return new_params, new_state


@dataclass(frozen=True)
class TrainConfig:
    margin: MarginConfig = field(default_factory=MarginConfig)
    intra: IntraConfig | None = None
    learning_rate: float = 0.01
    milestones: tuple[int, ...] | None = None
    lr_decay_factor: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    total_iterations: int = 2000
    stage2_start: int | None = None
    stage2_objective: str = "joint"
    seed: int = 0

    def __post_init__(self):
        if self.milestones is None:
            t = self.total_iterations
            object.__setattr__(self, "milestones", (int(0.4 * t), int(0.7 * t), int(0.9 * t)))
        else:
            object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if self.stage2_start is None:
            object.__setattr__(self, "stage2_start", int(0.2 * self.total_iterations))
        if not 0 <= self.stage2_start <= self.total_iterations:
            raise ValueError("stage2_start must lie in [0, total_iterations]")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if list(self.milestones) != sorted(self.milestones):
            raise ValueError("milestones must be non-decreasing")
        if self.lr_decay_factor < 1:
            raise ValueError("lr_decay_factor must be >= 1")
        if self.batch_size < 1 or self.total_iterations < 0:
            raise ValueError("batch_size must be >= 1 and total_iterations >= 0")
        if self.stage2_objective not in ("joint", "intra_only"):
            raise ValueError(f"stage2_objective must be 'joint' or 'intra_only', got {self.stage2_objective!r}")

    def lr_at(self, iteration):
        drops = sum(1 for m in self.milestones if iteration >= m)
        return self.learning_rate / self.lr_decay_factor ** drops


TRACE_COLUMNS = ("iter", "stage", "loss_s", "loss_intra", "w_intra", "mean_p", "lr")


@dataclass
class TrainTrace:
    records: list = field(default_factory=list)

    def append(self, **rec):
        self.records.append(tuple(rec[c] for c in TRACE_COLUMNS))

    def column(self, name):
        i = TRACE_COLUMNS.index(name)
        return np.array([r[i] for r in self.records])

    def __len__(self):
        return len(self.records)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_COLUMNS)
            for r in self.records:
                w.writerow([r[0], r[1]] + [repr(float(v)) for v in r[2:]])


@dataclass
class TrainResult:
    backbone: object
    class_weights: np.ndarray
    trace: TrainTrace
    # (backbone, class_weights) as they stood when stage 2 began, if it did
    stage1: tuple | None = None


def _batches(n, batch_size, rng):
    """Endless stream of index batches; reshuffles every epoch, drops nothing."""
    buf = np.empty(0, dtype=np.intp)
    while True:
        while buf.shape[0] < batch_size:
            buf = np.concatenate([buf, rng.permutation(n)])
        yield buf[:batch_size]
        buf = buf[batch_size:]


def embed_all(backbone, ds: LabeledDataset, split="train"):
    """Embeddings for every sample of a split.

    Lookup tables only hold training samples, so they cannot embed ``test``.
    """
    idx = ds.split_indices(split)
    if backbone.kind == LOOKUP:
        if split != "train":
            raise ValueError("a lookup-table backbone only embeds the training split")
        feats, _ = backbone.forward(np.arange(idx.shape[0]))
    else:
        feats, _ = backbone.forward(None, ds.inputs[idx])
    return feats, idx


def train(ds: LabeledDataset, backbone, cfg: TrainConfig, class_weights=None) -> TrainResult:
    """Run the two-stage schedule; the passed backbone is not mutated."""
    train_idx = ds.split_indices("train")
    x_train = ds.inputs[train_idx]
    y_train = ds.labels[train_idx]
    if backbone.kind == LOOKUP and backbone.params["table"].shape[0] != train_idx.shape[0]:
        raise ShapeMismatch("lookup table needs one row per training sample")

    init_ss, shuffle_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    backbone = backbone.copy()
    if class_weights is None:
        class_weights = init_class_weights(backbone.embed_dim, ds.num_classes, np.random.default_rng(init_ss))
    weights = np.array(class_weights, dtype=np.float64)
    if weights.shape != (backbone.embed_dim, ds.num_classes):
        raise ShapeMismatch(f"class weights {weights.shape}")

    batch_size = min(cfg.batch_size, train_idx.shape[0])
    batches = _batches(train_idx.shape[0], batch_size, np.random.default_rng(shuffle_ss))
    state_b, state_w = {}, {}
    trace = TrainTrace()
    stage1 = None

    for it in range(cfg.total_iterations):
        stage = 2 if it >= cfg.stage2_start else 1
        if it == cfg.stage2_start and it > 0:
            stage1 = (backbone.copy(), weights.copy())
        rows = next(batches)
        feats, cache = backbone.forward(rows, x_train[rows])
        if not np.all(np.isfinite(feats)):
            # diverged parameters surface as NaN/inf embeddings before any loss exists
            log.error("non-finite embeddings at iteration %d", it)
            err = NonFiniteLoss(it, f"non-finite embeddings at iteration {it}")
            err.trace = trace
            raise err
        base = forward(feats, weights, y_train[rows], cfg.margin, lambda_at(it, cfg.margin.lambda_schedule))
        mean_p = float(base.target_probs.mean())
        loss_intra = 0.0
        if stage == 2 and cfg.intra is not None:
            res = intra_forward(base.target_logits, base.target_probs, cfg.intra)
            loss_intra = res.l_intra
            if cfg.stage2_objective == "joint":
                total, grad_logits = combined_forward(base, res)
            else:
                total = res.l_intra
                grad_logits = np.zeros_like(base.grad_logits)
                grad_logits[np.arange(rows.shape[0]), y_train[rows]] = res.grad_target_logits
            grad_f, grad_w = base.backprop(grad_logits)
        else:
            total = base.loss
            grad_f, grad_w = base.grad_features, base.grad_weights
        lr = cfg.lr_at(it)
        if not (math.isfinite(base.loss) and math.isfinite(total)):
            log.error("non-finite loss at iteration %d", it)
            err = NonFiniteLoss(it)
            err.trace = trace
            raise err

        grads = backbone.backward(cache, grad_f)
        backbone.params, state_b = sgd_step(backbone.params, grads, state_b, lr, cfg.momentum, cfg.weight_decay)
        new_w, state_w = sgd_step({"w": weights}, {"w": grad_w}, state_w, lr, cfg.momentum, cfg.weight_decay)
        weights = new_w["w"]
        trace.append(iter=it, stage=stage, loss_s=base.loss, loss_intra=loss_intra,
                     w_intra=mean_p, mean_p=mean_p, lr=lr)
    return TrainResult(backbone=backbone, class_weights=weights, trace=trace, stage1=stage1)


def mean_get(backbone, weights, ds: LabeledDataset, cfg: TrainConfig, iteration=None):
    """Average gradient-enhancing term over the whole training split."""
    feats, idx = embed_all(backbone, ds, "train")
    lam = lambda_at(iteration or 0, cfg.margin.lambda_schedule)
    logits, _ = logits_forward(feats, weights, ds.labels[idx], cfg.margin, lam)
    z = logits[np.arange(idx.shape[0]), ds.labels[idx]]
    return float(np.mean(get_term(z, cfg.intra)))


def training_accuracy(backbone, weights, ds: LabeledDataset, split="train"):
    """Nearest-class-agent accuracy (argmax cosine, no margin)."""
    feats, idx = embed_all(backbone, ds, split)
    fn = feats / np.linalg.norm(feats, axis=1, keepdims=True)
    wn = weights / np.linalg.norm(weights, axis=0, keepdims=True)
    return float(np.mean(np.argmax(fn @ wn, axis=1) == ds.labels[idx]))


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradcheckReport:
    max_rel_err: dict
    skipped: list
    tolerance: float

    @property
    def worst(self):
        return max(self.max_rel_err.values(), default=0.0)

    @property
    def passed(self):
        return self.worst < self.tolerance


def rel_error(analytic, numeric, floor=1e-8):
    """Max abs deviation scaled by the larger of the two gradients' max magnitude."""
    a = np.asarray(analytic)
    b = np.asarray(numeric)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0), floor)
    return float(np.max(np.abs(a - b), initial=0.0) / scale)


def _objective(backbone, weights, rows, inputs, labels, cfg, lam, frozen):
    feats, _ = backbone.forward(rows, inputs)
    return _feature_objective(feats, weights, labels, cfg, lam, frozen)


def _feature_objective(feats, weights, labels, cfg, lam, frozen):
    logits, _ = logits_forward(feats, weights, labels, cfg.margin, lam)
    loss, _, _ = softmax_xent(logits, labels)
    if frozen is not None:
        w_intra, p = frozen
        z = logits[np.arange(labels.shape[0]), labels]
        loss += w_intra * float(np.mean((1.0 - p) * get_term(z, cfg.intra)))
    return loss


def gradcheck(backbone, weights, batch, cfg: TrainConfig, lambda_now=None, h=1e-6, tol=1e-5,
              corrupt=1.0) -> GradcheckReport:
    """Compare analytic gradients of ``L_s (+ L_intra)`` against central differences.

    ``batch`` is ``(rows, inputs, labels)``. Samples whose target cosine is
    within 1e-4 of a kink are dropped and listed in ``skipped``. IntraLoss
    weights ``w_intra`` and ``1 - P`` are frozen at the base point, matching
    the stop-gradient convention of the analytic path. ``corrupt`` scales the
    analytic gradient and exists only as a negative-control hook.
    """
    rows, inputs, labels = batch
    rows = np.asarray(rows)
    labels = np.asarray(labels)
    inputs = None if inputs is None else np.asarray(inputs, dtype=np.float64)
    lam = cfg.margin.lambda_schedule.min if lambda_now is None else lambda_now
    weights = np.array(weights, dtype=np.float64)

    feats, _ = backbone.forward(rows, inputs)
    fn = feats / np.linalg.norm(feats, axis=1, keepdims=True)
    wn = weights / np.linalg.norm(weights, axis=0, keepdims=True)
    cos_t = np.clip(np.sum(fn * wn[:, labels].T, axis=1), -1.0, 1.0)
    flagged = non_smooth_mask(cos_t, cfg.margin)
    skipped = [int(i) for i in np.flatnonzero(flagged)]
    keep = ~flagged
    if not keep.any():
        return GradcheckReport(max_rel_err={}, skipped=skipped, tolerance=tol)
    rows, labels = rows[keep], labels[keep]
    inputs = None if inputs is None else inputs[keep]

    feats, cache = backbone.forward(rows, inputs)
    base = forward(feats, weights, labels, cfg.margin, lam)
    frozen = None
    if cfg.intra is not None:
        res = intra_forward(base.target_logits, base.target_probs, cfg.intra)
        frozen = (res.w_intra, base.target_probs.copy())
        _, grad_logits = combined_forward(base, res)
    else:
        grad_logits = base.grad_logits
    grad_f, grad_w = base.backprop(grad_logits)
    analytic = {f"backbone.{k}": v for k, v in backbone.backward(cache, grad_f).items()}
    analytic["class_weights"] = grad_w
    analytic["features"] = grad_f

    work = backbone.copy()
    tensors = {f"backbone.{k}": v for k, v in work.params.items()}
    tensors["class_weights"] = weights

    def J():
        return _objective(work, weights, rows, inputs, labels, cfg, lam, frozen)

    errs = {}
    for name, arr in tensors.items():
        num = np.zeros_like(arr)
        if name == "backbone.table":
            # only rows in the batch carry gradient
            coords = [(r, j) for r in np.unique(rows) for j in range(arr.shape[1])]
        else:
            coords = list(np.ndindex(arr.shape))
        for ix in coords:
            old = arr[ix]
            arr[ix] = old + h
            up = J()
            arr[ix] = old - h
            down = J()
            arr[ix] = old
            num[ix] = (up - down) / (2 * h)
        errs[name] = rel_error(corrupt * analytic[name], num)

    # features as free variables, independent of the backbone
    feats = np.array(feats, dtype=np.float64)
    num = np.zeros_like(feats)
    for ix in np.ndindex(feats.shape):
        old = feats[ix]
        feats[ix] = old + h
        up = _feature_objective(feats, weights, labels, cfg, lam, frozen)
        feats[ix] = old - h
        down = _feature_objective(feats, weights, labels, cfg, lam, frozen)
        feats[ix] = old
        num[ix] = (up - down) / (2 * h)
    errs["features"] = rel_error(corrupt * analytic["features"], num)
    return GradcheckReport(max_rel_err=errs, skipped=skipped, tolerance=tol)


def with_intra(cfg: TrainConfig, alpha=5.0, gamma=0.9) -> TrainConfig:
    return replace(cfg, intra=IntraConfig.for_margin(cfg.margin, alpha, gamma))
