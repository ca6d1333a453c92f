"""Run configuration parsing and the train/evaluate/compare pipelines."""

from __future__ import annotations

import copy
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import data as data_mod
from .data import DatasetSpec, LabeledDataset, generate, verification_pairs
from .errors import ConfigError, InvalidSpec, NonFiniteLoss
from .evaluation import distribution_report, sphere_dump
from .intra import IntraConfig
from .margins import LambdaSchedule, MarginConfig, Scheme, lambda_at
from .trainer import (
    LOOKUP,
    MLP,
    TrainConfig,
    TrainResult,
    embed_all,
    make_backbone,
    train,
    training_accuracy,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

_SECTIONS = {
    "dataset": {"num_classes", "samples_per_class", "input_dim", "cluster_spread", "elongation"},
    "margin": {"scheme", "scale_s", "m1", "m2", "m3", "lambda"},
    "lambda": {"base", "min", "decay"},
    "intra": {"enabled", "alpha", "gamma"},
    "backbone": {"kind", "embed_dim", "hidden_dim"},
    "train": {"learning_rate", "milestones", "lr_decay_factor", "momentum", "weight_decay", "batch_size",
              "total_iterations", "stage2_start", "stage2_objective"},
    "eval": {"num_pairs", "split"},
    "gradcheck": {"batch_size", "num_batches", "num_classes", "input_dim", "hidden_dim"},
}
_TOP = {"seed", "seeds", "dataset_path", "name", "runs"} | set(_SECTIONS) - {"lambda"}
_RUN_KEYS = {"name", "margin", "intra", "backbone", "train"}


@dataclass(frozen=True)
class BackboneSpec:
    kind: str = LOOKUP
    embed_dim: int = 3
    hidden_dim: int = 32


@dataclass(frozen=True)
class EvalSpec:
    num_pairs: int = 1000
    split: str = "auto"


@dataclass(frozen=True)
class GradcheckSpec:
    batch_size: int = 4
    num_batches: int = 3
    num_classes: int = 4
    input_dim: int = 4
    hidden_dim: int = 5


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    margin: MarginConfig = field(default_factory=MarginConfig)
    intra: IntraConfig | None = None
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvalSpec = field(default_factory=EvalSpec)
    gradcheck: GradcheckSpec = field(default_factory=GradcheckSpec)
    seed: int = 0
    dataset_path: str | None = None
    name: str = "run"

    def seeds(self):
        """Independent integer seeds for data, init, shuffling and pairs."""
        children = np.random.SeedSequence(self.seed).spawn(4)
        return {k: int(c.generate_state(1, dtype=np.uint32)[0])
                for k, c in zip(("data", "init", "shuffle", "pairs"), children)}


def _check_keys(section, table, allowed):
    if not isinstance(table, dict):
        raise ConfigError(f"[{section}] must be a table")
    unknown = set(table) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")


def _margin(table) -> MarginConfig:
    _check_keys("margin", table, _SECTIONS["margin"])
    kw = {k: v for k, v in table.items() if k != "lambda"}
    if "lambda" in table:
        _check_keys("margin.lambda", table["lambda"], _SECTIONS["lambda"])
        kw["lambda_schedule"] = LambdaSchedule(**table["lambda"])
    if "scheme" in kw:
        try:
            kw["scheme"] = Scheme(kw["scheme"])
        except ValueError:
            choices = ", ".join(s.value for s in Scheme)
            raise ConfigError(f"margin.scheme: {kw['scheme']!r} is not one of {choices}") from None
    try:
        return MarginConfig(**kw)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"margin: {e}") from None


def _intra(table, margin: MarginConfig) -> IntraConfig | None:
    if table is None:
        return None
    _check_keys("intra", table, _SECTIONS["intra"])
    if not table.get("enabled", True):
        return None
    try:
        return IntraConfig.for_margin(margin, alpha=table.get("alpha", 5.0), gamma=table.get("gamma", 0.9))
    except ValueError as e:
        raise ConfigError(f"intra: {e}") from None


def _build(raw: dict) -> RunConfig:
    ds_raw = raw.get("dataset", {})
    _check_keys("dataset", ds_raw, _SECTIONS["dataset"])
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    margin = _margin(raw.get("margin", {}))
    intra = _intra(raw.get("intra"), margin)
    bb_raw = raw.get("backbone", {})
    _check_keys("backbone", bb_raw, _SECTIONS["backbone"])
    backbone = BackboneSpec(**bb_raw)
    if backbone.kind not in (LOOKUP, MLP):
        raise ConfigError(f"backbone.kind: {backbone.kind!r} is not one of lookup, mlp")
    tr_raw = raw.get("train", {})
    _check_keys("train", tr_raw, _SECTIONS["train"])
    ev_raw = raw.get("eval", {})
    _check_keys("eval", ev_raw, _SECTIONS["eval"])
    evaluation = EvalSpec(**ev_raw)
    if evaluation.split not in ("auto", "train", "test"):
        raise ConfigError(f"eval.split: {evaluation.split!r} is not one of auto, train, test")
    gc_raw = raw.get("gradcheck", {})
    _check_keys("gradcheck", gc_raw, _SECTIONS["gradcheck"])

    cfg = RunConfig(margin=margin, intra=intra, backbone=backbone, evaluation=evaluation,
                    gradcheck=GradcheckSpec(**gc_raw), seed=seed,
                    dataset_path=raw.get("dataset_path"), name=raw.get("name", "run"))
    seeds = cfg.seeds()
    dataset = DatasetSpec(**ds_raw, seed=seeds["data"])
    try:
        dataset.validate()
    except InvalidSpec as e:
        raise ConfigError(f"dataset: {e}") from None
    try:
        train_cfg = TrainConfig(margin=margin, intra=intra, seed=seeds["shuffle"], **tr_raw)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"train: {e}") from None
    return replace(cfg, dataset=dataset, train=train_cfg)


def parse_config(raw: dict, seed_override: int | None = None) -> RunConfig:
    raw = copy.deepcopy(raw)
    _check_keys("top level", raw, _TOP)
    raw.pop("runs", None)
    raw.pop("seeds", None)
    if seed_override is not None:
        raw["seed"] = seed_override
    return _build(raw)


def load_raw(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None


def load_config(path, seed_override=None) -> RunConfig:
    return parse_config(load_raw(path), seed_override)


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def comparison_configs(raw: dict, seed_override=None) -> tuple[list[tuple[str, list[RunConfig]]], list[int]]:
    """Expand ``[[runs]]`` overrides into one config list per run (one per seed)."""
    _check_keys("top level", raw, _TOP)
    runs = raw.get("runs")
    if not isinstance(runs, list) or len(runs) < 2:
        raise ConfigError("compare needs at least two [[runs]] entries")
    if seed_override is not None:
        seeds = [seed_override]
    else:
        seeds = raw.get("seeds", [raw.get("seed", 0)])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise ConfigError("seeds must be a non-empty list of non-negative integers")
    shared = {k: v for k, v in raw.items() if k not in ("runs", "seeds")}
    out = []
    for i, run in enumerate(runs):
        _check_keys(f"runs[{i}]", run, _RUN_KEYS)
        merged = _merge(shared, run)
        # an [intra] table in the shared section must not leak into runs that set none
        if "intra" not in run and "intra" in shared:
            merged["intra"] = shared["intra"]
        name = run.get("name", f"run{i}")
        merged["name"] = name
        out.append((name, [_build({**merged, "seed": s}) for s in seeds]))
    return out, seeds


# ---------------------------------------------------------------------------
# pipeline


def load_dataset(cfg: RunConfig, base_dir: Path | None = None) -> LabeledDataset:
    if cfg.dataset_path is None:
        return generate(cfg.dataset)
    path = Path(cfg.dataset_path)
    if not path.is_absolute() and base_dir is not None:
        path = base_dir / path
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    return data_mod.read_csv(path)


def eval_split(cfg: RunConfig) -> str:
    if cfg.evaluation.split != "auto":
        return cfg.evaluation.split
    return "train" if cfg.backbone.kind == LOOKUP else "test"


@dataclass
class RunOutcome:
    config: RunConfig
    dataset: LabeledDataset
    result: TrainResult
    report: dict


def run_training(cfg: RunConfig, ds: LabeledDataset) -> RunOutcome:
    seeds = cfg.seeds()
    n_train = ds.split_indices("train").shape[0]
    backbone = make_backbone(cfg.backbone.kind, num_rows=n_train, input_dim=ds.inputs.shape[1],
                             embed_dim=cfg.backbone.embed_dim, hidden_dim=cfg.backbone.hidden_dim,
                             rng=np.random.default_rng(seeds["init"]))
    result = train(ds, backbone, cfg.train)
    split = eval_split(cfg)
    feats, idx = embed_all(result.backbone, ds, split)
    pairs, issame = verification_pairs(ds, cfg.evaluation.num_pairs, seeds["pairs"], split=split)
    # pairs hold global sample indices; map them to rows of ``feats``
    pos = np.full(ds.labels.shape[0], -1)
    pos[idx] = np.arange(idx.shape[0])
    report = distribution_report(feats, ds.labels[idx], pos[pairs], issame)
    report["run"] = {
        "name": cfg.name,
        "seed": cfg.seed,
        "scheme": cfg.margin.scheme.value,
        "intra": cfg.intra is not None,
        "backbone": cfg.backbone.kind,
        "eval_split": split,
        "final_train_accuracy": training_accuracy(result.backbone, result.class_weights, ds),
        "final_loss_s": float(result.trace.column("loss_s")[-1]) if len(result.trace) else None,
        "final_mean_p": float(result.trace.column("mean_p")[-1]) if len(result.trace) else None,
    }
    return RunOutcome(cfg, ds, result, report)


def _model_json(result: TrainResult) -> dict:
    return {
        "backbone": {
            "kind": result.backbone.kind,
            "params": {k: v.tolist() for k, v in result.backbone.params.items()},
        },
        "class_weights": result.class_weights.tolist(),
    }


def write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=False)
        fh.write("\n")


def write_outputs(outcome: RunOutcome, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg, ds, result = outcome.config, outcome.dataset, outcome.result
    result.trace.write_csv(out_dir / "trace.csv")
    write_json(_model_json(result), out_dir / "model.json")
    write_json(outcome.report, out_dir / "report.json")
    lam = lambda_at(cfg.train.total_iterations, cfg.margin.lambda_schedule)
    splits = ["train"] if cfg.backbone.kind == LOOKUP else ["train", "test"]
    for split in splits:
        feats, idx = embed_all(result.backbone, ds, split)
        dump = sphere_dump(feats, ds.labels[idx], result.class_weights, cfg.margin, cfg.intra,
                           lambda_now=lam, sample_ids=idx)
        dump.write_csv(out_dir / f"sphere_{split}.csv")


COMPARISON_FIELDS = ("name", "final_train_accuracy", "verification_accuracy", "mean_p95_radius_rad",
                     "mean_anisotropy_index", "margin_proxy_rad")


def comparison_row(name, outcomes: list[RunOutcome]) -> dict:
    """Seed-averaged comparison metrics for one configuration."""
    def avg(get):
        return float(np.mean([get(o.report) for o in outcomes]))
    return {
        "name": name,
        "final_train_accuracy": avg(lambda r: r["run"]["final_train_accuracy"]),
        "verification_accuracy": avg(lambda r: r["global"]["verification_accuracy"]),
        "mean_p95_radius_rad": avg(lambda r: r["global"]["mean_p95_radius_rad"]),
        "mean_anisotropy_index": avg(lambda r: r["global"]["mean_anisotropy_index"]),
        "margin_proxy_rad": avg(lambda r: r["global"]["margin_proxy_rad"]),
        "seeds": [o.config.seed for o in outcomes],
        "error": None,
    }


def format_table(rows: list[dict]) -> str:
    headers = ["name", "train_acc", "verif_acc", "p95_radius", "anisotropy", "margin_proxy"]
    body = []
    for r in rows:
        if r.get("error"):
            body.append([r["name"], "FAILED", "-", "-", "-", r["error"]])
            continue
        body.append([r["name"]] + [f"{r[k]:.4f}" for k in COMPARISON_FIELDS[1:]])
    widths = [max(len(h), *(len(b[i]) for b in body)) for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for b in body:
        lines.append("  ".join(v.ljust(w) for v, w in zip(b, widths)))
    return "\n".join(lines) + "\n"


def run_comparison(configs: list[tuple[str, list[RunConfig]]], base_dir: Path | None = None,
                   out_dir: Path | None = None):
    """Train and evaluate every configuration; returns (rows, first error or None)."""
    rows, first_error = [], None
    datasets = {}
    for name, cfgs in configs:
        outcomes = []
        try:
            for cfg in cfgs:
                key = (cfg.dataset, cfg.dataset_path)
                if key not in datasets:
                    datasets[key] = load_dataset(cfg, base_dir)
                outcome = run_training(cfg, datasets[key])
                outcomes.append(outcome)
                if out_dir is not None:
                    write_outputs(outcome, out_dir / _safe(name) / f"seed{cfg.seed}")
            rows.append(comparison_row(name, outcomes))
        except NonFiniteLoss as e:
            log.error("run %s failed: %s", name, e)
            first_error = first_error or e
            rows.append({"name": name, "error": f"non-finite loss at iteration {e.iteration}"})
    return rows, first_error


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in name)
