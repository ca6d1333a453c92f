"""Command-line entry point: ``intraloss {gen-data,train,gradcheck,compare}``.

Exit codes: 0 success, 2 config error, 3 I/O error, 4 numerical failure,
5 gradient check failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as data_mod
from .errors import ConfigError, InsufficientData, IntraLossError, NonFiniteLoss
from .intra import IntraConfig
from .margins import Scheme
from .runner import (
    COMPARISON_FIELDS,
    RunConfig,
    comparison_configs,
    format_table,
    load_config,
    load_dataset,
    load_raw,
    run_comparison,
    run_training,
    write_json,
    write_outputs,
)
from .trainer import LOOKUP, TrainConfig, gradcheck, init_class_weights, make_backbone

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_GRADCHECK = 0, 2, 3, 4, 5

GRADCHECK_SCHEMES = (Scheme.NORM, Scheme.MULTIPLICATIVE_ANGULAR, Scheme.ADDITIVE_COSINE, Scheme.ADDITIVE_ANGULAR)

log = logging.getLogger("intraloss")


def _err(msg):
    print(f"error: {msg}", file=sys.stderr)


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, args.seed)
    ds = data_mod.generate(cfg.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "dataset.csv"
    data_mod.write_csv(ds, path)
    counts = ds.class_counts()
    print(f"wrote {ds.labels.shape[0]} rows to {path}")
    print("per-class counts: " + ", ".join(f"{k}:{v}" for k, v in counts.items()))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.seed)
    ds = load_dataset(cfg, Path(args.config).parent)
    try:
        outcome = run_training(cfg, ds)
    except NonFiniteLoss as e:
        _err(f"non-finite loss at iteration {e.iteration}")
        return EXIT_NUMERIC
    write_outputs(outcome, Path(args.out))
    g = outcome.report["global"]
    print(f"train accuracy {outcome.report['run']['final_train_accuracy']:.4f}  "
          f"verification {g['verification_accuracy']:.4f}  p95 radius {g['mean_p95_radius_rad']:.4f}  "
          f"anisotropy {g['mean_anisotropy_index']:.4f}  margin_proxy {g['margin_proxy_rad']:.4f}")
    return EXIT_OK


def gradcheck_suite(cfg: RunConfig, corrupt: float = 1.0, rng_seed: int | None = None):
    """Finite-difference check for every scheme with and without IntraLoss.

    Returns ``[(name, worst_rel_err_by_tensor, n_skipped), ...]``; each
    configuration is checked on ``num_batches`` random batches for the
    configured backbone.
    """
    gc = cfg.gradcheck
    rng = np.random.default_rng(cfg.seeds()["init"] if rng_seed is None else rng_seed)
    alpha = cfg.intra.alpha if cfg.intra is not None else 5.0
    gamma = cfg.intra.gamma if cfg.intra is not None else 0.9
    results = []
    for scheme in GRADCHECK_SCHEMES:
        margin = replace(cfg.margin, scheme=scheme)
        for use_intra in (False, True):
            intra = IntraConfig.for_margin(margin, alpha, gamma) if use_intra else None
            tcfg = TrainConfig(margin=margin, intra=intra)
            worst, skipped = {}, 0
            for _ in range(gc.num_batches):
                n = gc.batch_size
                backbone = make_backbone(cfg.backbone.kind, num_rows=n, input_dim=gc.input_dim,
                                         embed_dim=cfg.backbone.embed_dim, hidden_dim=gc.hidden_dim, rng=rng)
                if cfg.backbone.kind == LOOKUP:
                    backbone.params["table"] = rng.standard_normal(backbone.params["table"].shape)
                inputs = rng.standard_normal((n, gc.input_dim))
                labels = rng.integers(0, gc.num_classes, size=n)
                weights = init_class_weights(cfg.backbone.embed_dim, gc.num_classes, rng)
                rep = gradcheck(backbone, weights, (np.arange(n), inputs, labels), tcfg, corrupt=corrupt)
                skipped += len(rep.skipped)
                for k, v in rep.max_rel_err.items():
                    worst[k] = max(worst.get(k, 0.0), v)
            name = f"{scheme.value}{'+intra' if use_intra else ''}"
            results.append((name, worst, skipped))
    return results


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config, args.seed)
    results = gradcheck_suite(cfg, corrupt=args.corrupt_grad)
    tol = 1e-5
    failed = False
    lines = []
    for name, worst, skipped in results:
        w = max(worst.values(), default=0.0)
        ok = w < tol
        failed |= not ok
        lines.append(f"{'PASS' if ok else 'FAIL'}  {name:<28} max_rel_err={w:.3e}  skipped={skipped}")
    report = {"tolerance": tol, "configurations": [
        {"name": n, "max_rel_err": dict(sorted(wst.items())), "skipped": s} for n, wst, s in results]}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_json(report, out / "gradcheck.json")
    print("\n".join(lines))
    if failed:
        _err("gradient check failed")
        for line in lines:
            if line.startswith("FAIL"):
                print(line, file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def cmd_compare(args) -> int:
    raw = load_raw(args.config)
    configs, seeds = comparison_configs(raw, args.seed)
    out = Path(args.out)
    rows, error = run_comparison(configs, Path(args.config).parent, out)
    out.mkdir(parents=True, exist_ok=True)
    table = format_table(rows)
    (out / "comparison.txt").write_text(table)
    write_json({"seeds": seeds, "fields": list(COMPARISON_FIELDS), "rows": rows}, out / "comparison.json")
    print(table, end="")
    if error is not None:
        _err(f"non-finite loss at iteration {error.iteration}; partial results flagged")
        return EXIT_NUMERIC
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="intraloss", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn, help_ in (
        ("gen-data", cmd_gen_data, "write the synthetic dataset CSV"),
        ("train", cmd_train, "train one configuration and write trace, model, report and sphere dumps"),
        ("gradcheck", cmd_gradcheck, "finite-difference check of every scheme with and without IntraLoss"),
        ("compare", cmd_compare, "train and evaluate several configurations on the same data"),
    ):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", required=True, help="TOML run configuration")
        sp.add_argument("--out", required=name != "gradcheck", help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.set_defaults(func=fn)
        if name == "gradcheck":
            # negative-control hook: scales every analytic gradient
            sp.add_argument("--corrupt-grad", type=float, default=1.0, help=argparse.SUPPRESS)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed is not None and args.seed < 0:
        _err("--seed must be non-negative")
        return EXIT_CONFIG
    try:
        return args.func(args)
    except NonFiniteLoss as e:
        _err(f"non-finite loss at iteration {e.iteration}")
        return EXIT_NUMERIC
    except OSError as e:
        _err(str(e))
        return EXIT_IO
    except (ConfigError, InsufficientData, IntraLossError) as e:
        _err(str(e))
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
