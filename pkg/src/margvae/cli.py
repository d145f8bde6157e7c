"""Command-line entry point: generate, train, evaluate, impute, suite.

One JSON configuration document drives every command; unknown keys are
rejected and every output embeds the resolved configuration for provenance.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import json
import os
import sys
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import data as data_mod
from . import models as models_mod
from .data import (
    Dataset,
    RotatedDigitsConfig,
    apply_covariate_method,
    generate_rotated_digits,
    inject_mcar,
    load_longitudinal_csv,
    write_dataset_csv,
)
from .errors import (
    ConfigError,
    ManifestError,
    MargvaeError,
    MissingGroundTruth,
    NonFiniteLoss,
    NonFiniteOutput,
    NotPositiveDefinite,
    ParseError,
    RateError,
    SchemaMismatch,
    SingularMatrix,
    TooFewInstances,
)
from .models import ModelConfig, TrainConfig, TrainedModel, evaluate, impute_covariates, train

_DATA_ERRORS = (ManifestError, ParseError, RateError, SchemaMismatch, TooFewInstances,
                MissingGroundTruth)
_NUMERICAL_ERRORS = (NonFiniteLoss, NonFiniteOutput, NotPositiveDefinite, SingularMatrix)

_METHODS = ("ours", "mean", "knn", "zero", "oracle")

# Allowed configuration keys; a leaf value of None means "any JSON value".
_CONFIG_SCHEMA = {
    "seed": None,
    "data": {
        "source": None,
        "rotated_digits": {
            "variant": None, "side": None, "train_rows": None, "validation_rows": None,
            "test_rows": None, "t_range": None, "pixel_noise": None, "glyph_path": None,
        },
        "csv": {
            "train": None, "validation": None, "test": None, "manifest": None,
            "train_y_truth": None, "train_x_truth": None,
            "validation_y_truth": None, "validation_x_truth": None,
            "test_y_truth": None, "test_x_truth": None,
        },
        "missing": {"rate_x": None, "rate_y": None},
    },
    "model": {
        "family": None, "latent_dim": None, "hidden": None, "activation": None,
        "condition_x_posterior_on_y": None, "marginalise_missing_covariates": None,
        "kernel": None, "inducing_count": None, "train_inducing_inputs": None,
        "enumeration_cap": None, "mc_samples_z": None, "mc_samples_x": None,
        "eval_mc_samples": None, "use_exact_gp_kl": None, "method": None,
    },
    "train": {
        "step_size": None, "beta1": None, "beta2": None, "batch_rows": None,
        "batch_instances": None, "max_epochs": None, "patience": None,
        "validation_mc_samples": None, "resume_from": None,
    },
    "eval": {"metrics": None, "draws": None, "knn_k": None, "archive": None},
    "output": {"dir": None},
    "suite": {"rates": None, "methods": None, "seeds": None},
}


def _validate_keys(cfg: dict, schema: dict, path: str = ""):
    for key, value in cfg.items():
        where = f"{path}.{key}" if path else key
        if key not in schema:
            raise ConfigError(f"unknown configuration key {where!r}")
        sub = schema[key]
        if isinstance(sub, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"configuration key {where!r} must be an object")
            _validate_keys(value, sub, where)


def load_config(path: str, seed_override: Optional[int] = None) -> dict:
    if not os.path.exists(path):
        raise ConfigError(f"configuration file {path!r} does not exist")
    with open(path) as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"configuration is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("configuration root must be an object")
    _validate_keys(cfg, _CONFIG_SCHEMA)
    if seed_override is not None:
        cfg["seed"] = int(seed_override)
    cfg.setdefault("seed", 0)
    cfg.setdefault("data", {})
    cfg.setdefault("model", {})
    cfg.setdefault("train", {})
    cfg.setdefault("eval", {})
    cfg.setdefault("output", {})
    for key in ("csv",):
        section = cfg["data"].get(key, {})
        for name, value in section.items():
            if value is not None and not os.path.exists(value):
                raise ConfigError(f"data.csv.{name}: path {value!r} does not exist")
    glyph = cfg["data"].get("rotated_digits", {}).get("glyph_path")
    if glyph is not None and not os.path.exists(glyph):
        raise ConfigError(f"data.rotated_digits.glyph_path: {glyph!r} does not exist")
    return cfg


def _resolved_config(cfg: dict) -> dict:
    """Configuration with model/train defaults filled in, for provenance."""
    model_cfg = {k: v for k, v in cfg.get("model", {}).items() if k != "method"}
    resolved = json.loads(json.dumps(cfg))
    resolved["model"] = {**ModelConfig.from_config(model_cfg).to_config(),
                        "method": cfg.get("model", {}).get("method", "ours")}
    train_section = {k: v for k, v in cfg.get("train", {}).items() if k != "resume_from"}
    tc = TrainConfig.from_config({**train_section, "seed": cfg["seed"]})
    resolved["train"] = {**tc.to_config(), "resume_from": cfg.get("train", {}).get("resume_from")}
    return resolved


def _out_dir(cfg: dict, override: Optional[str]) -> str:
    out = override or cfg.get("output", {}).get("dir") or "out"
    os.makedirs(out, exist_ok=True)
    return out


def resolve_datasets(cfg: dict, seed: int) -> Tuple[Dataset, Dataset, Dataset]:
    """Build the train/validation/test datasets the configuration describes,
    injecting artificial missingness when rates are configured."""
    data_cfg = cfg.get("data", {})
    source = data_cfg.get("source", "rotated_digits")
    if source == "rotated_digits":
        rd = dict(data_cfg.get("rotated_digits", {}))
        if "t_range" in rd and rd["t_range"] is not None:
            rd["t_range"] = tuple(rd["t_range"])
        gen_cfg = RotatedDigitsConfig(seed=seed, **{k: v for k, v in rd.items() if v is not None})
        train_set, val_set, test_set = generate_rotated_digits(gen_cfg)
    elif source == "csv":
        paths = data_cfg.get("csv", {})
        for required in ("train", "validation", "test", "manifest"):
            if not paths.get(required):
                raise ConfigError(f"data.csv.{required} is required for the csv source")
        train_set = load_longitudinal_csv(
            paths["train"], paths["manifest"],
            y_truth_path=paths.get("train_y_truth"), x_truth_path=paths.get("train_x_truth"),
        )
        stats = None
        if "normalisation_stats" in train_set.metadata:
            stats = {k: tuple(v) for k, v in train_set.metadata["normalisation_stats"].items()}
        val_set = load_longitudinal_csv(
            paths["validation"], paths["manifest"], stats=stats,
            y_truth_path=paths.get("validation_y_truth"),
            x_truth_path=paths.get("validation_x_truth"),
        )
        test_set = load_longitudinal_csv(
            paths["test"], paths["manifest"], stats=stats,
            y_truth_path=paths.get("test_y_truth"), x_truth_path=paths.get("test_x_truth"),
        )
    else:
        raise ConfigError(f"unknown data source {source!r}")
    missing = data_cfg.get("missing", {})
    rate_x = float(missing.get("rate_x", 0.0) or 0.0)
    rate_y = float(missing.get("rate_y", 0.0) or 0.0)
    if rate_x > 0 or rate_y > 0:
        train_set = inject_mcar(train_set, rate_x, rate_y, seed)
        val_set = inject_mcar(val_set, rate_x, rate_y, seed + 1)
        test_set = inject_mcar(test_set, rate_x, rate_y, seed + 2)
    return train_set, val_set, test_set


def _method_model_config(cfg: dict, method: str) -> ModelConfig:
    model_section = {k: v for k, v in cfg.get("model", {}).items() if k != "method"}
    mc = ModelConfig.from_config(model_section)
    if method != "ours":
        mc.marginalise_missing_covariates = False
    return mc


def _train_for_method(cfg: dict, method: str, seed: int,
                      datasets: Optional[Tuple[Dataset, Dataset, Dataset]] = None):
    if method not in _METHODS:
        raise ConfigError(f"unknown method {method!r}")
    train_set, val_set, test_set = datasets or resolve_datasets(cfg, seed)
    knn_k = int(cfg.get("eval", {}).get("knn_k", 5) or 5)
    train_m, val_m, test_m, info = apply_covariate_method(method, train_set, val_set, test_set,
                                                          k=knn_k)
    model_config = _method_model_config(cfg, method)
    train_section = {k: v for k, v in cfg.get("train", {}).items() if k != "resume_from"}
    train_config = TrainConfig.from_config({**train_section, "seed": seed})
    resume_path = cfg.get("train", {}).get("resume_from")
    initial = TrainedModel.load(resume_path) if resume_path else None
    model = train(model_config, train_m, val_m, train_config, initial_model=initial)
    return model, (train_m, val_m, test_m), (train_set, val_set, test_set), info


def _evaluate_method(cfg: dict, method: str, model: TrainedModel,
                     routed: Tuple[Dataset, Dataset, Dataset],
                     raw: Tuple[Dataset, Dataset, Dataset], seed: int) -> dict:
    eval_cfg = cfg.get("eval", {})
    draws = eval_cfg.get("draws")
    metrics = list(eval_cfg.get("metrics", ["nll", "covariate_mse", "covariate_accuracy"]))
    test_routed = routed[2]
    test_raw = raw[2]
    record: dict = {"method": method, "seed": seed, "metadata": {}}
    if "nll" in metrics:
        prediction = models_mod.predict_y(model, test_routed.x, test_routed.y,
                                          draws=draws, seed=seed)
        record["nll"] = prediction.nll
        record["metadata"]["nll"] = prediction.metadata
    wants_imputation = "covariate_mse" in metrics or "covariate_accuracy" in metrics
    if wants_imputation:
        truth = test_raw.x_truth
        if truth is None or not truth.mask.any():
            record["notices"] = ["covariate metrics omitted: no held-out truth"]
        else:
            if method == "ours":
                filled, _ = impute_covariates(model, test_raw.x, test_raw.y)
                filled_values = filled.values
                origin = "model posterior"
            elif method in ("mean", "knn"):
                filled_values = test_routed.x.values
                origin = f"{method} imputer"
            elif method == "zero":
                filled_values = np.where(test_raw.x.mask, test_raw.x.values, 0.0)
                origin = "zero fill"
            else:  # oracle sees the truth; imputation error is zero by definition
                filled_values = None
                origin = "oracle"
            if filled_values is not None:
                imp = models_mod.imputation_metrics(filled_values, truth, model.schema)
                if "covariate_mse" in metrics:
                    record["covariate_mse"] = imp["covariate_mse"]
                if "covariate_accuracy" in metrics:
                    record["covariate_accuracy"] = imp["covariate_accuracy"]
                record["metadata"]["imputation_origin"] = origin
            else:
                record["notices"] = ["covariate metrics omitted: oracle uses true covariates"]
    return record


def cmd_generate(cfg: dict, out_dir: str) -> int:
    seed = int(cfg["seed"])
    train_set, val_set, test_set = resolve_datasets(cfg, seed)
    for name, ds in (("train", train_set), ("validation", val_set), ("test", test_set)):
        write_dataset_csv(
            ds,
            os.path.join(out_dir, f"{name}.csv"),
            manifest_path=os.path.join(out_dir, "manifest.json") if name == "train" else None,
            y_truth_path=os.path.join(out_dir, f"{name}_y_truth.csv"),
            x_truth_path=os.path.join(out_dir, f"{name}_x_truth.csv"),
        )
    metadata = {
        "config": _resolved_config(cfg),
        "rows": {"train": train_set.n_rows, "validation": val_set.n_rows,
                 "test": test_set.n_rows},
        "generator": train_set.metadata,
    }
    with open(os.path.join(out_dir, "metadata.json"), "w") as fh:
        json.dump(metadata, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote datasets to {out_dir}")
    return 0


def _write_history_csv(history, path: str):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "step", "epoch", "reconstruction", "latent_kl",
                         "covariate_kl", "total", "wall_time"])
        for rec in history:
            writer.writerow([
                rec.get("kind", "step"), rec.get("step", ""), rec.get("epoch", ""),
                rec.get("reconstruction", ""), rec.get("latent_kl", ""),
                rec.get("covariate_kl", ""), rec.get("total", ""), rec.get("wall_time", ""),
            ])


def cmd_train(cfg: dict, out_dir: str) -> int:
    seed = int(cfg["seed"])
    method = cfg.get("model", {}).get("method", "ours")
    try:
        model, routed, raw, info = _train_for_method(cfg, method, seed)
    except NonFiniteLoss as exc:
        # keep the step log around for post-mortem inspection
        _write_history_csv(getattr(exc, "history", []), os.path.join(out_dir, "history.csv"))
        raise
    archive = os.path.join(out_dir, "model.json")
    model.save(archive)
    _write_history_csv(model.history, os.path.join(out_dir, "history.csv"))
    doc = {"config": _resolved_config(cfg), "method": method, "archive": archive,
           "steps": sum(1 for r in model.history if r.get("kind") == "step")}
    with open(os.path.join(out_dir, "train.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"saved model archive to {archive}")
    return 0


def cmd_evaluate(cfg: dict, out_dir: str) -> int:
    seed = int(cfg["seed"])
    method = cfg.get("model", {}).get("method", "ours")
    archive = cfg.get("eval", {}).get("archive")
    datasets = resolve_datasets(cfg, seed)
    knn_k = int(cfg.get("eval", {}).get("knn_k", 5) or 5)
    routed = apply_covariate_method(method, *datasets, k=knn_k)[:3]
    if archive:
        model = TrainedModel.load(archive)
    else:
        model, routed, datasets, _ = _train_for_method(cfg, method, seed)
    record = _evaluate_method(cfg, method, model, routed, datasets, seed)
    record["config"] = _resolved_config(cfg)
    with open(os.path.join(out_dir, "metrics.json"), "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "metrics.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "seed", "nll", "covariate_mse", "covariate_accuracy"])
        writer.writerow([method, seed, record.get("nll", ""),
                         record.get("covariate_mse", ""), record.get("covariate_accuracy", "")])
    print(json.dumps({k: record.get(k) for k in ("nll", "covariate_mse", "covariate_accuracy")}))
    return 0


def cmd_impute(cfg: dict, out_dir: str) -> int:
    eval_cfg = cfg.get("eval", {})
    archive = eval_cfg.get("archive")
    if not archive:
        raise ConfigError("eval.archive is required for impute")
    model = TrainedModel.load(archive)
    paths = cfg.get("data", {}).get("csv", {})
    if not paths.get("test") or not paths.get("manifest"):
        raise ConfigError("data.csv.test and data.csv.manifest are required for impute")
    dataset = load_longitudinal_csv(paths["test"], paths["manifest"])
    if dataset.x.n_cols != len(model.schema):
        raise SchemaMismatch("covariate table does not match the model schema")
    filled, distributions = impute_covariates(model, dataset.x, dataset.y)
    filled_ds = Dataset(y=dataset.y, x=filled, schema=dataset.schema,
                        metadata=dataset.metadata)
    write_dataset_csv(filled_ds, os.path.join(out_dir, "imputed.csv"))
    sidecar = {
        "config": _resolved_config(cfg),
        "continuous_mean": distributions["continuous_mean"].tolist(),
        "continuous_variance": distributions["continuous_variance"].tolist(),
        "categorical_probabilities": {
            name: probs.tolist()
            for name, probs in distributions["categorical_probabilities"].items()
        },
    }
    with open(os.path.join(out_dir, "imputed_distributions.json"), "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote imputed covariates to {out_dir}")
    return 0


def _run_suite_cell(cfg: dict, method: str, rate: float, seed: int, out_dir: str) -> dict:
    cell_cfg = json.loads(json.dumps(cfg))
    cell_cfg["seed"] = seed
    cell_cfg.setdefault("data", {}).setdefault("missing", {})
    cell_cfg["data"]["missing"]["rate_x"] = rate
    cell_cfg["data"]["missing"]["rate_y"] = rate
    try:
        model, routed, raw, _ = _train_for_method(cell_cfg, method, seed)
        record = _evaluate_method(cell_cfg, method, model, routed, raw, seed)
        record.update({"rate": rate, "status": "ok"})
    except MargvaeError as exc:
        record = {"method": method, "seed": seed, "rate": rate, "status": "failed",
                  "error": f"{type(exc).__name__}: {exc}",
                  "error_category": _exit_code_for(exc)}
    cell_path = os.path.join(out_dir, f"cell_{method}_r{int(round(rate * 100))}_s{seed}.json")
    with open(cell_path, "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return record


def cmd_suite(cfg: dict, out_dir: str, jobs: int = 1) -> int:
    suite_cfg = cfg.get("suite", {})
    rates = [float(r) for r in suite_cfg.get("rates", [0.05, 0.1, 0.2, 0.3, 0.4])]
    methods = list(suite_cfg.get("methods", list(_METHODS)))
    seeds = [int(s) for s in suite_cfg.get("seeds", [0, 1, 2, 3, 4])]
    for m in methods:
        if m not in _METHODS:
            raise ConfigError(f"suite.methods: unknown method {m!r}")
    cells = [(method, rate, seed) for rate in rates for method in methods for seed in seeds]
    records: List[dict] = []
    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_suite_cell, cfg, m, r, s, out_dir) for m, r, s in cells]
            records = [f.result() for f in futures]
    else:
        for m, r, s in cells:
            records.append(_run_suite_cell(cfg, m, r, s, out_dir))
    rows = []
    for rate in rates:
        for method in methods:
            cell_records = [r for r in records
                            if r["method"] == method and r["rate"] == rate]
            ok = [r for r in cell_records if r.get("status") == "ok"]
            row = {"method": method, "rate": rate, "seeds_ok": len(ok),
                   "seeds_total": len(cell_records)}
            for metric in ("nll", "covariate_mse", "covariate_accuracy"):
                vals = [r[metric] for r in ok if r.get(metric) is not None]
                row[f"{metric}_mean"] = float(np.mean(vals)) if vals else None
                row[f"{metric}_std"] = float(np.std(vals)) if vals else None
            errors = [r.get("error") for r in cell_records if r.get("status") == "failed"]
            row["errors"] = "; ".join(e for e in errors if e) or ""
            rows.append(row)
    with open(os.path.join(out_dir, "suite.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["method", "rate", "seeds_ok", "seeds_total",
                  "nll_mean", "nll_std", "covariate_mse_mean", "covariate_mse_std",
                  "covariate_accuracy_mean", "covariate_accuracy_std", "errors"]
        writer.writerow(header)
        for row in rows:
            writer.writerow([row.get(k, "") for k in header])
    doc = {"config": _resolved_config(cfg), "cells": records, "summary": rows}
    with open(os.path.join(out_dir, "suite.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    failed = [r for r in records if r.get("status") == "failed"]
    if failed:
        print(f"{len(failed)} of {len(records)} cells failed", file=sys.stderr)
        return int(failed[0].get("error_category", 4))
    print(f"wrote suite results to {out_dir}")
    return 0


def _exit_code_for(exc: Exception) -> int:
    if isinstance(exc, ConfigError):
        return 2
    if isinstance(exc, _DATA_ERRORS):
        return 3
    if isinstance(exc, _NUMERICAL_ERRORS):
        return 4
    return 4


def main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="margvae",
                                     description="Conditional VAEs with missing-covariate marginalisation")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("generate", "train", "evaluate", "impute", "suite"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
        if name == "suite":
            p.add_argument("--jobs", type=int, default=1)
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed)
        out_dir = _out_dir(cfg, args.out)
        if args.command == "generate":
            return cmd_generate(cfg, out_dir)
        if args.command == "train":
            return cmd_train(cfg, out_dir)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, out_dir)
        if args.command == "impute":
            return cmd_impute(cfg, out_dir)
        if args.command == "suite":
            return cmd_suite(cfg, out_dir, jobs=args.jobs)
        raise ConfigError(f"unknown command {args.command!r}")
    except MargvaeError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return _exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
