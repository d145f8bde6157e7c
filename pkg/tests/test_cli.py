import csv
import json
import os

import numpy as np
import pytest

from margvae.cli import _exit_code_for, load_config, main
from margvae.data import load_longitudinal_csv
from margvae.errors import (
    ConfigError,
    ManifestError,
    NonFiniteLoss,
    NotPositiveDefinite,
)
from margvae.models import TrainedModel, impute_covariates


def base_config(out_dir, **model_overrides):
    model = {
        "family": "cvae", "latent_dim": 2, "hidden": [8, 4], "activation": "tanh",
        "condition_x_posterior_on_y": True, "method": "ours",
    }
    model.update(model_overrides)
    return {
        "seed": 0,
        "data": {
            "source": "rotated_digits",
            "rotated_digits": {"variant": "dataset1", "side": 8, "train_rows": 24,
                               "validation_rows": 8, "test_rows": 8},
            "missing": {"rate_x": 0.2, "rate_y": 0.2},
        },
        "model": model,
        "train": {"max_epochs": 1, "batch_rows": 12, "patience": 1,
                  "validation_mc_samples": 2},
        "eval": {"draws": 4},
        "output": {"dir": out_dir},
    }


def write_config(tmp_path, cfg, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


class TestConfigValidation:
    def test_unknown_key_rejected(self, tmp_path):
        cfg = base_config(str(tmp_path))
        cfg["nonsense"] = 1
        path = write_config(tmp_path, cfg)
        with pytest.raises(ConfigError, match="nonsense"):
            load_config(path)

    def test_nested_unknown_key_rejected(self, tmp_path):
        cfg = base_config(str(tmp_path))
        cfg["data"]["bogus"] = True
        path = write_config(tmp_path, cfg)
        with pytest.raises(ConfigError, match="data.bogus"):
            load_config(path)

    def test_missing_csv_path_rejected(self, tmp_path):
        cfg = base_config(str(tmp_path))
        cfg["data"]["source"] = "csv"
        cfg["data"]["csv"] = {"train": str(tmp_path / "nope.csv")}
        path = write_config(tmp_path, cfg)
        with pytest.raises(ConfigError, match="does not exist"):
            load_config(path)

    def test_seed_override(self, tmp_path):
        path = write_config(tmp_path, base_config(str(tmp_path)))
        cfg = load_config(path, seed_override=99)
        assert cfg["seed"] == 99

    def test_exit_code_mapping(self):
        assert _exit_code_for(ConfigError("x")) == 2
        assert _exit_code_for(ManifestError("x")) == 3
        assert _exit_code_for(NonFiniteLoss(3)) == 4
        assert _exit_code_for(NotPositiveDefinite("x")) == 4

    def test_cli_returns_2_on_config_error(self, tmp_path):
        cfg = base_config(str(tmp_path))
        cfg["model"]["family"] = "unknown_family"
        path = write_config(tmp_path, cfg)
        assert main(["train", "--config", path]) == 2


class TestGenerate:
    def test_writes_declared_row_counts(self, tmp_path):
        out = str(tmp_path / "out")
        path = write_config(tmp_path, base_config(out))
        assert main(["generate", "--config", path]) == 0
        for name, rows in (("train", 24), ("validation", 8), ("test", 8)):
            with open(os.path.join(out, f"{name}.csv")) as fh:
                assert sum(1 for _ in fh) == rows + 1
        assert os.path.exists(os.path.join(out, "manifest.json"))
        metadata = json.load(open(os.path.join(out, "metadata.json")))
        assert "config" in metadata and metadata["config"]["seed"] == 0

    def test_byte_identical_reruns(self, tmp_path):
        out1, out2 = str(tmp_path / "a"), str(tmp_path / "b")
        p1 = write_config(tmp_path, base_config(out1), "c1.json")
        p2 = write_config(tmp_path, base_config(out2), "c2.json")
        assert main(["generate", "--config", p1]) == 0
        assert main(["generate", "--config", p2]) == 0
        for name in ("train.csv", "validation.csv", "test.csv", "manifest.json",
                     "train_x_truth.csv", "train_y_truth.csv"):
            b1 = open(os.path.join(out1, name), "rb").read()
            b2 = open(os.path.join(out2, name), "rb").read()
            assert b1 == b2, name

    def test_loadable_output(self, tmp_path):
        out = str(tmp_path / "out")
        path = write_config(tmp_path, base_config(out))
        main(["generate", "--config", path])
        ds = load_longitudinal_csv(os.path.join(out, "train.csv"),
                                   os.path.join(out, "manifest.json"))
        assert ds.n_rows == 24 and len(ds.schema) == 3


class TestTrainCommand:
    def test_smoke_produces_loadable_archive(self, tmp_path):
        out = str(tmp_path / "out")
        path = write_config(tmp_path, base_config(out))
        assert main(["train", "--config", path]) == 0
        archive = os.path.join(out, "model.json")
        model = TrainedModel.load(archive)
        assert model.config.family == "cvae"
        with open(os.path.join(out, "history.csv")) as fh:
            rows = list(csv.DictReader(fh))
        steps = [r for r in rows if r["kind"] == "step"]
        assert len(steps) == 2  # 24 rows / batch 12, one epoch
        assert all(r["wall_time"] for r in steps)

    def test_resume_continues_step_index(self, tmp_path):
        out = str(tmp_path / "out")
        cfg = base_config(out)
        path = write_config(tmp_path, cfg)
        main(["train", "--config", path])
        cfg_resume = base_config(out)
        cfg_resume["train"]["resume_from"] = os.path.join(out, "model.json")
        path2 = write_config(tmp_path, cfg_resume, "resume.json")
        assert main(["train", "--config", path2]) == 0
        with open(os.path.join(out, "history.csv")) as fh:
            steps = [int(r["step"]) for r in csv.DictReader(fh) if r["kind"] == "step"]
        assert steps == sorted(steps)
        assert len(steps) == 4


class TestEvaluateCommand:
    def test_deterministic_metrics(self, tmp_path):
        out1, out2 = str(tmp_path / "a"), str(tmp_path / "b")
        p1 = write_config(tmp_path, base_config(out1), "c1.json")
        p2 = write_config(tmp_path, base_config(out2), "c2.json")
        assert main(["evaluate", "--config", p1]) == 0
        assert main(["evaluate", "--config", p2]) == 0
        m1 = json.load(open(os.path.join(out1, "metrics.json")))
        m2 = json.load(open(os.path.join(out2, "metrics.json")))
        m1["config"]["output"] = m2["config"]["output"] = None
        assert m1 == m2

    def test_oracle_mode_omits_covariate_metrics(self, tmp_path):
        out = str(tmp_path / "out")
        cfg = base_config(out, method="oracle")
        path = write_config(tmp_path, cfg)
        assert main(["evaluate", "--config", path]) == 0
        record = json.load(open(os.path.join(out, "metrics.json")))
        assert "covariate_mse" not in record
        assert any("oracle" in n for n in record.get("notices", []))

    def test_baseline_mode_routes_imputer(self, tmp_path):
        out = str(tmp_path / "out")
        cfg = base_config(out, method="mean")
        path = write_config(tmp_path, cfg)
        assert main(["evaluate", "--config", path]) == 0
        record = json.load(open(os.path.join(out, "metrics.json")))
        assert record["metadata"]["imputation_origin"] == "mean imputer"
        assert np.isfinite(record["nll"])

    def test_config_echoed(self, tmp_path):
        out = str(tmp_path / "out")
        path = write_config(tmp_path, base_config(out))
        main(["evaluate", "--config", path])
        record = json.load(open(os.path.join(out, "metrics.json")))
        assert record["config"]["model"]["family"] == "cvae"
        assert record["config"]["train"]["max_epochs"] == 1


class TestImputeCommand:
    def test_matches_library_call(self, tmp_path):
        data_out = str(tmp_path / "data")
        cfg = base_config(data_out)
        path = write_config(tmp_path, cfg)
        main(["generate", "--config", path])
        train_out = str(tmp_path / "model_out")
        cfg_train = base_config(train_out)
        path_train = write_config(tmp_path, cfg_train, "train.json")
        main(["train", "--config", path_train])
        impute_out = str(tmp_path / "imp")
        cfg_imp = {
            "seed": 0,
            "data": {"csv": {"test": os.path.join(data_out, "test.csv"),
                              "manifest": os.path.join(data_out, "manifest.json")}},
            "eval": {"archive": os.path.join(train_out, "model.json")},
            "output": {"dir": impute_out},
        }
        path_imp = write_config(tmp_path, cfg_imp, "imp.json")
        assert main(["impute", "--config", path_imp]) == 0
        sidecar = json.load(open(os.path.join(impute_out, "imputed_distributions.json")))
        model = TrainedModel.load(os.path.join(train_out, "model.json"))
        ds = load_longitudinal_csv(os.path.join(data_out, "test.csv"),
                                   os.path.join(data_out, "manifest.json"))
        filled, dists = impute_covariates(model, ds.x, ds.y)
        np.testing.assert_allclose(np.array(sidecar["continuous_mean"]),
                                   dists["continuous_mean"], atol=0)
        imputed = load_longitudinal_csv(os.path.join(impute_out, "imputed.csv"),
                                        os.path.join(data_out, "manifest.json"))
        np.testing.assert_array_equal(imputed.x.values, filled.values)

    def test_requires_archive(self, tmp_path):
        cfg = {"seed": 0, "output": {"dir": str(tmp_path)}}
        path = write_config(tmp_path, cfg)
        assert main(["impute", "--config", path]) == 2


class TestSuiteCommand:
    def test_single_cell(self, tmp_path):
        out = str(tmp_path / "out")
        cfg = base_config(out)
        cfg["suite"] = {"rates": [0.2], "methods": ["mean"], "seeds": [0]}
        path = write_config(tmp_path, cfg)
        assert main(["suite", "--config", path]) == 0
        with open(os.path.join(out, "suite.csv")) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 1
        assert rows[0]["method"] == "mean" and float(rows[0]["rate"]) == 0.2
        assert rows[0]["seeds_ok"] == "1"

    def test_aggregate_mean_matches_cells(self, tmp_path):
        out = str(tmp_path / "out")
        cfg = base_config(out)
        cfg["suite"] = {"rates": [0.2], "methods": ["mean"], "seeds": [0, 1]}
        path = write_config(tmp_path, cfg)
        assert main(["suite", "--config", path]) == 0
        doc = json.load(open(os.path.join(out, "suite.json")))
        cells = [c for c in doc["cells"] if c["status"] == "ok"]
        assert len(cells) == 2
        agg = doc["summary"][0]
        assert agg["nll_mean"] == pytest.approx(np.mean([c["nll"] for c in cells]))

    def test_unknown_method_rejected(self, tmp_path):
        out = str(tmp_path / "out")
        cfg = base_config(out)
        cfg["suite"] = {"rates": [0.2], "methods": ["bogus"], "seeds": [0]}
        path = write_config(tmp_path, cfg)
        assert main(["suite", "--config", path]) == 2


class TestFailureContracts:
    def test_non_finite_loss_exit_code_and_log(self, tmp_path):
        data = tmp_path / "data.csv"
        manifest = tmp_path / "manifest.json"
        data.write_text("age,lab\n1.0,inf\n2.0,0.5\n0.5,0.25\n1.5,0.75\n")
        manifest.write_text(json.dumps({
            "columns": [{"name": "age", "role": "continuous_covariate"},
                        {"name": "lab", "role": "observation"}],
        }))
        out = str(tmp_path / "out")
        cfg = {
            "seed": 0,
            "data": {"source": "csv",
                     "csv": {"train": str(data), "validation": str(data),
                              "test": str(data), "manifest": str(manifest)}},
            "model": {"family": "cvae", "latent_dim": 1, "hidden": [4], "method": "ours"},
            "train": {"max_epochs": 1, "batch_rows": 4},
            "output": {"dir": out},
        }
        path = write_config(tmp_path, cfg)
        assert main(["train", "--config", path]) == 4
        assert os.path.exists(os.path.join(out, "history.csv"))
        assert not os.path.exists(os.path.join(out, "model.json"))

    def test_data_error_exit_code(self, tmp_path):
        data = tmp_path / "data.csv"
        manifest = tmp_path / "manifest.json"
        data.write_text("sex,lab\nX,0.5\n")
        manifest.write_text(json.dumps({
            "columns": [{"name": "sex", "role": "categorical_covariate", "levels": ["F", "M"]},
                        {"name": "lab", "role": "observation"}],
        }))
        cfg = {
            "seed": 0,
            "data": {"source": "csv",
                     "csv": {"train": str(data), "validation": str(data),
                              "test": str(data), "manifest": str(manifest)}},
            "model": {"family": "cvae", "latent_dim": 1, "hidden": [4]},
            "train": {"max_epochs": 1},
            "output": {"dir": str(tmp_path / "out")},
        }
        path = write_config(tmp_path, cfg)
        assert main(["train", "--config", path]) == 3


def longitudinal_files(tmp_path, n_patients=4, rows_per=3):
    rng = np.random.default_rng(0)
    lines = ["pid,t,sex,lab1,lab2"]
    for p in range(n_patients):
        sex = "F" if p % 2 == 0 else "M"
        for t in np.sort(rng.uniform(0, 4, rows_per)):
            lab1 = float(np.sin(t) + 0.1 * rng.normal())
            lab2 = float(0.2 * t + 0.1 * rng.normal())
            lines.append(f"p{p},{float(t)!r},{sex},{lab1!r},{lab2!r}")
    data = tmp_path / "longitudinal.csv"
    data.write_text("\n".join(lines) + "\n")
    manifest = tmp_path / "longitudinal_manifest.json"
    manifest.write_text(json.dumps({
        "columns": [
            {"name": "pid", "role": "instance_id",
             "levels": [f"p{p}" for p in range(n_patients)]},
            {"name": "t", "role": "time"},
            {"name": "sex", "role": "categorical_covariate", "levels": ["F", "M"]},
            {"name": "lab1", "role": "observation"},
            {"name": "lab2", "role": "observation"},
        ],
        "normalisation": "minmax-train",
    }))
    return str(data), str(manifest)


class TestLongitudinalEndToEnd:
    def test_train_and_evaluate(self, tmp_path):
        data, manifest = longitudinal_files(tmp_path)
        out = str(tmp_path / "out")
        cfg = {
            "seed": 0,
            "data": {"source": "csv",
                     "csv": {"train": data, "validation": data, "test": data,
                              "manifest": manifest},
                     "missing": {"rate_x": 0.2, "rate_y": 0.2}},
            "model": {"family": "longitudinal_gp", "latent_dim": 2, "hidden": [8, 4],
                       "inducing_count": 4, "method": "ours",
                       "condition_x_posterior_on_y": True},
            "train": {"max_epochs": 1, "batch_instances": 2,
                       "validation_mc_samples": 2},
            "eval": {"draws": 3},
            "output": {"dir": out},
        }
        path = write_config(tmp_path, cfg)
        assert main(["train", "--config", path]) == 0
        model = TrainedModel.load(os.path.join(out, "model.json"))
        assert model.config.family == "longitudinal_gp"
        assert model.kernel.instance_component is not None
        assert main(["evaluate", "--config", path]) == 0
        record = json.load(open(os.path.join(out, "metrics.json")))
        assert np.isfinite(record["nll"])


class TestSuiteParallel:
    def test_jobs_flag(self, tmp_path):
        out = str(tmp_path / "out")
        cfg = base_config(out)
        cfg["suite"] = {"rates": [0.2], "methods": ["mean"], "seeds": [0, 1]}
        path = write_config(tmp_path, cfg)
        assert main(["suite", "--config", path, "--jobs", "2"]) == 0
        with open(os.path.join(out, "suite.csv")) as fh:
            rows = list(csv.DictReader(fh))
        assert rows[0]["seeds_ok"] == "2"
