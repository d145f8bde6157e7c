import json
import os

import numpy as np
import pytest

from margvae.data import (
    CovariateTable,
    Dataset,
    ImputerStats,
    MaskedTable,
    RotatedDigitsConfig,
    apply_covariate_method,
    base_glyph,
    fit_imputer_stats,
    generate_rotated_digits,
    inject_mcar,
    knn_impute,
    load_longitudinal_csv,
    mean_impute,
    restore_truth,
    split,
    transform_image,
    write_dataset_csv,
)
from margvae.distributions import Column, CovariateSchema
from margvae.errors import ConfigError, ManifestError, ParseError, RateError, TooFewInstances
from margvae.kernels import LongitudinalIndex


class TestRotatedDigits:
    def test_identity_transform(self):
        glyph = base_glyph(12)
        out = transform_image(glyph, 0.0, 0.0, 1.0)
        np.testing.assert_array_equal(out, glyph)

    def test_contrast_scales(self):
        glyph = base_glyph(10)
        np.testing.assert_allclose(transform_image(glyph, 0.0, 0.0, 2.0), 2.0 * glyph)

    def test_rotation_moves_mass(self):
        glyph = base_glyph(12)
        rotated = transform_image(glyph, 0.8, 0.0, 1.0)
        assert np.abs(rotated - glyph).max() > 0.1

    def test_dataset1_covariates_uncorrelated(self):
        cfg = RotatedDigitsConfig(variant="dataset1", side=8, train_rows=4000,
                                  validation_rows=1, test_rows=1, seed=1)
        train, _, _ = generate_rotated_digits(cfg)
        corr = np.corrcoef(train.x.values.T)
        off = corr[~np.eye(3, dtype=bool)]
        assert np.abs(off).max() < 0.05

    def test_dataset2_covariates_correlated(self):
        cfg = RotatedDigitsConfig(variant="dataset2", side=8, train_rows=4000,
                                  validation_rows=1, test_rows=1, seed=0)
        train, _, _ = generate_rotated_digits(cfg)
        corr = np.corrcoef(train.x.values.T)
        off = np.abs(corr[~np.eye(3, dtype=bool)])
        assert off.max() > 0.2

    def test_dataset3_has_time_column(self):
        cfg = RotatedDigitsConfig(variant="dataset3", side=8, train_rows=50,
                                  validation_rows=5, test_rows=5, seed=1, t_range=(0.0, 4.0))
        train, _, _ = generate_rotated_digits(cfg)
        assert train.schema.time_index == 3
        t = train.x.values[:, 3]
        assert t.min() >= 0.0 and t.max() <= 4.0

    def test_deterministic(self):
        cfg = RotatedDigitsConfig(variant="dataset1", side=8, train_rows=20,
                                  validation_rows=5, test_rows=5, seed=7)
        a = generate_rotated_digits(cfg)
        b = generate_rotated_digits(cfg)
        for da, db in zip(a, b):
            np.testing.assert_array_equal(da.y.values, db.y.values)
            np.testing.assert_array_equal(da.x.values, db.x.values)

    def test_row_counts(self):
        cfg = RotatedDigitsConfig(variant="dataset1", side=8, train_rows=13,
                                  validation_rows=4, test_rows=6, seed=0)
        train, val, test = generate_rotated_digits(cfg)
        assert (train.n_rows, val.n_rows, test.n_rows) == (13, 4, 6)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            RotatedDigitsConfig(side=4)
        with pytest.raises(ConfigError):
            RotatedDigitsConfig(variant="dataset9")


def plain_dataset(n=10, d=6, q=3, seed=0):
    rng = np.random.default_rng(seed)
    schema = CovariateSchema([Column(c, "continuous") for c in ("a", "b", "c")[:q]])
    return Dataset(
        y=MaskedTable(rng.normal(size=(n, d)), np.ones((n, d), bool),
                      [f"y{j}" for j in range(d)]),
        x=CovariateTable(rng.normal(size=(n, q)), np.ones((n, q), bool),
                         ["a", "b", "c"][:q]),
        schema=schema,
    )


class TestInjectMcar:
    def test_zero_rates_keep_everything(self):
        ds = plain_dataset()
        out = inject_mcar(ds, 0.0, 0.0, seed=0)
        assert out.y.mask.all() and out.x.mask.all()
        assert not out.y_truth.mask.any()

    def test_rate_calibration(self):
        ds = plain_dataset(n=1000, d=100)
        out = inject_mcar(ds, 0.0, 0.2, seed=0)
        fraction = 1.0 - out.y.mask.mean()
        assert abs(fraction - 0.2) < 0.01

    def test_extreme_rate_keeps_one_observed_per_row(self):
        ds = plain_dataset(n=50, d=3, q=3)
        out = inject_mcar(ds, 0.999, 0.999, seed=1)
        assert out.y.mask.any(axis=1).all()
        assert out.x.mask.any(axis=1).all()

    def test_truth_holds_masked_values(self):
        ds = plain_dataset(seed=2)
        out = inject_mcar(ds, 0.3, 0.3, seed=3)
        masked = ~out.y.mask & ds.y.mask
        np.testing.assert_array_equal(out.y_truth.mask, masked)
        np.testing.assert_array_equal(out.y_truth.values[masked], ds.y.values[masked])

    def test_mask_pattern_independent_of_values(self):
        ds = plain_dataset(seed=4)
        out1 = inject_mcar(ds, 0.25, 0.25, seed=5)
        permuted = plain_dataset(seed=99)  # same shapes, different values
        out2 = inject_mcar(permuted, 0.25, 0.25, seed=5)
        np.testing.assert_array_equal(out1.y.mask, out2.y.mask)
        np.testing.assert_array_equal(out1.x.mask, out2.x.mask)

    def test_preexisting_missing_gets_no_truth(self):
        ds = plain_dataset(seed=6)
        ds.y.mask[0, 0] = False
        out = inject_mcar(ds, 0.0, 0.5, seed=7)
        assert not out.y.mask[0, 0]
        assert not out.y_truth.mask[0, 0]

    def test_rate_validation(self):
        with pytest.raises(RateError):
            inject_mcar(plain_dataset(), 1.0, 0.0, seed=0)

    def test_instance_column_never_masked(self):
        schema = CovariateSchema([
            Column("t", "continuous", is_time=True),
            Column("pid", "categorical", cardinality=3, is_instance=True),
        ])
        ids = np.repeat(np.arange(3), 4)
        x = np.column_stack([np.arange(12, dtype=float), ids.astype(float)])
        rng = np.random.default_rng(0)
        ds = Dataset(
            y=MaskedTable(rng.normal(size=(12, 2)), np.ones((12, 2), bool), ["y0", "y1"]),
            x=CovariateTable(x, np.ones_like(x, bool), ["t", "pid"]),
            schema=schema, index=LongitudinalIndex(ids, 0),
        )
        out = inject_mcar(ds, 0.9, 0.0, seed=0)
        assert out.x.mask[:, 1].all()

    def test_restore_truth_roundtrip(self):
        ds = plain_dataset(seed=8)
        out = inject_mcar(ds, 0.4, 0.4, seed=9)
        restored = restore_truth(out)
        np.testing.assert_array_equal(restored.y.mask, ds.y.mask)
        np.testing.assert_array_equal(restored.y.values[restored.y.mask],
                                      ds.y.values[ds.y.mask])


class TestCsvRoundTrip:
    def make_longitudinal(self, seed=0):
        schema = CovariateSchema([
            Column("t", "continuous", is_time=True),
            Column("sex", "categorical", cardinality=2),
            Column("pid", "categorical", cardinality=3, is_instance=True),
        ])
        rng = np.random.default_rng(seed)
        ids = np.repeat(np.arange(3), (3, 2, 4))
        n = len(ids)
        x = np.column_stack([
            np.concatenate([np.sort(rng.uniform(0, 5, k)) for k in (3, 2, 4)]),
            rng.integers(0, 2, 3)[ids].astype(float),
            ids.astype(float),
        ])
        x_mask = np.ones_like(x, dtype=bool)
        x_mask[1, 1] = False
        y = rng.normal(size=(n, 2))
        y_mask = rng.random((n, 2)) < 0.8
        ds = Dataset(
            y=MaskedTable(y, y_mask, ["lab1", "lab2"]),
            x=CovariateTable(x, x_mask, ["t", "sex", "pid"]),
            schema=schema, index=LongitudinalIndex(ids, 0),
            metadata={"levels": {"sex": ["F", "M"], "pid": ["p0", "p1", "p2"]}},
        )
        return inject_mcar(ds, 0.2, 0.2, seed=seed)

    def test_exact_round_trip(self, tmp_path):
        ds = self.make_longitudinal()
        data = str(tmp_path / "data.csv")
        manifest = str(tmp_path / "manifest.json")
        yt = str(tmp_path / "y_truth.csv")
        xt = str(tmp_path / "x_truth.csv")
        write_dataset_csv(ds, data, manifest, yt, xt)
        loaded = load_longitudinal_csv(data, manifest, y_truth_path=yt, x_truth_path=xt)
        assert loaded.schema == ds.schema
        np.testing.assert_array_equal(loaded.y.mask, ds.y.mask)
        np.testing.assert_array_equal(loaded.x.mask, ds.x.mask)
        np.testing.assert_array_equal(loaded.y.values[loaded.y.mask], ds.y.values[ds.y.mask])
        np.testing.assert_array_equal(loaded.x.values[loaded.x.mask], ds.x.values[ds.x.mask])
        np.testing.assert_array_equal(loaded.y_truth.mask, ds.y_truth.mask)
        np.testing.assert_array_equal(loaded.y_truth.values[loaded.y_truth.mask],
                                      ds.y_truth.values[ds.y_truth.mask])
        np.testing.assert_array_equal(loaded.x_truth.values[loaded.x_truth.mask],
                                      ds.x_truth.values[ds.x_truth.mask])

    def test_two_row_fully_observed(self, tmp_path):
        data = tmp_path / "d.csv"
        manifest = tmp_path / "m.json"
        data.write_text("age,lab\n1.5,0.25\n2.5,0.5\n")
        manifest.write_text(json.dumps({
            "columns": [
                {"name": "age", "role": "continuous_covariate"},
                {"name": "lab", "role": "observation"},
            ],
        }))
        ds = load_longitudinal_csv(str(data), str(manifest))
        assert ds.x.mask.all() and ds.y.mask.all()
        np.testing.assert_array_equal(ds.x.values[:, 0], [1.5, 2.5])
        np.testing.assert_array_equal(ds.y.values[:, 0], [0.25, 0.5])

    def test_empty_cell_is_missing(self, tmp_path):
        data = tmp_path / "d.csv"
        manifest = tmp_path / "m.json"
        data.write_text("age,lab\n,0.25\n2.5,\n")
        manifest.write_text(json.dumps({
            "columns": [
                {"name": "age", "role": "continuous_covariate"},
                {"name": "lab", "role": "observation"},
            ],
        }))
        ds = load_longitudinal_csv(str(data), str(manifest))
        assert not ds.x.mask[0, 0] and ds.x.mask[1, 0]
        assert ds.y.mask[0, 0] and not ds.y.mask[1, 0]

    def test_undeclared_level_rejected(self, tmp_path):
        data = tmp_path / "d.csv"
        manifest = tmp_path / "m.json"
        data.write_text("sex,lab\nX,0.25\n")
        manifest.write_text(json.dumps({
            "columns": [
                {"name": "sex", "role": "categorical_covariate", "levels": ["F", "M"]},
                {"name": "lab", "role": "observation"},
            ],
        }))
        with pytest.raises(ManifestError, match="'X'"):
            load_longitudinal_csv(str(data), str(manifest))

    def test_unknown_column_rejected(self, tmp_path):
        data = tmp_path / "d.csv"
        manifest = tmp_path / "m.json"
        data.write_text("age,extra\n1.0,2.0\n")
        manifest.write_text(json.dumps({
            "columns": [{"name": "age", "role": "continuous_covariate"}],
        }))
        with pytest.raises(ManifestError):
            load_longitudinal_csv(str(data), str(manifest))

    def test_parse_error_location(self, tmp_path):
        data = tmp_path / "d.csv"
        manifest = tmp_path / "m.json"
        data.write_text("age,lab\nnot_a_number,0.5\n")
        manifest.write_text(json.dumps({
            "columns": [
                {"name": "age", "role": "continuous_covariate"},
                {"name": "lab", "role": "observation"},
            ],
        }))
        with pytest.raises(ParseError, match="row 0"):
            load_longitudinal_csv(str(data), str(manifest))

    def test_minmax_normalisation_uses_training_stats(self, tmp_path):
        data = tmp_path / "d.csv"
        manifest = tmp_path / "m.json"
        data.write_text("lab\n0.0\n5.0\n10.0\n")
        manifest.write_text(json.dumps({
            "columns": [
                {"name": "x0", "role": "continuous_covariate"},
                {"name": "lab", "role": "observation"},
            ],
        }))
        # the manifest above misses x0 in the file; rewrite consistently
        data.write_text("x0,lab\n1.0,0.0\n1.0,5.0\n1.0,10.0\n")
        manifest.write_text(json.dumps({
            "columns": [
                {"name": "x0", "role": "continuous_covariate"},
                {"name": "lab", "role": "observation"},
            ],
            "normalisation": "minmax-train",
        }))
        ds = load_longitudinal_csv(str(data), str(manifest))
        np.testing.assert_allclose(ds.y.values[:, 0], [0.0, 0.5, 1.0])
        other = tmp_path / "other.csv"
        other.write_text("x0,lab\n1.0,20.0\n")
        stats = {k: tuple(v) for k, v in ds.metadata["normalisation_stats"].items()}
        ds2 = load_longitudinal_csv(str(other), str(manifest), stats=stats)
        np.testing.assert_allclose(ds2.y.values[:, 0], [2.0])


class TestSplit:
    def test_everything_in_train(self):
        ds = plain_dataset(n=9)
        train, val, test = split(ds, (1.0, 0.0, 0.0), by_instance=False, seed=0)
        assert train.n_rows == 9 and val.n_rows == 0 and test.n_rows == 0

    def test_largest_remainder_instances(self):
        schema = CovariateSchema([
            Column("t", "continuous", is_time=True),
            Column("pid", "categorical", cardinality=10, is_instance=True),
        ])
        ids = np.repeat(np.arange(10), 2)
        x = np.column_stack([np.arange(20, dtype=float), ids.astype(float)])
        rng = np.random.default_rng(0)
        ds = Dataset(
            y=MaskedTable(rng.normal(size=(20, 1)), np.ones((20, 1), bool), ["y0"]),
            x=CovariateTable(x, np.ones_like(x, bool), ["t", "pid"]),
            schema=schema, index=LongitudinalIndex(ids, 0),
        )
        train, val, test = split(ds, (0.8, 0.1, 0.1), by_instance=True, seed=0)
        assert (train.index.n_instances, val.index.n_instances, test.index.n_instances) == (8, 1, 1)
        all_ids = [set(part.index.instance_ids.tolist()) for part in (train, val, test)]
        assert not (all_ids[0] & all_ids[1]) and not (all_ids[0] & all_ids[2])

    def test_no_instance_index_raises(self):
        with pytest.raises(TooFewInstances):
            split(plain_dataset(), (0.8, 0.1, 0.1), by_instance=True, seed=0)

    def test_deterministic(self):
        ds = plain_dataset(n=20)
        a = split(ds, (0.5, 0.25, 0.25), by_instance=False, seed=3)
        b = split(ds, (0.5, 0.25, 0.25), by_instance=False, seed=3)
        for pa, pb in zip(a, b):
            np.testing.assert_array_equal(pa.y.values, pb.y.values)


def imputer_schema():
    return CovariateSchema([
        Column("a", "continuous"),
        Column("c", "categorical", cardinality=3),
    ])


class TestMeanImpute:
    def test_identity_when_observed(self):
        schema = imputer_schema()
        table = CovariateTable(np.array([[1.0, 2.0]]), np.ones((1, 2), bool), ["a", "c"])
        stats = fit_imputer_stats(table, schema)
        out = mean_impute(table, stats, schema)
        np.testing.assert_array_equal(out.values, table.values)

    def test_fills_training_mean(self):
        schema = imputer_schema()
        train = CovariateTable(np.array([[2.0, 0.0], [4.0, 0.0]]),
                               np.ones((2, 2), bool), ["a", "c"])
        stats = fit_imputer_stats(train, schema)
        query = CovariateTable(np.array([[0.0, 0.0]]),
                               np.array([[False, True]]), ["a", "c"])
        out = mean_impute(query, stats, schema)
        assert out.values[0, 0] == pytest.approx(3.0)

    def test_mode_tie_breaks_low(self):
        schema = imputer_schema()
        train = CovariateTable(np.array([[0.0, 2.0], [0.0, 1.0], [0.0, 1.0], [0.0, 2.0]]),
                               np.ones((4, 2), bool), ["a", "c"])
        stats = fit_imputer_stats(train, schema)
        assert stats.modes["c"] == 1


class TestKnnImpute:
    def test_exact_match_single_neighbour(self):
        schema = imputer_schema()
        train = CovariateTable(np.array([[1.0, 2.0], [5.0, 0.0]]),
                               np.ones((2, 2), bool), ["a", "c"])
        query = CovariateTable(np.array([[1.0, 0.0]]),
                               np.array([[True, False]]), ["a", "c"])
        out = knn_impute(query, train, schema, k=1)
        assert out.values[0, 1] == 2.0

    def test_full_neighbourhood_equals_mean(self):
        schema = imputer_schema()
        rng = np.random.default_rng(0)
        values = np.column_stack([rng.normal(size=6), rng.integers(0, 3, 6).astype(float)])
        train = CovariateTable(values, np.ones((6, 2), bool), ["a", "c"])
        query = CovariateTable(np.array([[0.3, 0.0]]),
                               np.array([[True, False]]), ["a", "c"])
        knn_out = knn_impute(query, train, schema, k=6)
        counts = np.bincount(values[:, 1].astype(int), minlength=3)
        assert knn_out.values[0, 1] == float(np.argmax(counts))

    def test_all_missing_query_falls_back_to_mean(self):
        schema = imputer_schema()
        train = CovariateTable(np.array([[2.0, 1.0], [4.0, 1.0]]),
                               np.ones((2, 2), bool), ["a", "c"])
        stats = fit_imputer_stats(train, schema)
        query = CovariateTable(np.zeros((1, 2)), np.zeros((1, 2), bool), ["a", "c"])
        out = knn_impute(query, train, schema, k=1, stats=stats)
        assert out.values[0, 0] == pytest.approx(3.0)
        assert out.values[0, 1] == 1.0

    def test_never_modifies_observed(self):
        schema = imputer_schema()
        rng = np.random.default_rng(1)
        train = CovariateTable(
            np.column_stack([rng.normal(size=8), rng.integers(0, 3, 8).astype(float)]),
            np.ones((8, 2), bool), ["a", "c"])
        vals = np.column_stack([rng.normal(size=5), rng.integers(0, 3, 5).astype(float)])
        mask = rng.random((5, 2)) < 0.5
        query = CovariateTable(vals.copy(), mask.copy(), ["a", "c"])
        out = knn_impute(query, train, schema, k=3)
        np.testing.assert_array_equal(out.values[mask], vals[mask])
        out2 = mean_impute(query, fit_imputer_stats(train, schema), schema)
        np.testing.assert_array_equal(out2.values[mask], vals[mask])


class TestApplyCovariateMethod:
    def test_oracle_restores_truth(self):
        ds = plain_dataset(seed=10)
        masked = inject_mcar(ds, 0.4, 0.0, seed=11)
        train, val, test, _ = apply_covariate_method("oracle", masked, masked, masked)
        assert train.x.mask.all()
        np.testing.assert_allclose(train.x.values, ds.x.values)

    def test_mean_fills_all(self):
        ds = plain_dataset(seed=12)
        masked = inject_mcar(ds, 0.4, 0.0, seed=13)
        train, _, _, _ = apply_covariate_method("mean", masked, masked, masked)
        assert train.x.mask.all()

    def test_ours_leaves_tables_alone(self):
        ds = plain_dataset(seed=14)
        masked = inject_mcar(ds, 0.4, 0.0, seed=15)
        train, _, _, _ = apply_covariate_method("ours", masked, masked, masked)
        np.testing.assert_array_equal(train.x.mask, masked.x.mask)
