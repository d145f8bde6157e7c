"""Dataset model, the rotated-digits generator, MCAR injection, CSV and
manifest ingestion for (longitudinal) tables, splits, and baseline imputers.

Tables pair a float64 value matrix with a boolean mask (True = observed).
Categorical values are stored as non-negative integer codes in the float
matrix; CSV files carry the level strings declared in the manifest.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .distributions import Column, CovariateSchema
from .errors import (
    DimensionMismatch,
    ManifestError,
    ParseError,
    RateError,
    TooFewInstances,
)
from .kernels import LongitudinalIndex
from .rng import np_generator

_ROLES = ("observation", "continuous_covariate", "categorical_covariate", "time", "instance_id")


class MaskedTable:
    """A value matrix with a per-entry observed mask."""

    def __init__(self, values: np.ndarray, mask: np.ndarray, column_names: Sequence[str]):
        values = np.asarray(values, dtype=np.float64)
        mask = np.asarray(mask, dtype=bool)
        if values.shape != mask.shape or values.ndim != 2:
            raise DimensionMismatch("values and mask must be congruent 2-d arrays")
        if values.shape[1] != len(column_names):
            raise DimensionMismatch("column name count does not match the table width")
        self.values = values
        self.mask = mask
        self.column_names = list(column_names)

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_cols(self) -> int:
        return self.values.shape[1]

    def copy(self) -> "MaskedTable":
        return type(self)(self.values.copy(), self.mask.copy(), list(self.column_names))

    def take_rows(self, rows: np.ndarray) -> "MaskedTable":
        return type(self)(self.values[rows], self.mask[rows], list(self.column_names))

    def equals(self, other: "MaskedTable") -> bool:
        return (
            self.column_names == other.column_names
            and np.array_equal(self.mask, other.mask)
            and np.array_equal(self.values[self.mask], other.values[other.mask])
        )


class CovariateTable(MaskedTable):
    """Masked table whose columns follow a covariate schema."""


@dataclass
class Dataset:
    """Observations, covariates, schema, and optional held-out truth for
    artificially masked entries (truth masks mark exactly those positions)."""

    y: MaskedTable
    x: CovariateTable
    schema: CovariateSchema
    y_truth: Optional[MaskedTable] = None
    x_truth: Optional[CovariateTable] = None
    index: Optional[LongitudinalIndex] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.y.n_rows != self.x.n_rows:
            raise DimensionMismatch("observation and covariate row counts differ")
        for truth, table in ((self.y_truth, self.y), (self.x_truth, self.x)):
            if truth is not None and truth.values.shape != table.values.shape:
                raise DimensionMismatch("truth table shape does not match its table")
        if self.x.n_cols != len(self.schema):
            raise DimensionMismatch("covariate table width does not match the schema")

    @property
    def n_rows(self) -> int:
        return self.y.n_rows

    @property
    def n_instances(self) -> Optional[int]:
        return self.index.n_instances if self.index is not None else None

    def take_rows(self, rows: np.ndarray) -> "Dataset":
        index = None
        if self.index is not None:
            ids = self.index.instance_ids[rows]
            index = LongitudinalIndex(ids, self.index.instance_component)
        return Dataset(
            y=self.y.take_rows(rows),
            x=self.x.take_rows(rows),
            schema=self.schema,
            y_truth=self.y_truth.take_rows(rows) if self.y_truth is not None else None,
            x_truth=self.x_truth.take_rows(rows) if self.x_truth is not None else None,
            index=index,
            metadata=dict(self.metadata),
        )


@dataclass
class RotatedDigitsConfig:
    """Synthetic image generator settings (three covariate-distribution
    variants; the third adds a time covariate)."""

    variant: str = "dataset1"
    side: int = 12
    train_rows: int = 1000
    validation_rows: int = 200
    test_rows: int = 200
    t_range: Tuple[float, float] = (0.0, 10.0)
    seed: int = 0
    pixel_noise: float = 0.05
    glyph_path: Optional[str] = None

    def __post_init__(self):
        from .errors import ConfigError

        if self.variant not in ("dataset1", "dataset2", "dataset3"):
            raise ConfigError(f"unknown rotated-digits variant {self.variant!r}")
        if self.side < 8:
            raise ConfigError("image side length must be >= 8")
        for what, n in (("train", self.train_rows), ("validation", self.validation_rows),
                        ("test", self.test_rows)):
            if n < 1:
                raise ConfigError(f"{what} row count must be >= 1")
        if self.t_range[1] <= self.t_range[0]:
            raise ConfigError("t_range must be increasing")


# Stroke segments of the base glyph (a digit 2) in unit coordinates.
_GLYPH_SEGMENTS = (
    ((0.25, 0.22), (0.72, 0.22)),
    ((0.72, 0.22), (0.72, 0.48)),
    ((0.72, 0.48), (0.26, 0.78)),
    ((0.26, 0.78), (0.76, 0.78)),
)
_GLYPH_STROKE_WIDTH = 0.09

# Covariate scales: rotation in radians, shift in pixels (relative to side),
# contrast multiplicative around 1. Recorded in dataset metadata.
_ROTATION_SCALE = 0.6
_SHIFT_SCALE_FRACTION = 0.1
_CONTRAST_SCALE = 0.3
_DEP_NOISE_FRACTION = 0.15  # of the nominal output range 2


def base_glyph(side: int, glyph_path: Optional[str] = None) -> np.ndarray:
    """Procedural digit bitmap in [0, 1], or a user-supplied square image
    (.npy or single-matrix CSV) resampled to the requested side length."""
    if glyph_path is not None:
        if glyph_path.endswith(".npy"):
            img = np.load(glyph_path).astype(np.float64)
        else:
            img = np.loadtxt(glyph_path, delimiter=",").astype(np.float64)
        if img.ndim != 2:
            raise ParseError("glyph file must hold a 2-d grayscale matrix")
        return _resample(img, side)
    coords = (np.arange(side) + 0.5) / side
    u, v = np.meshgrid(coords, coords, indexing="xy")
    img = np.zeros((side, side))
    for (x0, y0), (x1, y1) in _GLYPH_SEGMENTS:
        dx, dy = x1 - x0, y1 - y0
        length2 = dx * dx + dy * dy
        t = ((u - x0) * dx + (v - y0) * dy) / length2
        t = np.clip(t, 0.0, 1.0)
        px, py = x0 + t * dx, y0 + t * dy
        dist = np.sqrt((u - px) ** 2 + (v - py) ** 2)
        img = np.maximum(img, np.clip(1.0 - dist / _GLYPH_STROKE_WIDTH, 0.0, 1.0))
    return img


def _resample(img: np.ndarray, side: int) -> np.ndarray:
    src = img.shape[0]
    if img.shape[0] == img.shape[1] == side:
        return img
    scale = (np.array(img.shape) - 1) / max(side - 1, 1)
    out = np.empty((side, side))
    for i in range(side):
        for j in range(side):
            out[i, j] = _bilinear(img, i * scale[0], j * scale[1])
    return out


def _bilinear(img: np.ndarray, r: float, c: float) -> float:
    h, w = img.shape
    if r < 0 or c < 0 or r > h - 1 or c > w - 1:
        return 0.0
    r0, c0 = int(math.floor(r)), int(math.floor(c))
    r1, c1 = min(r0 + 1, h - 1), min(c0 + 1, w - 1)
    fr, fc = r - r0, c - c0
    top = img[r0, c0] * (1 - fc) + img[r0, c1] * fc
    bot = img[r1, c0] * (1 - fc) + img[r1, c1] * fc
    return top * (1 - fr) + bot * fr


def transform_image(base: np.ndarray, rotation: float, shift: float, contrast: float) -> np.ndarray:
    """Rotate about the centre, translate along the main diagonal (in pixels),
    and scale intensities. The identity transform reproduces the input."""
    side = base.shape[0]
    centre = (side - 1) / 2.0
    cos_t, sin_t = math.cos(rotation), math.sin(rotation)
    diag = shift / math.sqrt(2.0)
    rows = np.arange(side)
    rr, cc = np.meshgrid(rows, rows, indexing="ij")
    # Inverse map: undo the shift, then the rotation.
    dr = rr - centre - diag
    dc = cc - centre - diag
    src_r = cos_t * dr + sin_t * dc + centre
    src_c = -sin_t * dr + cos_t * dc + centre
    flat_r, flat_c = src_r.ravel(), src_c.ravel()
    vals = np.array([_bilinear(base, r, c) for r, c in zip(flat_r, flat_c)])
    return contrast * vals.reshape(base.shape)


def _draw_covariates(config: RotatedDigitsConfig, n: int, rng: np.random.Generator):
    shift_scale = config.side * _SHIFT_SCALE_FRACTION
    noise = _DEP_NOISE_FRACTION * 2.0
    if config.variant == "dataset1":
        rotation = rng.normal(0.0, _ROTATION_SCALE, n)
        shift = rng.normal(0.0, shift_scale, n)
        contrast = rng.normal(1.0, _CONTRAST_SCALE, n)
        return np.column_stack([rotation, shift, contrast])
    if config.variant == "dataset2":
        u = rng.normal(0.0, 1.0, n)
        rotation = _ROTATION_SCALE * (np.tanh(1.2 * u) + noise * rng.normal(size=n))
        shift = shift_scale * (np.sin(1.5 * u) + noise * rng.normal(size=n))
        contrast = 1.0 + _CONTRAST_SCALE * (0.5 * (u ** 2 - 1.0) + noise * rng.normal(size=n))
        return np.column_stack([rotation, shift, contrast])
    t0, t1 = config.t_range
    t = rng.uniform(t0, t1, n)
    tau = 2.0 * np.pi * (t - t0) / (t1 - t0)
    rotation = _ROTATION_SCALE * (np.sin(tau) + noise * rng.normal(size=n))
    shift = shift_scale * (np.sin(2.0 * tau + 1.0) + noise * rng.normal(size=n))
    contrast = 1.0 + _CONTRAST_SCALE * (np.cos(tau + 0.5) + noise * rng.normal(size=n))
    return np.column_stack([rotation, shift, contrast, t])


def rotated_digits_schema(variant: str) -> CovariateSchema:
    columns = [
        Column("rotation", "continuous"),
        Column("shift", "continuous"),
        Column("contrast", "continuous"),
    ]
    if variant == "dataset3":
        columns.append(Column("t", "continuous", is_time=True))
    return CovariateSchema(columns)


def generate_rotated_digits(config: RotatedDigitsConfig) -> Tuple[Dataset, Dataset, Dataset]:
    """Deterministically generate train, validation, and test datasets."""
    base = base_glyph(config.side, config.glyph_path)
    schema = rotated_digits_schema(config.variant)
    rng = np_generator(config.seed, f"rotated-digits-{config.variant}")
    out = []
    metadata = {
        "generator": "rotated_digits",
        "variant": config.variant,
        "side": config.side,
        "pixel_noise": config.pixel_noise,
        "rotation_scale": _ROTATION_SCALE,
        "shift_scale": config.side * _SHIFT_SCALE_FRACTION,
        "contrast_scale": _CONTRAST_SCALE,
        "dependence_noise_fraction": _DEP_NOISE_FRACTION,
        "t_range": list(config.t_range),
        "seed": config.seed,
    }
    for split_name, n in (("train", config.train_rows),
                          ("validation", config.validation_rows),
                          ("test", config.test_rows)):
        x = _draw_covariates(config, n, rng)
        d = config.side * config.side
        y = np.empty((n, d))
        for i in range(n):
            img = transform_image(base, x[i, 0], x[i, 1], x[i, 2])
            y[i] = img.ravel()
        y = y + config.pixel_noise * rng.normal(size=y.shape)
        y_names = [f"y{j:03d}" for j in range(d)]
        dataset = Dataset(
            y=MaskedTable(y, np.ones_like(y, dtype=bool), y_names),
            x=CovariateTable(x, np.ones_like(x, dtype=bool), [c.name for c in schema.columns]),
            schema=schema,
            metadata={**metadata, "split": split_name},
        )
        out.append(dataset)
    return tuple(out)


def inject_mcar(dataset: Dataset, rate_x: float, rate_y: float, seed: int) -> Dataset:
    """Mask entries independently at the given rates, retaining the removed
    values in truth tables. Pre-existing missing entries stay missing without
    truth. Every row keeps at least one observed entry per table (among the
    modelled covariate columns for x) by redrawing that row's mask draw."""
    for rate in (rate_x, rate_y):
        if not (0.0 <= rate < 1.0):
            raise RateError(f"rate {rate} outside [0, 1)")
    result = Dataset(
        y=dataset.y.copy(),
        x=dataset.x.copy(),
        schema=dataset.schema,
        y_truth=dataset.y_truth.copy() if dataset.y_truth is not None else None,
        x_truth=dataset.x_truth.copy() if dataset.x_truth is not None else None,
        index=dataset.index,
        metadata=dict(dataset.metadata),
    )
    instance_col = dataset.schema.instance_index
    x_protect = np.zeros(dataset.x.n_cols, dtype=bool)
    if instance_col is not None:
        x_protect[instance_col] = True
    _inject_table(result.y, rate_y, np_generator(seed, "mcar-y"),
                  protect=np.zeros(dataset.y.n_cols, dtype=bool), result_slot="y_truth",
                  dataset=result)
    _inject_table(result.x, rate_x, np_generator(seed, "mcar-x"),
                  protect=x_protect, result_slot="x_truth", dataset=result)
    result.metadata["mcar"] = {"rate_x": rate_x, "rate_y": rate_y, "seed": seed}
    return result


def _inject_table(table: MaskedTable, rate: float, rng: np.random.Generator,
                  protect: np.ndarray, result_slot: str, dataset: Dataset):
    truth = getattr(dataset, result_slot)
    if truth is None:
        truth = type(table)(
            np.zeros_like(table.values), np.zeros_like(table.mask), list(table.column_names)
        )
        setattr(dataset, result_slot, truth)
    eligible = table.mask & ~protect[None, :]
    for i in range(table.n_rows):
        if not eligible[i].any():
            continue
        while True:
            draw = rng.random(table.n_cols)
            new_mask = eligible[i] & (draw < rate)
            if (eligible[i] & ~new_mask).any():
                break
        cols = np.where(new_mask)[0]
        truth.values[i, cols] = table.values[i, cols]
        truth.mask[i, cols] = True
        table.mask[i, cols] = False


def restore_truth(dataset: Dataset) -> Dataset:
    """Undo artificial masking using the retained truth tables (oracle mode)."""
    result = dataset.take_rows(np.arange(dataset.n_rows))
    for table, truth in ((result.y, dataset.y_truth), (result.x, dataset.x_truth)):
        if truth is None:
            continue
        table.values[truth.mask] = truth.values[truth.mask]
        table.mask |= truth.mask
    result.y_truth = None
    result.x_truth = None
    return result


def _format_value(v: float) -> str:
    return repr(float(v))


def write_dataset_csv(dataset: Dataset, data_path: str, manifest_path: Optional[str] = None,
                      y_truth_path: Optional[str] = None, x_truth_path: Optional[str] = None):
    """Write a dataset as CSV plus manifest; empty cells denote missing.

    Values round-trip exactly (shortest-repr floats, level strings for
    categorical columns)."""
    schema = dataset.schema
    os.makedirs(os.path.dirname(os.path.abspath(data_path)), exist_ok=True)
    levels = _schema_levels(schema, dataset.metadata)
    with open(data_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = list(dataset.x.column_names) + list(dataset.y.column_names)
        writer.writerow(header)
        for i in range(dataset.n_rows):
            row = []
            for q, name in enumerate(dataset.x.column_names):
                if not dataset.x.mask[i, q]:
                    row.append("")
                    continue
                col = schema.columns[q]
                if col.kind == "categorical":
                    row.append(levels[name][int(dataset.x.values[i, q])])
                else:
                    row.append(_format_value(dataset.x.values[i, q]))
            for j in range(dataset.y.n_cols):
                row.append(_format_value(dataset.y.values[i, j]) if dataset.y.mask[i, j] else "")
            writer.writerow(row)
    if manifest_path is not None:
        manifest = {
            "columns": _manifest_columns(dataset, levels),
            "normalisation": "none",
            "metadata": dataset.metadata,
        }
        with open(manifest_path, "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
    for path, truth, table in ((y_truth_path, dataset.y_truth, dataset.y),
                               (x_truth_path, dataset.x_truth, dataset.x)):
        if path is None or truth is None:
            continue
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["row", "column", "value"])
            rows, cols = np.where(truth.mask)
            for i, q in zip(rows, cols):
                name = table.column_names[q]
                if table is dataset.x and schema.columns[q].kind == "categorical":
                    value = levels[name][int(truth.values[i, q])]
                else:
                    value = _format_value(truth.values[i, q])
                writer.writerow([int(i), name, value])


def _schema_levels(schema: CovariateSchema, metadata: dict) -> Dict[str, List[str]]:
    declared = metadata.get("levels", {})
    levels = {}
    for col in schema.columns:
        if col.kind != "categorical":
            continue
        levels[col.name] = list(declared.get(col.name, [str(k) for k in range(col.cardinality)]))
    return levels


def _manifest_columns(dataset: Dataset, levels: Dict[str, List[str]]) -> list:
    records = []
    for q, name in enumerate(dataset.x.column_names):
        col = dataset.schema.columns[q]
        if col.is_instance:
            records.append({"name": name, "role": "instance_id", "levels": levels[name]})
        elif col.is_time:
            records.append({"name": name, "role": "time"})
        elif col.kind == "categorical":
            records.append({"name": name, "role": "categorical_covariate", "levels": levels[name]})
        else:
            records.append({"name": name, "role": "continuous_covariate"})
    for name in dataset.y.column_names:
        records.append({"name": name, "role": "observation"})
    return records


def load_longitudinal_csv(data_path: str, manifest_path: str,
                          stats: Optional[Dict[str, Tuple[float, float]]] = None,
                          y_truth_path: Optional[str] = None,
                          x_truth_path: Optional[str] = None) -> Dataset:
    """Load a CSV against its manifest. Empty cells are missing; categorical
    levels map to codes in manifest order; observation columns are min-max
    normalised when the manifest requests it (statistics from the training
    split can be passed in, otherwise they are computed from this file)."""
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    columns = manifest.get("columns")
    if not columns:
        raise ManifestError("manifest declares no columns")
    by_name = {}
    for rec in columns:
        name, role = rec.get("name"), rec.get("role")
        if role not in _ROLES:
            raise ManifestError(f"column {name!r}: unknown role {role!r}")
        if role in ("categorical_covariate", "instance_id") and not rec.get("levels"):
            raise ManifestError(f"column {name!r}: categorical role requires levels")
        by_name[name] = rec
    with open(data_path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("data file is empty") from None
        rows = list(reader)
    for name in header:
        if name not in by_name:
            raise ManifestError(f"column {name!r} is not declared in the manifest")
    for name in by_name:
        if name not in header:
            raise ManifestError(f"manifest column {name!r} is missing from the data file")
    x_names = [r["name"] for r in columns if r["role"] != "observation"]
    y_names = [r["name"] for r in columns if r["role"] == "observation"]
    col_pos = {name: header.index(name) for name in header}
    n = len(rows)
    x_values = np.zeros((n, len(x_names)))
    x_mask = np.zeros((n, len(x_names)), dtype=bool)
    y_values = np.zeros((n, len(y_names)))
    y_mask = np.zeros((n, len(y_names)), dtype=bool)
    level_codes = {
        r["name"]: {lvl: k for k, lvl in enumerate(r["levels"])}
        for r in columns if r.get("levels")
    }
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise ParseError(f"row {i}: expected {len(header)} fields, got {len(row)}")
        for q, name in enumerate(x_names):
            cell = row[col_pos[name]].strip()
            if cell == "":
                continue
            rec = by_name[name]
            if rec["role"] in ("categorical_covariate", "instance_id"):
                if cell not in level_codes[name]:
                    raise ManifestError(
                        f"row {i}, column {name!r}: level {cell!r} not listed in the manifest"
                    )
                x_values[i, q] = level_codes[name][cell]
            else:
                try:
                    x_values[i, q] = float(cell)
                except ValueError:
                    raise ParseError(f"row {i}, column {name!r}: cannot parse {cell!r}") from None
            x_mask[i, q] = True
        for j, name in enumerate(y_names):
            cell = row[col_pos[name]].strip()
            if cell == "":
                continue
            try:
                y_values[i, j] = float(cell)
            except ValueError:
                raise ParseError(f"row {i}, column {name!r}: cannot parse {cell!r}") from None
            y_mask[i, j] = True
    schema_cols = []
    instance_name = None
    time_name = None
    for rec in columns:
        if rec["role"] == "observation":
            continue
        name = rec["name"]
        if rec["role"] == "instance_id":
            schema_cols.append(Column(name, "categorical", cardinality=max(len(rec["levels"]), 2),
                                      is_instance=True))
            instance_name = name
        elif rec["role"] == "time":
            schema_cols.append(Column(name, "continuous", is_time=True))
            time_name = name
        elif rec["role"] == "categorical_covariate":
            schema_cols.append(Column(name, "categorical", cardinality=max(len(rec["levels"]), 2)))
        else:
            schema_cols.append(Column(name, "continuous"))
    schema = CovariateSchema(schema_cols)
    metadata = {"levels": {name: list(codes) for name, codes in level_codes.items()}}
    index = None
    if instance_name is not None:
        q = x_names.index(instance_name)
        if not x_mask[:, q].all():
            raise ParseError(f"column {instance_name!r}: instance ids must all be present")
        order_keys = [x_values[:, q]]
        if time_name is not None:
            tq = x_names.index(time_name)
            order_keys.append(np.where(x_mask[:, tq], x_values[:, tq], np.inf))
        order = np.lexsort(tuple(reversed([*order_keys, np.arange(n)])))
        x_values, x_mask = x_values[order], x_mask[order]
        y_values, y_mask = y_values[order], y_mask[order]
        rows_permutation = order
        index = LongitudinalIndex(x_values[:, q].astype(np.int64), instance_component=0)
    else:
        rows_permutation = np.arange(n)
    norm = manifest.get("normalisation", "none")
    if norm == "minmax-train":
        if stats is None:
            stats = {}
            for j, name in enumerate(y_names):
                observed = y_values[y_mask[:, j], j]
                if observed.size:
                    stats[name] = (float(observed.min()), float(observed.max()))
                else:
                    stats[name] = (0.0, 1.0)
        for j, name in enumerate(y_names):
            lo, hi = stats[name]
            if hi > lo:
                y_values[:, j] = np.where(y_mask[:, j], (y_values[:, j] - lo) / (hi - lo), 0.0)
            else:
                y_values[:, j] = np.where(y_mask[:, j], 0.0, 0.0)
        metadata["normalisation_stats"] = {k: list(v) for k, v in stats.items()}
    elif norm != "none":
        raise ManifestError(f"unknown normalisation {norm!r}")
    dataset = Dataset(
        y=MaskedTable(y_values, y_mask, y_names),
        x=CovariateTable(x_values, x_mask, x_names),
        schema=schema,
        index=index,
        metadata=metadata,
    )
    for path, attr, table in ((y_truth_path, "y_truth", dataset.y),
                              (x_truth_path, "x_truth", dataset.x)):
        if path is None:
            continue
        truth = _load_truth(path, table, schema if attr == "x_truth" else None,
                            level_codes, rows_permutation)
        setattr(dataset, attr, truth)
    return dataset


def _load_truth(path: str, table: MaskedTable, schema: Optional[CovariateSchema],
                level_codes: Dict[str, Dict[str, int]], permutation: np.ndarray) -> MaskedTable:
    inverse = np.empty_like(permutation)
    inverse[permutation] = np.arange(len(permutation))
    values = np.zeros_like(table.values)
    mask = np.zeros_like(table.mask)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["row", "column", "value"]:
            raise ParseError(f"{path}: expected a (row, column, value) truth file")
        for line_no, row in enumerate(reader):
            i = inverse[int(row[0])]
            name = row[1]
            if name not in table.column_names:
                raise ParseError(f"{path} line {line_no}: unknown column {name!r}")
            q = table.column_names.index(name)
            cell = row[2]
            if schema is not None and schema.columns[q].kind == "categorical":
                if cell not in level_codes.get(name, {}):
                    raise ManifestError(f"{path} line {line_no}: level {cell!r} not declared")
                values[i, q] = level_codes[name][cell]
            else:
                values[i, q] = float(cell)
            mask[i, q] = True
    return type(table)(values, mask, list(table.column_names))


def _largest_remainder(total: int, fractions: Sequence[float]) -> List[int]:
    raw = [f * total for f in fractions]
    counts = [int(math.floor(r)) for r in raw]
    remainder = total - sum(counts)
    order = sorted(range(len(fractions)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:remainder]:
        counts[i] += 1
    return counts


def split(dataset: Dataset, fractions: Tuple[float, float, float], by_instance: bool,
          seed: int) -> Tuple[Dataset, Dataset, Dataset]:
    """Deterministic train/validation/test split; with ``by_instance`` whole
    instances are assigned to one split (largest-remainder apportionment)."""
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must be non-negative and sum to 1")
    rng = np_generator(seed, "split")
    if by_instance:
        if dataset.index is None:
            raise TooFewInstances("dataset has no instance index to split by")
        p = dataset.index.n_instances
        if p < sum(1 for f in fractions if f > 0):
            raise TooFewInstances(f"cannot split {p} instances into the requested parts")
        counts = _largest_remainder(p, fractions)
        order = rng.permutation(p)
        parts = []
        offset = 0
        for c in counts:
            chosen = sorted(order[offset:offset + c])
            rows = np.concatenate([
                np.arange(*dataset.index.ranges[k]) for k in chosen
            ]) if chosen else np.array([], dtype=int)
            parts.append(dataset.take_rows(rows))
            offset += c
        return tuple(parts)
    n = dataset.n_rows
    counts = _largest_remainder(n, fractions)
    order = rng.permutation(n)
    parts = []
    offset = 0
    for c in counts:
        rows = np.sort(order[offset:offset + c])
        parts.append(dataset.take_rows(rows))
        offset += c
    return tuple(parts)


@dataclass
class ImputerStats:
    """Training-split statistics shared by the baseline imputers."""

    means: Dict[str, float]
    stds: Dict[str, float]
    modes: Dict[str, int]


def fit_imputer_stats(table: CovariateTable, schema: CovariateSchema) -> ImputerStats:
    means, stds, modes = {}, {}, {}
    for q in schema.model_columns():
        col = schema.columns[q]
        observed = table.values[table.mask[:, q], q]
        if col.kind == "continuous":
            means[col.name] = float(observed.mean()) if observed.size else 0.0
            std = float(observed.std()) if observed.size else 1.0
            stds[col.name] = std if std > 0 else 1.0
        else:
            counts = np.zeros(col.cardinality)
            if observed.size:
                np.add.at(counts, observed.astype(np.int64), 1.0)
            modes[col.name] = int(np.argmax(counts))  # ties resolve to the lowest id
    return ImputerStats(means=means, stds=stds, modes=modes)


def mean_impute(table: CovariateTable, stats: ImputerStats, schema: CovariateSchema) -> CovariateTable:
    """Fill missing entries with the training mean (continuous) or the
    training modal category (categorical). Observed entries pass through."""
    filled = table.copy()
    for q in schema.model_columns():
        col = schema.columns[q]
        missing = ~filled.mask[:, q]
        if not missing.any():
            continue
        if col.kind == "continuous":
            filled.values[missing, q] = stats.means[col.name]
        else:
            filled.values[missing, q] = stats.modes[col.name]
        filled.mask[missing, q] = True
    return filled


def knn_impute(table: CovariateTable, train_table: CovariateTable, schema: CovariateSchema,
               k: int = 5, stats: Optional[ImputerStats] = None) -> CovariateTable:
    """Fill missing entries from the k nearest training rows.

    Distances average squared standardised differences over mutually observed
    continuous columns and 0/1 mismatches over mutually observed categorical
    columns. Queries with no comparable column fall back to mean imputation,
    as does any entry none of the k neighbours observes."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if stats is None:
        stats = fit_imputer_stats(train_table, schema)
    filled = table.copy()
    model_cols = schema.model_columns()
    cont = [q for q in model_cols if schema.columns[q].kind == "continuous"]
    cat = [q for q in model_cols if schema.columns[q].kind == "categorical"]
    stds = np.array([stats.stds[schema.columns[q].name] for q in cont]) if cont else None
    tv, tm = train_table.values, train_table.mask
    k_eff = min(k, train_table.n_rows)
    for i in range(table.n_rows):
        missing_cols = [q for q in model_cols if not table.mask[i, q]]
        if not missing_cols:
            continue
        comparable = np.zeros(train_table.n_rows)
        dist = np.zeros(train_table.n_rows)
        if cont:
            both = table.mask[i, cont][None, :] & tm[:, cont]
            diff = (table.values[i, cont][None, :] - tv[:, cont]) / stds[None, :]
            dist += np.where(both, diff ** 2, 0.0).sum(axis=1)
            comparable += both.sum(axis=1)
        if cat:
            both = table.mask[i, cat][None, :] & tm[:, cat]
            mismatch = table.values[i, cat][None, :] != tv[:, cat]
            dist += np.where(both, mismatch.astype(float), 0.0).sum(axis=1)
            comparable += both.sum(axis=1)
        usable = comparable > 0
        if not usable.any():
            for q in missing_cols:
                col = schema.columns[q]
                filled.values[i, q] = (
                    stats.means[col.name] if col.kind == "continuous" else stats.modes[col.name]
                )
                filled.mask[i, q] = True
            continue
        score = np.where(usable, dist / np.maximum(comparable, 1), np.inf)
        order = np.argsort(score, kind="stable")[:k_eff]
        for q in missing_cols:
            col = schema.columns[q]
            neighbour_vals = tv[order, q][tm[order, q]]
            if neighbour_vals.size == 0:
                value = stats.means[col.name] if col.kind == "continuous" else stats.modes[col.name]
            elif col.kind == "continuous":
                value = float(neighbour_vals.mean())
            else:
                counts = np.zeros(col.cardinality)
                np.add.at(counts, neighbour_vals.astype(np.int64), 1.0)
                value = int(np.argmax(counts))
            filled.values[i, q] = value
            filled.mask[i, q] = True
    return filled


def apply_covariate_method(method: str, train: Dataset, validation: Dataset, test: Dataset,
                           k: int = 5) -> Tuple[Dataset, Dataset, Dataset, dict]:
    """Route covariates through a handling method before modelling.

    ``ours`` leaves tables untouched (the model marginalises), ``zero`` leaves
    them untouched as well (zero-fill happens at the network input), ``mean``
    and ``knn`` pre-impute from training statistics, ``oracle`` restores the
    held-out truth."""
    info = {"method": method}
    if method in ("ours", "zero"):
        return train, validation, test, info
    if method == "oracle":
        return restore_truth(train), restore_truth(validation), restore_truth(test), info
    if method not in ("mean", "knn"):
        raise ValueError(f"unknown covariate method {method!r}")
    stats = fit_imputer_stats(train.x, train.schema)
    out = []
    for ds in (train, validation, test):
        copy = ds.take_rows(np.arange(ds.n_rows))
        if method == "mean":
            copy.x = mean_impute(ds.x, stats, ds.schema)
        else:
            copy.x = knn_impute(ds.x, train.x, ds.schema, k=k, stats=stats)
        out.append(copy)
    info["k"] = k if method == "knn" else None
    return out[0], out[1], out[2], info
