"""Probability primitives: Gaussian/categorical densities and KLs, the
covariate prior with its empirical fit, and reparameterised sampling.

Closed-form expressions take and return torch tensors so every quantity is
differentiable in its parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import torch

from . import diffmath
from .diffmath import Tensor, as_tensor, cholesky_factor, logdet_from_factor, solve_triangular
from .errors import (
    DimensionMismatch,
    NonPositiveVariance,
    SupportViolation,
)

LOG_2PI = float(np.log(2.0 * np.pi))

# Network log-variance heads are clamped to this range before exponentiation.
LOGVAR_MIN = -6.0
LOGVAR_MAX = 4.0

_VARIANCE_FLOOR = 1e-6
_CATEGORY_SMOOTHING = 0.5


@dataclass(frozen=True)
class Column:
    """One covariate column: continuous, or categorical with a cardinality."""

    name: str
    kind: str  # "continuous" | "categorical"
    cardinality: Optional[int] = None
    is_time: bool = False
    is_instance: bool = False

    def __post_init__(self):
        if self.kind not in ("continuous", "categorical"):
            raise ValueError(f"unknown column kind {self.kind!r}")
        if self.kind == "categorical":
            if self.cardinality is None or self.cardinality < 2:
                raise ValueError(f"column {self.name!r}: cardinality must be >= 2")
        elif self.cardinality is not None:
            raise ValueError(f"column {self.name!r}: continuous columns have no cardinality")


class CovariateSchema:
    """Typed description of the covariate table columns."""

    def __init__(self, columns: List[Column]):
        names = [c.name for c in columns]
        if len(set(names)) != len(names):
            raise ValueError("duplicate column names in schema")
        if sum(c.is_time for c in columns) > 1:
            raise ValueError("at most one time column")
        if sum(c.is_instance for c in columns) > 1:
            raise ValueError("at most one instance-id column")
        for c in columns:
            if c.is_instance and c.kind != "categorical":
                raise ValueError("instance-id column must be categorical")
            if c.is_time and c.kind != "continuous":
                raise ValueError("time column must be continuous")
        self.columns = list(columns)
        self._index = {c.name: i for i, c in enumerate(columns)}

    def __len__(self):
        return len(self.columns)

    def __eq__(self, other):
        return isinstance(other, CovariateSchema) and self.columns == other.columns

    def index(self, name: str) -> int:
        if name not in self._index:
            raise KeyError(f"unknown covariate column {name!r}")
        return self._index[name]

    def column(self, name: str) -> Column:
        return self.columns[self.index(name)]

    @property
    def instance_index(self) -> Optional[int]:
        for i, c in enumerate(self.columns):
            if c.is_instance:
                return i
        return None

    @property
    def time_index(self) -> Optional[int]:
        for i, c in enumerate(self.columns):
            if c.is_time:
                return i
        return None

    def model_columns(self) -> List[int]:
        """Columns seen by networks and priors (the instance id is an index,
        not a modelled covariate)."""
        return [i for i, c in enumerate(self.columns) if not c.is_instance]

    def continuous_model_columns(self) -> List[int]:
        return [i for i in self.model_columns() if self.columns[i].kind == "continuous"]

    def categorical_model_columns(self) -> List[int]:
        return [i for i in self.model_columns() if self.columns[i].kind == "categorical"]

    def encoded_width(self) -> int:
        """Width of the fill-and-mask encoding: continuous values, one-hot
        blocks, and one mask bit per modelled column."""
        width = 0
        for i in self.model_columns():
            col = self.columns[i]
            width += 1 if col.kind == "continuous" else col.cardinality
        return width + len(self.model_columns())

    def to_config(self) -> list:
        records = []
        for c in self.columns:
            rec = {"name": c.name, "kind": c.kind}
            if c.cardinality is not None:
                rec["cardinality"] = c.cardinality
            if c.is_time:
                rec["time"] = True
            if c.is_instance:
                rec["instance"] = True
            records.append(rec)
        return records

    @classmethod
    def from_config(cls, records: list) -> "CovariateSchema":
        cols = [
            Column(
                name=r["name"],
                kind=r["kind"],
                cardinality=r.get("cardinality"),
                is_time=bool(r.get("time", False)),
                is_instance=bool(r.get("instance", False)),
            )
            for r in records
        ]
        return cls(cols)


@dataclass
class CovariatePrior:
    """Factorised covariate prior: Gaussian per continuous column,
    categorical per discrete column."""

    means: Dict[str, float] = field(default_factory=dict)
    variances: Dict[str, float] = field(default_factory=dict)
    probabilities: Dict[str, np.ndarray] = field(default_factory=dict)

    def validate(self):
        for name, v in self.variances.items():
            if v <= 0:
                raise NonPositiveVariance(f"prior variance for {name!r} must be positive")
        for name, p in self.probabilities.items():
            p = np.asarray(p)
            if (p < 0).any() or abs(p.sum() - 1.0) > 1e-12:
                raise ValueError(f"prior probabilities for {name!r} must be a distribution")

    def to_config(self) -> dict:
        return {
            "means": dict(self.means),
            "variances": dict(self.variances),
            "probabilities": {k: [float(x) for x in v] for k, v in self.probabilities.items()},
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "CovariatePrior":
        prior = cls(
            means={k: float(v) for k, v in cfg.get("means", {}).items()},
            variances={k: float(v) for k, v in cfg.get("variances", {}).items()},
            probabilities={k: np.asarray(v, dtype=np.float64) for k, v in cfg.get("probabilities", {}).items()},
        )
        prior.validate()
        return prior


class CovariatePosterior:
    """Amortised per-row distributions over covariate entries.

    Heads are produced for every modelled column; only masked-missing entries
    are ever consumed downstream.
    """

    def __init__(self, schema: CovariateSchema, cont_mean: Tensor, cont_var: Tensor,
                 cat_probs: Dict[str, Tensor], missing: Tensor):
        self.schema = schema
        self.cont_mean = cont_mean  # (B, n_continuous), schema order
        self.cont_var = cont_var
        self.cat_probs = cat_probs  # name -> (B, cardinality)
        self.missing = missing      # (B, Q) boolean, True where missing

    @property
    def n_rows(self) -> int:
        return int(self.missing.shape[0])

    def continuous_slot(self, column_index: int) -> int:
        cont = self.schema.continuous_model_columns()
        return cont.index(column_index)


def _positive(var, what: str):
    if isinstance(var, torch.Tensor):
        bad = bool((var.detach() <= 0).any())
    else:
        bad = var <= 0
    if bad:
        raise NonPositiveVariance(f"{what} must be strictly positive")


def kl_diag_gaussian(mean_q, var_q, mean_p, var_p) -> Tensor:
    """KL between factorised Gaussians, summed over all entries."""
    mean_q, var_q = as_tensor(mean_q), as_tensor(var_q)
    mean_p, var_p = as_tensor(mean_p), as_tensor(var_p)
    _positive(var_q, "q variance")
    _positive(var_p, "p variance")
    terms = 0.5 * (
        torch.log(var_p) - torch.log(var_q)
        + (var_q + (mean_q - mean_p) ** 2) / var_p
        - 1.0
    )
    return terms.sum()


def kl_full_gaussian(mean_q, cov_q, mean_p, cov_p, jitter: float = 0.0) -> Tensor:
    """KL(N(mean_q, cov_q) || N(mean_p, cov_p)) via Cholesky factors."""
    mean_q, mean_p = as_tensor(mean_q).reshape(-1), as_tensor(mean_p).reshape(-1)
    cov_q, cov_p = as_tensor(cov_q), as_tensor(cov_p)
    n = mean_q.shape[0]
    if cov_q.shape != (n, n) or cov_p.shape != (n, n) or mean_p.shape[0] != n:
        raise DimensionMismatch("mean/covariance shapes are inconsistent")
    l_q = cholesky_factor(cov_q, jitter)
    l_p = cholesky_factor(cov_p, jitter)
    # tr(cov_p^-1 cov_q) = ||L_p^-1 L_q||_F^2
    trace = (solve_triangular(l_p, l_q) ** 2).sum()
    diff = solve_triangular(l_p, mean_q - mean_p)
    quad = (diff ** 2).sum()
    return 0.5 * (trace + quad - n + logdet_from_factor(l_p) - logdet_from_factor(l_q))


def kl_categorical(q, p) -> Tensor:
    """KL between categorical distributions with the 0*log(0) = 0 convention."""
    q, p = as_tensor(q), as_tensor(p)
    if q.shape != p.shape:
        raise DimensionMismatch("probability vectors differ in length")
    with torch.no_grad():
        if bool(((q > 0) & (p == 0)).any()):
            raise SupportViolation("q has mass where p has none")
    safe_q = torch.where(q > 0, q, torch.ones_like(q))
    safe_p = torch.where(q > 0, p, torch.ones_like(p))
    return (safe_q * (torch.log(safe_q) - torch.log(safe_p))).sum()


def gaussian_log_density(y, mean, var) -> Tensor:
    """Factorised Gaussian log density, summed over all supplied entries."""
    y, mean, var = as_tensor(y), as_tensor(mean), as_tensor(var)
    _positive(var, "variance")
    return (-0.5 * (LOG_2PI + torch.log(var) + (y - mean) ** 2 / var)).sum()


def reparam_gaussian(mean, var, eps) -> Tensor:
    """Differentiable Gaussian sample ``mean + sqrt(var) * eps``."""
    mean, var, eps = as_tensor(mean), as_tensor(var), as_tensor(eps)
    _positive(var, "variance")
    return mean + torch.sqrt(var) * eps


def fit_covariate_prior(table, schema: CovariateSchema,
                        smoothing: float = _CATEGORY_SMOOTHING,
                        variance_floor: float = _VARIANCE_FLOOR) -> CovariatePrior:
    """Empirical prior from observed entries of a covariate table.

    Continuous columns get the observed mean and unbiased variance (floored);
    categorical columns get smoothed frequency vectors. Fully missing columns
    fall back to a standard normal or a uniform distribution.
    """
    values = np.asarray(table.values, dtype=np.float64)
    mask = np.asarray(table.mask, dtype=bool)
    prior = CovariatePrior()
    for i in schema.model_columns():
        col = schema.columns[i]
        observed = values[mask[:, i], i]
        if col.kind == "continuous":
            if observed.size == 0:
                prior.means[col.name] = 0.0
                prior.variances[col.name] = 1.0
            else:
                prior.means[col.name] = float(observed.mean())
                if observed.size > 1:
                    var = float(observed.var(ddof=1))
                else:
                    var = 0.0
                prior.variances[col.name] = max(var, variance_floor)
        else:
            k = col.cardinality
            counts = np.zeros(k, dtype=np.float64)
            if observed.size:
                ids = observed.astype(np.int64)
                if (ids < 0).any() or (ids >= k).any():
                    raise ValueError(f"column {col.name!r}: category id out of range")
                np.add.at(counts, ids, 1.0)
                counts += smoothing
            else:
                counts[:] = 1.0
            prior.probabilities[col.name] = counts / counts.sum()
    prior.validate()
    return prior
