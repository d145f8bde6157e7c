"""Covariance functions and Gram-matrix construction for the latent GP priors.

A kernel is an additive collection of components; each component is the
product of a squared-exponential factor over some continuous columns and
indicator factors over some categorical columns. Per-latent-dimension
parameters are stored as logarithms and exponentiated at use, and a separate
per-dimension noise variance is added on Gram diagonals on request.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from .diffmath import Tensor, as_tensor, cholesky_factor, parameter, solve_triangular
from .distributions import CovariateSchema
from .errors import ConfigError, DimensionMismatch, InvalidCategory

_DEFAULT_LOG_NOISE = math.log(0.1)


@dataclass(frozen=True)
class KernelComponent:
    """One additive component: SE over `continuous` times indicators over
    `categorical` (either tuple may be empty, not both)."""

    continuous: Tuple[str, ...] = ()
    categorical: Tuple[str, ...] = ()

    def __post_init__(self):
        if not self.continuous and not self.categorical:
            raise ConfigError("kernel component reads no columns")


class KernelSpec:
    """Additive covariance configuration with independent parameters per
    latent dimension.

    Parameters per component: one log-lengthscale per continuous column and
    one log-variance; plus one log noise variance per latent dimension.
    """

    def __init__(self, schema: CovariateSchema, components: Sequence[KernelComponent],
                 latent_dims: int, instance_component: Optional[int] = None):
        if latent_dims < 1:
            raise ConfigError("latent_dims must be >= 1")
        if not components:
            raise ConfigError("at least one kernel component is required")
        self.schema = schema
        self.components = list(components)
        self.latent_dims = latent_dims
        self.instance_component = instance_component
        self._cont_idx: List[Tuple[int, ...]] = []
        self._cat_idx: List[Tuple[int, ...]] = []
        self._cat_card: List[Tuple[int, ...]] = []
        for comp in self.components:
            cont, cat, card = [], [], []
            try:
                for name in comp.continuous:
                    col = schema.column(name)
                    if col.kind != "continuous":
                        raise ConfigError(f"column {name!r} is not continuous")
                    cont.append(schema.index(name))
                for name in comp.categorical:
                    col = schema.column(name)
                    if col.kind != "categorical":
                        raise ConfigError(f"column {name!r} is not categorical")
                    cat.append(schema.index(name))
                    card.append(col.cardinality)
            except KeyError as exc:
                raise ConfigError(str(exc)) from None
            self._cont_idx.append(tuple(cont))
            self._cat_idx.append(tuple(cat))
            self._cat_card.append(tuple(card))
        if instance_component is not None:
            if not (0 <= instance_component < len(self.components)):
                raise ConfigError("instance_component index out of range")
            inst = schema.instance_index
            if inst is None or inst not in self._cat_idx[instance_component]:
                raise ConfigError("instance component must read the instance-id column")
        self.log_lengthscales = [
            [parameter(np.zeros(len(self._cont_idx[r]))) for r in range(len(self.components))]
            for _ in range(latent_dims)
        ]
        self.log_variances = [
            [parameter(0.0) for _ in range(len(self.components))]
            for _ in range(latent_dims)
        ]
        self.log_noise = [parameter(_DEFAULT_LOG_NOISE) for _ in range(latent_dims)]

    @property
    def n_components(self) -> int:
        return len(self.components)

    def shared_component_indices(self) -> List[int]:
        return [r for r in range(self.n_components) if r != self.instance_component]

    def noise_variance(self, latent_dim: int) -> Tensor:
        return torch.exp(self.log_noise[latent_dim])

    def named_parameters(self, prefix: str = "kernel") -> dict:
        out = {}
        for l in range(self.latent_dims):
            for r in range(self.n_components):
                if self.log_lengthscales[l][r].numel():
                    out[f"{prefix}.l{l}.c{r}.log_lengthscales"] = self.log_lengthscales[l][r]
                out[f"{prefix}.l{l}.c{r}.log_variance"] = self.log_variances[l][r]
            out[f"{prefix}.l{l}.log_noise"] = self.log_noise[l]
        return out

    def to_config(self) -> dict:
        return {
            "components": [
                {"continuous": list(c.continuous), "categorical": list(c.categorical)}
                for c in self.components
            ],
            "latent_dims": self.latent_dims,
            "instance_component": self.instance_component,
            "parameters": {
                name: t.detach().numpy().reshape(-1).tolist()
                for name, t in self.named_parameters().items()
            },
        }

    @classmethod
    def from_config(cls, schema: CovariateSchema, cfg: dict) -> "KernelSpec":
        comps = [
            KernelComponent(tuple(c.get("continuous", ())), tuple(c.get("categorical", ())))
            for c in cfg["components"]
        ]
        spec = cls(schema, comps, int(cfg["latent_dims"]), cfg.get("instance_component"))
        params = cfg.get("parameters", {})
        for name, t in spec.named_parameters().items():
            if name in params:
                vals = np.asarray(params[name], dtype=np.float64).reshape(t.shape)
                with torch.no_grad():
                    t.copy_(torch.from_numpy(vals))
        return spec


@dataclass
class GramBundle:
    """Cross/inducing covariances plus the Nystrom residual diagonal."""

    k_xx_diag: Tensor   # (N,) prior variance per row, noiseless
    k_xs: Tensor        # (N, M)
    k_ss: Tensor        # (M, M), noiseless
    nystrom_diag: Tensor  # (N,) diag of K_XX - K_XS K_SS^-1 K_SX, clamped at 0
    chol_ss: Tensor     # lower factor of (K_SS + jitter I), cached for reuse


class LongitudinalIndex:
    """Groups rows into contiguous per-instance ranges."""

    def __init__(self, instance_ids: np.ndarray, instance_component: int):
        ids = np.asarray(instance_ids)
        if ids.ndim != 1:
            raise DimensionMismatch("instance ids must be one-dimensional")
        if len(ids) == 0:
            boundaries = [0]
        else:
            boundaries = [0]
            for i in range(1, len(ids)):
                if ids[i] != ids[i - 1]:
                    boundaries.append(i)
            boundaries.append(len(ids))
        self.instance_ids = ids
        self.ranges = [(boundaries[i], boundaries[i + 1]) for i in range(len(boundaries) - 1)]
        seen = {}
        for start, _ in self.ranges:
            key = ids[start]
            if key in seen:
                raise DimensionMismatch("rows of one instance must be contiguous")
            seen[key] = True
        self.instance_component = instance_component

    @property
    def n_instances(self) -> int:
        return len(self.ranges)

    @property
    def n_rows(self) -> int:
        return len(self.instance_ids)

    def counts(self) -> List[int]:
        return [stop - start for start, stop in self.ranges]


def se_kernel(x, x2, log_lengthscales, log_variance) -> Tensor:
    """Squared-exponential kernel value between two continuous vectors."""
    x, x2 = as_tensor(x).reshape(-1), as_tensor(x2).reshape(-1)
    ll = as_tensor(log_lengthscales).reshape(-1)
    if x.shape != x2.shape or x.shape != ll.shape:
        raise DimensionMismatch("vectors and lengthscales must have equal length")
    inv_l = torch.exp(-ll)
    d2 = (((x - x2) * inv_l) ** 2).sum()
    return torch.exp(as_tensor(log_variance)) * torch.exp(-0.5 * d2)


def categorical_kernel(a: int, b: int, cardinality: int) -> float:
    """Indicator kernel over category ids."""
    for v in (a, b):
        if int(v) != v or not (0 <= int(v) < cardinality):
            raise InvalidCategory(f"category id {v} invalid for cardinality {cardinality}")
    return 1.0 if int(a) == int(b) else 0.0


def _validate_categories(x: Tensor, idx: Tuple[int, ...], card: Tuple[int, ...]):
    with torch.no_grad():
        for q, k in zip(idx, card):
            col = x[:, q]
            if bool((col != col.round()).any()) or bool((col < 0).any()) or bool((col >= k).any()):
                raise InvalidCategory(
                    f"column index {q}: category id out of range for cardinality {k}"
                )


def _component_matrix(spec: KernelSpec, latent_dim: int, r: int, a: Tensor, b: Tensor) -> Tensor:
    cont = spec._cont_idx[r]
    cat = spec._cat_idx[r]
    value = torch.exp(spec.log_variances[latent_dim][r]) * torch.ones(
        (a.shape[0], b.shape[0]), dtype=a.dtype
    )
    if cont:
        inv_l = torch.exp(-spec.log_lengthscales[latent_dim][r])
        diff = (a[:, cont].unsqueeze(1) - b[:, cont].unsqueeze(0)) * inv_l
        value = value * torch.exp(-0.5 * (diff ** 2).sum(-1))
    if cat:
        _validate_categories(a, cat, spec._cat_card[r])
        _validate_categories(b, cat, spec._cat_card[r])
        match = (a[:, cat].unsqueeze(1) == b[:, cat].unsqueeze(0)).all(-1)
        value = value * match.to(a.dtype)
    return value


def gram(spec: KernelSpec, latent_dim: int, a, b, include_noise: bool = False,
         components: Optional[Sequence[int]] = None) -> Tensor:
    """Gram matrix between fully instantiated covariate row blocks.

    Noise is added on the diagonal only when ``include_noise`` and the two
    blocks are the same object.
    """
    a = as_tensor(a) if not isinstance(a, torch.Tensor) else a
    same = a is b
    b = as_tensor(b) if not isinstance(b, torch.Tensor) else b
    if a.dim() != 2 or b.dim() != 2 or a.shape[1] != b.shape[1]:
        raise DimensionMismatch("covariate blocks must be 2-d with equal column counts")
    if a.shape[1] != len(spec.schema):
        raise DimensionMismatch("covariate block width does not match the schema")
    which = range(spec.n_components) if components is None else components
    total = None
    for r in which:
        piece = _component_matrix(spec, latent_dim, r, a, b)
        total = piece if total is None else total + piece
    if total is None:
        total = torch.zeros((a.shape[0], b.shape[0]), dtype=a.dtype)
    if include_noise and same:
        total = total + spec.noise_variance(latent_dim) * torch.eye(a.shape[0], dtype=a.dtype)
    return total


def gram_diag(spec: KernelSpec, latent_dim: int, a, include_noise: bool = False,
              components: Optional[Sequence[int]] = None) -> Tensor:
    """Diagonal of the Gram matrix of a block with itself (all components are
    PSD with k(x, x) = variance, so no pairwise work is needed)."""
    a = as_tensor(a) if not isinstance(a, torch.Tensor) else a
    which = range(spec.n_components) if components is None else components
    diag = torch.zeros(a.shape[0], dtype=a.dtype)
    for r in which:
        diag = diag + torch.exp(spec.log_variances[latent_dim][r])
    if include_noise:
        diag = diag + spec.noise_variance(latent_dim)
    return diag


def gram_bundle(spec: KernelSpec, latent_dim: int, x_rows, s_rows,
                jitter: float = 1e-6, components: Optional[Sequence[int]] = None) -> GramBundle:
    """Cross and inducing Grams plus the Nystrom residual diagonal
    ``diag(K_XX - K_XS K_SS^-1 K_SX)`` clamped at zero from below."""
    x_rows = as_tensor(x_rows) if not isinstance(x_rows, torch.Tensor) else x_rows
    s_rows = as_tensor(s_rows) if not isinstance(s_rows, torch.Tensor) else s_rows
    if s_rows.shape[0] < 1:
        raise DimensionMismatch("at least one inducing row is required")
    k_ss = gram(spec, latent_dim, s_rows, s_rows, include_noise=False, components=components)
    k_xs = gram(spec, latent_dim, x_rows, s_rows, include_noise=False, components=components)
    k_xx_diag = gram_diag(spec, latent_dim, x_rows, include_noise=False, components=components)
    chol_ss = cholesky_factor(k_ss, jitter)
    v = solve_triangular(chol_ss, k_xs.mT)  # (M, N)
    nystrom = torch.clamp(k_xx_diag - (v ** 2).sum(0), min=0.0)
    return GramBundle(k_xx_diag=k_xx_diag, k_xs=k_xs, k_ss=k_ss,
                      nystrom_diag=nystrom, chol_ss=chol_ss)


@dataclass
class LongitudinalParts:
    """Per-instance factors of the instance-specific covariance plus the
    shared-component blocks against the inducing rows."""

    sigma_chols: List[Tensor]          # lower factors of K^(inst)_pp + noise I
    shared_k_xp_xp: List[Tensor]       # shared-component Gram per instance
    shared_k_xp_s: List[Tensor]        # shared-component cross blocks, empty tensors if no S
    shared_k_ss: Optional[Tensor]      # shared-component inducing Gram
    shared_chol_ss: Optional[Tensor]


def longitudinal_blocks(spec: KernelSpec, latent_dim: int, index: LongitudinalIndex,
                        x_rows, s_rows=None, jitter: float = 1e-6) -> LongitudinalParts:
    """Factor the block-diagonal instance covariance and build the shared
    cross/inducing parts for the instance-batched KL bound."""
    x_rows = as_tensor(x_rows) if not isinstance(x_rows, torch.Tensor) else x_rows
    if x_rows.shape[0] != index.n_rows:
        raise DimensionMismatch("row block does not match the longitudinal index")
    inst = index.instance_component
    if not (0 <= inst < spec.n_components):
        raise ConfigError("instance component index out of range for this kernel")
    shared = [r for r in range(spec.n_components) if r != inst]
    noise = spec.noise_variance(latent_dim)
    sigma_chols, k_xpxp, k_xps = [], [], []
    for start, stop in index.ranges:
        block = x_rows[start:stop]
        sigma = gram(spec, latent_dim, block, block, include_noise=False, components=[inst])
        sigma = sigma + noise * torch.eye(block.shape[0], dtype=x_rows.dtype)
        sigma_chols.append(cholesky_factor(sigma, 0.0))
        if shared:
            k_xpxp.append(gram(spec, latent_dim, block, block, include_noise=False,
                               components=shared))
            if s_rows is not None:
                k_xps.append(gram(spec, latent_dim, block, s_rows, include_noise=False,
                                  components=shared))
        else:
            k_xpxp.append(torch.zeros((block.shape[0], block.shape[0]), dtype=x_rows.dtype))
    shared_k_ss = None
    shared_chol = None
    if shared and s_rows is not None:
        s_rows = as_tensor(s_rows) if not isinstance(s_rows, torch.Tensor) else s_rows
        shared_k_ss = gram(spec, latent_dim, s_rows, s_rows, include_noise=False,
                           components=shared)
        shared_chol = cholesky_factor(shared_k_ss, jitter)
    return LongitudinalParts(sigma_chols=sigma_chols, shared_k_xp_xp=k_xpxp,
                             shared_k_xp_s=k_xps, shared_k_ss=shared_k_ss,
                             shared_chol_ss=shared_chol)
