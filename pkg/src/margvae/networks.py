"""Amortised inference and generative networks.

Three feed-forward networks share the same machinery: the latent encoder
q(z | y, x), the covariate-posterior network q(x_missing | x_observed [, y]),
and the decoder p(y | z [, x]). Missing inputs are zero-filled with a mask
channel appended so the networks can tell true zeros from absent values;
categorical inputs are one-hot encoded with an all-zero block when missing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import torch

from .diffmath import DTYPE, Tensor, as_tensor
from .distributions import (
    LOGVAR_MAX,
    LOGVAR_MIN,
    CovariatePosterior,
    CovariateSchema,
)
from .errors import DimensionMismatch, InvalidCategory

_ACTIVATIONS = {
    "relu": torch.relu,
    "tanh": torch.tanh,
    "softplus": torch.nn.functional.softplus,
}


@dataclass
class MlpConfig:
    """Feed-forward body configuration."""

    in_dim: int
    hidden: Tuple[int, ...] = (128, 64)
    activation: str = "relu"

    def __post_init__(self):
        if self.in_dim < 1 or any(w < 1 for w in self.hidden):
            raise ValueError("layer widths must be >= 1")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


def _glorot(shape, generator) -> Tensor:
    fan_in, fan_out = shape[0], shape[1]
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    w = (torch.rand(shape, generator=generator, dtype=DTYPE) * 2.0 - 1.0) * bound
    return w.requires_grad_(True)


class Linear:
    def __init__(self, in_dim: int, out_dim: int, generator):
        self.weight = _glorot((in_dim, out_dim), generator)
        self.bias = torch.zeros(out_dim, dtype=DTYPE, requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias

    def parameters(self, prefix: str) -> Dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


class Mlp:
    """Feed-forward body; the activation is applied after every hidden layer."""

    def __init__(self, config: MlpConfig, generator):
        self.config = config
        self.layers = []
        widths = (config.in_dim,) + tuple(config.hidden)
        for i in range(len(widths) - 1):
            self.layers.append(Linear(widths[i], widths[i + 1], generator))
        self.activation = _ACTIVATIONS[config.activation]
        self.out_dim = widths[-1]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.config.in_dim:
            raise DimensionMismatch(
                f"input width {x.shape[-1]} does not match configured {self.config.in_dim}"
            )
        h = x
        for layer in self.layers:
            h = self.activation(layer(h))
        return h

    def parameters(self, prefix: str) -> Dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.parameters(f"{prefix}.h{i}"))
        return out


@dataclass
class EncoderOutput:
    """Per-row latent means and variances (variances within the clamp range)."""

    mean: Tensor  # (B, L)
    var: Tensor   # (B, L)


@dataclass
class DecoderOutput:
    """Per-row reconstruction means plus the global per-dimension variances."""

    mean: Tensor    # (B, D)
    logvar: Tensor  # (D,)

    @property
    def var(self) -> Tensor:
        return torch.exp(self.logvar)


def fill_and_mask(values, mask, schema: Optional[CovariateSchema] = None) -> Tensor:
    """Network input encoding: zero-filled values with a mask channel.

    Without a schema the values are treated as one continuous block. With a
    schema, categorical columns become one-hot blocks (all zero when missing)
    and the instance-id column is dropped; the mask channel has one bit per
    encoded column. The value stored at a masked position never reaches the
    output, so garbage (including NaN) at missing entries is harmless.
    """
    values = as_tensor(values) if not isinstance(values, torch.Tensor) else values
    mask = torch.as_tensor(mask)
    if values.shape != mask.shape:
        raise DimensionMismatch("values and mask must be congruent")
    mask_f = mask.to(DTYPE)
    if schema is None:
        filled = torch.where(mask.bool(), values, torch.zeros_like(values))
        return torch.cat([filled, mask_f], dim=-1)
    if values.shape[-1] != len(schema):
        raise DimensionMismatch("covariate width does not match the schema")
    blocks = []
    kept_mask = []
    for i in schema.model_columns():
        col = schema.columns[i]
        col_mask = mask[:, i].bool()
        col_vals = values[:, i]
        if col.kind == "continuous":
            blocks.append(torch.where(col_mask, col_vals, torch.zeros_like(col_vals)).unsqueeze(-1))
        else:
            safe = torch.where(col_mask, col_vals, torch.zeros_like(col_vals))
            with torch.no_grad():
                ids = safe.detach()
                if bool((ids != ids.round()).any()) or bool((ids < 0).any()) or bool(
                    (ids >= col.cardinality).any()
                ):
                    raise InvalidCategory(f"column {col.name!r}: observed id out of range")
            one_hot = torch.nn.functional.one_hot(
                safe.long(), num_classes=col.cardinality
            ).to(DTYPE)
            blocks.append(one_hot * col_mask.to(DTYPE).unsqueeze(-1))
        kept_mask.append(col_mask.to(DTYPE).unsqueeze(-1))
    return torch.cat(blocks + kept_mask, dim=-1)


class Encoder:
    """Latent encoder q(z | y, x) with mean and clamped log-variance heads."""

    def __init__(self, y_width: int, x_width: int, latent_dim: int,
                 hidden: Tuple[int, ...], activation: str, generator):
        self.body = Mlp(MlpConfig(y_width + x_width, hidden, activation), generator)
        self.mean_head = Linear(self.body.out_dim, latent_dim, generator)
        self.logvar_head = Linear(self.body.out_dim, latent_dim, generator)
        self.latent_dim = latent_dim

    def __call__(self, y_filled_masked: Tensor, x_filled_masked: Tensor) -> EncoderOutput:
        h = self.body(torch.cat([y_filled_masked, x_filled_masked], dim=-1))
        mean = self.mean_head(h)
        logvar = torch.clamp(self.logvar_head(h), LOGVAR_MIN, LOGVAR_MAX)
        return EncoderOutput(mean=mean, var=torch.exp(logvar))

    def parameters(self, prefix: str = "encoder") -> Dict[str, Tensor]:
        out = self.body.parameters(f"{prefix}.body")
        out.update(self.mean_head.parameters(f"{prefix}.mean"))
        out.update(self.logvar_head.parameters(f"{prefix}.logvar"))
        return out


class CovariateNet:
    """Amortised posterior over covariate entries, optionally conditioned on y.

    Heads exist for every modelled column: (mean, log-variance) pairs for
    continuous columns and softmax logits for categorical columns. Outputs are
    produced for all entries; only masked-missing ones are consumed.
    """

    def __init__(self, schema: CovariateSchema, hidden: Tuple[int, ...], activation: str,
                 generator, y_width: Optional[int] = None):
        self.schema = schema
        self.condition_on_y = y_width is not None
        in_dim = schema.encoded_width() + (y_width or 0)
        self.body = Mlp(MlpConfig(in_dim, hidden, activation), generator)
        self.cont_columns = schema.continuous_model_columns()
        self.cat_columns = schema.categorical_model_columns()
        n_cont = len(self.cont_columns)
        self.cont_mean_head = Linear(self.body.out_dim, max(n_cont, 1), generator) if n_cont else None
        self.cont_logvar_head = Linear(self.body.out_dim, max(n_cont, 1), generator) if n_cont else None
        self.cat_heads = {
            schema.columns[i].name: Linear(self.body.out_dim, schema.columns[i].cardinality, generator)
            for i in self.cat_columns
        }

    def __call__(self, x_filled_masked: Tensor, x_mask, y_filled_masked: Optional[Tensor] = None) -> CovariatePosterior:
        if self.condition_on_y:
            if y_filled_masked is None:
                raise DimensionMismatch("this covariate posterior conditions on y")
            h = self.body(torch.cat([x_filled_masked, y_filled_masked], dim=-1))
        else:
            h = self.body(x_filled_masked)
        n_rows = h.shape[0]
        if self.cont_mean_head is not None:
            cont_mean = self.cont_mean_head(h)
            cont_var = torch.exp(torch.clamp(self.cont_logvar_head(h), LOGVAR_MIN, LOGVAR_MAX))
        else:
            cont_mean = torch.zeros((n_rows, 0), dtype=DTYPE)
            cont_var = torch.ones((n_rows, 0), dtype=DTYPE)
        cat_probs = {
            name: torch.softmax(head(h), dim=-1) for name, head in self.cat_heads.items()
        }
        missing = ~torch.as_tensor(x_mask).bool()
        return CovariatePosterior(self.schema, cont_mean, cont_var, cat_probs, missing)

    def parameters(self, prefix: str = "covnet") -> Dict[str, Tensor]:
        out = self.body.parameters(f"{prefix}.body")
        if self.cont_mean_head is not None:
            out.update(self.cont_mean_head.parameters(f"{prefix}.cont_mean"))
            out.update(self.cont_logvar_head.parameters(f"{prefix}.cont_logvar"))
        for name, head in self.cat_heads.items():
            out.update(head.parameters(f"{prefix}.cat.{name}"))
        return out


class Decoder:
    """Decoder p(y | z [, x]) with a global free log-variance per output."""

    def __init__(self, latent_dim: int, out_dim: int, hidden: Tuple[int, ...],
                 activation: str, generator, x_width: Optional[int] = None):
        self.takes_x = x_width is not None
        in_dim = latent_dim + (x_width or 0)
        self.body = Mlp(MlpConfig(in_dim, hidden, activation), generator)
        self.mean_head = Linear(self.body.out_dim, out_dim, generator)
        self.y_logvar = torch.zeros(out_dim, dtype=DTYPE, requires_grad=True)

    def __call__(self, z: Tensor, x_filled_masked: Optional[Tensor] = None) -> DecoderOutput:
        if self.takes_x:
            if x_filled_masked is None:
                raise DimensionMismatch("this decoder conditions on covariates")
            h = self.body(torch.cat([z, x_filled_masked], dim=-1))
        else:
            if x_filled_masked is not None:
                raise DimensionMismatch("this decoder does not condition on covariates")
            h = self.body(z)
        mean = self.mean_head(h)
        logvar = torch.clamp(self.y_logvar, LOGVAR_MIN, LOGVAR_MAX)
        return DecoderOutput(mean=mean, logvar=logvar)

    def parameters(self, prefix: str = "decoder") -> Dict[str, Tensor]:
        out = self.body.parameters(f"{prefix}.body")
        out.update(self.mean_head.parameters(f"{prefix}.mean"))
        out[f"{prefix}.y_logvar"] = self.y_logvar
        return out
