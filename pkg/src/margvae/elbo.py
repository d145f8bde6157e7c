"""Training objectives: reconstruction, covariate KL, exact and inducing-point
latent KL bounds, the expectation over missing covariates, and mini-batch
scaling.

Row batches are scaled by N / N_batch; instance batches by P / P_batch. The
inducing-point bounds are unbiased over uniformly drawn fixed-size batches and
upper-bound the exact latent KL at full batch, so the assembled objective
stays a valid evidence lower bound.

Everything here evaluates against a frozen parameter snapshot; accumulation
order over latent dimensions, branches, and instances is fixed so repeated
runs are bit-reproducible.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .diffmath import (
    DTYPE,
    Tensor,
    as_tensor,
    cho_solve,
    cholesky_factor,
    logdet_from_factor,
    parameter,
    solve_triangular,
)
from .distributions import (
    LOG_2PI,
    CovariatePosterior,
    CovariatePrior,
    CovariateSchema,
)
from .errors import (
    ConfigError,
    DimensionMismatch,
    EnumerationOverflow,
    SizeGuard,
    SupportViolation,
)
from .kernels import KernelSpec, LongitudinalIndex, gram, gram_bundle, longitudinal_blocks
from .networks import EncoderOutput, fill_and_mask

DEFAULT_ENUMERATION_CAP = 64
_EXACT_KL_GUARD = 4096


class InducingState:
    """Inducing covariate rows plus per-latent-dimension variational Gaussians.

    Continuous coordinates of the inducing rows are trainable (optionally
    frozen); categorical coordinates are fixed after initialisation. Each
    covariance is parameterised by its Cholesky factor with a log-diagonal,
    so it is positive definite by construction.
    """

    def __init__(self, schema: CovariateSchema, s_values: np.ndarray, latent_dims: int,
                 train_inputs: bool = True):
        s_values = np.asarray(s_values, dtype=np.float64)
        if s_values.ndim != 2 or s_values.shape[1] != len(schema):
            raise DimensionMismatch("inducing rows must match the schema width")
        if s_values.shape[0] < 1:
            raise DimensionMismatch("at least one inducing row is required")
        self.schema = schema
        self.latent_dims = latent_dims
        self.train_inputs = train_inputs
        self._cont_cols = [i for i, c in enumerate(schema.columns) if c.kind == "continuous"]
        self._cat_cols = [i for i, c in enumerate(schema.columns) if c.kind == "categorical"]
        self.s_cont = torch.as_tensor(
            np.ascontiguousarray(s_values[:, self._cont_cols]), dtype=DTYPE
        )
        if train_inputs:
            self.s_cont.requires_grad_(True)
        self.s_cat = torch.as_tensor(
            np.ascontiguousarray(s_values[:, self._cat_cols]), dtype=DTYPE
        )
        m = s_values.shape[0]
        self.m = [parameter(np.zeros(m)) for _ in range(latent_dims)]
        self.h_raw = [parameter(np.zeros((m, m))) for _ in range(latent_dims)]

    @property
    def count(self) -> int:
        return int(self.s_cont.shape[0]) if self._cont_cols else int(self.s_cat.shape[0])

    def s_matrix(self) -> Tensor:
        columns: List[Optional[Tensor]] = [None] * len(self.schema)
        for pos, q in enumerate(self._cont_cols):
            columns[q] = self.s_cont[:, pos]
        for pos, q in enumerate(self._cat_cols):
            columns[q] = self.s_cat[:, pos]
        return torch.stack(columns, dim=1)

    def h_factor(self, latent_dim: int) -> Tensor:
        raw = self.h_raw[latent_dim]
        return torch.tril(raw, -1) + torch.diag_embed(torch.exp(raw.diagonal()))

    def h_matrix(self, latent_dim: int) -> Tensor:
        f = self.h_factor(latent_dim)
        return f @ f.mT

    def named_parameters(self, prefix: str = "inducing") -> Dict[str, Tensor]:
        out = {}
        if self.train_inputs and self.s_cont.numel():
            out[f"{prefix}.s_cont"] = self.s_cont
        for l in range(self.latent_dims):
            out[f"{prefix}.m.l{l}"] = self.m[l]
            out[f"{prefix}.h.l{l}"] = self.h_raw[l]
        return out

    def state_arrays(self) -> Dict[str, np.ndarray]:
        out = {"s_cont": self.s_cont.detach().numpy(), "s_cat": self.s_cat.detach().numpy()}
        for l in range(self.latent_dims):
            out[f"m.l{l}"] = self.m[l].detach().numpy()
            out[f"h.l{l}"] = self.h_raw[l].detach().numpy()
        return out


@dataclass
class ElboBreakdown:
    """The three objective terms; total = reconstruction - latent - covariate."""

    reconstruction: Tensor
    latent_kl: Tensor
    covariate_kl: Tensor

    @property
    def total(self) -> Tensor:
        return self.reconstruction - self.latent_kl - self.covariate_kl

    def detach_floats(self) -> Tuple[float, float, float, float]:
        return (
            float(self.reconstruction.detach()),
            float(self.latent_kl.detach()),
            float(self.covariate_kl.detach()),
            float(self.total.detach()),
        )


@dataclass
class Batch:
    """A training batch: row tensors plus the scaling bookkeeping."""

    y_values: Tensor
    y_mask: Tensor
    x_values: Tensor
    x_mask: Tensor
    n_total: int
    scale: float
    index: Optional[LongitudinalIndex] = None  # batch-local instance ranges
    p_total: Optional[int] = None

    @property
    def n_rows(self) -> int:
        return int(self.y_values.shape[0])


class MissingExpectationPlan:
    """Which missing covariate entries to enumerate (categorical) or sample
    (continuous) when taking expectations over the covariate posterior."""

    def __init__(self, base_values: Tensor, missing: Tensor, schema: CovariateSchema,
                 cap: int = DEFAULT_ENUMERATION_CAP, mc_samples: int = 1):
        if mc_samples < 1:
            raise ConfigError("mc_samples must be >= 1")
        self.schema = schema
        self.base_values = base_values
        self.missing = missing
        self.cap = cap
        self.mc_samples = mc_samples
        self.categorical: List[Tuple[int, int, int]] = []  # (row, col, cardinality)
        self.continuous: List[Tuple[int, int]] = []
        miss = missing.detach().cpu().numpy()
        for i in range(miss.shape[0]):
            for q in schema.model_columns():
                if not miss[i, q]:
                    continue
                col = schema.columns[q]
                if col.kind == "categorical":
                    self.categorical.append((i, q, col.cardinality))
                else:
                    self.continuous.append((i, q))

    @classmethod
    def from_batch(cls, x_values, x_mask, schema: CovariateSchema,
                   cap: int = DEFAULT_ENUMERATION_CAP, mc_samples: int = 1) -> "MissingExpectationPlan":
        values = as_tensor(x_values) if not isinstance(x_values, torch.Tensor) else x_values
        mask = torch.as_tensor(x_mask).bool()
        return cls(values, ~mask, schema, cap, mc_samples)

    @property
    def joint_size(self) -> int:
        size = 1
        for _, _, card in self.categorical:
            size *= card
        return size

    def instantiate_base(self) -> Tensor:
        """Observed entries kept, missing entries zeroed (placeholders only)."""
        return torch.where(self.missing, torch.zeros_like(self.base_values), self.base_values)

    def instantiate(self, assignment: Sequence[int], posteriors: CovariatePosterior,
                    generator) -> Tensor:
        """Fully instantiated covariate block for one categorical assignment,
        with continuous missing entries drawn by reparameterisation."""
        x = self.instantiate_base()
        if self.categorical:
            rows = torch.tensor([e[0] for e in self.categorical])
            cols = torch.tensor([e[1] for e in self.categorical])
            vals = torch.tensor([float(k) for k in assignment], dtype=DTYPE)
            x = x.index_put((rows, cols), vals)
        if self.continuous:
            rows = torch.tensor([e[0] for e in self.continuous])
            cols = torch.tensor([e[1] for e in self.continuous])
            means, variances = [], []
            for row, col in self.continuous:
                slot = posteriors.continuous_slot(col)
                means.append(posteriors.cont_mean[row, slot])
                variances.append(posteriors.cont_var[row, slot])
            mean_t = torch.stack(means)
            var_t = torch.stack(variances)
            eps = torch.randn(mean_t.shape, generator=generator, dtype=DTYPE)
            x = x.index_put((rows, cols), mean_t + torch.sqrt(var_t) * eps)
        return x

    def sample_assignment(self, posteriors: CovariatePosterior, generator) -> List[int]:
        """One categorical assignment drawn from the posterior (no gradient
        flows through the draw)."""
        out = []
        for row, col, _ in self.categorical:
            name = self.schema.columns[col].name
            probs = posteriors.cat_probs[name][row].detach()
            k = int(torch.multinomial(probs, 1, generator=generator))
            out.append(k)
        return out


def expect_over_missing_covariates(term_fn: Callable[[Tensor], Tensor],
                                   posteriors: CovariatePosterior,
                                   plan: MissingExpectationPlan,
                                   generator) -> Tensor:
    """Expectation of ``term_fn`` over the covariate posterior.

    Categorical assignments are enumerated exactly (weights are products of
    posterior probabilities); continuous entries are reparameterisation
    sampled afresh per branch and averaged over ``plan.mc_samples`` draws.
    """
    if not plan.categorical and not plan.continuous:
        return term_fn(plan.instantiate_base())
    if plan.joint_size > plan.cap:
        raise EnumerationOverflow(
            f"joint categorical enumeration of size {plan.joint_size} exceeds cap {plan.cap}"
        )
    total = torch.zeros((), dtype=DTYPE)
    for assignment in itertools.product(*[range(card) for _, _, card in plan.categorical]):
        weight = torch.ones((), dtype=DTYPE)
        for (row, col, _), k in zip(plan.categorical, assignment):
            name = plan.schema.columns[col].name
            weight = weight * posteriors.cat_probs[name][row, k]
        for _ in range(plan.mc_samples):
            x = plan.instantiate(assignment, posteriors, generator)
            total = total + weight * term_fn(x) / plan.mc_samples
    return total


def covariate_kl_term(posteriors: CovariatePosterior, prior: CovariatePrior,
                      schema: CovariateSchema, scale: float = 1.0) -> Tensor:
    """Closed-form KL from the covariate posterior to the prior, summed over
    masked-missing entries and scaled for the mini-batch."""
    total = torch.zeros((), dtype=DTYPE)
    missing = posteriors.missing
    for slot, col_idx in enumerate(schema.continuous_model_columns()):
        name = schema.columns[col_idx].name
        rows = missing[:, col_idx]
        if not bool(rows.any()):
            continue
        mean = posteriors.cont_mean[rows, slot]
        var = posteriors.cont_var[rows, slot]
        pm = prior.means[name]
        pv = prior.variances[name]
        kl = 0.5 * (np.log(pv) - torch.log(var) + (var + (mean - pm) ** 2) / pv - 1.0)
        total = total + kl.sum()
    for col_idx in schema.categorical_model_columns():
        name = schema.columns[col_idx].name
        rows = missing[:, col_idx]
        if not bool(rows.any()):
            continue
        q = posteriors.cat_probs[name][rows]
        p = torch.as_tensor(prior.probabilities[name], dtype=DTYPE)
        if bool((p <= 0).any()):
            raise SupportViolation(f"prior for {name!r} has a zero-probability category")
        total = total + (q * (torch.log(q) - torch.log(p))).sum()
    return scale * total


def standard_normal_kl(encoder_out: EncoderOutput) -> Tensor:
    """Sum over rows and dimensions of KL(q(z) || N(0, I))."""
    mean, var = encoder_out.mean, encoder_out.var
    return 0.5 * (var + mean ** 2 - 1.0 - torch.log(var)).sum()


def kl_cvae(encoder_out: EncoderOutput, posteriors: CovariatePosterior,
            prior: CovariatePrior, schema: CovariateSchema, scale: float = 1.0) -> Tensor:
    """Per-row latent KL against the factorised standard-normal prior plus the
    covariate KL; with a covariate-independent latent prior the expectation
    over missing covariates collapses."""
    return scale * standard_normal_kl(encoder_out) + covariate_kl_term(
        posteriors, prior, schema, scale
    )


def expected_reconstruction(y_values, y_mask, encoder_out: EncoderOutput,
                            decode_fn: Callable[[Tensor], "DecoderOutput"],
                            mc_samples: int, generator, scale: float = 1.0) -> Tensor:
    """Monte-Carlo estimate of the expected log-likelihood of observed y
    entries under reparameterised latent draws."""
    if mc_samples < 1:
        raise ConfigError("mc_samples must be >= 1")
    y_values = as_tensor(y_values) if not isinstance(y_values, torch.Tensor) else y_values
    mask = torch.as_tensor(y_mask).bool()
    mask_f = mask.to(DTYPE)
    y_filled = torch.where(mask, y_values, torch.zeros_like(y_values))
    total = torch.zeros((), dtype=DTYPE)
    for _ in range(mc_samples):
        eps = torch.randn(encoder_out.mean.shape, generator=generator, dtype=DTYPE)
        z = encoder_out.mean + torch.sqrt(encoder_out.var) * eps
        out = decode_fn(z)
        var = torch.exp(out.logvar)
        ll = -0.5 * (LOG_2PI + out.logvar + (y_filled - out.mean) ** 2 / var)
        total = total + (ll * mask_f).sum()
    return scale * total / mc_samples


def _kl_inducing_gaussian(m: Tensor, h_factor: Tensor, chol_ss: Tensor) -> Tensor:
    """KL(N(m, F F^T) || N(0, K_SS)) given the Cholesky factor of K_SS."""
    trace = (solve_triangular(chol_ss, h_factor) ** 2).sum()
    quad = (solve_triangular(chol_ss, m) ** 2).sum()
    order = m.shape[0]
    return 0.5 * (trace + quad - order + logdet_from_factor(chol_ss) - logdet_from_factor(h_factor))


def kl_gp_exact(encoder_out: EncoderOutput, spec: KernelSpec, x_full,
                size_guard: int = _EXACT_KL_GUARD, jitter: float = 0.0) -> Tensor:
    """Dense per-latent-dimension KL against the GP prior (noise included)."""
    x_full = as_tensor(x_full) if not isinstance(x_full, torch.Tensor) else x_full
    n = x_full.shape[0]
    if n > size_guard:
        raise SizeGuard(f"dense KL requested for N={n} above guard {size_guard}")
    if encoder_out.mean.shape != (n, spec.latent_dims):
        raise DimensionMismatch("encoder statistics do not match the covariate block")
    total = torch.zeros((), dtype=DTYPE)
    zero = torch.zeros(n, dtype=DTYPE)
    for l in range(spec.latent_dims):
        cov_prior = gram(spec, l, x_full, x_full, include_noise=True)
        chol_p = cholesky_factor(cov_prior, jitter)
        var_l = encoder_out.var[:, l]
        mean_l = encoder_out.mean[:, l]
        # KL with diagonal q covariance, written directly for stability
        sol = solve_triangular(chol_p, torch.diag_embed(torch.sqrt(var_l)))
        trace = (sol ** 2).sum()
        diff = solve_triangular(chol_p, mean_l - zero)
        quad = (diff ** 2).sum()
        logdet_q = torch.log(var_l).sum()
        total = total + 0.5 * (trace + quad - n + logdet_from_factor(chol_p) - logdet_q)
    return total


def kl_gp_bound_minibatch(encoder_out: EncoderOutput, inducing: InducingState,
                          spec: KernelSpec, x_rows, n_total: int,
                          jitter: float = 1e-6) -> Tensor:
    """Inducing-point upper bound on the latent GP KL from a row mini-batch.

    Per latent dimension: batch-scaled per-row terms (projection error,
    encoder variance, Nystrom residual, inducing-covariance trace, negative
    encoder log-variance), plus the noise log-volume constants and the KL of
    the inducing distribution from its prior. Unbiased over uniformly drawn
    fixed-size batches; at full batch it dominates the exact KL.
    """
    x_rows = as_tensor(x_rows) if not isinstance(x_rows, torch.Tensor) else x_rows
    n_batch = x_rows.shape[0]
    if encoder_out.mean.shape[0] != n_batch:
        raise DimensionMismatch("encoder statistics do not match the covariate block")
    s = inducing.s_matrix()
    ratio = n_total / n_batch
    total = torch.zeros((), dtype=DTYPE)
    for l in range(spec.latent_dims):
        bundle = gram_bundle(spec, l, x_rows, s, jitter=jitter)
        m = inducing.m[l]
        h_factor = inducing.h_factor(l)
        noise = spec.noise_variance(l)
        alpha = cho_solve(bundle.chol_ss, m)
        projected = bundle.k_xs @ alpha
        solved_cross = cho_solve(bundle.chol_ss, bundle.k_xs.mT)  # (M, n_batch)
        trace_rows = ((h_factor.mT @ solved_cross) ** 2).sum(0)
        mean_l = encoder_out.mean[:, l]
        var_l = encoder_out.var[:, l]
        row_terms = (
            (projected - mean_l) ** 2 + var_l + bundle.nystrom_diag + trace_rows
        ) / noise - torch.log(var_l)
        total = total + 0.5 * ratio * row_terms.sum()
        total = total + 0.5 * n_total * torch.log(noise) - 0.5 * n_total
        total = total + _kl_inducing_gaussian(m, h_factor, bundle.chol_ss)
    return total


def kl_longitudinal_bound(encoder_out: EncoderOutput, inducing: Optional[InducingState],
                          spec: KernelSpec, index: LongitudinalIndex, x_rows,
                          p_total: int, n_total: int, jitter: float = 1e-6) -> Tensor:
    """Instance-batched upper bound on the latent GP KL for longitudinal data.

    The instance-specific component plus noise forms per-instance dense blocks
    that are handled exactly; the remaining (shared) components go through the
    inducing approximation. ``index`` describes the rows of the batch; scaling
    uses the total instance count ``p_total`` and total row count ``n_total``.
    """
    x_rows = as_tensor(x_rows) if not isinstance(x_rows, torch.Tensor) else x_rows
    if encoder_out.mean.shape[0] != index.n_rows:
        raise DimensionMismatch("encoder statistics do not match the longitudinal index")
    p_batch = index.n_instances
    ratio = p_total / p_batch
    shared = spec.shared_component_indices() if spec.instance_component is not None else []
    if spec.instance_component is None:
        raise ConfigError("longitudinal bound requires a designated instance component")
    if shared and inducing is None:
        raise ConfigError("shared kernel components require an inducing state")
    s = inducing.s_matrix() if (shared and inducing is not None) else None
    total = torch.zeros((), dtype=DTYPE)
    for l in range(spec.latent_dims):
        parts = longitudinal_blocks(spec, l, index, x_rows, s, jitter=jitter)
        if shared:
            m = inducing.m[l]
            h_factor = inducing.h_factor(l)
            alpha = cho_solve(parts.shared_chol_ss, m)
            h_proj = cho_solve(parts.shared_chol_ss, h_factor)  # K_SS^-1 F
        acc = torch.zeros((), dtype=DTYPE)
        for p, (start, stop) in enumerate(index.ranges):
            mean_p = encoder_out.mean[start:stop, l]
            var_p = encoder_out.var[start:stop, l]
            chol_p = parts.sigma_chols[p]
            n_p = stop - start
            if shared:
                k_xp_s = parts.shared_k_xp_s[p]
                g = k_xp_s @ alpha
                v = solve_triangular(parts.shared_chol_ss, k_xp_s.mT)  # (M, n_p)
                k_tilde = parts.shared_k_xp_xp[p] - v.mT @ v
            else:
                g = torch.zeros(n_p, dtype=DTYPE)
                k_tilde = None
            u = solve_triangular(chol_p, g - mean_p)
            quad = (u ** 2).sum()
            w = solve_triangular(chol_p, torch.eye(n_p, dtype=DTYPE))
            sigma_inv = w.mT @ w
            acc = acc + quad
            acc = acc + (sigma_inv.diagonal() * var_p).sum()
            acc = acc + logdet_from_factor(chol_p)
            if shared:
                acc = acc + (sigma_inv * k_tilde).sum()
                d = w @ k_xp_s  # (n_p, M); L_p^-1 K_XpS
                acc = acc + ((d @ h_proj) ** 2).sum()
            acc = acc - torch.log(var_p).sum()
        total = total + 0.5 * ratio * acc - 0.5 * n_total
        if shared:
            total = total + _kl_inducing_gaussian(m, h_factor, parts.shared_chol_ss)
    return total


def _cvae_branches(plan: MissingExpectationPlan, posteriors: CovariatePosterior,
                   generator) -> Tuple[List[int], List[Tensor], Tensor]:
    """Per-row branch expansion for row-factorising objectives.

    Returns the source-row index per branch, the branch weights, and the fully
    instantiated covariate block (one row per branch). Rows whose own joint
    categorical size exceeds the cap fall back to a single sampled assignment.
    """
    n_rows = plan.base_values.shape[0]
    by_row_cat: Dict[int, List[Tuple[int, int]]] = {}
    for row, col, card in plan.categorical:
        by_row_cat.setdefault(row, []).append((col, card))
    by_row_cont: Dict[int, List[int]] = {}
    for row, col in plan.continuous:
        by_row_cont.setdefault(row, []).append(col)
    base = plan.instantiate_base()
    source_rows: List[int] = []
    weights: List[Tensor] = []
    x_branches: List[Tensor] = []
    one = torch.ones((), dtype=DTYPE)
    for i in range(n_rows):
        cats = by_row_cat.get(i, [])
        joint = 1
        for _, card in cats:
            joint *= card
        if joint > plan.cap:
            assignments = [tuple(
                int(torch.multinomial(
                    posteriors.cat_probs[plan.schema.columns[col].name][i].detach(),
                    1, generator=generator))
                for col, _ in cats
            )]
            exact = False
        else:
            assignments = list(itertools.product(*[range(card) for _, card in cats]))
            exact = True
        for assignment in assignments:
            weight = one
            if exact:
                for (col, _), k in zip(cats, assignment):
                    name = plan.schema.columns[col].name
                    weight = weight * posteriors.cat_probs[name][i, k]
            row_vals = base[i]
            pieces = [row_vals]
            idx_cols, idx_vals = [], []
            for (col, _), k in zip(cats, assignment):
                idx_cols.append(col)
                idx_vals.append(torch.tensor(float(k), dtype=DTYPE))
            for col in by_row_cont.get(i, []):
                slot = posteriors.continuous_slot(col)
                eps = torch.randn((), generator=generator, dtype=DTYPE)
                idx_cols.append(col)
                idx_vals.append(
                    posteriors.cont_mean[i, slot]
                    + torch.sqrt(posteriors.cont_var[i, slot]) * eps
                )
            if idx_cols:
                row_vals = row_vals.index_put(
                    (torch.tensor(idx_cols),), torch.stack(idx_vals)
                )
            source_rows.append(i)
            weights.append(weight)
            x_branches.append(row_vals)
    return source_rows, weights, torch.stack(x_branches)


def cvae_reconstruction(y_values, y_mask, encoder_out: EncoderOutput, decoder,
                        posteriors: CovariatePosterior, plan: MissingExpectationPlan,
                        schema: CovariateSchema, mc_samples: int, generator,
                        scale: float = 1.0) -> Tensor:
    """Expected reconstruction for covariate-conditioned decoders, with the
    expectation over missing covariates taken per row (exact categorical
    enumeration within the cap, sampling beyond it)."""
    y_values = as_tensor(y_values) if not isinstance(y_values, torch.Tensor) else y_values
    mask = torch.as_tensor(y_mask).bool()
    mask_f = mask.to(DTYPE)
    y_filled = torch.where(mask, y_values, torch.zeros_like(y_values))
    source_rows, weights, x_branches = _cvae_branches(plan, posteriors, generator)
    idx = torch.tensor(source_rows, dtype=torch.long)
    weight_t = torch.stack(weights)
    full_mask = torch.ones_like(x_branches, dtype=torch.bool)
    x_enc = fill_and_mask(x_branches, full_mask, schema)
    total = torch.zeros((), dtype=DTYPE)
    for _ in range(mc_samples):
        eps = torch.randn(encoder_out.mean.shape, generator=generator, dtype=DTYPE)
        z = encoder_out.mean + torch.sqrt(encoder_out.var) * eps
        out = decoder(z[idx], x_enc)
        var = torch.exp(out.logvar)
        ll = -0.5 * (LOG_2PI + out.logvar + (y_filled[idx] - out.mean) ** 2 / var)
        per_branch = (ll * mask_f[idx]).sum(-1)
        total = total + (weight_t * per_branch).sum()
    return scale * total / mc_samples


def elbo_step(state, batch: Batch, generator, mc_samples_z: Optional[int] = None,
              mc_samples_x: Optional[int] = None) -> ElboBreakdown:
    """Assemble the evidence lower bound for one batch under the model family
    held by ``state`` (see models.TrainedModel). With marginalisation disabled
    missing covariates are zero-filled and the covariate KL drops out."""
    schema = state.schema
    mc_z = mc_samples_z if mc_samples_z is not None else state.mc_samples_z
    mc_x = mc_samples_x if mc_samples_x is not None else state.mc_samples_x
    marginalise = getattr(state, "marginalise", True)
    y_fm = fill_and_mask(batch.y_values, batch.y_mask)
    x_fm = fill_and_mask(batch.x_values, batch.x_mask, schema)
    enc = state.encoder(y_fm, x_fm)
    post = state.cov_net(x_fm, batch.x_mask, y_fm if state.cov_net.condition_on_y else None)
    plan = MissingExpectationPlan.from_batch(
        batch.x_values, batch.x_mask, schema,
        cap=state.enumeration_cap, mc_samples=mc_x,
    )
    if marginalise:
        cov_kl = covariate_kl_term(post, state.prior, schema, scale=batch.scale)
    else:
        cov_kl = torch.zeros((), dtype=DTYPE)
    family = state.family
    if family == "cvae":
        latent = batch.scale * standard_normal_kl(enc)
        if marginalise:
            recon = cvae_reconstruction(
                batch.y_values, batch.y_mask, enc, state.decoder, post, plan, schema,
                mc_z, generator, scale=batch.scale,
            )
        else:
            recon = expected_reconstruction(
                batch.y_values, batch.y_mask, enc,
                lambda z: state.decoder(z, x_fm), mc_z, generator, scale=batch.scale,
            )
    else:
        recon = expected_reconstruction(
            batch.y_values, batch.y_mask, enc, state.decoder,
            mc_z, generator, scale=batch.scale,
        )
        if family == "longitudinal_gp":
            if batch.index is None or batch.p_total is None:
                raise ConfigError("longitudinal batches must carry an instance index")

            def term_fn(x_full):
                return kl_longitudinal_bound(
                    enc, state.inducing, state.kernel, batch.index, x_full,
                    batch.p_total, batch.n_total,
                )
        elif getattr(state, "use_exact_gp_kl", False):
            if batch.n_rows != batch.n_total:
                raise ConfigError("exact latent KL requires full-batch steps")

            def term_fn(x_full):
                return kl_gp_exact(enc, state.kernel, x_full)
        else:

            def term_fn(x_full):
                return kl_gp_bound_minibatch(
                    enc, state.inducing, state.kernel, x_full, batch.n_total
                )

        if not marginalise:
            latent = term_fn(plan.instantiate_base())
        else:
            try:
                latent = expect_over_missing_covariates(term_fn, post, plan, generator)
            except EnumerationOverflow:
                assignment = plan.sample_assignment(post, generator)
                latent = term_fn(plan.instantiate(assignment, post, generator))
    return ElboBreakdown(reconstruction=recon, latent_kl=latent, covariate_kl=cov_kl)
