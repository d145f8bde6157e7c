"""Model assembly for the four families, the training loop with early
stopping, prediction for unseen covariates, and covariate imputation.

A TrainedModel owns networks, kernel hyperparameters, the covariate prior,
and (for GP families) the inducing state; it serialises to a single
deterministic JSON archive and reloads to bit-identical evaluation. A training
run owns its model state exclusively; evaluation against a trained model is
read-only and safe to run concurrently.
"""

from __future__ import annotations

import base64
import json
import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import elbo as elbo_mod
from .data import Dataset, MaskedTable, CovariateTable
from .diffmath import DTYPE, Tensor, as_tensor, cho_solve
from .distributions import (
    LOG_2PI,
    CovariatePrior,
    CovariateSchema,
    fit_covariate_prior,
)
from .elbo import Batch, ElboBreakdown, InducingState, MissingExpectationPlan, elbo_step
from .errors import (
    ConfigError,
    DimensionMismatch,
    MissingGroundTruth,
    NonFiniteLoss,
    SchemaMismatch,
)
from .kernels import KernelComponent, KernelSpec, LongitudinalIndex, gram_bundle
from .networks import CovariateNet, Decoder, Encoder, fill_and_mask
from .rng import np_generator, torch_generator

FAMILIES = ("cvae", "regression_gp", "temporal_gp", "longitudinal_gp")

FORMAT_TAG = "margvae-model-v1"


@dataclass
class ModelConfig:
    """Model family plus architecture and marginalisation settings."""

    family: str = "cvae"
    latent_dim: int = 8
    hidden: Tuple[int, ...] = (128, 64)
    activation: str = "relu"
    condition_x_posterior_on_y: bool = False
    marginalise_missing_covariates: bool = True
    kernel: Optional[dict] = None  # component descriptors, see KernelSpec
    inducing_count: int = 16
    train_inducing_inputs: bool = True
    enumeration_cap: int = elbo_mod.DEFAULT_ENUMERATION_CAP
    mc_samples_z: int = 1
    mc_samples_x: int = 1
    eval_mc_samples: int = 50
    use_exact_gp_kl: bool = False

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown model family {self.family!r}")
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1")
        self.hidden = tuple(self.hidden)

    def validate_against(self, schema: CovariateSchema):
        if self.family == "longitudinal_gp" and schema.instance_index is None:
            raise ConfigError("longitudinal family requires an instance-id column")
        if self.family == "temporal_gp" and schema.time_index is None:
            raise ConfigError("temporal family requires a time column")

    def to_config(self) -> dict:
        return {
            "family": self.family,
            "latent_dim": self.latent_dim,
            "hidden": list(self.hidden),
            "activation": self.activation,
            "condition_x_posterior_on_y": self.condition_x_posterior_on_y,
            "marginalise_missing_covariates": self.marginalise_missing_covariates,
            "kernel": self.kernel,
            "inducing_count": self.inducing_count,
            "train_inducing_inputs": self.train_inducing_inputs,
            "enumeration_cap": self.enumeration_cap,
            "mc_samples_z": self.mc_samples_z,
            "mc_samples_x": self.mc_samples_x,
            "eval_mc_samples": self.eval_mc_samples,
            "use_exact_gp_kl": self.use_exact_gp_kl,
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(cfg) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        kwargs = dict(cfg)
        if "hidden" in kwargs:
            kwargs["hidden"] = tuple(kwargs["hidden"])
        return cls(**kwargs)


@dataclass
class TrainConfig:
    """Optimiser and schedule settings."""

    step_size: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    batch_rows: int = 64
    batch_instances: int = 8
    max_epochs: int = 500
    patience: int = 10
    seed: int = 0
    validation_mc_samples: int = 50

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.max_epochs < 0:
            raise ConfigError("max_epochs must be >= 0")

    def to_config(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}

    @classmethod
    def from_config(cls, cfg: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(cfg) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**cfg)


def default_kernel_config(family: str, schema: CovariateSchema) -> dict:
    """Family defaults: one product component over all modelled covariates for
    the regression and temporal variants; a shared time component plus an
    instance-by-time interaction for the longitudinal variant."""
    if family == "longitudinal_gp":
        time_col = schema.time_index
        inst_col = schema.instance_index
        if time_col is None or inst_col is None:
            raise ConfigError("longitudinal default kernel needs time and instance columns")
        time_name = schema.columns[time_col].name
        inst_name = schema.columns[inst_col].name
        return {
            "components": [
                {"continuous": [time_name], "categorical": []},
                {"continuous": [time_name], "categorical": [inst_name]},
            ],
            "instance_component": 1,
        }
    cont = [schema.columns[i].name for i in schema.continuous_model_columns()]
    cat = [schema.columns[i].name for i in schema.categorical_model_columns()]
    if not cont and not cat:
        raise ConfigError("no covariate columns available for a kernel")
    return {"components": [{"continuous": cont, "categorical": cat}], "instance_component": None}


class TrainedModel:
    """Live model state: networks, kernel, prior, inducing state, history."""

    def __init__(self, config: ModelConfig, schema: CovariateSchema, y_dim: int,
                 prior: CovariatePrior, seed: int):
        config.validate_against(schema)
        self.config = config
        self.schema = schema
        self.y_dim = y_dim
        self.prior = prior
        self.seed = seed
        self.history: List[dict] = []
        x_width = schema.encoded_width()
        y_width = 2 * y_dim
        gen = torch_generator(seed, "init")
        self.encoder = Encoder(y_width, x_width, config.latent_dim, config.hidden,
                               config.activation, gen)
        self.cov_net = CovariateNet(
            schema, config.hidden, config.activation, gen,
            y_width=y_width if config.condition_x_posterior_on_y else None,
        )
        self.decoder = Decoder(
            config.latent_dim, y_dim, config.hidden, config.activation, gen,
            x_width=x_width if config.family == "cvae" else None,
        )
        if config.family == "cvae":
            self.kernel = None
            self.inducing = None
        else:
            kcfg = dict(config.kernel) if config.kernel else default_kernel_config(config.family, schema)
            kcfg.setdefault("latent_dims", config.latent_dim)
            kcfg["latent_dims"] = config.latent_dim
            self.kernel = KernelSpec.from_config(schema, kcfg)
            if config.family == "longitudinal_gp" and self.kernel.instance_component is None:
                raise ConfigError("longitudinal kernels must designate an instance component")
            self.inducing = None  # created from data by initialise()

    # Attributes consumed by elbo_step
    @property
    def family(self) -> str:
        return self.config.family

    @property
    def enumeration_cap(self) -> int:
        return self.config.enumeration_cap

    @property
    def mc_samples_z(self) -> int:
        return self.config.mc_samples_z

    @property
    def mc_samples_x(self) -> int:
        return self.config.mc_samples_x

    @property
    def use_exact_gp_kl(self) -> bool:
        return self.config.use_exact_gp_kl

    @property
    def marginalise(self) -> bool:
        return self.config.marginalise_missing_covariates

    def init_inducing_from(self, train_set: Dataset):
        if self.family in ("cvae",):
            return
        m = min(self.config.inducing_count, train_set.n_rows)
        rng = np_generator(self.seed, "inducing")
        rows = rng.choice(train_set.n_rows, size=m, replace=False)
        values = train_set.x.values[rows].copy()
        mask = train_set.x.mask[rows]
        for q, col in enumerate(self.schema.columns):
            missing = ~mask[:, q]
            if not missing.any():
                continue
            if col.kind == "continuous":
                values[missing, q] = self.prior.means.get(col.name, 0.0)
            else:
                probs = self.prior.probabilities.get(col.name)
                values[missing, q] = int(np.argmax(probs)) if probs is not None else 0
        self.inducing = InducingState(self.schema, values, self.config.latent_dim,
                                      train_inputs=self.config.train_inducing_inputs)

    def parameters(self) -> Dict[str, Tensor]:
        out = {}
        out.update(self.encoder.parameters("encoder"))
        out.update(self.cov_net.parameters("covnet"))
        out.update(self.decoder.parameters("decoder"))
        if self.kernel is not None:
            out.update(self.kernel.named_parameters("kernel"))
        if self.inducing is not None:
            out.update(self.inducing.named_parameters("inducing"))
        return out

    def trainable_parameters(self) -> Dict[str, Tensor]:
        params = self.parameters()
        if not self.marginalise:
            # The covariate posterior is unused without marginalisation.
            params = {k: v for k, v in params.items() if not k.startswith("covnet.")}
        return params

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {k: v.detach().numpy().copy() for k, v in self.parameters().items()}

    def restore(self, snapshot: Dict[str, np.ndarray]):
        params = self.parameters()
        for name, arr in snapshot.items():
            with torch.no_grad():
                params[name].copy_(torch.from_numpy(np.asarray(arr)))

    # Serialisation -------------------------------------------------------

    def save(self, path: str):
        arrays = {name: t.detach().numpy() for name, t in self.parameters().items()}
        if self.inducing is not None:
            arrays["inducing.s_cat"] = self.inducing.s_cat.detach().numpy()
            if "inducing.s_cont" not in arrays:
                arrays["inducing.s_cont"] = self.inducing.s_cont.detach().numpy()
        doc = {
            "format": FORMAT_TAG,
            "config": self.config.to_config(),
            "schema": self.schema.to_config(),
            "y_dim": self.y_dim,
            "seed": self.seed,
            "prior": self.prior.to_config(),
            "has_inducing": self.inducing is not None,
            "parameters": {name: _encode_array(a) for name, a in sorted(arrays.items())},
            "history": [
                {k: v for k, v in record.items() if k != "wall_time"}
                for record in self.history
            ],
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
            fh.write("\n")

    @classmethod
    def load(cls, path: str) -> "TrainedModel":
        with open(path) as fh:
            doc = json.load(fh)
        if doc.get("format") != FORMAT_TAG:
            raise ConfigError(f"unsupported model archive format {doc.get('format')!r}")
        config = ModelConfig.from_config(doc["config"])
        schema = CovariateSchema.from_config(doc["schema"])
        prior = CovariatePrior.from_config(doc["prior"])
        model = cls(config, schema, int(doc["y_dim"]), prior, int(doc["seed"]))
        arrays = {name: _decode_array(rec) for name, rec in doc["parameters"].items()}
        if doc.get("has_inducing"):
            s_cont = arrays.get("inducing.s_cont")
            s_cat = arrays.get("inducing.s_cat")
            cont_cols = [i for i, c in enumerate(schema.columns) if c.kind == "continuous"]
            cat_cols = [i for i, c in enumerate(schema.columns) if c.kind == "categorical"]
            m = s_cont.shape[0] if s_cont is not None else s_cat.shape[0]
            values = np.zeros((m, len(schema.columns)))
            if s_cont is not None:
                values[:, cont_cols] = s_cont
            if s_cat is not None:
                values[:, cat_cols] = s_cat
            model.inducing = InducingState(schema, values, config.latent_dim,
                                           train_inputs=config.train_inducing_inputs)
        params = model.parameters()
        for name, arr in arrays.items():
            if name in ("inducing.s_cat",):
                continue
            if name not in params:
                if name == "inducing.s_cont":
                    continue
                raise ConfigError(f"archive parameter {name!r} not present in the model")
            with torch.no_grad():
                params[name].copy_(torch.from_numpy(arr.reshape(params[name].shape)))
        model.history = list(doc.get("history", []))
        return model


def _encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype=np.float64)
    return {
        "shape": list(a.shape),
        "data": base64.b64encode(a.tobytes()).decode("ascii"),
    }


def _decode_array(rec: dict) -> np.ndarray:
    raw = base64.b64decode(rec["data"])
    return np.frombuffer(raw, dtype=np.float64).reshape(rec["shape"]).copy()


# Batching ----------------------------------------------------------------


def _dataset_tensors(dataset: Dataset):
    y = torch.as_tensor(dataset.y.values, dtype=DTYPE)
    ym = torch.as_tensor(dataset.y.mask)
    x = torch.as_tensor(dataset.x.values, dtype=DTYPE)
    xm = torch.as_tensor(dataset.x.mask)
    return y, ym, x, xm


def make_batches(dataset: Dataset, family: str, train_config: TrainConfig,
                 generator: torch.Generator, kernel: Optional[KernelSpec] = None) -> List[Batch]:
    """Shuffled batches: rows for non-longitudinal families, whole instances
    otherwise (short final batches keep corrected scale factors)."""
    y, ym, x, xm = _dataset_tensors(dataset)
    n = dataset.n_rows
    if family != "longitudinal_gp":
        size = min(train_config.batch_rows, n)
        perm = torch.randperm(n, generator=generator).numpy()
        batches = []
        for start in range(0, n, size):
            rows = np.sort(perm[start:start + size])
            batches.append(Batch(
                y_values=y[rows], y_mask=ym[rows], x_values=x[rows], x_mask=xm[rows],
                n_total=n, scale=n / len(rows),
            ))
        return batches
    if dataset.index is None:
        raise ConfigError("longitudinal training requires an instance index")
    p = dataset.index.n_instances
    size = min(train_config.batch_instances, p)
    perm = torch.randperm(p, generator=generator).numpy()
    inst_component = kernel.instance_component if kernel is not None else dataset.index.instance_component
    batches = []
    for start in range(0, p, size):
        chosen = perm[start:start + size]
        rows = np.concatenate([np.arange(*dataset.index.ranges[k]) for k in chosen])
        ids = dataset.index.instance_ids[rows]
        batches.append(Batch(
            y_values=y[rows], y_mask=ym[rows], x_values=x[rows], x_mask=xm[rows],
            n_total=n, scale=p / len(chosen),
            index=LongitudinalIndex(ids, inst_component), p_total=p,
        ))
    return batches


def full_batch(dataset: Dataset, family: str, kernel: Optional[KernelSpec] = None) -> Batch:
    y, ym, x, xm = _dataset_tensors(dataset)
    index = None
    p_total = None
    if family == "longitudinal_gp":
        if dataset.index is None:
            raise ConfigError("longitudinal data requires an instance index")
        inst_component = kernel.instance_component if kernel is not None else dataset.index.instance_component
        index = LongitudinalIndex(dataset.index.instance_ids, inst_component)
        p_total = dataset.index.n_instances
    return Batch(y_values=y, y_mask=ym, x_values=x, x_mask=xm,
                 n_total=dataset.n_rows, scale=1.0, index=index, p_total=p_total)


def dataset_elbo(model: TrainedModel, dataset: Dataset, mc_samples_z: int,
                 generator: torch.Generator) -> ElboBreakdown:
    """Full-batch objective with a chosen latent draw count (no gradients)."""
    batch = full_batch(dataset, model.family, model.kernel)
    with torch.no_grad():
        return elbo_step(model, batch, generator, mc_samples_z=mc_samples_z)


def train(model_config: ModelConfig, train_set: Dataset, validation_set: Dataset,
          train_config: TrainConfig, initial_model: Optional[TrainedModel] = None) -> TrainedModel:
    """Stochastic gradient ascent on the evidence lower bound with
    early stopping on the validation bound; returns the best-epoch state.
    Passing ``initial_model`` resumes from its parameters and extends its
    history monotonically in the step index."""
    if train_set.schema != validation_set.schema:
        raise SchemaMismatch("training and validation schemas differ")
    seed = train_config.seed
    if initial_model is not None:
        model = initial_model
        if model.schema != train_set.schema:
            raise SchemaMismatch("resumed model schema does not match the training data")
        history = list(model.history)
        step = 1 + max((r["step"] for r in history if r.get("kind") == "step"), default=-1)
    else:
        prior = fit_covariate_prior(train_set.x, train_set.schema)
        model = TrainedModel(model_config, train_set.schema, train_set.y.n_cols, prior, seed)
        model.init_inducing_from(train_set)
        history = []
        step = 0
    trainable = [p for p in model.trainable_parameters().values() if p.requires_grad]
    optimiser = torch.optim.Adam(trainable, lr=train_config.step_size,
                                 betas=(train_config.beta1, train_config.beta2))
    train_gen = torch_generator(seed, "training")
    best_value = -math.inf
    best_snapshot = model.snapshot()
    epochs_since_best = 0
    for epoch in range(train_config.max_epochs):
        batches = make_batches(train_set, model.family, train_config, train_gen, model.kernel)
        for batch in batches:
            start_time = time.perf_counter()
            optimiser.zero_grad(set_to_none=True)
            breakdown = elbo_step(model, batch, train_gen)
            total = breakdown.total
            if not torch.isfinite(total):
                model.history = history
                error = NonFiniteLoss(step)
                error.history = history
                raise error
            (-total).backward()
            optimiser.step()
            recon, latent, cov, tot = breakdown.detach_floats()
            history.append({
                "kind": "step", "step": step, "epoch": epoch,
                "reconstruction": recon, "latent_kl": latent,
                "covariate_kl": cov, "total": tot,
                "wall_time": time.perf_counter() - start_time,
            })
            step += 1
        val_gen = torch_generator(seed, "validation")
        val = dataset_elbo(model, validation_set, train_config.validation_mc_samples, val_gen)
        val_total = float(val.total)
        history.append({"kind": "validation", "epoch": epoch, "total": val_total})
        if val_total > best_value:
            best_value = val_total
            best_snapshot = model.snapshot()
            epochs_since_best = 0
        else:
            epochs_since_best += 1
        if epochs_since_best >= train_config.patience:
            break
    model.restore(best_snapshot)
    model.history = history
    if math.isfinite(best_value):
        model.history.append({"kind": "best", "total": best_value})
    return model


# Prediction and evaluation ------------------------------------------------


def _covariate_posterior(model: TrainedModel, x_values, x_mask, y_values=None, y_mask=None):
    schema = model.schema
    x_fm = fill_and_mask(x_values, x_mask, schema)
    y_fm = None
    if model.cov_net.condition_on_y:
        if y_values is None:
            y_values = torch.zeros((x_values.shape[0], model.y_dim), dtype=DTYPE)
            y_mask = torch.zeros((x_values.shape[0], model.y_dim), dtype=torch.bool)
        y_fm = fill_and_mask(y_values, y_mask)
    return model.cov_net(x_fm, x_mask, y_fm)


def _sample_covariates(model: TrainedModel, posterior, plan: MissingExpectationPlan,
                       generator) -> Tensor:
    """One fully instantiated covariate block: categorical entries sampled
    from the posterior, continuous entries reparameterisation draws. Without
    marginalisation missing entries stay zero-filled."""
    if not model.marginalise:
        return plan.instantiate_base()
    assignment = plan.sample_assignment(posterior, generator)
    return plan.instantiate(assignment, posterior, generator)


def _latent_predictive(model: TrainedModel, x_full: Tensor) -> Tuple[Tensor, Tensor]:
    """Per-row latent mean and variance at new covariates.

    GP families use the inducing posterior; the predictive variance adds the
    per-dimension noise term (and, for the longitudinal family, the prior
    variance of the instance-specific component)."""
    n = x_full.shape[0]
    L = model.config.latent_dim
    if model.family == "cvae" or model.inducing is None:
        return torch.zeros((n, L), dtype=DTYPE), torch.ones((n, L), dtype=DTYPE)
    spec = model.kernel
    s = model.inducing.s_matrix()
    components = None
    if model.family == "longitudinal_gp":
        components = spec.shared_component_indices()
    means, variances = [], []
    for l in range(L):
        bundle = gram_bundle(spec, l, x_full, s, components=components)
        m = model.inducing.m[l]
        h_factor = model.inducing.h_factor(l)
        alpha = cho_solve(bundle.chol_ss, m)
        mean_l = bundle.k_xs @ alpha
        solved = cho_solve(bundle.chol_ss, bundle.k_xs.mT)
        trace_rows = ((h_factor.mT @ solved) ** 2).sum(0)
        var_l = bundle.nystrom_diag + trace_rows + spec.noise_variance(l)
        if model.family == "longitudinal_gp":
            inst = spec.instance_component
            var_l = var_l + torch.exp(spec.log_variances[l][inst])
        means.append(mean_l)
        variances.append(torch.clamp(var_l, min=1e-12))
    return torch.stack(means, dim=1), torch.stack(variances, dim=1)


@dataclass
class Prediction:
    """Predictive moments and (when targets are given) the per-row NLL."""

    mean: np.ndarray
    variance: np.ndarray
    nll_per_row: Optional[np.ndarray]
    nll: Optional[float]
    metadata: dict = field(default_factory=dict)


def predict_y(model: TrainedModel, x_star: CovariateTable, y_star: Optional[MaskedTable] = None,
              draws: Optional[int] = None, seed: int = 0) -> Prediction:
    """Predict observations from (partially observed) covariates.

    Missing covariates are marginalised by sampling the covariate posterior
    inside a mixture over latent draws; the NLL per row is the negative
    log-mean-exp of the per-draw likelihoods over observed target entries."""
    if x_star.n_cols != len(model.schema):
        raise SchemaMismatch("covariate table width does not match the model schema")
    draws = draws or model.config.eval_mc_samples
    generator = torch_generator(seed, "predict")
    x_values = torch.as_tensor(x_star.values, dtype=DTYPE)
    x_mask = torch.as_tensor(x_star.mask)
    n = x_star.n_rows
    y_values = y_mask = None
    if y_star is not None:
        y_values = torch.as_tensor(y_star.values, dtype=DTYPE)
        y_mask = torch.as_tensor(y_star.mask)
    with torch.no_grad():
        posterior = _covariate_posterior(model, x_values, x_mask, y_values, y_mask)
        plan = MissingExpectationPlan.from_batch(x_values, x_mask, model.schema,
                                                 cap=model.enumeration_cap, mc_samples=1)
        log_probs = torch.empty((draws, n), dtype=DTYPE)
        mean_acc = torch.zeros((n, model.y_dim), dtype=DTYPE)
        second_acc = torch.zeros((n, model.y_dim), dtype=DTYPE)
        for s_idx in range(draws):
            x_full = _sample_covariates(model, posterior, plan, generator)
            z_mean, z_var = _latent_predictive(model, x_full)
            eps = torch.randn((n, model.config.latent_dim), generator=generator, dtype=DTYPE)
            z = z_mean + torch.sqrt(z_var) * eps
            if model.family == "cvae":
                # marginalised draws are fully instantiated; the zero-fill
                # model keeps its training-time missingness channel
                enc_mask = (torch.ones_like(x_full, dtype=torch.bool)
                            if model.marginalise else x_mask)
                x_enc = fill_and_mask(x_full, enc_mask, model.schema)
                out = model.decoder(z, x_enc)
            else:
                out = model.decoder(z)
            var = torch.exp(out.logvar)
            mean_acc += out.mean
            second_acc += out.mean ** 2 + var
            if y_star is not None:
                ll = -0.5 * (LOG_2PI + out.logvar + (torch.where(y_mask, y_values, torch.zeros_like(y_values)) - out.mean) ** 2 / var)
                log_probs[s_idx] = (ll * y_mask.to(DTYPE)).sum(-1)
        pred_mean = mean_acc / draws
        pred_var = torch.clamp(second_acc / draws - pred_mean ** 2, min=0.0)
        nll_rows = None
        nll = None
        if y_star is not None:
            log_mix = torch.logsumexp(log_probs, dim=0) - math.log(draws)
            nll_rows = (-log_mix).numpy()
            nll = float(np.mean(nll_rows))
    return Prediction(
        mean=pred_mean.numpy(), variance=pred_var.numpy(),
        nll_per_row=nll_rows, nll=nll,
        metadata={
            "draws": draws,
            "nll_convention": "mean over rows of -log mean_s p(y_obs | draw s)",
            "covariate_marginalisation": "posterior sampling" if model.marginalise else "zero-fill",
            "posterior_conditions_on_y": model.cov_net.condition_on_y,
        },
    )


def impute_covariates(model: TrainedModel, x_partial: CovariateTable,
                      y_partial: Optional[MaskedTable] = None):
    """Fill missing covariates with posterior means (continuous) or argmax
    categories (ties to the lowest id); returns the filled table plus the full
    per-entry posterior distributions."""
    if x_partial.n_cols != len(model.schema):
        raise SchemaMismatch("covariate table width does not match the model schema")
    x_values = torch.as_tensor(x_partial.values, dtype=DTYPE)
    x_mask = torch.as_tensor(x_partial.mask)
    y_values = y_mask = None
    if y_partial is not None:
        y_values = torch.as_tensor(y_partial.values, dtype=DTYPE)
        y_mask = torch.as_tensor(y_partial.mask)
    with torch.no_grad():
        posterior = _covariate_posterior(model, x_values, x_mask, y_values, y_mask)
        filled = x_partial.copy()
        schema = model.schema
        cont_cols = schema.continuous_model_columns()
        for slot, q in enumerate(cont_cols):
            missing = ~x_partial.mask[:, q]
            if missing.any():
                filled.values[missing, q] = posterior.cont_mean[:, slot].numpy()[missing]
                filled.mask[missing, q] = True
        for q in schema.categorical_model_columns():
            name = schema.columns[q].name
            missing = ~x_partial.mask[:, q]
            if missing.any():
                probs = posterior.cat_probs[name].numpy()
                filled.values[missing, q] = np.argmax(probs[missing], axis=1)
                filled.mask[missing, q] = True
        distributions = {
            "continuous_mean": posterior.cont_mean.numpy(),
            "continuous_variance": posterior.cont_var.numpy(),
            "categorical_probabilities": {
                name: p.numpy() for name, p in posterior.cat_probs.items()
            },
        }
    return filled, distributions


def imputation_metrics(filled_values: np.ndarray, truth: CovariateTable,
                       schema: CovariateSchema) -> Dict[str, Optional[float]]:
    """MSE over artificially masked continuous entries and accuracy over
    artificially masked categorical entries."""
    cont = schema.continuous_model_columns()
    cat = schema.categorical_model_columns()
    mse = None
    accuracy = None
    if cont:
        mask = truth.mask[:, cont]
        if mask.any():
            diff = filled_values[:, cont] - truth.values[:, cont]
            mse = float((diff[mask] ** 2).mean())
    if cat:
        mask = truth.mask[:, cat]
        if mask.any():
            match = filled_values[:, cat] == truth.values[:, cat]
            accuracy = float(match[mask].mean())
    return {"covariate_mse": mse, "covariate_accuracy": accuracy}


def evaluate(model: TrainedModel, test_set: Dataset,
             metrics: Sequence[str] = ("nll", "covariate_mse", "covariate_accuracy"),
             draws: Optional[int] = None, seed: int = 0) -> dict:
    """Metric record over a test set: predictive NLL for observed targets,
    plus imputation MSE/accuracy against retained truth."""
    record: dict = {"metadata": {}}
    if "nll" in metrics:
        prediction = predict_y(model, test_set.x, test_set.y, draws=draws, seed=seed)
        record["nll"] = prediction.nll
        record["metadata"]["nll"] = prediction.metadata
    wants_mse = "covariate_mse" in metrics
    wants_acc = "covariate_accuracy" in metrics
    if wants_mse or wants_acc:
        if test_set.x_truth is None or not test_set.x_truth.mask.any():
            raise MissingGroundTruth("no held-out covariate truth in the test set")
        filled, _ = impute_covariates(model, test_set.x, test_set.y)
        imp = imputation_metrics(filled.values, test_set.x_truth, model.schema)
        if wants_mse:
            record["covariate_mse"] = imp["covariate_mse"]
        if wants_acc:
            record["covariate_accuracy"] = imp["covariate_accuracy"]
        record["metadata"]["imputation"] = {
            "continuous": "posterior mean",
            "categorical": "argmax, ties to lowest id",
            "posterior_conditions_on_y": model.cov_net.condition_on_y,
        }
    return record
