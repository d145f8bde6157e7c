"""Differentiable dense linear algebra shared by every downstream module.

All numerical state is 64-bit and lives in torch tensors so that reverse-mode
gradients are available for any composed computation (including Cholesky
factors and triangular solves). This module adds the numerical policies the
rest of the package relies on: jitter escalation before declaring a matrix
indefinite, explicit singularity checks, and a central finite-difference
gradient verifier used by the test and acceptance suites.
"""

from __future__ import annotations

from typing import Callable, Dict

import numpy as np
import torch

from .errors import (
    DimensionMismatch,
    NonFiniteOutput,
    NotPositiveDefinite,
    SingularMatrix,
)

DTYPE = torch.float64

Tensor = torch.Tensor

# Jitter escalation: retry decades up to this ceiling before giving up.
_JITTER_START = 1e-6
_JITTER_CEILING = 1e-2

_SINGULAR_FLOOR = 1e-300


def as_tensor(values, requires_grad: bool = False) -> Tensor:
    """Create (or view) a float64 tensor."""
    if isinstance(values, torch.Tensor):
        t = values.to(DTYPE)
    else:
        t = torch.as_tensor(values, dtype=DTYPE)
    if requires_grad:
        t = t.clone().detach().requires_grad_(True)
    return t


def parameter(values) -> Tensor:
    """Create a trainable float64 leaf tensor."""
    return as_tensor(values, requires_grad=True)


def cholesky_factor(a: Tensor, jitter: float = _JITTER_START) -> Tensor:
    """Lower Cholesky factor of ``a + jitter * I`` with jitter escalation.

    The first attempt uses exactly the caller-supplied jitter (so PD inputs
    factor without perturbation when ``jitter == 0``). On failure the jitter
    escalates by decades up to 1e-2 before NotPositiveDefinite is raised.
    """
    a = as_tensor(a) if not isinstance(a, torch.Tensor) else a
    if a.dim() != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {tuple(a.shape)}")
    if jitter < 0:
        raise ValueError("jitter must be non-negative")
    with torch.no_grad():
        asym = (a - a.mT).abs().max()
        scale = a.abs().max().clamp(min=1.0)
        if asym > 1e-10 * scale:
            raise DimensionMismatch("matrix is not symmetric within tolerance")
    eye = torch.eye(a.shape[0], dtype=a.dtype, device=a.device)
    j = float(jitter)
    while True:
        factor, info = torch.linalg.cholesky_ex(a + j * eye)
        if int(info) == 0:
            return factor
        j = _JITTER_START if j == 0.0 else j * 10.0
        if j > _JITTER_CEILING * (1 + 1e-12):
            raise NotPositiveDefinite(
                f"factorisation failed after jitter escalation to {j / 10.0:g}"
            )


def solve_triangular(l: Tensor, b: Tensor, transpose: bool = False) -> Tensor:
    """Solve ``L x = b`` (or ``L.T x = b`` when ``transpose``) for lower-triangular L."""
    l = as_tensor(l) if not isinstance(l, torch.Tensor) else l
    b = as_tensor(b) if not isinstance(b, torch.Tensor) else b
    if l.dim() != 2 or l.shape[0] != l.shape[1]:
        raise DimensionMismatch(f"expected a square factor, got shape {tuple(l.shape)}")
    with torch.no_grad():
        if (l.diagonal().abs() < _SINGULAR_FLOOR).any():
            raise SingularMatrix("triangular factor has a vanishing diagonal entry")
    squeeze = b.dim() == 1
    if squeeze:
        b = b.unsqueeze(-1)
    if b.shape[0] != l.shape[0]:
        raise DimensionMismatch(
            f"right-hand side has {b.shape[0]} rows, factor has order {l.shape[0]}"
        )
    if transpose:
        x = torch.linalg.solve_triangular(l.mT, b, upper=True)
    else:
        x = torch.linalg.solve_triangular(l, b, upper=False)
    return x.squeeze(-1) if squeeze else x


def cho_solve(l: Tensor, b: Tensor) -> Tensor:
    """Solve ``(L L^T) x = b`` given the lower factor L."""
    return solve_triangular(l, solve_triangular(l, b), transpose=True)


def logdet_from_factor(l: Tensor) -> Tensor:
    """log-determinant of ``L L^T``, i.e. ``2 * sum(log(diag(L)))``."""
    l = as_tensor(l) if not isinstance(l, torch.Tensor) else l
    diag = l.diagonal()
    with torch.no_grad():
        if (diag <= 0).any():
            raise SingularMatrix("factor diagonal must be strictly positive")
    return 2.0 * torch.log(diag).sum()


class DifferentiableGraph:
    """A scalar computation over named parameter tensors.

    ``output_fn`` must be deterministic given the parameter values (callers
    seed any internal randomness), which makes repeated evaluation and
    finite-difference probing well defined.
    """

    def __init__(self, parameters: Dict[str, Tensor], output_fn: Callable[[Dict[str, Tensor]], Tensor]):
        for name, p in parameters.items():
            if not isinstance(p, torch.Tensor):
                raise TypeError(f"parameter {name!r} is not a tensor")
            if not p.requires_grad:
                p.requires_grad_(True)
        self.parameters = dict(parameters)
        self.output_fn = output_fn

    def evaluate(self) -> Tensor:
        out = self.output_fn(self.parameters)
        if not isinstance(out, torch.Tensor) or out.dim() != 0:
            raise DimensionMismatch("graph output must be a scalar tensor")
        return out

    def value(self) -> float:
        with torch.no_grad():
            return float(self.evaluate())

    def gradients(self) -> Dict[str, Tensor]:
        out = self.evaluate()
        if not torch.isfinite(out):
            raise NonFiniteOutput("graph evaluation is not finite")
        if not out.requires_grad:
            return {name: torch.zeros_like(p) for name, p in self.parameters.items()}
        grads = torch.autograd.grad(
            out, list(self.parameters.values()), allow_unused=True
        )
        return {
            name: (g if g is not None else torch.zeros_like(p))
            for (name, p), g in zip(self.parameters.items(), grads)
        }


def gradient_check(graph: DifferentiableGraph, epsilon: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    The relative error for one parameter entry is
    ``|analytic - numeric| / (|analytic| + |numeric| + 1e-12)``; the step for
    entry value v is ``epsilon * (1 + |v|)``.
    """
    if not (1e-7 <= epsilon <= 1e-3):
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    base = graph.evaluate()
    if not torch.isfinite(base):
        raise NonFiniteOutput("graph evaluation is not finite")
    analytic = graph.gradients()
    worst = 0.0
    for name, param in graph.parameters.items():
        grad_flat = analytic[name].reshape(-1)
        shape = tuple(param.shape)
        for idx in range(param.numel()):
            # index tuple keeps writes in place for any memory layout
            pos = tuple(int(k) for k in np.unravel_index(idx, shape)) if shape else ()
            original = param.data[pos].item()
            h = epsilon * (1.0 + abs(original))
            param.data[pos] = original + h
            with torch.no_grad():
                f_plus = float(graph.evaluate())
            param.data[pos] = original - h
            with torch.no_grad():
                f_minus = float(graph.evaluate())
            param.data[pos] = original
            if not (torch.isfinite(torch.tensor(f_plus)) and torch.isfinite(torch.tensor(f_minus))):
                raise NonFiniteOutput(f"finite differences around {name}[{idx}] are not finite")
            numeric = (f_plus - f_minus) / (2.0 * h)
            ana = grad_flat[idx].item()
            err = abs(ana - numeric) / (abs(ana) + abs(numeric) + 1e-12)
            worst = max(worst, err)
    return worst
