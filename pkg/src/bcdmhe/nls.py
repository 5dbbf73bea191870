"""Weighted nonlinear least squares by Levenberg-Marquardt over residual blocks.

The cost is ``sum_b r_b(v)^T W_b r_b(v)``. Each block sees only the entries of
the decision vector listed in its index set. A weight may be a dense ``(d, d)``
matrix or a stack ``(nb, b, b)`` meaning a block-diagonal matrix; the stacked
form lets a whole window of bearings live in one block.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, NumericalFailure, SolverFailure

log = logging.getLogger(__name__)

MAX_DAMPING = 1e12


def _sqrt_info(weight: np.ndarray) -> np.ndarray:
    """Upper factor ``U`` with ``W = U^T U`` (dense or stacked)."""
    w = np.asarray(weight, dtype=float)
    if w.ndim not in (2, 3) or w.shape[-1] != w.shape[-2]:
        raise ConfigError(f"weight must be square or a stack of squares, got shape {w.shape}")
    scale = max(1.0, float(np.abs(w).max(initial=0.0)))
    if np.abs(w - np.swapaxes(w, -1, -2)).max(initial=0.0) > 1e-10 * scale:
        raise ConfigError("weight matrix is not symmetric")
    try:
        lower = np.linalg.cholesky(w)
    except np.linalg.LinAlgError as exc:
        raise ConfigError("weight matrix is not positive definite") from exc
    return np.swapaxes(lower, -1, -2)


@dataclass(slots=True)
class ResidualBlock:
    """One ``||r(v[indices])||^2_W`` term with an analytic Jacobian.

    ``residual`` and ``jacobian`` receive the sub-vector ``v[indices]``; the
    Jacobian is ``(d, len(indices))``.
    """

    residual: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray]
    indices: np.ndarray
    weight: np.ndarray
    name: str = ""
    sqrt_weight: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.indices = np.asarray(self.indices, dtype=np.intp)
        self.weight = np.asarray(self.weight, dtype=float)
        self.sqrt_weight = _sqrt_info(self.weight)

    @property
    def dim(self) -> int:
        w = self.weight
        return w.shape[0] if w.ndim == 2 else w.shape[0] * w.shape[1]

    def whiten(self, a: np.ndarray) -> np.ndarray:
        """Apply ``U`` to a residual (1-D) or Jacobian (2-D) of this block."""
        u = self.sqrt_weight
        if u.ndim == 2:
            return u @ a
        nb, b, _ = u.shape
        if a.ndim == 1:
            return np.einsum("kij,kj->ki", u, a.reshape(nb, b)).reshape(-1)
        return np.einsum("kij,kjc->kic", u, a.reshape(nb, b, -1)).reshape(nb * b, -1)

    def cost(self, v: np.ndarray) -> float:
        e = self.whiten(self.residual(v[self.indices]))
        return float(e @ e)


@dataclass(slots=True)
class NlsProblem:
    dim: int
    blocks: list[ResidualBlock]
    _full: list[bool] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        for b in self.blocks:
            if b.indices.size and (b.indices.min() < 0 or b.indices.max() >= self.dim):
                raise ConfigError(f"block {b.name!r} indexes outside a {self.dim}-dim decision vector")
        full = np.arange(self.dim)
        self._full = [b.indices.size == self.dim and bool(np.array_equal(b.indices, full)) for b in self.blocks]

    def whitened_residuals(self, v: np.ndarray) -> list[np.ndarray]:
        return [b.whiten(b.residual(v[b.indices])) for b in self.blocks]

    def cost(self, v: np.ndarray) -> float:
        return float(sum(e @ e for e in self.whitened_residuals(v)))

    def linearize(self, v: np.ndarray, residuals: list[np.ndarray] | None = None
                  ) -> tuple[float, np.ndarray, np.ndarray]:
        """Return ``(cost, J^T W J, J^T W r)`` at ``v``."""
        if residuals is None:
            residuals = self.whitened_residuals(v)
        hess = np.zeros((self.dim, self.dim))
        grad = np.zeros(self.dim)
        cost = 0.0
        for b, full, e in zip(self.blocks, self._full, residuals):
            a = b.whiten(b.jacobian(v[b.indices]))
            cost += float(e @ e)
            if full:
                hess += a.T @ a
                grad += a.T @ e
            else:
                ix = b.indices
                hess[np.ix_(ix, ix)] += a.T @ a
                grad[ix] += a.T @ e
        return cost, hess, grad


@dataclass(slots=True)
class SolverConfig:
    max_iterations: int = 25
    gradient_tolerance: float = 1e-9
    step_tolerance: float = 1e-9
    initial_damping: float = 1e-4
    damping_up: float = 10.0
    damping_down: float = 0.3

    def __post_init__(self) -> None:
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")
        if self.initial_damping < 0:
            raise ConfigError("initial_damping must be >= 0")
        if self.damping_up <= 1.0 or not 0.0 < self.damping_down < 1.0:
            raise ConfigError("damping factors must satisfy up > 1 and 0 < down < 1")


@dataclass(slots=True)
class SolveReport:
    solution: np.ndarray
    cost: float
    iterations: int
    converged: bool
    gradient_norm: float
    initial_cost: float = float("nan")
    accepted_costs: list[float] = field(default_factory=list)


def solve(problem: NlsProblem, initial: np.ndarray, config: SolverConfig | None = None) -> SolveReport:
    """Minimize the problem cost from ``initial`` with damped Gauss-Newton steps.

    A step is accepted only when it lowers the cost, so accepted costs are
    nonincreasing. Iterations stop at ``max_iterations`` (every attempted step
    counts), when the gradient infinity-norm drops below tolerance, or after an
    accepted step shorter than ``step_tolerance`` relative to the iterate.
    """
    config = config or SolverConfig()
    v = np.array(initial, dtype=float)
    if v.shape != (problem.dim,) or not np.all(np.isfinite(v)):
        raise ConfigError(f"initial point must be a finite vector of length {problem.dim}")

    cost, hess, grad = problem.linearize(v)
    initial_cost = cost
    accepted = [cost]
    lam = config.initial_damping
    iterations = 0
    converged = False
    gnorm = float(np.abs(grad).max(initial=0.0))
    eye = np.eye(problem.dim)
    while True:
        if gnorm < config.gradient_tolerance:
            converged = True
            break
        if iterations >= config.max_iterations:
            break
        iterations += 1
        diag = np.diagonal(hess)
        damping = np.maximum(diag, 1e-12 * max(1.0, float(diag.max(initial=0.0))))
        try:
            step = np.linalg.solve(hess + lam * (eye * damping), -grad)
            ok = bool(np.all(np.isfinite(step)))
        except np.linalg.LinAlgError:
            ok = False
        if ok:
            trial = v + step
            try:
                residuals = problem.whitened_residuals(trial)
                trial_cost = float(sum(e @ e for e in residuals))
            except (ArithmeticError, ValueError):
                trial_cost = np.inf
            if trial_cost < cost:
                small = np.linalg.norm(step) <= config.step_tolerance * (np.linalg.norm(v) + config.step_tolerance)
                v = trial
                cost, hess, grad = problem.linearize(v, residuals)
                gnorm = float(np.abs(grad).max(initial=0.0))
                accepted.append(cost)
                lam *= config.damping_down
                if small:
                    converged = True
                    break
                continue
        lam = max(lam * config.damping_up, 1e-9)
        if lam > MAX_DAMPING:
            if not ok:
                raise SolverFailure("damped normal matrix is singular even at maximum damping")
            # no step lowers the cost any more: numerical minimum reached
            converged = True
            break
    return SolveReport(v, cost, iterations, converged, gnorm, initial_cost, accepted)


def check_jacobians(problem: NlsProblem, at: np.ndarray, step: float = 1e-6, tol: float = 1e-5) -> list[str]:
    """Names (or indices) of blocks whose analytic Jacobian disagrees with central differences."""
    at = np.asarray(at, dtype=float)
    bad = []
    for n, b in enumerate(problem.blocks):
        sub = at[b.indices].copy()
        analytic = np.asarray(b.jacobian(sub), dtype=float)
        numeric = np.empty_like(analytic)
        for c in range(sub.size):
            hi, lo = sub.copy(), sub.copy()
            hi[c] += step
            lo[c] -= step
            numeric[:, c] = (b.residual(hi) - b.residual(lo)) / (2 * step)
        if analytic.shape != numeric.shape or np.abs(analytic - numeric).max(initial=0.0) > tol:
            bad.append(b.name or str(n))
    return bad


__all__ = [
    "ResidualBlock",
    "NlsProblem",
    "SolverConfig",
    "SolveReport",
    "solve",
    "check_jacobians",
    "NumericalFailure",
    "SolverFailure",
]
