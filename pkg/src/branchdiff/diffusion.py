"""Forward diffusion processes.

Continuous variance-preserving SDE on t in [0, T]:

    dx = -0.5 * beta(t) * x dt + sqrt(beta(t)) dW,   beta(t) = beta_min + beta_slope * t

whose marginal given x_0 is Gaussian with

    mean = exp(-0.5 * B(t)) * x_0,   std = sqrt(1 - exp(-B(t))),
    B(t) = integral of beta over [0, t] = beta_min * t + 0.5 * beta_slope * t^2.

Discrete-time chain on integer steps t in {1..steps}:

    x_t = sqrt(1 - beta_t) * x_{t-1} + sqrt(beta_t) * eps,
    beta_t = beta_base + beta_step * t,

with marginal coefficient sqrt(alpha_bar_t), alpha_bar_t = prod_s (1 - beta_s).

Both processes expose the same surface (marginal / transition / time_grid /
draw_times) so discovery, training and sampling are generic over the time
kind.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Union

import numpy as np

from .errors import DataError, DomainError, ShapeError

ArrayLike = Union[float, np.ndarray]


def _check_times(t: np.ndarray, horizon: float) -> None:
    if np.any(t < 0) or np.any(t > horizon):
        raise DomainError(f"time outside [0, {horizon}]: {t[(t < 0) | (t > horizon)][:4]}")


@dataclass(frozen=True)
class VpSde:
    """Variance-preserving SDE with a linear noise-rate schedule."""

    beta_min: float = 0.1
    beta_slope: float = 0.9
    horizon: float = 1.0

    def __post_init__(self) -> None:
        if self.beta_min <= 0 or self.beta_slope < 0 or self.horizon <= 0:
            raise DomainError("VpSde requires beta_min > 0, beta_slope >= 0, horizon > 0")

    @property
    def kind(self) -> str:
        return "sde"

    def beta(self, t: ArrayLike) -> ArrayLike:
        t = np.asarray(t, dtype=np.float64)
        _check_times(t, self.horizon)
        out = self.beta_min + self.beta_slope * t
        return float(out) if out.ndim == 0 else out

    def integrated_beta(self, t: ArrayLike) -> ArrayLike:
        """B(t), the accumulated noise rate over [0, t]."""
        t = np.asarray(t, dtype=np.float64)
        _check_times(t, self.horizon)
        out = self.beta_min * t + 0.5 * self.beta_slope * t * t
        return float(out) if out.ndim == 0 else out

    def marginal(self, t: ArrayLike) -> tuple[ArrayLike, ArrayLike]:
        """(mean_coef, std) of x_t given x_0.

        mean_coef is in (0, 1], std in [0, 1), and mean_coef^2 + std^2 = 1
        (variance preservation).
        """
        big_b = self.integrated_beta(t)
        mean_coef = np.exp(-0.5 * np.asarray(big_b, dtype=np.float64))
        std = np.sqrt(1.0 - np.exp(-np.asarray(big_b, dtype=np.float64)))
        if mean_coef.ndim == 0:
            return float(mean_coef), float(std)
        return mean_coef, std

    def transition(self, t0: ArrayLike, t1: ArrayLike) -> tuple[ArrayLike, ArrayLike]:
        """(coef, std) of x_{t1} given x_{t0}, for t0 <= t1 (exact, not Euler)."""
        t0 = np.asarray(t0, dtype=np.float64)
        t1 = np.asarray(t1, dtype=np.float64)
        if np.any(t1 < t0):
            raise DomainError("transition requires t0 <= t1")
        return _transition_from_marginals(self, t0, t1)

    def time_grid(self, n: int = 1000) -> np.ndarray:
        """n uniform times on (0, horizon]."""
        if n < 1:
            raise DomainError("time_grid needs n >= 1")
        return np.arange(1, n + 1, dtype=np.float64) * (self.horizon / n)

    def draw_times(self, rng: np.random.Generator, size: int, t_floor: float = 1e-4,
                   t_max: float | None = None) -> np.ndarray:
        """Training times, uniform on (t_floor, t_max); t_max defaults to the horizon."""
        upper = self.horizon if t_max is None else float(t_max)
        if not 0 <= t_floor < upper <= self.horizon:
            raise DomainError("need 0 <= t_floor < t_max <= horizon")
        return rng.uniform(t_floor, upper, size)


@dataclass(frozen=True)
class DdpmSchedule:
    """Discrete-time forward chain with a linear per-step noise schedule."""

    beta_base: float = 1e-4
    beta_step: float = 1e-5
    steps: int = 1000

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise DomainError("DdpmSchedule needs steps >= 1")
        last = self.beta_base + self.beta_step * self.steps
        if self.beta_base <= 0 or not last < 1:
            raise DomainError("per-step beta must stay in (0, 1)")

    @property
    def kind(self) -> str:
        return "ddpm"

    @property
    def horizon(self) -> float:
        return float(self.steps)

    @cached_property
    def betas(self) -> np.ndarray:
        """beta_t for t = 1..steps (index t-1)."""
        t = np.arange(1, self.steps + 1, dtype=np.float64)
        return self.beta_base + self.beta_step * t

    @cached_property
    def alpha_bars(self) -> np.ndarray:
        """alpha_bar_t for t = 1..steps, computed by log-sum for stability."""
        return np.exp(np.cumsum(np.log1p(-self.betas)))

    def _indices(self, t: ArrayLike) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        _check_times(t, self.horizon)
        ti = np.rint(t).astype(np.int64)
        if np.any(np.abs(t - ti) > 1e-9):
            raise DomainError("discrete-time t must be integer-valued")
        return ti

    def schedule(self, t: ArrayLike) -> tuple[ArrayLike, ArrayLike, ArrayLike]:
        """(beta_t, alpha_t, alpha_bar_t) for integer t in 1..steps."""
        ti = self._indices(t)
        if np.any(ti < 1):
            raise DomainError("schedule is defined for t >= 1")
        beta = self.betas[ti - 1]
        alpha_bar = self.alpha_bars[ti - 1]
        if beta.ndim == 0:
            return float(beta), float(1.0 - beta), float(alpha_bar)
        return beta, 1.0 - beta, alpha_bar

    def marginal(self, t: ArrayLike) -> tuple[ArrayLike, ArrayLike]:
        """(mean_coef, std) of x_t given x_0; t = 0 gives (1, 0)."""
        ti = self._indices(t)
        ab = np.where(ti > 0, self.alpha_bars[np.maximum(ti, 1) - 1], 1.0)
        mean_coef = np.sqrt(ab)
        std = np.sqrt(1.0 - ab)
        if ti.ndim == 0:
            return float(mean_coef), float(std)
        return mean_coef, std

    def transition(self, t0: ArrayLike, t1: ArrayLike) -> tuple[ArrayLike, ArrayLike]:
        t0 = np.asarray(t0, dtype=np.float64)
        t1 = np.asarray(t1, dtype=np.float64)
        if np.any(t1 < t0):
            raise DomainError("transition requires t0 <= t1")
        return _transition_from_marginals(self, t0, t1)

    def time_grid(self, n: int | None = None) -> np.ndarray:
        if n is not None and n != self.steps:
            raise DomainError("discrete grid is the integer steps 1..steps")
        return np.arange(1, self.steps + 1, dtype=np.float64)

    def draw_times(self, rng: np.random.Generator, size: int, t_floor: float = 1e-4,
                   t_max: float | None = None) -> np.ndarray:
        # t_floor is a continuous-time concern; integer times already start at 1.
        # t_max is an exclusive bound, matching the continuous case.
        hi = self.steps + 1 if t_max is None else int(np.rint(t_max))
        if not 2 <= hi <= self.steps + 1:
            raise DomainError("t_max must leave at least time 1 drawable")
        return rng.integers(1, hi, size).astype(np.float64)


DiffusionProcess = Union[VpSde, DdpmSchedule]


def _transition_from_marginals(process: DiffusionProcess, t0: np.ndarray, t1: np.ndarray):
    """Conditional coef/std between two times of a linear Gaussian forward chain."""
    mc0, std0 = process.marginal(t0)
    mc1, std1 = process.marginal(t1)
    coef = np.asarray(mc1 / mc0, dtype=np.float64)
    var = np.maximum(np.asarray(std1, dtype=np.float64) ** 2 - coef**2 * np.asarray(std0) ** 2, 0.0)
    std = np.sqrt(var)
    if coef.ndim == 0:
        return float(coef), float(std)
    return coef, std


@dataclass(frozen=True)
class Perturbation:
    """A forward-diffused batch: x_t = mean_coef * x_0 + std * eps."""

    x_t: np.ndarray
    eps: np.ndarray
    t: ArrayLike
    mean_coef: ArrayLike
    std: ArrayLike


def _column(values: ArrayLike, x: np.ndarray) -> ArrayLike:
    arr = np.asarray(values, dtype=np.float64)
    if x.ndim == 2 and arr.ndim == 1:
        return arr[:, None]
    return arr


def perturb(process: DiffusionProcess, x0: np.ndarray, t: ArrayLike,
            rng: np.random.Generator) -> Perturbation:
    """Draw x_t ~ q(x_t | x_0) at time(s) t.

    x0 may be one object (d,) or a batch (n, d); t may be a scalar or a
    per-row vector (n,). The drawn eps is recorded so the score target
    -eps / std can be formed later.
    """
    x0 = np.asarray(x0)
    if not np.all(np.isfinite(x0)):
        raise DataError("perturb: non-finite values in x0")
    if x0.ndim not in (1, 2):
        raise ShapeError(f"perturb expects (d,) or (n, d), got {x0.shape}")
    t_arr = np.asarray(t, dtype=np.float64)
    if t_arr.ndim == 1 and (x0.ndim != 2 or t_arr.shape[0] != x0.shape[0]):
        raise ShapeError("per-row t requires x0 of shape (n, d) with matching n")
    mean_coef, std = process.marginal(t)
    eps = rng.standard_normal(x0.shape, dtype=np.float32)
    x_t = _column(mean_coef, x0) * x0 + _column(std, x0) * eps
    return Perturbation(
        x_t=x_t.astype(np.float32),
        eps=eps,
        t=t if np.ndim(t) == 0 else t_arr,
        mean_coef=mean_coef,
        std=std,
    )


def score_target(p: Perturbation) -> np.ndarray:
    """Regression target for the score: -eps / std. Undefined at std = 0."""
    std = np.asarray(p.std, dtype=np.float64)
    if np.any(std <= 0):
        raise DomainError("score target is singular at std = 0 (t too close to 0)")
    return np.asarray(-p.eps / _column(std, p.eps), dtype=np.float32)


def prior_sample(dim: int, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """Standard normal prior draws: (dim,) or, with n given, (n, dim)."""
    if dim < 1:
        raise ShapeError("prior_sample needs dim >= 1")
    if n is None:
        return rng.standard_normal(dim, dtype=np.float32)
    if n < 0:
        raise ShapeError("prior_sample needs n >= 0")
    return rng.standard_normal((n, dim), dtype=np.float32)


def ddpm_schedule(spec: DdpmSchedule, t: ArrayLike) -> tuple[ArrayLike, ArrayLike, ArrayLike]:
    """(beta_t, alpha_t, alpha_bar_t); thin functional alias for spec parity."""
    return spec.schedule(t)
