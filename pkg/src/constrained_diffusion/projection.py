"""Feasibility projection through the denoiser, and renoising.

The projection solves

    x* = argmin_x  c(d(x, sigma)) + lambda * ||x - x_anchor||^2

with L-BFGS (strong Wolfe) or Adam, starting from the anchor itself. The
constraint gradient is pulled back through the denoiser by a vector-Jacobian
product. At sigma == 0 the denoiser degenerates to the identity (the
posterior of the clean sample given itself), so the projection acts on the
sample directly; this is the final-step case.

Renoising re-applies the unconstrained forward kernel around the denoised
projected point, restoring the noise level that projection disturbed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ProjectionError
from .optim import minimize_batch

LAMBDA_KINDS = ("zero", "data2d", "table")


@dataclass(frozen=True)
class LambdaSchedule:
    """Proximity-penalty weight as a function of the diffusion step.

    "zero" disables the penalty. "data2d" uses t^2 / (4 sigma_t^2 + 4) with
    the continuous time identified with the noise level (t := sigma under
    the variance-exploding convention). "table" reads per-step values.
    """

    kind: str = "zero"
    table: tuple = ()

    def __post_init__(self):
        if self.kind not in LAMBDA_KINDS:
            raise ValueError(f"lambda schedule kind must be one of {LAMBDA_KINDS}")


def lambda_at(schedule: LambdaSchedule, t_index: int, sigma: float) -> float:
    if schedule.kind == "zero":
        return 0.0
    if schedule.kind == "data2d":
        t = sigma
        return t * t / (4.0 * sigma * sigma + 4.0)
    if not 0 <= t_index < len(schedule.table):
        raise ValueError(f"step {t_index} outside lambda table of length {len(schedule.table)}")
    return float(schedule.table[t_index])


@dataclass(frozen=True)
class ProjectionConfig:
    optimizer: str = "lbfgs"  # "lbfgs" or "adam"
    max_iters: int = 8
    memory: int = 10
    objective_tol: float = 1e-10
    adam_lr: float = 0.05
    lambda_schedule: LambdaSchedule = field(default_factory=LambdaSchedule)
    # Per-line-search displacement cap, in units of sqrt(dim)*(sigma + 0.25):
    # keeps near-flat directions at small noise from throwing iterates far
    # outside the data region. None disables the safeguard.
    max_move_scale: float | None = 4.0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.optimizer not in ("lbfgs", "adam"):
            raise ValueError("optimizer must be 'lbfgs' or 'adam'")


@dataclass
class ProjectionResult:
    x_star: np.ndarray
    objective_value: float
    constraint_value: float
    iters_used: int
    converged: bool


@dataclass
class BatchProjectionResult:
    x_star: np.ndarray  # (n, d)
    objective_values: np.ndarray  # (n,)
    constraint_values: np.ndarray  # (n,)
    iters_used: np.ndarray  # (n,)
    converged: np.ndarray  # (n,) bool
    failed: np.ndarray  # (n,) bool


class _IdentityTape:
    pass


def _denoise_with_tape(net, x, sigma):
    if sigma == 0.0 or net is None:
        return x, _IdentityTape()
    return net.denoise_with_tape(x, sigma)


def _vjp(net, tape, upstream):
    if isinstance(tape, _IdentityTape):
        return upstream
    return net.vjp(tape, upstream)


def project_batch(net, constraint, x_t: np.ndarray, sigma: float, lam: float, config: ProjectionConfig) -> BatchProjectionResult:
    """Project every row of ``x_t`` independently (vectorized solves)."""
    x_t = np.atleast_2d(np.asarray(x_t, dtype=float))
    anchors = x_t.copy()

    def objective(x, rows):
        d, tape = _denoise_with_tape(net, x, sigma)
        cvals = np.atleast_1d(constraint.value(d))
        f = cvals.copy()
        g = _vjp(net, tape, np.atleast_2d(constraint.gradient(d)))
        if lam != 0.0:
            delta = x - anchors[rows]
            f = f + lam * np.sum(delta**2, axis=1)
            g = g + 2.0 * lam * delta
        return f, g

    max_step = None
    if config.max_move_scale is not None:
        max_step = config.max_move_scale * np.sqrt(x_t.shape[1]) * (sigma + 0.25)
    res = minimize_batch(
        objective,
        x_t,
        method=config.optimizer,
        max_iters=config.max_iters,
        memory=config.memory,
        tol=config.objective_tol,
        lr=config.adam_lr,
        max_step=max_step,
    )
    d_star, _ = _denoise_with_tape(net, res.x, sigma)
    cvals = np.atleast_1d(constraint.value(d_star)).astype(float)
    return BatchProjectionResult(
        x_star=res.x,
        objective_values=res.f,
        constraint_values=cvals,
        iters_used=res.iters,
        converged=res.converged,
        failed=res.failed,
    )


def project(net, constraint, x_t: np.ndarray, sigma: float, lam: float, config: ProjectionConfig) -> ProjectionResult:
    """Single-sample projection. Raises if the starting objective is non-finite."""
    x_t = np.asarray(x_t, dtype=float)
    res = project_batch(net, constraint, x_t[None, :], sigma, lam, config)
    if res.failed[0]:
        raise ProjectionError("objective non-finite at the projection start point", last_iterate=x_t.copy())
    return ProjectionResult(
        x_star=res.x_star[0],
        objective_value=float(res.objective_values[0]),
        constraint_value=float(res.constraint_values[0]),
        iters_used=int(res.iters_used[0]),
        converged=bool(res.converged[0]),
    )


def renoise(net, x_star: np.ndarray, sigma: float, rng) -> np.ndarray:
    """Redraw the iterate from the forward kernel centered at its denoised value."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    x_star = np.asarray(x_star, dtype=float)
    if sigma == 0.0:
        # zero-noise limit: the denoiser is the identity and the kernel a delta
        return x_star.copy()
    d = net.denoise(x_star, sigma)
    return d + sigma * rng.standard_normal(np.shape(d))


def with_max_iters(config: ProjectionConfig, max_iters: int) -> ProjectionConfig:
    return replace(config, max_iters=max_iters)
