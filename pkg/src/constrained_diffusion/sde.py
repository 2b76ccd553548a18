"""Variance-exploding forward process: noise schedules, kernels, score.

The forward corruption adds isotropic Gaussian noise with a growing scale,
so the transition kernel is ``N(x0, sigma^2 I)`` and the score of the
noisy marginal follows from the posterior-mean denoiser via

    score(x) = (E[x0 | x] - x) / sigma^2.

All operations are pure given an explicit random generator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SPACINGS = ("log-linear", "edm-rho")


@dataclass(frozen=True)
class NoiseSchedule:
    """Discrete noise-level schedule for the variance-exploding process.

    ``sigma(0) = 0`` at the data endpoint by convention; levels 1..num_steps
    increase strictly from ``sigma_min`` to ``sigma_max``.

    Parameters
    ----------
    num_steps : int
        Number of diffusion steps T.
    sigma_min, sigma_max : float
        Noise scale at step 1 and step T.
    spacing : str
        "log-linear" (geometric in sigma) or "edm-rho" (power-law warp
        with exponent ``rho``).
    rho : float
        Warp exponent for "edm-rho" spacing.
    """

    num_steps: int
    sigma_min: float = 0.01
    sigma_max: float = 10.0
    spacing: str = "log-linear"
    rho: float = 7.0

    def __post_init__(self):
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        if not (0.0 < self.sigma_min < self.sigma_max < np.inf):
            raise ValueError("need 0 < sigma_min < sigma_max < inf")
        if self.spacing not in SPACINGS:
            raise ValueError(f"spacing must be one of {SPACINGS}")

    def sigmas(self) -> np.ndarray:
        """All levels as an array of length num_steps + 1, index = step."""
        t = self.num_steps
        if t == 1:
            core = np.array([self.sigma_max])
        elif self.spacing == "log-linear":
            core = np.geomspace(self.sigma_min, self.sigma_max, t)
        else:
            inv = 1.0 / self.rho
            u = np.linspace(0.0, 1.0, t)
            core = (self.sigma_min**inv + u * (self.sigma_max**inv - self.sigma_min**inv)) ** self.rho
        return np.concatenate([[0.0], core])

    def sigma(self, step: int) -> float:
        return sigma_at(self, step)


def sigma_at(schedule: NoiseSchedule, step: int) -> float:
    """Noise level at a discrete step; 0 at the data endpoint."""
    if not 0 <= step <= schedule.num_steps:
        raise ValueError(f"step {step} outside [0, {schedule.num_steps}]")
    return float(schedule.sigmas()[step])


@dataclass
class DiffusionState:
    """A sample paired with its position on the schedule."""

    x: np.ndarray
    step: int
    sigma: float
    schedule: NoiseSchedule = field(repr=False, default=None)

    @classmethod
    def at_step(cls, schedule: NoiseSchedule, x: np.ndarray, step: int) -> "DiffusionState":
        x = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(x)):
            raise ValueError("state contains non-finite entries")
        return cls(x=x, step=step, sigma=sigma_at(schedule, step), schedule=schedule)

    def validate(self) -> None:
        if self.schedule is not None and self.sigma != sigma_at(self.schedule, self.step):
            raise ValueError("sigma inconsistent with schedule at this step")
        if not np.all(np.isfinite(self.x)):
            raise ValueError("state contains non-finite entries")


def forward_kernel_sample(x0: np.ndarray, sigma: float, rng) -> np.ndarray:
    """Draw from the forward kernel ``N(x0, sigma^2 I)``.

    With sigma == 0 the input is returned exactly (no draw is consumed).
    """
    x0 = np.asarray(x0, dtype=float)
    if not np.all(np.isfinite(x0)):
        raise ValueError("x0 contains non-finite entries")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return x0.copy()
    return x0 + sigma * rng.standard_normal(x0.shape)


def tweedie_score(x: np.ndarray, x0_hat: np.ndarray, sigma: float) -> np.ndarray:
    """Score of the noisy marginal from the posterior-mean estimate."""
    if sigma <= 0:
        raise ValueError("tweedie_score requires sigma > 0")
    x = np.asarray(x, dtype=float)
    x0_hat = np.asarray(x0_hat, dtype=float)
    return (x0_hat - x) / (sigma * sigma)


def marginal_cloud(cloud0: np.ndarray, sigma: float, rng) -> np.ndarray:
    """Push every row of a point cloud through the forward kernel."""
    cloud0 = np.asarray(cloud0, dtype=float)
    if cloud0.size == 0:
        raise ValueError("empty point cloud")
    return forward_kernel_sample(cloud0, sigma, rng)
