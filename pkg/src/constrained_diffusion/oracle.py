"""Ground-truth constrained clouds and closed-form reference samplers.

The empirical ground truth keeps prior samples whose constraint value is
within a small tolerance, then polishes each point with a few guarded
gradient steps. A conditional-Gaussian sampler provides an exact reference
for linear constraints on Gaussian priors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import OracleExhaustedError


@dataclass(frozen=True)
class OracleConfig:
    epsilon: float = 1e-2
    refine_steps: int = 50
    refine_lr: float = 0.25
    target_count: int = 4096
    max_proposals: int = 1_000_000
    proposal_batch: int = 16384

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.refine_steps < 0 or self.refine_lr <= 0:
            raise ValueError("refine_steps must be >= 0 and refine_lr > 0")
        if self.target_count < 1 or self.max_proposals < 1:
            raise ValueError("target_count and max_proposals must be >= 1")


def rejection_sample(sampler, constraint, config: OracleConfig, rng) -> np.ndarray:
    """Filter prior draws to the tolerance set, then refine.

    ``sampler(n, rng)`` must return an (n, d) cloud of prior samples.
    Raises :class:`OracleExhaustedError` if the proposal budget runs out
    before ``target_count`` acceptances.
    """
    accepted = []
    total_accepted = 0
    proposals = 0
    while total_accepted < config.target_count:
        n = min(config.proposal_batch, config.max_proposals - proposals)
        if n <= 0:
            raise OracleExhaustedError(total_accepted, config.target_count, proposals)
        batch = np.atleast_2d(np.asarray(sampler(n, rng), dtype=float))
        proposals += batch.shape[0]
        keep = np.atleast_1d(constraint.value(batch)) <= config.epsilon
        if keep.any():
            accepted.append(batch[keep])
            total_accepted += int(keep.sum())
    cloud = np.concatenate(accepted, axis=0)[: config.target_count]
    return refine(cloud, constraint, config.refine_steps, config.refine_lr)


def refine(cloud: np.ndarray, constraint, steps: int, lr: float) -> np.ndarray:
    """Per-point gradient descent on the constraint with guarded steps.

    Each point keeps its own step size, halved whenever the trial would not
    decrease its value, so the constraint is non-increasing pointwise.
    """
    x = np.atleast_2d(np.asarray(cloud, dtype=float)).copy()
    if steps == 0:
        return x
    rates = np.full(x.shape[0], float(lr))
    c = np.atleast_1d(constraint.value(x))
    for _ in range(steps):
        g = np.atleast_2d(constraint.gradient(x))
        trial = x - rates[:, None] * g
        c_trial = np.atleast_1d(constraint.value(trial))
        better = np.isfinite(c_trial) & (c_trial < c)
        x[better] = trial[better]
        c[better] = c_trial[better]
        rates[~better] *= 0.5
    return x


def gaussian_conditional_oracle(mean, cov, a, b: float, n: int, rng) -> np.ndarray:
    """Exact draws from N(mean, cov) conditioned on the hyperplane a.x = b.

    Uses the usual degenerate-Gaussian form: conditional mean
    mean + cov a (b - a.mean)/(a' cov a) and covariance
    cov - cov a a' cov / (a' cov a), sampled through a symmetric square
    root with tiny negative eigenvalues clipped.
    """
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    a = np.asarray(a, dtype=float)
    if np.allclose(a, 0.0):
        raise ValueError("constraint direction a must be nonzero")
    evals = np.linalg.eigvalsh(cov)
    if np.min(evals) <= 0:
        raise ValueError("covariance must be positive definite")
    ca = cov @ a
    denom = float(a @ ca)
    cond_mean = mean + ca * (b - float(a @ mean)) / denom
    cond_cov = cov - np.outer(ca, ca) / denom
    w, v = np.linalg.eigh(cond_cov)
    root = v * np.sqrt(np.clip(w, 0.0, None))
    z = rng.standard_normal((n, mean.size))
    return cond_mean + z @ root.T
