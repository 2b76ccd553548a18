"""Closed-form reference denoisers for analytic sanity checks.

These implement the same protocol as the trained network (``denoise``,
``denoise_with_tape``, ``vjp``, ``dim``) but compute the exact posterior
mean for priors where it is available, so sampler behavior can be tested
independently of training quality.
"""

from __future__ import annotations

import numpy as np


class AnalyticGaussianDenoiser:
    """Exact posterior mean for an isotropic Gaussian prior N(mean, scale^2 I):

    d(x, sigma) = (scale^2 x + sigma^2 mean) / (scale^2 + sigma^2),
    with constant Jacobian scale^2/(scale^2 + sigma^2) I.
    """

    def __init__(self, dim: int, mean=0.0, scale: float = 1.0):
        self.dim = int(dim)
        self.mean = np.broadcast_to(np.asarray(mean, dtype=float), (self.dim,)).copy()
        self.scale = float(scale)

    def _coeff(self, sigma):
        s2 = self.scale**2
        return s2 / (s2 + sigma**2)

    def denoise(self, x, sigma):
        x = np.asarray(x, dtype=float)
        sigma = np.asarray(sigma, dtype=float)
        if x.ndim == 2 and sigma.ndim == 1:
            sigma = sigma[:, None]
        c = self._coeff(sigma)
        return c * x + (1.0 - c) * self.mean

    def denoise_with_tape(self, x, sigma):
        return self.denoise(x, sigma), float(np.min(self._coeff(np.asarray(sigma, dtype=float))))

    def vjp(self, tape, upstream):
        return tape * np.asarray(upstream, dtype=float)


class AnalyticGmm1dDenoiser:
    """Exact posterior mean for a 1D Gaussian mixture prior.

    With components N(mu_k, s_k^2) and weights w_k, the posterior mean under
    x = x0 + sigma * noise is the responsibility-weighted combination of the
    per-component Gaussian posterior means.
    """

    def __init__(self, weights, means, scales):
        self.dim = 1
        self.w = np.asarray(weights, dtype=float)
        self.mu = np.asarray(means, dtype=float)
        self.s2 = np.asarray(scales, dtype=float) ** 2
        if not np.isclose(self.w.sum(), 1.0):
            raise ValueError("weights must sum to 1")

    def _posterior(self, x, sigma):
        x = np.atleast_2d(np.asarray(x, dtype=float))  # (n, 1)
        var = self.s2 + sigma**2  # (K,)
        # responsibilities r_k(x) under the noisy marginal
        log_r = -0.5 * (x - self.mu) ** 2 / var - 0.5 * np.log(var) + np.log(self.w)
        log_r -= log_r.max(axis=1, keepdims=True)
        r = np.exp(log_r)
        r /= r.sum(axis=1, keepdims=True)
        comp_mean = (self.s2 * x + sigma**2 * self.mu) / var  # (n, K)
        return r, comp_mean, var

    def denoise(self, x, sigma):
        x_in = np.asarray(x, dtype=float)
        squeeze = x_in.ndim == 1
        r, comp_mean, _ = self._posterior(x_in, float(np.max(sigma)) if np.ndim(sigma) else sigma)
        out = np.sum(r * comp_mean, axis=1, keepdims=True)
        return out[:, 0][:, None] if not squeeze else out[0]

    def denoise_with_tape(self, x, sigma):
        sigma = float(np.max(sigma)) if np.ndim(sigma) else float(sigma)
        return self.denoise(x, sigma), (np.asarray(x, dtype=float), sigma)

    def vjp(self, tape, upstream):
        # derivative of the posterior mean by central differences; exact
        # enough for sampler tests and keeps this reference self-contained
        x, sigma = tape
        h = 1e-6
        d_plus = self.denoise(np.atleast_2d(x) + h, sigma)
        d_minus = self.denoise(np.atleast_2d(x) - h, sigma)
        jac = (d_plus - d_minus) / (2 * h)
        up = np.asarray(upstream, dtype=float)
        return jac.reshape(np.shape(up)) * up
