"""Nonnegative constraint functions with analytic gradients.

Two families: smooth random scalar fields built from random cosine
features and squashed into [0, 1), and observation-consistency penalties
of the form sum_i (A(x)_i - y_i)^2 over a set of observed coordinates.
Constraints are immutable after construction; evaluation and gradients are
vectorized over point batches.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

OBSERVATION_KINDS = ("identity", "sine")


@dataclass(frozen=True)
class GrfConstraint:
    """Random smooth field f squashed to c(x) = 1 - exp(-f(x)^2).

    f(x) = sqrt(2 var / M) * sum_m a_m cos(w_m . x + phi_m) + bias, which
    approaches a stationary Gaussian random field with an RBF kernel of the
    given lengthscale as the number of features M grows.
    """

    frequencies: np.ndarray  # (M, dim)
    phases: np.ndarray  # (M,)
    coefficients: np.ndarray  # (M,)
    bias: float
    lengthscale: float
    kernel_variance: float

    @property
    def dim(self) -> int:
        return self.frequencies.shape[1]

    def field(self, x) -> np.ndarray:
        """The underlying scalar field f, vectorized over rows."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        self._check(x)
        m = self.coefficients.size
        ang = x @ self.frequencies.T + self.phases
        scale = np.sqrt(2.0 * self.kernel_variance / m)
        return scale * (np.cos(ang) @ self.coefficients) + self.bias

    def value(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        f = self.field(x)
        c = 1.0 - np.exp(-(f**2))
        return float(c[0]) if squeeze else c

    def gradient(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        x2 = np.atleast_2d(x)
        self._check(x2)
        m = self.coefficients.size
        ang = x2 @ self.frequencies.T + self.phases
        scale = np.sqrt(2.0 * self.kernel_variance / m)
        f = scale * (np.cos(ang) @ self.coefficients) + self.bias
        # df/dx = -scale * sum_m a_m sin(ang_m) w_m
        df = -scale * ((np.sin(ang) * self.coefficients) @ self.frequencies)
        grad = (2.0 * f * np.exp(-(f**2)))[:, None] * df
        return grad[0] if squeeze else grad

    def _check(self, x2):
        if x2.shape[1] != self.dim:
            raise ValueError(f"point dimension {x2.shape[1]} != constraint dimension {self.dim}")
        if not np.all(np.isfinite(x2)):
            raise ValueError("points contain non-finite entries")

    def to_dict(self) -> dict:
        return {
            "kind": "grf",
            "frequencies": self.frequencies.tolist(),
            "phases": self.phases.tolist(),
            "coefficients": self.coefficients.tolist(),
            "bias": self.bias,
            "lengthscale": self.lengthscale,
            "kernel_variance": self.kernel_variance,
        }

    @classmethod
    def from_dict(cls, d) -> "GrfConstraint":
        return cls(
            frequencies=np.asarray(d["frequencies"], dtype=float),
            phases=np.asarray(d["phases"], dtype=float),
            coefficients=np.asarray(d["coefficients"], dtype=float),
            bias=float(d["bias"]),
            lengthscale=float(d["lengthscale"]),
            kernel_variance=float(d["kernel_variance"]),
        )


def grf_sample(
    rng,
    num_features: int = 64,
    lengthscale: float = 0.25,
    kernel_variance: float = 1.0,
    bias_scale: float = 0.05,
    dim: int = 2,
) -> GrfConstraint:
    """Draw one random-field constraint.

    Frequencies are N(0, lengthscale^-2 I), phases uniform on [0, 2 pi),
    coefficients standard normal, bias N(0, (bias_scale^2) * variance),
    all independent.
    """
    if min(num_features, lengthscale, kernel_variance, dim) <= 0 or bias_scale < 0:
        raise ValueError("invalid random-field hyperparameters")
    freqs = rng.standard_normal((num_features, dim)) / lengthscale
    phases = rng.uniform(0.0, 2.0 * np.pi, num_features)
    coeffs = rng.standard_normal(num_features)
    bias = float(bias_scale * np.sqrt(kernel_variance) * rng.standard_normal()) if bias_scale > 0 else 0.0
    return GrfConstraint(
        frequencies=freqs,
        phases=phases,
        coefficients=coeffs,
        bias=bias,
        lengthscale=lengthscale,
        kernel_variance=kernel_variance,
    )


@dataclass(frozen=True)
class ObservationConstraint:
    """Squared mismatch with observed coordinates: sum_i (A(x)_i - y_i)^2.

    ``kind`` selects the pointwise observation map A: "identity" reads the
    coordinates directly, "sine" reads their sine (a perfect nonlinear
    observation). ``indices`` are flattened coordinate positions, ``target``
    the observed values A(x_true)[indices].
    """

    kind: str
    indices: np.ndarray  # (k,) int
    target: np.ndarray  # (k,)
    dim: int
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.kind not in OBSERVATION_KINDS:
            raise ValueError(f"kind must be one of {OBSERVATION_KINDS}")

    def value(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        x2 = np.atleast_2d(x)
        self._check(x2)
        obs = x2[:, self.indices]
        if self.kind == "sine":
            obs = np.sin(obs)
        c = np.sum((obs - self.target) ** 2, axis=1)
        return float(c[0]) if squeeze else c

    def gradient(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        x2 = np.atleast_2d(x)
        self._check(x2)
        vals = x2[:, self.indices]
        if self.kind == "sine":
            resid = 2.0 * (np.sin(vals) - self.target) * np.cos(vals)
        else:
            resid = 2.0 * (vals - self.target)
        grad = np.zeros_like(x2)
        grad[:, self.indices] = resid
        return grad[0] if squeeze else grad

    def _check(self, x2):
        if x2.shape[1] != self.dim:
            raise ValueError(f"point dimension {x2.shape[1]} != constraint dimension {self.dim}")
        if not np.all(np.isfinite(x2)):
            raise ValueError("points contain non-finite entries")

    def to_dict(self) -> dict:
        return {
            "kind": "observation",
            "map": self.kind,
            "indices": self.indices.tolist(),
            "target": self.target.tolist(),
            "dim": self.dim,
            "meta": dict(self.meta),
        }

    @classmethod
    def from_dict(cls, d) -> "ObservationConstraint":
        return cls(
            kind=d["map"],
            indices=np.asarray(d["indices"], dtype=int),
            target=np.asarray(d["target"], dtype=float),
            dim=int(d["dim"]),
            meta=dict(d.get("meta", {})),
        )


def observation_of_rows(kind: str, reference: np.ndarray, time_indices) -> ObservationConstraint:
    """Observe whole time rows of a (time, space) field, flattened time-major.

    ``reference`` supplies the observed values; the constraint then measures
    the mismatch of any flattened field with those rows under the chosen map.
    """
    reference = np.asarray(reference, dtype=float)
    if reference.ndim != 2:
        raise ValueError("reference must be a (time, space) field")
    nt, nx = reference.shape
    time_indices = [int(t) for t in time_indices]
    for t in time_indices:
        if not 0 <= t < nt:
            raise ValueError(f"time index {t} outside [0, {nt})")
    idx = np.concatenate([np.arange(t * nx, (t + 1) * nx) for t in time_indices])
    vals = reference.reshape(-1)[idx]
    if kind == "sine":
        vals = np.sin(vals)
    return ObservationConstraint(
        kind=kind,
        indices=idx,
        target=vals,
        dim=nt * nx,
        meta={"time_indices": time_indices, "shape": [nt, nx]},
    )


def constraint_from_dict(d) -> GrfConstraint | ObservationConstraint:
    if d.get("kind") == "grf":
        return GrfConstraint.from_dict(d)
    if d.get("kind") == "observation":
        return ObservationConstraint.from_dict(d)
    raise ValueError(f"unknown constraint kind {d.get('kind')!r}")
