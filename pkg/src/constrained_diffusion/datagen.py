"""Training and evaluation data: 2D toys and a chaotic 1D PDE.

The 2D samplers (checkerboard, sheared Gaussian mixture) standardize their
output with mean/std estimated once per parameter set by a Monte Carlo
pre-pass on the raw law, so every split shares the same statistics.

The PDE part integrates u_t = -u_xx - u_xxxx - u u_x on a periodic domain
with a pseudospectral discretization (FFT derivatives, no de-aliasing) and
an implicit first-order backward-difference step. Each implicit step is
solved by damped-free iterations that invert the stiff linear part exactly
in Fourier space while lagging the advection term.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BlowUpError, SolverError

_STATS_SEED = 20240711  # fixed pre-pass seed so all splits share statistics
_STATS_DRAWS = 100_000


@dataclass(frozen=True)
class Checkerboard2D:
    """Uniform density on the even-parity cells of an m-by-m grid."""

    grid_size: int = 4
    jitter: float = 0.0

    def __post_init__(self):
        if self.grid_size < 1:
            raise ValueError("grid_size must be >= 1")
        if self.jitter < 0:
            raise ValueError("jitter must be >= 0")

    def sample_raw(self, n: int, rng) -> np.ndarray:
        m = self.grid_size
        i = rng.integers(0, m, size=n)
        # j uniform over the cells with (i + j) even
        n_even = (m + 1) // 2  # count of even values in 0..m-1
        n_odd = m // 2
        j = np.empty(n, dtype=np.int64)
        even_i = i % 2 == 0
        j[even_i] = 2 * rng.integers(0, n_even, size=int(even_i.sum()))
        j[~even_i] = 2 * rng.integers(0, n_odd, size=int((~even_i).sum())) + 1
        pts = np.stack([i, j], axis=1).astype(float) + rng.uniform(0.0, 1.0, size=(n, 2))
        if self.jitter > 0:
            pts += self.jitter * rng.standard_normal((n, 2))
        return pts

    def standardization(self) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng(_STATS_SEED)
        pre = self.sample_raw(_STATS_DRAWS, rng)
        return pre.mean(axis=0), pre.std(axis=0)


def checkerboard_sample(params: Checkerboard2D, n: int, rng, standardize: bool = True) -> np.ndarray:
    """Draw n points; standardized by the parameter set's shared statistics."""
    if n < 1:
        raise ValueError("n must be >= 1")
    pts = params.sample_raw(n, rng)
    if standardize:
        mu, sd = params.standardization()
        pts = (pts - mu) / sd
    return pts


@dataclass(frozen=True)
class BananaGmm:
    """Diagonal Gaussian mixture with a quadratic shear in the second axis.

    After drawing z from the mixture, x1 = z1 and
    x2 = z2 + curvature * (z1^2 - E[z1^2]) with the centering moment taken
    analytically under the mixture.
    """

    weights: tuple = (0.35, 0.3, 0.35)
    means: tuple = ((-1.6, 0.0), (0.0, 0.6), (1.6, 0.0))
    stds: tuple = ((0.5, 0.4), (0.5, 0.4), (0.5, 0.4))
    curvature: float = 0.45

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if np.any(w < 0) or not np.isclose(w.sum(), 1.0):
            raise ValueError("weights must be nonnegative and sum to 1")
        if len(self.means) != w.size or len(self.stds) != w.size:
            raise ValueError("weights, means, stds must have equal length")
        if np.any(np.asarray(self.stds, dtype=float) <= 0):
            raise ValueError("stds must be positive")

    def first_coord_second_moment(self) -> float:
        w = np.asarray(self.weights, dtype=float)
        mu1 = np.asarray(self.means, dtype=float)[:, 0]
        s1 = np.asarray(self.stds, dtype=float)[:, 0]
        return float(np.sum(w * (mu1**2 + s1**2)))

    def sample_raw(self, n: int, rng) -> np.ndarray:
        w = np.asarray(self.weights, dtype=float)
        means = np.asarray(self.means, dtype=float)
        stds = np.asarray(self.stds, dtype=float)
        comp = rng.choice(w.size, size=n, p=w)
        z = means[comp] + stds[comp] * rng.standard_normal((n, 2))
        x = z.copy()
        x[:, 1] += self.curvature * (z[:, 0] ** 2 - self.first_coord_second_moment())
        return x

    def standardization(self) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng(_STATS_SEED)
        pre = self.sample_raw(_STATS_DRAWS, rng)
        return pre.mean(axis=0), pre.std(axis=0)


def banana_sample(params: BananaGmm, n: int, rng, standardize: bool = True) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    pts = params.sample_raw(n, rng)
    if standardize:
        mu, sd = params.standardization()
        pts = (pts - mu) / sd
    return pts


# ---------------------------------------------------------------------------
# Kuramoto-Sivashinsky solver


@dataclass(frozen=True)
class KsParams:
    """Discretization of the fourth-order PDE on a periodic domain."""

    grid: int = 128
    length: float = 64.0
    dt: float = 0.1
    steps: int = 512
    newton_tol: float = 1e-9
    newton_max_iter: int = 50

    def __post_init__(self):
        if self.grid < 4 or self.steps < 1:
            raise ValueError("grid must be >= 4 and steps >= 1")
        if min(self.length, self.dt, self.newton_tol) <= 0 or self.newton_max_iter < 1:
            raise ValueError("length, dt, newton_tol must be positive")

    def wavenumbers(self) -> np.ndarray:
        return 2.0 * np.pi * np.fft.rfftfreq(self.grid, d=self.length / self.grid)

    def grid_points(self) -> np.ndarray:
        return np.arange(self.grid) * (self.length / self.grid)


@dataclass
class Trajectory:
    """A (time, space) solution array with grid metadata."""

    values: np.ndarray
    dt: float
    dx: float
    newton_residuals: np.ndarray | None = field(default=None, repr=False)

    @property
    def num_steps(self) -> int:
        return self.values.shape[0] - 1


def spectral_derivative(u: np.ndarray, order: int, length: float) -> np.ndarray:
    """Exact derivative of the trigonometric interpolant on a periodic grid."""
    n = u.shape[-1]
    k = 2.0 * np.pi * np.fft.rfftfreq(n, d=length / n)
    mult = (1j * k) ** order
    return np.fft.irfft(mult * np.fft.rfft(u, axis=-1), n=n, axis=-1).real


def ks_initial_condition(rng, params: KsParams | None = None) -> np.ndarray:
    """Random sum of ten cosine modes of the periodic domain.

    Amplitudes are U(0,1), wavenumbers are integer modes drawn uniformly
    from 1..5 so the signal is exactly band-limited on the grid, phases
    U(0, 2 pi).
    """
    params = params or KsParams()
    x = params.grid_points()
    amp = rng.uniform(0.0, 1.0, 10)
    modes = rng.integers(1, 6, 10)
    phase = rng.uniform(0.0, 2.0 * np.pi, 10)
    u0 = np.zeros(params.grid)
    for a, k, p in zip(amp, modes, phase):
        u0 += a * np.cos(2.0 * np.pi * k * x / params.length + p)
    return u0


def ks_solve(u0: np.ndarray, params: KsParams) -> Trajectory:
    """Integrate the PDE with implicit first-order steps.

    Each step solves u_new + dt*(u_xx + u_xxxx + u u_x)_new = u_old with the
    linear operator inverted diagonally in Fourier space and the nonlinear
    term lagged; iterations stop when the residual infinity norm drops below
    ``newton_tol``. Non-convergence or a non-finite state raises.
    """
    u0 = np.asarray(u0, dtype=float)
    if u0.shape != (params.grid,):
        raise ValueError(f"initial condition has length {u0.shape}, expected ({params.grid},)")
    k = params.wavenumbers()
    # symbol of I + dt*(d_xx + d_xxxx): positive for dt < 4 at these scales
    lin = 1.0 + params.dt * (k**4 - k**2)
    n = params.grid

    traj = np.empty((params.steps + 1, n))
    residuals = np.empty(params.steps)
    traj[0] = u0
    u = u0.copy()
    for step in range(1, params.steps + 1):
        rhs_hat = np.fft.rfft(u)
        v = u.copy()
        converged = False
        for _ in range(params.newton_max_iter):
            v_hat = np.fft.rfft(v)
            nonlin = v * np.fft.irfft(1j * k * v_hat, n=n).real
            res_hat = lin * v_hat + params.dt * np.fft.rfft(nonlin) - rhs_hat
            residual = np.max(np.abs(np.fft.irfft(res_hat, n=n).real))
            if not np.isfinite(residual):
                raise BlowUpError(step)
            if residual < params.newton_tol:
                converged = True
                break
            v = np.fft.irfft((rhs_hat - params.dt * np.fft.rfft(nonlin)) / lin, n=n).real
        if not converged:
            raise SolverError(step, float(residual))
        u = v
        traj[step] = u
        residuals[step - 1] = residual
    dx = params.length / params.grid
    return Trajectory(values=traj, dt=params.dt, dx=dx, newton_residuals=residuals)


def block_average(values: np.ndarray, out_res: tuple[int, int]) -> np.ndarray:
    """Coarse-grain a (time, space) field by averaging rectangular blocks."""
    nt, nx = values.shape
    ot, ox = out_res
    if nt % ot or nx % ox:
        raise ValueError(f"output resolution {out_res} must divide input shape {(nt, nx)}")
    return values.reshape(ot, nt // ot, ox, nx // ox).mean(axis=(1, 3))


@dataclass
class KsDataset:
    """Standardized coarse trajectory snapshots plus the shared statistics."""

    states: np.ndarray  # (count, out_t, out_x), standardized
    mean: float
    std: float
    params: KsParams
    out_res: tuple[int, int]

    @property
    def trajectories(self) -> list[Trajectory]:
        dt_eff = self.params.dt * (self.params.steps // 2) / self.out_res[0]
        dx_eff = self.params.length / self.out_res[1]
        return [Trajectory(values=s, dt=dt_eff, dx=dx_eff) for s in self.states]


def prepare_ks_dataset(
    count: int,
    params: KsParams,
    out_res: tuple[int, int] = (32, 32),
    rng=None,
    seed: int | None = None,
) -> KsDataset:
    """Solve ``count`` trajectories, keep their second halves, coarse-grain,
    and standardize by the dataset-wide mean and standard deviation."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if rng is None:
        rng = np.random.default_rng(seed)
    half = params.steps // 2
    states = np.empty((count, *out_res))
    for i in range(count):
        u0 = ks_initial_condition(rng, params)
        traj = ks_solve(u0, params)
        late = traj.values[-half:]
        states[i] = block_average(late, out_res)
    mean = float(states.mean())
    std = float(states.std())
    states = (states - mean) / std
    return KsDataset(states=states, mean=mean, std=std, params=params, out_res=tuple(out_res))
