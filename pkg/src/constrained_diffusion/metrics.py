"""Distribution, violation, ensemble, and continuity metrics.

Point-cloud comparison uses two complementary views: a debiased entropic
optimal-transport divergence (symmetric, zero on identical clouds) and the
nearest-neighbor cross-edge rate on the pooled points (0.5 when the two
clouds are draws from the same distribution). Ensemble verification
implements the standard skill / spread / spread-skill / CRPS set, and
continuity measures step-to-step norms of a field in time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import MetricError


# ---------------------------------------------------------------------------
# entropic optimal transport


def _log_weights(n):
    return np.full(n, -np.log(n))


def _sinkhorn_potentials(cost, eps, max_iters, tol):
    """Symmetrized log-domain Sinkhorn; returns dual potentials and a
    convergence flag. Uniform weights on both sides."""
    n, m = cost.shape
    loga = _log_weights(n)
    logb = _log_weights(m)
    f = np.zeros(n)
    g = np.zeros(m)
    converged = False
    for _ in range(max_iters):
        # c-transforms in the log domain
        f_new = -eps * _lse((g[None, :] - cost) / eps + logb[None, :], axis=1)
        g_new = -eps * _lse((f_new[:, None] - cost) / eps + loga[:, None], axis=0)
        shift_f = np.max(np.abs(f_new - f))
        shift_g = np.max(np.abs(g_new - g))
        f, g = f_new, g_new
        if max(shift_f, shift_g) < tol:
            converged = True
            break
    return f, g, converged


def _lse(z, axis):
    zmax = np.max(z, axis=axis, keepdims=True)
    return np.squeeze(zmax, axis=axis) + np.log(np.sum(np.exp(z - zmax), axis=axis))


def _ot_dual(x, y, eps, max_iters, tol):
    cost = np.sum((x[:, None, :] - y[None, :, :]) ** 2, axis=2)
    f, g, converged = _sinkhorn_potentials(cost, eps, max_iters, tol)
    return float(f.mean() + g.mean()), converged


def sinkhorn_divergence(a, b, eps_reg=None, max_iters=500, tol=1e-9, return_converged=False):
    """Debiased entropic transport divergence with squared-Euclidean cost.

    ``eps_reg`` defaults to 0.05 times the median pairwise squared distance
    between the clouds. The debiasing S(A,B) = OT(A,B) - (OT(A,A)+OT(B,B))/2
    makes the value zero for identical clouds and symmetric; values may be
    a few 1e-12 negative at finite convergence.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.size == 0 or b.size == 0:
        raise ValueError("empty point cloud")
    if a.shape[1] != b.shape[1]:
        raise ValueError("clouds must share a dimension")
    if eps_reg is None:
        cross = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=2)
        med = float(np.median(cross))
        eps_reg = 0.05 * med if med > 0 else 1e-6
    ab, c1 = _ot_dual(a, b, eps_reg, max_iters, tol)
    aa, c2 = _ot_dual(a, a, eps_reg, max_iters, tol)
    bb, c3 = _ot_dual(b, b, eps_reg, max_iters, tol)
    value = ab - 0.5 * (aa + bb)
    if return_converged:
        return value, (c1 and c2 and c3)
    return value


# ---------------------------------------------------------------------------
# nearest-neighbor two-sample statistic


def knn_cross_edge_rate(a, b, k=5, subsample=4096, repeats=10, rng=None):
    """Fraction of directed k-nearest-neighbor edges crossing the two clouds.

    Per repeat, ``subsample`` points are drawn from each cloud without
    replacement, pooled, and each pooled point contributes k edges to its
    nearest neighbors (self excluded); the rate is averaged over repeats.
    Near 0.5 when the clouds are draws from one distribution.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if subsample < k + 1:
        raise ValueError("subsample must be at least k + 1")
    if a.shape[0] < subsample or b.shape[0] < subsample:
        raise ValueError(f"both clouds need at least subsample={subsample} points")
    rng = rng if rng is not None else np.random.default_rng(0)
    rates = []
    for _ in range(repeats):
        ia = rng.choice(a.shape[0], size=subsample, replace=False)
        ib = rng.choice(b.shape[0], size=subsample, replace=False)
        union = np.concatenate([a[ia], b[ib]], axis=0)
        labels = np.concatenate([np.zeros(subsample, bool), np.ones(subsample, bool)])
        tree = cKDTree(union)
        _, nn = tree.query(union, k=k + 1)
        neighbors = nn[:, 1:]  # drop self
        cross = labels[neighbors] != labels[:, None]
        rates.append(float(np.mean(cross)))
    return float(np.mean(rates))


# ---------------------------------------------------------------------------
# constraint violation statistics


def violation_stats(cloud, constraint, bins=40, floor=1e-6):
    """Quantiles of the violation over a cloud plus a log-domain histogram."""
    cloud = np.atleast_2d(np.asarray(cloud, dtype=float))
    if cloud.size == 0:
        raise ValueError("empty point cloud")
    c = np.atleast_1d(constraint.value(cloud))
    logs = np.log10(c + floor)
    hist, edges = np.histogram(logs, bins=bins)
    return {
        "median": float(np.median(c)),
        "q25": float(np.quantile(c, 0.25)),
        "q75": float(np.quantile(c, 0.75)),
        "max": float(np.max(c)),
        "log_hist": hist.tolist(),
        "log_edges": edges.tolist(),
    }


# ---------------------------------------------------------------------------
# ensemble verification


@dataclass
class EnsembleScores:
    skill: float
    spread: float
    ratio: float
    crps: float
    ensemble_size: int
    case_count: int


def ensemble_scores(ensembles, truths) -> EnsembleScores:
    """Skill, spread, corrected spread-skill ratio, and CRPS.

    ``ensembles`` has shape (K, M, ...field dims...) and ``truths``
    (K, ...field dims...); one or two field axes are supported. Skill is the
    root mean square error of the ensemble mean, spread the root mean
    ensemble variance (M - 1 normalization), CRPS the field-summed absolute
    error form with the 1/(2 M (M-1)) pair term.
    """
    ens = np.asarray(ensembles, dtype=float)
    tru = np.asarray(truths, dtype=float)
    if ens.ndim < 3 or ens.ndim > 4:
        raise MetricError("ensembles must have shape (K, M, H) or (K, M, H, W)")
    if tru.shape != ens.shape[:1] + ens.shape[2:]:
        raise MetricError(f"truth shape {tru.shape} incompatible with ensembles {ens.shape}")
    k, m = ens.shape[:2]
    if m < 2:
        raise MetricError("spread and CRPS require at least 2 ensemble members")
    field_axes = tuple(range(1, tru.ndim))

    mean = ens.mean(axis=1)
    skill = float(np.sqrt(np.mean((tru - mean) ** 2)))
    var = ens.var(axis=1, ddof=1)
    spread = float(np.sqrt(np.mean(var)))
    ratio = float(np.sqrt((m + 1) / m) * spread / skill) if skill > 0 else float("inf") if spread > 0 else float("nan")

    l1_err = np.abs(ens - tru[:, None]).sum(axis=tuple(ax + 1 for ax in field_axes))  # (K, M)
    term1 = l1_err.sum(axis=1) / m
    pair = np.abs(ens[:, :, None] - ens[:, None, :]).sum(axis=tuple(ax + 2 for ax in field_axes))  # (K, M, M)
    term2 = pair.sum(axis=(1, 2)) / (2 * m * (m - 1))
    crps = float(np.mean(term1 - term2))
    return EnsembleScores(skill=skill, spread=spread, ratio=ratio, crps=crps, ensemble_size=m, case_count=k)


# ---------------------------------------------------------------------------
# continuity


@dataclass
class ContinuityScore:
    mean_step_norm: float
    max_step_norm: float


def continuity_norms(field) -> ContinuityScore:
    """Mean and max Euclidean norm of consecutive time-row differences."""
    values = np.asarray(field, dtype=float)
    if values.ndim != 2 or values.shape[0] < 2:
        raise MetricError("continuity needs a (time, space) field with at least 2 rows")
    diffs = np.linalg.norm(np.diff(values, axis=0), axis=1)
    return ContinuityScore(mean_step_norm=float(diffs.mean()), max_step_norm=float(diffs.max()))


@dataclass
class DistributionScore:
    """Cloud-versus-cloud comparison record."""

    sinkhorn: float
    sinkhorn_eps: float | None
    cross_edge_rate: float
    k: int
    subsample_size: int
    repeats: int


def distribution_score(a, b, k=5, subsample=4096, repeats=10, rng=None, sinkhorn_points=2048, sinkhorn_eps=None) -> DistributionScore:
    """Bundle the transport divergence and cross-edge rate for two clouds.

    The transport part runs on a subsample for tractability; the divergence
    is clamped at zero (finite-convergence values can be barely negative).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    na = min(sinkhorn_points, a.shape[0])
    nb = min(sinkhorn_points, b.shape[0])
    ia = rng.choice(a.shape[0], size=na, replace=False)
    ib = rng.choice(b.shape[0], size=nb, replace=False)
    sk = sinkhorn_divergence(a[ia], b[ib], eps_reg=sinkhorn_eps)
    rate = knn_cross_edge_rate(a, b, k=k, subsample=subsample, repeats=repeats, rng=rng)
    return DistributionScore(
        sinkhorn=max(sk, 0.0),
        sinkhorn_eps=sinkhorn_eps,
        cross_edge_rate=rate,
        k=k,
        subsample_size=subsample,
        repeats=repeats,
    )
