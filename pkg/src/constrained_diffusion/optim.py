"""Unconstrained minimizers used by projections and training.

The central routine is :func:`minimize_batch`, which runs many independent
small minimizations in lockstep: every sample in the batch keeps its own
L-BFGS history, line-search state, and convergence flag, while function and
gradient evaluations are batched into single vectorized calls. Results are
identical to running each sample on its own (same arithmetic, per-sample
control flow), which is what the tests assert.

The line search implements the strong Wolfe conditions with bracketing and
bisection zoom; non-finite trial values are treated as "too high" so the
search backs away from blow-up regions. Samples that cannot make progress
keep their best evaluated iterate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# line-search states
_BRACKET, _ZOOM, _DONE, _FAIL = 0, 1, 2, 3


@dataclass
class BatchResult:
    """Outcome of a batched minimization."""

    x: np.ndarray  # best iterate per sample, (n, d)
    f: np.ndarray  # objective at best iterate, (n,)
    f0: np.ndarray  # objective at the starting point, (n,)
    iters: np.ndarray  # outer iterations attempted per sample, (n,)
    converged: np.ndarray  # bool (n,)
    failed: np.ndarray  # bool (n,): non-finite objective at the start
    nevals: int = 0


def minimize_batch(
    fn,
    x0: np.ndarray,
    *,
    method: str = "lbfgs",
    max_iters: int = 8,
    memory: int = 10,
    tol: float = 1e-10,
    lr: float = 0.1,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    c1: float = 1e-4,
    c2: float = 0.9,
    max_ls_rounds: int = 12,
    max_step: float | None = None,
) -> BatchResult:
    """Minimize ``fn`` independently for each row of ``x0``.

    ``fn(X, rows) -> (f, g)`` evaluates a subset of samples: ``X`` is
    ``(m, d)``, ``rows`` are the global sample indices being evaluated, and
    the return is ``(m,)`` values and ``(m, d)`` gradients.

    ``max_step`` bounds the displacement of any single line search, the
    usual safeguard against runaway steps along nearly flat directions.

    A sample counts as converged when its gradient infinity norm drops
    below ``tol`` or an accepted step decreases the objective by less than
    ``tol``. The best evaluated iterate is always returned.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    if method == "lbfgs":
        return _lbfgs_batch(fn, x0, max_iters, memory, tol, c1, c2, max_ls_rounds, max_step)
    if method in ("adam", "gd"):
        return _firstorder_batch(fn, x0, method, max_iters, tol, lr, beta1, beta2, eps)
    raise ValueError(f"unknown method {method!r}")


def _lbfgs_batch(fn, x0, max_iters, memory, tol, c1, c2, max_ls_rounds, max_step=None):
    n, d = x0.shape
    rows_all = np.arange(n)
    x = x0.copy()
    f, g = fn(x, rows_all)
    f = np.asarray(f, dtype=float).copy()
    g = np.asarray(g, dtype=float).copy()
    nevals = 1

    failed = ~np.isfinite(f) | ~np.all(np.isfinite(g), axis=1)
    f = np.where(failed, np.inf, f)
    best_x = x.copy()
    best_f = f.copy()
    f0 = f.copy()

    gnorm = np.max(np.abs(g), axis=1) if d else np.zeros(n)
    converged = ~failed & (gnorm <= tol)
    active = ~failed & ~converged
    iters = np.zeros(n, dtype=int)

    # histories, newest pair first
    S = np.zeros((memory, n, d))
    Y = np.zeros((memory, n, d))
    RHO = np.zeros((memory, n))
    hlen = np.zeros(n, dtype=int)

    for _ in range(max_iters):
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        m = idx.size
        g_sub = g[idx]
        f_sub = f[idx]

        # two-loop recursion on the active subset
        q = g_sub.copy()
        alphas = np.zeros((memory, m))
        L = hlen[idx]
        for p in range(memory):
            has = (p < L).astype(float)
            s_p, y_p = S[p, idx], Y[p, idx]
            a = RHO[p, idx] * np.einsum("ij,ij->i", s_p, q) * has
            q -= (a * has)[:, None] * y_p
            alphas[p] = a
        newest_sy = np.einsum("ij,ij->i", S[0, idx], Y[0, idx])
        newest_yy = np.einsum("ij,ij->i", Y[0, idx], Y[0, idx])
        gamma = np.where(L > 0, newest_sy / np.where(newest_yy > 0, newest_yy, 1.0), 1.0)
        r = gamma[:, None] * q
        for p in range(memory - 1, -1, -1):
            has = (p < L).astype(float)
            beta = RHO[p, idx] * np.einsum("ij,ij->i", Y[p, idx], r)
            r += S[p, idx] * ((alphas[p] - beta) * has)[:, None]
        dvec = -r

        dd = np.einsum("ij,ij->i", dvec, g_sub)
        bad = (dd >= 0) | ~np.isfinite(dd)
        if bad.any():
            dvec[bad] = -g_sub[bad]
            dd[bad] = -np.einsum("ij,ij->i", g_sub[bad], g_sub[bad])

        # first iteration: scale the steepest-descent trial by the gradient size
        alpha0 = np.ones(m)
        fresh = L == 0
        if fresh.any():
            gn = np.linalg.norm(g_sub[fresh], axis=1)
            alpha0[fresh] = np.minimum(1.0, 1.0 / np.maximum(gn, 1e-12))
        if max_step is not None:
            dn = np.linalg.norm(dvec, axis=1)
            alpha_max = max_step / np.maximum(dn, 1e-300)
            alpha0 = np.minimum(alpha0, alpha_max)
        else:
            alpha_max = np.full(m, 1e10)

        alpha, f_new, g_new, ok, weak, ls_evals = _strong_wolfe_batch(
            fn, idx, x[idx], f_sub, g_sub, dvec, alpha0, c1, c2, max_ls_rounds, alpha_max
        )
        nevals += ls_evals
        iters[idx] += 1

        accepted = ok | weak
        if accepted.any():
            acc = np.nonzero(accepted)[0]
            ga = idx[acc]
            x_new = x[ga] + alpha[acc, None] * dvec[acc]
            s_vec = x_new - x[ga]
            y_vec = g_new[acc] - g[ga]
            decrease = f[ga] - f_new[acc]

            x[ga] = x_new
            f[ga] = f_new[acc]
            g[ga] = g_new[acc]

            better = f_new[acc] < best_f[ga]
            gb = ga[better]
            best_x[gb] = x[gb]
            best_f[gb] = f[gb]

            # push curvature pairs where well-defined
            sy = np.einsum("ij,ij->i", s_vec, y_vec)
            goodpair = sy > 1e-12
            if goodpair.any():
                gp = ga[goodpair]
                S[1:, gp] = S[:-1, gp]
                Y[1:, gp] = Y[:-1, gp]
                RHO[1:, gp] = RHO[:-1, gp]
                S[0, gp] = s_vec[goodpair]
                Y[0, gp] = y_vec[goodpair]
                RHO[0, gp] = 1.0 / sy[goodpair]
                hlen[gp] = np.minimum(hlen[gp] + 1, memory)

            gn_new = np.max(np.abs(g_new[acc]), axis=1)
            done = (gn_new <= tol) | (decrease <= tol)
            converged[ga[done]] = True
            active[ga[done]] = False

        stalled = ~accepted
        if stalled.any():
            active[idx[stalled]] = False

    return BatchResult(best_x, best_f, f0, iters, converged, failed, nevals)


def _strong_wolfe_batch(fn, rows, x, f0, g0, d, alpha0, c1, c2, max_rounds, alpha_max=None):
    """Per-sample strong Wolfe search along per-sample directions.

    ``alpha_max`` caps each sample's step; a trial at the cap that still
    satisfies sufficient decrease is accepted outright.

    Returns (alpha, f_new, g_new, ok, weak, nevals): ``ok`` marks samples
    satisfying both Wolfe conditions or accepted at the cap, ``weak`` marks
    fallback acceptance of the best strictly-decreasing trial.
    """
    m, dim = x.shape
    if alpha_max is None:
        alpha_max = np.full(m, 1e10)
    dphi0 = np.einsum("ij,ij->i", g0, d)

    state = np.full(m, _BRACKET, dtype=np.int8)
    alpha = np.asarray(alpha0, dtype=float).copy()
    alpha_prev = np.zeros(m)
    phi_prev = f0.copy()
    lo = np.zeros(m)
    hi = np.zeros(m)
    phi_lo = f0.copy()
    bracket_round = np.zeros(m, dtype=int)

    fb_alpha = np.zeros(m)
    fb_phi = f0.copy()
    fb_g = g0.copy()

    out_alpha = np.zeros(m)
    out_phi = f0.copy()
    out_g = g0.copy()
    ok = np.zeros(m, dtype=bool)
    nevals = 0

    for _ in range(max_rounds):
        searching = (state == _BRACKET) | (state == _ZOOM)
        if not searching.any():
            break
        ia = np.nonzero(searching)[0]
        xa = x[ia] + alpha[ia, None] * d[ia]
        phi, gph = fn(xa, rows[ia])
        phi = np.asarray(phi, dtype=float)
        gph = np.asarray(gph, dtype=float)
        nevals += 1
        finite = np.isfinite(phi) & np.all(np.isfinite(gph), axis=1)
        dphi = np.einsum("ij,ij->i", gph, d[ia])

        improved = finite & (phi < fb_phi[ia])
        gi = ia[improved]
        fb_alpha[gi] = alpha[gi]
        fb_phi[gi] = phi[improved]
        fb_g[gi] = gph[improved]

        armijo_rhs = f0[ia] + c1 * alpha[ia] * dphi0[ia]
        too_high = ~finite | (phi > armijo_rhs)

        br = np.nonzero(state[ia] == _BRACKET)[0]
        if br.size:
            gb = ia[br]
            high = too_high[br] | ((bracket_round[gb] > 0) & finite[br] & (phi[br] >= phi_prev[gb]))
            g1 = gb[high]
            state[g1] = _ZOOM
            lo[g1] = alpha_prev[g1]
            hi[g1] = alpha[g1]
            phi_lo[g1] = phi_prev[g1]

            rest = br[~high]
            if rest.size:
                gr = ia[rest]
                curv_ok = np.abs(dphi[rest]) <= -c2 * dphi0[gr]
                ga = gr[curv_ok]
                state[ga] = _DONE
                ok[ga] = True
                out_alpha[ga] = alpha[ga]
                out_phi[ga] = phi[rest[curv_ok]]
                out_g[ga] = gph[rest[curv_ok]]

                rest2 = rest[~curv_ok]
                if rest2.size:
                    gr2 = ia[rest2]
                    pos = dphi[rest2] >= 0
                    g2 = gr2[pos]
                    state[g2] = _ZOOM
                    lo[g2] = alpha[g2]
                    hi[g2] = alpha_prev[g2]
                    phi_lo[g2] = phi[rest2[pos]]

                    ext = rest2[~pos]
                    gg = gr2[~pos]
                    # wants to extend: accept outright if already at the cap
                    capped = alpha[gg] >= alpha_max[gg] * (1 - 1e-12)
                    gc = gg[capped]
                    state[gc] = _DONE
                    ok[gc] = True
                    out_alpha[gc] = alpha[gc]
                    out_phi[gc] = phi[ext[capped]]
                    out_g[gc] = gph[ext[capped]]
                    gg = gg[~capped]
                    ext = ext[~capped]
                    alpha_prev[gg] = alpha[gg]
                    phi_prev[gg] = phi[ext]
                    alpha[gg] = np.minimum(alpha[gg] * 2.0, alpha_max[gg])
            bracket_round[gb] += 1

        zm = np.nonzero(state[ia] == _ZOOM)[0]
        # only samples that were already zooming when this round's point was
        # evaluated may transition on it
        zm = zm[np.isin(ia[zm], ia[br], invert=True)] if br.size else zm
        if zm.size:
            gz = ia[zm]
            high_z = too_high[zm] | (finite[zm] & (phi[zm] >= phi_lo[gz]))
            gh = gz[high_z]
            hi[gh] = alpha[gh]

            lowz = zm[~high_z]
            if lowz.size:
                gl = ia[lowz]
                curv_ok = np.abs(dphi[lowz]) <= -c2 * dphi0[gl]
                ga = gl[curv_ok]
                state[ga] = _DONE
                ok[ga] = True
                out_alpha[ga] = alpha[ga]
                out_phi[ga] = phi[lowz[curv_ok]]
                out_g[ga] = gph[lowz[curv_ok]]

                rem = lowz[~curv_ok]
                if rem.size:
                    grm = gl[~curv_ok]
                    flip = dphi[rem] * (hi[grm] - lo[grm]) >= 0
                    gf = grm[flip]
                    hi[gf] = lo[gf]
                    lo[grm] = alpha[grm]
                    phi_lo[grm] = phi[rem]

        # next zoom trial: bisect; give up when the bracket degenerates
        zi = np.nonzero(state == _ZOOM)[0]
        if zi.size:
            width = np.abs(hi[zi] - lo[zi])
            degenerate = width <= 1e-14 * np.maximum(1.0, np.abs(lo[zi]))
            state[zi[degenerate]] = _FAIL
            mid = zi[~degenerate]
            alpha[mid] = 0.5 * (lo[mid] + hi[mid])

    unresolved = state != _DONE
    if unresolved.any():
        ui = np.nonzero(unresolved)[0]
        has_fb = fb_phi[ui] < f0[ui]
        gfb = ui[has_fb]
        out_alpha[gfb] = fb_alpha[gfb]
        out_phi[gfb] = fb_phi[gfb]
        out_g[gfb] = fb_g[gfb]
    weak = (state != _DONE) & (fb_phi < f0)
    return out_alpha, out_phi, out_g, ok, weak, nevals


def _firstorder_batch(fn, x0, method, max_iters, tol, lr, beta1, beta2, eps):
    n, d = x0.shape
    rows_all = np.arange(n)
    x = x0.copy()
    f, g = fn(x, rows_all)
    f = np.asarray(f, dtype=float).copy()
    g = np.asarray(g, dtype=float).copy()
    nevals = 1

    failed = ~np.isfinite(f) | ~np.all(np.isfinite(g), axis=1)
    f = np.where(failed, np.inf, f)
    f0 = f.copy()
    best_x = x.copy()
    best_f = f.copy()
    converged = ~failed & (np.max(np.abs(g), axis=1) <= tol)
    active = ~failed & ~converged
    iters = np.zeros(n, dtype=int)

    mom = np.zeros_like(x)
    vel = np.zeros_like(x)
    steps = np.zeros(n, dtype=int)

    for _ in range(max_iters):
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        steps[idx] += 1
        iters[idx] += 1
        if method == "adam":
            mom[idx] = beta1 * mom[idx] + (1 - beta1) * g[idx]
            vel[idx] = beta2 * vel[idx] + (1 - beta2) * g[idx] ** 2
            t = steps[idx].astype(float)
            mhat = mom[idx] / (1 - beta1 ** t)[:, None]
            vhat = vel[idx] / (1 - beta2 ** t)[:, None]
            x[idx] = x[idx] - lr * mhat / (np.sqrt(vhat) + eps)
        else:
            x[idx] = x[idx] - lr * g[idx]

        f_new, g_new = fn(x[idx], idx)
        nevals += 1
        f_new = np.asarray(f_new, dtype=float)
        g_new = np.asarray(g_new, dtype=float)
        fin = np.isfinite(f_new) & np.all(np.isfinite(g_new), axis=1)

        blew = idx[~fin]
        if blew.size:
            # step into a non-finite region: retreat to best and stop
            x[blew] = best_x[blew]
            active[blew] = False
        gi = idx[fin]
        if gi.size:
            decrease = f[gi] - f_new[fin]
            f[gi] = f_new[fin]
            g[gi] = g_new[fin]
            better = f_new[fin] < best_f[gi]
            gb = gi[better]
            best_x[gb] = x[gb]
            best_f[gb] = f[gb]
            done = np.max(np.abs(g_new[fin]), axis=1) <= tol
            if method == "gd":
                done |= np.abs(decrease) <= tol
            converged[gi[done]] = True
            active[gi[done]] = False

    return BatchResult(best_x, best_f, f0, iters, converged, failed, nevals)


class Adam:
    """Adam over a list of parameter arrays (used for network training)."""

    def __init__(self, shapes, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        b1c = 1 - self.beta1**self.t
        b2c = 1 - self.beta2**self.t
        for p, gr, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * gr
            v *= self.beta2
            v += (1 - self.beta2) * gr**2
            p -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)
