"""Finite-mixture likelihood of the entry model and the two target-estimator objectives.

Parameter vectors ``theta`` are ordered ``(theta_w, theta_fc, theta_ec)``.
Per-market, per-type log-likelihood matrices have shape ``(n, R)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import log_ndtr, logsumexp

from .dp import default_n_max, delta_sensitivities, solve_dp_exact
from .numdiff import gradient

log = logging.getLogger(__name__)

BOX = 25.0
FKRB_GRID = np.linspace(-0.5, 1.5, 21)


class EmError(RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


def split_theta(theta, d_w):
    theta = np.asarray(theta, dtype=float)
    if theta.size != d_w + 2:
        raise ValueError(f"theta has length {theta.size}, expected {d_w + 2}")
    return theta[:d_w], theta[d_w], theta[d_w + 1]


def type_likelihood(panel, theta, v, beta=0.95, n_max=None):
    """log_l[i, r] = sum_t log P(A_it | N_it, W_i, lambda = v_r; theta)."""
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if not np.all(np.isfinite(v)):
        raise ValueError("type support points must be finite")
    n_max = default_n_max(panel.T) if n_max is None else n_max
    theta_w, fc, ec = split_theta(theta, panel.d_w)
    u = (panel.W @ theta_w)[:, None] + v[None, :]
    _, delta = solve_dp_exact(u, fc, ec, beta, n_max)
    n, R = u.shape
    d_obs = delta[np.arange(n)[:, None, None], np.arange(R)[None, :, None], panel.N[:, None, :]]
    sign = (2 * panel.A - 1)[:, None, :]
    return log_ndtr(sign * d_obs).sum(axis=2)


def weighted_loglik_grad(panel, theta, v, weights, beta=0.95, n_max=None):
    """``sum(weights * type_likelihood(...))`` and its analytic gradient in ``(theta, v)``."""
    v = np.atleast_1d(np.asarray(v, dtype=float))
    n_max = default_n_max(panel.T) if n_max is None else n_max
    theta_w, fc, ec = split_theta(theta, panel.d_w)
    u = (panel.W @ theta_w)[:, None] + v[None, :]
    delta, jac = delta_sensitivities(u, fc, ec, beta, n_max)
    n, R = u.shape
    rows = np.arange(n)[:, None, None], np.arange(R)[None, :, None], panel.N[:, None, :]
    sign = (2 * panel.A - 1)[:, None, :]
    x = sign * delta[rows]
    logp = log_ndtr(x)
    w = np.asarray(weights, dtype=float)[:, :, None]
    value = float(np.sum(w * logp))
    # d log Phi(x) / dx = phi(x) / Phi(x), formed in log space for the far tail
    c = w * sign * np.exp(-0.5 * x * x - 0.5 * np.log(2 * np.pi) - logp)
    g = np.einsum("irt,irtp->irp", c, jac[rows])
    grad = np.concatenate([panel.W.T @ g[:, :, 0].sum(axis=1), g[:, :, 1:].sum(axis=(0, 1)), g[:, :, 0].sum(axis=0)])
    return value, grad


def mixture_loglik(log_l, mu):
    """sum_i log sum_r mu_r exp(log_l[i, r]), evaluated in log space."""
    log_l = np.atleast_2d(log_l)
    mu = np.asarray(mu, dtype=float)
    if log_l.shape[1] != mu.size:
        raise ValueError("log-likelihood columns and mixture weights disagree")
    rows = logsumexp(log_l, b=np.broadcast_to(mu, log_l.shape), axis=1)
    total = float(rows.sum())
    if total == -np.inf:
        log.warning("mixture log-likelihood is -inf: all weight sits on zero-likelihood rows")
    return total


def posteriors(log_l, mu):
    with np.errstate(divide="ignore"):
        a = log_l + np.log(mu)
    return np.exp(a - logsumexp(a, axis=1, keepdims=True))


# --------------------------------------------------------------------------
# histogram (fixed-grid) inner problem


def _scaled(log_l):
    m = log_l.max(axis=1, keepdims=True)
    return np.exp(log_l - m), float(m.sum())


def _obj(L, mu, shift):
    return float(np.log(L @ mu).sum()) + shift


def fkrb_inner(log_l, mu0=None, tol=1e-10, max_iter=20000, polish=True):
    """Mixture weights maximizing the mixture log-likelihood over the simplex.

    Multiplicative (EM) updates from uniform weights, or ``mu0`` when
    warm-starting, until the objective gain per sweep falls below ``tol``;
    ``polish`` then finishes with an active-set Newton solve so zero weights
    are exact and the first-order conditions hold tightly.
    """
    log_l = np.atleast_2d(np.asarray(log_l, dtype=float))
    if not np.all(np.isfinite(log_l)):
        raise ValueError("log-likelihood matrix must be finite")
    n, R = log_l.shape
    L, shift = _scaled(log_l)
    if mu0 is None:
        mu = np.full(R, 1.0 / R)
    else:
        mu = np.clip(np.asarray(mu0, dtype=float), 0.0, None)
        # keep every component alive so no market gets zero mixture mass
        mu = 0.999 * mu / mu.sum() + 0.001 / R
    p = L @ mu
    obj = float(np.log(p).sum())
    warm = 0 if mu0 is None else 1
    for it in range(max_iter):
        mu = mu * (L.T @ (1.0 / p)) / n
        mu /= mu.sum()
        p = L @ mu
        new = float(np.log(p).sum())
        gain = new - obj
        obj = new
        if gain < tol and it >= warm:
            break
        if polish and it >= 50:
            break
    if polish:
        mu = _active_set(L, mu, tol)
    return mu


def _line_to_vertex(L, mu, r):
    # maximize sum log(L((1-t) mu + t e_r)) over t in [0, 1]; concave in t
    p = L @ mu
    q = L[:, r]
    lo, hi = 0.0, 1.0
    dphi = lambda t: float(np.sum((q - p) / ((1 - t) * p + t * q)))
    if dphi(1.0) >= 0:
        return 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if dphi(mid) > 0:
            lo = mid
        else:
            hi = mid
    return lo


def _active_set(L, mu, tol):
    n, R = L.shape
    mu = mu.copy()
    mu[mu < 1e-300] = 0.0
    for _ in range(4 * R + 10):
        for _ in range(100):
            S = np.flatnonzero(mu > 0)
            p = L @ mu
            obj = float(np.log(p).sum())
            LS = L[:, S] / p[:, None]
            g = LS.sum(axis=0)
            H = LS.T @ LS
            k = S.size
            kkt = np.zeros((k + 1, k + 1))
            kkt[:k, :k] = H
            kkt[:k, k] = 1.0
            kkt[k, :k] = 1.0
            rhs = np.append(g, 0.0)
            d = np.linalg.lstsq(kkt, rhs, rcond=None)[0][:k]
            d -= d.mean()
            if np.max(np.abs(d)) < 1e-15:
                break
            neg = d < 0
            alpha_max = 1.0
            if np.any(neg):
                alpha_max = min(1.0, float(np.min(-mu[S][neg] / d[neg])))
            alpha = alpha_max
            accepted = False
            while alpha > 1e-14:
                trial = mu.copy()
                trial[S] = np.clip(mu[S] + alpha * d, 0.0, None)
                if alpha == alpha_max and alpha_max < 1.0:
                    hit = S[neg][np.argmin(-mu[S][neg] / d[neg])]
                    trial[hit] = 0.0
                trial /= trial.sum()
                new = float(np.log(L @ trial).sum())
                if new >= obj - 1e-13 * abs(obj):
                    accepted = True
                    break
                alpha *= 0.5
            if not accepted:
                break
            gain = new - obj
            mu = trial
            if gain < tol * 1e-2 and alpha == 1.0:
                break
        p = L @ mu
        ratio = (L.T @ (1.0 / p)) / n
        outside = (mu == 0) & (ratio > 1.0 + 1e-9)
        if not np.any(outside):
            break
        r = int(np.argmax(np.where(outside, ratio, -np.inf)))
        t = _line_to_vertex(L, mu, r)
        if t <= 0.0:
            t = 1e-8
        mu = (1 - t) * mu
        mu[r] += t
    return mu / mu.sum()


def kkt_ratios(log_l, mu):
    """Average posterior ratio per component; equals one on the support at an optimum."""
    L, _ = _scaled(np.atleast_2d(log_l))
    return (L.T @ (1.0 / (L @ mu))) / L.shape[0]


@dataclass
class ProfiledObjective:
    """Histogram-target criterion in theta, with the weights profiled out.

    Keeps the last inner solution for warm starts.
    """

    panel: object
    grid: np.ndarray = field(default_factory=lambda: FKRB_GRID.copy())
    beta: float = 0.95
    n_max: int | None = None
    inner_tol: float = 1e-10
    mu: np.ndarray | None = None
    evaluations: int = 0

    def __call__(self, theta):
        self.evaluations += 1
        log_l = type_likelihood(self.panel, theta, self.grid, self.beta, self.n_max)
        mu = fkrb_inner(log_l, mu0=self.mu, tol=self.inner_tol)
        self.mu = mu
        return mixture_loglik(log_l, mu)


def fkrb_profiled_loglik(panel, theta, grid=None, beta=0.95, n_max=None, tol=1e-10):
    grid = FKRB_GRID if grid is None else np.asarray(grid, dtype=float)
    if np.any(np.diff(grid) <= 0):
        raise ValueError("histogram grid must be strictly increasing")
    log_l = type_likelihood(panel, theta, grid, beta, n_max)
    return mixture_loglik(log_l, fkrb_inner(log_l, tol=tol))


# --------------------------------------------------------------------------
# EM target


@dataclass
class EmResult:
    theta: np.ndarray
    v: np.ndarray
    mu: np.ndarray
    loglik: float
    iterations: int
    loglik_trace: list
    pct_trace: list
    converged: bool


def _percent_change(old, new):
    denom = np.maximum(np.abs(old), 1e-12)
    return float(np.mean(np.abs(new - old) / denom) * 100.0)


def em_run(
    panel,
    theta_init,
    v_init,
    mu_init,
    stop_pct=0.025,
    beta=0.95,
    n_max=None,
    reparam=None,
    max_outer=5000,
    mstep_maxiter=200,
    mstep_gtol=1e-8,
    analytic_gradient=True,
):
    """EM for the mixture MLE with free support points.

    The M-step maximizes the posterior-weighted log-likelihood in ``(theta,
    v)`` with L-BFGS-B from the incumbent.  With ``reparam`` (a
    :class:`fastddc.constraints.ThetaReparam`) theta is restricted to the
    estimated constraint surface.  Iterates until the mean absolute percent
    change of ``(theta, v, mu[:-1])`` drops below ``stop_pct``.  The M-step
    gradient is analytic unless ``analytic_gradient`` is false.
    """
    v = np.sort(np.asarray(v_init, dtype=float))
    order = np.argsort(np.asarray(v_init, dtype=float))
    mu = np.asarray(mu_init, dtype=float)[order]
    if np.any(mu < 0) or abs(mu.sum() - 1) > 1e-12:
        raise ValueError("mu_init must lie on the simplex")
    R = v.size
    theta = np.asarray(theta_init, dtype=float)
    if reparam is not None:
        free = reparam.to_reduced(theta)
        theta = reparam.to_full(free)
    else:
        free = theta.copy()
    nf = free.size

    def unpack(x):
        th = reparam.to_full(x[:nf]) if reparam is not None else x[:nf]
        return th, x[nf:]

    # theta is affine in the free coordinates
    if reparam is not None:
        origin = reparam.to_full(np.zeros(nf))
        dtheta = np.column_stack([reparam.to_full(e) - origin for e in np.eye(nf)])
    else:
        dtheta = np.eye(nf)

    log_l = type_likelihood(panel, theta, v, beta, n_max)
    ll = mixture_loglik(log_l, mu)
    ll_trace = [ll]
    pct_trace = []
    trace = []
    converged = False
    bounds = [(-BOX, BOX)] * (nf + R)
    it = 0
    for it in range(1, max_outer + 1):
        w = posteriors(log_l, mu)
        mu_new = w.mean(axis=0)

        def q(x):
            th, vv = unpack(x)
            return -float(np.sum(w * type_likelihood(panel, th, vv, beta, n_max)))

        def q_and_grad(x):
            if not analytic_gradient:
                return q(x), gradient(q, x)
            th, vv = unpack(x)
            val, g = weighted_loglik_grad(panel, th, vv, w, beta, n_max)
            return -val, -np.concatenate([dtheta.T @ g[: th.size], g[th.size :]])

        x0 = np.clip(np.concatenate([free, v]), -BOX, BOX)
        q0 = q(x0)
        res = minimize(
            q_and_grad,
            x0,
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            options={"maxiter": mstep_maxiter, "gtol": mstep_gtol, "ftol": 1e-15},
        )
        if not np.all(np.isfinite(res.x)) or not np.isfinite(res.fun):
            trace.append((it, res.message))
            raise EmError(f"M-step failed at iteration {it}: {res.message}", trace)
        x_new = res.x if res.fun <= q0 else x0
        trace.append((it, res.nit, float(res.fun)))
        free_new = x_new[:nf]
        v_new = x_new[nf:]
        order = np.argsort(v_new)
        v_new = v_new[order]
        mu_new = mu_new[order]
        theta_new = reparam.to_full(free_new) if reparam is not None else free_new.copy()

        old = np.concatenate([theta, v, mu[:-1]])
        new = np.concatenate([theta_new, v_new, mu_new[:-1]])
        pct = _percent_change(old, new)
        theta, free, v, mu = theta_new, free_new, v_new, mu_new
        log_l = type_likelihood(panel, theta, v, beta, n_max)
        ll = mixture_loglik(log_l, mu)
        ll_trace.append(ll)
        pct_trace.append(pct)
        if pct < stop_pct:
            converged = True
            break
    return EmResult(
        theta=theta,
        v=v,
        mu=mu,
        loglik=ll,
        iterations=it,
        loglik_trace=ll_trace,
        pct_trace=pct_trace,
        converged=converged,
    )


def em_objective_vector(panel, d_w, R, beta=0.95, n_max=None):
    """Mixture log-likelihood over the stacked vector ``(theta, v, zeta)``.

    ``zeta`` holds log-ratios ``log(mu_r / mu_1)`` for ``r >= 2`` so every
    point maps to the simplex interior.
    """

    def f(x):
        x = np.asarray(x, dtype=float)
        theta = x[: d_w + 2]
        v = x[d_w + 2 : d_w + 2 + R]
        mu = zeta_to_mu(x[d_w + 2 + R :])
        return mixture_loglik(type_likelihood(panel, theta, v, beta, n_max), mu)

    return f


def zeta_to_mu(zeta):
    z = np.concatenate([[0.0], np.asarray(zeta, dtype=float)])
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()


def mu_to_zeta(mu):
    mu = np.asarray(mu, dtype=float)
    return np.log(mu[1:]) - np.log(mu[0])
