"""Two-step estimation: constrained multi-start search, then Newton-Raphson polishing.

Two target criteria are supported:

``H``
    histogram mixture over a fixed grid of type locations, weights profiled
    out (criterion is a function of theta alone);
``EM``
    two-point mixture with free locations and weights, fitted by EM.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import minimize

from .constraints import (
    SigmaMatrix,
    knn_ccp,
    low_rank,
    reparam,
    rot_bandwidth,
    sigma_tilde,
    theta_reparam,
)
from .dp import DpError
from .likelihood import (
    BOX,
    FKRB_GRID,
    ProfiledObjective,
    em_objective_vector,
    em_run,
    mixture_loglik,
    mu_to_zeta,
    type_likelihood,
    zeta_to_mu,
)
from .numdiff import DerivativeError, gradient, hessian

log = logging.getLogger(__name__)

TARGETS = ("H", "EM")
GRID_HALF_WIDTH = 5


class EstimationError(RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or []


@dataclass
class EstimatorConfig:
    target: str = "H"
    L: int = 20
    delta_grid: float = 1.0
    starts_multiplier: int = 2
    box: float = BOX
    seed: int = 0
    beta: float = 0.95
    n_max: int | None = None
    fkrb_grid: tuple = tuple(FKRB_GRID)
    em_R: int = 2
    em_stop_pct: float = 0.025
    opt_maxfun: int = 500
    opt_gtol: float = 1e-8
    opt_ftol: float = 0.0
    pseudo_starts: int = 5
    pseudo_start_box: float = 1.0
    sigma_rank_deficiency: int = 2
    use_constraints: bool = True
    k_grid: tuple | None = None
    newton_retries: int = 20
    newton_perturb: float = 0.01
    inner_tol: float = 1e-12
    compute_target: bool = True

    def __post_init__(self):
        self.target = self.target.upper()
        if self.target not in TARGETS:
            raise ValueError(f"target must be one of {TARGETS}")
        if self.L < 1:
            raise ValueError("L must be at least 1")
        if self.delta_grid <= 0:
            raise ValueError("delta_grid must be positive")

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "fkrb_grid" in known:
            known["fkrb_grid"] = tuple(known["fkrb_grid"])
        return cls(**known)


def _rng(seed, *stream):
    return np.random.default_rng(np.random.SeedSequence([int(seed), *stream]))


# --------------------------------------------------------------------------
# local optimizer


@dataclass
class LocalResult:
    x: np.ndarray
    value: float
    seconds: float
    nfev: int
    message: str
    extra: dict = field(default_factory=dict)


def local_maximize(f, x0, box, maxfun=500, gtol=1e-8, ftol=0.0):
    """Bounded L-BFGS-B on -f with central-difference gradients."""
    t0 = time.perf_counter()
    calls = [0]

    def safe(x):
        try:
            val = f(x)
        except (DpError, FloatingPointError, ValueError):
            return -np.inf
        return val

    def fg(x):
        calls[0] += 1
        val = safe(x)
        if not np.isfinite(val):
            return 1e20, np.zeros_like(x)
        try:
            g = gradient(safe, x)
        except DerivativeError:
            return 1e20, np.zeros_like(x)
        return -val, -g

    x0 = np.clip(np.asarray(x0, dtype=float), -box, box)
    res = minimize(
        fg,
        x0,
        jac=True,
        method="L-BFGS-B",
        bounds=[(-box, box)] * x0.size,
        options={"maxfun": maxfun, "maxiter": maxfun, "gtol": gtol, "ftol": ftol},
    )
    value = safe(res.x)
    return LocalResult(
        x=res.x, value=value, seconds=time.perf_counter() - t0, nfev=calls[0], message=str(res.message)
    )


# --------------------------------------------------------------------------
# starting values


def pseudo_mle(panel, config=None, seed=None):
    """Degenerate-type MLE over (theta, v), best of several random L-BFGS-B starts.

    Returns ``(theta_hat, v_hat)``.
    """
    config = EstimatorConfig() if config is None else config
    seed = config.seed if seed is None else seed
    d = panel.d_w + 2
    rng = _rng(seed, 1)

    def f(x):
        return float(type_likelihood(panel, x[:d], x[d:], config.beta, config.n_max).sum())

    best = None
    fails = []
    for _ in range(config.pseudo_starts):
        x0 = rng.uniform(-config.pseudo_start_box, config.pseudo_start_box, d + 1)
        r = local_maximize(f, x0, config.box, config.opt_maxfun, config.opt_gtol, config.opt_ftol)
        if not np.isfinite(r.value):
            fails.append(r.message)
            continue
        if best is None or r.value > best.value:
            best = r
    if best is None:
        raise EstimationError("pseudo-MLE failed from every start", fails)
    return best.x[:d], float(best.x[d])


def make_starts(center, D, config, seed, stream=2):
    """``multiplier * D`` distinct grid vertices around ``center`` plus the center itself.

    The grid has 11 points per coordinate, ``center +/- k * delta_grid`` for
    ``k = 0..5``.
    """
    center = np.asarray(center, dtype=float)
    if center.size != D:
        raise ValueError(f"center has length {center.size}, expected D={D}")
    rng = _rng(seed, stream, D)
    width = 2 * GRID_HALF_WIDTH + 1
    need = config.starts_multiplier * D
    if need > width**D - 1:
        raise ValueError("grid too small for the requested number of starts")
    seen = {(0,) * D}
    offsets = []
    while len(offsets) < need:
        o = tuple(int(k) for k in rng.integers(-GRID_HALF_WIDTH, GRID_HALF_WIDTH + 1, size=D))
        if o not in seen:
            seen.add(o)
            offsets.append(o)
    starts = [center + config.delta_grid * np.array(o, dtype=float) for o in offsets]
    starts.append(center.copy())
    return starts


# --------------------------------------------------------------------------
# target criteria


def h_objective(panel, config):
    return ProfiledObjective(
        panel, grid=np.asarray(config.fkrb_grid), beta=config.beta, n_max=config.n_max, inner_tol=config.inner_tol
    )


def em_vector_objective(panel, config):
    return em_objective_vector(panel, panel.d_w, config.em_R, config.beta, config.n_max)


def em_initial_support(v_hat, R):
    if R == 1:
        return np.array([v_hat])
    if R == 2:
        return np.array([v_hat - 0.5, v_hat + 0.5])
    return v_hat + np.linspace(-0.5, 0.5, R)


@dataclass
class MultiStartResult:
    theta: np.ndarray
    value: float
    nuisance: dict
    per_start: list


def _multistart(panel, config, starts, v_hat, tmap=None):
    """Run the target's local search from each start (reduced coordinates when ``tmap`` is given)."""
    to_full = tmap.to_full if tmap is not None else (lambda x: np.asarray(x, dtype=float))
    per = []
    best = None
    for k, x0 in enumerate(starts):
        t0 = time.perf_counter()
        try:
            if config.target == "H":
                obj = h_objective(panel, config)
                r = local_maximize(lambda x: obj(to_full(x)), x0, config.box, config.opt_maxfun, config.opt_gtol, config.opt_ftol)
                theta, value, nuis = to_full(r.x), r.value, {"mu": obj.mu.tolist() if obj.mu is not None else None}
                info = {"nfev": r.nfev, "message": r.message}
            else:
                R = config.em_R
                em = em_run(
                    panel,
                    to_full(x0),
                    em_initial_support(v_hat, R),
                    np.full(R, 1.0 / R),
                    stop_pct=config.em_stop_pct,
                    beta=config.beta,
                    n_max=config.n_max,
                    reparam=tmap,
                )
                theta, value = em.theta, em.loglik
                nuis = {"v": em.v.tolist(), "mu": em.mu.tolist()}
                info = {"iterations": em.iterations, "converged": em.converged}
        except Exception as exc:  # a failed start is recorded, not fatal
            per.append({"start": k, "error": repr(exc), "seconds": time.perf_counter() - t0})
            continue
        rec = {"start": k, "value": value, "seconds": time.perf_counter() - t0, **info}
        per.append(rec)
        if np.isfinite(value) and (best is None or value > best[1]):
            best = (theta, value, nuis)
    if best is None:
        raise EstimationError("every initialization failed", per)
    return MultiStartResult(theta=best[0], value=best[1], nuisance=best[2], per_start=per)


def step1_constrained(panel, config, tmap, starts, v_hat=0.0):
    """Best local maximizer of the target criterion on the constraint surface."""
    return _multistart(panel, config, starts, v_hat, tmap)


def target_unconstrained(panel, config, starts, v_hat=0.0):
    """Best local maximizer of the target criterion over the full parameter space."""
    return _multistart(panel, config, starts, v_hat, None)


# --------------------------------------------------------------------------
# Newton polishing


@dataclass
class NewtonResult:
    x: np.ndarray
    value: float
    trace: list
    retries: int
    damped: int


def _newton_direction(g, H):
    """Newton step for a maximum, with a Levenberg ridge when H is not safely negative definite."""
    norm = np.linalg.norm(H, 2)
    vals, vecs = np.linalg.eigh(H)
    damped = False
    if vals.max() > -1e-10 * norm:
        # shift by twice the largest eigenvalue so every direction has curvature of the right sign
        vals = vals - (2.0 * max(vals.max(), 0.0) + 1e-8 * norm)
        damped = True
    step = -(vecs @ ((vecs.T @ g) / vals))
    return step, damped


def step2_newton(objective, x_start, L, box=BOX, retries=20, perturb=0.01, seed=0, derivatives=None):
    """``L`` Newton-Raphson iterates ``x <- x - H(x)^{-1} g(x)`` on ``objective``.

    An iterate that leaves the box or makes the objective non-finite restarts
    the sequence from a uniformly perturbed start. ``derivatives(x)``, when
    given, returns analytic ``(g, H)``; otherwise finite differences are used.
    """
    rng = _rng(seed, 3)
    x_start = np.asarray(x_start, dtype=float)
    for attempt in range(retries + 1):
        x = x_start if attempt == 0 else x_start + rng.uniform(-perturb, perturb, x_start.size)
        trace = []
        damped = 0
        ok = True
        for _ in range(L):
            try:
                f0 = float(objective(x))
                if not np.isfinite(f0):
                    ok = False
                    break
                if derivatives is None:
                    g = gradient(objective, x)
                    H = hessian(objective, x, f0=f0)
                else:
                    g, H = (np.asarray(a, dtype=float) for a in derivatives(x))
            except (DerivativeError, DpError, FloatingPointError, ValueError):
                ok = False
                break
            if not (np.all(np.isfinite(g)) and np.all(np.isfinite(H))):
                ok = False
                break
            step, was_damped = _newton_direction(g, H)
            damped += was_damped
            x_new = x + step
            trace.append({"value": f0, "step_norm": float(np.linalg.norm(step)), "damped": bool(was_damped)})
            if not np.all(np.isfinite(x_new)) or np.any(np.abs(x_new) > box):
                ok = False
                break
            x = x_new
        if ok:
            try:
                value = float(objective(x))
            except (DpError, ValueError):
                value = np.nan
            if np.isfinite(value):
                return NewtonResult(x=x, value=value, trace=trace, retries=attempt, damped=damped)
        log.info("Newton iterates left the admissible region (attempt %d); perturbing the start", attempt)
    raise EstimationError(f"Newton polishing failed after {retries} retries")


# --------------------------------------------------------------------------
# pipeline


@dataclass
class EstimateResult:
    target: str
    theta_tilde: list
    theta_hat: list
    theta_star: list | None
    nuisance: dict
    loglik: dict
    wall_clock: dict
    per_init_seconds: dict
    newton_trace: list
    retry_count: int
    search_dim: dict
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1)


def constraint_pipeline(panel, config):
    """kNN CCPs -> kernel constraint matrix -> low-rank truncation -> reparameterization."""
    d = panel.d_w + 1
    if config.use_constraints:
        ccp = knn_ccp(panel, config.k_grid)
        h = rot_bandwidth(panel.n, panel.T)
        s_tilde = sigma_tilde(panel, ccp, h)
        s_hat = low_rank(s_tilde, rank=d - config.sigma_rank_deficiency)
        info = {"k": ccp.k, "bandwidth": h, "eigenvalues": s_tilde.eigenvalues.tolist(), "rank": s_hat.rank}
    else:
        s_hat = low_rank(SigmaMatrix(np.zeros((d, d))), rank=0)
        info = {"rank": 0}
    rmap = reparam(s_hat, layout=np.arange(panel.d_w))
    info["basis"] = rmap.basis.tolist()
    return theta_reparam(rmap, panel.d_w), s_hat, info


def _polish(panel, config, theta_tilde, nuisance):
    if config.target == "H":
        obj = h_objective(panel, config)
        res = step2_newton(obj, theta_tilde, config.L, config.box, config.newton_retries, config.newton_perturb, config.seed)
        return res, res.x, {"mu": obj.mu.tolist() if obj.mu is not None else None}
    d = panel.d_w + 2
    R = config.em_R
    obj = em_vector_objective(panel, config)
    x0 = np.concatenate([theta_tilde, nuisance["v"], mu_to_zeta(np.clip(nuisance["mu"], 1e-12, None))])
    res = step2_newton(obj, x0, config.L, config.box, config.newton_retries, config.newton_perturb, config.seed)
    nuis = {"v": res.x[d : d + R].tolist(), "mu": zeta_to_mu(res.x[d + R :]).tolist()}
    return res, res.x[:d], nuis


def criterion(panel, config, theta, nuisance=None):
    """Target criterion at theta (profiled for H; at the given v, mu for EM)."""
    if config.target == "H":
        return h_objective(panel, config)(theta)
    return mixture_loglik(type_likelihood(panel, theta, nuisance["v"], config.beta, config.n_max), nuisance["mu"])


def fast_estimate(panel, config):
    """Full pipeline for one panel: constraints, pseudo-MLE, step 1, step 2, optional target."""
    timers = {}
    t0 = time.perf_counter()
    try:
        tmap, s_hat, cinfo = constraint_pipeline(panel, config)
    except Exception as exc:
        raise EstimationError(f"constraint estimation: {exc}") from exc
    timers["constraints"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    try:
        e_hat, v_hat = pseudo_mle(panel, config)
    except Exception as exc:
        raise EstimationError(f"pseudo-MLE: {exc}") from exc
    timers["pseudo_mle"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    center = tmap.to_reduced(e_hat)
    starts = make_starts(center, tmap.dim, config, config.seed, stream=2)
    try:
        s1 = step1_constrained(panel, config, tmap, starts, v_hat)
    except Exception as exc:
        raise EstimationError(f"step 1: {exc}") from exc
    timers["step1"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    try:
        newton, theta_hat, nuis_hat = _polish(panel, config, s1.theta, s1.nuisance)
    except Exception as exc:
        raise EstimationError(f"step 2: {exc}") from exc
    timers["step2"] = time.perf_counter() - t0

    loglik = {
        "theta_tilde": s1.value,
        "theta_hat": newton.value,
    }
    theta_star = None
    star_per = []
    nuisance = {"theta_tilde": s1.nuisance, "theta_hat": nuis_hat}
    if config.compute_target:
        t0 = time.perf_counter()
        starts_star = make_starts(e_hat, e_hat.size, config, config.seed, stream=4)
        try:
            star = target_unconstrained(panel, config, starts_star, v_hat)
        except Exception as exc:
            raise EstimationError(f"target estimator: {exc}") from exc
        timers["target"] = time.perf_counter() - t0
        theta_star = star.theta.tolist()
        loglik["theta_star"] = star.value
        nuisance["theta_star"] = star.nuisance
        star_per = star.per_start

    wall = {
        "constraints": timers["constraints"],
        "pseudo_mle": timers["pseudo_mle"],
        "step1": timers["step1"],
        "step2": timers["step2"],
        "theta_tilde": timers["constraints"] + timers["pseudo_mle"] + timers["step1"],
    }
    wall["theta_hat"] = wall["theta_tilde"] + timers["step2"]
    if config.compute_target:
        wall["target"] = timers["target"]
        wall["theta_star"] = timers["pseudo_mle"] + timers["target"]
    return EstimateResult(
        target=config.target,
        theta_tilde=np.asarray(s1.theta).tolist(),
        theta_hat=np.asarray(theta_hat).tolist(),
        theta_star=theta_star,
        nuisance=nuisance,
        loglik=loglik,
        wall_clock=wall,
        per_init_seconds={
            "theta_tilde": [p["seconds"] for p in s1.per_start],
            "theta_star": [p["seconds"] for p in star_per],
        },
        newton_trace=newton.trace,
        retry_count=newton.retries,
        search_dim={"constrained": tmap.dim, "unconstrained": panel.d_w + 2, "nullity": tmap.rmap.q},
        diagnostics={
            "pseudo_mle": {"theta": e_hat.tolist(), "v": v_hat},
            "constraints": cinfo,
            "step1_starts": s1.per_start,
            "target_starts": star_per,
            "newton_damped": newton.damped,
        },
    )
