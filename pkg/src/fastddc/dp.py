"""Single-firm entry model: exact dynamic programming, mixture CCPs and panel simulation.

A firm in market ``i`` decides each period whether to open another store.  The
flow payoff of entering at incumbent count ``N`` is

    u - theta_fc * N - theta_ec * 1{N == 0} - eps,      eps ~ N(0, 1)

with ``u = lambda_i + theta_w' W_i`` the market-type index.  Not entering pays
zero.  The incumbent count moves deterministically, ``N' = N + A``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np
from numba import njit

SQRT2 = math.sqrt(2.0)
INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)
CLAMP = 40.0

DEFAULT_TOL = 1e-10
MAX_ITER = 100_000
N_MAX_PAD = 32

DEFAULT_THETA_W = (-0.3, -0.2, -0.1, 0.1, 0.2, 0.3, 0.4, 0.5, -0.6)


class DpError(RuntimeError):
    """Raised when the value recursion fails to converge or produces non-finite iterates."""

    def __init__(self, message, residual=float("nan")):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class EntryModelParams:
    theta_w: tuple
    theta_fc: float
    theta_ec: float
    beta: float
    type_support: tuple
    type_probs: tuple

    def __post_init__(self):
        object.__setattr__(self, "theta_w", tuple(float(x) for x in self.theta_w))
        object.__setattr__(self, "type_support", tuple(float(x) for x in self.type_support))
        object.__setattr__(self, "type_probs", tuple(float(x) for x in self.type_probs))
        if not 0.0 <= self.beta < 1.0:
            raise ValueError(f"beta must lie in [0, 1), got {self.beta}")
        if len(self.type_support) != len(self.type_probs) or not self.type_support:
            raise ValueError("type_support and type_probs must be non-empty and of equal length")
        probs = np.asarray(self.type_probs)
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
            raise ValueError("type_probs must lie on the simplex")
        if np.any(np.diff(self.type_support) <= 0):
            raise ValueError("type_support must be strictly increasing")

    @property
    def d_w(self):
        return len(self.theta_w)

    @property
    def theta(self):
        """Flow-payoff vector ordered (theta_w, theta_fc, theta_ec)."""
        return np.array(self.theta_w + (self.theta_fc, self.theta_ec))

    def to_json(self):
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def default_params():
    """The firm-entry design: nine market covariates, two market types."""
    return EntryModelParams(
        theta_w=DEFAULT_THETA_W,
        theta_fc=0.5,
        theta_ec=0.5,
        beta=0.95,
        type_support=(0.1, 1.0),
        type_probs=(0.37, 0.63),
    )


def default_n_max(T):
    return T + N_MAX_PAD


@dataclass(frozen=True)
class DpSolution:
    u: float
    n_max: int
    value: np.ndarray
    delta: np.ndarray
    ccp: np.ndarray
    residual: float = 0.0
    iterations: int = 0


# --------------------------------------------------------------------------
# numba kernels


@njit(cache=True)
def _cdf(a):
    return 0.5 * math.erfc(-a / SQRT2)


@njit(cache=True)
def _g(a):
    # E[max(0, a - eps)] for standard normal eps
    if a > CLAMP:
        return a
    if a < -CLAMP:
        return 0.0
    return a * _cdf(a) + INV_SQRT2PI * math.exp(-0.5 * a * a)


@njit(cache=True)
def _flow(u, fc, ec, n):
    if n == 0:
        return u - ec
    return u - fc * n


@njit(cache=True)
def _backward_one(u, fc, ec, beta, n_max, value, delta):
    # top state reflects onto itself, so its choice-value difference is the flow payoff
    pi = _flow(u, fc, ec, n_max)
    value[n_max] = _g(pi) / (1.0 - beta)
    delta[n_max] = pi
    slope = 0.0
    for n in range(n_max - 1, -1, -1):
        c = _flow(u, fc, ec, n) + beta * value[n + 1]
        x = value[n + 1] + slope
        # F(x) = (1-beta) x - g(c - beta x) is increasing and concave in x
        for _ in range(200):
            a = c - beta * x
            if a > CLAMP:
                cdf = 1.0
                g = a
            elif a < -CLAMP:
                cdf = 0.0
                g = 0.0
            else:
                cdf = 0.5 * math.erfc(-a / SQRT2)
                g = a * cdf + INV_SQRT2PI * math.exp(-0.5 * a * a)
            F = (1.0 - beta) * x - g
            dF = (1.0 - beta) + beta * cdf
            # Halley step; F'' = -beta^2 phi(a) <= 0
            ddF = -beta * beta * (g - a * cdf)
            step = 2.0 * F * dF / (2.0 * dF * dF - F * ddF)
            x -= step
            # cubic convergence: the error left after a step this small is below rounding
            if abs(step) <= 1e-6 * max(1.0, abs(x)):
                break
        value[n] = x
        delta[n] = c - beta * x
        slope = x - value[n + 1]


@njit(cache=True)
def _backward_batch(u, fc, ec, beta, n_max):
    m = u.shape[0]
    value = np.empty((m, n_max + 1))
    delta = np.empty((m, n_max + 1))
    for j in range(m):
        _backward_one(u[j], fc, ec, beta, n_max, value[j], delta[j])
    return value, delta


@njit(cache=True)
def _bellman(v, u, fc, ec, beta, n_max, out_v, out_d):
    for n in range(n_max + 1):
        nxt = v[n + 1] if n < n_max else v[n_max]
        d = _flow(u, fc, ec, n) + beta * (nxt - v[n])
        out_d[n] = d
        out_v[n] = beta * v[n] + _g(d)


@njit(cache=True)
def _value_iteration(u, fc, ec, beta, n_max, tol, max_iter):
    v = np.zeros(n_max + 1)
    new = np.empty(n_max + 1)
    d = np.empty(n_max + 1)
    resid = np.inf
    it = 0
    while it < max_iter:
        _bellman(v, u, fc, ec, beta, n_max, new, d)
        it += 1
        resid = 0.0
        for n in range(n_max + 1):
            r = abs(new[n] - v[n])
            if not math.isfinite(new[n]):
                return v, d, np.nan, it
            if r > resid:
                resid = r
            v[n] = new[n]
        if resid < tol:
            break
    # choice-value differences consistent with the returned values
    _bellman(v, u, fc, ec, beta, n_max, new, d)
    return v, d, resid, it


# --------------------------------------------------------------------------
# public API


def norm_cdf(x):
    from scipy.special import ndtr

    return ndtr(x)


def _check_dp_args(beta, n_max, tol):
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"beta must lie in [0, 1), got {beta}")
    if tol <= 0:
        raise ValueError("tol must be positive")
    if n_max < 1:
        raise ValueError("n_max must be at least 1")


@lru_cache(maxsize=65536)
def _solve_dp_cached(u, theta_fc, theta_ec, beta, n_max, tol):
    v, d, resid, it = _value_iteration(u, theta_fc, theta_ec, beta, n_max, tol, MAX_ITER)
    if not np.isfinite(resid) or not np.all(np.isfinite(v)):
        raise DpError("non-finite value iterate", residual=resid)
    if resid >= tol:
        raise DpError(f"value iteration did not converge in {MAX_ITER} iterations", residual=resid)
    v.setflags(write=False)
    d.setflags(write=False)
    ccp = norm_cdf(d)
    ccp.setflags(write=False)
    return DpSolution(u=u, n_max=n_max, value=v, delta=d, ccp=ccp, residual=resid, iterations=it)


def solve_dp(u, theta_fc, theta_ec, beta, n_max, tol=DEFAULT_TOL):
    """Solve the entry problem by value iteration from v = 0.

    The returned solution is memoized on its full-precision arguments and its
    arrays are read-only.
    """
    _check_dp_args(beta, n_max, tol)
    return _solve_dp_cached(float(u), float(theta_fc), float(theta_ec), float(beta), int(n_max), float(tol))


def solve_dp_exact(u, theta_fc, theta_ec, beta, n_max):
    """Backward solution of the same fixed point, accurate to rounding.

    Works on a scalar or an array of indices ``u`` and returns ``(value,
    delta)`` with a trailing axis over incumbent counts ``0..n_max``.
    """
    _check_dp_args(beta, n_max, 1.0)
    u = np.asarray(u, dtype=float)
    flat = np.ascontiguousarray(u.ravel())
    if not np.all(np.isfinite(flat)):
        raise DpError("non-finite market index")
    value, delta = _backward_batch(flat, float(theta_fc), float(theta_ec), float(beta), int(n_max))
    if not (np.all(np.isfinite(value)) and np.all(np.isfinite(delta))):
        raise DpError("non-finite value in backward solution")
    shape = u.shape + (n_max + 1,)
    return value.reshape(shape), delta.reshape(shape)


@njit(cache=True)
def _sensitivity_batch(delta, beta):
    # implicit differentiation of (1-beta) V(n) = g(Delta(n)), swept down from the reflecting top state
    m, k = delta.shape
    out = np.empty((m, k, 3))
    for j in range(m):
        dv = np.zeros(3)
        for n in range(k - 1, -1, -1):
            a = delta[j, n]
            if a > CLAMP:
                cdf = 1.0
            elif a < -CLAMP:
                cdf = 0.0
            else:
                cdf = 0.5 * math.erfc(-a / SQRT2)
            top = n == k - 1
            flow = (1.0, 0.0 if n == 0 else -float(n), -1.0 if n == 0 else 0.0)
            for p in range(3):
                if top:
                    dd = flow[p]
                else:
                    dd = (1.0 - beta) * (flow[p] + beta * dv[p]) / (1.0 - beta + beta * cdf)
                out[j, n, p] = dd
                dv[p] = cdf * dd / (1.0 - beta)
    return out


def delta_sensitivities(u, theta_fc, theta_ec, beta, n_max):
    """``delta`` and its derivatives with respect to ``(u, theta_fc, theta_ec)``.

    Returns ``(delta, jac)`` with ``jac.shape == delta.shape + (3,)``.
    """
    _, delta = solve_dp_exact(u, theta_fc, theta_ec, beta, n_max)
    flat = np.ascontiguousarray(delta.reshape(-1, n_max + 1))
    jac = _sensitivity_batch(flat, float(beta))
    return delta, jac.reshape(delta.shape + (3,))


def backward_induction(u, theta_fc, theta_ec, beta, n_max, horizon=500):
    """Finite-horizon values after ``horizon`` Bellman steps from zero (first-period CCPs).

    Kept deliberately naive; used as an independent check of the stationary solution.
    """
    v = np.zeros(n_max + 1)
    n = np.arange(n_max + 1)
    flow = u - theta_fc * n - theta_ec * (n == 0)
    d = flow.copy()
    for _ in range(horizon):
        nxt = np.append(v[1:], v[-1])
        d = flow + beta * (nxt - v)
        v = beta * v + d * norm_cdf(d) + np.exp(-0.5 * d * d) / math.sqrt(2 * math.pi)
    return norm_cdf(d)


def ccp_mixture(w, n, params, n_max, tol=DEFAULT_TOL):
    """Entry probability at observable state (w, n), integrating over market types."""
    if n > n_max:
        raise ValueError(f"incumbent count {n} exceeds n_max={n_max}")
    index = float(np.dot(params.theta_w, np.asarray(w, dtype=float)))
    total = 0.0
    for v_r, mu_r in zip(params.type_support, params.type_probs):
        sol = solve_dp(v_r + index, params.theta_fc, params.theta_ec, params.beta, n_max, tol)
        total += mu_r * sol.ccp[n]
    return total


def type_ccps(index, params, n_max):
    """Type-specific CCP tables for an array of market indices, shape ``index.shape + (R, n_max+1)``."""
    index = np.asarray(index, dtype=float)
    u = index[..., None] + np.asarray(params.type_support)
    _, delta = solve_dp_exact(u, params.theta_fc, params.theta_ec, params.beta, n_max)
    return norm_cdf(delta)


# --------------------------------------------------------------------------
# panel data


@dataclass(frozen=True, eq=False)
class Panel:
    W: np.ndarray
    N: np.ndarray
    A: np.ndarray
    types: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        W = np.atleast_2d(np.asarray(self.W, dtype=float))
        N = np.asarray(self.N, dtype=np.int64)
        A = np.asarray(self.A, dtype=np.int64)
        if N.shape != A.shape or N.shape[0] != W.shape[0]:
            raise ValueError("W, N and A must agree on the market dimension")
        if np.any(N[:, 0] != 0):
            raise ValueError("incumbent count must start at zero")
        if np.any(N[:, 1:] != N[:, :-1] + A[:, :-1]):
            raise ValueError("incumbent counts violate N[t+1] = N[t] + A[t]")
        if not np.isin(A, (0, 1)).all():
            raise ValueError("entry decisions must be binary")
        for name, arr in (("W", W), ("N", N), ("A", A)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __eq__(self, other):
        if not isinstance(other, Panel):
            return NotImplemented
        return all(np.array_equal(getattr(self, k), getattr(other, k)) for k in ("W", "N", "A"))

    __hash__ = None

    @property
    def n(self):
        return self.N.shape[0]

    @property
    def T(self):
        return self.N.shape[1]

    @property
    def d_w(self):
        return self.W.shape[1]

    def subset(self, rows):
        rows = np.asarray(rows)
        types = None if self.types is None else self.types[rows]
        return Panel(self.W[rows], self.N[rows], self.A[rows], types)

    def to_csv(self, path):
        header = ["market_id", "t"] + [f"w_{k + 1}" for k in range(self.d_w)] + ["N", "A"]
        with open(path, "w") as fh:
            fh.write(",".join(header) + "\n")
            for i in range(self.n):
                w = ",".join(format(x, ".17g") for x in self.W[i])
                for t in range(self.T):
                    fh.write(f"{i},{t + 1},{w},{self.N[i, t]},{self.A[i, t]}\n")

    @classmethod
    def from_csv(cls, path):
        import csv

        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = [r for r in reader if r]
        if header[:2] != ["market_id", "t"] or header[-2:] != ["N", "A"]:
            raise ValueError(f"unexpected panel header: {header}")
        d_w = len(header) - 4
        data = np.array(rows, dtype=float)
        markets = np.unique(data[:, 0].astype(int))
        T = int(data[:, 1].max())
        if data.shape[0] != markets.size * T:
            raise ValueError("panel CSV is not balanced")
        order = np.lexsort((data[:, 1], data[:, 0]))
        data = data[order].reshape(markets.size, T, -1)
        return cls(W=data[:, 0, 2 : 2 + d_w], N=data[:, :, -2].astype(int), A=data[:, :, -1].astype(int))


def market_rng(seed, market):
    """Independent counter-based stream for one market."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(market)])))


def simulate_panel(params, n, T, seed, n_max=None, tol=DEFAULT_TOL):
    """Draw ``n`` markets for ``T`` periods from the entry model.

    Each market uses its own Philox stream keyed on ``(seed, market)``, so a
    market's draws do not depend on how many other markets are simulated.
    """
    if n < 1 or T < 1:
        raise ValueError("n and T must be positive")
    n_max = default_n_max(T) if n_max is None else n_max
    d_w = params.d_w
    W = np.empty((n, d_w))
    types = np.empty(n, dtype=np.int64)
    U = np.empty((n, T))
    cum = np.cumsum(params.type_probs)
    for i in range(n):
        rng = market_rng(seed, i)
        W[i] = rng.random(d_w)
        types[i] = min(int(np.searchsorted(cum, rng.random(), side="right")), len(cum) - 1)
        U[i] = rng.random(T)
    u = np.asarray(params.type_support)[types] + W @ np.asarray(params.theta_w)
    _, delta = solve_dp_exact(u, params.theta_fc, params.theta_ec, params.beta, n_max)
    ccp = norm_cdf(delta)
    N = np.zeros((n, T), dtype=np.int64)
    A = np.zeros((n, T), dtype=np.int64)
    rows = np.arange(n)
    for t in range(T):
        if t > 0:
            N[:, t] = N[:, t - 1] + A[:, t - 1]
        if np.any(N[:, t] > n_max):
            raise DpError("incumbent count exceeded n_max during simulation")
        A[:, t] = U[:, t] < ccp[rows, N[:, t]]
    return Panel(W=W, N=N, A=A, types=types)
