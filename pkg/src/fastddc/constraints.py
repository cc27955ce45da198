"""Index restrictions: estimating the constraint matrix and imposing its nullspace.

Observations are pooled market-periods with covariates ``Z = (W, N)``.  Pairs
of observations with equal incumbent count and (nearly) equal entry
probability differ only in directions orthogonal to the payoff index, so the
kernel-weighted second moment of ``Z1 - Z2`` is annihilated by ``(theta_w, 0)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import qr, solve_triangular, subspace_angles
from scipy.spatial.distance import cdist

from .dp import default_n_max, type_ccps

BLOCK_ENTRIES = 4_000_000


class ConstraintError(RuntimeError):
    pass


def biweight(u):
    u = np.asarray(u, dtype=float)
    return np.where(np.abs(u) <= 1.0, (15.0 / 16.0) * (1.0 - u * u) ** 2, 0.0)


# --------------------------------------------------------------------------
# nearest-neighbour CCPs


def default_k_grid(pooled):
    top = max(1, pooled // 4)
    grid = [1]
    while grid[-1] * 2 <= top:
        grid.append(grid[-1] * 2)
    return grid


@dataclass
class CcpEstimate:
    fitted: np.ndarray
    k: int
    cv_error: dict
    _W: dict = field(repr=False, default_factory=dict)
    _A: dict = field(repr=False, default_factory=dict)

    def predict(self, w, n):
        if n not in self._W:
            raise ConstraintError(f"no pooled observations with incumbent count N={n}")
        Ws, As = self._W[n], self._A[n]
        k = min(self.k, Ws.shape[0])
        d = cdist(np.atleast_2d(np.asarray(w, dtype=float)), Ws)[0]
        idx = np.argsort(d, kind="stable")[:k]
        return float(As[idx].mean())

    def to_csv(self, path, panel):
        with open(path, "w") as fh:
            fh.write("market_id,t,pi_hat\n")
            for i in range(panel.n):
                for t in range(panel.T):
                    fh.write(f"{i},{t + 1},{self.fitted[i * panel.T + t]:.17g}\n")


def pooled(panel):
    """Pooled market-period arrays: W rows, N, A and market ids, in row-major (market, t) order."""
    T = panel.T
    W = np.repeat(panel.W, T, axis=0)
    return W, panel.N.ravel(), panel.A.ravel(), np.repeat(np.arange(panel.n), T)


def _neighbour_means(Wq, Ws, As, kmax, exclude=None):
    """Running means of A over the kmax nearest stratum members, per query row."""
    D = cdist(Wq, Ws)
    if exclude is not None:
        D[np.arange(Wq.shape[0]), exclude] = np.inf
    idx = np.argsort(D, axis=1, kind="stable")[:, :kmax]
    return np.cumsum(As[idx], axis=1) / np.arange(1, kmax + 1)


def knn_ccp(panel, k_grid=None):
    """k-nearest-neighbour entry probabilities within incumbent-count strata.

    k is chosen from ``k_grid`` by leave-one-out squared error over the
    pooled sample.
    """
    W, N, A, _ = pooled(panel)
    P = W.shape[0]
    k_grid = sorted(set(default_k_grid(P) if k_grid is None else k_grid))
    if P < max(k_grid) + 1:
        raise ValueError(f"need at least {max(k_grid) + 1} pooled observations, have {P}")
    strata = {int(s): np.flatnonzero(N == s) for s in np.unique(N)}
    sse = np.zeros(len(k_grid))
    for idx in strata.values():
        M = idx.size
        if M < 2:
            continue
        kmax = min(max(k_grid), M - 1)
        cols = [min(k, kmax) - 1 for k in k_grid]
        step = max(1, BLOCK_ENTRIES // M)
        for lo in range(0, M, step):
            rows = np.arange(lo, min(M, lo + step))
            means = _neighbour_means(W[idx[rows]], W[idx], A[idx].astype(float), kmax, exclude=rows)
            err = (means[:, cols] - A[idx[rows]][:, None]) ** 2
            sse += err.sum(axis=0)
    best = int(np.argmin(sse))
    k = k_grid[best]
    fitted = np.empty(P)
    for idx in strata.values():
        M = idx.size
        kk = min(k, M)
        step = max(1, BLOCK_ENTRIES // M)
        for lo in range(0, M, step):
            rows = np.arange(lo, min(M, lo + step))
            fitted[idx[rows]] = _neighbour_means(W[idx[rows]], W[idx], A[idx].astype(float), kk)[:, -1]
    est = CcpEstimate(fitted=fitted, k=k, cv_error=dict(zip(k_grid, (sse / P).tolist())))
    for s, idx in strata.items():
        est._W[s] = W[idx]
        est._A[s] = A[idx].astype(float)
    return est


# --------------------------------------------------------------------------
# constraint matrix


def rot_bandwidth(n, T):
    if n < 2 or T < 2:
        raise ValueError("rule-of-thumb bandwidth needs n >= 2 and T >= 2")
    return 1.06 * (n * (n - 1) * T * (T - 1)) ** (-0.2)


@dataclass
class SigmaMatrix:
    m: np.ndarray
    kind: str = "tilde"
    rank: int | None = None
    eigenvalues: np.ndarray = None
    eigenvectors: np.ndarray = None
    pairs: int | None = None

    def __post_init__(self):
        self.m = np.asarray(self.m, dtype=float)
        if self.eigenvalues is None:
            vals, vecs = np.linalg.eigh(0.5 * (self.m + self.m.T))
            order = np.argsort(vals)[::-1]
            self.eigenvalues = vals[order]
            self.eigenvectors = vecs[:, order]

    @property
    def d(self):
        return self.m.shape[0]

    def block(self, idx):
        idx = np.asarray(idx)
        return SigmaMatrix(self.m[np.ix_(idx, idx)], kind=self.kind, pairs=self.pairs)

    def to_json(self):
        return json.dumps(
            {
                "kind": self.kind,
                "rank": self.rank,
                "m": self.m.tolist(),
                "eigenvalues": self.eigenvalues.tolist(),
            }
        )

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        s = cls(np.array(d["m"]), kind=d["kind"], rank=d["rank"])
        if d["kind"] == "hat":
            # keep the exact zeros of the truncated spectrum
            s.eigenvalues = np.array(d["eigenvalues"])
        return s


def _pair_difference_sd(p, groups):
    """Sum of squared differences and count over ordered pairs from distinct groups."""
    tot = 2 * p.size * np.sum(p**2) - 2 * p.sum() ** 2
    count = p.size**2
    _, g = np.unique(groups, return_inverse=True)
    m = np.bincount(g)
    s1 = np.bincount(g, weights=p)
    s2 = np.bincount(g, weights=p**2)
    tot -= np.sum(2 * m * s2 - 2 * s1**2)
    count -= int(np.sum(m**2))
    return tot, count


def sigma_tilde_arrays(Z, pi_hat, strata, groups, h, kernel=biweight):
    """Kernel-weighted mean of (Z1 - Z2)(Z1 - Z2)' over cross-group pairs matched on stratum."""
    if h <= 0:
        raise ValueError("bandwidth must be positive")
    Z = np.asarray(Z, dtype=float)
    pi_hat = np.asarray(pi_hat, dtype=float)
    strata = np.asarray(strata)
    groups = np.asarray(groups)
    d = Z.shape[1]
    members = [np.flatnonzero(strata == s) for s in np.unique(strata)]
    members = [m for m in members if m.size > 1]

    ss, cnt = 0.0, 0
    for idx in members:
        a, b = _pair_difference_sd(pi_hat[idx], groups[idx])
        ss += a
        cnt += b
    sd = math.sqrt(ss / (cnt - 1)) if cnt > 1 else 0.0
    scale = sd * h if sd > 0 else h

    num = np.zeros((d, d))
    mass = 0.0
    n_pairs = 0
    for idx in members:
        Zs = Z[idx] - Z[idx].mean(axis=0)
        ps = pi_hat[idx]
        gs = groups[idx]
        M = idx.size
        step = max(1, BLOCK_ENTRIES // M)
        for lo in range(0, M, step):
            rows = slice(lo, min(M, lo + step))
            K = kernel((ps[rows, None] - ps[None, :]) / scale)
            K[gs[rows, None] == gs[None, :]] = 0.0
            rowsum = K.sum(axis=1)
            ZB = Zs[rows]
            num += (ZB * rowsum[:, None]).T @ ZB - ZB.T @ (K @ Zs)
            mass += rowsum.sum()
            n_pairs += int(np.count_nonzero(K))
    if mass <= 0:
        raise ConstraintError("kernel weights sum to zero; increase the bandwidth")
    m = 2.0 * num / mass
    return SigmaMatrix(0.5 * (m + m.T), kind="tilde", pairs=n_pairs)


def sigma_tilde(panel, ccp, h):
    """Constraint-matrix estimate on the pooled panel with Z = (W, N), N matched exactly."""
    W, N, _, market = pooled(panel)
    Z = np.column_stack([W, N.astype(float)])
    return sigma_tilde_arrays(Z, ccp.fitted, N, market, h)


def low_rank(sigma, threshold=None, rank=None):
    """Eigenvalue-truncated reconstruction; give exactly one of ``threshold`` or ``rank``."""
    if (threshold is None) == (rank is None):
        raise ValueError("specify exactly one of threshold or rank")
    vals = sigma.eigenvalues.copy()
    vecs = sigma.eigenvectors
    if rank is not None:
        if rank > sigma.d or rank < 0:
            raise ValueError(f"rank {rank} outside [0, {sigma.d}]")
        vals[rank:] = 0.0
    else:
        vals[vals <= threshold] = 0.0
    r = int(np.count_nonzero(vals))
    m = (vecs * vals) @ vecs.T
    return SigmaMatrix(0.5 * (m + m.T), kind="hat", rank=r, eigenvalues=vals, eigenvectors=vecs, pairs=sigma.pairs)


# --------------------------------------------------------------------------
# reparameterization


def _canonical_signs(B):
    for j in range(B.shape[1]):
        k = np.argmax(np.abs(B[:, j]))
        if B[k, j] < 0:
            B[:, j] = -B[:, j]
    return B


@dataclass
class ReparamMap:
    """Orthonormal basis of the feasible subspace for the constrained block of gamma."""

    basis: np.ndarray
    layout: np.ndarray
    d: int

    @property
    def q(self):
        return self.basis.shape[1]

    def embed(self, eta):
        return self.basis @ np.asarray(eta, dtype=float)

    def project(self, gamma):
        return self.basis.T @ np.asarray(gamma, dtype=float)

    def full_gamma(self, eta):
        """Embed into all ``d`` coordinates, structurally-zero ones left at zero."""
        g = np.zeros(self.d)
        g[self.layout] = self.embed(eta)
        return g


def reparam(sigma_hat, layout=None, tol=1e-8):
    """Basis of {x : sigma_hat @ P x = 0}, P placing x at the ``layout`` coordinates.

    Built from the eigenvectors of sigma_hat with non-zero eigenvalues.
    """
    d = sigma_hat.d
    layout = np.arange(d) if layout is None else np.asarray(layout)
    r = sigma_hat.rank if sigma_hat.rank is not None else int(np.count_nonzero(sigma_hat.eigenvalues))
    U = sigma_hat.eigenvectors[:, :r][layout]
    left, s, _ = np.linalg.svd(U, full_matrices=True)
    eff = int(np.sum(s > tol * max(1.0, s.max(initial=0.0))))
    B = left[:, eff:]
    if B.shape[1] == 0:
        raise ConstraintError("constraints leave no free directions")
    return ReparamMap(basis=_canonical_signs(B.copy()), layout=layout, d=d)


def qr_reparam(sigma_hat, layout=None, tol=1e-10):
    """Same subspace from a column-pivoted QR of sigma_hat restricted to the layout columns.

    Solves the pivoted system for the dependent coordinates in terms of the
    free ones, ``x_dep = -R11^{-1} R12 x_free``, then orthonormalizes.
    """
    d = sigma_hat.d
    layout = np.arange(d) if layout is None else np.asarray(layout)
    S = sigma_hat.m[:, layout]
    k = S.shape[1]
    _, R, piv = qr(S, pivoting=True, mode="economic")
    diag = np.abs(np.diag(R))
    r = int(np.sum(diag > tol * max(diag.max(initial=0.0), 1e-300))) if diag.size else 0
    if r == k:
        raise ConstraintError("constraints leave no free directions")
    X = np.zeros((k, k - r))
    if r:
        X[:r] = -solve_triangular(R[:r, :r], R[:r, r:k])
    X[r:] = np.eye(k - r)
    B = np.zeros_like(X)
    B[piv] = X
    Q, _ = np.linalg.qr(B)
    return ReparamMap(basis=_canonical_signs(Q), layout=layout, d=d)


def principal_angles(a, b):
    return subspace_angles(a.basis, b.basis)


@dataclass
class ThetaReparam:
    """Map between reduced coordinates (eta, unconstrained theta entries) and full theta.

    ``constrained`` lists the theta indices entering the payoff index
    (theta_w); the remaining indices stay free.
    """

    rmap: ReparamMap
    constrained: np.ndarray
    dim_theta: int

    @property
    def free(self):
        return np.setdiff1d(np.arange(self.dim_theta), self.constrained)

    @property
    def dim(self):
        return self.rmap.q + self.free.size

    def to_full(self, x):
        x = np.asarray(x, dtype=float)
        theta = np.empty(self.dim_theta)
        theta[self.constrained] = self.rmap.embed(x[: self.rmap.q])
        theta[self.free] = x[self.rmap.q :]
        return theta

    def to_reduced(self, theta):
        """Orthogonal projection onto the constraint surface, in reduced coordinates."""
        theta = np.asarray(theta, dtype=float)
        return np.concatenate([self.rmap.project(theta[self.constrained]), theta[self.free]])


def theta_reparam(rmap, d_w):
    return ThetaReparam(rmap=rmap, constrained=np.arange(d_w), dim_theta=d_w + 2)


# --------------------------------------------------------------------------
# Monte Carlo oracle for the population constraint matrix


def oracle_sigma(params, m_pairs, eps_pi, seed, T=8, n_max=None, chunk=50_000):
    """Rejection estimate of E[(Z1-Z2)(Z1-Z2)' | N1 = N2, Pi(Z1) = Pi(Z2)].

    Observations are market-periods drawn from the model (uniform period,
    simulated incumbent path); Pi is the type-mixed model CCP.
    """
    if eps_pi <= 0:
        raise ValueError("eps_pi must be positive")
    n_max = default_n_max(T) if n_max is None else n_max
    rng = np.random.default_rng(seed)
    d_w = params.d_w
    theta_w = np.asarray(params.theta_w)
    probs = np.asarray(params.type_probs)
    cum = np.cumsum(probs)
    total = np.zeros((d_w + 1, d_w + 1))
    accepted = 0
    done = 0
    while done < m_pairs:
        m = min(chunk, m_pairs - done)
        k = 2 * m
        W = rng.random((k, d_w))
        types = np.minimum(np.searchsorted(cum, rng.random(k), side="right"), len(cum) - 1)
        t_obs = rng.integers(0, T, size=k)
        U = rng.random((k, T))
        ccp = type_ccps(W @ theta_w, params, n_max)
        rows = np.arange(k)
        own = ccp[rows, types]
        N = np.zeros(k, dtype=np.int64)
        for t in range(T - 1):
            step = U[:, t] < own[rows, N]
            N = np.where(t < t_obs, N + step, N)
        pi = np.einsum("kr,kr->k", ccp[rows, :, N], np.broadcast_to(probs, (k, probs.size)))
        Z = np.column_stack([W, N.astype(float)])
        z1, z2 = Z[0::2], Z[1::2]
        keep = (N[0::2] == N[1::2]) & (np.abs(pi[0::2] - pi[1::2]) <= eps_pi)
        diff = z1[keep] - z2[keep]
        total += diff.T @ diff
        accepted += int(keep.sum())
        done += m
    if accepted < 100:
        raise ConstraintError(f"only {accepted} pairs accepted; increase m_pairs or eps_pi")
    return SigmaMatrix(total / accepted, kind="tilde", pairs=accepted)


def annihilation_ratio(sigma, gamma):
    gamma = np.asarray(gamma, dtype=float)
    return float(np.linalg.norm(sigma.m @ gamma) / (np.linalg.norm(sigma.m, 2) * np.linalg.norm(gamma)))


def principal_angle_deg(u, v):
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    c = abs(u @ v) / (np.linalg.norm(u) * np.linalg.norm(v))
    return float(np.degrees(np.arccos(min(1.0, c))))
