"""Finite-difference derivatives for scalar objectives."""

import numpy as np

EPS = np.finfo(float).eps
GRAD_STEP = EPS ** (1.0 / 3.0)
HESS_STEP = EPS ** 0.25
RICHARDSON_STEP = EPS ** 0.2


class DerivativeError(RuntimeError):
    pass


class CountingObjective:
    """Wrap an objective and count its evaluations."""

    def __init__(self, fun):
        self.fun = fun
        self.count = 0

    def __call__(self, x):
        self.count += 1
        return self.fun(x)


def _steps(x, base):
    return base * np.maximum(1.0, np.abs(x))


def _eval(f, x):
    val = f(x)
    return float(val)


def _central(f, x, h):
    g = np.empty(x.size)
    for k in range(x.size):
        e = np.zeros(x.size)
        e[k] = h[k]
        fp, fm = _eval(f, x + e), _eval(f, x - e)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            e[k] = h[k] / 2
            fp, fm = _eval(f, x + e), _eval(f, x - e)
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise DerivativeError(f"objective not finite around coordinate {k}")
            g[k] = (fp - fm) / h[k]
        else:
            g[k] = (fp - fm) / (2 * h[k])
    return g


def gradient(f, x, scheme="central"):
    """Numerical gradient.

    ``central`` uses steps ``cbrt(eps) * max(1, |x_k|)``; ``richardson``
    extrapolates two central differences and serves as an independent
    cross-check.
    """
    x = np.asarray(x, dtype=float)
    if scheme == "central":
        return _central(f, x, _steps(x, GRAD_STEP))
    if scheme == "richardson":
        h = _steps(x, RICHARDSON_STEP)
        return (4.0 * _central(f, x, h / 2) - _central(f, x, h)) / 3.0
    raise ValueError(f"unknown scheme {scheme!r}")


def hessian(f, x, scheme="central", f0=None):
    """Central second differences, symmetrized.

    Cross terms use ``f(x +/- (h_k e_k + h_l e_l))`` together with the axis
    points already needed for the diagonal, so a d-dimensional Hessian costs
    ``d * (d + 1)`` evaluations beyond ``f0``; the formula is second-order
    accurate and exact for quadratics.
    """
    if scheme != "central":
        raise ValueError(f"unknown scheme {scheme!r}")
    x = np.asarray(x, dtype=float)
    d = x.size
    f0 = _eval(f, x) if f0 is None else f0
    if not np.isfinite(f0):
        raise DerivativeError("objective not finite at the expansion point")
    for attempt in range(2):
        h = _steps(x, HESS_STEP) / (2**attempt)
        H = np.empty((d, d))
        fp = np.empty(d)
        fm = np.empty(d)
        for k in range(d):
            e = np.zeros(d)
            e[k] = h[k]
            fp[k], fm[k] = _eval(f, x + e), _eval(f, x - e)
            H[k, k] = (fp[k] - 2 * f0 + fm[k]) / h[k] ** 2
        for k in range(d):
            for l in range(k + 1, d):
                e = np.zeros(d)
                e[k] = h[k]
                e[l] = h[l]
                fpp = _eval(f, x + e)
                fmm = _eval(f, x - e)
                H[k, l] = H[l, k] = (fpp - fp[k] - fp[l] + 2 * f0 - fm[k] - fm[l] + fmm) / (2 * h[k] * h[l])
        if np.all(np.isfinite(H)):
            return 0.5 * (H + H.T)
    raise DerivativeError("objective not finite on the Hessian stencil")
