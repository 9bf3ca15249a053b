"""Transform calculus for stochastic quadratic-growth envelopes.

The functions here evaluate

* ``H(x) = int_D^x dr / phi(r)`` and its inverse,
* ``F(x, c) = int_D^x exp(c int_D^t psi(r) dr) dt`` and its inverse in ``x``,
* ``G(x, c, eta) = H^{-1}(H(F^{-1}(x, c)) - eta)`` on the admissible set
  ``{(x, c, eta) >= 0 : H(F^{-1}(x, c)) >= eta}``,

together with the partial derivatives of ``G`` and the envelope processes
built from them.  Recognized families (``phi`` in const / r / r ln r / e^r,
``psi`` in 0 / 1 / r) dispatch to vectorized closed forms; anything else, or
an :class:`EnvelopeSpec` built with ``numeric=True``, goes through adaptive
quadrature and a bracketed Newton-bisection inverse.

All evaluators accept scalars or numpy arrays and broadcast their arguments.
Scalar inputs give ``float`` outputs.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Union

import numpy as np
from scipy import integrate, interpolate, special

from .errors import (
    BracketError,
    ConfigurationError,
    DivergenceError,
    DomainError,
    MembershipError,
    RangeError,
)

ArrayLike = Union[float, np.ndarray]
Process = Union[float, np.ndarray]

QUAD_EPSABS = 1e-12
QUAD_EPSREL = 1e-10
TOL_ROOT = 1e-10
ROOT_MAXITER = 200
C_ZERO = 1e-14
MEMBERSHIP_TOL = 1e-9
CACHE_POINTS = 2048

PHI_FAMILIES = ("const", "linear", "xlogx", "exp")
PSI_FAMILIES = ("zero", "one", "linear")


def _out(value, *like):
    """Return a float when every reference argument is scalar."""
    if all(np.ndim(a) == 0 for a in like):
        return float(np.asarray(value).reshape(()))
    return value


def _elementwise(fn, *args):
    """Apply a scalar function over broadcast arrays."""
    arrays = np.broadcast_arrays(*[np.asarray(a, dtype=float) for a in args])
    out = np.empty(arrays[0].shape, dtype=float)
    for idx in np.ndindex(out.shape):
        out[idx] = fn(*(float(a[idx]) for a in arrays))
    return out


def _quad(func, a: float, b: float) -> float:
    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            val, err = integrate.quad(func, a, b, epsabs=QUAD_EPSABS, epsrel=QUAD_EPSREL, limit=200)
        except integrate.IntegrationWarning as exc:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                val, err = integrate.quad(func, a, b, epsabs=QUAD_EPSABS, epsrel=QUAD_EPSREL, limit=400)
            if not np.isfinite(val) or err > 1e-6 * max(1.0, abs(val)):
                raise DivergenceError(f"integral over [{a}, {b}] did not converge: {exc}") from None
    if not np.isfinite(val):
        raise DivergenceError(f"integral over [{a}, {b}] is not finite")
    return val


def invert_increasing(
    func: Callable[[np.ndarray, np.ndarray], np.ndarray],
    y: ArrayLike,
    lower: float,
    deriv: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
    maxiter: int = ROOT_MAXITER,
    tol: float = TOL_ROOT,
) -> np.ndarray:
    """Solve ``func(x) = y`` for a strictly increasing ``func`` on ``[lower, inf)``.

    ``func(x, idx)`` and ``deriv(x, idx)`` receive the candidate points and
    their positions in the flattened ``y``, so each element may carry its
    own parameters.

    The bracket starts at ``[lower, lower + 1]`` and its width is doubled
    until ``func(hi) >= y``.  Inside the bracket a Newton step (when ``deriv``
    is given) or a regula-falsi step is tried and replaced by bisection
    whenever it leaves the bracket or fails to halve the previous step.
    Works elementwise on arrays.

    Raises
    ------
    BracketError
        If no bracket is found, or the iteration cap is hit; the exception
        carries the last bracket of the first unresolved element.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float)).copy()
    lo = np.full(y.shape, float(lower))
    width = np.ones(y.shape)
    hi = lo + width
    f_lo = np.zeros(y.shape)
    f_hi = np.asarray(func(hi, np.arange(y.size)), dtype=float).copy()
    for _ in range(maxiter):
        if np.any(np.isnan(f_hi)):
            raise BracketError("function returned NaN while bracketing")
        need = f_hi < y
        if not need.any():
            break
        lo[need] = hi[need]
        f_lo[need] = f_hi[need]
        width[need] *= 2.0
        hi[need] = lower + width[need]
        f_hi[need] = func(hi[need], np.flatnonzero(need))
    else:
        k = int(np.argmax(f_hi < y))
        raise BracketError(
            f"could not bracket y={y[k]!r} within {maxiter} doublings",
            bracket=(float(lo[k]), float(hi[k])),
        )

    x = np.where(f_hi == y, hi, 0.5 * (lo + hi))
    active = f_hi != y
    prev_step = hi - lo
    f_lo = f_lo - y
    f_hi = f_hi - y
    for _ in range(maxiter):
        if not active.any():
            break
        ia = np.flatnonzero(active)
        xa = x[ia]
        fa = np.asarray(func(xa, ia), dtype=float) - y[ia]
        below = fa < 0
        above = fa > 0
        lo[ia[below]] = xa[below]
        f_lo[ia[below]] = fa[below]
        hi[ia[above]] = xa[above]
        f_hi[ia[above]] = fa[above]
        if deriv is not None:
            with np.errstate(all="ignore"):
                xn = xa - fa / np.asarray(deriv(xa, ia), dtype=float)
        else:
            with np.errstate(all="ignore"):
                xn = lo[ia] - f_lo[ia] * (hi[ia] - lo[ia]) / (f_hi[ia] - f_lo[ia])
        bad = ~np.isfinite(xn) | (xn <= lo[ia]) | (xn >= hi[ia])
        # a step that does not halve the previous one falls back to bisection
        bad |= np.abs(xn - xa) > 0.5 * prev_step[ia]
        mid = 0.5 * (lo[ia] + hi[ia])
        xn = np.where(bad, mid, xn)
        prev_step[ia] = np.abs(xn - xa)
        scale = np.maximum(1.0, np.abs(xa))
        step_small = np.abs(xn - xa) <= 4e-16 * scale
        narrow = (hi[ia] - lo[ia]) <= 4e-16 * scale
        done = (fa == 0) | step_small | narrow
        x[ia] = np.where(fa == 0, xa, xn)
        active[ia[done]] = False
    else:
        k = int(np.argmax(active))
        resid = float(func(x[k : k + 1], np.array([k]))[0] - y[k])
        if abs(resid) > tol * max(1.0, abs(y[k])):
            raise BracketError(
                f"root refinement hit the {maxiter}-iteration cap (residual {resid:.3e})",
                bracket=(float(lo[k]), float(hi[k])),
            )
    return x


# ---------------------------------------------------------------------------
# Families
# ---------------------------------------------------------------------------


def _phi_family(name: str, scale: float):
    if name == "const":
        return (lambda r: np.full_like(np.asarray(r, dtype=float), scale),
                lambda r: np.zeros_like(np.asarray(r, dtype=float)))
    if name == "linear":
        return (lambda r: np.asarray(r, dtype=float) * 1.0,
                lambda r: np.ones_like(np.asarray(r, dtype=float)))
    if name == "xlogx":
        return (lambda r: np.asarray(r, dtype=float) * np.log(r),
                lambda r: np.log(r) + 1.0)
    if name == "exp":
        return np.exp, np.exp
    raise ConfigurationError(f"unknown phi family {name!r}; expected one of {PHI_FAMILIES}")


def _psi_family(name: str):
    if name == "zero":
        return lambda r: np.zeros_like(np.asarray(r, dtype=float))
    if name == "one":
        return lambda r: np.ones_like(np.asarray(r, dtype=float))
    if name == "linear":
        return lambda r: np.asarray(r, dtype=float) * 1.0
    raise ConfigurationError(f"unknown psi family {name!r}; expected one of {PSI_FAMILIES}")


def _check_process(name: str, value, nonneg: bool = True, nondecreasing: bool = False):
    arr = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ConfigurationError(f"{name} must be finite")
    if nonneg and np.any(arr < 0):
        raise ConfigurationError(f"{name} must be nonnegative")
    if nondecreasing and arr.ndim >= 1 and np.any(np.diff(arr, axis=-1) < 0):
        raise ConfigurationError(f"{name} must be nondecreasing along every path")


@dataclass(frozen=True, eq=False)
class EnvelopeSpec:
    """Growth-envelope data ``(D, phi, psi, alpha, beta, C, R)``.

    ``phi`` and ``psi`` are either family names (see ``PHI_FAMILIES`` and
    ``PSI_FAMILIES``) or callables.  ``phi_scale`` is the constant of the
    ``"const"`` family.  The process fields accept a scalar (constant), a
    1-d array over mesh steps/nodes (deterministic) or a 2-d
    ``(n_paths, n)`` array (pathwise).  ``alpha``/``beta``/``R`` are read on
    steps, ``C`` on nodes.

    ``numeric=True`` forces the quadrature path even for recognized
    families; the inner psi-integral cache covers ``[D, D + cache_span]``.
    """

    D: float
    phi: Union[str, Callable] = "linear"
    psi: Union[str, Callable] = "one"
    dphi: Callable | None = None
    phi_scale: float = 1.0
    alpha: Process = 0.0
    beta: Process = 0.0
    C: Process = 0.0
    R: Process = 0.0
    numeric: bool = False
    cache_span: float = 64.0
    _phi_fn: Callable = field(init=False, repr=False)
    _dphi_fn: Callable = field(init=False, repr=False)
    _psi_fn: Callable = field(init=False, repr=False)
    _inner: Callable = field(init=False, repr=False)

    def __post_init__(self):
        if not np.isfinite(self.D) or self.D < 0:
            raise ConfigurationError(f"D must be a finite nonnegative number, got {self.D!r}")
        if isinstance(self.phi, str):
            if self.phi == "const" and not self.phi_scale > 0:
                raise ConfigurationError("const phi family needs phi_scale > 0")
            phi_fn, dphi_fn = _phi_family(self.phi, self.phi_scale)
        else:
            phi_fn = self.phi
            dphi_fn = self.dphi if self.dphi is not None else _central_difference(self.phi)
        psi_fn = _psi_family(self.psi) if isinstance(self.psi, str) else self.psi
        object.__setattr__(self, "_phi_fn", phi_fn)
        object.__setattr__(self, "_dphi_fn", dphi_fn)
        object.__setattr__(self, "_psi_fn", psi_fn)
        for name in ("alpha", "beta", "R"):
            _check_process(name, getattr(self, name))
        _check_process("C", self.C, nondecreasing=True)
        r2 = np.asarray(self.R, dtype=float) ** 2
        if not np.isfinite(r2.sum()):
            raise ConfigurationError("R must have a finite square-sum along every path")
        if self.phi_family is None or self.psi_family is None or self.numeric:
            object.__setattr__(self, "_inner", _InnerIntegralCache(psi_fn, self.D, self.cache_span))
        else:
            object.__setattr__(self, "_inner", None)

    # -- family bookkeeping -------------------------------------------------
    @property
    def phi_family(self) -> str | None:
        return self.phi if isinstance(self.phi, str) else None

    @property
    def psi_family(self) -> str | None:
        return self.psi if isinstance(self.psi, str) else None

    @property
    def closed_form_H(self) -> bool:
        return self.phi_family is not None and not self.numeric

    @property
    def closed_form_F(self) -> bool:
        return self.psi_family is not None and not self.numeric

    def phi_fn(self, r: ArrayLike) -> np.ndarray:
        return self._phi_fn(r)

    def dphi_fn(self, r: ArrayLike) -> np.ndarray:
        return self._dphi_fn(r)

    def psi_fn(self, r: ArrayLike) -> np.ndarray:
        return self._psi_fn(r)

    def inner(self, t: ArrayLike) -> np.ndarray:
        """``int_D^t psi(r) dr``."""
        t = np.asarray(t, dtype=float)
        if self._inner is not None:
            return self._inner(t)
        D = self.D
        if self.psi == "zero":
            return np.zeros_like(t)
        if self.psi == "one":
            return t - D
        return 0.5 * (t - D) * (t + D)

    def varphi(self, x: ArrayLike, c: ArrayLike) -> np.ndarray:
        """``phi'(x) + c phi(x) psi(x)``."""
        x = np.asarray(x, dtype=float)
        return self.dphi_fn(x) + np.asarray(c, dtype=float) * self.phi_fn(x) * self.psi_fn(x)

    def require_H(self) -> None:
        """Refuse configurations where ``phi`` vanishes at ``D``."""
        fam = self.phi_family
        if fam == "linear" and self.D <= 0:
            raise ConfigurationError("phi(r) = r needs D > 0: H diverges at D = 0")
        if fam == "xlogx" and self.D <= 1:
            raise ConfigurationError("phi(r) = r ln r needs D > 1")
        if fam is None and not float(np.asarray(self.phi_fn(self.D))) > 0:
            raise ConfigurationError("phi(D) must be positive for H to be defined near D")


def _central_difference(fn):
    def deriv(r):
        r = np.asarray(r, dtype=float)
        h = 1e-6 * np.maximum(1.0, np.abs(r))
        return (np.asarray(fn(r + h)) - np.asarray(fn(r - h))) / (2 * h)

    return deriv


class _InnerIntegralCache:
    """Cubic Hermite table of ``int_D^t psi`` on a fixed grid.

    The Hermite slopes are the exact ``psi`` values; the Fritsch-Carlson
    sufficient condition is checked and PCHIP is used if it fails.
    """

    def __init__(self, psi, D: float, span: float, n: int = CACHE_POINTS):
        self.psi = psi
        self.D = D
        self.top = D + span
        grid = np.linspace(D, self.top, n)
        pieces = [_quad(lambda r: float(psi(r)), a, b) for a, b in zip(grid[:-1], grid[1:])]
        values = np.concatenate([[0.0], np.cumsum(pieces)])
        slopes = np.asarray(psi(grid), dtype=float) * np.ones_like(grid)
        if np.any(slopes < 0):
            raise ConfigurationError("psi must be nonnegative")
        secant = np.diff(values) / np.diff(grid)
        with np.errstate(divide="ignore", invalid="ignore"):
            a = np.where(secant > 0, slopes[:-1] / secant, 0.0)
            b = np.where(secant > 0, slopes[1:] / secant, 0.0)
        if np.all(a**2 + b**2 <= 9.0):
            self.spline = interpolate.CubicHermiteSpline(grid, values, slopes)
        else:
            self.spline = interpolate.PchipInterpolator(grid, values)
        self.end_value = float(values[-1])

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        inside = t <= self.top
        out = np.empty_like(t)
        out[inside] = self.spline(t[inside])
        if (~inside).any():
            out[~inside] = [
                self.end_value + _quad(lambda r: float(self.psi(r)), self.top, float(tt))
                for tt in t[~inside]
            ]
        return out


# ---------------------------------------------------------------------------
# H and its inverse
# ---------------------------------------------------------------------------


def total_mass(env: EnvelopeSpec) -> float:
    """``int_D^inf dr / phi(r)``, possibly ``inf``."""
    env.require_H()
    if env.closed_form_H:
        if env.phi == "exp":
            return math.exp(-env.D)
        return math.inf
    with warnings.catch_warnings(), np.errstate(over="ignore"):
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            val, _ = integrate.quad(lambda r: 1.0 / float(env.phi_fn(r)), env.D, np.inf, limit=400)
        except integrate.IntegrationWarning:
            return math.inf
    if not np.isfinite(val) or val > 1e10:
        return math.inf
    return float(val)


def _check_domain(x, D, what="x"):
    if np.any(np.asarray(x) < D):
        raise DomainError(f"{what} must be >= D = {D}")


def eval_H(x: ArrayLike, env: EnvelopeSpec):
    """``H(x) = int_D^x dr / phi(r)``."""
    env.require_H()
    xa = np.asarray(x, dtype=float)
    _check_domain(xa, env.D)
    D = env.D
    if env.closed_form_H:
        fam = env.phi
        if fam == "const":
            val = (xa - D) / env.phi_scale
        elif fam == "linear":
            val = np.log(xa / D)
        elif fam == "xlogx":
            val = np.log(np.log(xa)) - math.log(math.log(D))
        else:
            val = -math.exp(-D) * np.expm1(-(xa - D))
        return _out(val, x)

    def scalar(xx):
        if xx == D:
            return 0.0
        return _quad(lambda r: 1.0 / float(env.phi_fn(r)), D, xx)

    return _out(_elementwise(scalar, xa), x)


def eval_H_inv(y: ArrayLike, env: EnvelopeSpec):
    """Inverse of :func:`eval_H` on ``[0, total_mass)``."""
    env.require_H()
    ya = np.asarray(y, dtype=float)
    if np.any(ya < 0):
        raise RangeError("H^{-1} needs y >= 0")
    mass = total_mass(env)
    if np.any(ya >= mass):
        raise RangeError(f"y must be below the total mass of 1/phi ({mass!r})")
    D = env.D
    if env.closed_form_H:
        fam = env.phi
        if fam == "const":
            val = D + env.phi_scale * ya
        elif fam == "linear":
            val = D * np.exp(ya)
        elif fam == "xlogx":
            val = np.exp(math.log(D) * np.exp(ya))
        else:
            val = D - np.log1p(-ya * math.exp(D))
        return _out(val, y)
    flat = ya.ravel()
    res = invert_increasing(
        lambda xs, _: np.asarray(eval_H(xs, env)),
        flat,
        D,
        deriv=lambda xs, _: 1.0 / np.asarray(env.phi_fn(xs), dtype=float),
    )
    return _out(res.reshape(ya.shape), y)


# ---------------------------------------------------------------------------
# F and its inverse
# ---------------------------------------------------------------------------


def _dawson_F(x, c, D):
    s = np.sqrt(0.5 * c)
    return np.sqrt(2.0 / c) * (np.exp(0.5 * c * (x - D) * (x + D)) * special.dawsn(s * x) - special.dawsn(s * D))


def eval_F(x: ArrayLike, c: ArrayLike, env: EnvelopeSpec):
    """``F(x, c) = int_D^x exp(c int_D^t psi) dt``."""
    xa, ca = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(c, dtype=float))
    _check_domain(xa, env.D)
    if np.any(ca < 0):
        raise DomainError("c must be nonnegative")
    D = env.D
    small = ca < C_ZERO
    if env.closed_form_F:
        fam = env.psi
        if fam == "zero":
            val = xa - D
        elif fam == "one":
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                val = np.where(small, xa - D, np.expm1(ca * (xa - D)) / np.where(small, 1.0, ca))
        else:
            cc = np.where(small, 1.0, ca)
            with np.errstate(over="ignore", invalid="ignore"):
                val = np.where(small, xa - D, _dawson_F(xa, cc, D))
        return _out(val, x, c)

    def scalar(xx, cc):
        if cc < C_ZERO:
            return xx - D
        if xx == D:
            return 0.0
        if cc * float(env.inner(xx)) > 700.0:
            # beyond double range for any practical psi
            return math.inf
        return _quad(lambda t: math.exp(cc * float(env.inner(t))), D, xx)

    return _out(_elementwise(scalar, xa, ca), x, c)


def dF_dx(x: ArrayLike, c: ArrayLike, env: EnvelopeSpec):
    return np.exp(np.asarray(c, dtype=float) * env.inner(x))


def eval_F_inv(y: ArrayLike, c: ArrayLike, env: EnvelopeSpec):
    """Inverse of ``F(., c)``: the ``x >= D`` with ``F(x, c) = y``."""
    ya, ca = np.broadcast_arrays(np.asarray(y, dtype=float), np.asarray(c, dtype=float))
    if np.any(ya < 0):
        raise RangeError("F^{-1} needs y >= 0")
    if np.any(ca < 0):
        raise DomainError("c must be nonnegative")
    D = env.D
    small = ca < C_ZERO
    if env.closed_form_F and env.psi in ("zero", "one"):
        if env.psi == "zero":
            val = D + ya
        else:
            cc = np.where(small, 1.0, ca)
            val = np.where(small, D + ya, D + np.log1p(cc * ya) / cc)
        return _out(val, y, c)
    flat_y = ya.ravel()
    flat_c = ca.ravel()
    res = invert_increasing(
        lambda xs, idx: np.asarray(eval_F(xs, flat_c[idx], env)),
        flat_y,
        D,
        deriv=lambda xs, idx: dF_dx(xs, flat_c[idx], env),
    )
    out = res.reshape(ya.shape)
    return _out(out, y, c)


def dF_dc(x: ArrayLike, c: ArrayLike, env: EnvelopeSpec):
    """``int_D^x exp(c I(t)) I(t) dt`` with ``I(t) = int_D^t psi``."""
    xa, ca = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(c, dtype=float))
    D = env.D
    if env.closed_form_F and env.psi == "zero":
        return _out(np.zeros(xa.shape), x, c)
    if env.closed_form_F and env.psi == "one":
        s = xa - D
        cs = ca * s
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            exact = (np.exp(cs) * (cs - 1.0) + 1.0) / np.where(ca == 0, 1.0, ca) ** 2
        series = s**2 / 2 + ca * s**3 / 3 + ca**2 * s**4 / 8 + ca**3 * s**5 / 30
        return _out(np.where(cs < 1e-3, series, exact), x, c)

    def scalar(xx, cc):
        if xx == D:
            return 0.0
        return _quad(lambda t: math.exp(cc * float(env.inner(t))) * float(env.inner(t)), D, xx)

    return _out(_elementwise(scalar, xa, ca), x, c)


# ---------------------------------------------------------------------------
# G, its derivatives, lambda-bar
# ---------------------------------------------------------------------------


def membership_deficit(x: ArrayLike, c: ArrayLike, eta: ArrayLike, env: EnvelopeSpec):
    """``H(F^{-1}(x, c)) - eta``; nonnegative on the admissible set."""
    u = np.asarray(eval_F_inv(x, c, env))
    return _out(np.asarray(eval_H(u, env)) - np.asarray(eta, dtype=float), x, c, eta)


def _admissible(x, c, eta, env):
    xa, ca, ea = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (x, c, eta)))
    if np.any(xa < 0) or np.any(ca < 0) or np.any(ea < 0):
        raise DomainError("(x, c, eta) must be nonnegative")
    u = np.asarray(eval_F_inv(xa, ca, env))
    deficit = np.asarray(eval_H(u, env)) - ea
    if np.any(deficit < -MEMBERSHIP_TOL):
        k = int(np.argmin(deficit))
        idx = np.unravel_index(k, deficit.shape) if deficit.ndim else None
        raise MembershipError(
            f"point outside the admissible set: H(F^-1(x,c)) - eta = {deficit.ravel()[k]:.3e}",
            deficit=float(deficit.ravel()[k]),
            index=idx,
        )
    return u, np.maximum(deficit, 0.0)


def eval_G(x: ArrayLike, c: ArrayLike, eta: ArrayLike, env: EnvelopeSpec):
    """``G(x, c, eta) = H^{-1}(H(F^{-1}(x, c)) - eta)``.

    Deficits down to ``-MEMBERSHIP_TOL`` are clamped onto the boundary, so
    ``G >= D`` always.
    """
    _, deficit = _admissible(x, c, eta, env)
    return _out(np.asarray(eval_H_inv(deficit, env)), x, c, eta)


class GradG(NamedTuple):
    dG_dx: ArrayLike
    d2G_dx2: ArrayLike
    dG_dc: ArrayLike
    dG_deta: ArrayLike


def grad_G(x: ArrayLike, c: ArrayLike, eta: ArrayLike, env: EnvelopeSpec) -> GradG:
    """Closed-form partial derivatives of ``G``.

    ``dG/dc`` uses :func:`dF_dc`, which is analytic for ``psi`` in {0, 1}
    and a quadrature otherwise.
    """
    u, deficit = _admissible(x, c, eta, env)
    ca = np.broadcast_to(np.asarray(c, dtype=float), u.shape)
    g = np.asarray(eval_H_inv(deficit, env))
    phi_g = env.phi_fn(g)
    phi_u = env.phi_fn(u)
    gx = phi_g * np.exp(-ca * env.inner(u)) / phi_u
    gxx = gx**2 / phi_g * (env.dphi_fn(g) - env.dphi_fn(u) - ca * phi_u * env.psi_fn(u))
    gc = -gx * np.asarray(dF_dc(u, ca, env))
    geta = -phi_g
    like = (x, c, eta)
    return GradG(_out(gx, *like), _out(gxx, *like), _out(gc, *like), _out(geta, *like))


def lambda_bar(Lambda: ArrayLike, eta_T: ArrayLike, C_T: ArrayLike, env: EnvelopeSpec):
    """``F(H^{-1}(H(Lambda) + eta_T), C_T)``."""
    h = np.asarray(eval_H(Lambda, env)) + np.asarray(eta_T, dtype=float)
    mass = total_mass(env)
    if np.any(h >= mass):
        raise RangeError(
            "eta_T exceeds the remaining mass of 1/phi above Lambda "
            f"(H(Lambda) + eta_T >= {mass!r})"
        )
    return _out(np.asarray(eval_F(np.asarray(eval_H_inv(h, env)), C_T, env)), Lambda, eta_T, C_T)


# ---------------------------------------------------------------------------
# varphi monotonicity
# ---------------------------------------------------------------------------


class MonotonicityReport(NamedTuple):
    ok: bool
    witness_x: float | None = None
    witness_c: float | None = None


def check_varphi_monotone(
    env: EnvelopeSpec,
    c_max: float,
    grid_n: int = 400,
    x_max: float | None = None,
    n_c: int = 11,
    tol: float = 1e-10,
) -> MonotonicityReport:
    """Scan ``x -> phi'(x) + c phi(x) psi(x)`` for decreases.

    The x-grid is ``D + geomspace(1e-6, x_max - D)``; c runs over
    ``linspace(0, c_max, n_c)``.  Returns the first decreasing grid point.
    """
    if x_max is None:
        x_max = env.D + 100.0
    offsets = np.geomspace(1e-6, x_max - env.D, grid_n)
    xs = np.concatenate([[env.D], env.D + offsets])
    for c in np.linspace(0.0, c_max, n_c):
        with np.errstate(over="ignore", invalid="ignore"):
            v = np.asarray(env.varphi(xs, c), dtype=float)
        finite = np.isfinite(v)
        dv = np.diff(v)
        drop = (dv < -tol * np.maximum(1.0, np.abs(v[:-1]))) & finite[:-1] & finite[1:]
        if drop.any():
            k = int(np.argmax(drop))
            return MonotonicityReport(False, float(xs[k + 1]), float(c))
    return MonotonicityReport(True)


# ---------------------------------------------------------------------------
# Envelopes
# ---------------------------------------------------------------------------


def bounded_envelope(env: EnvelopeSpec, a: float, eta_path: ArrayLike, tol: float = 1e-12):
    """Deterministic-shape envelope ``H^{-1}(a - eta_t)``."""
    mass = total_mass(env)
    if not a < mass:
        raise RangeError(f"a = {a} must be below the total mass of 1/phi ({mass!r})")
    eta = np.asarray(eta_path, dtype=float)
    if np.any(eta > a + tol):
        raise RangeError("eta exceeds a: the envelope is undefined")
    return _out(np.asarray(eval_H_inv(np.clip(a - eta, 0.0, None), env)), eta_path)


UNBOUNDED_FAMILIES = ("linear_psi1", "xlogx_psi1", "linear_psilinear", "linear_psi0")


def unbounded_envelope(
    family_id: str,
    conditional_lambda_bar: ArrayLike,
    C_path: ArrayLike,
    eta_path: ArrayLike,
    D: float,
    m: float | None = None,
) -> np.ndarray:
    """Closed-form envelope ``G(E(Lambda_bar | F_t), C_t, eta_t)`` for named families.

    ``linear_psi1``
        phi = x, psi = 1, any nondecreasing C.
    ``xlogx_psi1``
        phi = x ln x, psi = 1, C = m constant (D > 1).
    ``linear_psilinear``
        phi = x, psi = x, C = m constant; D = 0 allowed.
    ``linear_psi0``
        phi = x, psi = 0 (the R != 0 family; pass the esssup estimate).
    """
    lam = np.asarray(conditional_lambda_bar, dtype=float)
    if np.any(lam < -MEMBERSHIP_TOL):
        raise DomainError("conditional Lambda_bar must be nonnegative")
    lam = np.maximum(lam, 0.0)
    eta = np.asarray(eta_path, dtype=float)
    C = np.asarray(C_path, dtype=float)
    if family_id == "linear_psi1":
        Cs = np.where(C < C_ZERO, 1.0, C)
        inner = np.where(C < C_ZERO, lam, np.log1p(Cs * lam) / Cs)
        x = np.exp(-eta) * (D + inner)
    elif family_id == "xlogx_psi1":
        if m is None or m <= 0 or D <= 1:
            raise ConfigurationError("xlogx_psi1 needs m > 0 and D > 1")
        x = np.exp(np.exp(-eta) * np.log(D + np.log1p(m * lam) / m))
    elif family_id == "linear_psilinear":
        if m is None or m <= 0:
            raise ConfigurationError("linear_psilinear needs m > 0")
        env = EnvelopeSpec(D=D, phi="linear", psi="linear")
        x = np.exp(-eta) * np.asarray(eval_F_inv(lam, m, env))
    elif family_id == "linear_psi0":
        x = np.exp(-eta) * (D + lam)
    else:
        raise ConfigurationError(f"unknown envelope family {family_id!r}; expected one of {UNBOUNDED_FAMILIES}")
    x = np.broadcast_to(x, np.broadcast_shapes(lam.shape, eta.shape, C.shape))
    if np.any(x < D - MEMBERSHIP_TOL * max(1.0, D)):
        k = int(np.argmin(x - D))
        raise MembershipError(
            "envelope dropped below D: (E(Lambda_bar|F), C, eta) is not admissible",
            deficit=float(x.ravel()[k] - D),
            index=np.unravel_index(k, x.shape),
        )
    return np.array(x)


@dataclass(eq=False)
class EnvelopePath:
    """Envelope triple ``(x, z, dk)`` on a mesh.

    ``values`` has shape ``(n_paths, n_nodes)``, ``z_values``
    ``(n_paths, n_steps, d)`` and ``k_increments`` ``(n_paths, n_steps)``.
    ``M`` is the varphi gap driving the ``|z|^2`` part of ``dk``.
    """

    values: np.ndarray
    z_values: np.ndarray
    k_increments: np.ndarray
    M: np.ndarray
    dk_nonnegative: bool


def build_transformed_solution(
    x1: np.ndarray,
    z1: np.ndarray,
    C_path: ArrayLike,
    eta_path: ArrayLike,
    env: EnvelopeSpec,
    dt: np.ndarray,
    tol: float = 1e-10,
) -> EnvelopePath:
    """Map a solution ``(x1, z1)`` of the linear-in-|z| equation to ``(x, z, k)``.

    ``x = G(x1, C, eta)``, ``z = dG/dx * z1`` and, per step,
    ``dk = -dG/dc * dC + 1/2 (dG/dx)^2 / phi(x) * |z1|^2 * M * dt`` with
    ``M = varphi(F^{-1}(x1, C), C) - varphi(x, C)``.

    ``x1`` is ``(n_paths, n_nodes)``; ``z1`` is ``(n_paths, n_steps, d)``
    (a 2-d array is read as ``d = 1``); ``C_path`` and ``eta_path``
    broadcast against ``x1``.
    """
    x1 = np.atleast_2d(np.asarray(x1, dtype=float))
    z1 = np.asarray(z1, dtype=float)
    if z1.ndim == 2:
        z1 = z1[..., None]
    n_paths, n_nodes = x1.shape
    dt = np.asarray(dt, dtype=float)
    C = np.broadcast_to(np.asarray(C_path, dtype=float), x1.shape)
    eta = np.broadcast_to(np.asarray(eta_path, dtype=float), x1.shape)
    try:
        u, deficit = _admissible(x1, C, eta, env)
    except MembershipError as exc:
        node = exc.index[1] if exc.index is not None else None
        raise MembershipError(f"{exc} (node {node})", deficit=exc.deficit, index=exc.index) from None
    x = np.asarray(eval_H_inv(deficit, env))
    phi_x = env.phi_fn(x)
    gx = phi_x * np.exp(-C * env.inner(u)) / env.phi_fn(u)
    z = gx[:, :-1, None] * z1
    M = env.varphi(u, C) - env.varphi(x, C)
    dC = np.diff(C, axis=1)
    dk = 0.5 * (gx[:, :-1] ** 2 / phi_x[:, :-1]) * np.sum(z1**2, axis=-1) * M[:, :-1] * dt
    moving = dC != 0
    if moving.any():
        gc = np.zeros_like(dC)
        left = (slice(None), slice(0, n_nodes - 1))
        gc[moving] = -gx[left][moving] * np.asarray(dF_dc(u[left][moving], C[left][moving], env))
        dk = dk - gc * dC
    return EnvelopePath(
        values=x,
        z_values=z,
        k_increments=dk,
        M=M,
        dk_nonnegative=bool(np.all(dk >= -tol)),
    )


def e_plus_residual(
    path: EnvelopePath,
    eta_path: ArrayLike,
    C_path: ArrayLike,
    R_path: ArrayLike,
    env: EnvelopeSpec,
    dt: np.ndarray,
    dB: np.ndarray | None = None,
) -> np.ndarray:
    """Per-node residual of the discrete envelope equation.

    ``x_i - x_N - sum_{j>=i} [phi(x_j) d eta_j + C_j psi(x_j)/2 |z_j|^2 dt_j
    + R_j |z_j| dt_j + dk_j - z_j . dB_j]``, shape ``(n_paths, n_nodes)``.
    """
    x = path.values
    eta = np.broadcast_to(np.asarray(eta_path, dtype=float), x.shape)
    C = np.broadcast_to(np.asarray(C_path, dtype=float), x.shape)
    R = np.broadcast_to(np.asarray(R_path, dtype=float), x[:, :-1].shape)
    z = path.z_values
    zn = np.sqrt(np.sum(z**2, axis=-1))
    xl = x[:, :-1]
    incr = (
        env.phi_fn(xl) * np.diff(eta, axis=1)
        + 0.5 * C[:, :-1] * env.psi_fn(xl) * zn**2 * dt
        + R * zn * dt
        + path.k_increments
    )
    if dB is not None:
        incr = incr - np.sum(z * dB, axis=-1)
    tail = np.concatenate([np.cumsum(incr[:, ::-1], axis=1)[:, ::-1], np.zeros((x.shape[0], 1))], axis=1)
    return x - x[:, -1:] - tail


def eta_process(env: EnvelopeSpec, dt: np.ndarray, dA: np.ndarray | None = None) -> np.ndarray:
    """``eta_t = int alpha ds + int beta dA`` on mesh nodes (left-point sums)."""
    dt = np.asarray(dt, dtype=float)
    alpha = np.asarray(env.alpha, dtype=float)
    beta = np.asarray(env.beta, dtype=float)
    incr = alpha * dt
    if dA is not None:
        incr = incr + beta * np.asarray(dA, dtype=float)
    elif np.any(beta != 0):
        raise ConfigurationError("beta != 0 needs the A increments")
    incr = np.asarray(incr, dtype=float)
    zero = np.zeros(incr.shape[:-1] + (1,))
    return np.concatenate([zero, np.cumsum(incr, axis=-1)], axis=-1)
