"""Reference solutions: closed forms and exact tree recursions.

Every oracle here is computed by a route that does not share code with the
Monte Carlo solver it is used to check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy import integrate, special

from .engine import BinomialTree, PathEnsemble, TimeMesh, gamma_weight, mean_and_se
from .errors import ConfigurationError, DomainError, RangeError
from .solver import ProblemSpec, _path_values
from .transforms import EnvelopeSpec, eval_H_inv, total_mass

XI_KINDS = ("brownian", "affine", "step")


@dataclass(frozen=True, eq=False)
class OracleResult:
    """Reference values with the method that produced them.

    ``Y_ref`` has shape ``(n_paths, n_nodes)`` for path oracles, or is a list
    of per-level arrays for tree oracles.
    """

    Y_ref: object
    provenance: str
    Z_ref: Optional[object] = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.provenance:
            raise ConfigurationError("oracle provenance must be nonempty")
        values = self.Y_ref if isinstance(self.Y_ref, list) else [self.Y_ref]
        if not all(np.all(np.isfinite(v)) for v in values):
            raise RangeError(f"{self.provenance}: oracle produced non-finite values")

    @property
    def Y0(self) -> float:
        if isinstance(self.Y_ref, list):
            return float(self.Y_ref[0][0])
        return float(np.mean(np.asarray(self.Y_ref)[:, 0]))


def cole_hopf_exact(
    gamma: float,
    xi_kind: str,
    mesh: TimeMesh,
    ensemble: PathEnsemble,
    a: float = 1.0,
    b: float = 0.0,
    level: float = 0.0,
    lo: float = 0.0,
    hi: float = 1.0,
) -> OracleResult:
    """Closed-form solution of ``Y_t = xi + int_t^T gamma/2 |Z|^2 ds - int_t^T Z dB``.

    ``Y_t = log E[exp(gamma xi) | F_t] / gamma`` with ``xi`` a function of
    ``B_T^1``:

    * ``brownian``: ``xi = B_T``,
    * ``affine``: ``xi = a B_T + b``,
    * ``step``: ``xi = hi`` if ``B_T > level`` else ``lo``.
    """
    if not gamma > 0:
        raise DomainError(f"gamma must be positive, got {gamma}")
    if xi_kind not in XI_KINDS:
        raise ConfigurationError(f"unsupported xi kind {xi_kind!r}; expected one of {XI_KINDS}")
    B1 = ensemble.B[:, :, 0]
    n, nodes = B1.shape
    d = ensemble.d
    tau = mesh.T - mesh.times
    Z = np.zeros((n, nodes - 1, d))
    if xi_kind in ("brownian", "affine"):
        if xi_kind == "brownian":
            a, b = 1.0, 0.0
        Y = a * B1 + b + 0.5 * gamma * a * a * tau[None, :]
        Z[:, :, 0] = a
    else:
        w_lo, w_hi = math.exp(gamma * lo), math.exp(gamma * hi)
        Y = np.empty_like(B1)
        Y[:, -1] = np.where(B1[:, -1] > level, hi, lo)
        s = np.sqrt(tau[:-1])[None, :]
        u = (B1[:, :-1] - level) / s
        p = special.ndtr(u)
        m = w_lo + (w_hi - w_lo) * p
        Y[:, :-1] = np.log(m) / gamma
        Z[:, :, 0] = (w_hi - w_lo) * np.exp(-0.5 * u * u) / (math.sqrt(2 * math.pi) * s) / (gamma * m)
    return OracleResult(Y_ref=Y, Z_ref=Z, provenance=f"cole_hopf:{xi_kind}:gamma={gamma:g}")


def abs_exp_moment(gamma: float, b, sigma2):
    """``E[exp(gamma |b + sigma W|)]`` for standard normal ``W``."""
    b = np.asarray(b, dtype=float)
    s2 = np.asarray(sigma2, dtype=float)
    s = np.sqrt(s2)
    with np.errstate(divide="ignore", invalid="ignore"):
        up = np.exp(gamma * b + 0.5 * gamma**2 * s2) * special.ndtr(np.where(s > 0, (b + gamma * s2) / s, np.sign(b) * np.inf))
        dn = np.exp(-gamma * b + 0.5 * gamma**2 * s2) * special.ndtr(np.where(s > 0, (-b + gamma * s2) / s, -np.sign(b) * np.inf))
    out = up + dn
    return np.where(s > 0, out, np.exp(gamma * np.abs(b)))


def cole_hopf_bound(gamma: float, mesh: TimeMesh, ensemble: PathEnsemble) -> np.ndarray:
    """Pathwise bound ``ln(1 + C E(Lambda_bar | F_t)) / C`` for ``xi = B_T``.

    Here ``C = gamma`` and ``Lambda_bar = (exp(C |xi|) - 1) / C``; the
    conditional expectation is Gaussian and evaluated exactly.
    """
    B1 = ensemble.B[:, :, 0]
    tau = (mesh.T - mesh.times)[None, :]
    cond = (abs_exp_moment(gamma, B1, tau) - 1.0) / gamma
    return np.log1p(gamma * cond) / gamma


def deterministic_ode_solution(
    env: EnvelopeSpec,
    a: float,
    mesh: TimeMesh,
    eta: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    method: str = "closed",
    deta: Optional[Callable[[float], float]] = None,
) -> OracleResult:
    """Solution of ``x_t = H^{-1}(a - eta_T) + int_t^T phi(x_s) d eta_s``.

    ``method="closed"`` returns ``H^{-1}(a - eta_t)``.  ``method="ivp"``
    integrates ``dx = -phi(x) eta'(t) dt`` backward from ``T`` with a
    high-order Runge-Kutta scheme instead, sharing nothing with ``H``
    except the terminal value.

    By default ``eta_t = alpha t`` with the scalar ``env.alpha``.
    """
    mass = total_mass(env)
    if not a < mass:
        raise RangeError(f"a = {a} must be below the total mass of 1/phi ({mass!r})")
    if eta is None:
        alpha = float(np.asarray(env.alpha).reshape(-1)[0]) if np.ndim(env.alpha) else float(env.alpha)
        eta = lambda t: alpha * np.asarray(t, dtype=float)
        deta = deta or (lambda t: alpha)
    t = mesh.times
    eta_t = np.asarray(eta(t), dtype=float)
    if np.any(eta_t > a + 1e-12):
        raise RangeError("eta exceeds a on the mesh: the solution leaves [D, inf)")
    if method == "closed":
        x = np.asarray(eval_H_inv(np.clip(a - eta_t, 0.0, None), env), dtype=float)
    elif method == "ivp":
        if deta is None:
            raise ConfigurationError("ivp method needs the derivative of eta")
        xT = float(eval_H_inv(max(a - float(eta_t[-1]), 0.0), env))
        rhs = lambda s, x: [-float(env.phi_fn(x[0])) * deta(s)]
        sol = integrate.solve_ivp(rhs, (mesh.T, 0.0), [xT], method="DOP853", t_eval=t[::-1], rtol=1e-13, atol=1e-14)
        if not sol.success:
            raise RangeError(f"ODE integration failed: {sol.message}")
        x = sol.y[0][::-1]
    else:
        raise ConfigurationError(f"unknown method {method!r}")
    return OracleResult(Y_ref=x[None, :], provenance=f"deterministic_ode:{method}", extras={"eta": eta_t})


def ode_identity_residual(
    env: EnvelopeSpec, a: float, t: float, T: float, eta: Callable[[float], float], deta: Callable[[float], float]
) -> float:
    """Residual of ``x_t - H^{-1}(a - eta_T) - int_t^T phi(x_s) eta'(s) ds`` by quadrature."""
    x = lambda s: float(eval_H_inv(max(a - eta(s), 0.0), env))
    integral, _ = integrate.quad(lambda s: float(env.phi_fn(x(s))) * deta(s), t, T, epsabs=1e-14, epsrel=1e-13, limit=200)
    return x(t) - x(T) - integral


def _tree_eval(obj, level: int, t: float, x: np.ndarray) -> np.ndarray:
    if obj is None:
        return None
    if not callable(obj) and np.ndim(obj) > 0:
        raise ConfigurationError("tree oracle needs barriers given as callables or scalars")
    return _path_values(obj, level, t, x)


def tree_dp_reflected(
    spec: ProblemSpec,
    tree: BinomialTree,
    dA: Optional[Sequence[float]] = None,
    max_steps: int = 20,
) -> OracleResult:
    """Exact backward recursion on a recombining tree.

    At each node ``y = clamp(c + f(t, x, c, z) dt + g(t, x, c) dA, L, U)``
    with ``c`` the average of the two children and ``z`` their difference
    over ``2 sqrt(dt)``.  ``dA`` defaults to ``dt`` per step (``A_t = t``).
    """
    if spec.d != 1:
        raise ConfigurationError(f"tree oracle needs d = 1, got d = {spec.d}")
    if tree.n_steps > max_steps:
        raise ConfigurationError(f"tree depth {tree.n_steps} exceeds the limit {max_steps}")
    if not callable(spec.terminal) and np.ndim(spec.terminal) > 0:
        raise ConfigurationError("tree oracle needs a terminal given as a callable or scalar")
    n = tree.n_steps
    dt = tree.dt
    dA = np.full(n, dt) if dA is None else np.asarray(dA, dtype=float)
    times = tree.times
    x = tree.states(n)[:, None]
    y = np.broadcast_to(np.asarray(spec.terminal(times[-1], x) if callable(spec.terminal) else spec.terminal, dtype=float), (n + 1,)).copy()
    levels: List[np.ndarray] = [y]
    kp: List[np.ndarray] = []
    km: List[np.ndarray] = []
    zs: List[np.ndarray] = []
    sq = math.sqrt(dt)
    for k in range(n - 1, -1, -1):
        t = float(times[k])
        x = tree.states(k)[:, None]
        up, dn = y[1:], y[:-1]
        cont = 0.5 * (up + dn)
        z = ((up - dn) / (2 * sq))[:, None]
        yhat = cont + np.asarray(spec.f(t, x, cont, z), dtype=float) * dt + spec.g_eval(t, x, cont) * dA[k]
        L = _tree_eval(spec.lower, k, t, x)
        U = _tree_eval(spec.upper, k, t, x)
        y = yhat
        if L is not None:
            y = np.maximum(y, L)
        if U is not None:
            if L is not None and np.any(L > U):
                raise DomainError(f"barrier crossing L > U at tree level {k}")
            y = np.minimum(y, U)
        kp.append(np.maximum(y - yhat, 0.0))
        km.append(np.maximum(yhat - y, 0.0))
        zs.append(z[:, 0])
        levels.append(y)
    levels.reverse()
    kp.reverse()
    km.reverse()
    zs.reverse()
    K_T = sum(float(np.dot(tree.weights(k), kp[k])) for k in range(n))
    return OracleResult(
        Y_ref=levels,
        Z_ref=zs,
        provenance=f"tree_dp:n={n}",
        extras={"K_plus": kp, "K_minus": km, "expected_K_plus_T": K_T},
    )


@dataclass(frozen=True)
class SupGammaResult:
    """Best sample mean of ``Gamma^pi Lambda_bar`` over a finite family."""

    value: float
    se: float
    argmax: int
    values: np.ndarray
    ses: np.ndarray

    @property
    def lower_bound(self) -> float:
        return self.value - 3.0 * self.se


def default_pi_family(d: int, pilot_Z: Optional[np.ndarray] = None) -> list:
    """Zero, the ``2d`` signed unit directions and ``z / |z|`` from a pilot run."""
    fam = [np.zeros(d)]
    for k in range(d):
        e = np.zeros(d)
        e[k] = 1.0
        fam += [e, -e]
    if pilot_Z is not None:
        norm = np.sqrt(np.sum(pilot_Z**2, axis=-1, keepdims=True))
        with np.errstate(invalid="ignore", divide="ignore"):
            fam.append(np.where(norm > 0, pilot_Z / norm, 0.0))
    return fam


def estimate_sup_gamma(
    lambda_bar_terminal: np.ndarray,
    R_path,
    pi_family: Sequence,
    mesh: TimeMesh,
    ensemble: PathEnsemble,
) -> SupGammaResult:
    """Maximize ``E[Gamma_{0,T}^pi Lambda_bar]`` over a finite family of ``pi``.

    Each sample mean is an unbiased estimate of a quantity bounded above by
    the supremum over all admissible ``pi``.
    """
    if len(pi_family) == 0:
        raise ConfigurationError("pi family must be nonempty")
    lam = np.asarray(lambda_bar_terminal, dtype=float)
    vals, ses = [], []
    for pi in pi_family:
        w = gamma_weight(R_path, pi, 0, mesh.n_steps, ensemble)
        m, s = mean_and_se(w * lam)
        vals.append(m)
        ses.append(s)
    vals, ses = np.array(vals), np.array(ses)
    k = int(np.argmax(vals))
    return SupGammaResult(float(vals[k]), float(ses[k]), k, vals, ses)


@dataclass(frozen=True)
class DeltaBound:
    value: float
    se: float


def delta_bound(
    xi_path_terminal: np.ndarray,
    R_path,
    q: float,
    n_cap: float,
    mesh: TimeMesh,
    ensemble: PathEnsemble,
) -> DeltaBound:
    """Hölder bound ``E[exp(q/(2(q-1)) int R^2) Lambda_bar^q 1{Lambda_bar + int R^2 <= n}]^(1/q)``.

    ``xi_path_terminal`` is the per-path ``Lambda_bar``.  The standard error
    is propagated through the ``1/q`` power by the delta method.
    """
    if not q > 1:
        raise DomainError(f"q must exceed 1, got {q}")
    lam = np.asarray(xi_path_terminal, dtype=float)
    n, N = ensemble.dA.shape
    R = np.asarray(R_path, dtype=float)
    if R.ndim == 0:
        R = np.full((n, N + 1), float(R))
    elif R.ndim == 1:
        R = np.broadcast_to(R[None, :], (n, N + 1))
    intR2 = np.sum(R[:, :N] ** 2 * mesh.steps[None, :], axis=1)
    keep = (lam + intR2) <= n_cap
    with np.errstate(over="ignore"):
        sample = np.where(keep, np.exp(q / (2 * (q - 1)) * intR2) * lam**q, 0.0)
    m, s = mean_and_se(sample)
    if m <= 0:
        return DeltaBound(0.0, 0.0)
    value = m ** (1.0 / q)
    return DeltaBound(value, value / (q * m) * s)


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(128)


def _gauss_mean_at(h, b: np.ndarray, sigma: float, kinks: Sequence[float], span: float) -> np.ndarray:
    """``E[h(b + sigma U)]`` on a small set of ``b`` by composite Gauss-Legendre."""
    cuts = [np.full(b.shape, -span)]
    for k in sorted(kinks):
        cuts.append(np.clip((k - b) / sigma, -span, span))
    cuts.append(np.full(b.shape, span))
    total = np.zeros(b.shape)
    for a, c in zip(cuts[:-1], cuts[1:]):
        half = 0.5 * (c - a)
        u = 0.5 * (a + c)[:, None] + half[:, None] * _GL_NODES[None, :]
        dens = np.exp(-0.5 * u * u) / math.sqrt(2 * math.pi)
        vals = np.asarray(h((b[:, None] + sigma * u).ravel()), dtype=float).reshape(u.shape)
        total += half * np.sum(_GL_WEIGHTS[None, :] * vals * dens, axis=1)
    return total


def gaussian_conditional_mean(
    h: Callable[[np.ndarray], np.ndarray],
    b,
    tau: float,
    kinks: Sequence[float] = (),
    span: float = 14.0,
    grid_points: int = 1025,
) -> np.ndarray:
    """``E[h(B_T) | B_t = b]`` with ``B_T - B_t ~ N(0, tau)``.

    ``h`` must be smooth apart from kinks at the points ``kinks``.  The mean is
    computed by 128-point Gauss-Legendre on each smooth piece of
    ``[-span, span]`` standard deviations, on a grid of ``b`` values, and
    interpolated to ``b`` by a cubic spline (the mean is smooth in ``b``).
    Positive means are interpolated on the log scale, which keeps the
    relative error flat for exponential-type ``h``.
    """
    from scipy.interpolate import CubicSpline

    b = np.asarray(b, dtype=float)
    if tau <= 0:
        return np.asarray(h(b.ravel()), dtype=float).reshape(b.shape)
    sigma = math.sqrt(tau)
    lo, hi = float(b.min()), float(b.max())
    if hi - lo < 1e-12:
        return np.full(b.shape, _gauss_mean_at(h, np.array([lo]), sigma, kinks, span)[0])
    pad = 1e-9 * max(1.0, hi - lo)
    grid = np.linspace(lo - pad, hi + pad, grid_points)
    vals = _gauss_mean_at(h, grid, sigma, kinks, span)
    if np.all(vals > 0):
        return np.exp(CubicSpline(grid, np.log(vals))(b))
    return CubicSpline(grid, vals)(b)


def exp_max_conditional_mean(k: float, b, tau, level: float):
    """``E[exp(k max(B_T, level)) | B_t = b]`` in closed form."""
    b = np.asarray(b, dtype=float)
    tau = np.asarray(tau, dtype=float)
    s = np.sqrt(np.maximum(tau, 1e-300))
    below = np.exp(k * level) * special.ndtr((level - b) / s)
    above = np.exp(k * b + 0.5 * k * k * tau) * special.ndtr((b + k * tau - level) / s)
    return np.where(tau > 0, below + above, np.exp(k * np.maximum(b, level)))
