"""Backward Monte Carlo solvers for generalized (reflected) BSDEs.

All schemes share one backward step on a mesh ``t_0 < ... < t_N``::

    EY_i  = E[Y_{i+1} | F_i]
    Z_i   = E[(Y_{i+1} - EY_i) dB_i | F_i] / dt_i
    Yhat  = EY_i + f(t_i, X_i, EY_i, Z_i) dt_i + g(t_i, X_i, EY_i) dA_i

with conditional expectations taken by regression on the state ``X_i``
(the Brownian position plus optional barrier features).  Reflection is a
projection of ``Yhat`` onto ``[L_i, U_i]``; the projection gap is the
``K`` increment of the step ``[t_i, t_{i+1})``.

Drivers are callables ``f(t, x, y, z)`` and ``g(t, x, y)`` where ``x`` is the
``(n, d)`` state, ``y`` is ``(n,)`` and ``z`` is ``(n, d)``.  Terminal
values and barriers are callables ``(t, x)`` or precomputed path arrays of
shape ``(n_paths, n_nodes)``.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Union

import numpy as np

from .engine import DEFAULT_KNOTS, PathEnsemble, RegressionEstimator, TimeMesh, mean_and_se, polynomial_basis, spline_basis
from .errors import BarrierCrossingError, ConfigurationError, MeshMismatchError

logger = logging.getLogger(__name__)

Z_CAP = 1e3
TOL_SKOR = 1e-3
TOL_REFLECT = 1e-12

PathFn = Union[Callable[[float, np.ndarray], np.ndarray], np.ndarray, float]


def _path_values(obj: PathFn, i: int, t: float, x: np.ndarray, width: Optional[int] = None) -> np.ndarray:
    """Evaluate a barrier-like object at node ``i``."""
    n = x.shape[0]
    if callable(obj):
        val = np.asarray(obj(t, x), dtype=float)
    else:
        a = np.asarray(obj, dtype=float)
        if a.ndim == 0:
            val = a
        elif a.ndim == 1:
            val = a[i]
        elif width is not None and a.ndim == 2 and a.shape[-1] == width and a.shape[0] == n:
            val = a
        else:
            val = a[:, i]
    shape = (n,) if width is None else (n, width)
    return np.broadcast_to(val, shape).astype(float, copy=False)


@dataclass(frozen=True)
class BarrierDecomposition:
    """Semimartingale parts of a barrier.

    For an upper barrier ``U = U_0 - V - int rho ds - int theta dA + int chi dB``;
    for a lower barrier ``L = L_0 + V + int rho ds + int theta dA + int chi dB``.
    ``rho`` and ``theta`` must be nonnegative.
    """

    rho: PathFn = 0.0
    theta: PathFn = 0.0
    chi: PathFn = 0.0
    V: PathFn = 0.0


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    """Data of a generalized BSDE with optional barriers."""

    f: Callable
    terminal: PathFn
    g: Optional[Callable] = None
    lower: Optional[PathFn] = None
    upper: Optional[PathFn] = None
    lower_decomposition: Optional[BarrierDecomposition] = None
    upper_decomposition: Optional[BarrierDecomposition] = None
    d: int = 1
    name: str = "problem"

    def g_eval(self, t, x, y):
        if self.g is None:
            return np.zeros_like(y)
        return np.asarray(self.g(t, x, y), dtype=float)


@dataclass(eq=False)
class SolutionPanel:
    """Discrete solution ``(Y, Z, K+, K-)`` on a path ensemble.

    ``Y``, ``L`` and ``U`` have shape ``(n_paths, n_steps + 1)``; ``Z`` has
    shape ``(n_paths, n_steps, d)``; the ``K`` increments have shape
    ``(n_paths, n_steps)``.  ``Y_se`` holds the per-path standard error of
    the regression step that produced each ``Y`` value.
    """

    mesh: TimeMesh
    ensemble: PathEnsemble
    Y: np.ndarray
    Z: np.ndarray
    K_plus_increments: np.ndarray
    K_minus_increments: np.ndarray
    L: Optional[np.ndarray] = None
    U: Optional[np.ndarray] = None
    Y_se: Optional[np.ndarray] = None
    diagnostics: Dict[str, object] = field(default_factory=dict)

    def mc_band(self, n_se: float = 3.0) -> np.ndarray:
        """``n_se`` per-path standard errors of the one-step estimator at each node."""
        if self.Y_se is None:
            return np.zeros_like(self.Y)
        return n_se * self.Y_se

    @property
    def Y0(self) -> float:
        return float(np.mean(self.Y[:, 0]))

    def skorokhod_lower(self) -> np.ndarray:
        if self.L is None:
            return np.zeros(self.Y.shape[0])
        return np.sum((self.Y[:, :-1] - self.L[:, :-1]) * self.K_plus_increments, axis=1)

    def skorokhod_upper(self) -> np.ndarray:
        if self.U is None:
            return np.zeros(self.Y.shape[0])
        return np.sum((self.U[:, :-1] - self.Y[:, :-1]) * self.K_minus_increments, axis=1)

    def singularity_residual(self) -> float:
        return float(np.max(np.minimum(self.K_plus_increments, self.K_minus_increments), initial=0.0))


def default_estimator(
    spec: ProblemSpec, degree: int = 3, ridge: float = 1e-8, basis: str = "polynomial", knots=None
) -> RegressionEstimator:
    """Polynomials (or splines) in ``B`` plus linear barrier-gap features."""
    n_extra = int(spec.lower is not None) + int(spec.upper is not None)
    if basis == "polynomial":
        terms = list(polynomial_basis(degree, spec.d))
    elif basis == "spline":
        terms = list(spline_basis(degree, DEFAULT_KNOTS if knots is None else tuple(knots), spec.d))
    else:
        raise ConfigurationError(f"unknown regression basis {basis!r}; expected 'polynomial' or 'spline'")
    for j in range(n_extra):
        terms.append(lambda X, j=j: X[:, spec.d + j])
    return RegressionEstimator(tuple(terms), ridge)


def _features(spec: ProblemSpec, x: np.ndarray, L_i, U_i) -> np.ndarray:
    cols = [x]
    for b in (L_i, U_i):
        if b is not None:
            cols.append((b - x[:, 0])[:, None])
    return np.concatenate(cols, axis=1)


def _terminal(spec: ProblemSpec, mesh: TimeMesh, xT: np.ndarray) -> np.ndarray:
    if callable(spec.terminal):
        return np.broadcast_to(np.asarray(spec.terminal(mesh.T, xT), dtype=float), (xT.shape[0],)).copy()
    a = np.asarray(spec.terminal, dtype=float)
    if a.ndim == 2:
        a = a[:, -1]
    return np.broadcast_to(a, (xT.shape[0],)).copy()


def _barrier_panel(obj, mesh, B) -> Optional[np.ndarray]:
    if obj is None:
        return None
    n = B.shape[0]
    out = np.empty((n, mesh.n_steps + 1))
    for i, t in enumerate(mesh.times):
        out[:, i] = _path_values(obj, i, float(t), B[:, i])
    return out


def _cap_z(Z: np.ndarray, z_cap: float):
    norm = np.sqrt(np.sum(Z**2, axis=1))
    over = norm > z_cap
    if np.any(over):
        Z = Z.copy()
        Z[over] *= (z_cap / norm[over])[:, None]
    return Z, int(over.sum())


def _check_ensemble(spec: ProblemSpec, mesh: TimeMesh, ensemble: PathEnsemble):
    if not ensemble.mesh.same_as(mesh):
        raise MeshMismatchError("ensemble was simulated on a different mesh")
    if ensemble.d != spec.d:
        raise ConfigurationError(f"spec has d={spec.d} but ensemble has d={ensemble.d}")


def _backward(
    spec: ProblemSpec,
    mesh: TimeMesh,
    ensemble: PathEnsemble,
    estimator: Optional[RegressionEstimator],
    reflect: Callable,
    L: Optional[np.ndarray],
    U: Optional[np.ndarray],
    z_cap: float,
    corrector: bool,
) -> SolutionPanel:
    start = time.perf_counter()
    _check_ensemble(spec, mesh, ensemble)
    estimator = estimator or default_estimator(spec)
    B = ensemble.B
    n, N, d = ensemble.dB.shape
    Y = np.empty((n, N + 1))
    Z = np.zeros((n, N, d))
    Kp = np.zeros((n, N))
    Km = np.zeros((n, N))
    Yse = np.zeros((n, N + 1))
    Y[:, N] = _terminal(spec, mesh, B[:, N])
    breaches = 0
    worst_cond = 1.0
    for i in range(N - 1, -1, -1):
        t = float(mesh.times[i])
        dt = float(mesh.steps[i])
        x = B[:, i]
        feats = _features(spec, x, None if L is None else L[:, i], None if U is None else U[:, i])
        y1 = Y[:, i + 1]
        fit = estimator.fit(feats, y1)
        EY = fit.fitted
        zfit = estimator.fit(feats, (y1 - EY)[:, None] * ensemble.dB[:, i])
        Zi = zfit.fitted.reshape(n, d) / dt
        Zi, nb = _cap_z(Zi, z_cap)
        breaches += nb
        worst_cond = max(worst_cond, fit.condition_number)
        dA = ensemble.dA[:, i]
        step = lambda ey, z: ey + np.asarray(spec.f(t, x, ey, z)) * dt + spec.g_eval(t, x, ey) * dA
        yhat = step(EY, Zi)
        if corrector:
            yhat = EY + np.asarray(spec.f(t, x, yhat, Zi)) * dt + spec.g_eval(t, x, yhat) * dA
        Yse[:, i] = _step_se(step, EY, Zi, yhat, fit.fitted_se(), zfit.fitted_se().reshape(n, d) / dt)
        Y[:, i], Kp[:, i], Km[:, i] = reflect(i, yhat)
        Z[:, i] = Zi
    if breaches:
        logger.warning("Z cap %.3g hit %d times", z_cap, breaches)
    panel = SolutionPanel(mesh, ensemble, Y, Z, Kp, Km, L, U, Y_se=Yse)
    panel.diagnostics.update(
        z_cap_breaches=breaches,
        max_condition_number=worst_cond,
        runtime_s=time.perf_counter() - start,
    )
    _record_residuals(panel)
    return panel


def _step_se(step, EY, Z, yhat, se_ey, se_z) -> np.ndarray:
    """Per-path standard error of one explicit step.

    The standard errors of the fitted ``E[Y_{i+1} | F_i]`` and ``Z_i`` are
    pushed through the step map by one-sided differences of one standard
    error each.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        var = (step(EY + se_ey, Z) - yhat) ** 2
        for k in range(Z.shape[1]):
            Zk = Z.copy()
            Zk[:, k] += np.sign(Z[:, k] + (Z[:, k] == 0)) * se_z[:, k]
            var = var + (step(EY, Zk) - yhat) ** 2
    return np.sqrt(var)


def _record_residuals(panel: SolutionPanel):
    ynorm = 1.0 + np.max(np.abs(panel.Y), axis=1)
    panel.diagnostics.update(
        skorokhod_lower=float(np.max(np.abs(panel.skorokhod_lower()) / ynorm)),
        skorokhod_upper=float(np.max(np.abs(panel.skorokhod_upper()) / ynorm)),
        singularity=panel.singularity_residual(),
    )


def solve_gbsde(
    spec: ProblemSpec,
    mesh: TimeMesh,
    ensemble: PathEnsemble,
    estimator: Optional[RegressionEstimator] = None,
    z_cap: float = Z_CAP,
    corrector: bool = False,
) -> SolutionPanel:
    """Solve a generalized BSDE without reflection."""
    if spec.lower is not None or spec.upper is not None:
        raise ConfigurationError("solve_gbsde takes a spec without barriers")
    zero = lambda i, yhat: (yhat, 0.0, 0.0)
    return _backward(spec, mesh, ensemble, estimator, zero, None, None, z_cap, corrector)


def _check_lower_terminal(spec, mesh, ensemble, L):
    xi = _terminal(spec, mesh, ensemble.B[:, -1])
    gap = xi - L[:, -1]
    if np.any(gap < -TOL_REFLECT):
        p = int(np.argmin(gap))
        raise BarrierCrossingError(
            f"terminal value below lower barrier on path {p} (xi - L_T = {gap[p]:.3g})", path=p, node=mesh.n_steps
        )


def solve_grbsde_one_barrier(
    spec: ProblemSpec,
    mesh: TimeMesh,
    ensemble: PathEnsemble,
    estimator: Optional[RegressionEstimator] = None,
    z_cap: float = Z_CAP,
    corrector: bool = False,
) -> SolutionPanel:
    """Solve with a lower barrier by projection ``Y = max(Yhat, L)``."""
    if spec.lower is None:
        raise ConfigurationError("one-barrier solver needs a lower barrier")
    _check_ensemble(spec, mesh, ensemble)
    L = _barrier_panel(spec.lower, mesh, ensemble.B)
    _check_lower_terminal(spec, mesh, ensemble, L)

    def reflect(i, yhat):
        y = np.maximum(yhat, L[:, i])
        return y, y - yhat, 0.0

    return _backward(spec, mesh, ensemble, estimator, reflect, L, None, z_cap, corrector)


def solve_grbsde_two_barriers(
    spec: ProblemSpec,
    mesh: TimeMesh,
    ensemble: PathEnsemble,
    estimator: Optional[RegressionEstimator] = None,
    z_cap: float = Z_CAP,
    corrector: bool = False,
) -> SolutionPanel:
    """Solve with barriers ``L <= U`` by clamping ``Yhat`` into ``[L, U]``."""
    if spec.lower is None or spec.upper is None:
        raise ConfigurationError("two-barrier solver needs both barriers")
    _check_ensemble(spec, mesh, ensemble)
    L = _barrier_panel(spec.lower, mesh, ensemble.B)
    U = _barrier_panel(spec.upper, mesh, ensemble.B)
    check_barrier_order(L, U)
    _check_lower_terminal(spec, mesh, ensemble, L)
    xi = _terminal(spec, mesh, ensemble.B[:, -1])
    over = xi - U[:, -1]
    if np.any(over > TOL_REFLECT):
        p = int(np.argmax(over))
        raise BarrierCrossingError(
            f"terminal value above upper barrier on path {p} (xi - U_T = {over[p]:.3g})", path=p, node=mesh.n_steps
        )

    def reflect(i, yhat):
        y = np.minimum(np.maximum(yhat, L[:, i]), U[:, i])
        return y, np.maximum(L[:, i] - yhat, 0.0), np.maximum(yhat - U[:, i], 0.0)

    return _backward(spec, mesh, ensemble, estimator, reflect, L, U, z_cap, corrector)


def check_barrier_order(L: np.ndarray, U: np.ndarray):
    """Raise on the first (node, path) where ``L > U``."""
    bad = L > U
    if np.any(bad):
        nodes = np.nonzero(bad.any(axis=0))[0]
        node = int(nodes[0])
        path = int(np.nonzero(bad[:, node])[0][0])
        raise BarrierCrossingError(
            f"barrier crossing L > U at node {node}, path {path} "
            f"(L = {L[path, node]:.6g}, U = {U[path, node]:.6g})",
            path=path,
            node=node,
        )


def solve_penalized(
    spec: ProblemSpec,
    mesh: TimeMesh,
    ensemble: PathEnsemble,
    estimator: Optional[RegressionEstimator] = None,
    penalty: float = 1e3,
    z_cap: float = Z_CAP,
    corrector: bool = False,
) -> SolutionPanel:
    """Lower-barrier problem with the driver augmented by ``penalty (L - y)^+``.

    The penalty term is taken implicitly, which has the closed-form solution
    ``Y = (Yhat + p dt L) / (1 + p dt)`` whenever ``Yhat < L``.
    """
    if not penalty > 0:
        raise ConfigurationError(f"penalty must be positive, got {penalty}")
    if spec.lower is None:
        raise ConfigurationError("penalized solver needs a lower barrier")
    _check_ensemble(spec, mesh, ensemble)
    L = _barrier_panel(spec.lower, mesh, ensemble.B)
    _check_lower_terminal(spec, mesh, ensemble, L)
    dts = mesh.steps

    def reflect(i, yhat):
        w = penalty * dts[i]
        y = np.where(yhat < L[:, i], (yhat + w * L[:, i]) / (1.0 + w), yhat)
        return y, w * np.maximum(L[:, i] - y, 0.0), 0.0

    panel = _backward(spec, mesh, ensemble, estimator, reflect, L, None, z_cap, corrector)
    panel.diagnostics["penalty"] = penalty
    return panel


@dataclass(frozen=True)
class DKBoundReport:
    """Excess of ``K`` increments over their theoretical per-step bound.

    ``step_mean_excess`` is the path average of the excess at each step.
    ``step_se`` combines the cross-path standard error with the root mean
    square regression standard error of the step, since coefficient error
    is common to all paths.
    """

    side: str
    max_excess: float
    step_mean_excess: np.ndarray
    step_se: np.ndarray
    bound: np.ndarray

    def within(self, tol: float = 1e-12, n_se: float = 3.0) -> bool:
        return bool(np.all(self.step_mean_excess <= n_se * self.step_se + tol))


def check_dk_bounds(panel: SolutionPanel, spec: ProblemSpec, side: str = "auto") -> Dict[str, DKBoundReport]:
    """Compare ``K`` increments with the bounds implied by barrier decompositions.

    For the lower barrier::

        dK+_i <= (-f(t_i, L_i, chibar_i) - rhobar_i)^+ dt + (-g(t_i, L_i) - thetabar_i)^+ dA_i

    and symmetrically for the upper barrier with ``f(t_i, U_i, chi_i) - rho_i``.
    """
    sides = []
    if side in ("auto", "lower") and panel.L is not None and (side == "lower" or spec.lower_decomposition is not None):
        sides.append("lower")
    if side in ("auto", "upper") and panel.U is not None and (side == "upper" or spec.upper_decomposition is not None):
        sides.append("upper")
    if side != "auto" and not sides:
        raise ConfigurationError(f"no {side} barrier in panel")
    if side == "auto" and not sides:
        raise ConfigurationError("no barrier decomposition supplied")
    mesh, ens = panel.mesh, panel.ensemble
    B = ens.B
    n, N = panel.K_plus_increments.shape
    d = ens.d
    out = {}
    for s in sides:
        dec = spec.lower_decomposition if s == "lower" else spec.upper_decomposition
        if dec is None:
            raise ConfigurationError(f"missing {s} barrier decomposition")
        barrier = panel.L if s == "lower" else panel.U
        dK = panel.K_plus_increments if s == "lower" else panel.K_minus_increments
        sign = -1.0 if s == "lower" else 1.0
        bound = np.empty((n, N))
        for i in range(N):
            t = float(mesh.times[i])
            x = B[:, i]
            b = barrier[:, i]
            rho = _path_values(dec.rho, i, t, x)
            theta = _path_values(dec.theta, i, t, x)
            if np.any(rho < 0) or np.any(theta < 0):
                raise ConfigurationError("decomposition rho and theta must be nonnegative")
            chi = _path_values(dec.chi, i, t, x, width=d)
            fv = np.broadcast_to(np.asarray(spec.f(t, x, b, chi), dtype=float), (n,))
            gv = spec.g_eval(t, x, b)
            bound[:, i] = (
                np.maximum(sign * fv - rho, 0.0) * mesh.steps[i] + np.maximum(sign * gv - theta, 0.0) * ens.dA[:, i]
            )
        excess = dK - bound
        mean = excess.mean(axis=0)
        se = excess.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros(N)
        if panel.Y_se is not None:
            # regression error is shared across paths and does not average out
            se = np.sqrt(se**2 + np.mean(panel.Y_se[:, :N] ** 2, axis=0))
        out[s] = DKBoundReport(s, float(excess.max(initial=0.0)), mean, se, bound)
    return out


@dataclass(frozen=True)
class ComparisonReport:
    violations: int
    fraction: float
    max_excess: float
    tolerance: np.ndarray


def compare_solutions(panel_a: SolutionPanel, panel_b: SolutionPanel, n_se: float = 3.0) -> ComparisonReport:
    """Count (path, node) pairs with ``Y^a > Y^b + tol``.

    The tolerance at each node is ``n_se`` standard errors of the pathwise
    difference ``Y^a - Y^b`` plus ``1e-12``.
    """
    if not panel_a.mesh.same_as(panel_b.mesh) or panel_a.Y.shape != panel_b.Y.shape:
        raise MeshMismatchError("panels live on different meshes or ensembles")
    if panel_a.ensemble.seed != panel_b.ensemble.seed:
        raise MeshMismatchError("panels were built from different ensembles")
    diff = panel_a.Y - panel_b.Y
    n = diff.shape[0]
    se = diff.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros(diff.shape[1])
    tol = n_se * se + 1e-12
    viol = diff > tol[None, :]
    return ComparisonReport(
        violations=int(viol.sum()),
        fraction=float(viol.mean()),
        max_excess=float(np.max(diff - tol[None, :])),
        tolerance=tol,
    )


def y0_estimate(panel: SolutionPanel):
    """Mean and standard error of ``Y_0`` across paths."""
    return mean_and_se(panel.Y[:, 0])
