"""Time meshes, Brownian path ensembles, regression and exponential weights.

Paths are generated in fixed blocks of :data:`BLOCK_PATHS` paths, each block
drawing from its own Philox stream keyed by ``(seed, block)``.  A given
``(seed, path, step)`` therefore always maps to the same normal draw,
whatever the number of worker threads.
"""

from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigurationError, DomainError

logger = logging.getLogger(__name__)

BLOCK_PATHS = 1024
NORM_TOL = 1e-12
A_KINDS = ("identity", "ramp", "step", "abs_brownian")


@dataclass(frozen=True, eq=False)
class TimeMesh:
    """Strictly increasing time grid on ``[0, T]``."""

    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or t.size < 2:
            raise ConfigurationError("mesh needs at least two nodes")
        if t[0] != 0.0:
            raise ConfigurationError("mesh must start at 0")
        if np.any(np.diff(t) <= 0):
            raise ConfigurationError("mesh times must be strictly increasing")
        t.setflags(write=False)
        object.__setattr__(self, "times", t)

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.times)

    @property
    def dt(self) -> np.ndarray:
        return self.steps

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    def same_as(self, other: "TimeMesh") -> bool:
        return self.times.shape == other.times.shape and bool(np.all(self.times == other.times))


def make_mesh(T: float, n_steps: int) -> TimeMesh:
    """Uniform mesh with ``n_steps`` intervals of length ``T / n_steps``."""
    if not (T > 0) or not math.isfinite(T):
        raise ConfigurationError(f"T must be positive and finite, got {T}")
    if int(n_steps) != n_steps or n_steps < 1:
        raise ConfigurationError(f"n_steps must be a positive integer, got {n_steps}")
    n = int(n_steps)
    times = T * np.arange(n + 1, dtype=float) / n
    times[-1] = T
    return TimeMesh(times)


@dataclass(frozen=True)
class ASpec:
    """Recipe for the nondecreasing integrator ``A``.

    kind
        ``identity``: ``A_t = t``.
        ``ramp``: ``A_t = rate * t``.
        ``step``: a jump of ``height`` at ``t_jump``, smoothed linearly over
        the mesh interval containing it.
        ``abs_brownian``: ``A_t = rate * int_0^t |B_s^1| ds`` with left-point
        increments, so each increment is known at the start of its step.
    """

    kind: str = "identity"
    rate: float = 1.0
    height: float = 1.0
    t_jump: float = 0.5

    def __post_init__(self):
        if self.kind not in A_KINDS:
            raise ConfigurationError(f"unknown A kind {self.kind!r}; expected one of {A_KINDS}")
        if self.rate < 0 or self.height < 0:
            raise ConfigurationError("A must be nondecreasing: rate and height must be >= 0")

    @property
    def deterministic(self) -> bool:
        return self.kind != "abs_brownian"


def _a_increments(spec: ASpec, mesh: TimeMesh, dB: np.ndarray) -> np.ndarray:
    n_paths, n_steps = dB.shape[:2]
    dt = mesh.steps
    if spec.kind == "identity":
        inc = dt
    elif spec.kind == "ramp":
        inc = spec.rate * dt
    elif spec.kind == "step":
        inc = np.zeros(n_steps)
        j = int(np.searchsorted(mesh.times, spec.t_jump, side="right")) - 1
        inc[min(max(j, 0), n_steps - 1)] = spec.height
    else:
        B1 = np.concatenate([np.zeros((n_paths, 1)), np.cumsum(dB[:, :, 0], axis=1)], axis=1)
        return spec.rate * np.abs(B1[:, :-1]) * dt
    return np.broadcast_to(np.asarray(inc, dtype=float), (n_paths, n_steps)).copy()


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """Brownian and ``A`` increments on a mesh.

    ``dB`` has shape ``(n_paths, n_steps, d)``; ``dA`` has shape
    ``(n_paths, n_steps)``.
    """

    mesh: TimeMesh
    dB: np.ndarray
    dA: np.ndarray
    seed: int
    A_spec: ASpec = field(default_factory=ASpec)

    def __post_init__(self):
        if self.dB.ndim != 3 or self.dB.shape[1] != self.mesh.n_steps:
            raise ConfigurationError("dB must have shape (n_paths, n_steps, d)")
        if self.dA.shape != self.dB.shape[:2]:
            raise ConfigurationError("dA must have shape (n_paths, n_steps)")
        if np.any(self.dA < 0):
            raise DomainError("A increments must be nonnegative")
        for arr in (self.dB, self.dA):
            arr.setflags(write=False)

    @property
    def n_paths(self) -> int:
        return self.dB.shape[0]

    @property
    def d(self) -> int:
        return self.dB.shape[2]

    @property
    def brownian_increments(self) -> np.ndarray:
        return self.dB

    @property
    def A_increments(self) -> np.ndarray:
        return self.dA

    @property
    def B(self) -> np.ndarray:
        """Brownian paths, shape ``(n_paths, n_steps + 1, d)``."""
        out = np.zeros((self.n_paths, self.mesh.n_steps + 1, self.d))
        np.cumsum(self.dB, axis=1, out=out[:, 1:])
        return out

    @property
    def A(self) -> np.ndarray:
        """``A`` paths, shape ``(n_paths, n_steps + 1)``, with ``A_0 = 0``."""
        out = np.zeros((self.n_paths, self.mesh.n_steps + 1))
        np.cumsum(self.dA, axis=1, out=out[:, 1:])
        return out


def _block_normals(seed: int, block: int, rows: int, n_steps: int, d: int) -> np.ndarray:
    gen = np.random.Generator(np.random.Philox(key=(seed << 64) | block))
    return gen.standard_normal((rows, n_steps, d))


def simulate_paths(
    mesh: TimeMesh,
    n_paths: int,
    d: int = 1,
    seed: int = 0,
    A_spec: Optional[ASpec] = None,
    threads: int = 1,
) -> PathEnsemble:
    """Simulate Brownian increments with variance ``dt`` per component.

    Parameters
    ----------
    mesh : TimeMesh
    n_paths, d : int
        Number of paths and Brownian dimension.
    seed : int
        Nonnegative seed below ``2**64``.
    A_spec : ASpec, optional
        Integrator recipe; defaults to ``A_t = t``.
    threads : int
        Worker threads for block generation.  Output does not depend on it.
    """
    if n_paths < 1 or d < 1:
        raise ConfigurationError("n_paths and d must be >= 1")
    if not 0 <= seed < 2**64:
        raise ConfigurationError("seed must lie in [0, 2**64)")
    A_spec = A_spec or ASpec()
    n_blocks = -(-n_paths // BLOCK_PATHS)
    rows = [min(BLOCK_PATHS, n_paths - b * BLOCK_PATHS) for b in range(n_blocks)]
    job = lambda b: _block_normals(seed, b, rows[b], mesh.n_steps, d)
    if threads > 1 and n_blocks > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            blocks = list(pool.map(job, range(n_blocks)))
    else:
        blocks = [job(b) for b in range(n_blocks)]
    z = np.concatenate(blocks, axis=0)
    dB = z * np.sqrt(mesh.steps)[None, :, None]
    dA = _a_increments(A_spec, mesh, dB)
    logger.debug("simulated %d paths x %d steps (d=%d, seed=%d)", n_paths, mesh.n_steps, d, seed)
    return PathEnsemble(mesh=mesh, dB=dB, dA=dA, seed=seed, A_spec=A_spec)


Basis = Tuple[Callable[[np.ndarray], np.ndarray], ...]


def polynomial_basis(degree: int = 3, n_vars: int = 1) -> Basis:
    """Monomials of total degree ``<= degree`` in ``n_vars`` state columns."""
    if degree < 0 or n_vars < 1:
        raise ConfigurationError("degree must be >= 0 and n_vars >= 1")
    terms = []
    for k in range(degree + 1):
        for combo in itertools.combinations_with_replacement(range(n_vars), k):
            def term(X, combo=combo):
                out = np.ones(X.shape[0])
                for j in combo:
                    out = out * X[:, j]
                return out
            terms.append(term)
    return tuple(terms)


DEFAULT_KNOTS = (-2.5, -2.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0, 2.5)


def spline_basis(degree: int = 2, knots=DEFAULT_KNOTS, n_vars: int = 1) -> Basis:
    """Truncated-power splines in the first state column.

    Knots sit at ``k * sd`` with ``sd`` the cross-sectional standard
    deviation of the column, so they follow the spread of ``B_t``.  Further
    columns enter linearly.  Local pieces keep tail fits from inheriting the
    curvature of the bulk, which a global polynomial cannot avoid.
    """
    if degree < 1 or n_vars < 1:
        raise ConfigurationError("spline degree must be >= 1 and n_vars >= 1")
    terms = [lambda X: np.ones(X.shape[0])]
    terms += [lambda X, p=p: X[:, 0] ** p for p in range(1, degree + 1)]
    for k in knots:
        terms.append(lambda X, k=float(k): np.maximum(X[:, 0] - k * np.std(X[:, 0]), 0.0) ** degree)
    terms += [lambda X, j=j: X[:, j] for j in range(1, n_vars)]
    return tuple(terms)


@dataclass(frozen=True)
class RegressionFit:
    coef: np.ndarray
    fitted: np.ndarray
    condition_number: float
    rank: int
    leverage: np.ndarray
    residual_std: np.ndarray

    def fitted_se(self) -> np.ndarray:
        """Per-path standard error of the fitted values, ``sigma sqrt(h_pp)``."""
        h = np.sqrt(self.leverage)
        return h * self.residual_std if self.fitted.ndim == 1 else h[:, None] * self.residual_std[None, :]


@dataclass(frozen=True, eq=False)
class RegressionEstimator:
    """Least-squares proxy for conditional expectations.

    The design matrix is column-scaled and solved through its SVD.  Singular
    directions with ``s**2 <= ridge * s_max**2`` are dropped, so the fit is
    an exact orthogonal projection onto the retained span: idempotent, exact
    on targets inside the span, and never singular.
    """

    basis: Basis
    ridge: float = 1e-8

    def __post_init__(self):
        if len(self.basis) == 0:
            raise ConfigurationError("regression basis must be nonempty")
        if self.ridge < 0:
            raise ConfigurationError("ridge must be nonnegative")

    @classmethod
    def polynomial(cls, degree: int = 3, n_vars: int = 1, ridge: float = 1e-8) -> "RegressionEstimator":
        return cls(polynomial_basis(degree, n_vars), ridge)

    def design(self, features: np.ndarray) -> np.ndarray:
        X = np.asarray(features, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        return np.column_stack([np.broadcast_to(f(X), (X.shape[0],)) for f in self.basis])

    def fit(self, features: np.ndarray, targets: np.ndarray) -> RegressionFit:
        Phi = self.design(features)
        y = np.asarray(targets, dtype=float)
        if y.shape[0] != Phi.shape[0]:
            raise ConfigurationError("features and targets must be aligned over paths")
        scale = np.sqrt(np.mean(Phi**2, axis=0))
        scale[scale == 0] = 1.0
        U, s, Vt = np.linalg.svd(Phi / scale, full_matrices=False)
        s_max = s[0] if s.size else 0.0
        keep = s**2 > max(self.ridge, 0.0) * s_max**2 if s_max > 0 else np.zeros_like(s, dtype=bool)
        if self.ridge == 0.0:
            keep &= s > s_max * Phi.shape[0] * np.finfo(float).eps
        rank = int(keep.sum())
        cond = float(s_max / s[keep][-1]) if rank else math.inf
        if rank < Phi.shape[1]:
            logger.debug("regression rank %d of %d basis functions", rank, Phi.shape[1])
        Uk = U[:, keep]
        proj = Uk.T @ y
        fitted = Uk @ proj
        coef = (Vt[keep].T / s[keep]) @ proj
        coef = coef / (scale if y.ndim == 1 else scale[:, None])
        dof = max(Phi.shape[0] - rank, 1)
        resid_std = np.sqrt(np.sum((y - fitted) ** 2, axis=0) / dof)
        return RegressionFit(
            coef=coef,
            fitted=fitted,
            condition_number=cond,
            rank=rank,
            leverage=np.sum(Uk**2, axis=1),
            residual_std=resid_std,
        )


def conditional_expectation(estimator: RegressionEstimator, features_t, targets) -> np.ndarray:
    """Fitted values of ``targets`` regressed on ``basis(features_t)``.

    ``targets`` may be ``(n_paths,)`` or ``(n_paths, m)``; all columns share
    one factorization.
    """
    return estimator.fit(features_t, targets).fitted


def _as_path_array(x, n_paths: int, n_nodes: int) -> np.ndarray:
    a = np.asarray(x, dtype=float)
    if a.ndim == 0:
        return np.full((n_paths, n_nodes), float(a))
    if a.ndim == 1:
        return np.broadcast_to(a[None, :n_nodes], (n_paths, n_nodes))
    return a[:, :n_nodes]


def _as_pi_array(pi, n_paths: int, n_steps: int, d: int) -> np.ndarray:
    p = np.asarray(pi, dtype=float)
    if p.ndim == 0:
        p = np.full(d, float(p))
    if p.ndim == 1:
        p = np.broadcast_to(p, (n_paths, n_steps, d))
    elif p.ndim == 2:
        p = np.broadcast_to(p[None, :n_steps], (n_paths, n_steps, d))
    return p[:, :n_steps]


def gamma_weight(R_path, pi_path, t_idx: int, s_idx: int, ensemble: PathEnsemble) -> np.ndarray:
    """Discrete ``Gamma_{t,s}^pi`` with left-point stochastic integral.

    Parameters
    ----------
    R_path : scalar, (n_steps + 1,) or (n_paths, n_steps + 1)
    pi_path : (d,), (n_steps, d) or (n_paths, n_steps, d), with ``|pi| <= 1``
    t_idx, s_idx : int
        Mesh node indices with ``t_idx <= s_idx``.
    """
    n, m, d = ensemble.dB.shape
    if not 0 <= t_idx <= s_idx <= m:
        raise ConfigurationError(f"need 0 <= t_idx <= s_idx <= {m}, got {t_idx}, {s_idx}")
    R = _as_path_array(R_path, n, m + 1)[:, t_idx:s_idx]
    pi = _as_pi_array(pi_path, n, m, d)[:, t_idx:s_idx]
    norm2 = np.sum(pi**2, axis=-1)
    if np.any(norm2 > (1.0 + NORM_TOL) ** 2):
        raise DomainError(f"|pi| exceeds 1 (max {math.sqrt(norm2.max()):.6g})")
    dB = ensemble.dB[:, t_idx:s_idx]
    dt = ensemble.mesh.steps[t_idx:s_idx]
    expo = np.sum(R * np.sum(pi * dB, axis=-1) - 0.5 * R**2 * norm2 * dt, axis=1)
    return np.exp(expo)


def mean_and_se(x: np.ndarray) -> Tuple[float, float]:
    """Sample mean and its standard error."""
    x = np.asarray(x, dtype=float)
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else 0.0


@dataclass(frozen=True, eq=False)
class BinomialTree:
    """Recombining symmetric random walk with steps ``+-sqrt(dt)``.

    Level ``k`` holds states ``(2j - k) sqrt(dt)`` for ``j = 0..k``, each
    step up or down with probability 1/2.
    """

    T: float
    n_steps: int

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return make_mesh(self.T, self.n_steps).times

    def states(self, level: int) -> np.ndarray:
        j = np.arange(level + 1)
        return (2 * j - level) * math.sqrt(self.dt)

    def weights(self, level: int) -> np.ndarray:
        """Probability of each state at ``level``."""
        from scipy.special import comb

        return comb(level, np.arange(level + 1), exact=False) * 0.5**level

    @property
    def levels(self) -> list:
        return [self.states(k) for k in range(self.n_steps + 1)]

    @property
    def node_count(self) -> int:
        return (self.n_steps + 1) * (self.n_steps + 2) // 2


def binomial_tree(T: float, n_steps: int, d: int = 1) -> BinomialTree:
    """Recombining tree for the one-dimensional scaled random walk."""
    if d != 1:
        raise ConfigurationError(f"binomial tree supports d = 1 only, got d = {d}")
    make_mesh(T, n_steps)
    return BinomialTree(float(T), int(n_steps))
