"""Declarative experiment scenarios: parsing, building, running and checking.

A scenario is a JSON object with the sections below (all but ``name``,
``problem`` and ``solver.scheme`` have defaults, see ``DEFAULTS``)::

    name, description
    mesh        {T, n_steps}
    ensemble    {n_paths, seed, d, A: {kind, ...}}
    problem     {driver, g, terminal, lower, upper,
                 lower_decomposition, upper_decomposition}
    solver      {scheme, regression: {degree, ridge}, z_cap, corrector, penalty}
    envelope    {kind: bounded | unbounded, ...}          (optional)
    oracle      {kind: cole_hopf | tree | deterministic_ode | xbar, ...}  (optional)
    checks      [{name, tolerance, label?, ...params}]
    panel_paths number of paths written to the panel CSV

Functions (drivers, terminals, barriers) are referenced by family name and
parameters from ``families``.  ``problem.upper`` may be
``{"family": "envelope"}`` to use the envelope process as upper barrier.
"""

from __future__ import annotations

import dataclasses

import copy
import json
import logging
import math
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from . import families
from .engine import ASpec, PathEnsemble, TimeMesh, binomial_tree, gamma_weight, make_mesh, mean_and_se, simulate_paths
from .errors import ConfigurationError
from .oracles import (
    OracleResult,
    cole_hopf_bound,
    cole_hopf_exact,
    default_pi_family,
    delta_bound,
    deterministic_ode_solution,
    estimate_sup_gamma,
    gaussian_conditional_mean,
    tree_dp_reflected,
)
from .solver import (
    BarrierDecomposition,
    ProblemSpec,
    SolutionPanel,
    check_dk_bounds,
    compare_solutions,
    default_estimator,
    solve_gbsde,
    solve_grbsde_one_barrier,
    solve_grbsde_two_barriers,
    solve_penalized,
)
from .transforms import (
    EnvelopeSpec,
    UNBOUNDED_FAMILIES,
    bounded_envelope,
    check_varphi_monotone,
    eta_process,
    eval_G,
    lambda_bar,
    unbounded_envelope,
)

logger = logging.getLogger(__name__)

SCHEMES = ("gbsde", "one_barrier", "two_barriers", "penalized")
ORACLE_KINDS = ("cole_hopf", "tree", "deterministic_ode", "xbar")
ENVELOPE_KINDS = ("bounded", "unbounded")

DEFAULTS: Dict[str, object] = {
    "description": "",
    "mesh": {"T": 1.0, "n_steps": 50},
    "ensemble": {"n_paths": 10000, "seed": 0, "d": 1, "A": {"kind": "identity"}},
    "solver": {"regression": {"basis": "polynomial", "degree": 3, "ridge": 1e-8}, "z_cap": 1e3, "corrector": False, "penalty": 1e3},
    "checks": [],
    "panel_paths": 16,
}

_SECTIONS = ("name", "description", "mesh", "ensemble", "problem", "solver", "envelope", "oracle", "checks", "panel_paths")


def _merge(base, override):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve(config: dict) -> dict:
    """Fill defaults into a raw scenario dictionary and validate its shape."""
    if not isinstance(config, dict):
        raise ConfigurationError("scenario must be a JSON object")
    unknown = set(config) - set(_SECTIONS)
    if unknown:
        raise ConfigurationError(f"unknown scenario keys {sorted(unknown)}")
    for key in ("name", "problem", "solver"):
        if key not in config:
            raise ConfigurationError(f"scenario is missing {key!r}")
    cfg = _merge(DEFAULTS, config)
    if not isinstance(cfg["name"], str) or not cfg["name"]:
        raise ConfigurationError("scenario name must be a nonempty string")
    scheme = cfg["solver"].get("scheme")
    if scheme not in SCHEMES:
        raise ConfigurationError(f"solver.scheme must be one of {SCHEMES}, got {scheme!r}")
    basis = cfg["solver"].get("regression", {}).get("basis", "polynomial")
    if basis not in ("polynomial", "spline"):
        raise ConfigurationError(f"solver.regression.basis must be 'polynomial' or 'spline', got {basis!r}")
    if "driver" not in cfg["problem"] or "terminal" not in cfg["problem"]:
        raise ConfigurationError("problem needs 'driver' and 'terminal'")
    if "oracle" in cfg and cfg["oracle"].get("kind") not in ORACLE_KINDS:
        raise ConfigurationError(f"oracle.kind must be one of {ORACLE_KINDS}")
    if "envelope" in cfg and cfg["envelope"].get("kind") not in ENVELOPE_KINDS:
        raise ConfigurationError(f"envelope.kind must be one of {ENVELOPE_KINDS}")
    if not isinstance(cfg["checks"], list):
        raise ConfigurationError("checks must be a list")
    for c in cfg["checks"]:
        if not isinstance(c, dict) or c.get("name") not in CHECKS:
            raise ConfigurationError(f"unknown check {c!r}; expected one of {sorted(CHECKS)}")
        if "tolerance" not in c:
            raise ConfigurationError(f"check {c['name']!r} needs a tolerance")
    labels = [c.get("label", c["name"]) for c in cfg["checks"]]
    if len(set(labels)) != len(labels):
        raise ConfigurationError("check labels must be unique; add a 'label' to repeated checks")
    return cfg


def load_scenario(path) -> dict:
    """Read and resolve a scenario JSON file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON: {exc}") from None
    return resolve(raw)


def bundled_paths() -> List[Path]:
    root = resources.files("grbsde_lab") / "scenarios"
    return sorted(Path(str(p)) for p in root.iterdir() if p.name.endswith(".json"))


def bundled_scenario(name: str) -> dict:
    for p in bundled_paths():
        if p.stem == name:
            return load_scenario(p)
    raise ConfigurationError(f"no bundled scenario named {name!r}")


def list_scenarios() -> List[tuple]:
    """``(name, description)`` for every bundled scenario."""
    out = []
    for p in bundled_paths():
        cfg = load_scenario(p)
        out.append((cfg["name"], cfg["description"]))
    return out


# ---------------------------------------------------------------------------
# Building
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class Envelope:
    """Envelope data on the ensemble: ``x`` per path and node, and ``Lambda_bar``."""

    env: EnvelopeSpec
    x: np.ndarray
    eta: np.ndarray
    C: float
    lambda_bar_T: np.ndarray
    Lambda_T: np.ndarray
    cond_lambda_bar: Optional[np.ndarray] = None
    config: dict = field(default_factory=dict)


@dataclass(eq=False)
class BuiltScenario:
    config: dict
    mesh: TimeMesh
    ensemble: PathEnsemble
    spec: ProblemSpec
    envelope: Optional[Envelope] = None
    oracle: Optional[OracleResult] = None


def _a_spec(cfg: dict) -> ASpec:
    a = dict(cfg)
    kind = a.pop("kind", "identity")
    try:
        return ASpec(kind=kind, **a)
    except TypeError as exc:
        raise ConfigurationError(f"ensemble.A: {exc}") from None


def build_ensemble(cfg: dict, threads: int = 1, n_steps: Optional[int] = None) -> tuple:
    m = cfg["mesh"]
    mesh = make_mesh(float(m["T"]), int(n_steps or m["n_steps"]))
    e = cfg["ensemble"]
    ens = simulate_paths(mesh, int(e["n_paths"]), int(e["d"]), int(e["seed"]), _a_spec(e["A"]), threads=threads)
    return mesh, ens


def _decomposition(cfg: Optional[dict], what: str) -> Optional[BarrierDecomposition]:
    if cfg is None:
        return None
    unknown = set(cfg) - {"rho", "theta", "chi", "V"}
    if unknown:
        raise ConfigurationError(f"{what}: unknown keys {sorted(unknown)}")
    parts = {k: families.build_decomposition_part(v, f"{what}.{k}") for k, v in cfg.items()}
    return BarrierDecomposition(**parts)


def build_problem(cfg: dict, upper_override=None) -> ProblemSpec:
    p = cfg["problem"]
    f = families.build(families.DRIVERS, p["driver"], "problem.driver")
    g = None if p.get("g") is None else families.build(families.G_DRIVERS, p["g"], "problem.g")
    terminal = families.build(families.PATH_FUNCTIONALS, p["terminal"], "problem.terminal")
    lower = None if p.get("lower") is None else families.build(families.PATH_FUNCTIONALS, p["lower"], "problem.lower")
    upper = None
    if p.get("upper") is not None:
        if isinstance(p["upper"], dict) and p["upper"].get("family") == "envelope":
            if upper_override is None:
                raise ConfigurationError("problem.upper = envelope needs an envelope section")
            upper = upper_override
        else:
            upper = families.build(families.PATH_FUNCTIONALS, p["upper"], "problem.upper")
    return ProblemSpec(
        f=f,
        terminal=terminal,
        g=g,
        lower=lower,
        upper=upper,
        lower_decomposition=_decomposition(p.get("lower_decomposition"), "problem.lower_decomposition"),
        upper_decomposition=_decomposition(p.get("upper_decomposition"), "problem.upper_decomposition"),
        d=int(cfg["ensemble"]["d"]),
        name=cfg["name"],
    )


def _envelope_spec(e: dict) -> EnvelopeSpec:
    try:
        return EnvelopeSpec(
            D=float(e.get("D", 0.0)),
            phi=e.get("phi", "linear"),
            psi=e.get("psi", "one"),
            phi_scale=float(e.get("phi_scale", 1.0)),
            alpha=float(e.get("alpha", 0.0)),
            beta=float(e.get("beta", 0.0)),
            C=float(e.get("C", 0.0)),
            R=float(e.get("R", 0.0)),
        )
    except ValueError as exc:
        raise ConfigurationError(f"envelope: {exc}") from None


def _eta_nodes(env: EnvelopeSpec, mesh: TimeMesh, ens: PathEnsemble) -> np.ndarray:
    """Deterministic ``eta`` on the mesh nodes."""
    if env.beta != 0 and not ens.A_spec.deterministic:
        raise ConfigurationError("envelopes need a deterministic A when beta != 0")
    dA = np.asarray(ens.dA[0]) if env.beta != 0 else None
    return eta_process(env, mesh.steps, dA)


def _lambda_functional(e: dict) -> Callable[[np.ndarray], np.ndarray]:
    if "Lambda" not in e:
        raise ConfigurationError("unbounded envelope needs a Lambda functional")
    lam = families.build(families.PATH_FUNCTIONALS, e["Lambda"], "envelope.Lambda")
    return lambda T, v: np.asarray(lam(T, np.asarray(v, dtype=float)[:, None]), dtype=float)


def _shifted_mean(h, B1: np.ndarray, tau: np.ndarray, shift: np.ndarray, kinks) -> np.ndarray:
    """``E[h(B_T + shift_t) | B_t]`` column by column."""
    out = np.empty_like(B1)
    for i in range(B1.shape[1]):
        s = float(shift[i])
        out[:, i] = gaussian_conditional_mean(lambda v, s=s: h(v + s), B1[:, i], float(tau[i]), kinks=[k - s for k in kinks])
    return out


def _require_nondecreasing(h, what: str):
    grid = np.linspace(-12.0, 12.0, 4001)
    if np.any(np.diff(h(grid)) < -1e-12):
        raise ConfigurationError(f"{what} must be nondecreasing in B_T for the shifted-mean formula")


def build_envelope(cfg: dict, mesh: TimeMesh, ens: PathEnsemble, spec: ProblemSpec) -> Envelope:
    e = cfg["envelope"]
    if ens.d != 1:
        raise ConfigurationError("envelope scenarios need d = 1")
    env = _envelope_spec(e)
    eta = _eta_nodes(env, mesh, ens)
    B1 = ens.B[:, :, 0]
    n = B1.shape[0]
    T = mesh.T
    if e["kind"] == "bounded":
        a = float(e["a"])
        x_row = np.asarray(bounded_envelope(env, a, eta), dtype=float)
        x = np.broadcast_to(x_row, B1.shape).copy()
        Lam = np.full(n, x_row[-1])
        lb = np.asarray(lambda_bar(Lam, eta[-1], env.C, env), dtype=float)
        return Envelope(env, x, eta, env.C, lb, Lam, None, e)
    family = e.get("family")
    if family not in UNBOUNDED_FAMILIES:
        raise ConfigurationError(f"envelope.family must be one of {UNBOUNDED_FAMILIES}")
    if env.R != 0 and family != "linear_psi0":
        raise ConfigurationError("R != 0 is only supported with the linear_psi0 family")
    lam_fn = _lambda_functional(e)
    kinks = [float(k) for k in e.get("kinks", [])]
    etaT, C = float(eta[-1]), env.C
    h = lambda v: np.asarray(lambda_bar(lam_fn(T, v), etaT, C, env), dtype=float)
    tau = T - mesh.times
    shift = env.R * tau if env.R else np.zeros_like(tau)
    if env.R:
        _require_nondecreasing(h, "Lambda_bar")
    cond = _shifted_mean(h, B1, tau, shift, kinks)
    x = unbounded_x(family, cond, C, eta, env)
    return Envelope(env, x, eta, C, h(B1[:, -1]), lam_fn(T, B1[:, -1]), cond, e)


def unbounded_x(family: str, cond: np.ndarray, C: float, eta: np.ndarray, env: EnvelopeSpec) -> np.ndarray:
    return unbounded_envelope(family, cond, C, eta[None, :], env.D, m=C if C > 0 else None)


def check_h1(env: Envelope, spec: ProblemSpec, mesh: TimeMesh, ens: PathEnsemble):
    """Pathwise ``xi <= Lambda`` and ``L_s <= Lambda``."""
    B = ens.B
    Lam = env.Lambda_T
    xi = np.asarray(spec.terminal(mesh.T, B[:, -1]), dtype=float)
    if np.any(xi > Lam + 1e-12):
        p = int(np.argmax(xi - Lam))
        raise ConfigurationError(f"terminal value exceeds Lambda on path {p}")
    if spec.lower is not None:
        for i, t in enumerate(mesh.times):
            L = np.asarray(spec.lower(float(t), B[:, i]), dtype=float)
            if np.any(L > Lam + 1e-12):
                p = int(np.argmax(L - Lam))
                raise ConfigurationError(f"lower barrier exceeds Lambda at node {i}, path {p}")


def build_oracle(cfg: dict, mesh: TimeMesh, ens: PathEnsemble, spec: ProblemSpec, envelope: Optional[Envelope]):
    o = cfg.get("oracle")
    if o is None:
        return None
    kind = o["kind"]
    if kind == "cole_hopf":
        params = {k: v for k, v in o.items() if k not in ("kind",)}
        try:
            return cole_hopf_exact(mesh=mesh, ensemble=ens, **params)
        except TypeError as exc:
            raise ConfigurationError(f"oracle: {exc}") from None
    if kind == "tree":
        tree = binomial_tree(mesh.T, int(o.get("n_steps", mesh.n_steps)))
        return tree_dp_reflected(spec, tree)
    if kind == "deterministic_ode":
        if envelope is None or envelope.config.get("kind") != "bounded":
            raise ConfigurationError("deterministic_ode oracle needs a bounded envelope section")
        res = deterministic_ode_solution(envelope.env, float(envelope.config["a"]), mesh, method=o.get("method", "closed"))
        return res
    if kind == "xbar":
        R = float(o.get("R", 0.0))
        xi = spec.terminal
        h = lambda v: np.asarray(xi(mesh.T, np.asarray(v, dtype=float)[:, None]), dtype=float)
        if R:
            _require_nondecreasing(h, "terminal")
        tau = mesh.T - mesh.times
        Y = _shifted_mean(h, ens.B[:, :, 0], tau, R * tau, [float(k) for k in o.get("kinks", [])])
        return OracleResult(Y_ref=Y, provenance=f"xbar:gaussian_shift:R={R:g}")
    raise ConfigurationError(f"unknown oracle kind {kind!r}")


def validate(cfg: dict) -> None:
    """Instantiate every family of a resolved scenario without simulating."""
    build_problem(_without_envelope_upper(cfg))
    if _upper_is_envelope(cfg) and "envelope" not in cfg:
        raise ConfigurationError("problem.upper = envelope needs an envelope section")
    if "envelope" in cfg:
        _envelope_spec(cfg["envelope"])
        if cfg["envelope"]["kind"] == "unbounded":
            _lambda_functional(cfg["envelope"])
    make_mesh(float(cfg["mesh"]["T"]), int(cfg["mesh"]["n_steps"]))
    _a_spec(cfg["ensemble"]["A"])


def build(cfg: dict, threads: int = 1, n_steps: Optional[int] = None) -> BuiltScenario:
    """Simulate the ensemble and assemble problem, envelope and oracle."""
    mesh, ens = build_ensemble(cfg, threads, n_steps)
    envelope = None
    if "envelope" in cfg:
        base = build_problem(_without_envelope_upper(cfg))
        envelope = build_envelope(cfg, mesh, ens, base)
        check_h1(envelope, base, mesh, ens)
        spec = build_problem(cfg, upper_override=envelope.x) if _upper_is_envelope(cfg) else base
    else:
        spec = build_problem(cfg)
    oracle = build_oracle(cfg, mesh, ens, spec, envelope)
    return BuiltScenario(cfg, mesh, ens, spec, envelope, oracle)


def _upper_is_envelope(cfg: dict) -> bool:
    u = cfg["problem"].get("upper")
    return isinstance(u, dict) and u.get("family") == "envelope"


def _without_envelope_upper(cfg: dict) -> dict:
    if not _upper_is_envelope(cfg):
        return cfg
    out = copy.deepcopy(cfg)
    out["problem"]["upper"] = None
    return out


def solve(built: BuiltScenario, spec: Optional[ProblemSpec] = None, scheme: Optional[str] = None, **overrides) -> SolutionPanel:
    """Run the configured scheme (or ``scheme``) on the built ensemble."""
    s = built.config["solver"]
    spec = spec or built.spec
    scheme = scheme or s["scheme"]
    reg = s["regression"]
    est = default_estimator(spec, int(reg["degree"]), float(reg["ridge"]), reg.get("basis", "polynomial"), reg.get("knots"))
    kw = dict(z_cap=float(s["z_cap"]), corrector=bool(s["corrector"]))
    kw.update({k: v for k, v in overrides.items() if k in ("z_cap", "corrector")})
    args = (spec, built.mesh, built.ensemble, est)
    if scheme == "gbsde":
        return solve_gbsde(*args, **kw)
    if scheme == "one_barrier":
        return solve_grbsde_one_barrier(*args, **kw)
    if scheme == "two_barriers":
        return solve_grbsde_two_barriers(*args, **kw)
    if scheme == "penalized":
        return solve_penalized(*args, penalty=float(overrides.get("penalty", s["penalty"])), **kw)
    raise ConfigurationError(f"unknown scheme {scheme!r}")


# ---------------------------------------------------------------------------
# Checks
# ---------------------------------------------------------------------------


@dataclass
class CheckOutcome:
    name: str
    passed: bool
    value: float
    tolerance: float
    details: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        out = {"name": self.name, "passed": bool(self.passed), "value": _num(self.value), "tolerance": _num(self.tolerance)}
        if self.details:
            out["details"] = {k: _num(v) if isinstance(v, (int, float, np.floating, np.integer)) else v for k, v in self.details.items()}
        return out


def _num(v):
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


@dataclass(eq=False)
class CheckContext:
    built: BuiltScenario
    panel: SolutionPanel

    @property
    def B1(self) -> np.ndarray:
        return self.built.ensemble.B[:, :, 0]


def _need(obj, what: str):
    if obj is None:
        raise ConfigurationError(f"check needs {what}")
    return obj


def _oracle_paths(ctx: CheckContext) -> np.ndarray:
    o = _need(ctx.built.oracle, "an oracle")
    Y = o.Y_ref
    if isinstance(Y, list):
        raise ConfigurationError("path checks need a path oracle, not a tree oracle")
    return np.broadcast_to(np.asarray(Y), ctx.panel.Y.shape)


def check_oracle_path_error(ctx, tol, **_):
    err = np.mean(np.abs(ctx.panel.Y - _oracle_paths(ctx)), axis=0)
    v = float(err.max())
    return v <= tol, v, {"worst_node": int(err.argmax())}


def check_oracle_z_error(ctx, tol, **_):
    o = _need(ctx.built.oracle, "an oracle")
    Zref = _need(o.Z_ref, "an oracle with Z")
    gap = np.abs(ctx.panel.Z.mean(axis=0) - np.asarray(Zref).mean(axis=0))
    v = float(gap.max())
    return v <= tol, v, {}


def check_oracle_y0_error(ctx, tol, **_):
    o = _need(ctx.built.oracle, "an oracle")
    m, se = mean_and_se(ctx.panel.Y[:, 0])
    v = abs(m - o.Y0)
    return v <= tol, v, {"Y0": m, "Y0_se": se, "oracle_Y0": o.Y0}


def check_terminal_exact(ctx, tol, **_):
    spec, mesh = ctx.built.spec, ctx.built.mesh
    xi = np.asarray(spec.terminal(mesh.T, ctx.built.ensemble.B[:, -1]), dtype=float)
    v = float(np.max(np.abs(ctx.panel.Y[:, -1] - np.broadcast_to(xi, ctx.panel.Y[:, -1].shape))))
    return v <= tol, v, {}


def check_skorokhod(ctx, tol, **_):
    d = ctx.panel.diagnostics
    v = max(d["skorokhod_lower"], d["skorokhod_upper"])
    return v <= tol, v, {}


def check_singularity(ctx, tol, **_):
    v = ctx.panel.singularity_residual()
    return v <= tol, v, {}


def check_dk_bounds_exact(ctx, tol, **_):
    reports = check_dk_bounds(ctx.panel, ctx.built.spec)
    v = 0.0
    for side, rep in reports.items():
        dK = ctx.panel.K_plus_increments if side == "lower" else ctx.panel.K_minus_increments
        v = max(v, float(np.max(np.abs(dK - rep.bound))))
    return v <= tol, v, {}


def check_dk_bounds_mc(ctx, tol, **_):
    reports = check_dk_bounds(ctx.panel, ctx.built.spec)
    z = 0.0
    details = {}
    for side, rep in reports.items():
        with np.errstate(divide="ignore", invalid="ignore"):
            zs = np.where(rep.step_mean_excess > 1e-12, rep.step_mean_excess / np.maximum(rep.step_se, 1e-300), 0.0)
        z = max(z, float(zs.max(initial=0.0)))
        details[f"{side}_max_excess"] = rep.max_excess
        details[f"{side}_mean_active_bound"] = float(rep.bound.mean())
    return z <= tol, z, details


def _sandwich_violations(panel: SolutionPanel, x: np.ndarray, tol: float):
    band = panel.mc_band(3.0)
    above = panel.Y > x + tol + band
    below = np.zeros_like(above) if panel.L is None else panel.Y < panel.L - tol
    bad = np.any(above | below, axis=1)
    return int(bad.sum()), float(np.max(panel.Y - x - band))


def check_sandwich(ctx, tol, **_):
    env = _need(ctx.built.envelope, "an envelope")
    n_bad, worst = _sandwich_violations(ctx.panel, env.x, tol)
    return n_bad == 0, n_bad, {"max_excess_over_band": worst, "n_paths": ctx.panel.Y.shape[0]}


def check_upper_k_minus(ctx, tol, **_):
    b = ctx.built
    env = _need(b.envelope, "an envelope")
    spec = b.spec
    if spec.upper is None:
        spec = ProblemSpec(
            f=spec.f, terminal=spec.terminal, g=spec.g, lower=spec.lower, upper=env.x,
            lower_decomposition=spec.lower_decomposition, d=spec.d, name=spec.name + "_upper_envelope",
        )
        panel = solve(b, spec=spec, scheme="two_barriers")
    else:
        panel = ctx.panel
    total = panel.K_minus_increments.sum(axis=1)
    v = float(total.mean())
    return v <= tol, v, {"max_path_total": float(total.max()), "paths_touching": int((total > 0).sum())}


def check_envelope_dual_route(ctx, tol, n_paths: int = 32, **_):
    env = _need(ctx.built.envelope, "an envelope")
    cfg = env.config
    if cfg["kind"] == "bounded":
        res = deterministic_ode_solution(env.env, float(cfg["a"]), ctx.built.mesh, method="ivp")
        other = np.asarray(res.Y_ref)[0]
        v = float(np.max(np.abs(env.x[0] - other) / np.maximum(1.0, np.abs(other))))
        return v <= tol, v, {"route": "ivp"}
    # second route: G through quadrature instead of the closed forms
    numeric = dataclasses.replace(env.env, numeric=True)
    cond = env.cond_lambda_bar[:n_paths]
    G = np.asarray(eval_G(cond, env.C, np.broadcast_to(env.eta, cond.shape), numeric), dtype=float)
    ref = env.x[:n_paths]
    v = float(np.max(np.abs(G - ref) / np.maximum(1.0, np.abs(ref))))
    return v <= tol, v, {"route": "eval_G_quadrature"}


def check_varphi_monotone_(ctx, tol, **_):
    env = _need(ctx.built.envelope, "an envelope")
    rep = check_varphi_monotone(env.env, c_max=max(env.C, 0.0), tol=tol)
    return rep.ok, 0.0 if rep.ok else 1.0, {} if rep.ok else {"witness_x": rep.witness_x, "witness_c": rep.witness_c}


def _R_path(ctx) -> float:
    b = ctx.built
    if b.envelope is not None:
        return float(b.envelope.env.R)
    if b.config.get("oracle", {}).get("kind") == "xbar":
        return float(b.config["oracle"].get("R", 0.0))
    return 0.0


def terminal_lambda_bar(built: BuiltScenario) -> Optional[np.ndarray]:
    """Per-path ``Lambda_bar`` of a scenario, when it defines one."""
    if built.envelope is not None:
        return built.envelope.lambda_bar_T
    o = built.config.get("oracle", {})
    xiT = None
    if o.get("kind") in ("cole_hopf", "xbar"):
        xiT = np.asarray(built.spec.terminal(built.mesh.T, built.ensemble.B[:, -1]), dtype=float)
    if o.get("kind") == "cole_hopf":
        g = float(o["gamma"])
        return np.expm1(g * np.abs(xiT)) / g
    if o.get("kind") == "xbar":
        return xiT
    return None


def check_gamma_martingale(ctx, tol, R: Optional[float] = None, **_):
    b = ctx.built
    R = float(R if R is not None else (_R_path(ctx) or 1.0))
    pi = np.zeros(b.ensemble.d)
    pi[0] = 1.0
    w = gamma_weight(R, pi, 0, b.mesh.n_steps, b.ensemble)
    m, se = mean_and_se(w)
    z = abs(m - 1.0) / se if se > 0 else (0.0 if m == 1.0 else math.inf)
    return z <= tol, z, {"mean": m, "se": se, "R": R}


def check_holder_bound(ctx, tol, q: float = 2.0, n_cap: float = math.inf, **_):
    b = ctx.built
    lam = _need(terminal_lambda_bar(b), "a Lambda_bar")
    return holder_outcome(lam, _R_path(ctx), b, tol, q, n_cap)


def holder_outcome(lam, R, b: BuiltScenario, tol, q=2.0, n_cap=math.inf):
    sup = estimate_sup_gamma(lam, R, default_pi_family(b.ensemble.d), b.mesh, b.ensemble)
    delta = delta_bound(lam, R, q, n_cap, b.mesh, b.ensemble)
    se = math.hypot(delta.se, sup.se)
    gap = sup.lower_bound - delta.value
    z = gap / se if se > 0 else (0.0 if gap <= 0 else math.inf)
    return z <= tol, z, {"delta": delta.value, "delta_se": delta.se, "sup_lower_bound": sup.lower_bound}


def check_sup_gamma_vs_xbar(ctx, tol, **_):
    b = ctx.built
    lam = _need(terminal_lambda_bar(b), "a Lambda_bar")
    R = _R_path(ctx)
    sup = estimate_sup_gamma(lam, R, default_pi_family(b.ensemble.d), b.mesh, b.ensemble)
    if b.envelope is not None:
        xbar0 = float(np.mean(b.envelope.cond_lambda_bar[:, 0]))
    else:
        xbar0 = _need(b.oracle, "an oracle").Y0
    z = abs(sup.value - xbar0) / sup.se if sup.se > 0 else 0.0
    return z <= tol, z, {"sup": sup.value, "se": sup.se, "argmax": sup.argmax, "xbar0": xbar0}


def check_penalty_monotone(ctx, tol, penalties=(1e2, 1e3, 1e4), **_):
    b = ctx.built
    y0, skor = [], []
    for p in penalties:
        panel = solve(b, scheme="penalized", penalty=float(p))
        y0.append(panel.Y0)
        skor.append(float(np.max(np.abs(panel.skorokhod_lower()))))
    ref = ctx.panel.Y0
    # largest violation of: Y0 rising in the penalty, below the projection, residual falling
    gaps = [y0[k] - y0[k + 1] for k in range(len(y0) - 1)]
    gaps += [y - ref for y in y0]
    gaps += [abs(skor[k + 1]) - abs(skor[k]) for k in range(len(skor) - 1)]
    v = max(0.0, max(gaps))
    return v <= tol, v, {"Y0": y0, "skorokhod": skor, "projection_Y0": ref}


def check_colehopf_bound(ctx, tol, **_):
    b = ctx.built
    o = b.config.get("oracle", {})
    if o.get("kind") != "cole_hopf" or o.get("xi_kind") != "brownian":
        raise ConfigurationError("colehopf_bound needs a cole_hopf oracle with xi_kind brownian")
    bound = cole_hopf_bound(float(o["gamma"]), b.mesh, b.ensemble)
    v = float(np.max(np.abs(np.asarray(b.oracle.Y_ref)) - bound))
    return v <= tol, v, {}


def _variant(built: BuiltScenario, terminal_shift: float = 0.0, driver_shift: float = 0.0) -> ProblemSpec:
    s = built.spec
    xi, f = s.terminal, s.f
    term = (lambda t, x: np.asarray(xi(t, x)) + terminal_shift) if terminal_shift else xi
    drv = (lambda t, x, y, z: np.asarray(f(t, x, y, z)) + driver_shift) if driver_shift else f
    lower = s.lower
    if lower is not None and terminal_shift < 0:
        lower = lambda t, x, L=s.lower: np.asarray(L(t, x)) + terminal_shift
    return ProblemSpec(f=drv, terminal=term, g=s.g, lower=lower, upper=s.upper, d=s.d, name=s.name + "_variant")


def check_comparison(ctx, tol, terminal_shift: float = 0.0, driver_shift: float = 0.0, **_):
    if terminal_shift > 0 or driver_shift > 0 or (terminal_shift == 0 and driver_shift == 0):
        raise ConfigurationError("comparison needs a negative terminal_shift or driver_shift")
    a = solve(ctx.built, spec=_variant(ctx.built, terminal_shift, driver_shift))
    rep = compare_solutions(a, ctx.panel)
    return rep.violations <= tol, rep.violations, {"fraction": rep.fraction, "max_excess": rep.max_excess}


CHECKS: Dict[str, Callable] = {
    "oracle_path_error": check_oracle_path_error,
    "oracle_z_error": check_oracle_z_error,
    "oracle_y0_error": check_oracle_y0_error,
    "terminal_exact": check_terminal_exact,
    "skorokhod": check_skorokhod,
    "singularity": check_singularity,
    "dk_bounds_exact": check_dk_bounds_exact,
    "dk_bounds_mc": check_dk_bounds_mc,
    "sandwich": check_sandwich,
    "upper_k_minus": check_upper_k_minus,
    "envelope_dual_route": check_envelope_dual_route,
    "varphi_monotone": check_varphi_monotone_,
    "gamma_martingale": check_gamma_martingale,
    "holder_bound": check_holder_bound,
    "sup_gamma_vs_xbar": check_sup_gamma_vs_xbar,
    "penalty_monotone": check_penalty_monotone,
    "colehopf_bound": check_colehopf_bound,
    "comparison": check_comparison,
}


def run_check(ctx: CheckContext, check: dict) -> CheckOutcome:
    params = {k: v for k, v in check.items() if k not in ("name", "tolerance", "label")}
    tol = float(check["tolerance"])
    try:
        passed, value, details = CHECKS[check["name"]](ctx, tol, **params)
    except TypeError as exc:
        raise ConfigurationError(f"check {check['name']!r}: {exc}") from None
    return CheckOutcome(check.get("label", check["name"]), bool(passed), float(value), tol, details)


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class ScenarioResult:
    config: dict
    built: BuiltScenario
    panel: SolutionPanel
    checks: List[CheckOutcome]
    runtimes: Dict[str, float]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def report(self) -> dict:
        d = self.panel.diagnostics
        m, se = mean_and_se(self.panel.Y[:, 0])
        return {
            "name": self.config["name"],
            "seed": int(self.config["ensemble"]["seed"]),
            "passed": self.passed,
            "checks": [c.as_dict() for c in self.checks],
            "residuals": {
                "skorokhod_lower": _num(d["skorokhod_lower"]),
                "skorokhod_upper": _num(d["skorokhod_upper"]),
                "singularity": _num(d["singularity"]),
                "z_cap_breaches": int(d["z_cap_breaches"]),
                "max_condition_number": _num(d["max_condition_number"]),
            },
            "Y0": {"mean": _num(m), "se": _num(se)},
            "runtimes": {k: _num(v) for k, v in self.runtimes.items()},
        }


def run_scenario(cfg: dict, threads: int = 1) -> ScenarioResult:
    """Build, solve and check one resolved scenario."""
    t0 = time.perf_counter()
    built = build(cfg, threads=threads)
    t1 = time.perf_counter()
    panel = solve(built)
    t2 = time.perf_counter()
    ctx = CheckContext(built, panel)
    outcomes = []
    for c in cfg["checks"]:
        out = run_check(ctx, c)
        logger.info("%s: %s value=%.6g tolerance=%.3g", out.name, "pass" if out.passed else "FAIL", out.value, out.tolerance)
        outcomes.append(out)
    t3 = time.perf_counter()
    runtimes = {"build_s": t1 - t0, "solve_s": t2 - t1, "checks_s": t3 - t2, "total_s": t3 - t0}
    return ScenarioResult(cfg, built, panel, outcomes, runtimes)


@dataclass
class ConvergenceRow:
    n_steps: int
    Y0_error: float
    Y0_se: float
    skorokhod_residual: float
    runtime_s: float


def run_convergence(cfg: dict, steps: List[int], threads: int = 1) -> List[ConvergenceRow]:
    """Y0 error against the scenario oracle under mesh refinement."""
    if "oracle" not in cfg:
        raise ConfigurationError("convergence runs need a scenario with an oracle")
    rows = []
    for n in steps:
        t0 = time.perf_counter()
        built = build(cfg, threads=threads, n_steps=int(n))
        panel = solve(built)
        m, se = mean_and_se(panel.Y[:, 0])
        d = panel.diagnostics
        rows.append(
            ConvergenceRow(int(n), abs(m - built.oracle.Y0), se, max(d["skorokhod_lower"], d["skorokhod_upper"]), time.perf_counter() - t0)
        )
    return rows


def convergence_monotone(rows: List[ConvergenceRow], floor: float = 1e-12) -> bool:
    """Errors do not increase beyond three standard errors (or ``floor``)."""
    return all(b.Y0_error <= a.Y0_error + 3.0 * math.hypot(a.Y0_se, b.Y0_se) + floor for a, b in zip(rows, rows[1:]))


def convergence_ratios(rows: List[ConvergenceRow]) -> List[float]:
    return [a.Y0_error / b.Y0_error if b.Y0_error > 0 else math.inf for a, b in zip(rows, rows[1:])]
