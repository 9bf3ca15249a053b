"""Acceptance criteria 1 to 10, each at its stated tolerance.

Every test records a one-line PASS/FAIL summary before asserting; the lines
are printed in the terminal summary by ``conftest.py``.
"""

import math
import time
from functools import lru_cache

import numpy as np

from conftest import ACCEPTANCE_RESULTS
from grbsde_lab.engine import gamma_weight, mean_and_se
from grbsde_lab.oracles import default_pi_family, delta_bound, estimate_sup_gamma
from grbsde_lab.scenarios import (
    _R_path,
    CheckContext,
    build,
    bundled_paths,
    bundled_scenario,
    check_comparison,
    resolve,
    run_convergence,
    solve,
    terminal_lambda_bar,
)
from grbsde_lab.solver import ProblemSpec, check_dk_bounds
from grbsde_lab.transforms import (
    PHI_FAMILIES,
    PSI_FAMILIES,
    EnvelopeSpec,
    eval_F,
    eval_F_inv,
    eval_G,
    eval_H,
    eval_H_inv,
    grad_G,
    total_mass,
)

NAMES = sorted(p.stem for p in bundled_paths())
REFLECTED = [n for n in NAMES if bundled_scenario(n)["solver"]["scheme"] in ("one_barrier", "two_barriers")]


def record(key: int, passed: bool, detail: str):
    ACCEPTANCE_RESULTS[key] = (bool(passed), detail)
    return passed


@lru_cache(maxsize=None)
def built(name: str):
    return build(bundled_scenario(name))


@lru_cache(maxsize=None)
def panel(name: str):
    return solve(built(name))


# -- 1 ---------------------------------------------------------------------


def test_c1_cole_hopf_equivalence():
    cfg = bundled_scenario("colehopf_gauss")
    assert cfg["mesh"] == {"T": 1.0, "n_steps": 50} and cfg["ensemble"]["n_paths"] == 20000
    assert cfg["solver"]["regression"]["degree"] == 2  # basis {1, B, B^2}
    t0 = time.perf_counter()
    b = build(cfg)
    p = solve(b)
    runtime = time.perf_counter() - t0
    t = b.mesh.times
    B = b.ensemble.B[:, :, 0]
    exact = B + (1.0 - t) / 2.0
    y_err = float(np.mean(np.abs(p.Y - exact), axis=0).max())
    z_err = float(np.abs(p.Z[:, :, 0].mean(axis=0) - 1.0).max())
    ok = y_err <= 0.05 and z_err <= 0.05 and runtime <= 60.0
    record(1, ok, f"max_t mean|Y-oracle|={y_err:.4f} max_t |mean Z-1|={z_err:.4f} runtime={runtime:.1f}s")
    assert ok


# -- 2 ---------------------------------------------------------------------

DOMAIN_START = {"const": 0.0, "linear": 1.0, "xlogx": math.e, "exp": 0.0}


def test_c2_transform_round_trips():
    t0 = time.perf_counter()
    worst = 0.0
    counted = 0
    for phi in PHI_FAMILIES:
        for psi in PSI_FAMILIES:
            env = EnvelopeSpec(D=DOMAIN_START[phi], phi=phi, psi=psi)
            x = env.D + np.geomspace(1e-4, 1e2, 200)
            # H is only invertible below its total mass; F only where it is finite
            y = eval_H(x, env)
            ok_h = np.isfinite(y) & (y < total_mass(env) * (1 - 1e-9))
            with np.errstate(over="ignore"):
                Fx = eval_F(x, 1.0, env)
            ok_f = np.isfinite(Fx) & (Fx < 1e300)
            err_h = np.abs(eval_H_inv(y[ok_h], env) - x[ok_h]) / x[ok_h]
            err_f = np.abs(eval_F_inv(Fx[ok_f], 1.0, env) - x[ok_f]) / x[ok_f]
            worst = max(worst, float(err_h.max()), float(err_f.max()))
            counted += int(ok_h.sum() + ok_f.sum())
    runtime = time.perf_counter() - t0
    ok = worst <= 1e-8 and runtime <= 5.0
    record(2, ok, f"max relative error={worst:.2e} over {counted} round trips, runtime={runtime:.2f}s")
    assert ok


def test_c2_quadrature_route_round_trips():
    # same grid through the numeric path; outside the 5 s budget
    worst = 0.0
    for phi in ("linear", "exp"):
        for psi in ("one", "linear"):
            env = EnvelopeSpec(D=DOMAIN_START[phi], phi=phi, psi=psi, numeric=True)
            x = env.D + np.geomspace(1e-4, 1e2, 40)
            y = eval_H(x, env)
            ok_h = y < total_mass(env) * (1 - 1e-9)
            with np.errstate(over="ignore"):
                Fx = eval_F(x, 1.0, env)
            ok_f = np.isfinite(Fx) & (Fx < 1e300)
            worst = max(
                worst,
                float(np.max(np.abs(eval_H_inv(y[ok_h], env) - x[ok_h]) / x[ok_h])),
                float(np.max(np.abs(eval_F_inv(Fx[ok_f], 1.0, env) - x[ok_f]) / x[ok_f])),
            )
    assert worst <= 1e-8


# -- 3 ---------------------------------------------------------------------


def richardson(f, v, h):
    d = lambda h: (f(v + h) - f(v - h)) / (2 * h)
    return (4 * d(h / 2) - d(h)) / 3


GRAD_ENVS = [
    EnvelopeSpec(D=1.0, phi="linear", psi="one"),
    EnvelopeSpec(D=1.0, phi="linear", psi="linear"),
    EnvelopeSpec(D=math.e, phi="xlogx", psi="one"),
    EnvelopeSpec(D=0.0, phi="exp", psi="one"),
    EnvelopeSpec(D=0.0, phi="const", psi="linear"),
]


def test_c3_grad_G_against_finite_differences():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for env in GRAD_ENVS:
        # interior points: u > D, eta strictly inside (0, H(u)), x = F(u, c)
        u = env.D + rng.uniform(0.2, 3.0, 100)
        c = rng.uniform(0.05, 1.5, 100)
        eta = rng.uniform(0.1, 0.9, 100) * eval_H(u, env)
        x = eval_F(u, c, env)
        g = grad_G(x, c, eta, env)
        fd = [
            richardson(lambda v: eval_G(v, c, eta, env), x, 1e-3 * x),
            richardson(lambda v: eval_G(x, v, eta, env), c, 1e-3 * c),
            richardson(lambda v: eval_G(x, c, v, env), eta, 1e-3 * eta),
        ]
        for exact, approx in zip((g.dG_dx, g.dG_dc, g.dG_deta), fd):
            worst = max(worst, float(np.max(np.abs(exact - approx) / np.maximum(np.abs(approx), 1e-3))))
    ok = worst <= 1e-6
    record(3, ok, f"max relative discrepancy={worst:.2e} over 5 envelopes x 100 interior points")
    assert ok


# -- 4 ---------------------------------------------------------------------


def test_c4_envelope_sandwich():
    b = built("unbounded_linear_psi1")
    p = panel("unbounded_linear_psi1")
    assert p.Y.shape[0] == 10000
    x = b.envelope.x
    tol = 1e-6
    band = p.mc_band(3.0)
    bad = np.any((p.Y > x + tol + band) | (p.Y < p.L - tol), axis=1)
    n_bad = int(bad.sum())
    s = b.spec
    capped = ProblemSpec(f=s.f, terminal=s.terminal, g=s.g, lower=s.lower, upper=x, d=s.d, name="capped")
    q = solve(b, spec=capped, scheme="two_barriers")
    k_minus = q.K_minus_increments.sum(axis=1)
    ok = n_bad == 0 and float(k_minus.mean()) <= 1e-3
    record(4, ok, f"violations={n_bad}/10000, mean total dK-={k_minus.mean():.2e} (max path {k_minus.max():.2e})")
    assert ok


# -- 5 ---------------------------------------------------------------------


def test_c5_skorokhod_and_singularity():
    worst_ratio = 0.0
    worst_sing = 0.0
    for name in REFLECTED:
        p = panel(name)
        scale = 1e-3 * (1.0 + np.max(np.abs(p.Y), axis=1))
        worst_ratio = max(
            worst_ratio,
            float(np.max(np.abs(p.skorokhod_lower()) / scale)),
            float(np.max(np.abs(p.skorokhod_upper()) / scale)),
        )
        worst_sing = max(worst_sing, float(np.max(np.minimum(p.K_plus_increments, p.K_minus_increments))))
    ok = worst_ratio <= 1.0 and worst_sing == 0.0
    record(5, ok, f"{len(REFLECTED)} scenarios: max residual/tolerance={worst_ratio:.2e}, max min(dK+,dK-)={worst_sing}")
    assert ok


# -- 6 ---------------------------------------------------------------------


def test_c6_dk_bounds():
    p = panel("reflected_constant")
    rep = check_dk_bounds(p, built("reflected_constant").spec)["lower"]
    exact_gap = float(np.max(np.abs(p.K_plus_increments - rep.bound)))
    worst_z = 0.0
    for name in ("dk_bounds_abs", "dk_bounds_drift", "dk_bounds_quadratic"):
        r = check_dk_bounds(panel(name), built(name).spec)["lower"]
        positive = r.step_mean_excess > 1e-12
        if positive.any():
            worst_z = max(worst_z, float(np.max(r.step_mean_excess[positive] / r.step_se[positive])))
    ok = exact_gap <= 1e-12 and worst_z <= 3.0
    record(6, ok, f"constant scenario |dK+-bound|={exact_gap:.1e}, randomized max excess={worst_z:.2f} s.e.")
    assert ok


# -- 7 ---------------------------------------------------------------------


def test_c7_comparison_across_seeds():
    base = bundled_scenario("comparison_quadratic")
    shifts = [{k: v for k, v in c.items() if k.endswith("_shift")} for c in base["checks"] if c["name"] == "comparison"]
    assert shifts
    total = 0
    for seed in range(5):
        cfg = resolve({**base, "ensemble": {**base["ensemble"], "seed": seed}})
        b = build(cfg)
        ctx = CheckContext(b, solve(b))
        for kw in shifts:
            _, violations, _ = check_comparison(ctx, 0.0, **kw)
            total += int(violations)
    ok = total == 0
    record(7, ok, f"violations beyond 3 s.e.={total} over 5 seeds x {len(shifts)} orderings")
    assert ok


# -- 8 ---------------------------------------------------------------------


def test_c8_tree_agreement():
    gaps = {}
    for name in ("tree_abs", "tree_put", "tree_quad"):
        b = built(name)
        assert b.mesh.n_steps == 16 and b.ensemble.n_paths == 20000
        gaps[name] = abs(panel(name).Y0 - b.oracle.Y0)
    ok = max(gaps.values()) <= 0.02
    record(8, ok, " ".join(f"{k}={v:.4f}" for k, v in gaps.items()))
    assert ok


# -- 9 ---------------------------------------------------------------------


def test_c9_gamma_martingale_and_holder_bound():
    worst_mart = 0.0
    worst_holder = -math.inf
    checked = 0
    for name in NAMES:
        b = built(name)
        pi = np.zeros(b.ensemble.d)
        pi[0] = 1.0
        m, se = mean_and_se(gamma_weight(1.0, pi, 0, b.mesh.n_steps, b.ensemble))
        worst_mart = max(worst_mart, abs(m - 1.0) / se)
        lam = terminal_lambda_bar(b)
        if lam is None:
            continue
        R = _R_path(CheckContext(b, None))
        sup = estimate_sup_gamma(lam, R, default_pi_family(b.ensemble.d), b.mesh, b.ensemble)
        delta = delta_bound(lam, R, 2.0, math.inf, b.mesh, b.ensemble)
        gap, se = sup.lower_bound - delta.value, math.hypot(sup.se, delta.se)
        # deterministic Lambda_bar: both estimates are exact, compare directly
        z = gap / se if se > 0 else (0.0 if gap <= 1e-12 * (1 + abs(delta.value)) else math.inf)
        worst_holder = max(worst_holder, z)
        checked += 1
    ok = worst_mart <= 3.0 and worst_holder <= 3.0 and checked > 0
    record(9, ok, f"max |E Gamma-1|={worst_mart:.2f} s.e. on {len(NAMES)}; max (sup-delta)={worst_holder:.2f} s.e. on {checked}")
    assert ok


# -- 10 --------------------------------------------------------------------


def test_c10_convergence():
    ratios = {}
    for name in ("deterministic_ode", "deterministic_ode_exp"):
        rows = run_convergence(bundled_scenario(name), [10, 20, 40, 80])
        ratios[name] = [r_a.Y0_error / r_b.Y0_error for r_a, r_b in zip(rows, rows[1:])]
    ok = all(1.5 <= q <= 3.0 for qs in ratios.values() for q in qs)
    record(10, ok, " ".join(f"{k}=[{', '.join(f'{q:.3f}' for q in v)}]" for k, v in ratios.items()))
    assert ok
