"""Backward solvers: unreflected, one barrier, two barriers, penalized."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grbsde_lab import families as fam
from grbsde_lab.engine import binomial_tree, make_mesh, simulate_paths
from grbsde_lab.errors import BarrierCrossingError, ConfigurationError, MeshMismatchError
from grbsde_lab.oracles import tree_dp_reflected
from grbsde_lab.solver import (
    BarrierDecomposition,
    ProblemSpec,
    check_dk_bounds,
    compare_solutions,
    default_estimator,
    solve_gbsde,
    solve_grbsde_one_barrier,
    solve_grbsde_two_barriers,
    solve_penalized,
    y0_estimate,
)

ZERO = fam.DRIVERS["zero"]()


def f_const(c):
    return fam.DRIVERS["constant"](c)


def h_const(v):
    return fam.PATH_FUNCTIONALS["constant"](v)


BROWNIAN = fam.PATH_FUNCTIONALS["brownian"]()


def close(actual, desired, atol=0.0, rtol=0.0):
    actual = np.asarray(actual)
    np.testing.assert_allclose(actual, np.broadcast_to(desired, actual.shape), atol=atol, rtol=rtol)


@pytest.fixture(scope="module")
def mesh():
    return make_mesh(1.0, 20)


@pytest.fixture(scope="module")
def ens(mesh):
    return simulate_paths(mesh, 4000, seed=7)


# -- unreflected -------------------------------------------------------------------


def test_martingale_representation(mesh, ens):
    panel = solve_gbsde(ProblemSpec(f=ZERO, terminal=BROWNIAN), mesh, ens)
    # exact up to the projection noise of dB on the basis
    assert np.max(np.mean(np.abs(panel.Y - ens.B[:, :, 0]), axis=0)) < 0.03
    assert abs(panel.Z[:, :, 0].mean() - 1.0) < 0.02
    assert np.all(panel.Y[:, -1] == ens.B[:, -1, 0])


def test_constant_driver_is_deterministic(mesh, ens):
    panel = solve_gbsde(ProblemSpec(f=f_const(0.5), terminal=h_const(2.0)), mesh, ens)
    close(panel.Y, 2.0 + 0.5 * (1.0 - mesh.times)[None, :], atol=1e-12)
    assert np.all(panel.K_plus_increments == 0) and np.all(panel.K_minus_increments == 0)


def test_g_driver_integrates_against_A(mesh):
    from grbsde_lab.engine import ASpec

    ens = simulate_paths(mesh, 200, seed=1, A_spec=ASpec("ramp", rate=2.0))
    spec = ProblemSpec(f=ZERO, g=fam.G_DRIVERS["constant"](0.25), terminal=h_const(0.0))
    panel = solve_gbsde(spec, mesh, ens)
    close(panel.Y[:, 0], 0.5, atol=1e-12)


def test_quadratic_driver_matches_cole_hopf(mesh):
    ens = simulate_paths(mesh, 20_000, seed=2)
    spec = ProblemSpec(f=fam.DRIVERS["quadratic"](1.0), terminal=BROWNIAN)
    panel = solve_gbsde(spec, mesh, ens, default_estimator(spec, degree=2))
    exact = ens.B[:, :, 0] + 0.5 * (1.0 - mesh.times)[None, :]
    assert np.max(np.mean(np.abs(panel.Y - exact), axis=0)) < 0.05
    assert abs(panel.Z[:, :, 0].mean() - 1.0) < 0.05


def test_terminal_is_exact_bitwise(mesh, ens):
    xi = fam.PATH_FUNCTIONALS["abs"]()
    panel = solve_gbsde(ProblemSpec(f=f_const(-0.3), terminal=xi), mesh, ens)
    assert np.array_equal(panel.Y[:, -1], xi(1.0, ens.B[:, -1]))


def test_z_cap_counts_breaches(mesh, ens):
    spec = ProblemSpec(f=ZERO, terminal=fam.PATH_FUNCTIONALS["brownian"](a=50.0))
    panel = solve_gbsde(spec, mesh, ens, z_cap=10.0)
    assert panel.diagnostics["z_cap_breaches"] > 0
    assert np.max(np.abs(panel.Z)) <= 10.0 * (1 + 1e-12)


def test_unreflected_solver_rejects_barriers(mesh, ens):
    with pytest.raises(ConfigurationError):
        solve_gbsde(ProblemSpec(f=ZERO, terminal=BROWNIAN, lower=-1.0), mesh, ens)


# -- one barrier --------------------------------------------------------------------


def constant_reflection_spec():
    return ProblemSpec(
        f=f_const(-1.0), terminal=h_const(0.0), lower=h_const(0.0), lower_decomposition=BarrierDecomposition()
    )


def test_forced_reflection(mesh, ens):
    panel = solve_grbsde_one_barrier(constant_reflection_spec(), mesh, ens)
    close(panel.Y, 0.0, atol=1e-15)
    close(panel.K_plus_increments, mesh.steps[None, :], rtol=1e-12)
    close(panel.K_plus_increments.sum(axis=1), 1.0, rtol=1e-12)


def test_inactive_barrier_matches_unreflected(mesh, ens):
    f = fam.DRIVERS["linear_quadratic"](a=-0.2, b=0.1, c=0.3)
    free = solve_gbsde(ProblemSpec(f=f, terminal=BROWNIAN), mesh, ens)
    low = solve_grbsde_one_barrier(ProblemSpec(f=f, terminal=BROWNIAN, lower=-1e6), mesh, ens)
    close(low.Y, free.Y, atol=1e-12)
    assert np.all(low.K_plus_increments == 0)


def test_one_barrier_matches_tree():
    mesh = make_mesh(1.0, 16)
    ens = simulate_paths(mesh, 20_000, seed=3)
    spec = ProblemSpec(f=ZERO, terminal=fam.PATH_FUNCTIONALS["abs"](), lower=fam.PATH_FUNCTIONALS["abs"](shift=1.0))
    panel = solve_grbsde_one_barrier(spec, mesh, ens)
    tree = tree_dp_reflected(spec, binomial_tree(1.0, 16))
    assert abs(panel.Y0 - tree.Y0) < 0.02


def test_one_barrier_invariants(mesh, ens):
    spec = ProblemSpec(f=f_const(-0.5), terminal=fam.PATH_FUNCTIONALS["put"](strike=0.2), lower=fam.PATH_FUNCTIONALS["put"](strike=0.2))
    panel = solve_grbsde_one_barrier(spec, mesh, ens)
    assert np.all(panel.K_plus_increments >= 0)
    assert np.all(panel.Y >= panel.L - 1e-12)
    assert panel.singularity_residual() == 0.0
    skor = np.abs(panel.skorokhod_lower())
    assert np.all(skor <= 1e-3 * (1 + np.max(np.abs(panel.Y), axis=1)))


def test_terminal_below_lower_barrier_rejected(mesh, ens):
    with pytest.raises(BarrierCrossingError):
        solve_grbsde_one_barrier(ProblemSpec(f=ZERO, terminal=h_const(0.0), lower=h_const(0.5)), mesh, ens)


# -- two barriers ----------------------------------------------------------------------


def test_two_barriers_constant_inside(mesh, ens):
    spec = ProblemSpec(f=ZERO, terminal=h_const(0.5), lower=h_const(0.0), upper=h_const(1.0))
    panel = solve_grbsde_two_barriers(spec, mesh, ens)
    close(panel.Y, 0.5, atol=1e-12)
    assert np.all(panel.K_plus_increments == 0) and np.all(panel.K_minus_increments == 0)


def test_two_barriers_degenerate_corridor(mesh, ens):
    p = fam.PATH_FUNCTIONALS["linear_time"](a=1.0, b=-2.0)
    spec = ProblemSpec(f=f_const(0.7), terminal=p, lower=p, upper=p)
    panel = solve_grbsde_two_barriers(spec, mesh, ens)
    close(panel.Y, (1.0 - 2.0 * mesh.times)[None, :], atol=1e-12)
    # backward, Y must rise by 2 dt per step; the driver supplies 0.7 dt and K+ the rest
    close(panel.K_plus_increments, 1.3 * mesh.steps[None, :], rtol=1e-9)
    assert np.all(panel.K_minus_increments == 0.0)
    assert panel.singularity_residual() == 0.0


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), drift=st.floats(-2.0, 2.0), width=st.floats(0.1, 1.0))
def test_two_barrier_invariants(seed, drift, width):
    mesh = make_mesh(1.0, 10)
    ens = simulate_paths(mesh, 500, seed=seed)
    spec = ProblemSpec(
        f=fam.DRIVERS["linear_quadratic"](b=drift, R=0.5),
        terminal=fam.PATH_FUNCTIONALS["clip"](lo=-width, hi=width),
        lower=h_const(-width),
        upper=h_const(width),
    )
    panel = solve_grbsde_two_barriers(spec, mesh, ens)
    assert np.all(panel.K_plus_increments >= 0) and np.all(panel.K_minus_increments >= 0)
    assert np.all(np.minimum(panel.K_plus_increments, panel.K_minus_increments) == 0.0)
    assert np.all((panel.Y >= panel.L) & (panel.Y <= panel.U))
    tol = 1e-3 * (1 + np.max(np.abs(panel.Y), axis=1))
    assert np.all(np.abs(panel.skorokhod_lower()) <= tol) and np.all(np.abs(panel.skorokhod_upper()) <= tol)


def test_crossing_barriers_name_the_node(mesh, ens):
    spec = ProblemSpec(f=ZERO, terminal=h_const(0.0), lower=fam.PATH_FUNCTIONALS["linear_time"](a=-1.0, b=2.0), upper=h_const(0.0))
    with pytest.raises(BarrierCrossingError, match="node"):
        solve_grbsde_two_barriers(spec, mesh, ens)


def test_terminal_above_upper_barrier_rejected(mesh, ens):
    spec = ProblemSpec(f=ZERO, terminal=h_const(2.0), lower=h_const(0.0), upper=h_const(1.0))
    with pytest.raises(BarrierCrossingError):
        solve_grbsde_two_barriers(spec, mesh, ens)


# -- dK bounds ------------------------------------------------------------------------------


def test_dk_bound_exact_on_constant_reflection(mesh, ens):
    spec = constant_reflection_spec()
    rep = check_dk_bounds(solve_grbsde_one_barrier(spec, mesh, ens), spec)["lower"]
    close(rep.bound, mesh.steps[None, :], rtol=1e-14)
    assert rep.max_excess <= 1e-12


def test_dk_bound_vacuous_without_reflection(mesh, ens):
    spec = ProblemSpec(f=ZERO, terminal=h_const(0.5), lower=h_const(-10.0), lower_decomposition=BarrierDecomposition())
    rep = check_dk_bounds(solve_grbsde_one_barrier(spec, mesh, ens), spec)["lower"]
    assert rep.max_excess == 0.0


def test_dk_bounds_need_a_decomposition(mesh, ens):
    spec = ProblemSpec(f=ZERO, terminal=h_const(0.5), lower=h_const(0.0))
    with pytest.raises(ConfigurationError):
        check_dk_bounds(solve_grbsde_one_barrier(spec, mesh, ens), spec)


def test_dk_bound_randomized_within_noise(mesh, ens):
    # L_t = |B_t| - 1 = -1 + int sign(B) dB + local time: rho = theta = 0, chi = sign(B)
    spec = ProblemSpec(
        f=f_const(-0.5),
        terminal=fam.PATH_FUNCTIONALS["abs"](shift=1.0),
        lower=fam.PATH_FUNCTIONALS["abs"](shift=1.0),
        lower_decomposition=BarrierDecomposition(chi=fam.CHI_FAMILIES["sign"]()),
    )
    rep = check_dk_bounds(solve_grbsde_one_barrier(spec, mesh, ens), spec)["lower"]
    assert rep.within(tol=1e-12, n_se=3.0)


# -- penalization ------------------------------------------------------------------------------


def test_penalized_converges_from_below(mesh, ens):
    spec = constant_reflection_spec()
    y0 = [solve_penalized(spec, mesh, ens, penalty=p).Y0 for p in (1e2, 1e3, 1e4)]
    assert y0[0] < y0[1] < y0[2] < 0.0
    assert abs(y0[2]) < 1e-3


def test_penalized_skorokhod_residual_decreases(mesh, ens):
    spec = constant_reflection_spec()
    res = [np.max(np.abs(solve_penalized(spec, mesh, ens, penalty=p).skorokhod_lower())) for p in (1e2, 1e3, 1e4)]
    assert res[0] > res[1] > res[2]


def test_penalized_inactive_barrier_is_unreflected(mesh, ens):
    f = fam.DRIVERS["linear_quadratic"](a=-0.2, b=0.1)
    free = solve_gbsde(ProblemSpec(f=f, terminal=BROWNIAN), mesh, ens)
    pen = solve_penalized(ProblemSpec(f=f, terminal=BROWNIAN, lower=-1e6), mesh, ens, penalty=1e3)
    close(pen.Y, free.Y, atol=1e-10)


def test_penalty_must_be_positive(mesh, ens):
    with pytest.raises(ConfigurationError):
        solve_penalized(constant_reflection_spec(), mesh, ens, penalty=0.0)


# -- comparison ---------------------------------------------------------------------------------


def test_identical_specs_compare_equal(mesh, ens):
    spec = ProblemSpec(f=fam.DRIVERS["quadratic"](0.5), terminal=BROWNIAN)
    a = solve_gbsde(spec, mesh, ens)
    assert compare_solutions(a, a).violations == 0


@pytest.mark.parametrize("seed", range(3))
def test_ordered_terminals_and_drivers(mesh, seed):
    ens = simulate_paths(mesh, 3000, seed=seed)
    f = fam.DRIVERS["quadratic"](0.5)
    base = solve_gbsde(ProblemSpec(f=f, terminal=BROWNIAN), mesh, ens)
    lower_xi = solve_gbsde(ProblemSpec(f=f, terminal=fam.PATH_FUNCTIONALS["brownian"](b=-1.0)), mesh, ens)
    lower_f = solve_gbsde(ProblemSpec(f=fam.DRIVERS["linear_quadratic"](b=-1.0, c=0.5), terminal=BROWNIAN), mesh, ens)
    assert compare_solutions(lower_xi, base).violations == 0
    assert compare_solutions(lower_f, base).violations == 0


def test_comparison_rejects_different_meshes(ens):
    spec = ProblemSpec(f=ZERO, terminal=BROWNIAN)
    a = solve_gbsde(spec, make_mesh(1.0, 20), ens)
    other = make_mesh(1.0, 10)
    b = solve_gbsde(spec, other, simulate_paths(other, 4000, seed=7))
    with pytest.raises(MeshMismatchError):
        compare_solutions(a, b)


def test_y0_estimate_has_standard_error(mesh, ens):
    panel = solve_gbsde(ProblemSpec(f=ZERO, terminal=BROWNIAN), mesh, ens)
    m, se = y0_estimate(panel)
    # at t = 0 the regression keeps only the constant: Y_0 is the sample mean of B_T
    assert m == pytest.approx(ens.B[:, -1, 0].mean(), abs=1e-12)
    assert 0.0 <= se <= 1e-12


def test_default_estimator_rejects_unknown_basis():
    with pytest.raises(ConfigurationError):
        default_estimator(ProblemSpec(f=ZERO, terminal=BROWNIAN), basis="fourier")
