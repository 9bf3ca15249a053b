"""Scenario loading, validation, checks and reports."""

import copy
import json
import math
from pathlib import Path

import pytest

from grbsde_lab.errors import ConfigurationError
from grbsde_lab.scenarios import (
    CHECKS,
    bundled_paths,
    bundled_scenario,
    convergence_monotone,
    convergence_ratios,
    list_scenarios,
    resolve,
    run_convergence,
    run_scenario,
    validate,
)

GOLDEN = Path(__file__).parent / "golden"
NAMES = sorted(p.stem for p in bundled_paths())


def test_catalog_has_at_least_eight_scenarios():
    cat = dict(list_scenarios())
    assert len(cat) >= 8
    assert all(desc for desc in cat.values())


def test_catalog_maps_envelopes_to_their_formulas():
    cat = dict(list_scenarios())
    assert "e^{\\ln(D) e^{a-\\eta_s}}" in cat["bounded_loglog"]
    assert "x_s = G(E(Lambda_bar|F_s), C_s, eta_s)" in cat["unbounded_linear_psi1"]


@pytest.mark.parametrize("name", NAMES)
def test_bundled_scenarios_validate(name):
    cfg = bundled_scenario(name)
    assert cfg["name"] == name
    validate(cfg)


@pytest.mark.parametrize("name", NAMES)
def test_bundled_scenarios_pass_their_checks(name):
    result = run_scenario(bundled_scenario(name))
    failed = [(c.name, c.value, c.tolerance) for c in result.checks if not c.passed]
    assert not failed


def minimal():
    return {
        "name": "tiny",
        "mesh": {"T": 1.0, "n_steps": 4},
        "ensemble": {"n_paths": 64},
        "problem": {"driver": 0.0, "terminal": 0.5, "lower": 0.0, "upper": 1.0},
        "solver": {"scheme": "two_barriers"},
        "checks": [{"name": "singularity", "tolerance": 0.0}],
    }


@pytest.mark.parametrize(
    "mutate,match",
    [
        (lambda c: c.update(extra=1), "unknown scenario keys"),
        (lambda c: c.pop("problem"), "missing"),
        (lambda c: c["solver"].update(scheme="implicit"), "scheme"),
        (lambda c: c["solver"].update(regression={"basis": "fourier"}), "basis"),
        (lambda c: c["checks"].append({"name": "nope", "tolerance": 1}), "unknown check"),
        (lambda c: c["checks"].append({"name": "singularity"}), "tolerance"),
        (lambda c: c["checks"].append({"name": "singularity", "tolerance": 0.0}), "unique"),
        (lambda c: c.update(oracle={"kind": "magic"}), "oracle.kind"),
        (lambda c: c["problem"].update(driver={"family": "nope"}), "unknown family"),
    ],
)
def test_invalid_configs_are_rejected(mutate, match):
    cfg = minimal()
    mutate(cfg)
    with pytest.raises(ConfigurationError, match=match):
        validate(resolve(cfg))


def test_defaults_are_filled():
    cfg = resolve(minimal())
    assert cfg["ensemble"]["seed"] == 0
    assert cfg["solver"]["regression"]["degree"] == 3


def test_report_schema_matches_golden():
    golden = json.loads((GOLDEN / "reflected_constant_report.json").read_text())
    report = run_scenario(bundled_scenario("reflected_constant")).report()
    assert set(report) == set(golden) | {"runtimes"}
    assert set(report["runtimes"]) == {"build_s", "solve_s", "checks_s", "total_s"}
    assert set(report["residuals"]) == set(golden["residuals"])
    assert [c["name"] for c in report["checks"]] == [c["name"] for c in golden["checks"]]
    for got, want in zip(report["checks"], golden["checks"]):
        assert {"name", "passed", "value", "tolerance"} <= set(got)
        assert got["passed"] == want["passed"]
        assert got["value"] == pytest.approx(want["value"], abs=1e-12)
        assert got["tolerance"] == want["tolerance"]
    assert report["Y0"] == pytest.approx(golden["Y0"], abs=1e-12)


def test_report_is_strict_json():
    cfg = bundled_scenario("two_barrier_const")
    report = run_scenario(cfg).report()
    json.dumps(report, allow_nan=False)


def test_failing_check_is_reported_not_raised():
    cfg = copy.deepcopy(bundled_scenario("reflected_constant"))
    # Y = L everywhere with dK = dt: the lower-barrier residual is exactly 0, never below it
    cfg["checks"] = [{"name": "skorokhod", "tolerance": -1.0}]
    result = run_scenario(resolve(cfg))
    assert not result.passed
    assert result.report()["checks"][0]["passed"] is False


def test_every_check_is_exercised_by_a_bundled_scenario():
    used = {c["name"] for n in NAMES for c in bundled_scenario(n)["checks"]}
    assert used == set(CHECKS)


def test_convergence_rows_and_ratios():
    rows = run_convergence(bundled_scenario("deterministic_ode"), [10, 20, 40])
    assert [r.n_steps for r in rows] == [10, 20, 40]
    assert convergence_monotone(rows)
    assert all(1.5 <= q <= 3.0 for q in convergence_ratios(rows))


def test_convergence_of_exact_scenario_sits_at_the_floor():
    rows = run_convergence(bundled_scenario("reflected_constant"), [5, 10, 20])
    assert all(r.Y0_error <= 1e-12 for r in rows)
    assert convergence_monotone(rows)


def test_convergence_needs_an_oracle():
    cfg = resolve(minimal())
    with pytest.raises(ConfigurationError):
        run_convergence(cfg, [4, 8])


def test_convergence_ratio_of_zero_error_is_infinite():
    from grbsde_lab.scenarios import ConvergenceRow

    rows = [ConvergenceRow(10, 1e-3, 0.0, 0.0, 0.0), ConvergenceRow(20, 0.0, 0.0, 0.0, 0.0)]
    assert convergence_ratios(rows) == [math.inf]
