import math

import numpy as np
import pytest

from superlab.bounds import (BoundCheckResult, TimeChangePath, constant_psi, integrated_form_quadrature_error,
                             laplace_relative_sd, small_values_bound, small_values_constant,
                             status_counts, time_change_path, truncated_sup_bound,
                             truncated_sup_scaling, verify_martingale_problem,
                             verify_small_values, verify_time_change, verify_truncated_sup)
from superlab.particles import (BranchingParams, InitialMeasure, ModelParams, SimulationConfig,
                                simulate_events)
from superlab.stable import StableMotionParams


def test_small_values_constant():
    assert small_values_constant(1.5) == pytest.approx(0.5 / 1.5 ** 3, rel=1e-14)
    assert small_values_constant(1.5) == pytest.approx(0.148148, abs=1e-6)
    with pytest.raises(ValueError):
        small_values_constant(2.0)


def test_small_values_bound_values():
    assert small_values_bound(1.5, 1.0, 2.0) == pytest.approx(math.exp(-8 * 0.5 / 3.375))
    assert small_values_bound(1.5, 1.0, 2.0) == pytest.approx(0.3057, abs=1e-4)
    # scaling: x -> s x, t -> s^kappa t leaves the bound unchanged
    assert small_values_bound(1.5, 4.0, 2.0 * 4 ** (1 / 1.5)) == pytest.approx(
        small_values_bound(1.5, 1.0, 2.0))


def test_status_logic():
    one = BoundCheckResult("x", {}, 0.5, 0.1, 0.25)
    assert one.satisfied and one.status == "pass"
    assert BoundCheckResult("x", {}, 0.6, 0.1, 0.25).status == "fail"
    assert BoundCheckResult("x", {}, 0.0, 0.0, 2.0, vacuous=True).status == "vacuous"
    assert BoundCheckResult("x", {}, 9.0, 0.0, 0.0, inconclusive=True).status == "inconclusive"
    two = BoundCheckResult("x", {}, 0.9, 0.1, 1.0, two_sided=True)
    assert two.satisfied and not BoundCheckResult("x", {}, 0.5, 0.1, 1.0, two_sided=True).satisfied
    counts = status_counts([one, two, BoundCheckResult("x", {}, 0.6, 0.1, 0.25)])
    assert counts == {"pass": 2, "fail": 1, "vacuous": 0, "inconclusive": 0}


def test_verify_small_values_small_run():
    res = verify_small_values(1.5, 1.0, [0.5, 1.0], 20_000, seed=1, n_steps=200)
    assert [r.params["x"] for r in res] == [0.5, 1.0]
    for r in res:
        assert r.satisfied
        assert r.diagnostics["coarse_estimate"] <= r.empirical
        assert r.diagnostics["bias_estimate"] >= 0
    with pytest.raises(ValueError):
        verify_small_values(1.5, 1.0, [1.0], 100, n_steps=201)


def test_martingale_targets():
    assert math.exp(0.5 ** 1.5) == pytest.approx(1.424119, abs=1e-6)
    assert laplace_relative_sd(1.5, 0.0, 1.0) == 0.0


def test_martingale_problem_small_run():
    res = verify_martingale_problem(1.5, [0.0, 0.5], [0.5, 1.0], 40_000, seed=2, n_steps=64)
    assert len(res) == 8
    for r in res:
        assert r.status == "pass", (r.test, r.params, r.empirical, r.stderr, r.bound)
    zero = [r for r in res if r.params["lambda"] == 0.0 and r.test == "laplace_direct"]
    assert all(r.empirical == 1.0 for r in zero)
    with pytest.raises(ValueError):
        verify_martingale_problem(1.5, [0.5], [0.3, 1.0], 10, n_steps=4)


def test_quadrature_error_second_order():
    e1 = integrated_form_quadrature_error(1.5, 0.5, 1.0, 256)
    e2 = integrated_form_quadrature_error(1.5, 0.5, 1.0, 512)
    assert abs(e1) < 1e-6
    assert e1 / e2 == pytest.approx(4.0, rel=1e-3)


def test_truncated_sup_bound_formula():
    assert truncated_sup_bound(2.0, 1.5, 1.0, 2.0, 1.0) == pytest.approx(1.0)
    assert truncated_sup_bound(1.0, 1.5, 1.0, 4.0, 1.0) == pytest.approx(0.25 ** 4)


def test_truncated_sup_report_shape():
    rep = verify_truncated_sup(1.5, 1.0, [1.0, 2.0], 1.0, 20_000, seed=3, n_steps=100)
    assert len(rep.checks) == 2 and len(rep.slope_ratios) == 1
    # the fitted constant reproduces the 3-sigma upper probability at the smallest x
    c0 = rep.checks[0]
    assert c0.bound == pytest.approx(min(c0.empirical + 3 * c0.stderr, 1.0), rel=1e-12)
    p = [c.empirical for c in rep.checks]
    assert p[1] < p[0]
    assert rep.slope_ratios[0] == pytest.approx(math.log(p[1]) / math.log(p[0]) / 2.0)
    with pytest.raises(ValueError):
        verify_truncated_sup(1.5, 1.0, [1.0, 2.0], 1e-6, 10)


def test_truncated_sup_scaling_consistent():
    r = truncated_sup_scaling(1.5, 1.0, 1.0, 1.0, 4.0, 20_000, seed=4, n_steps=100)
    assert r.two_sided and r.satisfied


def _model(a=0.0):
    return ModelParams(StableMotionParams(2.0), BranchingParams(a, 1.0, 0.5))


def test_time_change_bookkeeping_constant_psi():
    # psi = 1: Z(t) = X_t(R) - X_0(R) - a int X_s(R) ds and T(t) = b int X_s(R) ds
    for a in (0.0, 0.5):
        cfg = SimulationConfig(_model(a), InitialMeasure.point(0.0), 1.0, 1e-2, seed=1)
        path, _ = time_change_path(cfg, constant_psi(), 0, n_grid=400)
        # the same replica with the same snapshot grid reproduces the path
        s, rec, _, _ = simulate_events(cfg, 0, record_events=True,
                                       snapshot_times=np.linspace(0.0, 1.0, 401))
        occ = float(rec.mass_integral)
        assert path.z_at(1.0) == pytest.approx(s.total_mass - 1.0 - a * occ, abs=2e-3)
        assert path.clock[-1] == pytest.approx(occ, rel=2e-3)
        assert np.all(np.diff(path.clock) >= 0)


def test_inverse_clock():
    p = TimeChangePath(np.zeros(0), np.zeros(0), np.array([0.0, 1.0, 2.0]),
                       np.array([0.0, 2.0, 3.0]), np.zeros(3))
    assert p.inverse_clock(1.0) == pytest.approx(0.5)
    assert p.inverse_clock(2.5) == pytest.approx(1.5)
    with pytest.raises(ValueError):
        p.inverse_clock(4.0)


def test_time_change_matches_particle_exponent():
    # for a = 0 and psi = 1 the time-changed mass of the eps-system is a compound
    # Poisson process with Laplace exponent eps^-(1+beta) (1 - e^-lam eps)^(1+beta) e^(lam eps)
    eps, lam = 1e-2, 0.25
    cfg = SimulationConfig(_model(), InitialMeasure.point(0.0), 1.0, eps, seed=5,
                           replica_count=2000)
    rep = verify_time_change(cfg, constant_psi(), [lam])
    c = rep.checks[0]
    exact = math.exp(rep.u * eps ** -1.5 * (-math.expm1(-lam * eps)) ** 1.5 * math.exp(lam * eps))
    assert abs(c.empirical - exact) < 4 * c.stderr
    assert c.status == "pass"
    assert rep.grafted == pytest.approx(0.2 * 2000, abs=1)
