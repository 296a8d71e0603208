import math

import numpy as np
import pytest
from scipy import integrate

from superlab.particles import (BranchingParams, BudgetExceeded, DensityField, Grid,
                                InitialMeasure, JumpRecords, ModelParams, SimulationConfig,
                                density_histogram, empirical_jump_intensity,
                                exact_total_mass_laplace, expected_exceedances,
                                offspring_pmf, offspring_survival,
                                particle_exceedance_rate, particle_extinction_probability,
                                particle_total_mass_laplace, sample_fixed_time, sample_offspring,
                                simulate_events, tail_slope, terminal_masses, total_mass_laplace)
from superlab.rng import seed_stream
from superlab.stable import StableMotionParams


def make_config(eps=1e-2, a=0.0, beta=0.5, alpha=2.0, replicas=1, seed=0, t=1.0, **kw):
    model = ModelParams(StableMotionParams(alpha), BranchingParams(a, 1.0, beta))
    return SimulationConfig(model, InitialMeasure.point(0.0), t, eps, seed=seed,
                            replica_count=replicas, **kw)


# offspring law ---------------------------------------------------------------

@pytest.mark.parametrize("beta", [0.2, 0.5, 0.9])
def test_offspring_pmf_low_orders(beta):
    p = offspring_pmf(beta, 4)
    assert p[0] == pytest.approx(1.0 / (1.0 + beta), abs=1e-15)
    assert p[1] == 0.0
    assert p[2] == pytest.approx(beta / 2.0, abs=1e-15)
    assert p[3] == pytest.approx(beta * (1.0 - beta) / 6.0, abs=1e-15)
    assert np.all(p >= 0)


@pytest.mark.parametrize("beta", [0.2, 0.5, 0.9])
def test_offspring_survival_consistent_with_pmf(beta):
    k = 2000
    p = offspring_pmf(beta, k)
    surv = offspring_survival(beta, k)
    assert np.allclose(surv, 1.0 - np.cumsum(p), atol=1e-13)
    # P(K > k) ~ k^-(1+beta) / (|Gamma(-beta)| (1+beta))
    c = 1.0 / (abs(math.gamma(-beta)) * (1.0 + beta))
    assert surv[k] * k ** (1.0 + beta) == pytest.approx(c, rel=5e-3)


def test_offspring_is_critical():
    # E K = sum_k P(K > k); the truncated sum plus its power-law tail is 1
    beta = 0.5
    k = 10 ** 6
    surv = offspring_survival(beta, k)
    c = surv[k] * k ** (1.0 + beta)
    tail = c * k ** (-beta) / beta
    assert surv.sum() + tail == pytest.approx(1.0, abs=1e-6)


def test_sample_offspring_frequencies():
    beta = 0.5
    n = 200_000
    k = sample_offspring(beta, np.random.default_rng(1), n)
    p = offspring_pmf(beta, 5)
    for j in (0, 1, 2, 3):
        freq = np.mean(k == j)
        assert abs(freq - p[j]) <= 4.0 * math.sqrt(p[j] * (1 - p[j]) / n) + 1e-12
    surv = offspring_survival(beta, 10 ** 6)
    big = np.mean(k > 2000)
    assert abs(big - surv[2000]) <= 4.0 * math.sqrt(surv[2000] / n)


# parameters --------------------------------------------------------------------

def test_rho_and_rate():
    br = BranchingParams(0.0, 1.0, 0.5)
    assert br.rho == pytest.approx(0.75 / math.sqrt(math.pi), rel=1e-14)
    assert br.branching_rate(1e-4) == pytest.approx(1.5 * 100.0, rel=1e-14)
    assert br.psi(4.0) == pytest.approx(8.0)


@pytest.mark.parametrize("kw", [dict(b=0.0), dict(beta=0.0), dict(beta=1.0)])
def test_branching_validation(kw):
    args = dict(a=0.0, b=1.0, beta=0.5)
    args.update(kw)
    with pytest.raises(ValueError):
        BranchingParams(**args)


def test_config_validation():
    with pytest.raises(ValueError):
        make_config(eps=2.0)
    with pytest.raises(ValueError):
        make_config(replicas=0)
    with pytest.raises(ValueError):
        make_config(t=0.0)
    assert make_config(eps=1e-4).initial_count == 10_000


def test_initial_measure():
    mu = InitialMeasure.from_atoms([(0.0, 0.25), (1.0, 0.75)])
    assert mu.total_mass == pytest.approx(1.0)
    assert mu.integrate(lambda x: x[:, 0]) == pytest.approx(0.75)
    u = InitialMeasure.uniform([(0.0, 2.0)], mass=3.0)
    assert u.integrate(lambda x: x[:, 0] ** 2) == pytest.approx(3.0 * 4.0 / 3.0, rel=1e-12)
    s = u.sample(1000, np.random.default_rng(0))
    assert s.shape == (1000, 1) and s.min() >= 0 and s.max() <= 2
    with pytest.raises(ValueError):
        InitialMeasure.point(0.0, mass=0.0)


# closed forms ------------------------------------------------------------------

def test_exact_laplace_critical():
    br = BranchingParams(0.0, 1.0, 0.5)
    assert exact_total_mass_laplace(br, 1.0, 1.0, 1.0) == pytest.approx(math.exp(-4.0 / 9.0))
    assert exact_total_mass_laplace(br, 1.0, 1.0, math.inf) == pytest.approx(math.exp(-4.0))
    assert exact_total_mass_laplace(br, 1.0, 1.0, 0.0) == 1.0


@pytest.mark.parametrize("a", [-0.7, 0.4])
def test_exact_laplace_matches_ode(a):
    br = BranchingParams(a, 1.3, 0.6)
    sol = integrate.solve_ivp(lambda _, v: [-br.psi(v[0])], (0, 1.5), [2.0], rtol=1e-12, atol=1e-14)
    assert exact_total_mass_laplace(br, 0.8, 1.5, 2.0) == pytest.approx(
        math.exp(-0.8 * sol.y[0, -1]), rel=1e-9)


@pytest.mark.parametrize("a", [-0.5, 0.0, 0.5])
def test_particle_laplace_converges(a):
    cfg = make_config(eps=1e-7, a=a)
    exact = exact_total_mass_laplace(cfg.model.branching, 1.0, 1.0, 1.0)
    assert particle_total_mass_laplace(cfg, 1.0) == pytest.approx(exact, abs=1e-4)


# simulation engines -------------------------------------------------------------

def test_event_engine_deterministic():
    cfg = make_config(eps=1e-2, seed=3)
    s1, r1, l1, _ = simulate_events(cfg, 2, record_events=True)
    s2, r2, l2, _ = simulate_events(cfg, 2, record_events=True)
    assert np.array_equal(s1.positions, s2.positions)
    assert np.array_equal(r1.masses, r2.masses)
    assert np.array_equal(l1.times, l2.times)


def test_event_log_conserves_mass():
    cfg = make_config(eps=1e-2, a=0.3, seed=4)
    s, _, log, _ = simulate_events(cfg, 0, record_events=True)
    assert 1.0 + log.net_mass.sum() == pytest.approx(s.total_mass, abs=1e-9)
    assert set(np.unique(log.kind)) <= {0, 1}
    assert np.all(np.diff(log.times) >= 0)


def test_snapshots_track_mass():
    cfg = make_config(eps=1e-2, seed=5)
    s, _, _, snaps = simulate_events(cfg, 0, snapshot_times=[0.0, 0.5, 1.0])
    assert snaps.masses[0] == pytest.approx(1.0)
    assert snaps.masses[-1] == pytest.approx(s.total_mass)
    assert np.allclose(np.sort(snaps.at(2)[:, 0]), np.sort(s.positions[:, 0]))


def test_budget_exceeded():
    cfg = make_config(eps=1e-3, step_budget=50)
    with pytest.raises(BudgetExceeded):
        simulate_events(cfg, 0)
    with pytest.raises(BudgetExceeded):
        sample_fixed_time(make_config(eps=1e-5, a=2.0, step_budget=10), seed_stream(0, 0))


@pytest.mark.parametrize("a", [0.0, -0.5, 0.5])
def test_event_engine_laplace(a):
    cfg = make_config(eps=2e-2, a=a, replicas=3000, seed=6)
    m = np.array([simulate_events(cfg, r)[0].total_mass for r in range(cfg.replica_count)])
    est = total_mass_laplace(cfg, 1.0, masses=m)
    assert abs(est.z(particle_total_mass_laplace(cfg, 1.0))) < 4.0
    p0 = particle_extinction_probability(cfg)
    assert abs(np.mean(m == 0) - p0) < 4.0 * math.sqrt(p0 * (1 - p0) / len(m))


@pytest.mark.parametrize("a", [0.0, -0.5, 0.5])
def test_fixed_time_sampler_laplace(a):
    cfg = make_config(eps=1e-3, a=a, replicas=4000, seed=7)
    m = terminal_masses(cfg)
    for lam in (0.5, 2.0):
        est = total_mass_laplace(cfg, lam, masses=m)
        assert abs(est.z(particle_total_mass_laplace(cfg, lam))) < 4.0
    p0 = particle_extinction_probability(cfg)
    assert abs(np.mean(m == 0) - p0) < 4.0 * math.sqrt(p0 * (1 - p0) / len(m))


def test_fixed_time_spatial_law_matches_event_engine():
    # both samplers: E <X_t, x^2> = |mu| * 2t for Brownian motion with variance 2t
    cfg = make_config(eps=2e-2, replicas=2000, seed=8)
    a = np.array([0.02 * np.sum(sample_fixed_time(cfg, seed_stream(8, r)).positions ** 2)
                  for r in range(2000)])
    b = np.array([0.02 * np.sum(simulate_events(cfg, r)[0].positions ** 2) for r in range(2000)])
    for v in (a, b):
        assert abs(v.mean() - 2.0) < 4.0 * v.std() / math.sqrt(len(v))


def test_pure_motion_variance():
    cfg = make_config(eps=1e-4)
    st = sample_fixed_time(cfg, seed_stream(0, 0), pure_motion=True)
    x = st.positions[:, 0]
    assert st.count == 10_000
    assert x.var() == pytest.approx(2.0, rel=0.05)


def test_histogram_mode_matches_positions_mode():
    cfg = make_config(eps=1e-4, seed=9)
    grid = Grid.regular(-2.0, 2.0, 1.0 / 64)
    for r in range(5):
        a = sample_fixed_time(cfg, seed_stream(9, r))
        b = sample_fixed_time(cfg, seed_stream(9, r), grid=grid)
        ref = density_histogram(a.positions, cfg.particle_mass, grid)
        assert a.count == b.count
        assert np.allclose(b.field.values, ref.values, rtol=0, atol=1e-12)
        assert b.field.outside_mass == pytest.approx(ref.outside_mass)


def test_grid_mode_rejects_pure_motion():
    with pytest.raises(ValueError):
        sample_fixed_time(make_config(), seed_stream(0, 0), pure_motion=True,
                          grid=Grid.regular(0.0, 1.0, 0.1))


# histograms ----------------------------------------------------------------------

def test_density_histogram_and_rebin():
    grid = Grid.regular(0.0, 1.0, 0.25)
    f = density_histogram(np.array([0.1, 0.1, 0.6, 1.5]), 0.5, grid)
    assert np.allclose(f.values, [4.0, 0.0, 2.0, 0.0])
    assert f.total_mass == 2.0 and f.outside_mass == 0.5
    g = f.rebin(2)
    assert np.allclose(g.values, [2.0, 1.0]) and g.grid.h == 0.5
    with pytest.raises(ValueError):
        f.rebin(3)


# jumps ---------------------------------------------------------------------------

def test_tail_slope_recovers_pareto_index():
    rng = np.random.default_rng(0)
    x = 0.1 * rng.random(100_000) ** (-1.0 / 1.5)
    assert tail_slope(x, 0.1) == pytest.approx(-1.5, abs=0.05)


def test_exceedance_convention_is_inclusive():
    cfg = make_config(eps=0.01)
    rec = JumpRecords(np.array([0.1, 0.2]), np.zeros((2, 1)), np.array([0.2, 0.19]), 0.1,
                      mass_integral=1.0)
    chk = empirical_jump_intensity(rec, cfg, 0.2)
    assert chk.count == 1
    with pytest.raises(ValueError):
        empirical_jump_intensity(rec, cfg, 0.05)


def test_exceedance_counts_match_particle_rate():
    cfg = make_config(eps=1e-2, replicas=400, seed=10, jump_threshold=0.1)
    recs = JumpRecords.concatenate(simulate_events(cfg, r)[1] for r in range(400))
    assert recs.n_replicas == 400
    chk = empirical_jump_intensity(recs, cfg, 0.2)
    assert abs(chk.z_compensated) < 4.0
    exact = particle_exceedance_rate(cfg, 0.2)
    assert abs(chk.count - exact) < 4.0 * chk.stderr
    # the eps-system rate is within a few percent of the continuum rate at r_min = 20 eps
    assert exact / expected_exceedances(cfg, 0.2, 400) == pytest.approx(1.0, abs=0.05)
