import math

import numpy as np
import pytest
from scipy import integrate, stats

from superlab.rng import seed_stream
from superlab.stable import (SpectrallyPositiveParams, StableMotionParams, SubordinatorParams,
                             increment_integral, kernel_increment_ratio, sample_positive_stable,
                             sample_spectrally_positive, sample_spectrally_positive_path,
                             sample_symmetric_stable, spectrally_positive_paths, stable_pdf,
                             subordination_integral, subordination_residual, subordinator_pdf)


@pytest.mark.parametrize("x", [0.0, 0.5, 3.0, -7.0])
@pytest.mark.parametrize("t", [0.3, 1.0])
def test_cauchy_closed_form(x, t):
    assert stable_pdf(StableMotionParams(1.0), t, x) == pytest.approx(t / (math.pi * (t * t + x * x)),
                                                                      abs=1e-12)


def test_heat_kernel_convention():
    assert stable_pdf(StableMotionParams(2.0), 1.0, 0.0) == pytest.approx(0.2820948, abs=1e-7)
    assert stable_pdf(StableMotionParams(2.0), 0.5, 1.0) == pytest.approx(
        math.exp(-0.5) / math.sqrt(2 * math.pi), abs=1e-14)


def test_cauchy_cli_value():
    assert f"{stable_pdf(StableMotionParams(1.0), 1.0, 0.0):.7f}" == "0.3183099"


@pytest.mark.parametrize("alpha", [0.6, 1.2, 1.5, 1.8])
@pytest.mark.parametrize("x", [0.0, 0.7, 2.5, 9.0])
def test_self_similarity(alpha, x):
    p = StableMotionParams(alpha)
    t = 8.0
    lhs = stable_pdf(p, t, x)
    rhs = t ** (-1 / alpha) * stable_pdf(p, 1.0, t ** (-1 / alpha) * x)
    assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-14)


@pytest.mark.parametrize("alpha", [0.8, 1.0, 1.5, 2.0])
@pytest.mark.parametrize("t", [0.1, 1.0])
def test_normalization(alpha, t):
    p = StableMotionParams(alpha)
    f = lambda x: stable_pdf(p, t, x)
    # split at the scale t^(1/alpha) and integrate the tails on (s, inf)
    s = t ** (1 / alpha)
    inner = integrate.quad(f, 0, 4 * s, limit=200, epsabs=1e-12)[0]
    outer = integrate.quad(f, 4 * s, np.inf, limit=200, epsabs=1e-12)[0]
    assert 2 * (inner + outer) == pytest.approx(1.0, abs=1e-7)


@pytest.mark.parametrize("alpha", [0.7, 1.3, 1.9])
def test_symmetry_exact(alpha):
    p = StableMotionParams(alpha)
    x = np.array([0.1, 1.0, 3.9, 4.1, 30.0])
    assert np.array_equal(stable_pdf(p, 1.0, x), stable_pdf(p, 1.0, -x))


def test_series_and_fourier_branches_agree_at_switch():
    # the evaluator changes representation at |z| = 4
    p = StableMotionParams(1.5)
    assert stable_pdf(p, 1.0, 4.0 - 1e-9) == pytest.approx(stable_pdf(p, 1.0, 4.0 + 1e-9), rel=1e-7)


@pytest.mark.parametrize("alpha", [0.8, 1.5])
def test_tail_law(alpha):
    p = StableMotionParams(alpha)
    c = math.gamma(1 + alpha) * math.sin(math.pi * alpha / 2) / math.pi
    vals = [stable_pdf(p, 1.0, x) * x ** (1 + alpha) for x in (50.0, 200.0, 1000.0)]
    assert all(v > 0 for v in vals)
    # next series term is relatively O(x^-alpha)
    assert vals[-1] == pytest.approx(c, rel=1e-2)
    assert abs(vals[-1] - c) < abs(vals[0] - c)


@pytest.mark.parametrize("bad", [0.0, -1.0])
def test_stable_pdf_rejects_bad_time(bad):
    with pytest.raises(ValueError):
        stable_pdf(StableMotionParams(1.5), bad, 0.0)


@pytest.mark.parametrize("alpha", [0.0, 2.5])
def test_motion_params_validation(alpha):
    with pytest.raises(ValueError):
        StableMotionParams(alpha)


def test_levy_subordinator_closed_form():
    assert subordinator_pdf(SubordinatorParams(0.5), 1.0, 1.0) == pytest.approx(0.2196956, abs=1e-7)
    for s in (0.05, 0.3, 2.0, 17.0):
        exact = s ** -1.5 * math.exp(-1 / (4 * s)) / (2 * math.sqrt(math.pi))
        assert subordinator_pdf(SubordinatorParams(0.5), 1.0, s) == pytest.approx(exact, rel=1e-9)


@pytest.mark.parametrize("index", [0.25, 0.5, 0.75])
def test_subordinator_normalization(index):
    p = SubordinatorParams(index)
    f = lambda u: subordinator_pdf(p, 1.0, math.exp(u)) * math.exp(u)
    # the tail beyond e^u is about e^(-index u)
    total = integrate.quad(f, -30, 40 / index, limit=400, epsabs=1e-12)[0]
    assert total == pytest.approx(1.0, abs=1e-8)


def test_subordinator_small_s_decay():
    p = SubordinatorParams(0.5)
    vals = [subordinator_pdf(p, 1.0, s) for s in (0.02, 0.01, 0.005)]
    # faster than any power: the ratio over a halving grows without bound
    assert vals[0] / vals[1] > 100 and vals[1] / vals[2] > vals[0] / vals[1]


def test_subordinator_index_validation():
    with pytest.raises(ValueError):
        SubordinatorParams(1.0)


@pytest.mark.parametrize("z,exact", [(0.0, 1 / math.pi), (3.0, 1 / (10 * math.pi))])
def test_subordination_cauchy(z, exact):
    assert abs(subordination_integral(1.0, z) - exact) < 1e-8
    assert subordination_residual(1.0, z) < 1e-8


@pytest.mark.parametrize("alpha", [0.5, 1.0, 1.5])
@pytest.mark.parametrize("z", [0.0, 1.0, 5.0])
def test_subordination_residual_grid(alpha, z):
    assert subordination_residual(alpha, z) < 1e-6


def test_increment_ratio_conventions():
    p = StableMotionParams(2.0)
    assert kernel_increment_ratio(p, 0.5, 1.0, 0.3, 0.3) == 0.0
    rng = np.random.default_rng(1)
    for _ in range(200):
        t, x, y = rng.uniform(0.05, 3), rng.normal(0, 3), rng.normal(0, 3)
        assert kernel_increment_ratio(p, 0.0, t, x, y) <= 2.0
    v = kernel_increment_ratio(StableMotionParams(1.0), 1.0, 1.0, 0.1, 0.2)
    assert math.isfinite(v) and v > 0


def test_increment_ratio_supremum_stable_under_enlargement():
    p = StableMotionParams(1.5)
    rng = seed_stream(5, 0)

    def sup(n):
        t = rng.uniform(0.01, 2.0, n)
        x = rng.normal(0, 2, n)
        y = x + rng.normal(0, 1, n) * rng.choice([1e-3, 1e-1, 1.0], n)
        return max(kernel_increment_ratio(p, 0.5, *v) for v in zip(t, x, y))

    s1 = sup(300)
    s2 = sup(3000)
    assert math.isfinite(s2)
    assert s2 < 2.0 * s1


def test_increment_integral_bounded_near_diagonal():
    p = StableMotionParams(1.5)
    theta, delta = 1.2, 0.8  # delta < (1 + alpha - theta) / theta
    vals = []
    for gap in (0.2, 0.05, 0.0125):
        lhs = increment_integral(p, 1.0, 0.3, 0.3 + gap, theta)
        norm = gap ** (delta * theta) * (stable_pdf(p, 1.0, 0.15) + stable_pdf(p, 1.0, (0.3 + gap) / 2))
        vals.append(lhs / norm)
    assert vals[-1] < 2.0 * max(vals[:-1])


# ---------------------------------------------------------------------------
# samplers
# ---------------------------------------------------------------------------

N = 200_000


def test_gaussian_variance():
    y = sample_symmetric_stable(StableMotionParams(2.0), 0.7, seed_stream(1, 0), N)
    v = y ** 2 / (2 * 0.7)
    assert abs(v.mean() - 1) < 3 * v.std() / math.sqrt(N)


def test_cauchy_median():
    y = sample_symmetric_stable(StableMotionParams(1.0), 1.0, seed_stream(2, 0), N)
    # median of N draws has sd 1 / (2 f(0) sqrt N) = pi / (2 sqrt N)
    assert abs(np.median(y)) < 3 * math.pi / (2 * math.sqrt(N))


@pytest.mark.parametrize("xi", [0.5, 1.0, 2.0])
def test_symmetric_characteristic_function(xi):
    y = sample_symmetric_stable(StableMotionParams(1.5), 1.0, seed_stream(3, 0), N)
    c = np.cos(xi * y)
    assert abs(c.mean() - math.exp(-xi ** 1.5)) < 3 * c.std() / math.sqrt(N)


def test_symmetric_sampler_two_dimensional():
    y = sample_symmetric_stable(StableMotionParams(1.5, 2), 1.0, seed_stream(4, 0), N)
    assert y.shape == (N, 2)
    c = np.cos(y @ np.array([0.6, 0.8]))
    assert abs(c.mean() - math.exp(-1.0)) < 3 * c.std() / math.sqrt(N)


def test_positive_stable_laplace():
    s = sample_positive_stable(SubordinatorParams(0.6), 2.0, seed_stream(5, 0), N)
    e = np.exp(-0.8 * s)
    assert s.min() > 0
    assert abs(e.mean() - math.exp(-2.0 * 0.8 ** 0.6)) < 3 * e.std() / math.sqrt(N)


@pytest.mark.parametrize("lam", [0.25, 0.5])
def test_spectrally_positive_laplace(lam):
    x = sample_spectrally_positive(SpectrallyPositiveParams(1.5), 1.0, seed_stream(6, 0), N)
    e = np.exp(-lam * x)
    assert abs(e.mean() - math.exp(lam ** 1.5)) < 3 * e.std() / math.sqrt(N)


def test_spectrally_positive_mean_and_tail():
    x = sample_spectrally_positive(SpectrallyPositiveParams(1.5), 1.0, seed_stream(7, 0), 10 ** 6)
    # infinite variance: use a truncated-mean bound instead of the sample sd
    assert abs(np.mean(np.minimum(x, 1e4))) < 0.05
    u = np.geomspace(10, 100, 8)
    tail = np.array([(x > v).mean() for v in u])
    slope = np.polyfit(np.log(u), np.log(tail), 1)[0]
    assert slope == pytest.approx(-1.5, abs=0.1)


def test_path_terminal_law_matches_one_shot_sampler():
    p = SpectrallyPositiveParams(1.5)
    _, v, *_ = spectrally_positive_paths(p, 1.0, 8, 100_000, seed_stream(8, 0))
    ref = sample_spectrally_positive(p, 1.0, seed_stream(8, 1), 100_000)
    assert stats.ks_2samp(v[:, -1], ref).pvalue > 1e-3


def test_path_time_scaling():
    p = SpectrallyPositiveParams(1.5)
    tau = 4.0
    _, v1, *_ = spectrally_positive_paths(p, 1.0, 8, 50_000, seed_stream(9, 0))
    _, v2, *_ = spectrally_positive_paths(p, tau, 8, 50_000, seed_stream(9, 1))
    assert stats.ks_2samp(v1[:, -1] * tau ** (1 / 1.5), v2[:, -1]).pvalue > 1e-3


def test_single_path_records_jumps():
    p = SpectrallyPositiveParams(1.5)
    path = sample_spectrally_positive_path(p, 1.0, 100, seed_stream(10, 0))
    assert len(path.values) == 101 and path.values[0] == 0.0
    assert np.all(np.diff(path.jump_times) >= 0)
    assert np.all(path.jump_sizes > path.cutoff)
    assert path.max_jump_until(1.0) == pytest.approx(path.jump_sizes.max())


def test_jump_budget_enforced():
    with pytest.raises(ValueError, match="budget"):
        spectrally_positive_paths(SpectrallyPositiveParams(1.5), 1.0, 10, 1000, seed_stream(0, 0),
                                  cutoff=1e-6)
