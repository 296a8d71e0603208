"""Spectral solver for u_t = Delta_alpha u + a u - b u^(1+beta) on a periodic interval."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import gamma as gamma_fn

from .particles import (ModelParams, SimulationConfig, particle_total_mass_laplace,
                        sample_fixed_time)
from .rng import seed_stream
from .stable import StableMotionParams


class PDEError(RuntimeError):
    pass


@dataclass
class GridFunction:
    """Samples on the periodic grid x_j = center - W + 2W j / n, j = 0..n-1."""

    center: float
    half_width: float
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        n = self.values.shape[0]
        if n < 2 or n & (n - 1):
            raise ValueError(f"grid size must be a power of two, got {n}")
        if not self.half_width > 0:
            raise ValueError("half_width must be positive")

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def dx(self):
        return 2.0 * self.half_width / self.n

    @property
    def x(self):
        return self.center - self.half_width + self.dx * np.arange(self.n)

    @classmethod
    def from_function(cls, f, center, half_width, n):
        x = center - half_width + 2.0 * half_width / n * np.arange(n)
        return cls(center, half_width, np.asarray(f(x), dtype=float) * np.ones(n))

    def with_values(self, values):
        return GridFunction(self.center, self.half_width, values)

    def integral(self):
        return float(self.values.sum() * self.dx)

    def __call__(self, y):
        """Linear interpolation; zero outside [center - W, center + W)."""
        y = np.asarray(y, dtype=float)
        x0 = self.center - self.half_width
        u = (y - x0) / self.dx
        inside = (u >= 0) & (u < self.n)
        i = np.clip(np.floor(u).astype(np.int64), 0, self.n - 1)
        w = u - i
        nxt = (i + 1) % self.n
        out = (1.0 - w) * self.values[i] + w * self.values[nxt]
        return np.where(inside, out, 0.0)


@dataclass(frozen=True)
class PDEConfig:
    dt: float
    t: float
    dealias: bool = False
    clamp_tol: float = 1e-12

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.t < 0:
            raise ValueError("t must be non-negative")

    @property
    def n_steps(self):
        return max(1, int(math.ceil(self.t / self.dt - 1e-12))) if self.t > 0 else 0


def gaussian_bump(height, width, center=0.0):
    return lambda x: height * np.exp(-0.5 * ((np.asarray(x) - center) / width) ** 2)


def smooth_indicator(lo, hi, ramp):
    """Indicator of [lo, hi] with linear ramps of width ``ramp`` outside, clipped to [0, 1]."""
    def f(x):
        x = np.asarray(x, dtype=float)
        return np.clip(np.minimum(x - lo + ramp, hi + ramp - x) / ramp, 0.0, 1.0)
    return f


def default_half_width(motion: StableMotionParams, t, support_radius=0.0):
    """Half-width so that p_t mass beyond it is < 1e-8 (alpha = 2) or < 1e-4 (alpha < 2)."""
    a = motion.alpha
    if a == 2.0:
        # P(|N(0, 2t)| > r) < 1e-8 for r > 5.73 sqrt(2t)
        r = 5.8 * math.sqrt(2.0 * t)
    else:
        # two-sided tail 2 C_a t r^-a with C_a = Gamma(a) sin(pi a / 2) / pi
        ca = gamma_fn(a) * math.sin(math.pi * a / 2.0) / math.pi
        r = (2.0 * ca * t / 1e-4) ** (1.0 / a)
    return support_radius + r


def _frequencies(f: GridFunction):
    return 2.0 * math.pi * np.fft.rfftfreq(f.n, d=f.dx)


def apply_semigroup(f: GridFunction, motion: StableMotionParams, s) -> GridFunction:
    """S_s f on the periodic grid by spectral multiplication with exp(-s |xi|^alpha)."""
    if s < 0:
        raise ValueError("s must be non-negative")
    if s == 0:
        return f.with_values(f.values.copy())
    mult = np.exp(-s * _frequencies(f) ** motion.alpha)
    return f.with_values(np.fft.irfft(np.fft.rfft(f.values) * mult, n=f.n))


def bernoulli_flow(v, tau, a, b, beta):
    """Exact flow of v' = a v - b v^(1+beta) over time tau, applied pointwise."""
    v = np.where(v < 1e-300, 0.0, v)
    vb = np.power(v, beta)
    if a == 0:
        return v * np.power(1.0 + beta * b * tau * vb, -1.0 / beta)
    return math.exp(a * tau) * v * np.power(1.0 + vb * b * math.expm1(a * beta * tau) / a, -1.0 / beta)


def solve_log_laplace(phi: GridFunction, model: ModelParams, config: PDEConfig,
                      record_every=None):
    """v_t with v_0 = phi by Strang splitting (half ODE, full semigroup, half ODE).

    With ``record_every`` set, returns ``(v_t, [(time, GridFunction), ...])``.
    """
    if np.any(phi.values < 0):
        raise ValueError("phi must be non-negative")
    br = model.branching
    n_steps = config.n_steps
    out_hist = []
    if n_steps == 0:
        return (phi, out_hist) if record_every else phi
    dt = config.t / n_steps
    mult = np.exp(-dt * _frequencies(phi) ** model.motion.alpha)
    keep = None
    if config.dealias:
        k = np.arange(mult.shape[0])
        keep = (k <= (phi.n // 2) * 2 // 3).astype(float)
    v = phi.values.copy()

    def ode(v, tau):
        w = bernoulli_flow(v, tau, br.a, br.b, br.beta)
        if keep is not None:
            w = v + np.fft.irfft(np.fft.rfft(w - v) * keep, n=phi.n)
        return w

    for step in range(n_steps):
        v = ode(v, 0.5 * dt)
        v = np.fft.irfft(np.fft.rfft(v) * mult, n=phi.n)
        v = ode(v, 0.5 * dt)
        lo = v.min()
        if not np.all(np.isfinite(v)) or lo < -config.clamp_tol * max(1.0, np.abs(v).max()):
            raise PDEError(f"solution invalid at step {step + 1}/{n_steps}: min {lo:.3e}, "
                           f"finite {bool(np.all(np.isfinite(v)))}")
        v = np.maximum(v, 0.0)
        if record_every and (step + 1) % record_every == 0:
            out_hist.append(((step + 1) * dt, phi.with_values(v.copy())))
    res = phi.with_values(v)
    return (res, out_hist) if record_every else res


@dataclass
class DualityResult:
    mc_value: float
    mc_stderr: float
    pde_value: float
    residual: float
    inconclusive: bool
    replicas: int
    plain_value: float = math.nan
    plain_stderr: float = math.nan


def control_variate_mean(y, controls, control_means):
    """Regression control-variate estimate of E y and its standard error.

    ``controls`` is (N, k) with exactly known means ``control_means``.
    """
    y = np.asarray(y, float)
    c = np.asarray(controls, float)
    n, k = c.shape
    cc = c - c.mean(axis=0)
    coef, *_ = np.linalg.lstsq(cc, y - y.mean(), rcond=None)
    est = float(y.mean() - (c.mean(axis=0) - np.asarray(control_means)) @ coef)
    resid = y - y.mean() - cc @ coef
    se = float(math.sqrt(resid @ resid / max(n - k - 1, 1) / n))
    return est, se


DEFAULT_CONTROL_LAMBDAS = (0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0)


def laplace_functional_mc(config: SimulationConfig, phi, first_replica=0):
    """Per replica: exp(-<X_t, phi>) with <X_t, phi> = eps sum phi(positions), and X_t(R)."""
    vals = np.empty(config.replica_count)
    mass = np.empty(config.replica_count)
    for r in range(config.replica_count):
        rng = seed_stream(config.seed, first_replica + r)
        st = sample_fixed_time(config, rng)
        mass[r] = st.total_mass
        if st.count == 0:
            vals[r] = 1.0
            continue
        vals[r] = math.exp(-config.particle_mass * float(np.sum(phi(st.positions[:, 0]))))
    return vals, mass


def duality_residual(config: SimulationConfig, phi: GridFunction, pde: PDEConfig,
                     max_stderr=0.01, control_lambdas=None):
    """Monte Carlo E exp(-<X_t, phi>) against exp(-<mu, v_t>) from the PDE.

    With ``control_lambdas`` the estimate uses exp(-lam X_t(R)) as control
    variates; their means are the exact values for the particle system.
    """
    if config.model.motion.dimension != 1:
        raise ValueError("duality check is one-dimensional")
    if abs(pde.t - config.horizon) > 1e-12 * max(1.0, config.horizon):
        raise ValueError("simulation horizon and PDE terminal time differ")
    if config.replica_count < 2:
        raise ValueError("need at least two replicas")
    vals, mass = laplace_functional_mc(config, phi)
    plain = float(vals.mean())
    plain_se = float(vals.std(ddof=1) / math.sqrt(len(vals)))
    mc, se = plain, plain_se
    if control_lambdas:
        ctrl = np.exp(-np.outer(mass, control_lambdas))
        means = [particle_total_mass_laplace(config, lam) for lam in control_lambdas]
        mc, se = control_variate_mean(vals, ctrl, means)
    v = solve_log_laplace(phi, config.model, pde)
    pde_val = math.exp(-config.initial.integrate(lambda y: v(y[:, 0])))
    return DualityResult(mc, se, pde_val, abs(mc - pde_val), se > max_stderr, len(vals),
                         plain, plain_se)
