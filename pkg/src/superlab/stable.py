"""Symmetric alpha-stable kernels, positive stable subordinators and samplers.

Conventions used throughout the package:

* the motion has characteristic function ``exp(-t |xi|^alpha)``, so the
  alpha=2 kernel is the heat kernel of the Laplacian (variance ``2t``);
* the subordinator of index ``gamma`` has Laplace transform ``exp(-t lam^gamma)``;
* the spectrally positive process of index ``kappa`` in (1, 2) has
  ``E exp(-lam L_t) = exp(t lam^kappa)`` (no negative jumps, zero mean).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import integrate, optimize
from scipy.special import gammaln

# Fourier integrands are truncated where exp(-xi^alpha) < exp(-_XI_CUT).
_XI_CUT = 42.0
_SERIES_MIN_Z = 4.0
_SERIES_TOL = 1e-14


class QuadratureError(RuntimeError):
    """Raised when an adaptive quadrature does not reach its error target."""

    def __init__(self, message, error_estimate):
        super().__init__(f"{message} (achieved error estimate {error_estimate:.3e})")
        self.error_estimate = error_estimate


@dataclass(frozen=True)
class StableMotionParams:
    alpha: float
    dimension: int = 1

    def __post_init__(self):
        if not (0.0 < self.alpha <= 2.0):
            raise ValueError(f"alpha must lie in (0, 2], got {self.alpha}")
        if int(self.dimension) != self.dimension or self.dimension < 1:
            raise ValueError(f"dimension must be a positive integer, got {self.dimension}")


@dataclass(frozen=True)
class SubordinatorParams:
    index: float

    def __post_init__(self):
        if not (0.0 < self.index < 1.0):
            raise ValueError(f"subordinator index must lie in (0, 1), got {self.index}")


@dataclass(frozen=True)
class SpectrallyPositiveParams:
    kappa: float

    def __post_init__(self):
        if not (1.0 < self.kappa < 2.0):
            raise ValueError(f"kappa must lie in (1, 2), got {self.kappa}")

    @property
    def levy_density_constant(self):
        """``C`` in the Levy measure ``C r^{-1-kappa} dr`` of the process."""
        return 1.0 / math.gamma(-self.kappa)


def _check_t(t):
    if not t > 0:
        raise ValueError(f"time must be positive, got {t}")


def _quad(f, a, b, what, epsabs=1e-13, epsrel=1e-12, limit=400, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        val, err, info = integrate.quad(f, a, b, epsabs=epsabs, epsrel=epsrel,
                                        limit=limit, full_output=1, **kw)[:3]
    if not np.isfinite(val) or err > max(1e-9, 1e-7 * abs(val)):
        raise QuadratureError(f"quadrature for {what} did not converge", err)
    return val


# ---------------------------------------------------------------------------
# symmetric stable density
# ---------------------------------------------------------------------------

def _tail_series(alpha, z):
    """Bergstrom expansion of p_1(z) in powers of |z|^{-alpha}.

    Convergent for alpha < 1 and asymptotic for alpha > 1. Returns None when
    the terms stop decreasing before reaching the tolerance.
    """
    z = abs(z)
    log_z = math.log(z)
    total = 0.0
    prev = math.inf
    for k in range(1, 200):
        s = math.sin(math.pi * alpha * k / 2.0)
        mag = math.exp(gammaln(alpha * k + 1.0) - gammaln(k + 1.0) - (alpha * k + 1.0) * log_z)
        if mag > prev and k > 2:
            return None
        term = (-1) ** (k + 1) * mag * s
        total += term
        if mag < _SERIES_TOL * max(abs(total), 1e-300) and k > 2:
            return total / math.pi
        prev = mag
    return None


def _fourier_p1(alpha, z):
    z = abs(z)
    xi_max = _XI_CUT ** (1.0 / alpha)
    if z == 0.0:
        return math.gamma(1.0 + 1.0 / alpha) / math.pi
    g = lambda xi: math.exp(-xi ** alpha)
    val = _quad(g, 0.0, xi_max, "stable_pdf Fourier inversion", weight="cos", wvar=z)
    return val / math.pi


def _p1_scalar(alpha, z):
    if alpha == 2.0:
        return math.exp(-z * z / 4.0) / math.sqrt(4.0 * math.pi)
    if alpha == 1.0:
        return 1.0 / (math.pi * (1.0 + z * z))
    if abs(z) >= _SERIES_MIN_Z:
        val = _tail_series(alpha, z)
        if val is not None:
            return val
    return _fourier_p1(alpha, z)


def stable_pdf(params: StableMotionParams, t, x):
    """Transition density p_t^alpha(x) in dimension one.

    ``x`` may be a scalar or an array. Closed forms are used for alpha = 1 and
    alpha = 2; otherwise p_1 is computed by Fourier-cosine quadrature (or the
    tail expansion far out) and rescaled by self-similarity.
    """
    _check_t(t)
    if params.dimension != 1:
        raise NotImplementedError("stable_pdf is only provided for dimension 1")
    alpha = params.alpha
    x = np.asarray(x, dtype=float)
    scale = t ** (-1.0 / alpha)
    z = x * scale
    if alpha == 2.0:
        out = np.exp(-z * z / 4.0) / math.sqrt(4.0 * math.pi)
    elif alpha == 1.0:
        out = 1.0 / (math.pi * (1.0 + z * z))
    else:
        flat = np.abs(z).ravel()
        vals = np.empty_like(flat)
        cache = {}
        for i, zi in enumerate(flat):
            key = float(zi)
            if key not in cache:
                cache[key] = _p1_scalar(alpha, key)
            vals[i] = cache[key]
        out = vals.reshape(z.shape)
    out = out * scale
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# positive stable subordinator
# ---------------------------------------------------------------------------

def _zolotarev_A(g, phi):
    # A(phi) = sin(g phi)^{g/(1-g)} sin((1-g) phi) / sin(phi)^{1/(1-g)}
    return (np.sin(g * phi) ** (g / (1.0 - g)) * np.sin((1.0 - g) * phi)
            / np.sin(phi) ** (1.0 / (1.0 - g)))


def _subordinator_series(g, s, tol=1e-15):
    # q_1(s) = (1/pi) sum_k (-1)^{k+1} Gamma(gk+1)/k! sin(pi g k) s^{-gk-1}; entire in s^{-g}
    log_s = math.log(s)
    total = 0.0
    for k in range(1, 400):
        mag = math.exp(gammaln(g * k + 1.0) - gammaln(k + 1.0) - (g * k + 1.0) * log_s)
        total += (-1) ** (k + 1) * mag * math.sin(math.pi * g * k)
        if k > 3 and mag < tol * abs(total):
            return total / math.pi
    return None


def _subordinator_unit(g, s):
    if s <= 0.0:
        return 0.0
    if s > 4.0:
        val = _subordinator_series(g, s)
        if val is not None:
            return val
    c = s ** (-g / (1.0 - g))
    # A increases on (0, pi) from a0 to infinity; the integrand A exp(-c A) peaks where A = 1/c
    a0 = g ** (g / (1.0 - g)) * (1.0 - g)
    if c * a0 > 745.0:
        return 0.0

    def f(phi):
        a = _zolotarev_A(g, phi)
        return a * math.exp(-c * a) if c * a < 745.0 else 0.0

    points = None
    if a0 < 1.0 / c:
        phi_star = optimize.brentq(lambda p: _zolotarev_A(g, p) - 1.0 / c, 1e-12, math.pi - 1e-15)
        points = [phi_star]
    val = _quad(f, 0.0, math.pi, "subordinator_pdf Zolotarev integral",
                epsabs=0.0, epsrel=1e-11, points=points)
    return g / (1.0 - g) / math.pi * s ** (-1.0 / (1.0 - g)) * val


def subordinator_pdf(params: SubordinatorParams, t, s):
    """Density q_t(s) of the positive stable subordinator, E e^{-lam S_t} = e^{-t lam^index}.

    Evaluated by the Zolotarev (Kanter) integral over (0, pi).
    """
    _check_t(t)
    g = params.index
    s = np.asarray(s, dtype=float)
    scale = t ** (-1.0 / g)
    flat = (s * scale).ravel()
    vals = np.array([_subordinator_unit(g, float(v)) for v in flat]).reshape(s.shape) * scale
    return float(vals) if vals.ndim == 0 else vals


def subordination_integral(alpha, z):
    """Right-hand side of the subordination identity, by independent quadrature.

    Computes int_0^inf q_1^{alpha/2}(s) p_s^{(2)}(z) ds on a log-scale in s.
    """
    if not (0.0 < alpha < 2.0):
        raise ValueError(f"alpha must lie in (0, 2), got {alpha}")
    g = alpha / 2.0
    z2 = z * z

    def f(u):
        s = math.exp(u)
        q = _subordinator_unit(g, s)
        if q == 0.0:
            return 0.0
        return q * s * math.exp(-z2 / (4.0 * s)) / math.sqrt(4.0 * math.pi * s)

    # q_1(s) ~ s^{-1-g}; the integrand decays like s^{-g-1/2} in s, i.e. exp(-(g+1/2)u)
    upper = math.log(1e300) / 2.0
    lower = -60.0
    pieces = [lower, -5.0, 0.0, 5.0, 20.0, upper]
    return sum(_quad(f, a, b, "subordination integral", epsabs=1e-14, epsrel=1e-12)
               for a, b in zip(pieces[:-1], pieces[1:]))


def subordination_residual(alpha, z):
    """|p_1^alpha(z) - int q_1^{alpha/2}(s) p_s^{(2)}(z) ds|."""
    lhs = stable_pdf(StableMotionParams(alpha), 1.0, z)
    return abs(lhs - subordination_integral(alpha, z))


def kernel_increment_ratio(params: StableMotionParams, delta, t, x, y):
    """|p_t(x) - p_t(y)| t^{delta/alpha} / (|x-y|^delta (p_t(x/2) + p_t(y/2))).

    Returns 0 when x == y, where both sides of the increment bound vanish.
    """
    _check_t(t)
    if not (0.0 <= delta <= 1.0):
        raise ValueError(f"delta must lie in [0, 1], got {delta}")
    if x == y:
        return 0.0
    p = stable_pdf(params, t, np.array([x, y, x / 2.0, y / 2.0]))
    num = abs(p[0] - p[1]) * t ** (delta / params.alpha)
    return num / (abs(x - y) ** delta * (p[2] + p[3]))


def increment_integral(params: StableMotionParams, t, x1, x2, theta, n_s=48, n_y=4001):
    """int_0^t ds int dy p_s(y) |p_{t-s}(x1-y) - p_{t-s}(x2-y)|^theta with mu = delta_0.

    Gauss-Legendre in s (after the substitution s = t (1 - w^2) which tames the
    (t-s)^{-...} endpoint behaviour) and trapezoid in y on a window scaled to
    the kernel width. Only closed-form kernels (alpha in {1, 2}) are vectorised
    efficiently; other alpha fall back to pointwise quadrature and are slow.
    """
    _check_t(t)
    nodes, weights = np.polynomial.legendre.leggauss(n_s)
    w = 0.5 * (nodes + 1.0)
    ww = 0.5 * weights
    total = 0.0
    for wi, wt in zip(w, ww):
        s = t * (1.0 - wi * wi)
        r = t - s
        jac = 2.0 * t * wi
        width = 40.0 * max(s, r) ** (1.0 / params.alpha) + abs(x1) + abs(x2)
        if params.alpha < 2.0:
            width *= 5.0
        y = np.linspace(-width, width, n_y)
        # refine near the two singular-ish points
        loc = np.linspace(min(x1, x2) - 20 * r ** (1 / params.alpha),
                          max(x1, x2) + 20 * r ** (1 / params.alpha), n_y)
        y = np.unique(np.concatenate([y, loc]))
        ps = stable_pdf(params, s, y)
        d = np.abs(stable_pdf(params, r, x1 - y) - stable_pdf(params, r, x2 - y)) ** theta
        total += wt * jac * np.trapezoid(ps * d, y)
    return total


# ---------------------------------------------------------------------------
# samplers
# ---------------------------------------------------------------------------

def _cms_symmetric(alpha, rng, size):
    v = rng.uniform(-math.pi / 2.0, math.pi / 2.0, size)
    if alpha == 2.0:
        return math.sqrt(2.0) * rng.standard_normal(size)
    w = rng.standard_exponential(size)
    if alpha == 1.0:
        return np.tan(v)
    return (np.sin(alpha * v) / np.cos(v) ** (1.0 / alpha)
            * (np.cos((1.0 - alpha) * v) / w) ** ((1.0 - alpha) / alpha))


def sample_positive_stable(params: SubordinatorParams, t, rng, size=None):
    """Kanter's representation of S_t with E e^{-lam S_t} = e^{-t lam^index}."""
    _check_t(t)
    g = params.index
    u = rng.uniform(0.0, math.pi, size)
    e = rng.standard_exponential(size)
    s = (_zolotarev_A(g, u) / e) ** ((1.0 - g) / g)
    return t ** (1.0 / g) * s


def sample_symmetric_stable(params: StableMotionParams, t, rng, size=None):
    """Increment of the symmetric alpha-stable motion over time ``t``.

    Dimension one uses Chambers-Mallows-Stuck; higher dimensions use the
    sub-Gaussian representation sqrt(2 S) N with S an (alpha/2)-subordinator,
    which yields the isotropic law with characteristic function exp(-t|xi|^alpha).
    The trailing axis has length ``dimension`` when dimension > 1.
    """
    _check_t(t)
    alpha = params.alpha
    scale = t ** (1.0 / alpha)
    if params.dimension == 1:
        return scale * _cms_symmetric(alpha, rng, size)
    shape = (() if size is None else tuple(np.atleast_1d(size))) + (params.dimension,)
    g = rng.standard_normal(shape)
    if alpha == 2.0:
        return scale * math.sqrt(2.0) * g
    s = sample_positive_stable(SubordinatorParams(alpha / 2.0), 1.0, rng, shape[:-1])
    return scale * np.sqrt(2.0 * s)[..., None] * g


def _spectrally_positive_unit(kappa, rng, size):
    # Chambers-Mallows-Stuck for the totally right-skewed law S_kappa(1, 1, 0)
    # (characteristic exponent -|th|^k (1 - i sgn(th) tan(pi k/2))), then
    # rescaled so that E exp(-lam L_1) = exp(lam^kappa).
    tan_term = math.tan(math.pi * kappa / 2.0)
    b = math.atan(tan_term) / kappa
    s = (1.0 + tan_term ** 2) ** (1.0 / (2.0 * kappa))
    v = rng.uniform(-math.pi / 2.0, math.pi / 2.0, size)
    w = rng.standard_exponential(size)
    x = (s * np.sin(kappa * (v + b)) / np.cos(v) ** (1.0 / kappa)
         * (np.cos(v - kappa * (v + b)) / w) ** ((1.0 - kappa) / kappa))
    sigma = abs(math.cos(math.pi * kappa / 2.0)) ** (1.0 / kappa)
    return sigma * x


def sample_spectrally_positive(params: SpectrallyPositiveParams, t, rng, size=None):
    """Draw(s) of L_t with E e^{-lam L_t} = e^{t lam^kappa}."""
    _check_t(t)
    return t ** (1.0 / params.kappa) * _spectrally_positive_unit(params.kappa, rng, size)


@dataclass
class SpectrallyPositivePath:
    times: np.ndarray
    values: np.ndarray
    jump_times: np.ndarray
    jump_sizes: np.ndarray
    cutoff: float

    def max_jump_until(self, u):
        sel = self.jump_times <= u
        return float(self.jump_sizes[sel].max()) if sel.any() else 0.0


def default_jump_cutoff(params: SpectrallyPositiveParams, t, rel=1e-3):
    """Cutoff making the small-jump third absolute moment ``rel`` times (t^{1/kappa})^3."""
    k = params.kappa
    c = params.levy_density_constant
    third = rel * t ** (3.0 / k) / t
    return (third * (3.0 - k) / c) ** (1.0 / (3.0 - k))


def spectrally_positive_paths(params: SpectrallyPositiveParams, t, n_steps, n_paths, rng,
                              cutoff=None, max_expected_jumps=1e7):
    """Grid paths of L with explicit large jumps.

    Jumps above ``cutoff`` come from a Poisson point process with intensity
    C r^{-1-kappa} dr ds; the jumps below the cutoff are replaced by a Brownian
    motion with the exact truncated variance. The compensating drift of the
    large jumps is subtracted so E L_t = 0.

    Returns ``(times, values, jump_index, jump_times, jump_sizes)``, where
    ``jump_index`` gives the path each jump belongs to.
    """
    _check_t(t)
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    k = params.kappa
    c = params.levy_density_constant
    if cutoff is None:
        cutoff = default_jump_cutoff(params, t)
    if not cutoff > 0:
        raise ValueError("jump cutoff must be positive")
    rate = c * cutoff ** (-k) / k
    expected = rate * t * n_paths
    if expected > max_expected_jumps:
        raise ValueError(f"cutoff {cutoff:g} implies {expected:.3g} expected jumps, "
                         f"above the budget {max_expected_jumps:g}")
    drift = c * cutoff ** (1.0 - k) / (k - 1.0)
    sigma = math.sqrt(c * cutoff ** (2.0 - k) / (2.0 - k))
    times = np.linspace(0.0, t, n_steps + 1)
    dt = t / n_steps
    counts = rng.poisson(rate * t, n_paths)
    total = int(counts.sum())
    jump_index = np.repeat(np.arange(n_paths), counts)
    jump_times = rng.uniform(0.0, t, total)
    jump_sizes = cutoff * rng.uniform(0.0, 1.0, total) ** (-1.0 / k)
    # jumps at time s are first visible at grid index ceil(s/dt)
    cell = np.minimum(np.ceil(jump_times / dt).astype(np.int64), n_steps)
    incr = np.zeros((n_paths, n_steps + 1))
    np.add.at(incr, (jump_index, cell), jump_sizes)
    gauss = rng.standard_normal((n_paths, n_steps)) * (sigma * math.sqrt(dt))
    incr[:, 1:] += gauss - drift * dt
    values = np.cumsum(incr, axis=1)
    return times, values, jump_index, jump_times, jump_sizes


def sample_spectrally_positive_path(params: SpectrallyPositiveParams, t, n_steps, rng,
                                    cutoff=None, max_expected_jumps=1e6):
    """One path of L on a regular grid with its jumps above ``cutoff`` recorded."""
    if cutoff is None:
        cutoff = default_jump_cutoff(params, t)
    times, values, _, jt, js = spectrally_positive_paths(
        params, t, n_steps, 1, rng, cutoff=cutoff, max_expected_jumps=max_expected_jumps)
    order = np.argsort(jt)
    return SpectrallyPositivePath(times, values[0], jt[order], js[order], cutoff)
