"""Regularity diagnostics for fixed-time density fields."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .particles import DensityField, Grid, JumpRecords, ModelParams, density_histogram


@dataclass(frozen=True)
class RegimeReport:
    continuous: bool
    eta_c: float
    eta_c_prime: float
    eta_bar_c: float

    def summary(self):
        if self.continuous:
            return f"continuous, eta_c={self.eta_c:.6f}"
        return "locally unbounded"


def classify_regime(model: ModelParams) -> RegimeReport:
    """Continuity of the fixed-time density and the associated exponents.

    ``eta_c`` and ``eta_c_prime`` are nan outside the continuous regime;
    ``eta_bar_c`` is reported for reference only.
    """
    al = model.motion.alpha
    be = model.branching.beta
    d = model.motion.dimension
    if not d < al / be:
        raise ValueError(f"outside the density regime: d < alpha/beta fails "
                         f"(d={d}, alpha/beta={al / be:.6g})")
    continuous = d == 1 and al > 1.0 + be
    eta_bar = min((1.0 + al) / (1.0 + be) - 1.0, 1.0)
    if not continuous:
        return RegimeReport(False, math.nan, math.nan, eta_bar)
    eta_c = al / (1.0 + be) - 1.0
    eta_p = eta_c if be >= (al - 1.0) / 2.0 else be / (1.0 + be)
    return RegimeReport(True, eta_c, eta_p, eta_bar)


# ---------------------------------------------------------------------------
# dyadic oscillations and exponent fits
# ---------------------------------------------------------------------------

@dataclass
class OscillationTable:
    levels: np.ndarray
    oscillations: np.ndarray
    window: tuple

    def __post_init__(self):
        self.levels = np.asarray(self.levels, dtype=int)
        self.oscillations = np.asarray(self.oscillations, dtype=float)
        if np.any(np.diff(self.levels) <= 0):
            raise ValueError("levels must be strictly increasing")


@dataclass
class HolderEstimate:
    exponent: float
    stderr: float
    fit_range: tuple
    window: tuple
    replicas: int = 1


def _values_at(field: DensityField, x):
    """Field value on the bin whose left edge is x (x must be a bin edge up to rounding)."""
    u = (x - field.grid.origin[0]) / field.grid.h
    idx = np.floor(u + 1e-9).astype(np.int64)
    if np.any(idx < 0) or np.any(idx >= field.grid.shape[0]):
        raise ValueError("window extends beyond the grid")
    return field.values[idx]


def dyadic_oscillations(field: DensityField, window, n_range) -> OscillationTable:
    """max_k |f((k+1)2^-n) - f(k 2^-n)| over dyadic pairs inside ``window``."""
    if field.grid.dimension != 1:
        raise ValueError("dyadic oscillations are one-dimensional")
    lo, hi = window
    levels = list(n_range)
    if 2.0 ** -max(levels) < field.grid.h * (1 - 1e-12):
        raise ValueError(f"level {max(levels)} is finer than the grid (h={field.grid.h:g})")
    osc = []
    for n in levels:
        step = 2.0 ** -n
        k0 = math.ceil(lo / step - 1e-9)
        k1 = math.floor(hi / step + 1e-9)
        if k1 - k0 < 1:
            raise ValueError(f"window {window} holds no dyadic pair at level {n}")
        x = np.arange(k0, k1 + 1) * step
        v = _values_at(field, x)
        osc.append(float(np.max(np.abs(np.diff(v)))))
    return OscillationTable(np.array(levels), np.array(osc), (lo, hi))


def fit_exponent(table: OscillationTable) -> HolderEstimate:
    """Least-squares slope of log2(oscillation) against level n; exponent = -slope."""
    pos = table.oscillations > 0
    if not np.any(pos):
        return HolderEstimate(math.inf, 0.0, (int(table.levels[0]), int(table.levels[-1])),
                              table.window)
    n = table.levels[pos].astype(float)
    y = np.log2(table.oscillations[pos])
    if len(n) < 3:
        raise ValueError("need at least three levels with positive oscillation")
    a = np.column_stack([np.ones_like(n), n])
    coef, res, *_ = np.linalg.lstsq(a, y, rcond=None)
    resid = y - a @ coef
    s2 = resid @ resid / (len(n) - 2)
    se = math.sqrt(s2 / np.sum((n - n.mean()) ** 2))
    return HolderEstimate(float(-coef[1]), se, (int(n[0]), int(n[-1])), table.window)


def fit_exponent_replicas(tables, levels=None) -> HolderEstimate:
    """Weighted fit of the replica-mean log2 oscillation per level.

    Weights are inverse variances of the level means across replicas. All
    tables must contain ``levels`` (default: the levels of the first table).
    """
    tables = list(tables)
    if len(tables) < 2:
        raise ValueError("need at least two replicas")
    lv = list(tables[0].levels) if levels is None else list(levels)
    if len(lv) < 3:
        raise ValueError("need at least three levels")
    rows = []
    for tab in tables:
        pos = {int(n): o for n, o in zip(tab.levels, tab.oscillations)}
        if any(pos.get(int(n), 0.0) <= 0 for n in lv):
            raise ValueError("a replica lacks a positive oscillation at a fitted level")
        rows.append([math.log2(pos[int(n)]) for n in lv])
    y_all = np.array(rows)
    n = np.array(lv, float)
    y = y_all.mean(axis=0)
    var = y_all.var(axis=0, ddof=1) / len(rows)
    w = 1.0 / np.maximum(var, 1e-12)
    a = np.column_stack([np.ones_like(n), n])
    aw = a * w[:, None]
    cov = np.linalg.inv(a.T @ aw)
    coef = cov @ (aw.T @ y)
    return HolderEstimate(float(-coef[1]), float(math.sqrt(cov[1, 1])), (lv[0], lv[-1]),
                          tables[0].window, len(rows))


@dataclass
class LevelStats:
    """Per-level oscillation of a histogram density with its counting-noise scale."""

    table: OscillationTable
    mean_count: np.ndarray
    noise: np.ndarray

    @property
    def snr(self):
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.table.oscillations / self.noise


def level_grid(window, levels, smoothing=4) -> Grid:
    """Finest histogram grid serving every level: bins of 2^-n_max / smoothing
    on [lo, hi + 2^-n_min), so each coarser level is an exact rebin."""
    lo, hi = window
    n0, n1 = min(levels), max(levels)
    if abs((hi - lo) * 2.0 ** n0 - round((hi - lo) * 2.0 ** n0)) > 1e-9 or \
            abs(lo * 2.0 ** n0 - round(lo * 2.0 ** n0)) > 1e-9:
        raise ValueError(f"window {window} is not aligned with the level-{n0} dyadic grid")
    h = 2.0 ** -n1 / smoothing
    return Grid.regular(lo, hi + 2.0 ** -n0, h)


def _subfield(field: DensityField, grid: Grid) -> DensityField:
    """Restriction of ``field`` to ``grid``, which must be a block of its bins."""
    off = (grid.origin[0] - field.grid.origin[0]) / field.grid.h
    i0 = int(round(off))
    if abs(off - i0) > 1e-6 or i0 < 0 or i0 + grid.shape[0] > field.grid.shape[0]:
        raise ValueError("window (plus one coarse bin) is not inside the field grid")
    return DensityField(grid, field.values[i0:i0 + grid.shape[0]], field.total_mass,
                        field.outside_mass)


def level_statistics(field: DensityField, eps, window, levels, smoothing=4):
    """Oscillation at each level n from the histogram rebinned to h = 2^-n / smoothing.

    ``field`` must contain ``level_grid(window, levels, smoothing)`` as a block
    of its bins (typically it is that grid), so
    f(k 2^-n) is the average density over [k 2^-n, k 2^-n + h). ``noise`` is
    the expected maximum of the pair differences if bin counts were Poisson:
    sqrt(2 log(#pairs)) * max_k sqrt(eps (f_k + f_{k+1}) / h).
    """
    lo, hi = window
    levels = list(levels)
    n1 = max(levels)
    fine_h = 2.0 ** -n1 / smoothing
    if abs(field.grid.h / fine_h - 1) > 1e-12:
        raise ValueError("field bin width does not match the finest level")
    field = _subfield(field, level_grid(window, levels, smoothing))
    inside_cells = int(round((hi - lo) / fine_h))
    inside = float(field.values[:inside_cells].sum()) * fine_h / eps
    osc, cnt, noise = [], [], []
    for n in levels:
        h = 2.0 ** -n / smoothing
        coarse = field.rebin(2 ** (n1 - n))
        step = 2.0 ** -n
        k = np.arange(math.ceil(lo / step - 1e-9), math.floor(hi / step + 1e-9) + 1)
        f = _values_at(coarse, k * step)
        d = np.abs(np.diff(f))
        osc.append(float(d.max()))
        cnt.append(inside * h / (hi - lo))
        sig = np.sqrt(eps * (f[1:] + f[:-1]) / h)
        noise.append(math.sqrt(2.0 * math.log(max(len(d), 2))) * float(sig.max()))
    tab = OscillationTable(np.asarray(levels), np.asarray(osc), tuple(window))
    return LevelStats(tab, np.asarray(cnt), np.asarray(noise))


def positions_level_statistics(positions, eps, window, levels, smoothing=4):
    """``level_statistics`` for an explicit particle configuration."""
    grid = level_grid(window, levels, smoothing)
    field = density_histogram(np.asarray(positions, float).reshape(-1, 1), eps, grid)
    return level_statistics(field, eps, window, levels, smoothing)


def admissible(stats: LevelStats, min_count=30, snr_min=3.0):
    """Mask of levels meeting the count and signal-to-noise constraints."""
    return (stats.mean_count >= min_count) & (stats.snr >= snr_min)


def estimate_exponent(stats: LevelStats, min_count=30, snr_min=3.0):
    """Hoelder fit of one replica restricted to admissible levels.

    A level is admissible when the histogram has at least ``min_count``
    particles per bin on average and its oscillation is at least ``snr_min``
    times the counting-noise scale. Returns ``(table, estimate)``, or
    ``(table, None)`` if fewer than three levels qualify.
    """
    ok = admissible(stats, min_count, snr_min)
    t = stats.table
    tab = OscillationTable(t.levels[ok], t.oscillations[ok], t.window)
    if ok.sum() < 3:
        return tab, None
    return tab, fit_exponent(tab)


def fit_replicas(stats_list, min_count=30, snr_min=3.0, min_fraction=0.5):
    """Replica-pooled Hoelder fit on the levels admissible in >= min_fraction of replicas.

    Replicas without particles in the window are left out, as is any replica
    whose oscillation vanishes at a selected level (its log is undefined;
    this only happens when the window is nearly empty). Every other replica
    contributes at every selected level, so replicas with unusually large
    oscillations do not select their own levels. ``estimate.replicas`` is
    the number of replicas in the fit. Returns ``(estimate, levels)``.
    """
    stats_list = [st for st in stats_list if st.mean_count[0] > 0]
    if not stats_list:
        raise ValueError("no replica has particles in the window")
    masks = np.array([admissible(st, min_count, snr_min) for st in stats_list])
    frac = masks.mean(axis=0)
    levels = [int(n) for n, f in zip(stats_list[0].table.levels, frac) if f >= min_fraction]
    if len(levels) < 3:
        raise ValueError(f"only {len(levels)} levels are admissible in enough replicas")
    sel = np.isin(stats_list[0].table.levels, levels)
    tables = [st.table for st in stats_list if np.all(st.table.oscillations[sel] > 0)]
    est = fit_exponent_replicas(tables, levels)
    return est, levels


# ---------------------------------------------------------------------------
# local unboundedness
# ---------------------------------------------------------------------------

@dataclass
class UnboundednessResult:
    bin_widths: np.ndarray
    max_values: np.ndarray
    growth: float
    verdict: str


def unboundedness_grid(window, levels) -> Grid:
    """Histogram grid with bins 2^-n_max on ``window``; coarser levels are rebins."""
    lo, hi = window
    n0 = min(levels)
    if abs((hi - lo) * 2.0 ** n0 - round((hi - lo) * 2.0 ** n0)) > 1e-9:
        raise ValueError(f"window {window} is not a whole number of level-{n0} bins")
    return Grid.regular(lo, hi, 2.0 ** -max(levels))


def max_bin_profile(field: DensityField, levels):
    """(h, max bin value) for h = 2^-n over ``levels``, rebinning the finest field."""
    levels = list(levels)
    n1 = max(levels)
    if abs(field.grid.h * 2.0 ** n1 - 1) > 1e-12:
        raise ValueError("field bin width does not match the finest level")
    hs, mx = [], []
    for n in levels:
        hs.append(2.0 ** -n)
        mx.append(float(field.rebin(2 ** (n1 - n)).values.max()))
    return np.array(hs), np.array(mx)


def unboundedness_diagnostic(field: DensityField, eps, levels, rho_min=1.3, min_count=30):
    """Max-bin growth over the final three admissible refinement levels of one replica.

    ``field`` is the histogram at the finest level on the diagnostic window
    (see ``unboundedness_grid``). growth = geometric mean of the max-bin ratio
    per halving across those levels; verdict is "diverging" when growth >=
    rho_min, "bounded" otherwise, and "inconclusive" when the window holds no
    mass or fewer than three levels keep ``min_count`` particles per bin on
    average.
    """
    levels = list(levels)
    d = field.grid.dimension
    vol = field.grid.h ** d * float(np.prod(field.grid.shape))
    inside = float(field.values.sum()) * field.grid.h ** d / eps
    if inside <= 0.5:
        return UnboundednessResult(np.array([]), np.array([]), math.nan, "inconclusive")
    ok = [n for n in levels if inside * (2.0 ** -n) ** d / vol >= min_count]
    hs, mx = max_bin_profile(field, levels)
    if len(ok) < 3:
        return UnboundednessResult(hs, mx, math.nan, "inconclusive")
    last = ok[-3:]
    i0 = levels.index(last[0])
    i2 = levels.index(last[-1])
    halvings = last[-1] - last[0]
    growth = (mx[i2] / mx[i0]) ** (1.0 / halvings)
    return UnboundednessResult(hs, mx, float(growth), "diverging" if growth >= rho_min else "bounded")


def summarize_verdicts(results):
    """Fraction of conclusive replicas with a diverging verdict."""
    conclusive = [r for r in results if r.verdict != "inconclusive"]
    if not conclusive:
        return math.nan, 0
    return sum(r.verdict == "diverging" for r in conclusive) / len(conclusive), len(conclusive)


# ---------------------------------------------------------------------------
# big jumps close to the observation time
# ---------------------------------------------------------------------------

def h_beta(u, beta):
    """u^theta log^theta(1/u) with theta = 1/(1+beta), for 0 < u < 1."""
    th = 1.0 / (1.0 + beta)
    u = np.asarray(u, float)
    return u ** th * np.log(1.0 / u) ** th


def lemma_jump_constant(rho, beta, mu_mass, a, t, gamma, eps_target):
    """Threshold constant c with expected number of exceedances <= eps_target.

    Summing the compensator of jumps larger than c (t-s)^{1/(1+beta)-gamma}
    over dyadic time blocks [t - 2^{-k} t, t - 2^{-k-1} t) gives a geometric
    series with ratio 2^{-gamma(1+beta)}; c is chosen to set that bound to
    ``eps_target``.
    """
    if not (0.0 < gamma < 1.0 / (1.0 + beta)):
        raise ValueError("gamma must lie in (0, 1/(1+beta))")
    q = 2.0 ** (-gamma * (1.0 + beta))
    geo = q / (1.0 - q)
    mass_bound = mu_mass * math.exp(abs(a) * t)
    # per block k: rho/(1+beta) c^{-(1+beta)} |mu| e^{|a|t} t^{gamma(1+beta)} 2^{-k gamma (1+beta)}
    scale = rho / (1.0 + beta) * mass_bound * t ** (gamma * (1.0 + beta)) * geo / eps_target
    return scale ** (1.0 / (1.0 + beta))


@dataclass
class JumpScan:
    max_ratio: float
    exceed_count: int
    ratios: np.ndarray
    max_ratio_h: float


def big_jump_scan(records: JumpRecords, t, gamma, beta, c=math.inf):
    """Ratios r / (t-s)^{1/(1+beta)-gamma} for each burst; count of ratios > c."""
    if not (0.0 < gamma < 1.0 / (1.0 + beta)):
        raise ValueError("gamma must lie in (0, 1/(1+beta))")
    if len(records) == 0:
        return JumpScan(0.0, 0, np.zeros(0), 0.0)
    u = t - records.times
    ratios = records.masses / u ** (1.0 / (1.0 + beta) - gamma)
    small = (u > 0) & (u < 1)
    rh = records.masses[small] / h_beta(u[small], beta) if small.any() else np.zeros(0)
    return JumpScan(float(ratios.max()), int(np.sum(ratios > c)), ratios,
                    float(rh.max()) if len(rh) else 0.0)
