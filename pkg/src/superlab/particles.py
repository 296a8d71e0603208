"""Branching particle approximation of the (alpha, d, beta)-superprocess.

Each particle carries mass ``eps``, moves as an independent symmetric
alpha-stable motion and, independently of everything else,

* branches at rate ``lam_eps = (1+beta) b eps^-beta`` into ``K`` children with
  generating function ``f(s) = s + (1-s)^(1+beta)/(1+beta)``;
* at rate ``|a|`` either splits in two (``a > 0``) or dies (``a < 0``).

Two samplers are provided. ``evolve`` runs every event (needed for burst
records and event logs). ``sample_fixed_time`` draws the configuration at a
single time exactly in law by simulating only the lineages that survive to
that time, which is orders of magnitude cheaper when ``eps`` is small.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numba import njit
from scipy import integrate

from .rng import seed_stream
from .stable import StableMotionParams

OFFSPRING_KMAX = 1_000_000
DEFAULT_STEP_BUDGET = 10**8


class BudgetExceeded(RuntimeError):
    """A simulation hit its particle-step budget (typically supercritical blow-up)."""

    def __init__(self, steps, budget, time_reached, particles):
        super().__init__(f"particle-step budget {budget} exceeded after {steps} steps "
                         f"at time {time_reached:.6g} with {particles} particles")
        self.steps = steps
        self.budget = budget
        self.time_reached = time_reached
        self.particles = particles


# ---------------------------------------------------------------------------
# parameter types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BranchingParams:
    a: float
    b: float
    beta: float

    def __post_init__(self):
        if not self.b > 0:
            raise ValueError(f"b must be positive, got {self.b}")
        if not (0.0 < self.beta < 1.0):
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")

    @property
    def rho(self):
        """Jump-intensity constant b (1+beta) beta / Gamma(1-beta)."""
        return self.b * (1.0 + self.beta) * self.beta / math.gamma(1.0 - self.beta)

    def psi(self, v):
        return -self.a * v + self.b * np.power(v, 1.0 + self.beta)

    def branching_rate(self, eps):
        return (1.0 + self.beta) * self.b * eps ** (-self.beta)


@dataclass(frozen=True)
class ModelParams:
    motion: StableMotionParams
    branching: BranchingParams

    @property
    def has_density(self):
        return self.motion.dimension < self.motion.alpha / self.branching.beta

    def require_density_regime(self):
        if not self.has_density:
            raise ValueError(f"density regime requires d < alpha/beta; got d={self.motion.dimension}, "
                             f"alpha/beta={self.motion.alpha / self.branching.beta:.6g}")


@dataclass(frozen=True)
class InitialMeasure:
    """Finite initial measure: ``point`` (at ``x0``), ``uniform`` (on ``box``) or ``atoms``."""

    kind: str
    total_mass: float = 1.0
    x0: tuple = (0.0,)
    box: tuple = ((0.0, 1.0),)
    atoms: tuple = ()

    def __post_init__(self):
        if self.kind not in ("point", "uniform", "atoms"):
            raise ValueError(f"unknown initial measure kind {self.kind!r}")
        if self.kind == "atoms":
            if len(self.atoms) == 0:
                raise ValueError("empty initial measure")
            m = sum(w for _, w in self.atoms)
            object.__setattr__(self, "total_mass", float(m))
        if not self.total_mass > 0:
            raise ValueError("empty initial measure (total mass must be positive)")

    @classmethod
    def point(cls, x0=0.0, mass=1.0):
        return cls("point", float(mass), x0=tuple(np.atleast_1d(np.asarray(x0, float))))

    @classmethod
    def uniform(cls, box, mass=1.0):
        box = tuple(tuple(map(float, side)) for side in np.atleast_2d(box))
        return cls("uniform", float(mass), box=box)

    @classmethod
    def from_atoms(cls, atoms):
        atoms = tuple((tuple(np.atleast_1d(np.asarray(x, float))), float(w)) for x, w in atoms)
        return cls("atoms", atoms=atoms)

    @property
    def dimension(self):
        if self.kind == "point":
            return len(self.x0)
        if self.kind == "uniform":
            return len(self.box)
        return len(self.atoms[0][0])

    def sample(self, n, rng):
        """``n`` i.i.d. positions from the normalized measure, shape (n, d)."""
        d = self.dimension
        if self.kind == "point":
            return np.tile(np.asarray(self.x0, float), (n, 1))
        if self.kind == "uniform":
            lo = np.array([s[0] for s in self.box])
            hi = np.array([s[1] for s in self.box])
            return lo + (hi - lo) * rng.random((n, d))
        locs = np.array([x for x, _ in self.atoms], float)
        w = np.array([m for _, m in self.atoms], float)
        idx = rng.choice(len(w), size=n, p=w / w.sum())
        return locs[idx]

    def integrate(self, f):
        """<mu, f> for a vectorised f acting on (n, d) arrays (uniform: 64-point Gauss rule per axis)."""
        if self.kind == "point":
            return self.total_mass * float(f(np.asarray(self.x0, float)[None, :])[0])
        if self.kind == "atoms":
            locs = np.array([x for x, _ in self.atoms], float)
            w = np.array([m for _, m in self.atoms], float)
            return float(np.dot(w, f(locs)))
        if self.dimension != 1:
            raise NotImplementedError("uniform integration only in d = 1")
        lo, hi = self.box[0]
        x, wq = np.polynomial.legendre.leggauss(64)
        pts = lo + (hi - lo) * 0.5 * (x + 1.0)
        return self.total_mass * 0.5 * float(np.dot(wq, f(pts[:, None])))


@dataclass
class SimulationConfig:
    model: ModelParams
    initial: InitialMeasure
    horizon: float
    particle_mass: float
    seed: int = 0
    replica_count: int = 1
    jump_threshold: float | None = None
    step_budget: int = DEFAULT_STEP_BUDGET

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if not self.particle_mass > 0:
            raise ValueError("particle_mass must be positive")
        if self.particle_mass > self.initial.total_mass:
            raise ValueError("particle_mass must not exceed the initial total mass")
        if int(self.replica_count) != self.replica_count or self.replica_count < 1:
            raise ValueError("replica_count must be a positive integer")
        if self.jump_threshold is None:
            self.jump_threshold = 10.0 * self.particle_mass
        if self.jump_threshold < 0:
            raise ValueError("jump_threshold must be non-negative")
        if self.initial.dimension != self.model.motion.dimension:
            raise ValueError("initial measure and motion have different dimensions")

    @property
    def initial_count(self):
        return initial_particle_count(self.initial.total_mass, self.particle_mass)


def initial_particle_count(total_mass, eps):
    # the small offset keeps 1/1e-4 from rounding up to 10001
    return int(math.ceil(total_mass / eps - 1e-9))


@dataclass
class ParticleSystem:
    """Positions of alive particles, each of mass ``eps``.

    Motion is applied lazily: ``last_update[i]`` is the time at which
    ``positions[i]`` was last brought up to date. ``synchronize`` moves every
    particle to ``current_time``.
    """

    current_time: float
    positions: np.ndarray
    last_update: np.ndarray
    eps: float
    motion: StableMotionParams

    @property
    def count(self):
        return len(self.positions)

    @property
    def total_mass(self):
        return self.eps * self.count

    def synchronize(self, rng):
        if self.count:
            _advance_all(self.positions, self.last_update, self.count, self.current_time,
                         self.motion.alpha, rng)
        return self


@dataclass
class JumpRecords:
    """Burst records (time, location, mass) with mass >= threshold."""

    times: np.ndarray
    locations: np.ndarray
    masses: np.ndarray
    threshold: float
    replica: np.ndarray | None = None
    # int X_s(R) ds over the simulated interval, per replica
    mass_integral: float | np.ndarray = 0.0
    n_replicas: int = 1

    def __len__(self):
        return len(self.times)

    @classmethod
    def concatenate(cls, recs):
        recs = list(recs)
        reps = [np.full(len(r), i, dtype=np.int64) if r.replica is None else r.replica
                for i, r in enumerate(recs)]
        return cls(np.concatenate([r.times for r in recs]),
                   np.concatenate([r.locations for r in recs]),
                   np.concatenate([r.masses for r in recs]),
                   recs[0].threshold, np.concatenate(reps),
                   np.array([r.mass_integral for r in recs], dtype=float), len(recs))


@dataclass
class EventLog:
    """Every branching event: time, location, net mass change and type (0 stable, 1 drift)."""

    times: np.ndarray
    locations: np.ndarray
    net_mass: np.ndarray
    kind: np.ndarray


@dataclass
class Snapshots:
    """Particle positions at observation times; ``positions[offsets[i]:offsets[i+1]]`` is time i."""

    times: np.ndarray
    positions: np.ndarray
    offsets: np.ndarray
    eps: float

    def at(self, i):
        return self.positions[self.offsets[i]:self.offsets[i + 1]]

    @property
    def masses(self):
        return self.eps * np.diff(self.offsets)


@dataclass
class Grid:
    origin: np.ndarray
    h: float
    shape: tuple

    @classmethod
    def regular(cls, lo, hi, h):
        lo = np.atleast_1d(np.asarray(lo, float))
        hi = np.atleast_1d(np.asarray(hi, float))
        shape = tuple(int(round(v)) for v in (hi - lo) / h)
        return cls(lo, float(h), shape)

    @property
    def dimension(self):
        return len(self.shape)

    def edges(self, axis=0):
        return self.origin[axis] + self.h * np.arange(self.shape[axis] + 1)

    def centers(self, axis=0):
        return self.origin[axis] + self.h * (np.arange(self.shape[axis]) + 0.5)


@dataclass
class DensityField:
    grid: Grid
    values: np.ndarray
    total_mass: float
    outside_mass: float = 0.0

    def rebin(self, factor):
        """Merge ``factor`` adjacent bins per axis (exact for histograms)."""
        if any(s % factor for s in self.grid.shape):
            raise ValueError("grid shape not divisible by the rebin factor")
        v = self.values
        for ax in range(v.ndim):
            shp = list(v.shape)
            shp[ax:ax + 1] = [shp[ax] // factor, factor]
            v = v.reshape(shp).mean(axis=ax + 1)
        g = Grid(self.grid.origin.copy(), self.grid.h * factor,
                 tuple(s // factor for s in self.grid.shape))
        return DensityField(g, v, self.total_mass, self.outside_mass)


# ---------------------------------------------------------------------------
# offspring law
# ---------------------------------------------------------------------------

def offspring_pmf(beta, kmax):
    """p_0..p_kmax of f(s) = s + (1-s)^(1+beta)/(1+beta)."""
    g = 1.0 + beta
    k = np.arange(1, kmax + 1, dtype=float)
    c = np.concatenate([[1.0], np.cumprod((k - 1.0 - g) / k)])
    p = c / g
    p[1] += 1.0
    p[1] = 0.0 if abs(p[1]) < 1e-15 else p[1]
    return p


def offspring_survival(beta, kmax=OFFSPRING_KMAX):
    """P(K > k) for k = 0..kmax, via the exact partial sums of the binomial series."""
    k = np.arange(2, kmax + 1, dtype=float)
    tail = np.concatenate([[beta, beta], beta * np.cumprod((k - 1.0 - beta) / k)])
    return tail / (1.0 + beta)


_SURV_CACHE = {}


def _survival_table(beta):
    key = float(beta)
    if key not in _SURV_CACHE:
        _SURV_CACHE.clear()
        _SURV_CACHE[key] = offspring_survival(key)
    return _SURV_CACHE[key]


@njit(cache=True)
def _offspring_from_uniform(surv, beta, u):
    kmax = surv.shape[0] - 1
    if u < surv[kmax]:
        # continue P(K > k) ~ surv[kmax] (k/kmax)^-(1+beta) beyond the table
        k = kmax * (surv[kmax] / u) ** (1.0 / (1.0 + beta))
        if k > 1e13:
            return np.int64(10**13)
        return max(np.int64(kmax + 1), np.int64(k))
    lo = 0
    hi = kmax
    # first index with surv[k] <= u
    while lo < hi:
        mid = (lo + hi) // 2
        if surv[mid] <= u:
            hi = mid
        else:
            lo = mid + 1
    return np.int64(lo)


@njit(cache=True)
def _sample_offspring_batch(surv, beta, u):
    out = np.empty(u.shape[0], dtype=np.int64)
    for i in range(u.shape[0]):
        out[i] = _offspring_from_uniform(surv, beta, u[i])
    return out


def sample_offspring(beta, rng, size):
    """Draws of the offspring number K (inverse CDF plus Pareto continuation)."""
    return _sample_offspring_batch(_survival_table(beta), float(beta), rng.random(size))


# ---------------------------------------------------------------------------
# motion kernels (numba)
# ---------------------------------------------------------------------------

@njit(cache=True)
def _cms1(alpha, rng):
    v = math.pi * (rng.random() - 0.5)
    if alpha == 1.0:
        return math.tan(v)
    w = rng.standard_exponential()
    return (math.sin(alpha * v) / math.cos(v) ** (1.0 / alpha)
            * (math.cos((1.0 - alpha) * v) / w) ** ((1.0 - alpha) / alpha))


@njit(cache=True)
def _kanter(g, rng):
    u = math.pi * rng.random()
    e = rng.standard_exponential()
    a = (math.sin(g * u) ** (g / (1.0 - g)) * math.sin((1.0 - g) * u)
         / math.sin(u) ** (1.0 / (1.0 - g)))
    return (a / e) ** ((1.0 - g) / g)


@njit(cache=True)
def _move(x, dt, alpha, rng):
    """Add an alpha-stable increment over ``dt`` to the vector x in place."""
    if dt <= 0.0:
        return
    d = x.shape[0]
    if d == 1:
        if alpha == 2.0:
            x[0] += math.sqrt(2.0 * dt) * rng.standard_normal()
        else:
            x[0] += dt ** (1.0 / alpha) * _cms1(alpha, rng)
        return
    if alpha == 2.0:
        s = 1.0
    else:
        s = _kanter(alpha / 2.0, rng)
    sc = math.sqrt(2.0 * s) * dt ** (1.0 / alpha)
    for j in range(d):
        x[j] += sc * rng.standard_normal()


@njit(cache=True)
def _advance_all(pos, tlast, n, t, alpha, rng):
    for i in range(n):
        _move(pos[i], t - tlast[i], alpha, rng)
        tlast[i] = t


# ---------------------------------------------------------------------------
# full event engine
# ---------------------------------------------------------------------------

@njit(cache=True)
def _grow2(a, n_needed):
    cap = a.shape[0]
    while cap < n_needed:
        cap *= 2
    out = np.empty((cap, a.shape[1]))
    out[:a.shape[0]] = a
    return out


@njit(cache=True)
def _grow1(a, n_needed):
    cap = a.shape[0]
    while cap < n_needed:
        cap *= 2
    out = np.empty(cap, dtype=a.dtype)
    out[:a.shape[0]] = a
    return out


@njit(cache=True)
def _run_events(pos, tlast, n, t_now, t_end, alpha, lam_b, a, eps, surv, beta,
                thresh, snap_times, record_events, budget, rng):
    d = pos.shape[1]
    jt = np.empty(16)
    jx = np.empty((16, d))
    jm = np.empty(16)
    nj = 0
    et = np.empty(16 if record_events else 1)
    ex = np.empty((16 if record_events else 1, d))
    em = np.empty(16 if record_events else 1)
    ek = np.empty(16 if record_events else 1, dtype=np.int8)
    ne = 0
    nsnap = snap_times.shape[0]
    sp = np.empty((max(16, n * max(nsnap, 1)), d))
    soff = np.zeros(nsnap + 1, dtype=np.int64)
    si = 0
    steps = 0
    status = 0
    rate_per = lam_b + abs(a)
    t = t_now
    occupation = 0.0
    while True:
        if n > 0:
            tn = t + rng.standard_exponential() / (n * rate_per)
        else:
            tn = np.inf
        # observations strictly before the next event
        while si < nsnap and snap_times[si] <= t_end and snap_times[si] < tn:
            ts = snap_times[si]
            _advance_all(pos, tlast, n, ts, alpha, rng)
            if soff[si] + n > sp.shape[0]:
                sp = _grow2(sp, soff[si] + n)
            sp[soff[si]:soff[si] + n] = pos[:n]
            soff[si + 1] = soff[si] + n
            si += 1
        if tn >= t_end:
            break
        occupation += n * (tn - t)
        t = tn
        i = min(np.int64(rng.random() * n), n - 1)
        _move(pos[i], t - tlast[i], alpha, rng)
        tlast[i] = t
        steps += 1
        if rng.random() * rate_per < lam_b:
            k = _offspring_from_uniform(surv, beta, rng.random())
            kind = 0
        else:
            k = 2 if a > 0 else 0
            kind = 1
        net = k - 1
        if net > 0 and net * eps >= thresh:
            if nj >= jt.shape[0]:
                jt = _grow1(jt, nj + 1)
                jm = _grow1(jm, nj + 1)
                jx = _grow2(jx, nj + 1)
            jt[nj] = t
            jx[nj] = pos[i]
            jm[nj] = net * eps
            nj += 1
        if record_events:
            if ne >= et.shape[0]:
                et = _grow1(et, ne + 1)
                em = _grow1(em, ne + 1)
                ek = _grow1(ek, ne + 1)
                ex = _grow2(ex, ne + 1)
            et[ne] = t
            ex[ne] = pos[i]
            em[ne] = net * eps
            ek[ne] = kind
            ne += 1
        if k == 0:
            pos[i] = pos[n - 1]
            tlast[i] = tlast[n - 1]
            n -= 1
        elif k > 1:
            steps += k - 1
            if steps > budget:
                status = 1
                break
            if n + k - 1 > pos.shape[0]:
                pos = _grow2(pos, n + k - 1)
                tlast = _grow1(tlast, n + k - 1)
            for j in range(k - 1):
                pos[n + j] = pos[i]
                tlast[n + j] = t
            n += k - 1
        if steps > budget:
            status = 1
            break
    if status == 0:
        _advance_all(pos, tlast, n, t_end, alpha, rng)
        occupation += n * (t_end - t)
        t = t_end
    return (pos, tlast, n, t, steps, status, eps * occupation, jt[:nj], jx[:nj], jm[:nj],
            et[:ne], ex[:ne], em[:ne], ek[:ne], sp[:soff[si]], soff[:si + 1])


def init(config: SimulationConfig, rng) -> ParticleSystem:
    """ceil(|mu|/eps) particles at i.i.d. positions from mu/|mu|, all at time 0."""
    n0 = config.initial_count
    pos = np.ascontiguousarray(config.initial.sample(n0, rng), dtype=float)
    return ParticleSystem(0.0, pos, np.zeros(n0), config.particle_mass, config.model.motion)


def evolve(system: ParticleSystem, model: ModelParams, until, rng, jump_threshold=None,
           record_events=False, snapshot_times=None, step_budget=DEFAULT_STEP_BUDGET):
    """Run all events in (current_time, until].

    Returns ``(system, JumpRecords, EventLog | None, Snapshots | None)``. The
    system is synchronized at ``until``. Event times are generated by a single
    exponential clock of total rate n (lam_eps + |a|) with a uniformly chosen
    particle, which is the same law as independent per-particle clocks.
    """
    if until < system.current_time:
        raise ValueError("cannot evolve backwards in time")
    br = model.branching
    eps = system.eps
    thresh = 10.0 * eps if jump_threshold is None else float(jump_threshold)
    snaps = np.asarray([] if snapshot_times is None else snapshot_times, dtype=float)
    if np.any(np.diff(snaps) < 0) or np.any(snaps < system.current_time) or np.any(snaps > until):
        raise ValueError("snapshot times must be sorted within [current_time, until]")
    pos = np.ascontiguousarray(system.positions, dtype=float)
    if pos.shape[0] == 0:
        pos = np.empty((1, model.motion.dimension))
    tl = np.ascontiguousarray(system.last_update, dtype=float)
    if tl.shape[0] == 0:
        tl = np.zeros(1)
    out = _run_events(pos, tl, system.count, float(system.current_time), float(until),
                      float(model.motion.alpha), float(br.branching_rate(eps)), float(br.a), eps,
                      _survival_table(br.beta), float(br.beta), thresh, snaps,
                      bool(record_events), int(step_budget), rng)
    pos, tl, n, t, steps, status, occ, jt, jx, jm, et, ex, em, ek, sp, soff = out
    if status:
        raise BudgetExceeded(steps, step_budget, t, n)
    new = ParticleSystem(float(until), pos[:n].copy(), tl[:n].copy(), eps, system.motion)
    recs = JumpRecords(jt.copy(), jx.copy(), jm.copy(), thresh, mass_integral=occ)
    log = EventLog(et.copy(), ex.copy(), em.copy(), ek.copy()) if record_events else None
    sn = Snapshots(snaps, sp.copy(), soff.copy(), eps) if snapshot_times is not None else None
    return new, recs, log, sn


def simulate_events(config: SimulationConfig, replica_id=0, record_events=False,
                    snapshot_times=None, rng=None):
    """One replica of the full event simulation on [0, horizon]."""
    rng = seed_stream(config.seed, replica_id) if rng is None else rng
    system = init(config, rng)
    return evolve(system, config.model, config.horizon, rng, config.jump_threshold,
                  record_events, snapshot_times, config.step_budget)


# ---------------------------------------------------------------------------
# surviving-lineage sampler for fixed-time states
# ---------------------------------------------------------------------------

@dataclass
class _SurvivalLaw:
    """Survival probability G and cumulative reduced hazard of one particle's family.

    G solves G' = -c G^(1+beta) + a G - a^+ G^2, G(0) = 1, with c = b eps^-beta.
    Closed forms exist for a <= 0; a > 0 is tabulated on a geometric grid.
    """

    c: float
    beta: float
    a: float
    horizon: float
    tab_tau: np.ndarray = field(default_factory=lambda: np.zeros(1))
    tab_lam: np.ndarray = field(default_factory=lambda: np.zeros(1))
    tab_g: np.ndarray = field(default_factory=lambda: np.ones(1))

    def __post_init__(self):
        if self.a > 0:
            self._tabulate()

    def _tabulate(self):
        c, be, a = self.c, self.beta, self.a
        # w = G^-beta satisfies w' = beta c - a beta w + a beta w^(1 - 1/beta)
        def rhs(_, y):
            w = y[0]
            return [be * c - a * be * w + a * be * w ** (1.0 - 1.0 / be),
                    c * be / w + a * w ** (-1.0 / be)]
        t0 = min(1e-3 / (be * c + a), self.horizon) * 1e-6
        grid = np.concatenate([[0.0], np.geomspace(t0, self.horizon, 20000)])
        sol = integrate.solve_ivp(rhs, (0.0, self.horizon), [1.0, 0.0], t_eval=grid,
                                  method="DOP853", rtol=1e-12, atol=1e-14)
        if not sol.success:
            raise RuntimeError(f"survival ODE failed: {sol.message}")
        self.tab_tau = grid
        self.tab_g = sol.y[0] ** (-1.0 / be)
        self.tab_lam = sol.y[1]

    def survival(self, tau):
        c, be, a = self.c, self.beta, self.a
        if a == 0:
            return (1.0 + be * c * tau) ** (-1.0 / be)
        if a < 0:
            h = 1.0 + c * math.expm1(a * be * tau) / a
            return math.exp(a * tau) * h ** (-1.0 / be)
        return float(np.interp(tau, self.tab_tau, self.tab_g))


@lru_cache(maxsize=16)
def _survival_law(c, beta, a, horizon):
    return _SurvivalLaw(c, beta, a, horizon)


@njit(cache=True)
def _skeleton_run(starts, tau_total, alpha, c, beta, a, tab_tau, tab_lam, tab_g,
                  surv, mass_only, counts, lo, h, budget, rng):
    # with counts non-empty, leaves are binned on [lo, lo + h len(counts)) by
    # their first coordinate instead of stored; counts[-1] is unused overflow
    binned = counts.shape[0] > 0
    nb = counts.shape[0] - 1
    d = starts.shape[1]
    m = starts.shape[0]
    cap = max(16, 2 * m)
    sx = np.empty((cap, d))
    st = np.empty(cap)
    sx[:m] = starts
    for i in range(m):
        st[i] = tau_total
    top = m
    leaves = np.empty((max(16, 4 * m) if not (mass_only or binned) else 1, d))
    nleaf = 0
    steps = 0
    x = np.empty(d)
    while top > 0:
        top -= 1
        x[:] = sx[top]
        tau0 = st[top]
        e = rng.standard_exponential()
        leaf = False
        tau1 = 0.0
        stable = True
        if a == 0.0:
            y = (1.0 + beta * c * tau0) * math.exp(-e)
            if y <= 1.0:
                leaf = True
            else:
                tau1 = (y - 1.0) / (beta * c)
        elif a < 0.0:
            y = (1.0 + c * math.expm1(a * beta * tau0) / a) * math.exp(-e)
            if y <= 1.0:
                leaf = True
            else:
                tau1 = math.log1p(a * (y - 1.0) / c) / (a * beta)
        else:
            lam1 = np.interp(tau0, tab_tau, tab_lam) - e
            if lam1 <= 0.0:
                leaf = True
            else:
                tau1 = np.interp(lam1, tab_lam, tab_tau)
                g = np.interp(tau1, tab_tau, tab_g)
                r_stable = c * beta * g ** beta
                stable = rng.random() * (r_stable + a * g) < r_stable
        steps += 1
        if leaf:
            if binned:
                _move(x, tau0, alpha, rng)
                u = (x[0] - lo) / h
                if u >= 0.0 and u < nb:
                    counts[int(u)] += 1
                else:
                    counts[nb] += 1
            elif not mass_only:
                _move(x, tau0, alpha, rng)
                if nleaf >= leaves.shape[0]:
                    leaves = _grow2(leaves, nleaf + 1)
                leaves[nleaf] = x
            nleaf += 1
            continue
        if not mass_only:
            _move(x, tau0 - tau1, alpha, rng)
        if stable:
            # reduced offspring law is K conditioned on K >= 2
            j = _offspring_from_uniform(surv, beta, rng.random() * surv[1])
        else:
            j = 2
        steps += j
        if steps > budget:
            return leaves[:0], -1, steps
        if top + j > sx.shape[0]:
            sx = _grow2(sx, top + j)
            st = _grow1(st, top + j)
        for q in range(j):
            sx[top + q] = x
            st[top + q] = tau1
        top += j
    return leaves[:nleaf], nleaf, steps


@dataclass
class FixedTimeState:
    """Configuration of the particle system at one time."""

    time: float
    positions: np.ndarray | None
    count: int
    eps: float
    field: DensityField | None = None

    @property
    def total_mass(self):
        return self.eps * self.count


def sample_fixed_time(config: SimulationConfig, rng, t=None, mass_only=False, pure_motion=False,
                      grid: Grid | None = None):
    """Exact draw of the particle configuration at time ``t`` (default: horizon).

    With a one-dimensional ``grid`` the particles are histogrammed as they are
    produced and only ``field`` is returned, so memory does not grow with the
    particle count.

    Only the lineages that have descendants alive at ``t`` are simulated:
    each initial particle survives independently with probability G(t); a
    surviving lineage with remaining time tau branches into j >= 2 surviving
    lineages at rate c beta G(tau)^beta + a^+ G(tau), with j ~ K | K >= 2 for
    stable events and j = 2 for drift splits. Motion along the skeleton is
    the free motion, so the leaves have the law of the alive particles.
    """
    t = config.horizon if t is None else float(t)
    if not t > 0:
        raise ValueError("time must be positive")
    if grid is not None:
        if grid.dimension != 1:
            raise ValueError("streamed histograms are one-dimensional")
        if pure_motion or mass_only:
            raise ValueError("grid cannot be combined with pure_motion or mass_only")
        counts = np.zeros(grid.shape[0] + 1, dtype=np.int64)
    else:
        counts = np.zeros(0, dtype=np.int64)
    br = config.model.branching
    eps = config.particle_mass
    n0 = config.initial_count
    alpha = float(config.model.motion.alpha)
    if pure_motion:
        pos = np.ascontiguousarray(config.initial.sample(n0, rng), float)
        if not mass_only:
            _advance_all(pos, np.zeros(n0), n0, t, alpha, rng)
        return FixedTimeState(t, None if mass_only else pos, n0, eps)
    law = _survival_law(br.b * eps ** (-br.beta), br.beta, br.a, t)
    m = int(rng.binomial(n0, law.survival(t)))
    if m == 0:
        d = config.model.motion.dimension
        if grid is not None:
            return FixedTimeState(t, None, 0, eps, _counts_field(grid, counts, eps))
        return FixedTimeState(t, None if mass_only else np.empty((0, d)), 0, eps)
    starts = np.ascontiguousarray(config.initial.sample(m, rng), float)
    lo = float(grid.origin[0]) if grid is not None else 0.0
    h = float(grid.h) if grid is not None else 1.0
    leaves, n, steps = _skeleton_run(starts, t, alpha, law.c, br.beta, br.a, law.tab_tau,
                                     law.tab_lam, law.tab_g, _survival_table(br.beta),
                                     bool(mass_only), counts, lo, h, int(config.step_budget), rng)
    if n < 0:
        raise BudgetExceeded(steps, config.step_budget, t, m)
    if grid is not None:
        return FixedTimeState(t, None, int(n), eps, _counts_field(grid, counts, eps))
    return FixedTimeState(t, None if mass_only else leaves.copy(), int(n), eps)


def _counts_field(grid: Grid, counts, eps):
    return DensityField(grid, eps * counts[:-1] / grid.h, eps * float(counts.sum()),
                        eps * float(counts[-1]))


# ---------------------------------------------------------------------------
# estimators and closed forms
# ---------------------------------------------------------------------------

def density_histogram(positions, eps, grid: Grid) -> DensityField:
    """Histogram density: eps * (count in bin) / h^d."""
    positions = np.asarray(positions, float)
    d = grid.dimension
    if positions.size == 0:
        return DensityField(grid, np.zeros(grid.shape), 0.0, 0.0)
    positions = positions.reshape(-1, d)
    idx = np.floor((positions - grid.origin) / grid.h).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < np.asarray(grid.shape)), axis=1)
    counts = np.zeros(grid.shape, dtype=np.int64)
    np.add.at(counts, tuple(idx[inside].T), 1)
    total = eps * len(positions)
    outside = eps * int((~inside).sum())
    return DensityField(grid, eps * counts / grid.h ** d, total, outside)


def exact_total_mass_laplace(branching: BranchingParams, mu_mass, t, lam):
    """E exp(-lam X_t(R)) from the Bernoulli ODE v' = a v - b v^(1+beta), v(0) = lam."""
    if lam < 0 or t < 0:
        raise ValueError("lambda and t must be non-negative")
    if lam == 0:
        return 1.0
    a, b, be = branching.a, branching.b, branching.beta
    if math.isinf(lam):
        if t == 0:
            return 0.0
        v = (be * b * t) ** (-1.0 / be) if a == 0 else \
            math.exp(a * t) * (b * math.expm1(a * be * t) / a) ** (-1.0 / be)
    elif a == 0:
        v = (lam ** (-be) + be * b * t) ** (-1.0 / be)
    else:
        v = math.exp(a * t) * lam * (1.0 + lam ** be * b * math.expm1(a * be * t) / a) ** (-1.0 / be)
    return math.exp(-mu_mass * v)


def _family_q(c, beta, a, q0, t):
    """q(t) for q' = -c q^(1+beta) + a q - a^+ q^2, q(0) = q0.

    1 - q(t) is E_x s^(number of descendants at t) style generating data of one
    particle: with q0 = 1 - exp(-lam eps) it gives E exp(-lam eps N_t), and
    with q0 = 1 the extinction probability.
    """
    if q0 == 0.0:
        return 0.0
    if a == 0:
        return q0 * (1.0 + beta * c * t * q0 ** beta) ** (-1.0 / beta)
    if a < 0:
        return math.exp(a * t) * q0 * (1.0 + c * q0 ** beta * math.expm1(a * beta * t) / a) ** (-1.0 / beta)
    # w = q^-beta removes the stiffness of the first term
    def rhs(_, y):
        w = y[0]
        return [beta * c - a * beta * w + a * beta * w ** (1.0 - 1.0 / beta)]
    sol = integrate.solve_ivp(rhs, (0.0, t), [q0 ** (-beta)], method="DOP853",
                              rtol=1e-12, atol=1e-14)
    return float(sol.y[0, -1] ** (-1.0 / beta))


def particle_total_mass_laplace(config: SimulationConfig, lam, t=None):
    """Exact E exp(-lam X_t(R)) for the eps-particle system (not its limit)."""
    br = config.model.branching
    eps = config.particle_mass
    t = config.horizon if t is None else t
    q0 = 1.0 if math.isinf(lam) else -math.expm1(-lam * eps)
    q = _family_q(br.b * eps ** (-br.beta), br.beta, br.a, q0, t)
    return (1.0 - q) ** config.initial_count


def particle_extinction_probability(config: SimulationConfig, t=None):
    """P(no particle alive at t) for the eps-particle system itself."""
    return particle_total_mass_laplace(config, math.inf, t)


@dataclass
class MCEstimate:
    mean: float
    stderr: float
    n: int

    def z(self, target):
        return (self.mean - target) / self.stderr if self.stderr > 0 else math.inf * (self.mean != target)


def terminal_masses(config: SimulationConfig, t=None, first_replica=0):
    """Total masses X_t(R) over ``config.replica_count`` replicas (exact fixed-time sampler)."""
    out = np.empty(config.replica_count)
    for r in range(config.replica_count):
        rng = seed_stream(config.seed, first_replica + r)
        out[r] = sample_fixed_time(config, rng, t=t, mass_only=True).total_mass
    return out


def total_mass_laplace(config: SimulationConfig, lam, masses=None):
    """Monte Carlo estimate of E exp(-lam X_t(R)) with its standard error."""
    if config.replica_count < 2:
        raise ValueError("need at least two replicas")
    masses = terminal_masses(config) if masses is None else masses
    v = np.exp(-lam * masses)
    return MCEstimate(float(v.mean()), float(v.std(ddof=1) / math.sqrt(len(v))), len(v))


@dataclass
class IntensityCheck:
    """Exceedance count against its expectation and against its compensator.

    ``z`` compares the count with the limiting expectation
    rho r_min^-(1+beta)/(1+beta) int E X_s(R) ds, using the replica-to-replica
    standard error of the counts (total mass is heavy tailed, so a Poisson
    error would be far too small). ``z_compensated`` compares it with the
    realized compensator of the eps-system, rate(eps) P(exceed) int X_s(R) ds;
    their difference is a martingale, so the Poisson error is exact.
    """

    count: int
    expected: float
    z: float
    r_min: float
    stderr: float
    compensator: float
    z_compensated: float


def expected_exceedances(config: SimulationConfig, r_min, replicas):
    """rho r_min^-(1+beta)/(1+beta) * int_0^t E X_s(R) ds, summed over replicas."""
    br = config.model.branching
    t = config.horizon
    m = config.initial.total_mass
    mass_int = m * t if br.a == 0 else m * math.expm1(br.a * t) / br.a
    return replicas * br.rho * r_min ** (-1.0 - br.beta) / (1.0 + br.beta) * mass_int


def _exceedance_rate_per_mass(config: SimulationConfig, r_min):
    # bursts with (K-1) eps >= r_min per unit of occupation int X_s(R) ds
    br = config.model.branching
    eps = config.particle_mass
    kmin = int(math.ceil(r_min / eps - 1e-9))  # (K-1) eps >= r_min  <=>  K > kmin
    surv = _survival_table(br.beta)
    p_exceed = surv[kmin] if kmin < len(surv) else surv[-1] * (kmin / (len(surv) - 1)) ** (-1 - br.beta)
    return br.branching_rate(eps) / eps * p_exceed


def empirical_jump_intensity(records: JumpRecords, config: SimulationConfig, r_min):
    """Count of bursts with mass >= r_min against rho r_min^-(1+beta)/(1+beta) int E X_s(R) ds.

    Burst masses live on the lattice eps Z; counting at or above r_min keeps
    the lattice tail within about 2% of the continuum tail at r_min = 20 eps,
    where a strict inequality is about 5% low.
    """
    if r_min < records.threshold:
        raise ValueError("r_min is below the recording threshold")
    n = records.n_replicas
    sel = records.masses >= r_min * (1.0 - 1e-9)
    count = int(sel.sum())
    expected = expected_exceedances(config, r_min, n)
    rep = records.replica if records.replica is not None else np.zeros(len(records), np.int64)
    per = np.bincount(rep[sel], minlength=n).astype(float)
    stderr = float(per.std(ddof=1) * math.sqrt(n)) if n > 1 else math.sqrt(expected)
    comp = float(np.sum(records.mass_integral)) * _exceedance_rate_per_mass(config, r_min)
    if count == 0:
        return IntensityCheck(0, expected, math.nan, r_min, stderr, comp, math.nan)
    return IntensityCheck(count, expected, (count - expected) / stderr, r_min, stderr, comp,
                          (count - comp) / math.sqrt(comp))


def particle_exceedance_rate(config: SimulationConfig, r_min, replicas=None):
    """Exact expected number of bursts with net mass >= r_min for the eps-system itself."""
    br = config.model.branching
    replicas = config.replica_count if replicas is None else replicas
    t = config.horizon
    eps = config.particle_mass
    mass_int = config.initial_count * eps * (t if br.a == 0 else math.expm1(br.a * t) / br.a)
    return replicas * _exceedance_rate_per_mass(config, r_min) * mass_int


def tail_slope(masses, r_min, r_max=None, n_bins=12):
    """Log-log slope of the empirical survival function of masses above r_min."""
    m = np.sort(np.asarray(masses, float))
    m = m[m > r_min]
    if len(m) < 10:
        return math.nan
    r_max = m[-max(10, len(m) // 200)] if r_max is None else r_max
    grid = np.geomspace(r_min, r_max, n_bins)
    surv = len(m) - np.searchsorted(m, grid, side="right")
    ok = surv > 0
    return float(np.polyfit(np.log(grid[ok]), np.log(surv[ok]), 1)[0])
