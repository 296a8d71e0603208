"""Experiment orchestration: resolved config in, atomic output directory out."""

from __future__ import annotations

import hashlib
import json
import math
import os
import shutil
import time
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import bounds as bd
from . import config as cf
from .holder import (classify_regime, estimate_exponent, fit_replicas, level_grid,
                     level_statistics, admissible, summarize_verdicts, unboundedness_diagnostic,
                     unboundedness_grid)
from .particles import (BranchingParams, BudgetExceeded, Grid, InitialMeasure, ModelParams,
                        SimulationConfig, exact_total_mass_laplace, particle_extinction_probability,
                        particle_total_mass_laplace, sample_fixed_time, simulate_events,
                        terminal_masses)
from .pde import (DEFAULT_CONTROL_LAMBDAS, GridFunction, PDEConfig, duality_residual,
                  gaussian_bump)
from .rng import seed_stream
from .stable import (SpectrallyPositiveParams, StableMotionParams, SubordinatorParams,
                     sample_positive_stable, sample_spectrally_positive, sample_symmetric_stable,
                     stable_pdf)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_BUDGET = 3


def fmt(v):
    """CSV cell: reals with 17 significant digits, everything else via str."""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


class Table:
    def __init__(self, name, header):
        self.name = name
        self.header = list(header)
        self.rows = []

    def add(self, *row):
        if len(row) != len(self.header):
            raise ValueError(f"{self.name}: row has {len(row)} cells, header {len(self.header)}")
        self.rows.append(row)

    def text(self):
        lines = [",".join(self.header)]
        lines += [",".join(fmt(v) for v in row) for row in self.rows]
        return "\n".join(lines) + "\n"


class Result:
    """Artifacts of one run: CSV tables, JSON documents and stdout lines."""

    def __init__(self):
        self.tables = []
        self.documents = {}
        self.lines = []

    def table(self, name, header):
        t = Table(name, header)
        self.tables.append(t)
        return t


def _map_replicas(fn, n, workers):
    if workers <= 1:
        return [fn(r) for r in range(n)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(n)))


def _model(cfg):
    return ModelParams(StableMotionParams(cfg["alpha"], cfg["d"]),
                       BranchingParams(cfg["a"], cfg["b"], cfg["beta"]))


def _sim_config(cfg, jump_threshold=None):
    x0 = (cfg["x0"],) + (0.0,) * (cfg["d"] - 1)
    return SimulationConfig(_model(cfg), InitialMeasure.point(x0, cfg["mass"]), cfg["t"],
                            cfg["eps"], seed=cfg["seed"], replica_count=cfg["replicas"],
                            jump_threshold=jump_threshold, step_budget=cfg["step_budget"])


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_kernel(cfg, workers):
    res = Result()
    tab = res.table("kernel.csv", ["x", "density"])
    params = StableMotionParams(cfg["alpha"])
    for x in cfg["x"]:
        v = float(stable_pdf(params, cfg["t"], x))
        tab.add(float(x), v)
        res.lines.append(f"{v:.7g}")
    return res


def cmd_sample(cfg, workers):
    res = Result()
    law, idx, t, n = cfg["law"], cfg["index"], cfg["t"], cfg["count"]
    if law == "symmetric":
        params = StableMotionParams(idx)
        draw = lambda rng: sample_symmetric_stable(params, t, rng, n)
    elif law == "positive":
        if not idx < 1:
            raise cf.ConfigError("index", "positive stable law needs index < 1")
        params = SubordinatorParams(idx)
        draw = lambda rng: sample_positive_stable(params, t, rng, n)
    else:
        if not 1 < idx < 2:
            raise cf.ConfigError("index", "spectrally positive law needs 1 < index < 2")
        params = SpectrallyPositiveParams(idx)
        draw = lambda rng: sample_spectrally_positive(params, t, rng, n)
    draws = _map_replicas(lambda r: np.ravel(draw(seed_stream(cfg["seed"], r))),
                          cfg["replicas"], workers)
    tab = res.table("samples.csv", ["replica", "index", "value"])
    for r, xs in enumerate(draws):
        for i, v in enumerate(xs):
            tab.add(r, i, float(v))
    total = np.concatenate(draws)
    res.lines.append(f"{law} index={idx:g} t={t:g}: {total.size} draws, "
                     f"median {np.median(total):.6g}")
    return res


def cmd_simulate(cfg, workers):
    res = Result()
    sc = _sim_config(cfg, cfg["jump_threshold"] or None)

    def one(r):
        system, jumps, _, _ = simulate_events(sc, r)
        return sc.particle_mass * system.positions.shape[0], jumps

    out = _map_replicas(one, cfg["replicas"], workers)
    reps = res.table("replicas.csv", ["replica", "total_mass", "occupation", "jump_count"])
    jt = res.table("jumps.csv", ["replica", "time", "location", "mass"])
    for r, (mass, jumps) in enumerate(out):
        reps.add(r, mass, jumps.mass_integral, len(jumps.times))
        loc = np.asarray(jumps.locations).reshape(len(jumps.times), -1)
        for s, x, m in zip(jumps.times, loc[:, 0], jumps.masses):
            jt.add(r, float(s), float(x), float(m))
    m = np.array([v for v, _ in out])
    se = m.std(ddof=1) / math.sqrt(len(m)) if len(m) > 1 else math.nan
    res.lines.append(f"mean terminal mass {m.mean():.6g} (stderr {se:.3g}), "
                     f"extinct {int((m == 0).sum())}/{len(m)}")
    return res


def cmd_density(cfg, workers):
    res = Result()
    if cfg["d"] != 1:
        raise cf.ConfigError("d", "density output is one-dimensional")
    grid = Grid.regular(cfg["lo"], cfg["hi"], cfg["h"])
    sc = _sim_config(cfg)
    fields = _map_replicas(lambda r: sample_fixed_time(sc, seed_stream(sc.seed, r), grid=grid).field,
                           cfg["replicas"], workers)
    total = np.sum([f.values for f in fields], axis=0) / len(fields)
    tab = res.table("density.csv", ["x_left", "x_right", "density"])
    edges = grid.edges()
    for i, v in enumerate(total):
        tab.add(float(edges[i]), float(edges[i + 1]), float(v))
    res.lines.append(f"mean mass in grid {float(total.sum() * grid.h):.6g} over {len(fields)} replicas")
    return res


def cmd_holder(cfg, workers):
    res = Result()
    model = _model(cfg)
    rep = classify_regime(model)
    res.documents["regime.json"] = _regime_doc(rep)
    res.lines.append(rep.summary())
    sc = _sim_config(cfg)
    window = (cfg["lo"], cfg["hi"])
    levels = list(range(cfg["n_min"], cfg["n_max"] + 1))
    eps = cfg["eps"]
    if rep.continuous:
        grid = level_grid(window, levels, cfg["smoothing"])
        stats = _map_replicas(
            lambda r: _holder_replica(sc, r, grid, window, levels, cfg), cfg["replicas"], workers)
        tab = res.table("oscillations.csv", ["replica", "level", "oscillation", "mean_count",
                                             "noise", "admissible"])
        per = res.table("replica_fits.csv", ["replica", "exponent", "stderr", "n_min", "n_max"])
        alive = []
        for r, st in enumerate(stats):
            if st is None:
                continue
            alive.append(st)
            ok = admissible(st, cfg["min_count"], cfg["snr_min"])
            for i, n in enumerate(st.table.levels):
                tab.add(r, int(n), float(st.table.oscillations[i]), float(st.mean_count[i]),
                        float(st.noise[i]), bool(ok[i]))
            _, est = estimate_exponent(st, cfg["min_count"], cfg["snr_min"])
            if est is not None:
                per.add(r, est.exponent, est.stderr, est.fit_range[0], est.fit_range[1])
        doc = {"eta_c": rep.eta_c, "replicas_alive": len(alive)}
        if len(alive) >= 2:
            try:
                est, used = fit_replicas(alive, cfg["min_count"], cfg["snr_min"], cfg["min_fraction"])
                doc.update(exponent=est.exponent, stderr=est.stderr, levels=used,
                           replicas_fitted=est.replicas)
                res.lines.append(f"fitted exponent {est.exponent:.6f} +- {est.stderr:.6f} "
                                 f"on levels {used[0]}..{used[-1]}")
            except ValueError as e:
                doc["error"] = str(e)
                res.lines.append(f"no pooled fit: {e}")
        res.documents["holder.json"] = doc
    else:
        grid = unboundedness_grid(window, levels)
        diags = _map_replicas(
            lambda r: unboundedness_diagnostic(
                sample_fixed_time(sc, seed_stream(sc.seed, r), grid=grid).field, eps, levels,
                cfg["rho_min"], cfg["min_count"]),
            cfg["replicas"], workers)
        prof = res.table("max_bins.csv", ["replica", "h", "max_value"])
        ver = res.table("verdicts.csv", ["replica", "growth", "verdict"])
        for r, u in enumerate(diags):
            for h, m in zip(u.bin_widths, u.max_values):
                prof.add(r, float(h), float(m))
            ver.add(r, float(u.growth), u.verdict)
        frac, n = summarize_verdicts(diags)
        res.documents["unboundedness.json"] = {"diverging_fraction": frac, "conclusive": n,
                                               "rho_min": cfg["rho_min"]}
        res.lines.append(f"diverging in {frac:.4f} of {n} conclusive replicas")
    return res


def _holder_replica(sc, r, grid, window, levels, cfg):
    st = sample_fixed_time(sc, seed_stream(sc.seed, r), grid=grid)
    if st.count == 0:
        return None
    return level_statistics(st.field, sc.particle_mass, window, levels, cfg["smoothing"])


def _regime_doc(rep):
    nan = lambda v: None if isinstance(v, float) and math.isnan(v) else v
    return {"continuous": rep.continuous, "eta_c": nan(rep.eta_c),
            "eta_c_prime": nan(rep.eta_c_prime), "eta_bar_c": rep.eta_bar_c,
            "summary": rep.summary()}


def cmd_classify(cfg, workers):
    res = Result()
    model = ModelParams(StableMotionParams(cfg["alpha"], cfg["d"]),
                        BranchingParams(0.0, 1.0, cfg["beta"]))
    try:
        rep = classify_regime(model)
    except ValueError as e:
        raise cf.ConfigError("d", str(e)) from None
    res.documents["regime.json"] = _regime_doc(rep)
    res.lines.append(rep.summary())
    return res


def cmd_duality(cfg, workers):
    res = Result()
    sc = _sim_config(cfg)
    tab = res.table("duality.csv", ["test", "mc_value", "mc_stderr", "reference", "residual",
                                    "particle_exact"])
    if cfg["test"] == "total_mass":
        if sc.replica_count < 2:
            raise cf.ConfigError("replicas", "need at least two replicas")
        m = np.asarray(terminal_masses(sc))
        lam = cfg["lam"]
        vals = np.exp(-lam * m)
        mc = float(vals.mean())
        se = float(vals.std(ddof=1) / math.sqrt(len(vals)))
        ref = exact_total_mass_laplace(sc.model.branching, cfg["mass"], cfg["t"], lam)
        tab.add("total_mass_laplace", mc, se, ref, abs(mc - ref),
                particle_total_mass_laplace(sc, lam))
        ext = float((m == 0).mean())
        ext_se = math.sqrt(ext * (1 - ext) / max(len(m) - 1, 1))
        ref_ext = exact_total_mass_laplace(sc.model.branching, cfg["mass"], cfg["t"], math.inf)
        tab.add("extinction", ext, ext_se, ref_ext, abs(ext - ref_ext),
                particle_extinction_probability(sc))
        res.lines.append(f"E exp(-{lam:g} X_t(R)) = {mc:.6f} +- {se:.6f} (limit {ref:.6f})")
        res.lines.append(f"P(X_t = 0) = {ext:.6f} +- {ext_se:.6f} (limit {ref_ext:.6f})")
    else:
        if cfg["d"] != 1:
            raise cf.ConfigError("d", "spatial duality is one-dimensional")
        phi = GridFunction.from_function(gaussian_bump(cfg["bump_height"], cfg["bump_width"]),
                                         cfg["x0"], cfg["pde_half_width"], cfg["pde_n"])
        r = duality_residual(sc, phi, PDEConfig(cfg["pde_dt"], cfg["t"]),
                             control_lambdas=DEFAULT_CONTROL_LAMBDAS if cfg["control_variates"]
                             else None)
        tab.add("bump_laplace", r.mc_value, r.mc_stderr, r.pde_value, r.residual, math.nan)
        res.lines.append(f"MC {r.mc_value:.6f} +- {r.mc_stderr:.6f}, PDE {r.pde_value:.6f}, "
                         f"residual {r.residual:.3e}")
    return res


def cmd_verify_bounds(cfg, workers):
    res = Result()
    checks = []
    k, t, n = cfg["kappa"], cfg["t"], cfg["replicas"]
    if cfg["small_x"]:
        checks += bd.verify_small_values(k, t, cfg["small_x"], n, seed=cfg["seed"],
                                         n_steps=cfg["n_steps"])
    if cfg["lambdas"]:
        checks += bd.verify_martingale_problem(k, cfg["lambdas"], [t], n, seed=cfg["seed"] + 1)
    if cfg["sup_x"]:
        if len(cfg["sup_x"]) < 2:
            raise cf.ConfigError("sup_x", "needs at least two levels")
        rep = bd.verify_truncated_sup(k, t, cfg["sup_x"], cfg["sup_y"], n, seed=cfg["seed"] + 2)
        checks += rep.checks
        res.documents["truncated_sup.json"] = {
            "fitted_C": rep.fitted_C, "slope_ok": rep.slope_ok,
            "slope_ratios": [None if math.isnan(v) else float(v) for v in rep.slope_ratios]}
    tab = res.table("bounds.csv", ["test", "params", "empirical", "stderr", "bound", "two_sided",
                                   "satisfied", "status", "diagnostics"])
    for c in checks:
        tab.add(c.test, _kv(c.params), c.empirical, c.stderr, c.bound, c.two_sided, c.satisfied,
                c.status, _kv(c.diagnostics))
        res.lines.append(f"{c.test} {_kv(c.params)}: {c.status}")
    res.documents["bounds_summary.json"] = bd.status_counts(checks)
    return res


def _kv(d):
    return ";".join(f"{k}={fmt(v)}" for k, v in d.items())


HANDLERS = {
    "kernel": cmd_kernel,
    "sample": cmd_sample,
    "simulate": cmd_simulate,
    "density": cmd_density,
    "holder": cmd_holder,
    "classify": cmd_classify,
    "duality": cmd_duality,
    "verify-bounds": cmd_verify_bounds,
}


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def experiment_id(cfg):
    return hashlib.sha256(cf.canonical_json(cfg).encode()).hexdigest()[:16]


def _now():
    return datetime.now(timezone.utc).isoformat()


def _write(path: Path, text: str):
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _json_text(obj):
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def sha256_file(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def run(command, document=None, overrides=None, out=None, workers=1, echo=print):
    """Resolve, execute and persist one experiment. Returns ``(exit_code, out_dir)``.

    The output directory is assembled under a temporary name next to ``out``
    and renamed into place at the end; ``manifest.json`` is written first
    with status "running" and finalized with checksums afterwards.
    """
    cfg = cf.resolve(command, document, overrides)
    handler = HANDLERS[command]
    manifest = {"experiment_id": experiment_id(cfg), "command": command, "config": cfg,
                "seed": cfg.get("seed"), "version": __version__, "status": "running",
                "started": _now(), "outputs": {}}
    tmp = None
    if out is not None:
        out = Path(out)
        out.parent.mkdir(parents=True, exist_ok=True)
        tmp = out.parent / f".{out.name}.tmp-{os.getpid()}"
        if tmp.exists():
            shutil.rmtree(tmp)
        tmp.mkdir()
        _write(tmp / "manifest.json", _json_text(manifest))
    t0 = time.perf_counter()
    code = EXIT_OK
    try:
        result = handler(cfg, workers)
    except BudgetExceeded as e:
        code = EXIT_BUDGET
        manifest["status"] = "budget_exceeded"
        manifest["error"] = str(e)
        echo(f"error: {e}")
        result = None
    except Exception as e:
        code = EXIT_CONFIG if isinstance(e, cf.ConfigError) else EXIT_FAILED
        manifest["status"] = "failed"
        manifest["error"] = f"{type(e).__name__}: {e}"
        if tmp is not None:
            _finalize(tmp, out, manifest, t0, cfg)
        raise
    if result is not None:
        for line in result.lines:
            echo(line)
        manifest["status"] = "complete"
        if tmp is not None:
            for tab in result.tables:
                _write(tmp / tab.name, tab.text())
            for name, doc in result.documents.items():
                _write(tmp / name, _json_text(doc))
    if tmp is not None:
        _finalize(tmp, out, manifest, t0, cfg)
    return code, out


def _finalize(tmp, out, manifest, t0, cfg):
    manifest["finished"] = _now()
    manifest["wall_clock_seconds"] = time.perf_counter() - t0
    if "step_budget" in cfg:
        manifest["step_budget_per_replica"] = cfg["step_budget"]
    manifest["outputs"] = {p.name: sha256_file(p) for p in sorted(tmp.iterdir())
                           if p.name != "manifest.json"}
    _write(tmp / "manifest.json", _json_text(manifest))
    old = None
    if out.exists():
        if not (out / "manifest.json").exists():
            shutil.rmtree(tmp)
            raise FileExistsError(f"{out} exists and is not an experiment directory")
        old = out.parent / f".{out.name}.old-{os.getpid()}"
        out.rename(old)
    tmp.rename(out)
    if old is not None:
        shutil.rmtree(old)


def report(out, echo=print):
    """Check an output directory against its manifest; returns an exit code."""
    out = Path(out)
    path = out / "manifest.json"
    if not path.exists():
        echo(f"error: no manifest in {out}")
        return EXIT_FAILED
    with open(path) as fh:
        man = json.load(fh)
    echo(f"experiment {man['experiment_id']} ({man['command']}), status {man['status']}")
    bad = 0
    for name, digest in sorted(man.get("outputs", {}).items()):
        p = out / name
        ok = p.exists() and sha256_file(p) == digest
        bad += not ok
        echo(f"  {name}: {'ok' if ok else 'MISMATCH'}")
    for name in ("bounds_summary.json", "holder.json", "unboundedness.json", "regime.json"):
        p = out / name
        if p.exists() and name in man.get("outputs", {}):
            with open(p) as fh:
                echo(f"  {name}: {cf.canonical_json(json.load(fh))}")
    return EXIT_OK if bad == 0 and man["status"] == "complete" else EXIT_FAILED
