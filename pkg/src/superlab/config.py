"""Versioned experiment configurations: one flat JSON object per subcommand."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass

import jsonschema

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Field:
    name: str
    schema: dict
    default: object
    help: str = ""


def _num(lo=None, hi=None, excl_lo=False, excl_hi=False):
    s = {"type": "number"}
    if lo is not None:
        s["exclusiveMinimum" if excl_lo else "minimum"] = lo
    if hi is not None:
        s["exclusiveMaximum" if excl_hi else "maximum"] = hi
    return s


def _int(lo=None):
    s = {"type": "integer"}
    if lo is not None:
        s["minimum"] = lo
    return s


def _numlist(min_items=1, **kw):
    return {"type": "array", "items": _num(**kw), "minItems": min_items}


POSITIVE = _num(0, excl_lo=True)

COMMON = [
    Field("seed", _int(0), 0, "master seed"),
    Field("replicas", _int(1), 1, "number of replicas"),
]

MODEL = [
    Field("alpha", _num(0, 2, excl_lo=True), 2.0, "stable index of the motion"),
    Field("d", _int(1), 1, "spatial dimension"),
    Field("a", _num(), 0.0, "linear branching coefficient"),
    Field("b", POSITIVE, 1.0, "stable branching coefficient"),
    Field("beta", _num(0, 1, excl_lo=True, excl_hi=True), 0.5, "branching index"),
    Field("mass", POSITIVE, 1.0, "initial total mass"),
    Field("x0", {"type": "number"}, 0.0, "initial point mass location (first coordinate)"),
    Field("t", POSITIVE, 1.0, "horizon"),
    Field("eps", _num(0, 1, excl_lo=True), 1e-3, "particle mass"),
    Field("step_budget", _int(1), 10 ** 8, "maximum simulation steps per replica"),
]

COMMANDS = {
    "kernel": [
        Field("alpha", _num(0, 2, excl_lo=True), 2.0, "stable index"),
        Field("t", POSITIVE, 1.0, "time"),
        Field("x", _numlist(), [0.0], "evaluation points"),
    ],
    "sample": COMMON + [
        Field("law", {"enum": ["symmetric", "positive", "spectrally_positive"]}, "symmetric",
              "law to sample"),
        Field("index", _num(0, 2, excl_lo=True), 1.5, "stable index"),
        Field("t", POSITIVE, 1.0, "time"),
        Field("count", _int(1), 1000, "draws per replica"),
    ],
    "simulate": COMMON + MODEL + [
        Field("jump_threshold", _num(0), 0.0, "record bursts with mass >= this (0: 10 eps)"),
    ],
    "density": COMMON + MODEL + [
        Field("lo", {"type": "number"}, -2.0, "grid left end"),
        Field("hi", {"type": "number"}, 2.0, "grid right end"),
        Field("h", POSITIVE, 1.0 / 64, "bin width"),
    ],
    "holder": COMMON + MODEL + [
        Field("lo", {"type": "number"}, -1.0, "window left end"),
        Field("hi", {"type": "number"}, 1.0, "window right end"),
        Field("n_min", _int(0), 2, "coarsest dyadic level"),
        Field("n_max", _int(1), 12, "finest dyadic level"),
        Field("smoothing", _int(1), 4, "histogram bins per dyadic cell"),
        Field("min_count", POSITIVE, 30.0, "minimum mean particles per bin"),
        Field("snr_min", _num(0), 3.0, "minimum oscillation over counting noise"),
        Field("min_fraction", _num(0, 1, excl_lo=True), 0.5,
              "fraction of replicas a level must be admissible in"),
        Field("rho_min", _num(1, excl_lo=True), 1.3, "growth threshold of the unboundedness verdict"),
    ],
    "classify": [
        Field("alpha", _num(0, 2, excl_lo=True), 2.0, "stable index of the motion"),
        Field("beta", _num(0, 1, excl_lo=True, excl_hi=True), 0.5, "branching index"),
        Field("d", _int(1), 1, "spatial dimension"),
    ],
    "duality": COMMON + MODEL + [
        Field("test", {"enum": ["total_mass", "bump"]}, "total_mass", "test function"),
        Field("lam", _num(0), 1.0, "lambda of the total-mass test"),
        Field("bump_height", _num(0), 50.0, "height of the Gaussian bump"),
        Field("bump_width", POSITIVE, 3.0, "width of the Gaussian bump"),
        Field("pde_dt", POSITIVE, 2e-3, "PDE time step"),
        Field("pde_n", _int(2), 1024, "PDE grid size (power of two)"),
        Field("pde_half_width", POSITIVE, 32.0, "PDE half domain"),
        Field("control_variates", {"type": "boolean"}, True,
              "use exp(-lam X_t(R)) control variates"),
    ],
    "verify-bounds": COMMON + [
        Field("kappa", _num(1, 2, excl_lo=True, excl_hi=True), 1.5, "index of L"),
        Field("t", POSITIVE, 1.0, "time"),
        Field("n_steps", _int(2), 1000, "path grid steps (even)"),
        Field("small_x", _numlist(min_items=0, lo=0, excl_lo=True), [1.0, 2.0, 4.0],
              "levels of the small-values check"),
        Field("lambdas", _numlist(min_items=0, lo=0), [0.5], "lambdas of the Laplace checks"),
        Field("sup_x", _numlist(min_items=0, lo=0, excl_lo=True), [1.0, 2.0, 4.0],
              "levels of the bounded-jump sup check (empty or >= 2 values)"),
        Field("sup_y", POSITIVE, 1.0, "jump cap of the bounded-jump sup check"),
    ],
}


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending field."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path


def fields(command):
    try:
        return COMMANDS[command]
    except KeyError:
        raise ConfigError("command", f"unknown command {command!r}") from None


def schema(command):
    props = {"schema_version": {"const": SCHEMA_VERSION}, "command": {"const": command}}
    for f in fields(command):
        props[f.name] = f.schema
    return {"type": "object", "properties": props, "additionalProperties": False,
            "required": ["schema_version", "command"]}


def defaults(command):
    out = {"schema_version": SCHEMA_VERSION, "command": command}
    for f in fields(command):
        out[f.name] = copy.deepcopy(f.default)
    return out


def _field_path(err):
    parts = [str(p) for p in err.absolute_path]
    if not parts and err.validator == "additionalProperties":
        return "config"
    return ".".join(parts) if parts else "config"


def resolve(command, document=None, overrides=None):
    """Defaults, then ``document``, then ``overrides`` (flags); validated."""
    cfg = defaults(command)
    if document:
        if not isinstance(document, dict):
            raise ConfigError("config", "must be a JSON object")
        if document.get("command", command) != command:
            raise ConfigError("command", f"config is for {document['command']!r}, not {command!r}")
        cfg.update(document)
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg[k] = v
    # integers given as floats in JSON (1e8) are accepted when exact
    for f in fields(command):
        v = cfg.get(f.name)
        if f.schema.get("type") == "integer" and isinstance(v, float) and v.is_integer():
            cfg[f.name] = int(v)
    errors = sorted(jsonschema.Draft7Validator(schema(command)).iter_errors(cfg),
                    key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise ConfigError(_field_path(e), e.message)
    return cfg


def load(path):
    """Read a config file; a manifest is accepted and yields its resolved config."""
    with open(path) as fh:
        doc = json.load(fh)
    if isinstance(doc, dict) and "experiment_id" in doc and "config" in doc:
        return doc["config"]
    return doc


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))
