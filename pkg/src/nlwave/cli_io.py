"""Run configuration, orchestration, persistence and the command line.

Configuration files are TOML with five tables::

    [domain]        dim, N, padding_factor, allow_aliasing
    [model]         damping = {kind, ...}, nonlinearity = {kind, ...}, forcing = {kind, ...}
    [integrator]    scheme, dt, scalar_tol, scalar_max_iter, linear_test_mode, linear_gamma, ...
    [experiment]    kind plus kind-specific keys (see ``EXPERIMENT_KEYS``)
    [output]        directory, stride, formats

Unknown keys and out-of-range values are rejected with the dotted key path.
Every run directory receives ``config.toml`` (canonical form), trace files,
``summary.json`` and ``manifest.json``; each file is written to a temporary
name and renamed into place.

Text traces::

    # columns: t E_u ...
    # units: time energy ...
    0.0 1.25 ...

Floats are written with ``repr`` so that reading them back is exact.

Binary traces (little endian)::

    magic   8 bytes  b"NLWTRACE"
    version uint32   1
    ncols   uint32
    nrows   uint64
    ncols x (uint16 length + utf-8 name), ncols x (uint16 length + utf-8 unit)
    nrows x ncols float64, row-major
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import math
import os
import platform
import struct
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import tomli
import tomli_w

from . import __version__
from . import diagnostics as dg
from . import experiments as ex
from .integrator import SCHEMES, IntegrationError, IntegratorConfig, integrate
from .model_library import (
    DAMPING_KINDS,
    NONLINEARITY_KINDS,
    DampingLaw,
    Model,
    ModelError,
    Nonlinearity,
    check_assumptions,
)
from .random_fields import make_rng, random_field, random_state
from .spectral_core import ModalState, build_domain, hs_norm
from .steady_state import SteadyStateError, find_equilibria

log = logging.getLogger(__name__)

EXIT_PASS, EXIT_FAIL, EXIT_ERROR = 0, 1, 2
TRACE_MAGIC = b"NLWTRACE"
TRACE_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration; ``location`` is a dotted key or ``line:col``."""

    def __init__(self, message: str, location: str = ""):
        self.location = location
        super().__init__(f"{location}: {message}" if location else message)


class RunFailed(RuntimeError):
    def __init__(self, message: str, manifest: "RunManifest"):
        super().__init__(message)
        self.manifest = manifest


# ---------------------------------------------------------------------------
# schema

def _num(x):
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _int(x):
    return isinstance(x, int) and not isinstance(x, bool)


class _Key:
    def __init__(self, kind, default=None, check=None, rule="", required=False):
        self.kind, self.default, self.check, self.rule, self.required = kind, default, check, rule, required

    def validate(self, value, where):
        ok_type = {
            "int": _int, "float": _num, "bool": lambda x: isinstance(x, bool), "str": lambda x: isinstance(x, str),
            "list": lambda x: isinstance(x, list), "table": lambda x: isinstance(x, dict),
            "opt_float": lambda x: _num(x), "opt_int": _int,
        }[self.kind](value)
        if not ok_type:
            raise ConfigError(f"expected {self.kind.replace('opt_', '')}, got {type(value).__name__}", where)
        if self.kind in ("float", "opt_float"):
            value = float(value)
            if not math.isfinite(value):
                raise ConfigError("must be finite", where)
        if self.check is not None and not self.check(value):
            raise ConfigError(f"must satisfy {self.rule}", where)
        return value


_pos = (lambda x: x > 0, "> 0")
_nonneg = (lambda x: x >= 0, ">= 0")


def _range2(x):
    return len(x) == 2 and all(_num(v) for v in x) and 0 <= x[0] <= x[1]


SCHEMA = {
    "domain": {
        "dim": _Key("int", 1, lambda x: 1 <= x <= 3, "1 <= dim <= 3"),
        "N": _Key("int", 32, lambda x: x >= 1, "N >= 1"),
        "padding_factor": _Key("float", 3.0, *_pos),
        "allow_aliasing": _Key("bool", False),
    },
    "model": {
        "damping": _Key("table", required=True),
        "nonlinearity": _Key("table", required=True),
        "forcing": _Key("table", {"kind": "zero"}),
    },
    "integrator": {
        "scheme": _Key("str", "implicit_midpoint", lambda x: x in SCHEMES, "one of " + ", ".join(SCHEMES)),
        "dt": _Key("float", 1e-3, *_pos),
        "scalar_tol": _Key("float", 1e-12, *_pos),
        "scalar_max_iter": _Key("int", 100, *_pos),
        "linear_test_mode": _Key("bool", False),
        "linear_gamma": _Key("float", 0.0, *_nonneg),
        "inner_tol": _Key("float", 1e-13, *_pos),
        "inner_max_sweeps": _Key("int", 50, *_pos),
        "growth_guard": _Key("float", 10.0, lambda x: x > 1, "> 1"),
    },
    "experiment": {
        "kind": _Key("str", "simulate"),
    },
    "output": {
        "directory": _Key("str", "nlwave_run", lambda x: len(x) > 0, "non-empty"),
        "stride": _Key("int", 10, *_pos),
        "formats": _Key("list", ["text"], lambda x: len(x) > 0 and all(f in ("text", "binary") for f in x),
                        "non-empty subset of [text, binary]"),
    },
}

_DAMPING_KEYS = {
    "constant": {"gamma": _Key("float", required=True)},
    "hyperbolic": {"a": _Key("float", required=True), "b": _Key("float", required=True)},
    "logistic": {"a": _Key("float", required=True), "b": _Key("float", required=True)},
    "shifted_power": {"eps": _Key("float", required=True), "p": _Key("float", required=True)},
    "pure_power": {"p": _Key("float", required=True)},
}
_NONLINEARITY_KEYS = {
    "odd_power": {"q": _Key("int", 5, lambda x: x in (3, 5), "q in {3, 5}")},
    "bistable": {"q": _Key("int", 5, lambda x: x in (3, 5), "q in {3, 5}"), "a": _Key("float", required=True)},
    "custom_odd_polynomial": {
        "q": _Key("float", 5.0, lambda x: 3 <= x <= 5, "3 <= q <= 5"),
        "coefficients": _Key("list", required=True),
        "constants": _Key("table", required=True),
    },
}
_FORCING_KEYS = {
    "zero": {},
    "modal": {"modes": _Key("list", [])},
    "random_smooth": {"seed": _Key("int", 0, *_nonneg), "decay": _Key("float", 1.0, *_pos),
                      "norm": _Key("float", 1.0, *_nonneg)},
}
_INITIAL_KEYS = {
    "zero": {},
    "modal": {"u": _Key("list", []), "v": _Key("list", [])},
    "random": {"seed": _Key("int", 0, *_nonneg), "norm": _Key("float", 1.0, *_nonneg),
               "decay": _Key("float", 1.0, *_pos), "band": _Key("opt_int", None, *_pos),
               "velocity_share": _Key("float", 0.5, lambda x: 0 <= x <= 1, "0 <= velocity_share <= 1")},
}
_ENSEMBLE_KEYS = {
    "count": _Key("int", 4, lambda x: x >= 1, "count >= 1"),
    "norm_range": _Key("list", [1.0, 5.0], _range2, "[r_min, r_max] with 0 <= r_min <= r_max"),
    "mode_band": _Key("opt_int", None, *_pos),
    "seed": _Key("int", 0, *_nonneg),
    "decay": _Key("float", 1.0, *_pos),
    "velocity_share": _Key("float", 0.5, lambda x: 0 <= x <= 1, "0 <= velocity_share <= 1"),
}
_PAIR_KEYS = {
    "count": _Key("int", 10, lambda x: x >= 1, "count >= 1"),
    "separation": _Key("float", 1e-6, *_pos),
    "norm_range": _Key("list", [1.0, 3.0], _range2, "[r_min, r_max] with 0 <= r_min <= r_max"),
    "seed": _Key("int", 0, *_nonneg),
    "decay": _Key("float", 1.0, *_pos),
    "band": _Key("opt_int", None, *_pos),
}

EXPERIMENT_KEYS = {
    "simulate": {"horizon": _Key("float", 1.0, *_nonneg), "initial": _Key("table", {"kind": "zero"})},
    "equilibria": {"count": _Key("int", 8, lambda x: x >= 1, ">= 1"),
                   "amplitude_range": _Key("list", [0.5, 3.0], _range2, "[lo, hi] with 0 <= lo <= hi"),
                   "seed": _Key("int", 0, *_nonneg), "tol": _Key("float", 1e-12, *_pos)},
    "check_assumptions": {"s_max": _Key("float", 1e3, *_pos),
                          "samples": _Key("int", 10_000, lambda x: x >= 100, ">= 100"),
                          "p": _Key("opt_float", None, *_nonneg)},
    "dissipativity": {"horizon": _Key("float", 100.0, *_pos), "ensemble": _Key("table", {}),
                      "compare_norm_range": _Key("list", None, _range2, "[r_min, r_max]"),
                      "radius_factor": _Key("float", 1.1, lambda x: x >= 1, ">= 1"),
                      "ball_margin": _Key("float", 0.1, *_nonneg)},
    "dissipativity_e1": {"horizon": _Key("float", 100.0, *_pos), "ensemble": _Key("table", {}),
                         "slope_tol": _Key("float", 1e-4, *_pos)},
    "lipschitz": {"horizon": _Key("float", 10.0, *_pos), "pairs": _Key("table", {}),
                  "tol": _Key("float", 0.01, *_nonneg), "halving_tol": _Key("float", 0.01, *_nonneg)},
    "quasistability": {"eta": _Key("float", 0.5, lambda x: 0 < x < 1, "0 < eta < 1"),
                       "gamma0": _Key("opt_float", None, *_pos), "pairs": _Key("table", {}),
                       "n_batches": _Key("int", 2, lambda x: x >= 1, ">= 1")},
    "attractor": {"horizon": _Key("float", 200.0, *_pos), "burn_in": _Key("opt_float", None, *_nonneg),
                  "ensemble": _Key("table", None), "delta": _Key("opt_float", None, *_pos),
                  "dist_tol": _Key("float", 1e-3, *_pos), "velocity_tol": _Key("float", 1e-3, *_pos),
                  "e1_factor": _Key("float", 10.0, *_pos),
                  "equilibria_count": _Key("int", 8, lambda x: x >= 1, ">= 1"),
                  "equilibria_seed": _Key("int", 0, *_nonneg)},
    "convergence": {"horizon": _Key("float", 1.0, *_pos),
                    "N_list": _Key("list", [8, 16, 32, 64],
                                   lambda x: len(x) >= 2 and all(_int(n) and n >= 1 for n in x)
                                   and all(b > a for a, b in zip(x, x[1:])), "increasing list of integers >= 1"),
                    "initial": _Key("table", {"kind": "zero"})},
}
EXPERIMENT_KINDS = tuple(EXPERIMENT_KEYS)

# CLI subcommand -> experiment kind
SUBCOMMANDS = {
    "simulate": "simulate",
    "equilibria": "equilibria",
    "check-assumptions": "check_assumptions",
    "probe-dissipativity": "dissipativity",
    "probe-dissipativity-e1": "dissipativity_e1",
    "probe-lipschitz": "lipschitz",
    "probe-quasistability": "quasistability",
    "probe-attractor": "attractor",
    "probe-convergence": "convergence",
}


def _validate_table(raw: dict, keys: dict, where: str) -> dict:
    out = {}
    unknown = sorted(set(raw) - set(keys))
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r}; valid keys: {', '.join(sorted(keys))}",
                          f"{where}.{unknown[0]}" if where else unknown[0])
    for name, spec in keys.items():
        loc = f"{where}.{name}" if where else name
        if name in raw:
            value = raw[name]
            if value is None:
                out[name] = None
                continue
            out[name] = spec.validate(value, loc)
        elif spec.required:
            raise ConfigError("required key missing", loc)
        else:
            out[name] = copy.deepcopy(spec.default)
    return out


def _validate_kinded(raw: dict, table: dict, where: str, what: str) -> dict:
    if "kind" not in raw:
        raise ConfigError(f"{what} needs a 'kind'; valid kinds: {', '.join(table)}", f"{where}.kind")
    kind = raw["kind"]
    if kind not in table:
        raise ConfigError(f"unknown {what} kind {kind!r}; valid kinds: {', '.join(table)}", f"{where}.kind")
    body = {k: v for k, v in raw.items() if k != "kind"}
    return {"kind": kind, **_validate_table(body, table[kind], where)}


def _validate_modal_list(items, dim: int, where: str) -> list:
    out = []
    for i, it in enumerate(items):
        loc = f"{where}[{i}]"
        if not (isinstance(it, list) and len(it) == dim + 1 and all(_int(k) and k >= 1 for k in it[:dim])
                and _num(it[dim])):
            raise ConfigError(f"entries are [k_1, ..., k_{dim}, value] with integer k >= 1", loc)
        out.append([int(k) for k in it[:dim]] + [float(it[dim])])
    return out


@dataclass
class RunConfig:
    domain: dict
    model: dict
    integrator: dict
    experiment: dict
    output: dict

    def as_dict(self) -> dict:
        return {"domain": self.domain, "model": self.model, "integrator": self.integrator,
                "experiment": self.experiment, "output": self.output}


def validate(raw: dict) -> RunConfig:
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown section; valid sections: {', '.join(SCHEMA)}", unknown[0])
    for sec in SCHEMA:
        if sec in raw and not isinstance(raw[sec], dict):
            raise ConfigError("expected a table", sec)
    if "model" not in raw:
        raise ConfigError("required section missing", "model")
    dom = _validate_table(raw.get("domain", {}), SCHEMA["domain"], "domain")
    if dom["padding_factor"] < 3 and not dom["allow_aliasing"]:
        raise ConfigError("padding_factor < 3 breaks the anti-aliasing constraint for quintic products; "
                          "set allow_aliasing = true to accept aliasing", "domain.padding_factor")
    dim = dom["dim"]
    if dom["N"] ** dim > 2_000_000:
        raise ConfigError("N**dim too large", "domain.N")

    model = _validate_table(raw["model"], SCHEMA["model"], "model")
    damp = _validate_kinded(model["damping"], {k: dict(v, p_exponent=_Key("float", 0.0, *_nonneg))
                                               for k, v in _DAMPING_KEYS.items()}, "model.damping", "damping")
    nl = _validate_kinded(model["nonlinearity"], _NONLINEARITY_KEYS, "model.nonlinearity", "nonlinearity")
    forcing = _validate_kinded(model["forcing"], _FORCING_KEYS, "model.forcing", "forcing")
    if forcing["kind"] == "modal":
        forcing["modes"] = _validate_modal_list(forcing["modes"], dim, "model.forcing.modes")
    model = {"damping": damp, "nonlinearity": nl, "forcing": forcing}
    # let the library constructors apply the remaining constraints
    try:
        _damping_from(damp)
        _nonlinearity_from(nl)
    except ModelError as exc:
        raise ConfigError(str(exc), "model") from None

    integ = _validate_table(raw.get("integrator", {}), SCHEMA["integrator"], "integrator")

    exp_raw = dict(raw.get("experiment", {}))
    kind = exp_raw.pop("kind", "simulate")
    if kind not in EXPERIMENT_KEYS:
        raise ConfigError(f"unknown experiment kind {kind!r}; valid kinds: {', '.join(EXPERIMENT_KINDS)}",
                          "experiment.kind")
    exp = {"kind": kind, **_validate_table(exp_raw, EXPERIMENT_KEYS[kind], "experiment")}
    for sub, keys in (("ensemble", _ENSEMBLE_KEYS), ("pairs", _PAIR_KEYS)):
        if sub in exp and exp[sub] is not None:
            exp[sub] = _validate_table(exp[sub], keys, f"experiment.{sub}")
    if "initial" in exp:
        exp["initial"] = _validate_kinded(exp["initial"], _INITIAL_KEYS, "experiment.initial", "initial state")
        if exp["initial"]["kind"] == "modal":
            for part in ("u", "v"):
                exp["initial"][part] = _validate_modal_list(exp["initial"][part], dim, f"experiment.initial.{part}")
    for key in ("horizon", "burn_in"):
        if key in exp and exp[key] is not None:
            steps = exp[key] / integ["dt"]
            if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
                raise ConfigError(f"{key} must be a whole number of steps of dt = {integ['dt']}",
                                  f"experiment.{key}")
    if "burn_in" in exp and exp["burn_in"] is not None and exp["burn_in"] > exp["horizon"]:
        raise ConfigError("burn_in must not exceed horizon", "experiment.burn_in")

    out = _validate_table(raw.get("output", {}), SCHEMA["output"], "output")
    return RunConfig(dom, model, integ, exp, out)


def parse_config(text: str) -> RunConfig:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        line, col = getattr(exc, "lineno", None), getattr(exc, "colno", None)
        loc = f"line {line}, column {col}" if line is not None else ""
        raise ConfigError(f"syntax error: {getattr(exc, 'msg', exc)}", loc) from None
    return validate(raw)


def _strip_none(d):
    if isinstance(d, dict):
        return {k: _strip_none(v) for k, v in sorted(d.items()) if v is not None}
    if isinstance(d, list):
        return [_strip_none(v) for v in d]
    return d


def to_toml(cfg: RunConfig) -> str:
    """Canonical text: every key present (defaults filled), keys sorted."""
    d = _strip_none(cfg.as_dict())
    return tomli_w.dumps({sec: d[sec] for sec in SCHEMA})


def canonicalize(text: str) -> str:
    return to_toml(parse_config(text))


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``section.key=value`` strings; values are TOML literals, bare words are strings."""
    raw = copy.deepcopy(raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value", "--set")
        path, text = item.split("=", 1)
        keys = path.strip().split(".")
        if len(keys) < 2 or not all(keys):
            raise ConfigError(f"override path {path!r} needs section.key", "--set")
        try:
            value = tomli.loads(f"v = {text}")["v"]
        except tomli.TOMLDecodeError:
            value = text
        node = raw
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{k} is not a table", path)
        node[keys[-1]] = value
    return raw


def load_config(path, overrides=(), kind: Optional[str] = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from None
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"syntax error: {getattr(exc, 'msg', exc)}",
                          f"{path}: line {getattr(exc, 'lineno', '?')}, column {getattr(exc, 'colno', '?')}") from None
    raw = apply_overrides(raw, overrides)
    if kind is not None:
        exp = raw.setdefault("experiment", {})
        given = exp.get("kind")
        if given is not None and given != kind:
            raise ConfigError(f"config describes a {given!r} experiment, subcommand expects {kind!r}",
                              "experiment.kind")
        exp["kind"] = kind
    return validate(raw)


# ---------------------------------------------------------------------------
# construction of library objects

def _damping_from(d: dict) -> DampingLaw:
    params = {k: v for k, v in d.items() if k not in ("kind", "p_exponent")}
    return DampingLaw(d["kind"], params, d.get("p_exponent", 0.0))


def _nonlinearity_from(d: dict) -> Nonlinearity:
    if d["kind"] == "custom_odd_polynomial":
        return Nonlinearity(d["kind"], q=d["q"], coefficients=tuple(float(c) for c in d["coefficients"]),
                            constants=dict(d["constants"]))
    return Nonlinearity(d["kind"], q=d["q"], a=d.get("a", 0.0))


def _modal_field(domain, items) -> np.ndarray:
    f = domain.zeros()
    for it in items:
        idx = tuple(int(k) - 1 for k in it[:-1])
        if any(i >= domain.modes_per_axis for i in idx):
            raise ConfigError(f"mode {it[:-1]} exceeds N = {domain.modes_per_axis}", "modal list")
        f[idx] += it[-1]
    return f


def build(cfg: RunConfig):
    """Domain, model and integrator settings described by a config."""
    d = cfg.domain
    pad = d["padding_factor"]
    domain = build_domain(d["dim"], d["N"], int(pad) if float(pad).is_integer() else pad,
                          allow_aliasing=d["allow_aliasing"])
    f = cfg.model["forcing"]
    if f["kind"] == "zero":
        h = domain.zeros()
    elif f["kind"] == "modal":
        h = _modal_field(domain, f["modes"])
    else:
        h = random_field(domain, make_rng(f["seed"]), f["decay"])
        nrm = hs_norm(domain, h, 0)
        h = h * (f["norm"] / nrm if nrm > 0 else 0.0)
    model = Model(domain, _damping_from(cfg.model["damping"]), _nonlinearity_from(cfg.model["nonlinearity"]), h)
    icfg = IntegratorConfig(**cfg.integrator)
    return domain, model, icfg


def initial_state(domain, spec: dict) -> ModalState:
    if spec["kind"] == "zero":
        return ModalState(domain.zeros(), domain.zeros())
    if spec["kind"] == "modal":
        return ModalState(_modal_field(domain, spec["u"]), _modal_field(domain, spec["v"]))
    return random_state(domain, make_rng(spec["seed"]), spec["norm"], spec["decay"], spec["band"],
                        spec["velocity_share"])


# ---------------------------------------------------------------------------
# trace files

def format_trace(names, units, data) -> str:
    data = np.atleast_2d(np.asarray(data, dtype=float))
    if data.shape[1] != len(names) or len(units) != len(names):
        raise ValueError("names, units and columns disagree")
    lines = ["# columns: " + " ".join(names), "# units: " + " ".join(units)]
    lines += [" ".join(repr(float(x)) for x in row) for row in data]
    return "\n".join(lines) + "\n"


def parse_trace(text: str):
    lines = text.splitlines()
    if len(lines) < 2 or not lines[0].startswith("# columns:") or not lines[1].startswith("# units:"):
        raise ValueError("not a trace file: missing columns/units header")
    names = lines[0][len("# columns:"):].split()
    units = lines[1][len("# units:"):].split()
    rows = [[float(x) for x in ln.split()] for ln in lines[2:] if ln.strip()]
    data = np.array(rows, dtype=float).reshape(len(rows), len(names))
    return names, units, data


def read_trace(path):
    return parse_trace(Path(path).read_text())


def encode_binary_trace(names, units, data) -> bytes:
    data = np.ascontiguousarray(np.atleast_2d(np.asarray(data, dtype="<f8")))
    nrows, ncols = data.shape
    if ncols != len(names) or len(units) != ncols:
        raise ValueError("names, units and columns disagree")
    parts = [TRACE_MAGIC, struct.pack("<IIQ", TRACE_VERSION, ncols, nrows)]
    for s in list(names) + list(units):
        b = s.encode()
        parts.append(struct.pack("<H", len(b)) + b)
    parts.append(data.tobytes())
    return b"".join(parts)


def decode_binary_trace(buf: bytes):
    if buf[:8] != TRACE_MAGIC:
        raise ValueError("bad magic")
    version, ncols, nrows = struct.unpack_from("<IIQ", buf, 8)
    if version != TRACE_VERSION:
        raise ValueError(f"unsupported trace version {version}")
    pos = 24
    strings = []
    for _ in range(2 * ncols):
        (n,) = struct.unpack_from("<H", buf, pos)
        strings.append(buf[pos + 2:pos + 2 + n].decode())
        pos += 2 + n
    data = np.frombuffer(buf, dtype="<f8", count=nrows * ncols, offset=pos).reshape(nrows, ncols)
    return strings[:ncols], strings[ncols:], data.astype(float)


def read_binary_trace(path):
    return decode_binary_trace(Path(path).read_bytes())


_UNITS = {
    "t": "time", "energy_norm": "E", "e1_norm": "E1", "rho": "ratio", "e1_sq": "E1^2", "e_sq": "E^2",
    "dist_to_equilibria": "E", "v_Hm1": "H^-1", "sigma": "damping", "dissipation": "energy",
}


# ---------------------------------------------------------------------------
# run directory

def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


class RunWriter:
    """Single writer for a run directory; every file lands by atomic rename."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.digests: dict[str, str] = {}

    def write_bytes(self, rel: str, data: bytes, record: bool = True) -> Path:
        dest = self.root / rel
        dest.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=dest.parent, prefix=".tmp-", suffix=dest.name)
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, dest)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        if record:
            self.digests[rel] = _sha256(data)
        return dest

    def write_text(self, rel: str, text: str, record: bool = True) -> Path:
        return self.write_bytes(rel, text.encode(), record)

    def write_trace(self, stem: str, names, units, data, formats) -> None:
        if "text" in formats:
            self.write_text(f"{stem}.txt", format_trace(names, units, data))
        if "binary" in formats:
            self.write_bytes(f"{stem}.bin", encode_binary_trace(names, units, data))


@dataclass
class RunManifest:
    config: str
    tool_version: str
    platform: dict
    started: float
    wall_clock: float
    digests: dict
    phases: list
    status: str = "ok"
    passed: Optional[bool] = None
    failure: Optional[dict] = None

    def as_dict(self) -> dict:
        return {
            "config": self.config, "tool_version": self.tool_version, "platform": self.platform,
            "started": self.started, "wall_clock_seconds": self.wall_clock, "digests": dict(sorted(self.digests.items())),
            "phases": self.phases, "status": self.status, "passed": self.passed, "failure": self.failure,
        }


def platform_fingerprint() -> dict:
    return {"python": platform.python_version(), "machine": platform.machine(), "system": platform.system(),
            "numpy": np.__version__, "threads": os.environ.get("NLWAVE_THREADS", "")}


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if math.isfinite(v) else repr(v)
    return x


def _dump_json(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def _write_probe_traces(writer: RunWriter, rep: ex.ProbeReport, formats) -> None:
    for i, tr in enumerate(rep.traces):
        names = [k for k, v in tr.items() if isinstance(v, np.ndarray) and v.ndim == 1]
        if not names:
            continue
        data = np.column_stack([tr[k] for k in names])
        writer.write_trace(f"traces/{rep.name}_{i:03d}", names, [_UNITS.get(k, "1") for k in names], data, formats)


def _write_equilibria(writer: RunWriter, eqset, domain, formats) -> None:
    n = domain.eigenvalues.size
    names = ["index", "morse_index", "h1_norm", "residual"] + [f"c{j}" for j in range(n)]
    units = ["1", "1", "H^1", "H^-1"] + ["1"] * n
    rows = [[i, -1 if e.morse_index is None else e.morse_index, hs_norm(domain, e.u_star, 1), e.residual]
            + list(e.u_star.ravel()) for i, e in enumerate(eqset)]
    writer.write_trace("equilibria", names, units, np.array(rows, dtype=float).reshape(len(rows), len(names)),
                       formats)


def _execute(cfg: RunConfig, writer: RunWriter, phases: list) -> tuple[dict, bool]:
    """Run the experiment; return (summary document, passed)."""
    domain, model, icfg = build(cfg)
    exp = cfg.experiment
    kind = exp["kind"]
    formats = cfg.output["formats"]
    stride = cfg.output["stride"]

    def phase(name):
        phases.append({"name": name, "status": "running"})

    def done():
        phases[-1]["status"] = "ok"

    if kind == "check_assumptions":
        phase("check_assumptions")
        rep = check_assumptions(model.damping, model.nonlinearity, exp["s_max"], exp["samples"], exp["p"])
        done()
        return {"report": rep.as_dict()}, rep.passed

    if kind == "simulate":
        phase("integrate")
        s0 = initial_state(domain, exp["initial"])
        tr = integrate(s0, model, icfg, exp["horizon"], stride)
        done()
        names, units, table = dg.energy_table(tr)
        writer.write_trace("trajectory", names, units, table, formats)
        n = domain.eigenvalues.size
        snames = ["t"] + [f"u{j}" for j in range(n)] + [f"v{j}" for j in range(n)]
        sdata = np.column_stack([tr.times, tr.u.reshape(len(tr), -1), tr.v.reshape(len(tr), -1)])
        writer.write_trace("states", snames, ["time"] + ["1"] * (2 * n), sdata, formats)
        summ = {"samples": len(tr), "identity_residual": dg.energy_identity_residual(tr),
                "final_energy": dg.energy(tr.final, model).E_u}
        return summ, True

    if kind == "equilibria":
        phase("find_equilibria")
        eqs = find_equilibria(model, exp["count"], tuple(exp["amplitude_range"]), exp["seed"], tol=exp["tol"])
        done()
        _write_equilibria(writer, eqs, domain, formats)
        summ = {"count": len(eqs), "morse_indices": [e.morse_index for e in eqs],
                "h1_norms": [hs_norm(domain, e.u_star, 1) for e in eqs],
                "residuals": [e.residual for e in eqs]}
        return summ, len(eqs) > 0

    def ensemble(spec, **kw):
        spec = dict(spec, **kw)
        return ex.EnsembleSpec(spec["count"], tuple(spec["norm_range"]), spec["mode_band"], spec["seed"],
                               spec["decay"], spec["velocity_share"])

    def pairs(spec):
        return ex.lipschitz_pairs(domain, spec["count"], spec["separation"], tuple(spec["norm_range"]),
                                  spec["seed"], spec["decay"], spec["band"])

    def finish(rep, extra=None):
        _write_probe_traces(writer, rep, formats)
        doc = {"name": rep.name, "summary": rep.summary, "verdicts": rep.verdicts}
        if extra:
            doc.update(extra)
        return doc, rep.passed

    if kind == "dissipativity":
        ens = _ENSEMBLE_KEYS_DEFAULTS(exp["ensemble"])
        phase("dissipativity")
        rep = ex.dissipativity_probe(model, ensemble(ens), exp["horizon"], icfg, exp["ball_margin"], stride)
        done()
        if exp["compare_norm_range"] is not None:
            phase("dissipativity_compare")
            rep2 = ex.dissipativity_probe(model, ensemble(ens, norm_range=exp["compare_norm_range"]),
                                          exp["horizon"], icfg, exp["ball_margin"], stride)
            done()
            r1, r2 = rep.summary["R_emp"], rep2.summary["R_emp"]
            ratio = max(r1, r2) / min(r1, r2) if min(r1, r2) > 0 else (1.0 if r1 == r2 else math.inf)
            rep.summary["compare"] = {"summary": rep2.summary, "verdicts": rep2.verdicts, "radius_ratio": ratio}
            rep.verdicts["compare_positively_invariant"] = rep2.verdicts["positively_invariant"]
            rep.verdicts["compare_all_entered"] = rep2.verdicts["all_entered"]
            rep.verdicts["radius_agreement"] = ratio <= exp["radius_factor"]
            rep2.name = "dissipativity_compare"
            _write_probe_traces(writer, rep2, formats)
        return finish(rep)

    if kind == "dissipativity_e1":
        phase("dissipativity_e1")
        rep = ex.e1_dissipativity_probe(model, ensemble(_ENSEMBLE_KEYS_DEFAULTS(exp["ensemble"])), exp["horizon"],
                                        icfg, stride, exp["slope_tol"])
        done()
        return finish(rep)

    if kind == "lipschitz":
        phase("lipschitz")
        rep = ex.lipschitz_probe(model, pairs(_PAIR_KEYS_DEFAULTS(exp["pairs"])), exp["horizon"], icfg, stride,
                                 exp["tol"], True, exp["halving_tol"])
        done()
        return finish(rep)

    if kind == "quasistability":
        phase("quasistability")
        rep = ex.quasistability_probe(model, pairs(_PAIR_KEYS_DEFAULTS(exp["pairs"])), exp["eta"], icfg,
                                      exp["gamma0"], exp["n_batches"], stride)
        done()
        return finish(rep)

    if kind == "attractor":
        # dependency: the stationary set is computed first
        phase("find_equilibria")
        eqs = find_equilibria(model, exp["equilibria_count"], seed=exp["equilibria_seed"])
        done()
        phase("attractor")
        ens = None if exp["ensemble"] is None else ensemble(_ENSEMBLE_KEYS_DEFAULTS(exp["ensemble"]))
        rep = ex.attractor_probe(model, exp["horizon"], icfg, exp["burn_in"], eqs, ens, exp["delta"], stride,
                                 exp["dist_tol"], exp["velocity_tol"], exp["e1_factor"])
        done()
        _write_equilibria(writer, rep.artifacts["equilibria"], domain, formats)
        return finish(rep)

    if kind == "convergence":
        phase("convergence")
        s0 = initial_state(domain, exp["initial"])
        rep = ex.galerkin_convergence_probe(model, s0, exp["N_list"], exp["horizon"], icfg)
        done()
        return finish(rep)

    raise ConfigError(f"unknown experiment kind {kind!r}", "experiment.kind")  # pragma: no cover


def _ENSEMBLE_KEYS_DEFAULTS(d):  # noqa: N802
    return _validate_table(d, _ENSEMBLE_KEYS, "experiment.ensemble")


def _PAIR_KEYS_DEFAULTS(d):  # noqa: N802
    return _validate_table(d, _PAIR_KEYS, "experiment.pairs")


MODULE_ERRORS = (IntegrationError, SteadyStateError, ex.ProbeError, ModelError, ValueError, ArithmeticError)


def run(cfg: RunConfig, directory: Optional[os.PathLike] = None) -> RunManifest:
    """Execute the configured experiment and persist its outputs."""
    root = Path(directory) if directory is not None else Path(cfg.output["directory"])
    writer = RunWriter(root)
    canon = to_toml(cfg)
    writer.write_text("config.toml", canon)
    phases: list = []
    started = time.time()
    t0 = time.perf_counter()
    manifest = RunManifest(canon, __version__, platform_fingerprint(), started, 0.0, writer.digests, phases)
    try:
        doc, passed = _execute(cfg, writer, phases)
    except MODULE_ERRORS as exc:
        if phases and phases[-1]["status"] == "running":
            phases[-1]["status"] = "failed"
        manifest.status = "failed"
        manifest.failure = {"phase": phases[-1]["name"] if phases else "setup", "error": type(exc).__name__,
                            "message": str(exc), "time": getattr(exc, "time", None)}
        manifest.wall_clock = time.perf_counter() - t0
        writer.write_text("manifest.json", _dump_json(manifest.as_dict()), record=False)
        raise RunFailed(f"{manifest.failure['phase']}: {exc}", manifest) from exc
    doc = {"kind": cfg.experiment["kind"], "passed": bool(passed), **doc}
    writer.write_text("summary.json", _dump_json(doc))
    manifest.passed = bool(passed)
    manifest.wall_clock = time.perf_counter() - t0
    writer.write_text("manifest.json", _dump_json(manifest.as_dict()), record=False)
    return manifest


# ---------------------------------------------------------------------------
# command line

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_ERROR)


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nlwave", description="Damped wave equations with nonlocal damping: simulations and probes.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in SUBCOMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="TOML run configuration")
        s.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a config value (repeatable)")
        s.add_argument("--out", help="output directory (overrides output.directory)")
    sub.add_parser("version")
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "version":
        print(f"nlwave {__version__}")
        return EXIT_PASS
    try:
        from .parallel import worker_count

        worker_count()
        cfg = load_config(args.config, args.set, SUBCOMMANDS[args.command])
        manifest = run(cfg, args.out)
    except ConfigError as exc:
        print(f"nlwave: config error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except RunFailed as exc:
        print(f"nlwave: run failed: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (OSError, ValueError) as exc:
        print(f"nlwave: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    root = Path(args.out) if args.out else Path(cfg.output["directory"])
    summary = json.loads((root / "summary.json").read_text())
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_PASS if manifest.passed else EXIT_FAIL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
