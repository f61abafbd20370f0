"""Experiment configuration: JSON parsing, validation and object construction."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .histories import HistorySpec, PartitionError, RegionPartition, make_partition
from .qstate import GridError, GridSpec, SystemConfig, WaveFunction, init_gaussian, superpose

__all__ = ["ConfigError", "ExperimentConfig", "parse_config", "load_config"]

DEFAULT_TOLERANCES = {
    "eps_consistency": 0.05,
    "consistency_min_weight": 0.0,
    "eps_node": 1e-12,
    "disagree_sigmas": 5.0,
    "disagree_abs": 0.05,
    "plot_threshold": 0.05,
    "transport_bins": 16,
}

_SCHEMA: dict[str, Any] = {
    "kind": None,
    "name": None,
    "grid": {"extent": None, "points": None},
    "system": {"mass": None, "hbar": None, "potential": None},
    "initial_state": {"terms": None},
    "history": {"times": None, "partition": None, "partitions": None},
    "named_histories": None,
    "ensemble": {"n": None, "seed": None, "dt": None},
    "decoherence": {"prune": None, "max_branches": None, "dt": None},
    "tolerances": {k: None for k in DEFAULT_TOLERANCES},
    "output": {"dir": None, "trajectories": None, "trajectory_sample": None},
}
_REQUIRED = ("grid", "initial_state", "history", "ensemble")
_TERM_KEYS = {"coefficient", "center", "momentum", "sigma", "focus_time"}


class ConfigError(ValueError):
    """Invalid configuration, optionally anchored to a line of the source text."""

    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        self.line = line
        self.source = source
        where = f"{source or '<config>'}:{line}: " if line else (f"{source}: " if source else "")
        super().__init__(where + message)


def _line_of(text: str | None, path: tuple[str, ...]) -> int | None:
    """Best-effort line number of the last key in ``path``, searched in nesting order."""
    if not text:
        return None
    pos = 0
    for key in path:
        m = re.compile(r'"%s"\s*:' % re.escape(key)).search(text, pos)
        if m is None:
            return None
        pos = m.start()
    return text.count("\n", 0, pos) + 1


@dataclass
class ExperimentConfig:
    name: str
    grid: GridSpec
    system: SystemConfig
    terms: list[dict]
    hist: HistorySpec
    named_histories: dict[str, tuple[int, ...]]
    n: int
    seed: int
    dt: float
    prune: float
    max_branches: int
    decoherence_dt: float | None
    tolerances: dict[str, float]
    output_dir: str
    trajectories: bool
    trajectory_sample: int
    raw: dict = field(repr=False, default_factory=dict)

    def initial_state(self) -> WaveFunction:
        return superpose((t["coefficient"], t["state"]) for t in self.terms)[0]


def _check_keys(obj: dict, schema: dict, path: tuple[str, ...], text: str | None, source: str | None):
    for key, value in obj.items():
        if key not in schema:
            raise ConfigError(f"unknown key {'.'.join(path + (key,))!r}", _line_of(text, path + (key,)), source)
        sub = schema[key]
        if isinstance(sub, dict) and isinstance(value, dict):
            _check_keys(value, sub, path + (key,), text, source)


def _potential(spec, grid: GridSpec) -> np.ndarray | None:
    if spec is None or spec == "free" or (isinstance(spec, dict) and spec.get("kind") == "free"):
        return None
    kind = spec.get("kind")
    mesh = grid.mesh()
    if kind == "harmonic":
        omega = float(spec["omega"])
        mass = float(spec.get("mass", 1.0))
        center = np.broadcast_to(np.asarray(spec.get("center", 0.0), dtype=float), (grid.dims,))
        return 0.5 * mass * omega**2 * sum((m - c) ** 2 for m, c in zip(mesh, center))
    if kind == "constant":
        return np.full(grid.shape, float(spec["value"]))
    raise ConfigError(f"unknown potential kind {kind!r}")


def parse_config(data: dict, text: str | None = None, source: str | None = None) -> ExperimentConfig:
    """Validate a decoded config against every precondition and build the run objects."""

    def fail(msg, *path):
        raise ConfigError(msg, _line_of(text, tuple(path)), source)

    if not isinstance(data, dict):
        fail("top level must be a JSON object")
    _check_keys(data, _SCHEMA, (), text, source)
    if data.get("kind", "experiment") != "experiment":
        fail(f"expected kind 'experiment', got {data.get('kind')!r}", "kind")
    for key in _REQUIRED:
        if key not in data:
            fail(f"missing required section {key!r}")

    g = data["grid"]
    try:
        grid = GridSpec(tuple(g["extent"]), tuple(g["points"]))
    except (GridError, KeyError, TypeError) as exc:
        fail(f"invalid grid: {exc}", "grid")

    s = data.get("system", {})
    try:
        system = SystemConfig(float(s.get("mass", 1.0)), float(s.get("hbar", 1.0)), _potential(s.get("potential"), grid))
    except (GridError, KeyError, TypeError, ConfigError) as exc:
        fail(f"invalid system: {exc}", "system")

    terms = []
    raw_terms = data["initial_state"].get("terms")
    if not raw_terms:
        fail("initial_state.terms must list at least one Gaussian", "initial_state")
    for i, t in enumerate(raw_terms):
        extra = set(t) - _TERM_KEYS
        if extra:
            fail(f"unknown key(s) {sorted(extra)} in initial_state.terms[{i}]", "initial_state", "terms", sorted(extra)[0])
        c = t.get("coefficient", 1.0)
        coef = complex(c[0], c[1]) if isinstance(c, (list, tuple)) else complex(c)
        try:
            state = init_gaussian(
                grid, system, t["center"], t["momentum"], float(t["sigma"]), float(t.get("focus_time", 0.0))
            )
        except (GridError, KeyError, TypeError) as exc:
            fail(f"initial_state.terms[{i}]: {exc}", "initial_state", "terms")
        terms.append({"coefficient": coef, "state": state, "spec": t})

    h = data["history"]
    times = h.get("times")
    if not times:
        fail("history.times must be a non-empty list", "history")
    try:
        if "partitions" in h:
            if len(h["partitions"]) != len(times):
                fail("history.partitions needs one entry per time", "history", "partitions")
            parts = tuple(make_partition(grid, p) for p in h["partitions"])
        else:
            parts = make_partition(grid, h.get("partition", {"kind": "single"}))
        hist = HistorySpec(tuple(times), parts)
    except (PartitionError, ValueError, KeyError) as exc:
        if isinstance(exc, ConfigError):
            raise
        fail(f"invalid history: {exc}", "history")

    named = {}
    for name, pts in (data.get("named_histories") or {}).items():
        if len(pts) != hist.n:
            fail(f"named history {name!r} needs {hist.n} points", "named_histories", name)
        try:
            named[name] = hist.label_at(pts)
        except PartitionError as exc:
            fail(f"named history {name!r}: {exc}", "named_histories", name)

    e = data["ensemble"]
    n = int(e.get("n", 0))
    if n < 1:
        fail(f"ensemble.n = {n}: Bohmian probabilities need a non-empty ensemble", "ensemble", "n")
    dt = float(e.get("dt", 0))
    if not dt > 0:
        fail("ensemble.dt must be positive", "ensemble", "dt")
    for t in hist.times:
        k = round(t / dt)
        if abs(k * dt - t) > 1e-9 * max(1.0, t):
            fail(f"history time {t} is not a multiple of ensemble.dt = {dt}", "ensemble", "dt")

    d = data.get("decoherence", {})
    prune = float(d.get("prune", 1e-8))
    max_branches = int(d.get("max_branches", 10_000))
    ddt = d.get("dt")
    if prune < 0:
        fail("decoherence.prune must be non-negative", "decoherence", "prune")
    if not system.is_free and ddt is None:
        ddt = dt

    tol = dict(DEFAULT_TOLERANCES)
    tol.update(data.get("tolerances", {}))
    tol["transport_bins"] = int(tol["transport_bins"])

    o = data.get("output", {})
    return ExperimentConfig(
        name=str(data.get("name", "experiment")),
        grid=grid,
        system=system,
        terms=terms,
        hist=hist,
        named_histories=named,
        n=n,
        seed=int(e.get("seed", 0)),
        dt=dt,
        prune=prune,
        max_branches=max_branches,
        decoherence_dt=None if ddt is None else float(ddt),
        tolerances=tol,
        output_dir=str(o.get("dir", f"runs/{data.get('name', 'experiment')}")),
        trajectories=bool(o.get("trajectories", False)),
        trajectory_sample=int(o.get("trajectory_sample", 200)),
        raw=data,
    )


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON: {exc.msg}", exc.lineno, str(path)) from None
    return parse_config(data, text, str(path))
