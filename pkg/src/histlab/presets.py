"""Pinned experiment configurations and finite-model files.

Every physical choice left open by the mirror-packet setup (packet width,
speed, square side, box size, time spacing, ensemble size) is written out
here explicitly; nothing downstream hard-codes them.
"""
from __future__ import annotations

import copy
import json
from pathlib import Path

from .records import build_bessw_analog, build_copy_model, save_model

__all__ = ["PRESETS", "preset", "write_preset", "bessw_geometry"]


def bessw_geometry(side: float = 120.0, speed: float = 1.0, n_times: int = 7, lead: float = 0.25):
    """Square-track geometry for the mirror-packet example (hbar = m = 1).

    The upper packet visits the squares centred on ``(-3s, 3s), (-2s, 2s),
    ..., (3s, -3s)`` at ``t_k = (lead + k - 1) * s / v``; the lower one is
    its mirror image.  Both reach their waist when they meet at the origin.
    """
    tau = side / speed
    half = (n_times - 1) // 2
    times = [(lead + k) * tau for k in range(n_times)]
    upper = [[(k - half) * side, (half - k) * side] for k in range(n_times)]
    start = [upper[0][0] - speed * times[0], upper[0][1] + speed * times[0]]
    return {
        "tau": tau,
        "times": times,
        "upper_track": upper,
        "start": start,
        "focus_time": times[half],
    }


def _bessw() -> dict:
    side, speed = 120.0, 1.0
    geo = bessw_geometry(side, speed)
    x0, y0 = geo["start"]
    up = geo["upper_track"]
    c = 2**-0.5
    return {
        "kind": "experiment",
        "name": "bessw",
        "grid": {"extent": [1024.0, 1024.0], "points": [1024, 1024]},
        "system": {"mass": 1.0, "hbar": 1.0, "potential": "free"},
        "initial_state": {
            "terms": [
                {"coefficient": [c, 0.0], "center": [x0, y0], "momentum": [speed, -speed], "sigma": 13.0, "focus_time": geo["focus_time"]},
                {"coefficient": [c, 0.0], "center": [x0, -y0], "momentum": [speed, speed], "sigma": 13.0, "focus_time": geo["focus_time"]},
            ]
        },
        "history": {"times": geo["times"], "partition": {"kind": "tiling", "side": side, "origin": side / 2}},
        "named_histories": {
            "alpha_plus": up,
            "alpha_minus": [[x, -y] for x, y in up],
            "reflected_upper": [[x, abs(y)] for x, y in up],
            "reflected_lower": [[x, -abs(y)] for x, y in up],
        },
        "ensemble": {"n": 100_000, "seed": 20240601, "dt": 0.5},
        "decoherence": {"prune": 1e-5, "max_branches": 10_000},
        "tolerances": {
            "eps_consistency": 0.05,
            "consistency_min_weight": 1e-3,
            "eps_node": 1e-12,
            "disagree_sigmas": 5.0,
            "disagree_abs": 0.05,
            "plot_threshold": 0.05,
            "transport_bins": 16,
        },
        "output": {"dir": "runs/bessw", "trajectories": False, "trajectory_sample": 200},
    }


def _single_time() -> dict:
    # two packets meeting head-on in 1D; t_1 falls while they overlap
    return {
        "kind": "experiment",
        "name": "single-time",
        "grid": {"extent": [256.0], "points": [1024]},
        "system": {"mass": 1.0, "hbar": 1.0, "potential": "free"},
        "initial_state": {
            "terms": [
                {"coefficient": [0.6, 0.0], "center": [-40.0], "momentum": [1.0], "sigma": 6.0},
                {"coefficient": [0.8, 0.0], "center": [40.0], "momentum": [-1.5], "sigma": 8.0},
            ]
        },
        "history": {"times": [30.0], "partition": {"kind": "intervals", "axis": 0, "edges": [-30.0, -10.0, 0.0, 12.5, 35.0]}},
        "ensemble": {"n": 100_000, "seed": 7, "dt": 0.05},
        "decoherence": {"prune": 0.0, "max_branches": 10_000},
        "output": {"dir": "runs/single-time", "trajectories": False, "trajectory_sample": 200},
    }


def _two_slit() -> dict:
    # packets separated at t_1, overlapping at t_2; fine slabs at t_2 resolve the fringes
    return {
        "kind": "experiment",
        "name": "two-slit-inconsistent",
        "grid": {"extent": [256.0], "points": [1024]},
        "system": {"mass": 1.0, "hbar": 1.0, "potential": "free"},
        "initial_state": {
            "terms": [
                {"coefficient": [0.7071067811865476, 0.0], "center": [-40.0], "momentum": [1.0], "sigma": 6.0},
                {"coefficient": [0.7071067811865476, 0.0], "center": [40.0], "momentum": [-1.0], "sigma": 6.0},
            ]
        },
        "history": {
            "times": [10.0, 40.0],
            "partitions": [
                {"kind": "halfplane", "axis": 0, "at": 0.0},
                {"kind": "tiling", "side": 1.0, "origin": 0.5},
            ],
        },
        "ensemble": {"n": 20_000, "seed": 11, "dt": 0.05},
        "decoherence": {"prune": 1e-10, "max_branches": 10_000},
        "tolerances": {"consistency_min_weight": 1e-3},
        "output": {"dir": "runs/two-slit-inconsistent", "trajectories": False, "trajectory_sample": 200},
    }


PRESETS = {
    "bessw": _bessw,
    "single-time": _single_time,
    "two-slit-inconsistent": _two_slit,
    "records-copy": lambda: build_copy_model(2, 2),
    "records-exclusivity": lambda: build_bessw_analog("C"),
}


def preset(name: str):
    """Config dict (grid experiments) or FiniteModel (records presets)."""
    try:
        factory = PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return copy.deepcopy(factory())


def write_preset(name: str, path) -> Path:
    obj = preset(name)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(obj, dict):
        path.write_text(json.dumps(obj, indent=2) + "\n")
    else:
        save_model(path, obj)
    return path
