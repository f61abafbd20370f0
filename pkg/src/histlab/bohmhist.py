"""Bohmian probabilities for coarse-grained histories and their comparison with decoherent histories."""
from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .bohm import TrajectoryEnsemble
from .histories import HistorySpec, label_str

__all__ = [
    "LabelSpaceError",
    "BohmHistogram",
    "ComparisonReport",
    "classify_trajectory",
    "classify_ensemble",
    "bm_probabilities",
    "initial_cell",
    "compare",
    "write_bm_csv",
    "write_comparison",
    "high_probability_sequences",
]


class LabelSpaceError(ValueError):
    """The two probability tables do not describe the same set of histories."""


def classify_trajectory(positions: np.ndarray, hist: HistorySpec) -> tuple[int, ...]:
    """History label of one trajectory from its positions at ``t_1 .. t_n``."""
    positions = np.asarray(positions, dtype=float).reshape(hist.n, -1)
    return tuple(int(p.label_of(x)[0]) for p, x in zip(hist.partitions, positions))


def classify_ensemble(ens: TrajectoryEnsemble, hist: HistorySpec) -> np.ndarray:
    """Labels for every trajectory, shape ``(N, n)``."""
    if len(ens.times) != hist.n or any(
        abs(a - b) > 1e-9 * max(1.0, abs(b)) for a, b in zip(ens.times, hist.times)
    ):
        raise ValueError(f"ensemble stored at {ens.times}, history needs {hist.times}")
    if ens.n == 0:
        return np.zeros((0, hist.n), dtype=np.int64)
    return np.stack([p.label_of(ens.positions[k]) for k, p in enumerate(hist.partitions)], axis=1)


@dataclass
class BohmHistogram:
    """Monte Carlo estimate of the Bohmian history probabilities."""

    counts: dict[tuple[int, ...], int]
    n: int
    seed: int | None
    excluded: int
    label_shape: tuple[int, ...]
    hist: HistorySpec | None = field(default=None, repr=False)

    def p(self, alpha) -> float:
        return self.counts.get(tuple(alpha), 0) / self.n

    def stderr(self, alpha) -> float:
        p = self.p(alpha)
        return math.sqrt(p * (1 - p) / self.n)

    @property
    def probabilities(self) -> dict[tuple[int, ...], float]:
        return {a: c / self.n for a, c in self.counts.items()}

    def merge(self, k: int, groups: Mapping[int, int]) -> "BohmHistogram":
        """Coarse-grain time slot ``k`` by relabelling regions through ``groups``."""
        merged: Counter = Counter()
        for a, c in self.counts.items():
            b = list(a)
            b[k] = groups.get(a[k], a[k])
            merged[tuple(b)] += c
        shape = list(self.label_shape)
        shape[k] = max([shape[k] - 1, *groups.values()]) + 1
        return BohmHistogram(dict(merged), self.n, self.seed, self.excluded, tuple(shape))


def bm_probabilities(ens: TrajectoryEnsemble, hist: HistorySpec) -> BohmHistogram:
    """Histogram of trajectory labels; node-rescued trajectories are excluded and counted apart."""
    if ens.n == 0:
        raise ValueError("empty ensemble: Bohmian probabilities need at least one trajectory")
    labels = classify_ensemble(ens, hist)
    keep = ~ens.rescued
    n = int(keep.sum())
    if n == 0:
        raise ValueError("every trajectory was node-rescued")
    rows = labels[keep]
    uniq, counts = np.unique(rows, axis=0, return_counts=True)
    table = {tuple(int(v) for v in u): int(c) for u, c in zip(uniq, counts)}
    return BohmHistogram(table, n, ens.seed, int(ens.n - n), hist.label_shape, hist)


def initial_cell(ens: TrajectoryEnsemble, hist: HistorySpec, alpha: Sequence[int]) -> np.ndarray:
    """Initial points of the trajectories that realise ``alpha``.

    This is a sample of the set of starting positions singled out by the
    history; the set depends on the initial state, not only on the regions.
    """
    labels = classify_ensemble(ens, hist)
    hit = np.all(labels == np.asarray(alpha), axis=1) & ~ens.rescued
    return ens.initial[hit]


@dataclass
class ComparisonRow:
    alpha: tuple[int, ...]
    p_dh: float
    p_bm: float
    mc_err: float

    @property
    def diff(self) -> float:
        return abs(self.p_dh - self.p_bm)

    @property
    def sigmas(self) -> float | None:
        return self.diff / self.mc_err if self.mc_err > 0 else None


@dataclass
class ComparisonReport:
    rows: list[ComparisonRow]
    consistent: bool
    verdict: str
    n_sigma: float
    abs_tol: float

    def row(self, alpha) -> ComparisonRow:
        alpha = tuple(alpha)
        for r in self.rows:
            if r.alpha == alpha:
                return r
        raise KeyError(alpha)

    def to_dict(self, hist: HistorySpec | None = None, headline: Mapping[str, Sequence[int]] | None = None) -> dict:
        def row_dict(r):
            d = {
                "alpha": list(r.alpha),
                "p_dh": r.p_dh,
                "p_bm": r.p_bm,
                "mc_err": r.mc_err,
                "sigmas": r.sigmas,
                "disagrees": _disagrees(r, self.n_sigma, self.abs_tol),
            }
            if hist is not None:
                d["regions"] = list(hist.names(r.alpha))
            return d

        out = {
            "verdict": self.verdict,
            "dh_consistent": self.consistent,
            "thresholds": {"n_sigma": self.n_sigma, "abs": self.abs_tol},
            "rows": [row_dict(r) for r in self.rows],
        }
        if headline:
            out["headline"] = {}
            for name, alpha in headline.items():
                alpha = tuple(alpha)
                try:
                    r = self.row(alpha)
                    out["headline"][name] = {"alpha": list(alpha), "p_dh": r.p_dh, "p_bm": r.p_bm}
                except KeyError:
                    out["headline"][name] = {"alpha": list(alpha), "p_dh": 0.0, "p_bm": 0.0}
        return out


def _disagrees(r: ComparisonRow, n_sigma: float, abs_tol: float) -> bool:
    s = r.sigmas
    return s is not None and s > n_sigma and r.diff > abs_tol


def compare(
    dh: Mapping[tuple[int, ...], float],
    consistent: bool,
    bm: BohmHistogram,
    label_shape: tuple[int, ...] | None = None,
    n_sigma: float = 5.0,
    abs_tol: float = 0.05,
) -> ComparisonReport:
    """Per-history differences between the two probability tables.

    Histories missing from one table count as probability zero there.  The
    verdict is ``"disagree"`` when some history differs by more than
    ``n_sigma`` Monte Carlo standard errors *and* by more than ``abs_tol``.
    """
    if label_shape is not None and tuple(label_shape) != tuple(bm.label_shape):
        raise LabelSpaceError(f"label spaces differ: {tuple(label_shape)} vs {tuple(bm.label_shape)}")
    for a in dh:
        if len(a) != len(bm.label_shape) or any(not 0 <= x < k for x, k in zip(a, bm.label_shape)):
            raise LabelSpaceError(f"history {a} is not in the Bohmian label space {bm.label_shape}")
    labels = sorted(set(dh) | set(bm.counts))
    rows = [ComparisonRow(a, float(dh.get(a, 0.0)), bm.p(a), bm.stderr(a)) for a in labels]
    verdict = "disagree" if any(_disagrees(r, n_sigma, abs_tol) for r in rows) else "agree"
    return ComparisonReport(rows, bool(consistent), verdict, n_sigma, abs_tol)


def _fmt(x) -> str:
    return "" if x is None else f"{x:.12g}"


def write_bm_csv(path, bm: BohmHistogram) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["alpha", "regions", "count", "p", "mc_err"])
        for a in sorted(bm.counts):
            regions = ";".join(bm.hist.names(a)) if bm.hist is not None else ""
            w.writerow([label_str(a), regions, bm.counts[a], _fmt(bm.p(a)), _fmt(bm.stderr(a))])


def write_comparison(json_path, csv_path, report: ComparisonReport, hist=None, headline=None, extra=None) -> None:
    data = report.to_dict(hist, headline)
    if extra:
        data.update(extra)
    with open(json_path, "w") as fh:
        json.dump(_round_floats(data), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["alpha", "p_dh", "p_bm", "mc_err", "sigmas", "verdict"])
        for r in report.rows:
            w.writerow(
                [
                    label_str(r.alpha),
                    _fmt(r.p_dh),
                    _fmt(r.p_bm),
                    _fmt(r.mc_err),
                    _fmt(r.sigmas),
                    "disagree" if _disagrees(r, report.n_sigma, report.abs_tol) else "agree",
                ]
            )


def _round_floats(obj):
    if isinstance(obj, float):
        return float(f"{obj:.12g}")
    if isinstance(obj, dict):
        return {k: _round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v) for v in obj]
    return obj


def high_probability_sequences(
    probs: Mapping[tuple[int, ...], float], threshold: float = 0.05
) -> list[tuple[tuple[int, ...], float]]:
    """Histories above ``threshold``, most probable first."""
    return sorted(((a, p) for a, p in probs.items() if p > threshold), key=lambda ap: (-ap[1], ap[0]))
