"""Coarse-grained position histories, chain operators and the decoherence functional.

Regions are unions of grid cells, so the induced projectors are diagonal
0/1 masks and their algebra (idempotence, orthogonality, completeness) is
exact on the grid.  Region labels are 0-based integers; a history label is
a tuple with one region label per history time.
"""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .qstate import GridError, GridSpec, SystemConfig, WaveFunction, evolve

__all__ = [
    "PartitionError",
    "BranchExplosionError",
    "RegionPartition",
    "HistorySpec",
    "DecoherenceMatrix",
    "ConsistencyReport",
    "make_partition",
    "project",
    "chain_apply",
    "decoherence_matrix",
    "dh_probabilities",
    "write_decoherence_csv",
    "write_probability_csv",
]


class PartitionError(ValueError):
    """Region description that is not an exhaustive, exclusive cover."""


class BranchExplosionError(RuntimeError):
    """Too many branches survive pruning; coarser graining is needed."""


@dataclass(frozen=True, eq=False)
class RegionPartition:
    grid: GridSpec
    labels: np.ndarray
    names: tuple[str, ...]

    def __post_init__(self):
        labels = np.array(self.labels, dtype=np.int64)
        if labels.shape != self.grid.shape:
            raise PartitionError(f"label map shape {labels.shape} does not match grid {self.grid.shape}")
        if labels.min() < 0 or labels.max() >= len(self.names):
            raise PartitionError("every cell needs a label in [0, K)")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "names", tuple(self.names))
        masks = tuple(labels == k for k in range(len(self.names)))
        object.__setattr__(self, "_masks", masks)

    @property
    def n_regions(self) -> int:
        return len(self.names)

    def mask(self, label: int) -> np.ndarray:
        if not 0 <= label < self.n_regions:
            raise PartitionError(f"label {label} out of range [0, {self.n_regions})")
        return self._masks[label]

    def label_of(self, positions: np.ndarray) -> np.ndarray:
        """Region label of each position (same half-open cell convention as the grid)."""
        idx = self.grid.cell_index(positions)
        inside = np.all((idx >= 0) & (idx < np.asarray(self.grid.points)), axis=1)
        if not np.all(inside):
            bad = np.asarray(positions).reshape(-1, self.grid.dims)[~inside][0]
            raise PartitionError(f"position {bad} lies outside the box")
        return self.labels[tuple(idx.T)]

    def region_of_name(self, name: str) -> int:
        return self.names.index(name)


def _axis_bins(x: np.ndarray, origin: float, side: float) -> np.ndarray:
    # small slack keeps centres that sit exactly on an edge in the upper region
    return np.floor((x - origin) / side + 1e-9).astype(np.int64)


def make_partition(grid: GridSpec, spec: Mapping[str, Any] | np.ndarray) -> RegionPartition:
    """Build an exhaustive, exclusive labelling of the grid cells.

    Supported descriptions (cells are assigned by their centre, with
    lower-inclusive, upper-exclusive boundaries):

    ``{"kind": "single"}``
        One region covering the box.
    ``{"kind": "tiling", "side": s, "origin": o}``
        Square (or, in 1D, interval) tiles of side ``s`` with an edge at
        ``o`` on every axis.  Names are the integer tile indices, ``"i:j"``.
    ``{"kind": "halfplane", "axis": a, "at": c}``
        Two regions, ``x_a < c`` (label 0) and ``x_a >= c`` (label 1).
    ``{"kind": "intervals", "axis": a, "edges": [...]}``
        Slabs between consecutive interior edges along one axis.
    ``{"kind": "boxes", "boxes": [[lo, hi], ...]}``
        Explicit half-open boxes that must tile the box exactly once.
    ndarray, or ``{"kind": "cells", "labels": ...}``
        Explicit per-cell labels ``0..K-1``.
    """
    if isinstance(spec, np.ndarray):
        spec = {"kind": "cells", "labels": spec}
    kind = spec.get("kind")
    mesh = grid.mesh()
    if kind == "single":
        return RegionPartition(grid, np.zeros(grid.shape, dtype=np.int64), ("all",))
    if kind == "tiling":
        side = float(spec["side"])
        if not side > 0:
            raise PartitionError("tile side must be positive")
        origin = np.broadcast_to(np.asarray(spec.get("origin", 0.0), dtype=float), (grid.dims,))
        bins = [_axis_bins(m, o, side) for m, o in zip(mesh, origin)]
        keys = np.stack([b.ravel() for b in bins], axis=1)
        uniq, inv = np.unique(keys, axis=0, return_inverse=True)
        names = tuple(":".join(str(int(v)) for v in row) for row in uniq)
        return RegionPartition(grid, inv.reshape(grid.shape), names)
    if kind == "halfplane":
        axis = int(spec.get("axis", grid.dims - 1))
        at = float(spec.get("at", 0.0))
        labels = (mesh[axis] >= at - 1e-9 * min(grid.spacing)).astype(np.int64)
        return RegionPartition(grid, labels, (f"x{axis}<{at:g}", f"x{axis}>={at:g}"))
    if kind == "intervals":
        axis = int(spec.get("axis", 0))
        edges = np.asarray(spec["edges"], dtype=float)
        if np.any(np.diff(edges) <= 0):
            raise PartitionError("interval edges must be strictly increasing")
        labels = np.searchsorted(edges, mesh[axis] + 1e-9 * grid.spacing[axis], side="right")
        names = tuple(f"I{k}" for k in range(len(edges) + 1))
        return RegionPartition(grid, labels, names)
    if kind == "boxes":
        count = np.zeros(grid.shape, dtype=np.int64)
        labels = np.full(grid.shape, -1, dtype=np.int64)
        for k, (lo, hi) in enumerate(spec["boxes"]):
            lo = np.broadcast_to(np.asarray(lo, dtype=float), (grid.dims,))
            hi = np.broadcast_to(np.asarray(hi, dtype=float), (grid.dims,))
            inside = np.ones(grid.shape, dtype=bool)
            for m, a, b in zip(mesh, lo, hi):
                inside &= (m >= a) & (m < b)
            count += inside
            labels[inside] = k
        if np.any(count > 1):
            raise PartitionError(f"boxes overlap on {int(np.sum(count > 1))} cells")
        if np.any(count == 0):
            raise PartitionError(f"boxes leave {int(np.sum(count == 0))} cells uncovered")
        return RegionPartition(grid, labels, tuple(f"B{k}" for k in range(len(spec["boxes"]))))
    if kind == "cells":
        labels = np.asarray(spec["labels"])
        if labels.shape != grid.shape:
            raise PartitionError(f"label map shape {labels.shape} does not match grid {grid.shape}")
        if np.any(labels < 0):
            raise PartitionError(f"{int(np.sum(labels < 0))} cells carry no label")
        k = int(labels.max()) + 1
        present = np.unique(labels)
        if present.size != k:
            raise PartitionError("labels must be contiguous 0..K-1")
        return RegionPartition(grid, labels, tuple(str(i) for i in range(k)))
    raise PartitionError(f"unknown partition kind {kind!r}")


@dataclass(frozen=True)
class HistorySpec:
    """History times ``t_1 < ... < t_n`` (all after the state's ``t = 0``) and a partition per time."""

    times: tuple[float, ...]
    partitions: tuple[RegionPartition, ...]

    def __post_init__(self):
        times = tuple(float(t) for t in self.times)
        parts = self.partitions
        if isinstance(parts, RegionPartition):
            parts = (parts,) * len(times)
        parts = tuple(parts)
        if not times:
            raise ValueError("a history needs at least one time")
        if len(parts) != len(times):
            raise ValueError("need one partition per history time")
        if times[0] <= 0 or any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError(f"history times must be positive and strictly increasing: {times}")
        grids = {p.grid for p in parts}
        if len(grids) != 1:
            raise ValueError("all partitions must live on the same grid")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "partitions", parts)

    @property
    def n(self) -> int:
        return len(self.times)

    @property
    def grid(self) -> GridSpec:
        return self.partitions[0].grid

    @property
    def label_shape(self) -> tuple[int, ...]:
        return tuple(p.n_regions for p in self.partitions)

    def labels(self):
        """Every history label (K_1 x ... x K_n of them)."""
        return itertools.product(*(range(k) for k in self.label_shape))

    def names(self, alpha: Sequence[int]) -> tuple[str, ...]:
        return tuple(p.names[a] for p, a in zip(self.partitions, alpha))

    def label_at(self, points: Sequence[Sequence[float]]) -> tuple[int, ...]:
        """History label whose regions contain the given point at each time."""
        return tuple(int(p.label_of(np.asarray(x, dtype=float))[0]) for p, x in zip(self.partitions, points))


def project(psi: WaveFunction, part: RegionPartition, label: int) -> WaveFunction:
    """Zero the amplitudes outside region ``label``; the norm is not restored."""
    if psi.grid != part.grid:
        raise GridError("wavefunction and partition live on different grids")
    return psi.replace(np.where(part.mask(label), psi.amplitudes, 0))


def _propagate(psi: WaveFunction, sys: SystemConfig, t: float, dt: float | None) -> WaveFunction:
    interval = t - psi.t
    if interval <= 0:
        raise ValueError(f"cannot propagate from t={psi.t} to t={t}")
    if sys.is_free or dt is None:
        return evolve(psi, sys, interval, 1)
    steps = int(round(interval / dt))
    if steps < 1 or abs(steps * dt - interval) > 1e-9 * max(1.0, interval):
        raise ValueError(f"interval {interval} is not a multiple of dt={dt}")
    return evolve(psi, sys, dt, steps)


def chain_apply(
    psi0: WaveFunction,
    sys: SystemConfig,
    hist: HistorySpec,
    alpha: Sequence[int],
    dt: float | None = None,
) -> WaveFunction:
    """Branch state ``P^n U ... P^1 U |psi0>`` at ``t_n`` (unnormalised).

    ``dt`` is the Strang step used when a potential is present; free
    propagation is exact and ignores it.
    """
    if len(alpha) != hist.n:
        raise ValueError(f"history label has {len(alpha)} entries, expected {hist.n}")
    psi = psi0
    for t, part, a in zip(hist.times, hist.partitions, alpha):
        psi = project(_propagate(psi, sys, t, dt), part, a)
    return psi


@dataclass
class DecoherenceMatrix:
    """Gram matrix ``D[i, j] = <C_{a_i} psi | C_{a_j} psi>`` over the surviving labels."""

    labels: list[tuple[int, ...]]
    matrix: np.ndarray
    pruned_mass: float = 0.0
    hist: HistorySpec | None = field(default=None, repr=False)
    #: sum of the norms of the pruned branches; bounds the sum-rule defect
    #: by ``2 s + s**2`` even when pruned and kept branches interfere
    pruned_amplitude: float = 0.0

    def __post_init__(self):
        self.index = {a: i for i, a in enumerate(self.labels)}

    @property
    def diagonal(self) -> np.ndarray:
        return self.matrix.diagonal().real.copy()

    def __getitem__(self, pair):
        a, b = pair
        return self.matrix[self.index[tuple(a)], self.index[tuple(b)]]

    def normalized_offdiagonal(self) -> np.ndarray:
        d = np.sqrt(np.clip(self.diagonal, 0, None))
        denom = np.outer(d, d)
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(denom > 0, np.abs(self.matrix) / denom, 0.0)
        np.fill_diagonal(r, 0.0)
        return r

    def hermiticity_error(self) -> float:
        return float(np.max(np.abs(self.matrix - self.matrix.conj().T))) if self.labels else 0.0

    def total(self) -> complex:
        return complex(self.matrix.sum())


def decoherence_matrix(
    psi0: WaveFunction,
    sys: SystemConfig,
    hist: HistorySpec,
    prune: float = 1e-8,
    max_branches: int = 10_000,
    dt: float | None = None,
) -> DecoherenceMatrix:
    """Decoherence functional by branch-tree traversal.

    The state is propagated to each history time and split by the region
    projectors; branches whose squared norm drops below ``prune`` are
    discarded and their weight is accumulated in ``pruned_mass``.  Final
    branches are supported inside their last region only, so two branches
    ending in different regions are exactly orthogonal and only the
    in-region amplitudes are kept.
    """
    if prune < 0:
        raise ValueError("prune threshold must be non-negative")
    dv = psi0.grid.cell_volume
    finals: list[tuple[tuple[int, ...], np.ndarray]] = []
    pruned = 0.0
    pruned_amp = 0.0
    live = 0

    def descend(psi: WaveFunction, prefix: tuple[int, ...]):
        nonlocal pruned, pruned_amp, live
        k = len(prefix)
        part = hist.partitions[k]
        evolved = _propagate(psi, sys, hist.times[k], dt)
        a = evolved.amplitudes
        weights = np.bincount(part.labels.ravel(), weights=np.abs(a.ravel()) ** 2, minlength=part.n_regions) * dv
        for label in range(part.n_regions):
            w = weights[label]
            if w < prune or w == 0.0:
                pruned += w
                pruned_amp += np.sqrt(w)
                continue
            live += 1
            if live > max_branches:
                raise BranchExplosionError(
                    f"more than {max_branches} branches survive pruning at threshold {prune:g}; "
                    "use coarser regions, fewer times or a larger prune threshold"
                )
            mask = part.mask(label)
            if k + 1 == hist.n:
                finals.append((prefix + (label,), a[mask]))
            else:
                descend(evolved.replace(np.where(mask, a, 0)), prefix + (label,))

    descend(psi0, ())
    finals.sort(key=lambda item: item[0])
    labels = [lab for lab, _ in finals]
    n = len(finals)
    D = np.zeros((n, n), dtype=np.complex128)
    by_region: dict[int, list[int]] = {}
    for i, (lab, _) in enumerate(finals):
        by_region.setdefault(lab[-1], []).append(i)
    for idx in by_region.values():
        block = np.stack([finals[i][1] for i in idx])
        G = (block.conj() @ block.T) * dv
        D[np.ix_(idx, idx)] = G
    return DecoherenceMatrix(labels, D, float(pruned), hist, float(pruned_amp))


@dataclass
class ConsistencyReport:
    consistent: bool
    eps: float
    max_normalized_offdiagonal: float
    worst_pair: tuple[tuple[int, ...], tuple[int, ...]] | None
    min_weight: float = 0.0


def dh_probabilities(
    D: DecoherenceMatrix, eps_consistency: float = 0.05, min_weight: float = 0.0
) -> tuple[dict[tuple[int, ...], float], ConsistencyReport]:
    """Diagonal probabilities plus the medium-decoherence consistency flag.

    Probabilities are returned whether or not the set is consistent.  Pairs
    in which either history weighs less than ``min_weight`` are left out of
    the consistency test (``0`` tests every pair).
    """
    p = D.diagonal
    probs = {a: float(v) for a, v in zip(D.labels, p)}
    r = D.normalized_offdiagonal()
    if min_weight > 0 and r.size:
        heavy = p >= min_weight
        r = np.where(np.outer(heavy, heavy), r, 0.0)
    if r.size and r.max() > 0:
        i, j = np.unravel_index(np.argmax(r), r.shape)
        worst, pair = float(r[i, j]), (D.labels[i], D.labels[j])
    else:
        worst, pair = 0.0, None
    return probs, ConsistencyReport(worst < eps_consistency, eps_consistency, worst, pair, min_weight)


def _fmt(x: float) -> str:
    return f"{x:.12g}"


def label_str(alpha: Sequence[int]) -> str:
    return " ".join(str(a) for a in alpha)


def write_decoherence_csv(path, D: DecoherenceMatrix) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["alpha_prime", "alpha", "re", "im"])
        for i, a in enumerate(D.labels):
            for j, b in enumerate(D.labels):
                v = D.matrix[i, j]
                if v != 0:
                    w.writerow([label_str(a), label_str(b), _fmt(v.real), _fmt(v.imag)])


def write_probability_csv(path, probs: Mapping[tuple[int, ...], float], consistent: bool, hist: HistorySpec | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["alpha", "regions", "p", "consistent"])
        for a in sorted(probs):
            regions = ";".join(hist.names(a)) if hist is not None else ""
            w.writerow([label_str(a), regions, _fmt(probs[a]), int(consistent)])
