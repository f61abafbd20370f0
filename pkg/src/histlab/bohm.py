"""Bohmian velocity fields, quantum-equilibrium sampling and trajectory ensembles."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import qstate
from .qstate import GridSpec, SystemConfig, WaveFunction, position_density

__all__ = [
    "OK",
    "NODE_RESCUED",
    "ESCAPED",
    "StreamGapError",
    "VelocityField",
    "TrajectoryEnsemble",
    "velocity_field",
    "sample_initial",
    "advance_ensemble",
    "continuity_residual",
    "transport_check",
    "write_trajectories_csv",
    "ensemble_summary",
    "sign_crossings",
]

# status bits
OK = 0
NODE_RESCUED = 1
ESCAPED = 2

DEFAULT_EPS_NODE = 1e-12

# step refinement thresholds
STIFF_SPREAD = 0.1
STIFF_LIPSCHITZ = 0.5
MAX_HALVINGS = 8


class StreamGapError(ValueError):
    """The wavefunction stream does not cover the requested times at spacing dt."""


@dataclass(frozen=True)
class VelocityField:
    """Guidance velocity on the grid.

    ``v`` has shape ``(dims, *grid.shape)``.  The density ``rho`` and the
    current ``j = rho * v`` are kept as well: both are smooth where ``v``
    is not (next to near-nodes), so trajectories interpolate them and
    divide at the particle position.
    """

    grid: GridSpec
    v: np.ndarray
    t: float
    flagged: np.ndarray
    rho: np.ndarray | None = None
    j: np.ndarray | None = None
    floor: float = 0.0


def _deriv_wavenumbers(grid: GridSpec) -> list[np.ndarray]:
    # the Nyquist mode has no odd derivative on a periodic grid
    out = []
    for k, n in zip(grid.wavenumbers(), grid.points):
        k = k.copy()
        k[n // 2] = 0.0
        out.append(k)
    return out


def _gradient(psi: WaveFunction) -> list[np.ndarray]:
    spec = qstate._fft(psi.amplitudes)
    out = []
    for axis, k in enumerate(_deriv_wavenumbers(psi.grid)):
        shape = [1] * psi.grid.dims
        shape[axis] = -1
        out.append(qstate._ifft(1j * k.reshape(shape) * spec))
    return out


def velocity_field(psi: WaveFunction, sys: SystemConfig, eps_node: float | None = None) -> VelocityField:
    """Guidance velocity ``(hbar/m) Im(grad psi / psi)`` with a spectral gradient.

    ``eps_node`` is relative to the peak density; cells below it are
    flagged and carry zero velocity.
    """
    eps = DEFAULT_EPS_NODE if eps_node is None else eps_node
    if not eps > 0:
        raise ValueError("eps_node must be positive")
    a = psi.amplitudes
    rho = np.abs(a) ** 2
    floor = eps * rho.max()
    flagged = rho < floor
    safe = np.where(flagged, 1.0, rho)
    j = np.stack([(a.conj() * g).imag for g in _gradient(psi)]) * (sys.hbar / sys.mass)
    v = np.where(flagged, 0.0, j / safe)
    flagged.setflags(write=False)
    return VelocityField(psi.grid, v, psi.t, flagged, rho, j, floor)


@dataclass
class TrajectoryEnsemble:
    """Initial points and the positions stored at the record times.

    ``positions`` has shape ``(len(times), N, dims)``.  ``status`` holds
    bit flags: ``NODE_RESCUED`` and ``ESCAPED``.  ``paths`` (optional) holds
    every propagator step, shape ``(steps + 1, N, dims)``.
    """

    grid: GridSpec
    seed: int | None
    initial: np.ndarray
    times: tuple[float, ...] = ()
    positions: np.ndarray | None = None
    status: np.ndarray | None = None
    paths: np.ndarray | None = field(default=None, repr=False)
    path_times: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.initial = np.asarray(self.initial, dtype=float).reshape(-1, self.grid.dims)
        if self.status is None:
            self.status = np.zeros(len(self.initial), dtype=np.int8)
        if self.positions is None:
            self.positions = np.zeros((0, len(self.initial), self.grid.dims))

    @property
    def n(self) -> int:
        return len(self.initial)

    def at(self, t: float) -> np.ndarray:
        """Positions at ``t`` (``0`` or one of the record times)."""
        if t == 0:
            return self.initial
        for k, tk in enumerate(self.times):
            if abs(tk - t) <= 1e-9 * max(1.0, abs(t)):
                return self.positions[k]
        raise KeyError(f"no stored positions at t={t}")

    @property
    def rescued(self) -> np.ndarray:
        return (self.status & NODE_RESCUED) != 0

    @property
    def escaped(self) -> np.ndarray:
        return (self.status & ESCAPED) != 0


def sample_initial(psi: WaveFunction, N: int, seed: int) -> TrajectoryEnsemble:
    """Draw ``N`` points from ``|psi|^2``: inverse CDF over cells, then uniform jitter inside the cell."""
    if N < 0:
        raise ValueError("N must be non-negative")
    grid = psi.grid
    rng = np.random.default_rng(seed)
    cdf = np.cumsum(position_density(psi).ravel())
    u = rng.random(N) * cdf[-1]
    flat = np.minimum(np.searchsorted(cdf, u, side="right"), cdf.size - 1)
    idx = np.stack(np.unravel_index(flat, grid.shape), axis=1)
    jitter = rng.random((N, grid.dims)) - 0.5
    pts = np.asarray(grid.lower) + (idx + jitter) * np.asarray(grid.spacing)
    return TrajectoryEnsemble(grid, seed, pts)


class _Interp:
    """Velocity at arbitrary points, a fraction ``w`` of the way from frame ``va`` to ``vb``.

    Density and current are interpolated multilinearly (periodically) in
    space and linearly in time, and ``v = j / rho`` is formed at the point.
    Both interpolations are linear, so the frames are sampled at the points
    and mixed there instead of blending whole grids.
    """

    def __init__(self, va: VelocityField, vb: VelocityField | None = None, w: float = 0.0):
        if vb is None or w == 0:
            vb, w = va, 0.0
        elif w == 1:
            va, w = vb, 0.0
        self.va, self.vb, self.w = va, vb, float(w)
        self.grid = va.grid
        self.lo = np.asarray(self.grid.lower)
        self.h = np.asarray(self.grid.spacing)
        self.n = np.asarray(self.grid.points)
        self.floor = max(va.floor, vb.floor)

    def _gather(self, idx):
        a = self.va
        vals = np.concatenate([a.rho[tuple(idx)][None], a.j[(slice(None), *idx)]])
        if self.w:
            b = self.vb
            other = np.concatenate([b.rho[tuple(idx)][None], b.j[(slice(None), *idx)]])
            vals = (1 - self.w) * vals + self.w * other
        return vals

    def __call__(self, pos: np.ndarray, lipschitz: bool = False):
        """Velocity and flagged mask at ``pos``; with ``lipschitz`` also the row-sum norm of dv/dx."""
        s = (pos - self.lo) / self.h
        i0 = np.floor(s).astype(np.int64)
        f = s - i0
        dims = self.grid.dims
        acc = np.zeros((dims + 1, len(pos)))
        grad = np.zeros((dims, dims + 1, len(pos))) if lipschitz else None
        for corner in range(1 << dims):
            fac = []
            idx = []
            for d in range(dims):
                bit = (corner >> d) & 1
                fac.append(f[:, d] if bit else 1 - f[:, d])
                idx.append((i0[:, d] + bit) % self.n[d])
            vals = self._gather(idx)
            acc += np.prod(fac, axis=0) * vals
            if lipschitz:
                for d in range(dims):
                    sign = 1.0 if (corner >> d) & 1 else -1.0
                    others = [fac[e] for e in range(dims) if e != d]
                    wd = sign / self.h[d] * (np.prod(others, axis=0) if others else 1.0)
                    grad[d] += wd * vals
        cell = tuple((np.floor(s + 0.5).astype(np.int64) % self.n).T)
        rho = acc[0]
        flagged = self.va.flagged[cell] | (rho < self.floor)
        if self.w:
            flagged |= self.vb.flagged[cell]
        safe = np.where(flagged, 1.0, rho)
        v = np.where(flagged, 0.0, acc[1:] / safe)
        if not lipschitz:
            return v.T, flagged
        # d(j/rho)/dx_d = (dj/dx_d - v drho/dx_d) / rho
        jac = (grad[:, 1:] - v[None] * grad[:, :1]) / safe
        lip = np.where(flagged, 0.0, np.abs(jac).sum(axis=0).max(axis=0))
        return v.T, flagged, lip


def _rk4(pos, h, f0, fm, f1):
    """Classical RK4 step; also returns a per-trajectory stiffness index (> 1 means stiff)."""
    k1, n1, lip = f0(pos, lipschitz=True)
    k2, n2 = fm(pos + 0.5 * h * k1)
    k3, n3 = fm(pos + 0.5 * h * k2)
    k4, n4 = f1(pos + h * k3)
    spread = h * np.max(np.abs(np.stack([k2, k3, k4]) - k1), axis=(0, 2))
    stiffness = np.maximum(spread / (STIFF_SPREAD * f0.h.min()), h * lip / STIFF_LIPSCHITZ)
    return pos + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4), n1 | n2 | n3 | n4, stiffness


def _adaptive(pos, h, va, vb, w0, w1, depth):
    """RK4 over the time fraction ``[w0, w1]`` of a frame interval, halved where stiff."""
    f = [_Interp(va, vb, w) for w in (w0, 0.5 * (w0 + w1), w1)]
    new, hit, stiffness = _rk4(pos, h, *f)
    stiff = np.flatnonzero((stiffness > 1) & ~hit)
    if depth and stiff.size:
        wm = 0.5 * (w0 + w1)
        mid, hit1 = _adaptive(pos[stiff], h / 2, va, vb, w0, wm, depth - 1)
        end, hit2 = _adaptive(mid, h / 2, va, vb, wm, w1, depth - 1)
        new[stiff] = end
        hit[stiff] = hit1 | hit2
    return new, hit


def _step(pos, h, va: VelocityField, vb: VelocityField, status):
    """One RK4 step with the field linear in time between two frames.

    Stiff steps (stages disagreeing by more than ``STIFF_SPREAD`` cells, or
    ``h |dv/dx|`` above ``STIFF_LIPSCHITZ``) are halved, at most
    ``MAX_HALVINGS`` times; below that bound a one-step map keeps 1D
    trajectories ordered.  Trajectories whose stages touch a flagged cell
    are redone as four quarter steps; any that still touch one are frozen
    for the rest of the step.  Those are marked as node-rescued.
    """
    new, hit = _adaptive(pos, h, va, vb, 0.0, 1.0, MAX_HALVINGS)
    if np.any(hit):
        sel = np.flatnonzero(hit)
        status[sel] |= NODE_RESCUED
        p = pos[sel].copy()
        alive = np.ones(len(sel), dtype=bool)
        for q in range(4):
            fa, fm, fb = (_Interp(va, vb, w) for w in (q / 4, (q + 0.5) / 4, (q + 1) / 4))
            trial, qhit, _ = _rk4(p[alive], h / 4, fa, fm, fb)
            keep = np.flatnonzero(alive)
            ok = ~qhit
            p[keep[ok]] = trial[ok]
            alive[keep[qhit]] = False
        new[sel] = p
    return new


def _wrap(pos: np.ndarray, grid: GridSpec, status: np.ndarray) -> np.ndarray:
    lo = np.asarray(grid.lower) - 0.5 * np.asarray(grid.spacing)
    L = np.asarray(grid.extent)
    out = (pos < lo) | (pos >= lo + L)
    bad = np.any(out, axis=1)
    if np.any(bad):
        status[bad] |= ESCAPED
        pos = lo + np.mod(pos - lo, L)
    return pos


def advance_ensemble(
    ens: TrajectoryEnsemble,
    psi_stream: Iterable[WaveFunction],
    sys: SystemConfig,
    dt: float,
    record_times: Sequence[float],
    eps_node: float | None = None,
    keep_paths: bool = False,
) -> TrajectoryEnsemble:
    """Integrate the ensemble through ``psi_stream`` and store positions at ``record_times``.

    ``psi_stream`` yields the wavefunction at ``0, dt, 2dt, ...``.  The
    velocity is interpolated multilinearly in space and linearly in time
    between consecutive frames; each frame advances with one RK4 step.
    Record times must be whole multiples of ``dt``.
    """
    record_times = tuple(float(t) for t in record_times)
    if any(b <= a for a, b in zip(record_times, record_times[1:])) or (record_times and record_times[0] <= 0):
        raise ValueError("record times must be positive and strictly increasing")
    steps_at = []
    for t in record_times:
        k = int(round(t / dt))
        if abs(k * dt - t) > 1e-9 * max(1.0, t):
            raise ValueError(f"record time {t} is not a multiple of dt={dt}")
        steps_at.append(k)
    total = steps_at[-1] if steps_at else 0
    grid = ens.grid
    pos = ens.initial.copy()
    status = ens.status.copy()
    stored = np.zeros((len(record_times), ens.n, grid.dims))
    paths = [pos.copy()] if keep_paths else None

    it = iter(psi_stream)
    prev = None
    step = 0
    record = dict(zip(steps_at, range(len(steps_at))))
    while step < total or prev is None:
        try:
            psi = next(it)
        except StopIteration:
            raise StreamGapError(f"stream ended at step {step}, need {total} steps of dt={dt}") from None
        expected = step * dt if prev is None else (step + 1) * dt
        if abs(psi.t - expected) > 1e-9 * max(1.0, expected):
            raise StreamGapError(f"stream frame at t={psi.t}, expected t={expected}")
        vf = velocity_field(psi, sys, eps_node)
        if prev is not None:
            if ens.n:
                pos = _wrap(_step(pos, dt, prev, vf, status), grid, status)
            step += 1
            if keep_paths:
                paths.append(pos.copy())
            if step in record:
                stored[record[step]] = pos
        prev = vf
        if total == 0:
            break
    return TrajectoryEnsemble(
        grid,
        ens.seed,
        ens.initial,
        record_times,
        stored,
        status,
        np.stack(paths) if keep_paths else None,
        dt * np.arange(total + 1) if keep_paths else None,
    )


def _find_frame(frames: Sequence[WaveFunction], t: float) -> int:
    for i, f in enumerate(frames):
        if abs(f.t - t) <= 1e-9 * max(1.0, abs(t)):
            return i
    raise KeyError(f"no frame at t={t}")


def _divergence_of_current(psi: WaveFunction, sys: SystemConfig) -> np.ndarray:
    grads = _gradient(psi)
    div = np.zeros(psi.grid.shape)
    for axis, (g, k) in enumerate(zip(grads, _deriv_wavenumbers(psi.grid))):
        j = sys.hbar / sys.mass * (psi.amplitudes.conj() * g).imag
        shape = [1] * psi.grid.dims
        shape[axis] = -1
        div += qstate._ifft(1j * k.reshape(shape) * qstate._fft(j)).real
    return div


def continuity_residual(
    psi_stream: Sequence[WaveFunction], sys: SystemConfig, t: float, eps_node: float | None = None
) -> float:
    """Relative L1 residual of ``d(rho)/dt + div(rho v) = 0`` at ``t``.

    The time derivative is a central difference over the neighbouring
    frames; the current ``rho v = (hbar/m) Im(psi* grad psi)`` and its
    divergence are spectral.  The residual is summed over unflagged cells and
    divided by the L1 norm of ``d(rho)/dt``; when that norm is below
    ``1e-8`` (a stationary state) the unnormalised residual is returned.
    """
    frames = list(psi_stream)
    i = _find_frame(frames, t)
    if i == 0 or i == len(frames) - 1:
        raise ValueError("continuity residual needs a frame on each side of t")
    before, here, after = frames[i - 1], frames[i], frames[i + 1]
    h1, h2 = here.t - before.t, after.t - here.t
    if abs(h1 - h2) > 1e-9 * max(h1, h2):
        raise ValueError("frames around t must be evenly spaced")
    drho = (position_density(after) - position_density(before)) / (h1 + h2)
    div = _divergence_of_current(here, sys)
    rho = position_density(here)
    eps = DEFAULT_EPS_NODE if eps_node is None else eps_node
    ok = rho >= eps * rho.max()
    dv = here.grid.cell_volume
    res = np.abs(drho + div)[ok].sum() * dv
    scale = np.abs(drho)[ok].sum() * dv
    return float(res / scale) if scale > 1e-8 else float(res)


def _binned(grid: GridSpec, values: np.ndarray, bins: int) -> np.ndarray:
    shape = []
    for n in grid.points:
        if n % bins:
            raise ValueError(f"{bins} bins do not divide {n} points")
        shape += [bins, n // bins]
    return values.reshape(shape).sum(axis=tuple(range(1, 2 * grid.dims, 2)))


def transport_check(
    ens: TrajectoryEnsemble, psi_stream: Sequence[WaveFunction] | WaveFunction, t: float, bins: int = 16
) -> float:
    """Total-variation distance between the ensemble and ``|psi(t)|^2`` on a coarse binning."""
    if isinstance(psi_stream, WaveFunction):
        psi = psi_stream
    else:
        frames = list(psi_stream)
        psi = frames[_find_frame(frames, t)]
    grid = ens.grid
    pos = ens.at(t)
    if len(pos) == 0:
        raise ValueError("empty ensemble")
    mass = _binned(grid, position_density(psi) * grid.cell_volume, bins)
    mass /= mass.sum()
    idx = grid.cell_index(pos) % np.asarray(grid.points)
    b = idx // (np.asarray(grid.points) // bins)
    counts = np.zeros((bins,) * grid.dims)
    np.add.at(counts, tuple(b.T), 1.0)
    return float(0.5 * np.abs(counts / len(pos) - mass).sum())


_STATUS_NAMES = {0: "ok", NODE_RESCUED: "node-rescued", ESCAPED: "escaped", NODE_RESCUED | ESCAPED: "node-rescued+escaped"}


def write_trajectories_csv(path, ens: TrajectoryEnsemble, limit: int | None = None) -> None:
    """One row per (trajectory, stored time): id, t, coordinates, status."""
    n = ens.n if limit is None else min(limit, ens.n)
    coords = ["x", "y"][: ens.grid.dims]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "t", *coords, "status"])
        series = [(0.0, ens.initial)] + list(zip(ens.times, ens.positions))
        for i in range(n):
            st = _STATUS_NAMES[int(ens.status[i])]
            for t, pts in series:
                w.writerow([i, f"{t:.12g}", *(f"{c:.12g}" for c in pts[i]), st])


def ensemble_summary(ens: TrajectoryEnsemble, crossings: int | None = None) -> dict:
    out = {
        "N": ens.n,
        "seed": ens.seed,
        "node_rescued": int(ens.rescued.sum()),
        "escaped": int(ens.escaped.sum()),
    }
    if crossings is not None:
        out["crossings"] = int(crossings)
    return out


def sign_crossings(ens: TrajectoryEnsemble, axis: int = -1, exclude_rescued: bool = True, exclude_escaped: bool = True) -> int:
    """Trajectories whose coordinate along ``axis`` changes sign between stored times.

    Dense paths are used when the ensemble kept them.  Escaped trajectories
    change sign by wrapping through the box edge, not by crossing zero, and
    are left out by default.
    """
    series = np.concatenate([ens.initial[None], ens.positions])[..., axis]
    if ens.paths is not None:
        series = ens.paths[..., axis]
    s = np.sign(series)
    crossed = np.any(s != s[0], axis=0)
    if exclude_rescued:
        crossed &= ~ens.rescued
    if exclude_escaped:
        crossed &= ~ens.escaped
    return int(crossed.sum())
