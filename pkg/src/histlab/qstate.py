"""Wavefunctions on a periodic grid and their split-step propagation.

Units are whatever the caller picks; the defaults are hbar = m = 1.  Grids
are centred on the origin, so the coordinate along an axis of extent ``L``
sampled with ``n`` points is ``-L/2 + i*L/n``.  That choice makes the grid
exactly symmetric under ``y -> -y`` (modulo the periodic wrap), which the
mirror-packet experiments rely on.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Iterator, Sequence

import numpy as np
import scipy.fft as sfft

__all__ = [
    "GridSpec",
    "SystemConfig",
    "WaveFunction",
    "GridError",
    "SuperpositionError",
    "init_gaussian",
    "superpose",
    "evolve",
    "evolve_stream",
    "position_density",
    "expectation_position",
    "expectation_momentum",
    "save_field",
    "load_field",
    "write_field_csv",
]

#: FFT worker count used by every transform in the package.
FFT_WORKERS = 1


class GridError(ValueError):
    """Raised when a grid, state or potential violates a precondition."""


class SuperpositionError(ValueError):
    """Raised when a linear combination cancels to (numerically) nothing."""


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class GridSpec:
    """Uniform periodic grid in 1 or 2 dimensions, centred on the origin."""

    extent: tuple[float, ...]
    points: tuple[int, ...]

    def __post_init__(self):
        extent = tuple(float(e) for e in np.atleast_1d(self.extent))
        points = tuple(int(p) for p in np.atleast_1d(self.points))
        object.__setattr__(self, "extent", extent)
        object.__setattr__(self, "points", points)
        if len(extent) != len(points) or len(points) not in (1, 2):
            raise GridError(f"grid must be 1D or 2D, got extent={extent}, points={points}")
        for L, n in zip(extent, points):
            if not (L > 0 and np.isfinite(L)):
                raise GridError(f"extent must be positive, got {L}")
            if n < 16 or not _is_pow2(n):
                raise GridError(f"points per axis must be a power of two >= 16, got {n}")

    @property
    def dims(self) -> int:
        return len(self.points)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.points

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(L / n for L, n in zip(self.extent, self.points))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def lower(self) -> tuple[float, ...]:
        return tuple(-L / 2 for L in self.extent)

    @property
    def upper(self) -> tuple[float, ...]:
        return tuple(L / 2 for L in self.extent)

    def axes(self) -> tuple[np.ndarray, ...]:
        """1D coordinate arrays, one per axis."""
        return tuple(lo + d * np.arange(n) for lo, d, n in zip(self.lower, self.spacing, self.points))

    def mesh(self) -> tuple[np.ndarray, ...]:
        return tuple(np.meshgrid(*self.axes(), indexing="ij"))

    def wavenumbers(self) -> tuple[np.ndarray, ...]:
        """Angular wavenumbers in FFT order, one array per axis."""
        return tuple(2 * np.pi * sfft.fftfreq(n, d) for n, d in zip(self.points, self.spacing))

    def cell_index(self, positions: np.ndarray) -> np.ndarray:
        """Index of the cell containing each position, shape ``(N, dims)``.

        A cell is the half-open box ``[x_i - h/2, x_i + h/2)`` around grid
        point ``x_i``.  Indices are not wrapped; callers decide what an
        out-of-box position means.
        """
        pos = np.asarray(positions, dtype=float).reshape(-1, self.dims)
        lo = np.asarray(self.lower)
        h = np.asarray(self.spacing)
        return np.floor((pos - lo) / h + 0.5).astype(np.int64)

    def contains(self, positions: np.ndarray) -> np.ndarray:
        """True where a position lies inside ``[lower - h/2, upper - h/2)``."""
        idx = self.cell_index(positions)
        return np.all((idx >= 0) & (idx < np.asarray(self.points)), axis=1)

    def to_dict(self) -> dict:
        return {"extent": list(self.extent), "points": list(self.points)}


@dataclass(frozen=True)
class SystemConfig:
    """Particle mass, hbar and the potential (``None`` means free)."""

    mass: float = 1.0
    hbar: float = 1.0
    potential: np.ndarray | None = None

    def __post_init__(self):
        if not self.mass > 0:
            raise GridError(f"mass must be positive, got {self.mass}")
        if not self.hbar > 0:
            raise GridError(f"hbar must be positive, got {self.hbar}")
        if self.potential is not None:
            V = np.asarray(self.potential)
            if np.iscomplexobj(V):
                if np.any(V.imag != 0):
                    raise GridError("potential must be real-valued")
                V = V.real
            V = np.array(V, dtype=float)
            if not np.all(np.isfinite(V)):
                raise GridError("potential must be finite")
            V.setflags(write=False)
            object.__setattr__(self, "potential", V)

    @property
    def is_free(self) -> bool:
        return self.potential is None or not np.any(self.potential)

    def check_grid(self, grid: GridSpec) -> None:
        if self.potential is not None and self.potential.shape != grid.shape:
            raise GridError(f"potential shape {self.potential.shape} does not match grid {grid.shape}")


@dataclass(frozen=True)
class WaveFunction:
    """Complex amplitudes on a grid at time ``t``.

    Instances are immutable: the amplitude array is marked read-only.
    Branch vectors produced by projections are WaveFunctions too, so the
    unit-norm property is established by the constructors that promise it
    (``init_gaussian``, ``superpose``) rather than enforced here.
    """

    grid: GridSpec
    amplitudes: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        a = np.array(self.amplitudes, dtype=np.complex128)
        if a.shape != self.grid.shape:
            raise GridError(f"amplitude shape {a.shape} does not match grid {self.grid.shape}")
        a.setflags(write=False)
        object.__setattr__(self, "amplitudes", a)
        object.__setattr__(self, "t", float(self.t))

    def norm2(self) -> float:
        return float(np.vdot(self.amplitudes, self.amplitudes).real * self.grid.cell_volume)

    def inner(self, other: "WaveFunction") -> complex:
        """<self|other> with the grid measure."""
        _check_same_grid(self.grid, other.grid)
        return complex(np.vdot(self.amplitudes, other.amplitudes) * self.grid.cell_volume)

    def replace(self, amplitudes: np.ndarray, t: float | None = None) -> "WaveFunction":
        return WaveFunction(self.grid, amplitudes, self.t if t is None else t)


def _check_same_grid(a: GridSpec, b: GridSpec) -> None:
    if a != b:
        raise GridError(f"grids differ: {a} vs {b}")


@lru_cache(maxsize=32)
def _k2(grid: GridSpec) -> np.ndarray:
    ks = grid.wavenumbers()
    if grid.dims == 1:
        return ks[0] ** 2
    kx, ky = np.meshgrid(*ks, indexing="ij")
    return kx**2 + ky**2


def _free_phase(grid: GridSpec, sys: SystemConfig, t: float) -> np.ndarray:
    return np.exp(-0.5j * sys.hbar / sys.mass * t * _k2(grid))


def _fft(a):
    return sfft.fftn(a, workers=FFT_WORKERS)


def _ifft(a):
    return sfft.ifftn(a, workers=FFT_WORKERS)


def _free_evolve_array(a: np.ndarray, grid: GridSpec, sys: SystemConfig, t: float) -> np.ndarray:
    return _ifft(_fft(a) * _free_phase(grid, sys, t))


def gaussian_width(sigma: float, sys: SystemConfig, t: float) -> float:
    """Position spread of a free minimum-uncertainty packet a time ``t`` from its waist."""
    return sigma * np.sqrt(1 + (sys.hbar * t / (2 * sys.mass * sigma**2)) ** 2)


def init_gaussian(
    grid: GridSpec,
    sys: SystemConfig,
    center: Sequence[float],
    momentum: Sequence[float],
    sigma: float,
    focus_time: float = 0.0,
) -> WaveFunction:
    """Normalised Gaussian packet with mean momentum ``momentum`` at ``t = 0``.

    ``sigma`` is the position standard deviation at the packet's waist.
    With ``focus_time = 0`` the waist is at ``t = 0`` and the packet is the
    usual Gaussian times a plane wave.  A positive ``focus_time`` prepares
    the packet that, evolving freely, reaches its waist at that time; it is
    built by placing the waist packet at ``center + p*focus_time/m`` and
    propagating it back exactly.
    """
    center = np.asarray(center, dtype=float).reshape(-1)
    momentum = np.asarray(momentum, dtype=float).reshape(-1)
    if center.size != grid.dims or momentum.size != grid.dims:
        raise GridError("center and momentum must have one component per grid axis")
    if focus_time < 0:
        raise GridError("focus_time must be non-negative")
    h = min(grid.spacing)
    if sigma < 3 * h:
        raise GridError(f"sigma={sigma} is under-resolved: need sigma >= 3*spacing = {3 * h}")
    width0 = gaussian_width(sigma, sys, focus_time)
    for c, lo, hi in zip(center, grid.lower, grid.upper):
        if c - 5 * width0 < lo or c + 5 * width0 > hi:
            raise GridError(
                f"packet support [{c - 5 * width0:.6g}, {c + 5 * width0:.6g}] is clipped by the box [{lo}, {hi}]"
            )

    waist = center + momentum / sys.mass * focus_time
    amp = np.ones(grid.shape, dtype=np.complex128)
    for axis, (x, c, p) in enumerate(zip(grid.axes(), waist, momentum)):
        f = np.exp(-((x - c) ** 2) / (4 * sigma**2) + 1j * p * (x - c) / sys.hbar)
        shape = [1] * grid.dims
        shape[axis] = -1
        amp = amp * f.reshape(shape)
    if focus_time > 0:
        amp = _free_evolve_array(amp, grid, sys, -focus_time)
    amp /= np.sqrt(np.vdot(amp, amp).real * grid.cell_volume)
    return WaveFunction(grid, amp, 0.0)


def superpose(terms: Iterable[tuple[complex, WaveFunction]]) -> tuple[WaveFunction, float]:
    """Renormalised linear combination; also returns the norm before renormalising."""
    terms = list(terms)
    if not terms:
        raise SuperpositionError("no terms to superpose")
    grid, t = terms[0][1].grid, terms[0][1].t
    total = np.zeros(grid.shape, dtype=np.complex128)
    for c, psi in terms:
        _check_same_grid(grid, psi.grid)
        if psi.t != t:
            raise GridError(f"terms live at different times ({t} vs {psi.t})")
        total += complex(c) * psi.amplitudes
    norm = float(np.sqrt(np.vdot(total, total).real * grid.cell_volume))
    if norm < 1e-8:
        raise SuperpositionError(f"superposition cancels (norm {norm:.3g} < 1e-8)")
    if abs(norm - 1) < 1e-14:
        # already normalised; dividing would only add round-off
        return WaveFunction(grid, total, t), norm
    return WaveFunction(grid, total / norm, t), norm


def evolve(psi: WaveFunction, sys: SystemConfig, dt: float, steps: int = 1) -> WaveFunction:
    """Advance ``psi`` by ``steps`` Strang steps of length ``dt``.

    Each step is ``exp(-iV dt/2h) exp(-iT dt/h) exp(-iV dt/2h)`` with the
    kinetic factor applied in momentum space.  For a free particle the
    kinetic factors commute, so the whole interval is applied at once and
    the result is exact for any ``dt``.
    """
    if not dt > 0:
        raise GridError(f"dt must be positive, got {dt}")
    if steps < 0:
        raise GridError(f"steps must be non-negative, got {steps}")
    if steps == 0:
        return psi
    grid = psi.grid
    sys.check_grid(grid)
    if sys.is_free:
        return psi.replace(_free_evolve_array(psi.amplitudes, grid, sys, steps * dt), psi.t + steps * dt)
    half = np.exp(-0.5j * sys.potential * dt / sys.hbar)
    kin = _free_phase(grid, sys, dt)
    a = psi.amplitudes * half
    for i in range(steps):
        a = _ifft(_fft(a) * kin)
        a = a * (half if i == steps - 1 else half * half)
    return psi.replace(a, psi.t + steps * dt)


def evolve_stream(psi: WaveFunction, sys: SystemConfig, dt: float, steps: int) -> Iterator[WaveFunction]:
    """Yield ``psi`` and its evolutions at ``dt, 2dt, ..., steps*dt``.

    Free states are propagated from ``psi`` directly at every frame so no
    round-off accumulates along the stream.
    """
    yield psi
    if sys.is_free and steps:
        sys.check_grid(psi.grid)
        spec = _fft(psi.amplitudes)
        for j in range(1, steps + 1):
            yield psi.replace(_ifft(spec * _free_phase(psi.grid, sys, j * dt)), psi.t + j * dt)
        return
    cur = psi
    for _ in range(steps):
        cur = evolve(cur, sys, dt, 1)
        yield cur


def position_density(psi: WaveFunction) -> np.ndarray:
    """|psi|^2 per cell (a density: multiply by the cell volume for mass)."""
    return np.abs(psi.amplitudes) ** 2


def expectation_position(psi: WaveFunction) -> np.ndarray:
    rho = position_density(psi) * psi.grid.cell_volume
    total = rho.sum()
    return np.array([(rho * x).sum() / total for x in psi.grid.mesh()])


def expectation_momentum(psi: WaveFunction, hbar: float = 1.0) -> np.ndarray:
    spec = _fft(psi.amplitudes)
    w = np.abs(spec) ** 2
    ks = np.meshgrid(*psi.grid.wavenumbers(), indexing="ij")
    return np.array([hbar * (w * k).sum() / w.sum() for k in ks])


# --- field dumps ---------------------------------------------------------

_MAGIC = b"HISTLAB-FIELD\n"


def save_field(path, psi: WaveFunction, sys: SystemConfig) -> None:
    """Binary dump: magic line, one JSON header line, row-major (re, im) float64 pairs."""
    header = {
        "dims": psi.grid.dims,
        "extent": list(psi.grid.extent),
        "points": list(psi.grid.points),
        "t": psi.t,
        "hbar": sys.hbar,
        "mass": sys.mass,
    }
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(np.ascontiguousarray(psi.amplitudes).astype("<c16").tobytes())


def load_field(path) -> tuple[WaveFunction, dict]:
    with open(path, "rb") as fh:
        if fh.readline() != _MAGIC:
            raise GridError(f"{path}: not a field dump")
        header = json.loads(fh.readline())
        data = np.frombuffer(fh.read(), dtype="<c16")
    grid = GridSpec(tuple(header["extent"]), tuple(header["points"]))
    return WaveFunction(grid, data.reshape(grid.shape), header["t"]), header


def write_field_csv(path, psi: WaveFunction) -> None:
    """Plot-friendly CSV with coordinates, Re, Im and |psi|^2 per cell."""
    mesh = psi.grid.mesh()
    a = psi.amplitudes.ravel()
    cols = [m.ravel() for m in mesh] + [a.real, a.imag, np.abs(a) ** 2]
    names = ["x", "y"][: psi.grid.dims] + ["re", "im", "density"]
    np.savetxt(path, np.column_stack(cols), delimiter=",", header=",".join(names), comments="", fmt="%.12g")
