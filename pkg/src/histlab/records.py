"""Ideal measurement records in small finite-dimensional models.

A model is a state vector, the unitaries between successive history times
(and from the last history time to the record time ``t_R``), one
projector family per history time, a record family at ``t_R`` and,
optionally, an orthogonal family of ``t = 0`` projectors standing in for
the Bohmian history operators.  Everything is dense linear algebra.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

__all__ = [
    "ModelError",
    "FiniteModel",
    "RecordReport",
    "ExclusivityReport",
    "build_copy_model",
    "build_bessw_analog",
    "verify_record_correlation",
    "exclusivity_check",
    "save_model",
    "load_model",
]

TOL = 1e-12
MAX_DIM = 4096

Label = tuple[int, ...]


class ModelError(ValueError):
    """A finite model violates a structural invariant."""


def _check_family(family: Mapping[Label, np.ndarray], dim: int, name: str, tol: float = TOL) -> None:
    total = np.zeros((dim, dim), dtype=complex)
    mats = list(family.values())
    for P in mats:
        if P.shape != (dim, dim):
            raise ModelError(f"{name}: projector of shape {P.shape}, expected {(dim, dim)}")
        if np.abs(P - P.conj().T).max() > tol:
            raise ModelError(f"{name}: projector is not Hermitian")
        if np.abs(P @ P - P).max() > tol:
            raise ModelError(f"{name}: projector is not idempotent")
        total += P
    for P, Q in itertools.combinations(mats, 2):
        if np.abs(P @ Q).max() > tol:
            raise ModelError(f"{name}: projectors are not mutually orthogonal")
    if np.abs(total - np.eye(dim)).max() > tol:
        raise ModelError(f"{name}: projectors do not sum to the identity")


def _check_unitary(U: np.ndarray, dim: int, name: str, tol: float = TOL) -> None:
    if U.shape != (dim, dim):
        raise ModelError(f"{name}: shape {U.shape}, expected {(dim, dim)}")
    if np.abs(U.conj().T @ U - np.eye(dim)).max() > tol:
        raise ModelError(f"{name}: not unitary")


@dataclass
class FiniteModel:
    """Finite stand-in for a closed system with apparatus.

    ``unitaries[k]`` evolves from history time ``k`` to ``k+1`` (index 0
    starts at ``t = 0``); ``record_unitary`` evolves from the last history
    time to ``t_R``.  ``history`` holds one projector family per history time,
    keyed by 1-tuples of the alternative index.
    """

    psi: np.ndarray
    unitaries: list[np.ndarray]
    record_unitary: np.ndarray
    history: list[dict[int, np.ndarray]]
    records: dict[Label, np.ndarray]
    bohm: dict[Label, np.ndarray] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.psi = np.asarray(self.psi, dtype=complex)
        d = self.dim
        if abs(np.vdot(self.psi, self.psi).real - 1) > 1e-12:
            raise ModelError("initial state must have unit norm")
        if len(self.unitaries) != len(self.history):
            raise ModelError("need one unitary per history time")
        for k, U in enumerate(self.unitaries):
            _check_unitary(U, d, f"U[{k}]")
        _check_unitary(self.record_unitary, d, "U_R")
        for k, fam in enumerate(self.history):
            _check_family(fam, d, f"history family {k}")
        _check_family(self.records, d, "records")
        if self.bohm is not None:
            _check_family(self.bohm, d, "Bohmian family")

    @property
    def dim(self) -> int:
        return self.psi.size

    @property
    def n(self) -> int:
        return len(self.history)

    def labels(self):
        return itertools.product(*(sorted(fam) for fam in self.history))

    def chain(self, alpha: Label) -> np.ndarray:
        """Chain operator ``P^n U_n ... P^1 U_1`` for history ``alpha``."""
        C = np.eye(self.dim, dtype=complex)
        for U, fam, a in zip(self.unitaries, self.history, alpha):
            C = fam[a] @ U @ C
        return C

    def total_unitary(self) -> np.ndarray:
        """Evolution from ``t = 0`` to ``t_R``."""
        U = np.eye(self.dim, dtype=complex)
        for V in self.unitaries:
            U = V @ U
        return self.record_unitary @ U

    def dh_probabilities(self) -> dict[Label, float]:
        return {a: float(np.linalg.norm(self.chain(a) @ self.psi) ** 2) for a in self.labels()}

    def bm_probabilities(self) -> dict[Label, float]:
        if self.bohm is None:
            raise ModelError("model has no Bohmian family")
        return {a: float(np.linalg.norm(B @ self.psi) ** 2) for a, B in self.bohm.items()}

    def record_probabilities(self) -> dict[Label, float]:
        out = self.total_unitary() @ self.psi
        return {b: float(np.linalg.norm(R @ out) ** 2) for b, R in self.records.items()}


def _copy_unitary(K: int, n: int, register: int) -> np.ndarray:
    """Permutation adding the system index into record register ``register`` (mod K)."""
    dims = (K,) * (n + 1)
    d = K ** (n + 1)
    U = np.zeros((d, d))
    for idx in itertools.product(range(K), repeat=n + 1):
        out = list(idx)
        out[register + 1] = (idx[register + 1] + idx[0]) % K
        U[np.ravel_multi_index(out, dims), np.ravel_multi_index(idx, dims)] = 1.0
    return U


def _system_op(op: np.ndarray, K: int, n: int) -> np.ndarray:
    return np.kron(op, np.eye(K**n))


def _dft(K: int) -> np.ndarray:
    j = np.arange(K)
    return np.exp(2j * np.pi * np.outer(j, j) / K) / np.sqrt(K)


def _system_projector(K: int, n: int, a: int) -> np.ndarray:
    e = np.zeros((K, K))
    e[a, a] = 1
    return _system_op(e, K, n)


def _record_projector(K: int, n: int, beta: Label) -> np.ndarray:
    P = np.eye(K)
    for b in beta:
        e = np.zeros((K, K))
        e[b, b] = 1
        P = np.kron(P, e)
    return P


def build_copy_model(
    K: int, n: int, system_state: Sequence[complex] | None = None, mixing: np.ndarray | None = None
) -> FiniteModel:
    """System of dimension ``K`` plus ``n`` record registers, each a copy of one history time.

    After the projection at history time ``k`` the next unitary first adds
    the system index into register ``k`` and then applies ``mixing`` to the
    system (the discrete Fourier transform by default).  The state starts in
    ``system_state`` (uniform by default) with every register at 0.  The
    record family at ``t_R`` reads all registers.
    """
    if K < 1 or n < 1:
        raise ModelError("need K >= 1 and n >= 1")
    d = K ** (n + 1)
    if d > MAX_DIM:
        raise ModelError(f"dimension K^(n+1) = {d} exceeds the guard {MAX_DIM}")
    s = np.ones(K, dtype=complex) if system_state is None else np.asarray(system_state, dtype=complex)
    s = s / np.linalg.norm(s)
    reg0 = np.zeros(K**n)
    reg0[0] = 1
    psi = np.kron(s, reg0)
    W = _system_op(_dft(K) if mixing is None else np.asarray(mixing, dtype=complex), K, n)
    unitaries = [np.eye(d, dtype=complex)]
    for k in range(1, n):
        unitaries.append(W @ _copy_unitary(K, n, k - 1))
    record_unitary = _copy_unitary(K, n, n - 1).astype(complex)
    history = [{a: _system_projector(K, n, a) for a in range(K)} for _ in range(n)]
    records = {beta: _record_projector(K, n, beta) for beta in itertools.product(range(K), repeat=n)}
    return FiniteModel(psi, unitaries, record_unitary, history, records, meta={"kind": "copy", "K": K, "n": n})


def build_bessw_analog(records: str = "C", crossing: bool = True) -> FiniteModel:
    """Two-path analogue of the mirror-packet example on system (+) two record registers.

    The system qubit says whether the packet is in the upper (0) or lower
    (1) half.  Between the two history times the packets cross (a bit
    flip) when ``crossing`` is true.  The Bohmian family assigns the
    reflected histories ``(0, 0)`` and ``(1, 1)`` according to the initial
    half, as trajectories that never cross the symmetry axis would.

    ``records="C"`` uses the register readout (which copies the chain
    histories); ``records="B"`` uses ``U B_a U^dagger``, the images of the
    Bohmian projectors at ``t_R``.
    """
    K, n = 2, 2
    X = np.array([[0, 1], [1, 0]], dtype=complex)
    model = build_copy_model(K, n, mixing=X if crossing else np.eye(2))
    bohm = {
        (0, 0): _system_projector(K, n, 0).astype(complex),
        (1, 1): _system_projector(K, n, 1).astype(complex),
        (0, 1): np.zeros((8, 8), dtype=complex),
        (1, 0): np.zeros((8, 8), dtype=complex),
    }
    model.bohm = bohm
    if records == "B":
        U = model.total_unitary()
        model.records = {a: U @ B @ U.conj().T for a, B in bohm.items()}
    elif records != "C":
        raise ModelError(f"records must be 'C' or 'B', got {records!r}")
    model.meta = {"kind": "bessw-analog", "records": records, "crossing": crossing}
    model.__post_init__()
    return model


@dataclass
class RecordReport:
    family: str
    max_off_correlation: float
    summed_identity_residual: float
    probability_residual: float
    tol: float = TOL

    @property
    def correlated(self) -> bool:
        return self.max_off_correlation < self.tol

    @property
    def passed(self) -> bool:
        return self.correlated and self.summed_identity_residual < self.tol and self.probability_residual < self.tol

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "max_off_correlation": self.max_off_correlation,
            "summed_identity_residual": self.summed_identity_residual,
            "probability_residual": self.probability_residual,
            "tol": self.tol,
            "correlated": self.correlated,
            "passed": self.passed,
        }


def verify_record_correlation(model: FiniteModel, family: str = "C", tol: float = TOL) -> RecordReport:
    """Check that the records are exactly correlated with the C- or B-histories.

    Reports the largest ``||R_b U (history op)_a psi||`` over ``b != a``, the
    residual of the summed identity ``R_b U(t_R, 0) psi = (evolved branch)_b``
    and the largest gap between record and history probabilities.
    """
    psi = model.psi
    U_total = model.total_unitary()
    if family == "C":
        branches = {a: model.record_unitary @ model.chain(a) @ psi for a in model.labels()}
    elif family == "B":
        if model.bohm is None:
            raise ModelError("model has no Bohmian family")
        branches = {a: U_total @ B @ psi for a, B in model.bohm.items()}
    else:
        raise ModelError(f"family must be 'C' or 'B', got {family!r}")
    off = 0.0
    for a, v in branches.items():
        for b, R in model.records.items():
            if b != a:
                off = max(off, float(np.linalg.norm(R @ v)))
    full = U_total @ psi
    ident = 0.0
    prob = 0.0
    for b, R in model.records.items():
        v = branches.get(b, np.zeros_like(psi))
        rv = R @ full
        ident = max(ident, float(np.linalg.norm(rv - v)))
        prob = max(prob, abs(float(np.linalg.norm(rv) ** 2 - np.linalg.norm(v) ** 2)))
    return RecordReport(family, off, ident, prob, tol)


@dataclass
class ExclusivityReport:
    c_condition: bool
    b_condition: bool
    probabilities_differ: bool
    max_probability_gap: float
    c_report: RecordReport
    b_report: RecordReport

    @property
    def theorem_holds(self) -> bool:
        return not (self.probabilities_differ and self.c_condition and self.b_condition)

    def to_dict(self) -> dict:
        return {
            "c_condition": self.c_condition,
            "b_condition": self.b_condition,
            "probabilities_differ": self.probabilities_differ,
            "max_probability_gap": self.max_probability_gap,
            "theorem_holds": self.theorem_holds,
            "c_report": self.c_report.to_dict(),
            "b_report": self.b_report.to_dict(),
        }


def exclusivity_check(model: FiniteModel, tol: float = TOL, gap: float = 1e-9) -> ExclusivityReport:
    """Which correlation condition the model's record family satisfies.

    Each condition forces the record probabilities to equal that
    formulation's history probabilities, so when the two probability
    vectors differ at most one of them can hold.
    """
    c = verify_record_correlation(model, "C", tol)
    b = verify_record_correlation(model, "B", tol)
    dh = model.dh_probabilities()
    bm = model.bm_probabilities()
    keys = set(dh) | set(bm)
    diff = max(abs(dh.get(a, 0.0) - bm.get(a, 0.0)) for a in keys)
    return ExclusivityReport(c.correlated, b.correlated, diff > gap, diff, c, b)


# --- model files ----------------------------------------------------------

def _enc(M: np.ndarray) -> list:
    M = np.asarray(M, dtype=complex)
    return [M.real.tolist(), M.imag.tolist()]


def _dec(obj) -> np.ndarray:
    re, im = obj
    return np.asarray(re, dtype=float) + 1j * np.asarray(im, dtype=float)


def _enc_family(fam: Mapping) -> list:
    return [{"label": list(k) if isinstance(k, tuple) else [k], "projector": _enc(P)} for k, P in sorted(fam.items())]


def _dec_family(items, scalar: bool = False) -> dict:
    out = {}
    for it in items:
        key = tuple(it["label"])
        out[key[0] if scalar else key] = _dec(it["projector"])
    return out


def save_model(path, model: FiniteModel) -> None:
    """JSON with complex matrices stored as ``[real part, imaginary part]``."""
    data = {
        "kind": "finite_model",
        "dim": model.dim,
        "meta": model.meta,
        "psi": [model.psi.real.tolist(), model.psi.imag.tolist()],
        "unitaries": [_enc(U) for U in model.unitaries],
        "record_unitary": _enc(model.record_unitary),
        "history": [_enc_family(f) for f in model.history],
        "records": _enc_family(model.records),
        "bohm": None if model.bohm is None else _enc_family(model.bohm),
    }
    with open(path, "w") as fh:
        json.dump(data, fh)


def load_model(path_or_data) -> FiniteModel:
    if isinstance(path_or_data, Mapping):
        data = path_or_data
    else:
        with open(path_or_data) as fh:
            data = json.load(fh)
    if data.get("kind") != "finite_model":
        raise ModelError("not a finite model file")
    psi = np.asarray(data["psi"][0]) + 1j * np.asarray(data["psi"][1])
    model = FiniteModel(
        psi,
        [_dec(U) for U in data["unitaries"]],
        _dec(data["record_unitary"]),
        [_dec_family(f, scalar=True) for f in data["history"]],
        _dec_family(data["records"]),
        None if data.get("bohm") is None else _dec_family(data["bohm"]),
        meta=data.get("meta", {}),
    )
    if model.dim != data.get("dim", model.dim):
        raise ModelError("dimension header does not match the state")
    return model
