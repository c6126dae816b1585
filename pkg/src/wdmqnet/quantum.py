"""Two-qubit polarization states and analyzer statistics."""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

_TRACE_TOL = 1e-12
_PSD_TOL = 1e-10


class Basis(str, Enum):
    HV = "HV"
    DA = "DA"


# label of analyzer output 0 / 1 in each basis
OUTPUT_LABELS = {Basis.HV: ("H", "V"), Basis.DA: ("D", "A")}


@dataclass(frozen=True)
class AnalyzerSetting:
    """Polarization analyzer of one user.

    ``output`` is None for a two-port analyzer (both outcomes detected) and
    0/1 when a single detector sits behind one port, as in a run of the
    sixteen-setting campaign.
    """

    basis: Basis
    output: int | None = None

    @classmethod
    def parse(cls, text: str) -> "AnalyzerSetting":
        t = text.strip().upper()
        if t in ("HV", "DA"):
            return cls(Basis(t))
        for basis, labels in OUTPUT_LABELS.items():
            if t in labels:
                return cls(basis, labels.index(t))
        raise ValueError(f"unknown analyzer setting {text!r}")

    def label(self) -> str:
        if self.output is None:
            return self.basis.value
        return OUTPUT_LABELS[self.basis][self.output]


def _projectors(basis: Basis) -> tuple[np.ndarray, np.ndarray]:
    if basis is Basis.HV:
        v0 = np.array([1.0, 0.0])
        v1 = np.array([0.0, 1.0])
    else:
        s = 1.0 / math.sqrt(2.0)
        v0 = np.array([s, s])
        v1 = np.array([s, -s])
    return np.outer(v0, v0).astype(complex), np.outer(v1, v1).astype(complex)


_PHI_PLUS_VEC = np.array([1.0, 0.0, 0.0, 1.0], dtype=complex) / math.sqrt(2.0)
_PHI_PLUS = np.outer(_PHI_PLUS_VEC, _PHI_PLUS_VEC.conj())


@dataclass(frozen=True)
class TwoQubitState:
    """Density operator over the ordered basis HH, HV, VH, VV."""

    rho: np.ndarray

    def __post_init__(self):
        rho = np.asarray(self.rho, dtype=complex)
        if rho.shape != (4, 4):
            raise ValueError(f"expected a 4x4 density matrix, got shape {rho.shape}")
        if abs(np.trace(rho) - 1.0) > _TRACE_TOL:
            raise ValueError(f"trace {np.trace(rho).real} != 1")
        if not np.allclose(rho, rho.conj().T, atol=1e-12):
            raise ValueError("density matrix is not Hermitian")
        if np.linalg.eigvalsh(rho).min() < -_PSD_TOL:
            raise ValueError("density matrix is not positive semidefinite")
        rho.setflags(write=False)
        object.__setattr__(self, "rho", rho)

    def element(self, row: str, col: str) -> complex:
        idx = {"HH": 0, "HV": 1, "VH": 2, "VV": 3}
        return complex(self.rho[idx[row], idx[col]])

    def reduced(self, qubit: int) -> np.ndarray:
        r = self.rho.reshape(2, 2, 2, 2)
        if qubit == 0:
            return np.einsum("ijkj->ik", r)
        return np.einsum("ijil->jl", r)


def phi_plus() -> TwoQubitState:
    return TwoQubitState(_PHI_PLUS.copy())


def werner(f: float) -> TwoQubitState:
    """Isotropic mixture of Phi+ with Bell-state fidelity ``f``."""
    if not 0.25 <= f <= 1.0:
        raise ValueError(f"Werner fidelity must lie in [0.25, 1], got {f}")
    rho = f * _PHI_PLUS + (1.0 - f) / 3.0 * (np.eye(4) - _PHI_PLUS)
    return TwoQubitState(rho)


def fidelity(state: TwoQubitState, target: TwoQubitState | None = None) -> float:
    """Overlap Tr(rho sigma); for a pure target this is the usual fidelity."""
    sigma = _PHI_PLUS if target is None else target.rho
    return float(np.real(np.trace(state.rho @ sigma)))


def outcome_probs(state: TwoQubitState, a: Basis, b: Basis) -> np.ndarray:
    """Joint outcome table ``p[i, j]`` for output i of user a and j of user b."""
    pa, pb = _projectors(Basis(a)), _projectors(Basis(b))
    p = np.empty((2, 2))
    for i in range(2):
        for j in range(2):
            p[i, j] = np.real(np.trace(state.rho @ np.kron(pa[i], pb[j])))
    p = np.clip(p, 0.0, None)
    return p / p.sum()


def visibility(state: TwoQubitState, basis: Basis) -> float:
    p = outcome_probs(state, basis, basis)
    same = p[0, 0] + p[1, 1]
    diff = p[0, 1] + p[1, 0]
    return float((same - diff) / (same + diff))


def werner_visibility(f: float) -> float:
    return (4.0 * f - 1.0) / 3.0
