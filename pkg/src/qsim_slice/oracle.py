"""Brute-force double-precision state-vector simulator used as ground truth.

Basis index convention: qubit 0 is the most significant bit, so the bitstring
``"b0 b1 ... b(n-1)"`` read as a binary number is the amplitude index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .circuit import Circuit, GateKind, bits_to_int, int_to_bits

__all__ = [
    "MAX_QUBITS",
    "OracleError",
    "StateVector",
    "evolve",
    "exact_sample",
    "porter_thomas_check",
    "PorterThomasResult",
]

MAX_QUBITS = 26
NORM_TOL = 1e-10


class OracleError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class StateVector:
    n: int
    amplitudes: np.ndarray

    def amplitude(self, bits: str) -> complex:
        return complex(self.amplitudes[bits_to_int(bits)])

    def probabilities(self) -> np.ndarray:
        return np.abs(self.amplitudes) ** 2

    def norm(self) -> float:
        return math.fsum(self.probabilities())


def _apply_1q(psi: np.ndarray, u: np.ndarray, q: int, n: int) -> np.ndarray:
    view = psi.reshape(1 << q, 2, 1 << (n - q - 1))
    a0 = view[:, 0, :].copy()
    a1 = view[:, 1, :]
    view[:, 0, :] = u[0, 0] * a0 + u[0, 1] * a1
    view[:, 1, :] = u[1, 0] * a0 + u[1, 1] * a1
    return psi


def _apply_cz(psi: np.ndarray, a: int, b: int, n: int) -> np.ndarray:
    view = psi.reshape((2,) * n)
    idx = [slice(None)] * n
    idx[a] = 1
    idx[b] = 1
    view[tuple(idx)] *= -1
    return psi


def basis_state(n: int, bits: str | None = None) -> StateVector:
    psi = np.zeros(1 << n, dtype=np.complex128)
    psi[bits_to_int(bits) if bits else 0] = 1.0
    return StateVector(n, psi)


def evolve(c: Circuit, initial: str | None = None) -> StateVector:
    """Apply the circuit cycle by cycle to ``|initial>`` (default all zeros)."""
    n = c.n_qubits
    if n > MAX_QUBITS:
        raise OracleError(f"{n} qubits exceeds the oracle limit of {MAX_QUBITS}")
    psi = basis_state(n, initial).amplitudes
    for layer in c.cycles():
        for g in layer:
            if g.kind is GateKind.CZ:
                _apply_cz(psi, g.qubits[0], g.qubits[1], n)
            else:
                _apply_1q(psi, _GATES[g.kind], g.qubits[0], n)
        norm = np.vdot(psi, psi).real
        if abs(norm - 1.0) > NORM_TOL:
            raise OracleError(f"norm drifted to {norm!r} during evolution")
    return StateVector(n, psi)


_GATES = {k: k.matrix for k in GateKind if k is not GateKind.CZ}


def exact_sample(sv: StateVector, m: int, seed: int | np.random.Generator | None = None,
                 as_int: bool = False) -> list:
    """Draw ``m`` i.i.d. outcomes from ``|a_i|^2`` by inverse CDF."""
    rng = np.random.default_rng(seed)
    cdf = np.cumsum(sv.probabilities())
    cdf /= cdf[-1]
    idx = np.searchsorted(cdf, rng.random(m), side="right")
    idx = np.minimum(idx, len(cdf) - 1)
    if as_int:
        return idx.tolist()
    return [int_to_bits(int(i), sv.n) for i in idx]


@dataclass(frozen=True)
class PorterThomasResult:
    mean: float
    ks_statistic: float
    p_value: float
    alpha: float = 0.01

    @property
    def passed(self) -> bool:
        return self.p_value > self.alpha


def porter_thomas_check(sv: StateVector, alpha: float = 0.01) -> PorterThomasResult:
    """Compare scaled probabilities ``2^n |a|^2`` against Exp(1) with a KS test."""
    scaled = sv.probabilities() * float(1 << sv.n)
    mean = math.fsum(scaled) / len(scaled)
    ks = stats.kstest(scaled, "expon")
    return PorterThomasResult(mean, float(ks.statistic), float(ks.pvalue), alpha)
