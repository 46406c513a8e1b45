import math

import numpy as np
import pytest
from scipy import stats

from qsim_slice.circuit import Circuit, Gate, GateKind, generate_rqc, parse_circuit
from qsim_slice.oracle import OracleError, StateVector, basis_state, evolve, exact_sample, porter_thomas_check


def h_layer(n: int) -> Circuit:
    return Circuit(1, n, tuple(Gate(0, (q,), GateKind.H) for q in range(n)))


def test_single_hadamard():
    sv = evolve(parse_circuit("1\n0 h 0\n"))
    assert np.allclose(sv.amplitudes, [2**-0.5, 2**-0.5])


def test_hh_then_cz():
    sv = evolve(parse_circuit("2\n0 h 0\n0 h 1\n1 cz 0 1\n"))
    assert np.allclose(sv.amplitudes, [0.5, 0.5, 0.5, -0.5])


def test_qubit_zero_is_most_significant():
    sv = evolve(parse_circuit("2\n0 x_1_2 0\n1 x_1_2 0\n"))  # X on qubit 0 -> |10>
    assert abs(sv.amplitude("10")) == pytest.approx(1.0)


def test_rqc_norm_preserved():
    sv = evolve(generate_rqc(4, 4, 8, 1))
    assert abs(sv.norm() - 1.0) < 1e-10


def test_qubit_limit():
    with pytest.raises(OracleError):
        evolve(h_layer(27))


def test_exact_sample_uniform_state():
    sv = evolve(h_layer(4))
    counts = np.bincount(exact_sample(sv, 100_000, seed=3, as_int=True), minlength=16)
    assert stats.chisquare(counts).pvalue > 0.01


def test_exact_sample_basis_state():
    sv = basis_state(5, "10110")
    assert set(exact_sample(sv, 500, seed=1)) == {"10110"}


def test_porter_thomas_mean_is_normalization():
    for seed in range(3):
        res = porter_thomas_check(evolve(generate_rqc(3, 4, 10, seed)))
        assert abs(res.mean - 1.0) < 1e-12


def test_porter_thomas_rejects_product_state():
    res = porter_thomas_check(evolve(h_layer(10)))
    assert not res.passed
    assert res.mean == pytest.approx(1.0, abs=1e-12)


def test_porter_thomas_accepts_deep_circuit():
    assert porter_thomas_check(evolve(generate_rqc(4, 4, 24, 0))).passed


def test_statevector_probabilities_sum():
    amps = np.array([0.6, 0.8j])
    sv = StateVector(1, amps)
    assert math.isclose(sv.norm(), 1.0)
