import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qsim_slice.circuit import (
    CZ_LAYOUTS,
    Circuit,
    CircuitError,
    Gate,
    GateKind,
    bits_to_int,
    check_exclusivity,
    generate_rqc,
    int_to_bits,
    layout_pairs,
    load_circuit,
    parse_circuit,
    serialize_circuit,
)

PAULI_X = np.array([[0, 1], [1, 0]])
PAULI_Y = np.array([[0, -1j], [1j, 0]])


@pytest.mark.parametrize("kind", list(GateKind))
def test_gate_matrices_unitary(kind):
    u = kind.matrix
    assert np.allclose(u.conj().T @ u, np.eye(u.shape[0]), atol=1e-6)


def test_square_roots_and_cz():
    x, y = GateKind.XHalf.matrix, GateKind.YHalf.matrix
    assert np.allclose(x @ x, PAULI_X, atol=1e-6)
    assert np.allclose(y @ y, PAULI_Y, atol=1e-6)
    assert np.array_equal(GateKind.CZ.matrix, np.diag([1, 1, 1, -1]))


def test_parse_minimal_h_layer():
    c = parse_circuit("4\n0 h 0\n0 h 1\n0 h 2\n0 h 3")
    assert c.rows * c.cols == 4
    assert len(c.cycles()) == 1
    assert all(g.kind is GateKind.H for g in c.gates)


def test_parse_smallest_entangling():
    c = parse_circuit("2\n0 h 0\n0 h 1\n1 cz 0 1\n2 h 0\n2 h 1")
    assert len(c.gates) == 5
    assert c.depth_label == (1, 1, 1)


def test_parse_keeps_file_order():
    text = "2\n0 h 1\n0 h 0\n1 cz 0 1\n2 h 1\n2 h 0\n"
    assert [g.qubits for g in parse_circuit(text).gates] == [(1,), (0,), (0, 1), (1,), (0,)]


@pytest.mark.parametrize(
    "name, fragment",
    [
        ("bad_malformed", "malformed"),
        ("bad_unknown_gate", "unknown gate"),
        ("bad_out_of_range", "out of range"),
        ("bad_duplicate_qubit", "already used"),
        ("bad_non_adjacent", "non-adjacent"),
    ],
)
def test_parse_errors_carry_line_numbers(fixtures, name, fragment):
    with pytest.raises(CircuitError, match=fragment) as info:
        load_circuit(fixtures / "circuits" / f"{name}.txt")
    assert info.value.line == 3


def test_grid_directive_and_comments(fixtures):
    c = load_circuit(fixtures / "circuits" / "valid_grid_directive.txt")
    assert (c.rows, c.cols) == (2, 3)
    assert c.has_hadamard_frame()


def test_cz_adjacency_depends_on_grid_shape():
    # qubits 0 and 3 are vertical neighbours on 2x3 but not on 1x6
    parse_circuit("6\n0 cz 0 3\n", rows=2, cols=3)
    with pytest.raises(CircuitError):
        parse_circuit("6\n0 cz 0 3\n", rows=1, cols=6)


def test_generate_depth_zero_is_two_h_layers():
    c = generate_rqc(2, 2, 0, 5)
    assert c.depth_label == (1, 0, 1)
    assert [len(layer) for layer in c.cycles()] == [4, 4]
    assert all(g.kind is GateKind.H for g in c.gates)


def test_generate_is_deterministic():
    assert generate_rqc(4, 4, 8, 11).gates == generate_rqc(4, 4, 8, 11).gates
    assert generate_rqc(4, 4, 8, 11).gates != generate_rqc(4, 4, 8, 12).gates


def test_first_non_h_gate_is_t():
    for seed in range(5):
        c = generate_rqc(4, 4, 8, seed)
        for q in range(c.n_qubits):
            singles = [g for g in c.worldline(q) if g.kind is not GateKind.CZ and 0 < g.cycle <= 8]
            if singles:
                assert singles[0].kind is GateKind.T


def test_generated_gate_placement_rules():
    c = generate_rqc(4, 5, 16, 3)
    cz_at = {}
    for g in c.gates:
        if g.kind is GateKind.CZ:
            for q in g.qubits:
                cz_at.setdefault(q, set()).add(g.cycle)
    prev = {}
    for g in sorted(c.gates):
        if g.kind in (GateKind.CZ, GateKind.H):
            continue
        (q,) = g.qubits
        assert g.cycle - 1 in cz_at[q] and g.cycle not in cz_at[q]
        if q in prev:
            assert g.kind is not prev[q]
        prev[q] = g.kind


def test_layouts_partition_grid_edges():
    rows, cols = 5, 6
    seen = []
    for i in range(len(CZ_LAYOUTS)):
        pairs = layout_pairs(rows, cols, i)
        used = [q for p in pairs for q in p]
        assert len(used) == len(set(used))
        seen += pairs
    edges = {(r * cols + c, r * cols + c + 1) for r in range(rows) for c in range(cols - 1)}
    edges |= {(r * cols + c, (r + 1) * cols + c) for r in range(rows - 1) for c in range(cols)}
    assert sorted(seen) == sorted(edges)


def test_serialize_roundtrip_is_byte_stable():
    c = parse_circuit("2\n0 h 0\n0 h 1\n")
    once = serialize_circuit(c)
    assert serialize_circuit(parse_circuit(once)) == once


def test_serialize_orders_by_cycle_then_qubit():
    c = generate_rqc(3, 3, 6, 2)
    keys = []
    for line in serialize_circuit(c).splitlines()[2:]:
        parts = line.split()
        keys.append((int(parts[0]), tuple(int(q) for q in parts[2:])))
    assert keys == sorted(keys)
    assert parse_circuit(serialize_circuit(c)) == c


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 12), st.integers(0, 2**32 - 1))
def test_generated_circuits_roundtrip_and_are_exclusive(rows, cols, m, seed):
    c = generate_rqc(rows, cols, m, seed)
    assert check_exclusivity(c.gates)
    assert c.has_hadamard_frame()
    assert c.n_cycles == m + 2
    assert parse_circuit(serialize_circuit(c)) == c


@given(st.integers(1, 20).flatmap(lambda n: st.tuples(st.just(n), st.integers(0, 2**n - 1))))
def test_bit_conversions_invert(nx):
    n, x = nx
    s = int_to_bits(x, n)
    assert len(s) == n and bits_to_int(s) == x
    assert s[0] == str(x >> (n - 1))


def test_exclusivity_violation_rejected():
    with pytest.raises(CircuitError):
        Circuit(1, 2, (Gate(0, (0,), GateKind.H), Gate(0, (0, 1), GateKind.CZ)))
