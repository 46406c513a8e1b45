"""Grid circuits: gate set, GRCS-style text format and random circuit generation.

Text format (one gate per line, UTF-8)::

    <n_qubits>
    <cycle> <gate> <q0> [<q1>]
    ...

``gate`` is one of ``h``, ``t``, ``x_1_2``, ``y_1_2``, ``cz``. Qubits are
row-major linear indices into a ``rows x cols`` grid. Blank lines and lines
starting with ``#`` are ignored, except for an optional ``# grid: RxC``
directive which fixes the grid shape (otherwise the most square factorization
of the qubit count is used, rows <= cols).
"""

from __future__ import annotations

import enum
import math
import re
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "CircuitError",
    "GateKind",
    "Gate",
    "Circuit",
    "CZ_LAYOUTS",
    "parse_circuit",
    "serialize_circuit",
    "generate_rqc",
    "load_circuit",
]


class CircuitError(ValueError):
    """Invalid circuit text or structure."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


_S2 = 1 / math.sqrt(2)


class GateKind(enum.Enum):
    H = "h"
    T = "t"
    XHalf = "x_1_2"
    YHalf = "y_1_2"
    CZ = "cz"

    @property
    def n_qubits(self) -> int:
        return 2 if self is GateKind.CZ else 1

    @property
    def matrix(self) -> np.ndarray:
        return _MATRICES[self].copy()

    @property
    def is_diagonal(self) -> bool:
        return self in (GateKind.T, GateKind.CZ)


_MATRICES = {
    GateKind.H: np.array([[_S2, _S2], [_S2, -_S2]], dtype=np.complex128),
    GateKind.T: np.diag([1.0, np.exp(1j * np.pi / 4)]).astype(np.complex128),
    GateKind.XHalf: 0.5 * np.array([[1 + 1j, 1 - 1j], [1 - 1j, 1 + 1j]]),
    GateKind.YHalf: 0.5 * np.array([[1 + 1j, -1 - 1j], [1 + 1j, 1 + 1j]]),
    GateKind.CZ: np.diag([1.0, 1.0, 1.0, -1.0]).astype(np.complex128),
}

_BY_NAME = {k.value: k for k in GateKind}


@dataclass(frozen=True, order=True)
class Gate:
    cycle: int
    qubits: tuple[int, ...]
    kind: GateKind = field(compare=False)

    def __post_init__(self):
        if len(self.qubits) != self.kind.n_qubits:
            raise CircuitError(
                f"{self.kind.value} acts on {self.kind.n_qubits} qubit(s), got {len(self.qubits)}"
            )
        if self.cycle < 0:
            raise CircuitError(f"negative cycle {self.cycle}")

    def __eq__(self, other):
        if not isinstance(other, Gate):
            return NotImplemented
        return (self.cycle, self.qubits, self.kind) == (other.cycle, other.qubits, other.kind)

    def __hash__(self):
        return hash((self.cycle, self.qubits, self.kind))


@dataclass(frozen=True)
class Circuit:
    """A grid circuit as an ordered gate list.

    Instances are validated on construction (qubit range, grid adjacency of
    CZ pairs, one gate per qubit per cycle) and immutable afterwards.
    """

    rows: int
    cols: int
    gates: tuple[Gate, ...]

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise CircuitError(f"bad grid shape {self.rows}x{self.cols}")
        object.__setattr__(self, "gates", tuple(self.gates))
        busy: set[tuple[int, int]] = set()
        for g in self.gates:
            for q in g.qubits:
                if not 0 <= q < self.n_qubits:
                    raise CircuitError(f"qubit {q} out of range for {self.n_qubits} qubits")
                if (g.cycle, q) in busy:
                    raise CircuitError(f"qubit {q} used twice in cycle {g.cycle}")
                busy.add((g.cycle, q))
            if g.kind is GateKind.CZ and not self.adjacent(*g.qubits):
                raise CircuitError(f"cz on non-adjacent qubits {g.qubits}")

    @property
    def n_qubits(self) -> int:
        return self.rows * self.cols

    @property
    def n_cycles(self) -> int:
        return max((g.cycle for g in self.gates), default=-1) + 1

    @property
    def depth_label(self) -> tuple[int, int, int]:
        """The ``(1, m, 1)`` depth triple; files with fewer than two cycles get trailing zeros."""
        n = self.n_cycles
        if n <= 1:
            return (n, 0, 0)
        return (1, n - 2, 1)

    def coords(self, q: int) -> tuple[int, int]:
        return divmod(q, self.cols)

    def adjacent(self, a: int, b: int) -> bool:
        (ra, ca), (rb, cb) = self.coords(a), self.coords(b)
        return abs(ra - rb) + abs(ca - cb) == 1

    def cycles(self) -> list[list[Gate]]:
        """Gates grouped by cycle index, ``0 .. n_cycles-1``."""
        out: list[list[Gate]] = [[] for _ in range(self.n_cycles)]
        for g in self.gates:
            out[g.cycle].append(g)
        return out

    def worldline(self, q: int) -> list[Gate]:
        return [g for g in self.gates if q in g.qubits]

    def has_hadamard_frame(self) -> bool:
        """True when the first and last cycles are full H layers.

        Intermediate cycles may be empty (a CZ layout can have no edges on a
        narrow grid).
        """
        layers = self.cycles()
        if len(layers) < 2:
            return False
        full = set(range(self.n_qubits))
        for layer in (layers[0], layers[-1]):
            if {g.qubits[0] for g in layer if g.kind is GateKind.H} != full or len(layer) != len(full):
                return False
        return True


def _grid_shape(n: int) -> tuple[int, int]:
    rows = max(d for d in range(1, math.isqrt(n) + 1) if n % d == 0)
    return rows, n // rows


_GRID_RE = re.compile(r"^#\s*grid\s*:\s*(\d+)\s*x\s*(\d+)\s*$", re.IGNORECASE)


def parse_circuit(text: str, rows: int | None = None, cols: int | None = None) -> Circuit:
    """Parse circuit text; errors carry the offending line number."""
    n_qubits = None
    hint = None
    gates = []
    header_line = 0
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            m = _GRID_RE.match(line)
            if m:
                hint = (int(m.group(1)), int(m.group(2)))
            continue
        fields = line.split()
        if n_qubits is None:
            if len(fields) != 1 or not fields[0].isdigit() or int(fields[0]) < 1:
                raise CircuitError(f"expected qubit count, got {line!r}", lineno)
            n_qubits = int(fields[0])
            header_line = lineno
            continue
        if len(fields) not in (3, 4):
            raise CircuitError(f"malformed gate line {line!r}", lineno)
        cyc, name, *qs = fields
        kind = _BY_NAME.get(name.lower())
        if kind is None:
            raise CircuitError(f"unknown gate {name!r}", lineno)
        if not cyc.isdigit() or not all(q.isdigit() for q in qs):
            raise CircuitError(f"malformed gate line {line!r}", lineno)
        if len(qs) != kind.n_qubits:
            raise CircuitError(f"{name} takes {kind.n_qubits} qubit(s)", lineno)
        qubits = tuple(int(q) for q in qs)
        for q in qubits:
            if q >= n_qubits:
                raise CircuitError(f"qubit {q} out of range for {n_qubits} qubits", lineno)
        gates.append((lineno, Gate(int(cyc), qubits, kind)))

    if n_qubits is None:
        raise CircuitError("empty circuit file", header_line or None)
    if rows is None or cols is None:
        rows, cols = hint if hint is not None else _grid_shape(n_qubits)
    if rows * cols != n_qubits:
        raise CircuitError(f"grid {rows}x{cols} does not hold {n_qubits} qubits", header_line)

    # Re-run structural checks per line so errors point at the culprit.
    busy: dict[tuple[int, int], int] = {}
    for lineno, g in gates:
        for q in g.qubits:
            if (g.cycle, q) in busy:
                raise CircuitError(
                    f"qubit {q} already used in cycle {g.cycle} (line {busy[g.cycle, q]})", lineno
                )
            busy[g.cycle, q] = lineno
        if g.kind is GateKind.CZ:
            (ra, ca), (rb, cb) = divmod(g.qubits[0], cols), divmod(g.qubits[1], cols)
            if abs(ra - rb) + abs(ca - cb) != 1:
                raise CircuitError(f"cz on non-adjacent qubits {g.qubits}", lineno)
    return Circuit(rows, cols, tuple(g for _, g in gates))


def load_circuit(path) -> Circuit:
    with open(path, encoding="utf-8") as fh:
        return parse_circuit(fh.read())


def serialize_circuit(c: Circuit) -> str:
    """Canonical text: gates ordered by (cycle, first qubit), grid directive included."""
    lines = [f"# grid: {c.rows}x{c.cols}", str(c.n_qubits)]
    for g in sorted(c.gates):
        lines.append(" ".join([str(g.cycle), g.kind.value, *map(str, g.qubits)]))
    return "\n".join(lines) + "\n"


def _layouts() -> tuple:
    # (orientation, parity of the varying coordinate, parity of the fixed coordinate)
    return (
        ("h", 0, 0), ("h", 1, 1), ("v", 0, 0), ("v", 1, 1),
        ("h", 1, 0), ("h", 0, 1), ("v", 1, 0), ("v", 0, 1),
    )


CZ_LAYOUTS = _layouts()


def layout_pairs(rows: int, cols: int, layout: int) -> list[tuple[int, int]]:
    """CZ pairs of one of the eight layouts on a ``rows x cols`` grid.

    Horizontal layout ``(a, b)`` covers edges (r,c)-(r,c+1) with c%2 == a and
    r%2 == b; vertical ``(a, b)`` covers (r,c)-(r+1,c) with r%2 == a and
    c%2 == b. Every grid edge belongs to exactly one layout.
    """
    orient, a, b = CZ_LAYOUTS[layout % 8]
    pairs = []
    for r in range(rows):
        for c in range(cols):
            q = r * cols + c
            if orient == "h" and c + 1 < cols and c % 2 == a and r % 2 == b:
                pairs.append((q, q + 1))
            elif orient == "v" and r + 1 < rows and r % 2 == a and c % 2 == b:
                pairs.append((q, q + cols))
    return pairs


_RANDOM_KINDS = (GateKind.XHalf, GateKind.YHalf, GateKind.T)


def generate_rqc(rows: int, cols: int, m: int, seed: int) -> Circuit:
    """Random grid circuit of depth ``(1, m, 1)``.

    Cycle ``c`` in ``1..m`` applies CZ layout ``(c-1) % 8``. A qubit idle in
    cycle ``c`` that took part in a CZ in cycle ``c-1`` receives a single-qubit
    gate: T if it has had none since the initial H, otherwise a uniform draw
    from {X^1/2, Y^1/2, T} minus its previous single-qubit gate. Randomness is
    numpy's PCG64 seeded with ``seed``, one ``integers(2)`` draw per placed
    non-initial gate in (cycle, qubit) order.
    """
    if rows < 1 or cols < 1:
        raise CircuitError(f"bad grid shape {rows}x{cols}")
    if m < 0:
        raise CircuitError(f"negative cycle count {m}")
    rng = np.random.Generator(np.random.PCG64(seed))
    n = rows * cols
    gates = [Gate(0, (q,), GateKind.H) for q in range(n)]
    last_1q: dict[int, GateKind] = {}
    prev_cz: set[int] = set()
    for cyc in range(1, m + 1):
        pairs = layout_pairs(rows, cols, cyc - 1)
        in_cz = {q for p in pairs for q in p}
        layer = [Gate(cyc, p, GateKind.CZ) for p in pairs]
        for q in range(n):
            if q in in_cz or q not in prev_cz:
                continue
            if q not in last_1q:
                kind = GateKind.T
            else:
                choices = [k for k in _RANDOM_KINDS if k is not last_1q[q]]
                kind = choices[int(rng.integers(len(choices)))]
            last_1q[q] = kind
            layer.append(Gate(cyc, (q,), kind))
        gates.extend(sorted(layer))
        prev_cz = in_cz
    gates.extend(Gate(m + 1, (q,), GateKind.H) for q in range(n))
    return Circuit(rows, cols, tuple(gates))


def check_exclusivity(gates: Iterable[Gate]) -> bool:
    seen = defaultdict(set)
    for g in gates:
        for q in g.qubits:
            if q in seen[g.cycle]:
                return False
            seen[g.cycle].add(q)
    return True


def bits_to_int(bits: str | Sequence[int]) -> int:
    """Row-major bitstring (qubit 0 first) to the integer index used by state vectors."""
    if isinstance(bits, str):
        return int(bits, 2)
    out = 0
    for b in bits:
        out = (out << 1) | int(b)
    return out


def int_to_bits(x: int, n: int) -> str:
    return format(x, f"0{n}b") if n else ""
