"""Grid tensor networks, cuts and contraction plans.

A circuit is folded along each qubit's worldline into one tensor per qubit.
Every CZ is split through its diagonal, ``CZ = sum_k |k><k| (x) Z^k``, so it
contributes a single extent-2 bond between the two qubits (lower index gets
the projector, higher index the ``Z^k`` factor). Bonds are never fused.

Naming: node ``q<i>`` for qubit ``i``; bond ``b<cycle>:<a>-<b>`` for the CZ on
``(a, b)``, ``a < b``; open output index ``o<i>``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .circuit import Circuit, GateKind
from .tensor import ITEMSIZE, Tensor, flop_count, normalize

__all__ = [
    "PlanError",
    "Skeleton",
    "GridNetwork",
    "Cut",
    "PlanStep",
    "StepCost",
    "ContractionPlan",
    "StepShape",
    "CostEstimate",
    "node_name",
    "bond_label",
    "output_label",
    "skeleton_from_circuit",
    "fold_worldlines",
    "apply_cut",
    "annotate",
    "greedy_order",
    "plan_contraction",
    "plan_sampling",
    "decompose_oversized",
    "estimate_cost",
    "load_plan",
    "plan_to_json",
    "reference_plan_7x7",
]

PLAN_FORMAT = "qsim-slice-plan"


class PlanError(ValueError):
    pass


def node_name(q: int) -> str:
    return f"q{q}"


def bond_label(cycle: int, a: int, b: int) -> str:
    a, b = min(a, b), max(a, b)
    return f"b{cycle}:{a}-{b}"


def output_label(q: int) -> str:
    return f"o{q}"


def bond_qubits(label: str) -> tuple[int, int]:
    a, b = label.split(":", 1)[1].split("-")
    return int(a), int(b)


def bond_cycle(label: str) -> int:
    return int(label[1:].split(":", 1)[0])


@dataclass(frozen=True)
class Skeleton:
    """Label structure of a network without data: node name -> labels."""

    nodes: Mapping[str, tuple[str, ...]]
    extents: Mapping[str, int]

    def volume(self, labels: Iterable[str]) -> int:
        return math.prod(self.extents[l] for l in labels)

    def fix(self, labels: Iterable[str]) -> "Skeleton":
        drop = set(labels)
        nodes = {n: tuple(l for l in ls if l not in drop) for n, ls in self.nodes.items()}
        return Skeleton(nodes, {l: e for l, e in self.extents.items() if l not in drop})

    def bonds(self) -> list[str]:
        seen: dict[str, int] = {}
        for ls in self.nodes.values():
            for l in ls:
                seen[l] = seen.get(l, 0) + 1
        return sorted(l for l, k in seen.items() if k == 2)

    def edge_bonds(self, a: int, b: int) -> list[str]:
        a, b = min(a, b), max(a, b)
        found = [l for l in self.nodes.get(node_name(a), ()) if l.startswith("b") and bond_qubits(l) == (a, b)]
        return sorted(found, key=bond_cycle)


def skeleton_from_circuit(c: Circuit, open_qubits: Iterable[int] = ()) -> Skeleton:
    open_set = set(open_qubits)
    nodes: dict[str, list[str]] = {node_name(q): [] for q in range(c.n_qubits)}
    for g in sorted(c.gates):
        if g.kind is GateKind.CZ:
            lab = bond_label(g.cycle, *g.qubits)
            for q in g.qubits:
                nodes[node_name(q)].append(lab)
    extents = {}
    for q in range(c.n_qubits):
        if q in open_set:
            nodes[node_name(q)].append(output_label(q))
        for l in nodes[node_name(q)]:
            extents[l] = 2
    return Skeleton({n: tuple(ls) for n, ls in nodes.items()}, extents)


@dataclass(frozen=True, eq=False)
class GridNetwork:
    """One tensor per grid qubit; bonds map a label to the two node names sharing it."""

    tensors: Mapping[str, Tensor]
    bonds: Mapping[str, tuple[str, str]]
    open_qubits: tuple[int, ...] = ()

    def skeleton(self) -> Skeleton:
        extents = {}
        for t in self.tensors.values():
            extents.update(zip(t.labels, t.dims))
        return Skeleton({n: t.labels for n, t in self.tensors.items()}, extents)

    def fix_outputs(self, bits: Mapping[int, int]) -> "GridNetwork":
        """Close open output indices ``o<q>`` at the given bit values."""
        tensors = dict(self.tensors)
        for q, b in bits.items():
            name = node_name(q)
            tensors[name] = normalize(tensors[name].fix(output_label(q), int(b)))
        still_open = tuple(q for q in self.open_qubits if q not in bits)
        return GridNetwork(tensors, self.bonds, still_open)

    def contract_all(self) -> Tensor:
        """Contract every node in name order; a slow path for checks, not for production runs."""
        from .tensor import contract_ttgt

        items = list(self.tensors.values())
        acc = items[0]
        for t in items[1:]:
            acc = contract_ttgt(acc, t, counter=None, renormalize=True)
        return acc


def _parse_bits(bits, n: int) -> dict[int, int]:
    """Bits as a string/sequence (None or 'x' marks an open qubit) or a dict."""
    if bits is None:
        return {}
    if isinstance(bits, Mapping):
        return {int(q): int(b) for q, b in bits.items()}
    if len(bits) != n:
        raise PlanError(f"bitstring length {len(bits)} != {n} qubits")
    out = {}
    for q, b in enumerate(bits):
        if b is None or b in ("x", "X", "-"):
            continue
        out[q] = int(b)
    return out


def fold_worldlines(c: Circuit, out_bits=None, in_bits=None, open_qubits: Iterable[int] | None = None) -> GridNetwork:
    """Contract every qubit's gates along time into one tensor per qubit.

    ``out_bits`` fixes output values; qubits it leaves unset (or lists in
    ``open_qubits``) keep an open ``o<q>`` index. ``in_bits`` defaults to all
    zeros.
    """
    n = c.n_qubits
    outs = _parse_bits(out_bits, n)
    if out_bits is None and open_qubits is None:
        open_qubits = ()
    ins = _parse_bits(in_bits, n) if in_bits is not None else {}
    open_set = set(range(n)) - set(outs) if open_qubits is None else set(open_qubits)
    open_set -= set(outs)
    missing = set(range(n)) - set(outs) - open_set
    if missing:
        raise PlanError(f"qubits {sorted(missing)} have neither an output bit nor an open index")

    lines: dict[int, list] = {q: [] for q in range(n)}
    for g in sorted(c.gates):
        for q in g.qubits:
            lines[q].append(g)

    tensors = {}
    bonds: dict[str, list[str]] = {}
    for q in range(n):
        state = np.zeros(2, dtype=np.complex128)
        state[ins.get(q, 0)] = 1.0
        labels: list[str] = []
        for g in lines[q]:
            if g.kind is GateKind.CZ:
                lab = bond_label(g.cycle, *g.qubits)
                new = np.zeros(state.shape[:-1] + (2, 2), dtype=np.complex128)
                if q == min(g.qubits):
                    new[..., 0, 0] = state[..., 0]
                    new[..., 1, 1] = state[..., 1]
                else:
                    new[..., 0, :] = state
                    new[..., 1, 0] = state[..., 0]
                    new[..., 1, 1] = -state[..., 1]
                state = new
                labels.append(lab)
                bonds.setdefault(lab, []).append(node_name(q))
            else:
                state = np.tensordot(state, g.kind.matrix, axes=([-1], [1]))
        if q in outs:
            state = state[..., outs[q]]
        else:
            labels.append(output_label(q))
        peak = np.max(np.abs(state))
        exp = math.frexp(peak)[1] if peak > 0 else 0
        tensors[node_name(q)] = normalize(Tensor(tuple(labels), state * 2.0 ** -exp, float(exp)))
    return GridNetwork(tensors, {l: tuple(v) for l, v in bonds.items()}, tuple(sorted(open_set)))


@dataclass(frozen=True)
class Cut:
    """A multi-index cut over bond labels.

    Slices are contiguous ranges of ``group_size`` values of the row-major
    multi-index (first label slowest). A range of that form fixes a prefix of
    the labels and sums the remaining suffix inside the slice, so
    ``group_size`` must equal the product of a suffix of the extents.
    """

    labels: tuple[str, ...] = ()
    group_size: int = 1

    def _split(self, extents: Mapping[str, int]) -> int:
        acc, j = 1, len(self.labels)
        while acc < self.group_size and j > 0:
            j -= 1
            acc *= extents[self.labels[j]]
        if acc != self.group_size:
            raise PlanError(f"group size {self.group_size} is not a product of trailing cut extents")
        return j

    def fixed_labels(self, extents: Mapping[str, int]) -> tuple[str, ...]:
        return self.labels[: self._split(extents)]

    def n_slices(self, extents: Mapping[str, int]) -> int:
        return math.prod(extents[l] for l in self.fixed_labels(extents))

    def assignment(self, slice_id: int, extents: Mapping[str, int]) -> dict[str, int]:
        fixed = self.fixed_labels(extents)
        total = math.prod(extents[l] for l in fixed)
        if not 0 <= slice_id < total:
            raise PlanError(f"slice {slice_id} out of range for {total} slices")
        out = {}
        for lab in reversed(fixed):
            slice_id, out[lab] = divmod(slice_id, extents[lab])
        return {l: out[l] for l in fixed}


def apply_cut(g: GridNetwork, cut: Cut, slice_id: int) -> GridNetwork:
    """Fix the cut's prefix labels to the values of ``slice_id``."""
    extents = g.skeleton().extents
    for lab in cut.labels:
        if lab not in g.bonds:
            raise PlanError(f"cut label {lab!r} is not a bond of this network")
    assign = cut.assignment(slice_id, extents)
    if not assign:
        return g
    tensors = {}
    for name, t in g.tensors.items():
        for lab in t.labels:
            if lab in assign:
                t = t.fix(lab, assign[lab])
        tensors[name] = t
    bonds = {l: v for l, v in g.bonds.items() if l not in assign}
    return GridNetwork(tensors, bonds, g.open_qubits)


@dataclass(frozen=True)
class PlanStep:
    left: str
    right: str
    out: str


@dataclass(frozen=True)
class StepCost:
    out_labels: tuple[str, ...]
    volumes: tuple[int, int, int]  # (output, left, right)
    flops: int
    working_set: int  # bytes: inputs + output + transpose scratch of the larger input
    live_bytes: int  # every live tensor plus this step's output and scratch

    @property
    def bytes_touched(self) -> int:
        return sum(self.volumes) * ITEMSIZE

    @property
    def intensity(self) -> float:
        return self.flops / self.bytes_touched

    @property
    def out_rank(self) -> int:
        return len(self.out_labels)


def _out_labels(left: Sequence[str], right: Sequence[str]) -> tuple[str, ...]:
    rs, ls = set(right), set(left)
    return tuple(l for l in left if l not in rs) + tuple(l for l in right if l not in ls)


def annotate(sk: Skeleton, steps: Sequence[PlanStep]) -> tuple[list[StepCost], int, tuple[str, ...]]:
    """Validate ``steps`` against ``sk`` and price every step.

    Returns the per-step costs, the predicted peak memory in bytes and the
    labels of the final tensor.
    """
    live = dict(sk.nodes)
    live_bytes = sum(sk.volume(ls) for ls in live.values()) * ITEMSIZE
    peak = live_bytes
    costs = []
    for i, st in enumerate(steps):
        if st.left not in live or st.right not in live or st.left == st.right:
            raise PlanError(f"step {i}: operands {st.left!r}, {st.right!r} are not live tensors")
        if st.out in live:
            raise PlanError(f"step {i}: output name {st.out!r} already live")
        l, r = live.pop(st.left), live.pop(st.right)
        out = _out_labels(l, r)
        vo, vl, vr = sk.volume(out), sk.volume(l), sk.volume(r)
        ws = (vo + vl + vr + max(vl, vr)) * ITEMSIZE
        during = live_bytes + (vo + max(vl, vr)) * ITEMSIZE
        peak = max(peak, during)
        live_bytes += (vo - vl - vr) * ITEMSIZE
        live[st.out] = out
        costs.append(StepCost(out, (vo, vl, vr), flop_count(vo, vl, vr), ws, during))
    if len(live) != 1:
        raise PlanError(f"plan leaves {len(live)} tensors uncontracted")
    (final,) = live.values()
    bonds = set(sk.bonds())
    stray = [l for l in final if l in bonds]
    if stray:
        raise PlanError(f"bonds {stray} survive the plan")
    return costs, peak, final


def _pair_key(sk: Skeleton, a: str, b: str, la, lb):
    out = _out_labels(la, lb)
    vo = sk.volume(out)
    return (vo, flop_count(vo, sk.volume(la), sk.volume(lb)), _name_key(a), _name_key(b)), out


def _name_key(name: str):
    return (name[0], int(name[1:])) if name[1:].isdigit() else (name, 0)


def greedy_order(sk: Skeleton, names: Sequence[str] | None = None, start: int = 0,
                 prefix: str = "t") -> list[PlanStep]:
    """Repeatedly contract the connected pair with the smallest result.

    Ties break on flops, then node names, so the order is a pure function of
    the skeleton. Disconnected pieces are joined by outer products last.
    ``names`` restricts the contraction to a subset of nodes (it then ends
    with one tensor for that subset).
    """
    live = {n: sk.nodes[n] for n in (names if names is not None else sk.nodes)}
    steps = []
    counter = start
    while len(live) > 1:
        best = None
        items = sorted(live.items(), key=lambda kv: _name_key(kv[0]))
        for connected in (True, False):
            for (a, la), (b, lb) in combinations(items, 2):
                if connected and not (set(la) & set(lb)):
                    continue
                key, out = _pair_key(sk, a, b, la, lb)
                if best is None or key < best[0]:
                    best = (key, a, b, out)
            if best is not None:
                break
        _, a, b, out = best
        name = f"{prefix}{counter}"
        counter += 1
        steps.append(PlanStep(a, b, name))
        del live[a], live[b]
        live[name] = out
    return steps


def _absorb_order(sk: Skeleton, core: tuple[str, tuple[str, ...]], rest: Sequence[str],
                  start: int, prefix: str = "t") -> list[PlanStep]:
    """Absorb ``rest`` into the ``core`` tensor one node at a time (smallest result first)."""
    name, labels = core
    remaining = {n: sk.nodes[n] for n in rest}
    steps = []
    counter = start
    while remaining:
        best = None
        for n in sorted(remaining, key=_name_key):
            key, out = _pair_key(sk, name, n, labels, remaining[n])
            key = (not (set(labels) & set(remaining[n])),) + key
            if best is None or key < best[0]:
                best = (key, n, out)
        _, n, out = best
        new = f"{prefix}{counter}"
        counter += 1
        steps.append(PlanStep(name, n, new))
        del remaining[n]
        name, labels = new, out
    return steps


@dataclass(frozen=True, eq=False)
class ContractionPlan:
    cut: Cut
    steps: tuple[PlanStep, ...]
    costs: tuple[StepCost, ...]
    peak_memory: int
    n_slices: int
    open_qubits: tuple[int, ...] = ()
    grid: tuple[int, int] | None = None
    name: str = ""
    cut_edges: tuple[tuple[int, int], ...] | None = None
    regions: Mapping[str, list[int]] = field(default_factory=dict)

    @property
    def flops_per_slice(self) -> int:
        return sum(c.flops for c in self.costs)

    @property
    def max_rank(self) -> int:
        return max((c.out_rank for c in self.costs), default=0)

    @property
    def final_labels(self) -> tuple[str, ...]:
        return self.costs[-1].out_labels if self.costs else ()


def _bind(sk: Skeleton, cut: Cut, steps: Sequence[PlanStep], **meta) -> ContractionPlan:
    for lab in cut.labels:
        if lab not in sk.extents:
            raise PlanError(f"cut label {lab!r} is not in the network")
    fixed = cut.fixed_labels(sk.extents)
    sliced = sk.fix(fixed)
    costs, peak, _ = annotate(sliced, steps)
    return ContractionPlan(cut, tuple(steps), tuple(costs), peak, cut.n_slices(sk.extents), **meta)


def _as_skeleton(g) -> Skeleton:
    return g if isinstance(g, Skeleton) else g.skeleton()


def plan_contraction(g, memory_budget: int | None = None, strategy: str | Path | Mapping = "greedy",
                     cut: Cut | Sequence[str] | None = None, grid: tuple[int, int] | None = None) -> ContractionPlan:
    """Order the contraction of ``g`` and choose cuts so the plan fits ``memory_budget``.

    ``strategy`` is ``"greedy"`` or a plan file (path or parsed JSON) whose
    steps are used verbatim. With the greedy strategy, bonds are added to the
    cut one at a time (the candidate that lowers the predicted peak the most)
    until the plan fits; forced ``cut`` labels are applied first. Automatic
    cut labels are then grouped into slices of the largest power-of-two size
    that still fits.
    """
    sk = _as_skeleton(g)
    open_q = tuple(sorted(int(l[1:]) for ls in sk.nodes.values() for l in ls if l.startswith("o")))
    if memory_budget is not None:
        biggest = max(sk.volume(ls) for ls in sk.nodes.values()) * ITEMSIZE
        if memory_budget < biggest:
            raise PlanError(f"budget {memory_budget} B is below the largest node tensor ({biggest} B)")

    if not (isinstance(strategy, str) and strategy == "greedy"):
        plan = load_plan(strategy, sk)
        if memory_budget is not None and plan.peak_memory > memory_budget:
            raise PlanError(f"manual plan needs {plan.peak_memory} B, budget is {memory_budget} B")
        return plan

    forced = tuple(cut.labels if isinstance(cut, Cut) else (cut or ()))
    forced_group = cut.group_size if isinstance(cut, Cut) else 1
    meta = dict(open_qubits=open_q, grid=grid, name="greedy")

    def build(labels: tuple[str, ...], group: int = 1) -> ContractionPlan:
        c = Cut(labels, group)
        fixed = c.fixed_labels(sk.extents)
        return _bind(sk, c, greedy_order(sk.fix(fixed)), **meta)

    labels = forced
    plan = build(labels, forced_group)
    if memory_budget is None or plan.peak_memory <= memory_budget:
        return plan
    if forced_group != 1:
        raise PlanError("cannot extend a grouped forced cut")

    while plan.peak_memory > memory_budget:
        worst = max(range(len(plan.costs)), key=lambda i: plan.costs[i].live_bytes)
        st = plan.steps[worst]
        fixed = set(labels)
        live = _live_labels(sk.fix(fixed), plan.steps, worst)
        candidates = sorted({l for l in live if l.startswith("b") and l not in fixed})
        if not candidates:
            raise PlanError(f"no plan under {memory_budget} B: nothing left to cut at step {st}")
        best = None
        for lab in candidates:
            trial = build(labels + (lab,))
            key = (trial.peak_memory, trial.flops_per_slice * trial.n_slices, lab)
            if best is None or key < best[0]:
                best = (key, lab, trial)
        _, lab, plan = best
        labels = labels + (lab,)

    # Grow the slice group over trailing automatic labels while the plan still fits.
    auto = len(labels) - len(forced)
    for j in range(auto, 0, -1):
        group = math.prod(sk.extents[l] for l in labels[len(labels) - j :])
        trial = build(labels, group)
        if trial.peak_memory <= memory_budget:
            return trial
    return plan


def _live_labels(sk: Skeleton, steps: Sequence[PlanStep], upto: int) -> set[str]:
    live = dict(sk.nodes)
    for st in steps[: upto + 1]:
        l, r = live.pop(st.left), live.pop(st.right)
        live[st.out] = _out_labels(l, r)
        last = set(l) | set(r)
    return last


def plan_sampling(g, x2_region: Iterable[int], cut: Cut | Sequence[str] | None = None,
                  grid: tuple[int, int] | None = None) -> ContractionPlan:
    """Plan for batched amplitudes over the open ``x2_region`` qubits.

    Nodes outside the region are contracted greedily into one tensor (the part
    that is recycled across the batch), which then absorbs the region's nodes
    one at a time. ``g`` must have open outputs on exactly ``x2_region``.
    """
    sk = _as_skeleton(g)
    x2 = sorted(set(x2_region))
    open_q = sorted(int(l[1:]) for ls in sk.nodes.values() for l in ls if l.startswith("o"))
    if open_q != x2:
        raise PlanError(f"network open qubits {open_q} differ from x2 region {x2}")
    c = cut if isinstance(cut, Cut) else Cut(tuple(cut or ()))
    sliced = sk.fix(c.fixed_labels(sk.extents))
    region = [node_name(q) for q in x2]
    others = [n for n in sliced.nodes if n not in region]
    if not others:
        steps = greedy_order(sliced)
    else:
        steps = greedy_order(sliced, others)
        core = (steps[-1].out, annotate_partial(sliced, steps)) if steps else (others[0], sliced.nodes[others[0]])
        steps += _absorb_order(sliced, core, region, start=len(steps))
    return _bind(sk, c, steps, open_qubits=tuple(x2), grid=grid, name="sampling",
                 regions={"A": [int(n[1:]) for n in others], "C": x2})


def annotate_partial(sk: Skeleton, steps: Sequence[PlanStep]) -> tuple[str, ...]:
    live = dict(sk.nodes)
    for st in steps:
        live[st.out] = _out_labels(live.pop(st.left), live.pop(st.right))
    return live[steps[-1].out]


# --- out-of-core decomposition ------------------------------------------------


@dataclass(frozen=True)
class StepShape:
    """A pairwise contraction restricted to index ranges.

    ``ranges`` maps every label of both operands to a half-open ``(lo, hi)``.
    """

    left: tuple[str, ...]
    right: tuple[str, ...]
    out: tuple[str, ...]
    ranges: Mapping[str, tuple[int, int]]

    @classmethod
    def from_tensors(cls, left: Tensor, right: Tensor, out: Sequence[str] | None = None) -> "StepShape":
        ranges = {l: (0, d) for l, d in zip(left.labels, left.dims)}
        ranges.update({l: (0, d) for l, d in zip(right.labels, right.dims)})
        return cls(left.labels, right.labels, tuple(out) if out else _out_labels(left.labels, right.labels), ranges)

    def extent(self, label: str) -> int:
        lo, hi = self.ranges[label]
        return hi - lo

    def volume(self, labels: Iterable[str]) -> int:
        return math.prod(self.extent(l) for l in labels)

    @property
    def contracted(self) -> tuple[str, ...]:
        rs = set(self.right)
        return tuple(l for l in self.left if l in rs)

    @property
    def volumes(self) -> tuple[int, int, int]:
        return self.volume(self.out), self.volume(self.left), self.volume(self.right)

    @property
    def flops(self) -> int:
        return flop_count(*self.volumes)

    @property
    def working_set(self) -> int:
        vo, vl, vr = self.volumes
        return (vo + vl + vr + max(vl, vr)) * ITEMSIZE

    def matrix_dims(self) -> dict[str, tuple[str, ...]]:
        con = set(self.contracted)
        return {
            "M": tuple(l for l in self.left if l not in con),
            "N": tuple(l for l in self.right if l not in con),
            "K": tuple(l for l in self.left if l in con),
        }

    def split(self, label: str) -> tuple["StepShape", "StepShape"]:
        lo, hi = self.ranges[label]
        mid = lo + (hi - lo) // 2
        a, b = dict(self.ranges), dict(self.ranges)
        a[label] = (lo, mid)
        b[label] = (mid, hi)
        return StepShape(self.left, self.right, self.out, a), StepShape(self.left, self.right, self.out, b)


def decompose_oversized(step: StepShape, memory_budget: int) -> list[StepShape]:
    """Recursively halve ``step`` until every derived step's working set fits.

    Each split halves the largest label of the largest matricized dimension
    (M, N or K of the TTGT GEMM; ties prefer M, N, K, then label order).
    Splitting a contracted label yields partial sums the executor accumulates.
    """
    if step.working_set <= memory_budget:
        return [step]
    dims = step.matrix_dims()
    order = sorted(dims, key=lambda k: (-step.volume(dims[k]), "MNK".index(k)))
    for key in order:
        splittable = [l for l in dims[key] if step.extent(l) > 1]
        if splittable:
            label = min(splittable, key=lambda l: (-step.extent(l), l))
            break
    else:
        raise PlanError(f"step needs {step.working_set} B with every range at extent 1; budget {memory_budget} B")
    lo, hi = step.split(label)
    return decompose_oversized(lo, memory_budget) + decompose_oversized(hi, memory_budget)


# --- cost estimation ----------------------------------------------------------


@dataclass(frozen=True)
class CostEstimate:
    total_flops: int
    flops_per_slice: int
    n_slices: int
    n_amplitudes: int
    peak_memory: int
    intensities: tuple[float, ...]
    largest_step: int

    def as_dict(self) -> dict:
        return {
            "total_flops": self.total_flops,
            "flops_per_slice": self.flops_per_slice,
            "n_slices": self.n_slices,
            "n_amplitudes": self.n_amplitudes,
            "peak_memory": self.peak_memory,
            "intensities": list(self.intensities),
            "largest_step": self.largest_step,
        }


def estimate_cost(plan: ContractionPlan, n_slices: int | None = None, n_amplitudes: int = 1) -> CostEstimate:
    """Analytic flops (sum of ``8 sqrt(v0 v1 v2)`` per step) and memory for a run."""
    k = plan.n_slices if n_slices is None else n_slices
    per = plan.flops_per_slice
    largest = max(range(len(plan.costs)), key=lambda i: plan.costs[i].flops) if plan.costs else -1
    return CostEstimate(per * k * n_amplitudes, per, k, n_amplitudes, plan.peak_memory,
                        tuple(c.intensity for c in plan.costs), largest)


# --- plan files ---------------------------------------------------------------


def plan_to_json(plan: ContractionPlan) -> dict:
    """Serialize a bound plan. ``annotations`` are informational; loaders recompute them."""
    cut: dict = {"group_size": plan.cut.group_size}
    if plan.cut_edges is not None:
        cut["edges"] = [list(e) for e in plan.cut_edges]
    else:
        cut["labels"] = list(plan.cut.labels)
    return {
        "format": PLAN_FORMAT,
        "version": 1,
        "name": plan.name,
        "grid": list(plan.grid) if plan.grid else None,
        "open_qubits": list(plan.open_qubits),
        "cut": cut,
        "regions": {k: list(v) for k, v in plan.regions.items()},
        "steps": [[s.left, s.right, s.out] for s in plan.steps],
        "annotations": {
            "n_slices": plan.n_slices,
            "cut_labels": list(plan.cut.labels),
            "peak_memory": plan.peak_memory,
            "flops_per_slice": plan.flops_per_slice,
            "max_rank": plan.max_rank,
            "steps": [
                {"out_rank": c.out_rank, "volumes": list(c.volumes), "flops": c.flops,
                 "working_set": c.working_set, "intensity": c.intensity}
                for c in plan.costs
            ],
        },
    }


def load_plan(source, g) -> ContractionPlan:
    """Load a plan file (path, JSON text or dict) and bind it to network ``g``.

    Cuts may name bond labels directly or grid edges (``"edges": [[a, b]]``,
    meaning every bond between qubits ``a`` and ``b``, in cycle order).
    """
    if isinstance(source, Mapping):
        doc = dict(source)
    else:
        text = Path(source).read_text(encoding="utf-8") if not str(source).lstrip().startswith("{") else str(source)
        doc = json.loads(text)
    if doc.get("format") != PLAN_FORMAT:
        raise PlanError(f"not a {PLAN_FORMAT} document")
    sk = _as_skeleton(g)
    cut_doc = doc.get("cut", {})
    edges = None
    if "edges" in cut_doc:
        edges = tuple((int(a), int(b)) for a, b in cut_doc["edges"])
        labels: list[str] = []
        for a, b in edges:
            found = sk.edge_bonds(a, b)
            if not found:
                raise PlanError(f"cut edge ({a}, {b}) carries no bonds in this circuit")
            labels.extend(found)
    else:
        labels = list(cut_doc.get("labels", []))
    cut = Cut(tuple(labels), int(cut_doc.get("group_size", 1)))
    steps = [PlanStep(*s) for s in doc["steps"]]
    open_q = tuple(doc.get("open_qubits", []))
    sk_open = sorted(int(l[1:]) for ls in sk.nodes.values() for l in ls if l.startswith("o"))
    if sorted(open_q) != sk_open:
        raise PlanError(f"plan expects open qubits {sorted(open_q)}, network has {sk_open}")
    grid = tuple(doc["grid"]) if doc.get("grid") else None
    try:
        return _bind(sk, cut, steps, open_qubits=open_q, grid=grid, name=doc.get("name", ""),
                     cut_edges=edges, regions=doc.get("regions", {}))
    except KeyError as e:
        raise PlanError(f"plan does not match the network: unknown node or label {e}") from None


def _block(rows: Iterable[int], cols: Iterable[int], width: int) -> list[int]:
    return [r * width + c for r in rows for c in cols]


def reference_plan_7x7(c: Circuit) -> ContractionPlan:
    """Hand-made cut and ordering for 7x7 grids of depth (1+40+1).

    Two horizontal edges, (4,2)-(4,3) and (5,2)-(5,3), are cut. Region A is
    rows 0-2 x cols 0-3, B is rows 3-6 x cols 0-2, D is rows 0-2 x cols 4-6 and
    C is rows 3-6 x cols 3-6. The 3x3 core of A is contracted with B, the rest
    of A is absorbed, the product meets D, and C is absorbed one tensor at a
    time in row-major order. Every region is swept starting from the grid wall.
    """
    if (c.rows, c.cols) != (7, 7):
        raise PlanError("reference plan is for 7x7 grids")
    w = 7
    a_core = _block(range(3), range(3), w)
    a_rest = _block(range(3), [3], w)
    b = _block(range(6, 2, -1), range(3), w)
    d = _block(range(3), range(6, 3, -1), w)
    cc = _block(range(3, 7), range(3, 7), w)
    edges = ((4 * w + 2, 4 * w + 3), (5 * w + 2, 5 * w + 3))

    def sweep(nodes: list[int], tag: str) -> list[PlanStep]:
        steps, acc = [], node_name(nodes[0])
        for i, q in enumerate(nodes[1:]):
            out = f"{tag}{i}"
            steps.append(PlanStep(acc, node_name(q), out))
            acc = out
        return steps

    steps = sweep(a_core, "A")
    steps += sweep(b, "B")
    acc = "AB"
    steps.append(PlanStep(steps[len(a_core) - 2].out, steps[-1].out, acc))
    for i, q in enumerate(a_rest):
        steps.append(PlanStep(acc, node_name(q), f"AB{i}"))
        acc = f"AB{i}"
    steps += sweep(d, "D")
    steps.append(PlanStep(acc, steps[-1].out, "ABD"))
    acc = "ABD"
    for i, q in enumerate(cc):
        steps.append(PlanStep(acc, node_name(q), f"ABDC{i}"))
        acc = f"ABDC{i}"

    sk = skeleton_from_circuit(c)
    labels = []
    for e in edges:
        labels.extend(sk.edge_bonds(*e))
    regions = {"A": a_core + a_rest, "B": b, "C": cc, "D": d}
    return _bind(sk, Cut(tuple(labels)), steps, grid=(7, 7), name="7x7-reference",
                 cut_edges=edges, regions=regions)
