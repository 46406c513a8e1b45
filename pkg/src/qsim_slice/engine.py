"""Slice-parallel execution of contraction plans.

Each slice of the cut is an independent task. Tasks never talk to each other;
their path contributions are merged by the collector in ascending slice order
in double precision, so results do not depend on the number of workers.
"""

from __future__ import annotations

import logging
import math
import multiprocessing as mp
import os
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .circuit import Circuit
from .planner import (
    ContractionPlan,
    GridNetwork,
    PlanError,
    StepShape,
    annotate,
    apply_cut,
    decompose_oversized,
    fold_worldlines,
    node_name,
    output_label,
    skeleton_from_circuit,
)
from .tensor import ITEMSIZE, FlopCounter, Tensor, contract_ttgt, normalize, transpose

log = logging.getLogger(__name__)

__all__ = [
    "EngineError",
    "SliceError",
    "SliceTask",
    "PathAccumulator",
    "RunMetrics",
    "BuddyArena",
    "parse_fraction",
    "select_slices",
    "schedule",
    "pipeline_execute",
    "execute_plan",
    "run_batches",
    "run_amplitudes",
    "BatchEvaluator",
]


class EngineError(RuntimeError):
    pass


class SliceError(EngineError):
    def __init__(self, slice_id: int, detail: str):
        self.slice_id = slice_id
        super().__init__(f"slice {slice_id} failed: {detail}")


def parse_fraction(f) -> Fraction:
    if isinstance(f, Fraction):
        return f
    if isinstance(f, str) and "/" in f:
        k, K = f.split("/")
        return Fraction(int(k), int(K))
    return Fraction(f).limit_denominator(1 << 20)


def select_slices(n_slices: int, fraction, seed: int = 0) -> list[int]:
    """The ``k = f * K`` slices of a run: ``k`` consecutive ids from a seeded offset, sorted.

    ``f`` must be a multiple of ``1/K``. The offset is ``PCG64(seed).integers(K)``.
    """
    f = parse_fraction(fraction)
    k = f * n_slices
    if k.denominator != 1 or not 1 <= k <= n_slices:
        raise EngineError(f"fraction {f} is not k/{n_slices} with 1 <= k <= {n_slices}")
    k = int(k)
    if k == n_slices:
        return list(range(n_slices))
    offset = int(np.random.Generator(np.random.PCG64(seed)).integers(n_slices))
    return sorted((offset + i) % n_slices for i in range(k))


@dataclass
class SliceTask:
    slice_id: int
    status: str = "pending"


class PathAccumulator:
    """Per-target running sums of path contributions in complex128.

    Contributions are buffered and merged in ascending slice order on
    :meth:`finalize`; only the collector writes here.
    """

    def __init__(self, shape: tuple[int, ...]):
        self.shape = shape
        self._parts: dict[int, np.ndarray] = {}

    def add(self, slice_id: int, values: np.ndarray) -> None:
        if slice_id in self._parts:
            raise EngineError(f"slice {slice_id} contributed twice")
        self._parts[slice_id] = np.asarray(values, dtype=np.complex128).reshape(self.shape)

    @property
    def count(self) -> int:
        return len(self._parts)

    def finalize(self, descending: bool = False) -> np.ndarray:
        total = np.zeros(self.shape, dtype=np.complex128)
        for sid in sorted(self._parts, reverse=descending):
            total += self._parts[sid]
        return total


@dataclass
class RunMetrics:
    total_flops: int = 0
    wall_time: float = 0.0
    max_step_rate: float = 0.0
    c_a: float = 0.0
    c_p: float = 0.0
    peak_memory: int = 0
    predicted_peak_memory: int = 0
    n_slices: int = 0
    n_slices_total: int = 0
    n_targets: int = 0
    workers: int = 1
    largest_step: int = -1

    def as_dict(self) -> dict:
        return dict(self.__dict__)


# --- scratch arena --------------------------------------------------------------


class BuddyArena:
    """Power-of-two buddy allocator over one preallocated byte buffer."""

    def __init__(self, size: int, min_block: int = 256):
        self.min_order = max(0, (min_block - 1).bit_length())
        self.max_order = max(self.min_order, (size - 1).bit_length())
        self.size = 1 << self.max_order
        self.buffer = np.empty(self.size, dtype=np.uint8)
        self._free: dict[int, set[int]] = {o: set() for o in range(self.min_order, self.max_order + 1)}
        self._free[self.max_order].add(0)
        self._used: dict[int, int] = {}

    def _order(self, nbytes: int) -> int:
        return max(self.min_order, (max(nbytes, 1) - 1).bit_length())

    def alloc(self, nbytes: int) -> int | None:
        """Offset of a block of at least ``nbytes``, or None when no block is free."""
        order = self._order(nbytes)
        if order > self.max_order:
            return None
        o = order
        while o <= self.max_order and not self._free[o]:
            o += 1
        if o > self.max_order:
            return None
        off = min(self._free[o])
        self._free[o].remove(off)
        while o > order:
            o -= 1
            self._free[o].add(off + (1 << o))
        self._used[off] = order
        return off

    def free(self, off: int) -> None:
        order = self._used.pop(off)
        while order < self.max_order:
            buddy = off ^ (1 << order)
            if buddy not in self._free[order]:
                break
            self._free[order].remove(buddy)
            off = min(off, buddy)
            order += 1
        self._free[order].add(off)

    def fits(self, nbytes: int) -> bool:
        return self._order(nbytes) <= self.max_order

    def view(self, off: int, shape: tuple[int, ...], dtype=np.complex64) -> np.ndarray:
        n = math.prod(shape) * np.dtype(dtype).itemsize
        return self.buffer[off : off + n].view(dtype).reshape(shape)

    @property
    def in_use(self) -> int:
        return sum(1 << o for o in self._used.values())


# --- pipelined out-of-core step execution ---------------------------------------


@dataclass
class _Op:
    index: int
    shape: StepShape
    stage: int = 0  # 0 wait, 1 acquired, 2 loaded, 3 executing, 4 executed, 5 done
    offset: int | None = None
    inputs: tuple | None = None
    future: object = None
    result: np.ndarray | None = None


@dataclass
class PipelineStats:
    retries: int = 0
    max_in_flight: int = 0
    events: list = field(default_factory=list)


def _ranges(shape: StepShape, labels: Sequence[str]) -> tuple[slice, ...]:
    return tuple(slice(*shape.ranges[l]) for l in labels)


def pipeline_execute(
    steps: Sequence[StepShape],
    left: Tensor,
    right: Tensor,
    concurrency_depth: int = 2,
    arena: BuddyArena | None = None,
    counter: FlopCounter | None = None,
    stats: PipelineStats | None = None,
) -> Tensor:
    """Run derived steps of one contraction and assemble the full output.

    Every step goes through five stages: acquire arena space, load its input
    slices, execute (TTGT on a helper thread), accumulate into the output in
    step order, release. A step whose arena request fails waits and retries
    after another step releases. At most ``concurrency_depth`` steps are past
    stage 0 at any time.
    """
    if not steps:
        raise EngineError("no steps to execute")
    out_labels = steps[0].out
    full = {l: d for l, d in zip(left.labels, left.dims)}
    full.update(zip(right.labels, right.dims))
    out = np.zeros(tuple(full[l] for l in out_labels), dtype=np.complex64)
    stats = stats if stats is not None else PipelineStats()
    if arena is None:
        arena = BuddyArena(max(s.working_set for s in steps) * max(1, concurrency_depth))
    for s in steps:
        if not arena.fits(s.working_set):
            raise EngineError(f"derived step needs {s.working_set} B, arena holds {arena.size} B")

    pending = [_Op(i, s) for i, s in enumerate(steps)]
    active: list[_Op] = []
    next_to_accumulate = 0
    pool = ThreadPoolExecutor(max_workers=max(1, concurrency_depth))
    try:
        while pending or active:
            progressed = False
            while pending and len(active) < concurrency_depth:
                active.append(pending.pop(0))
                progressed = True
            stats.max_in_flight = max(stats.max_in_flight, len(active))
            for op in list(active):
                sh = op.shape
                if op.stage == 0:
                    if any(o.stage == 0 for o in active if o.index < op.index):
                        continue  # acquire in step order so accumulation can always drain
                    off = arena.alloc(sh.working_set)
                    if off is None:
                        stats.retries += 1
                        stats.events.append(("retry", op.index))
                        continue
                    op.offset, op.stage = off, 1
                    stats.events.append(("acquire", op.index))
                    progressed = True
                if op.stage == 1:
                    vl, vr = sh.volume(sh.left), sh.volume(sh.right)
                    lbuf = arena.view(op.offset, tuple(sh.extent(l) for l in sh.left))
                    rbuf = arena.view(op.offset + vl * ITEMSIZE, tuple(sh.extent(l) for l in sh.right))
                    lbuf[...] = left.data[_ranges(sh, sh.left)]
                    rbuf[...] = right.data[_ranges(sh, sh.right)]
                    op.inputs = (Tensor(sh.left, lbuf), Tensor(sh.right, rbuf))
                    op.stage = 2
                    stats.events.append(("load", op.index))
                    progressed = True
                if op.stage == 2:
                    a, b = op.inputs
                    op.future = pool.submit(contract_ttgt, a, b, sh.out, counter=counter)
                    op.stage = 3
                    stats.events.append(("execute", op.index))
                    progressed = True
                    continue  # yield to the next op while this one runs
                if op.stage == 3 and op.future.done():
                    op.result = op.future.result().data
                    op.stage = 4
                    progressed = True
                if op.stage == 4 and op.index == next_to_accumulate:
                    out[_ranges(sh, sh.out)] += op.result
                    next_to_accumulate += 1
                    stats.events.append(("accumulate", op.index))
                    op.stage = 5
                if op.stage == 5:
                    arena.free(op.offset)
                    op.inputs = op.result = None
                    active.remove(op)
                    stats.events.append(("release", op.index))
                    progressed = True
            if not progressed:
                running = [op.future for op in active if op.stage == 3]
                if running:
                    running[0].result()
                else:
                    raise EngineError("pipeline stalled: no step can acquire arena space")
    finally:
        pool.shutdown(wait=True)
    return Tensor(out_labels, out, left.log_scale + right.log_scale)


# --- plan execution -------------------------------------------------------------


@dataclass
class _ExecStats:
    step_times: list[float]
    peak_bytes: int


def execute_plan(
    net: GridNetwork,
    plan: ContractionPlan,
    counter: FlopCounter | None = None,
    step_budget: int | None = None,
    concurrency_depth: int = 2,
    stats: _ExecStats | None = None,
) -> Tensor:
    """Contract a (sliced) network following ``plan``; the result's open labels are sorted by qubit."""
    live = dict(net.tensors)
    live_bytes = sum(t.nbytes for t in live.values())
    peak = live_bytes
    for i, st in enumerate(plan.steps):
        try:
            a, b = live.pop(st.left), live.pop(st.right)
        except KeyError as e:
            raise PlanError(f"plan step {i} refers to missing tensor {e}") from None
        t0 = time.perf_counter()
        shape = StepShape.from_tensors(a, b)
        if step_budget is not None and shape.working_set > step_budget:
            derived = decompose_oversized(shape, step_budget)
            arena = BuddyArena(step_budget)
            out = normalize(pipeline_execute(derived, a, b, concurrency_depth, arena, counter))
        else:
            out = contract_ttgt(a, b, counter=counter, renormalize=True)
        if stats is not None:
            stats.step_times[i] += time.perf_counter() - t0
        peak = max(peak, live_bytes + out.nbytes + max(a.nbytes, b.nbytes))
        live_bytes += out.nbytes - a.nbytes - b.nbytes
        live[st.out] = out
    if stats is not None:
        stats.peak_bytes = max(stats.peak_bytes, peak)
    if len(live) != 1:
        raise PlanError(f"plan left {len(live)} tensors")
    (final,) = live.values()
    order = sorted(final.labels, key=lambda l: int(l[1:]))
    return transpose(final, order)


# --- jobs ----------------------------------------------------------------------


@dataclass
class _Job:
    network: GridNetwork  # outputs all open, input fixed
    plan: ContractionPlan
    targets: list[dict[int, int]]
    step_budget: int | None = None


_JOB: _Job | None = None
_BARRIER = None


def _prepare(circuit: Circuit, plan: ContractionPlan, targets: list[dict[int, int]],
             step_budget: int | None) -> _Job:
    net = fold_worldlines(circuit, open_qubits=range(circuit.n_qubits))
    return _Job(net, plan, targets, step_budget)


def _init_worker(circuit, plan, targets, step_budget, barrier):
    global _JOB, _BARRIER
    _JOB = _prepare(circuit, plan, targets, step_budget)
    _BARRIER = barrier


def _wait_barrier(_):
    if _BARRIER is not None:
        _BARRIER.wait(timeout=120)
    return os.getpid()


def _run_slice(slice_id: int, job: _Job | None = None):
    job = job or _JOB
    counter = FlopCounter()
    st = _ExecStats([0.0] * len(job.plan.steps), 0)
    sliced = apply_cut(job.network, job.plan.cut, slice_id)
    batch = 1 << len(job.plan.open_qubits)
    values = np.zeros((len(job.targets), batch), dtype=np.complex128)
    for j, bits in enumerate(job.targets):
        net = sliced.fix_outputs(bits)
        final = execute_plan(net, job.plan, counter, job.step_budget, stats=st)
        values[j] = final.value().reshape(-1)
    return slice_id, values, counter.total, st.step_times, st.peak_bytes


def _guarded(slice_id: int):
    try:
        with threadpool_limits(1):
            return ("ok",) + _run_slice(slice_id)
    except Exception:
        return ("error", slice_id, traceback.format_exc())


def schedule(tasks: Sequence[SliceTask], workers: int, fn: Callable | None = None,
             initializer: Callable | None = None, initargs: tuple = ()) -> tuple[list, float]:
    """Run every task exactly once on a process pool and return results in slice order.

    ``fn(slice_id)`` must return ``("ok", slice_id, ...)`` or
    ``("error", slice_id, detail)``. The returned wall time covers task
    execution only: it starts once every worker is initialised and stops when
    the last result has been collected.
    """
    if workers < 1:
        raise EngineError("workers must be >= 1")
    fn = fn or _guarded
    ids = [t.slice_id for t in tasks]
    if len(set(ids)) != len(ids):
        raise EngineError("duplicate slice ids in job")
    results = {}
    if workers == 1:
        if initializer is not None:
            initializer(*initargs, None)
        t0 = time.perf_counter()
        for t in tasks:
            t.status = "running"
            res = fn(t.slice_id)
            _collect(res, results, t)
        return [results[i] for i in sorted(results)], time.perf_counter() - t0

    ctx = mp.get_context("fork")
    barrier = ctx.Barrier(workers)
    by_id = {t.slice_id: t for t in tasks}
    with ctx.Pool(workers, initializer=initializer, initargs=initargs + (barrier,)) as pool:
        pool.map(_wait_barrier, range(workers), chunksize=1)
        t0 = time.perf_counter()
        for res in pool.imap_unordered(fn, ids, chunksize=1):
            _collect(res, results, by_id[res[1]])
        wall = time.perf_counter() - t0
    return [results[i] for i in sorted(results)], wall


def _collect(res, results: dict, task: SliceTask) -> None:
    if res[0] == "error":
        task.status = "failed"
        raise SliceError(res[1], res[2])
    task.status = "done"
    results[res[1]] = res[1:]


def _check_plan(circuit: Circuit, plan: ContractionPlan) -> None:
    sk = skeleton_from_circuit(circuit, plan.open_qubits)
    try:
        fixed = plan.cut.fixed_labels(sk.extents)
        costs, _, _ = annotate(sk.fix(fixed), plan.steps)
    except (PlanError, KeyError) as e:
        raise PlanError(f"plan does not match circuit: {e}") from None
    if [c.volumes for c in costs] != [c.volumes for c in plan.costs]:
        raise PlanError("plan annotations do not match circuit")


def _targets(circuit: Circuit, plan: ContractionPlan, bitstrings: Iterable[str]) -> list[dict[int, int]]:
    n = circuit.n_qubits
    open_set = set(plan.open_qubits)
    out = []
    for b in bitstrings:
        if len(b) != n or any(ch not in "01xX-" for ch in b):
            raise EngineError(f"bad bitstring {b!r} for {n} qubits")
        out.append({q: int(ch) for q, ch in enumerate(b) if q not in open_set})
    return out


def run_batches(
    circuit: Circuit,
    plan: ContractionPlan,
    bitstrings: Sequence[str],
    path_fraction="1/1",
    workers: int = 1,
    seed: int = 0,
    memory_budget: int | None = None,
    step_budget: int | None = None,
) -> tuple[np.ndarray, RunMetrics]:
    """Amplitudes for every bitstring, batched over the plan's open qubits.

    Returns an array of shape ``(len(bitstrings), 2**len(plan.open_qubits))``;
    batch entries enumerate the open qubits in ascending order, first qubit
    slowest. Characters at open positions of a bitstring are ignored.
    """
    _check_plan(circuit, plan)
    if memory_budget is not None and plan.peak_memory > memory_budget:
        raise EngineError(f"plan needs {plan.peak_memory} B, budget is {memory_budget} B")
    slice_ids = select_slices(plan.n_slices, path_fraction, seed)
    targets = _targets(circuit, plan, bitstrings)
    tasks = [SliceTask(s) for s in slice_ids]
    results, wall = schedule(tasks, workers, _guarded, _init_worker, (circuit, plan, targets, step_budget))

    acc = PathAccumulator((len(targets), 1 << len(plan.open_qubits)))
    flops = 0
    step_times = np.zeros(len(plan.steps))
    peak = 0
    for sid, values, f, times, pk in results:
        acc.add(sid, values)
        flops += f
        step_times += times
        peak = max(peak, pk)
    amps = acc.finalize()

    m = RunMetrics(
        total_flops=flops, wall_time=wall, peak_memory=peak, predicted_peak_memory=plan.peak_memory,
        n_slices=len(slice_ids), n_slices_total=plan.n_slices, n_targets=len(targets), workers=workers,
    )
    if plan.costs:
        big = max(range(len(plan.costs)), key=lambda i: plan.costs[i].flops)
        m.largest_step = big
        executions = len(slice_ids) * len(targets)
        if step_times[big] > 0:
            m.c_p = plan.costs[big].flops * executions / step_times[big] * workers
        rates = [plan.costs[i].flops * executions / t for i, t in enumerate(step_times) if t > 0]
        m.max_step_rate = max(rates, default=0.0)
    m.c_a = flops / wall if wall > 0 else 0.0
    return amps, m


def run_amplitudes(
    circuit: Circuit,
    plan: ContractionPlan,
    bitstrings: Sequence[str],
    path_fraction="1/1",
    workers: int = 1,
    seed: int = 0,
    memory_budget: int | None = None,
    step_budget: int | None = None,
) -> tuple[dict[str, complex], RunMetrics]:
    """Amplitudes ``<x|C|0...0>`` summed over the selected fraction of slices."""
    if plan.open_qubits:
        raise EngineError("run_amplitudes needs a plan without open qubits; use run_batches")
    amps, metrics = run_batches(circuit, plan, bitstrings, path_fraction, workers, seed,
                                memory_budget, step_budget)
    return {b: complex(a) for b, a in zip(bitstrings, amps[:, 0])}, metrics


class BatchEvaluator:
    """In-process x2 batches for one (circuit, plan, path fraction): folds once, evaluates many x1.

    ``batch(x1)`` returns the ``2**len(plan.open_qubits)`` amplitudes with the
    closed qubits set from ``x1`` (a full-length bitstring; open positions are
    ignored), summed over the selected slices in ascending order.
    """

    def __init__(self, circuit: Circuit, plan: ContractionPlan, path_fraction="1/1", seed: int = 0,
                 step_budget: int | None = None):
        _check_plan(circuit, plan)
        self.circuit = circuit
        self.plan = plan
        self.slice_ids = select_slices(plan.n_slices, path_fraction, seed)
        self.norm = float(parse_fraction(path_fraction))
        self.counter = FlopCounter()
        self._net = fold_worldlines(circuit, open_qubits=range(circuit.n_qubits))
        self._sliced = [apply_cut(self._net, plan.cut, s) for s in self.slice_ids]
        self._step_budget = step_budget
        self.evaluations = 0

    def batch(self, x1: str) -> np.ndarray:
        (bits,) = _targets(self.circuit, self.plan, [x1])
        acc = PathAccumulator((1 << len(self.plan.open_qubits),))
        for sid, net in zip(self.slice_ids, self._sliced):
            final = execute_plan(net.fix_outputs(bits), self.plan, self.counter, self._step_budget)
            acc.add(sid, final.value().reshape(-1))
        self.evaluations += 1
        return acc.finalize()
