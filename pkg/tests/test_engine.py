import os

import numpy as np
import pytest

from conftest import rel_err
from qsim_slice.circuit import generate_rqc, int_to_bits, parse_circuit
from qsim_slice.engine import (
    BatchEvaluator,
    BuddyArena,
    EngineError,
    PathAccumulator,
    PipelineStats,
    SliceError,
    SliceTask,
    pipeline_execute,
    run_amplitudes,
    run_batches,
    schedule,
    select_slices,
)
from qsim_slice.engine import _targets, execute_plan
from qsim_slice.oracle import evolve
from qsim_slice.planner import (
    Cut,
    PlanError,
    StepShape,
    decompose_oversized,
    estimate_cost,
    plan_contraction,
    plan_sampling,
    reference_plan_7x7,
    skeleton_from_circuit,
)
from qsim_slice.tensor import FlopCounter, contract_ttgt, random_tensor


@pytest.fixture(scope="module")
def rqc():
    c = generate_rqc(4, 4, 8, 21)
    sk = skeleton_from_circuit(c)
    plan = plan_contraction(sk, cut=Cut(tuple(sorted(sk.bonds())[6:9])))
    bits = [int_to_bits(x, 16) for x in np.random.default_rng(0).integers(0, 2**16, 16)]
    return c, plan, bits, evolve(c)


def test_hadamard_layer_amplitudes():
    c = parse_circuit("2\n0 h 0\n0 h 1\n")
    plan = plan_contraction(skeleton_from_circuit(c))
    amps, _ = run_amplitudes(c, plan, ["00", "01", "10", "11"])
    assert all(a == pytest.approx(0.5, abs=1e-7) for a in amps.values())


def test_rqc_amplitudes_match_oracle(rqc):
    c, plan, bits, sv = rqc
    amps, metrics = run_amplitudes(c, plan, bits)
    assert metrics.n_slices == plan.n_slices == 8
    for b in bits:
        ref = sv.amplitude(b)
        assert abs(amps[b] - ref) / abs(ref) < 1e-4


def test_metrics_flops_equal_estimate(rqc):
    c, plan, bits, _ = rqc
    _, m = run_amplitudes(c, plan, bits[:3], path_fraction="3/8", seed=4)
    assert m.n_slices == 3
    assert m.total_flops == estimate_cost(plan, 3, 3).total_flops
    assert m.c_a > 0 and m.c_p > 0 and m.largest_step >= 0


def test_batches_recover_open_qubits(rqc):
    c, _, _, sv = rqc
    x2 = (13, 14, 15)
    plan = plan_sampling(skeleton_from_circuit(c, x2), x2)
    amps, _ = run_batches(c, plan, ["1011001110010xxx"])
    ref = [sv.amplitude("1011001110010" + int_to_bits(j, 3)) for j in range(8)]
    assert rel_err(amps[0], ref) < 1e-5


def test_slice_selection():
    ids = select_slices(1024, "6/1024", seed=3)
    assert len(ids) == len(set(ids)) == 6
    # six consecutive ids modulo 1024, starting at the seeded offset
    offset = int(np.random.Generator(np.random.PCG64(3)).integers(1024))
    assert ids == sorted((offset + i) % 1024 for i in range(6))
    assert select_slices(1024, "6/1024", seed=3) == ids
    assert select_slices(8, 1) == list(range(8))
    for bad in ("0/8", "3/16", "9/8"):
        with pytest.raises(EngineError):
            select_slices(8, bad)


def test_reference_job_enumerates_six_slices():
    plan = reference_plan_7x7(generate_rqc(7, 7, 40, 0))
    tasks = [SliceTask(s) for s in select_slices(plan.n_slices, "6/1024", seed=0)]
    assert plan.n_slices == 1024 and len(tasks) == 6


def _echo(slice_id):
    return ("ok", slice_id, os.getpid())


def _explode(slice_id):
    if slice_id == 2:
        return ("error", slice_id, "boom")
    return ("ok", slice_id)


def _init(*args):
    pass


def test_schedule_runs_each_slice_once():
    tasks = [SliceTask(s) for s in range(4)]
    results, wall = schedule(tasks, 2, _echo, _init, ())
    assert [r[0] for r in results] == [0, 1, 2, 3]
    assert all(t.status == "done" for t in tasks)
    assert wall >= 0


@pytest.mark.parametrize("workers", [1, 2])
def test_schedule_reports_failing_slice(workers):
    with pytest.raises(SliceError) as info:
        schedule([SliceTask(s) for s in range(4)], workers, _explode, _init, ())
    assert info.value.slice_id == 2


def test_schedule_rejects_duplicates():
    with pytest.raises(EngineError):
        schedule([SliceTask(1), SliceTask(1)], 1, _echo)


def test_worker_count_invariance(rqc):
    c, plan, bits, _ = rqc
    one, _ = run_amplitudes(c, plan, bits[:4], workers=1)
    two, _ = run_amplitudes(c, plan, bits[:4], workers=2)
    assert one == two


def test_accumulation_order_guard(rqc):
    c, plan, bits, _ = rqc
    x2 = (14, 15)
    sp = plan_sampling(skeleton_from_circuit(c, x2), x2, cut=plan.cut.labels)
    ev = BatchEvaluator(c, sp)
    acc = PathAccumulator((4,))
    (fixed,) = _targets(c, sp, [bits[0][:14] + "xx"])
    for sid, net in zip(ev.slice_ids, ev._sliced):
        acc.add(sid, execute_plan(net.fix_outputs(fixed), sp).value().reshape(-1))
    up, down = acc.finalize(), acc.finalize(descending=True)
    assert rel_err(down, up) <= 1e-6
    with pytest.raises(EngineError):
        acc.add(0, np.zeros(4))


def test_plan_circuit_mismatch(rqc):
    c, plan, bits, _ = rqc
    assert run_amplitudes(generate_rqc(4, 4, 8, 22), plan, bits[:1])  # same structure binds
    other = generate_rqc(4, 4, 10, 21)
    with pytest.raises(PlanError):
        run_amplitudes(other, plan, bits[:1])


def test_memory_budget_enforced(rqc):
    c, plan, bits, _ = rqc
    with pytest.raises(EngineError):
        run_amplitudes(c, plan, bits[:1], memory_budget=plan.peak_memory - 1)


def test_open_plan_needs_batches(rqc):
    c, _, bits, _ = rqc
    x2 = (15,)
    plan = plan_sampling(skeleton_from_circuit(c, x2), x2)
    with pytest.raises(EngineError):
        run_amplitudes(c, plan, bits[:1])


def test_step_budget_path_matches(rqc):
    c, plan, bits, _ = rqc
    ref, m0 = run_amplitudes(c, plan, bits[:4])
    budget = max(cost.working_set for cost in plan.costs) // 3
    out, m1 = run_amplitudes(c, plan, bits[:4], step_budget=budget)
    assert rel_err([out[b] for b in bits[:4]], [ref[b] for b in bits[:4]]) < 1e-5
    assert m1.total_flops == m0.total_flops


# --- pipeline -------------------------------------------------------------------


@pytest.fixture(scope="module")
def big_step():
    rng = np.random.default_rng(7)
    a = random_tensor(("i", "j", "k"), (16, 32, 8), rng)
    b = random_tensor(("k", "j", "l"), (8, 32, 24), rng)
    step = StepShape.from_tensors(a, b)
    parts = decompose_oversized(step, step.working_set // 6)
    return a, b, parts, contract_ttgt(a, b, counter=None)


def test_pipeline_depth_one_equals_reference(big_step):
    a, b, parts, ref = big_step
    out = pipeline_execute(parts, a, b, concurrency_depth=1)
    assert out.labels == ref.labels
    assert rel_err(out.data, ref.data) < 1e-5


def test_pipeline_depth_two_on_eight_steps(big_step):
    a, b, parts, ref = big_step
    assert len(parts) == 8
    stats = PipelineStats()
    counter = FlopCounter()
    two = pipeline_execute(parts, a, b, concurrency_depth=2, counter=counter, stats=stats)
    one = pipeline_execute(parts, a, b, concurrency_depth=1)
    assert rel_err(two.data, one.data) < 1e-5
    assert stats.max_in_flight <= 2
    assert counter.total == sum(p.flops for p in parts)
    for i in range(len(parts)):
        seq = [e for e, j in stats.events if j == i and e != "retry"]
        assert seq == ["acquire", "load", "execute", "accumulate", "release"]


def test_pipeline_retries_after_release(big_step):
    a, b, parts, ref = big_step
    stats = PipelineStats()
    arena = BuddyArena(max(p.working_set for p in parts))  # room for one step at a time
    out = pipeline_execute(parts, a, b, concurrency_depth=2, arena=arena, stats=stats)
    assert stats.retries > 0
    assert rel_err(out.data, ref.data) < 1e-5
    first_retry = next(k for k, (e, _) in enumerate(stats.events) if e == "retry")
    retried = stats.events[first_retry][1]
    acquired = next(k for k, e in enumerate(stats.events) if e == ("acquire", retried))
    assert any(e == "release" for e, _ in stats.events[first_retry:acquired])
    assert arena.in_use == 0


def test_buddy_arena_coalesces():
    arena = BuddyArena(4096, min_block=256)
    offs = [arena.alloc(1000) for _ in range(4)]
    assert sorted(offs) == [0, 1024, 2048, 3072]
    assert arena.alloc(1) is None
    for o in offs:
        arena.free(o)
    assert arena.alloc(4096) == 0
    assert arena.alloc(1) is None
