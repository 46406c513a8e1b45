import math

import numpy as np
import pytest
from scipy import stats

from conftest import rel_err
from qsim_slice.circuit import Circuit, Gate, GateKind, bits_to_int, generate_rqc, int_to_bits
from qsim_slice.engine import BatchEvaluator, run_batches
from qsim_slice.oracle import evolve, exact_sample
from qsim_slice.planner import plan_sampling, skeleton_from_circuit
from qsim_slice.sampler import (
    SamplerError,
    SamplingConfig,
    default_x2_region,
    sample,
    sample_amplitude_fraction,
    xeb,
)

X2 = tuple(range(10, 16))


def h_layer(n: int) -> Circuit:
    gates = [Gate(0, (q,), GateKind.H) for q in range(n)] + [Gate(1, (q,), GateKind.H) for q in range(n)]
    gates += [Gate(2, (q,), GateKind.H) for q in range(n)]
    return Circuit(1, n, tuple(gates))


@pytest.fixture(scope="module")
def rqc44():
    c = generate_rqc(4, 4, 8, 0)
    sv = evolve(c)
    sk = skeleton_from_circuit(c, X2)
    cut = [l for e in ((5, 6), (9, 10)) for l in sk.edge_bonds(*e)]
    return c, sv.probabilities(), plan_sampling(sk, X2, cut=cut)


def test_uniform_target_accepts_every_batch():
    c = h_layer(3)
    res = sample(c, None, SamplingConfig(m=100, seed=2))
    assert res.stats["acceptance_rate"] == 1.0
    counts = np.bincount([bits_to_int(s) for s in res.samples], minlength=8)
    assert stats.chisquare(counts).pvalue > 0.01


def test_exact_recycled_batches(rqc44):
    c, probs, plan = rqc44
    ev = BatchEvaluator(c, plan)
    x1 = "0110100111"
    batch = ev.batch(x1 + "x" * 6)
    fresh, _ = run_batches(c, plan, [x1 + "000000"])
    assert rel_err(batch, fresh[0]) < 1e-5
    ref = [math.sqrt(probs[bits_to_int(x1 + int_to_bits(j, 6))]) for j in range(64)]
    assert rel_err(np.abs(batch), ref) < 1e-5


def test_full_fidelity_sampling_scores_one(rqc44):
    c, probs, plan = rqc44
    res = sample(c, plan, SamplingConfig(m=10_000, seed=5))
    assert res.report.normalized
    assert abs(res.report.fidelity - 1.0) <= 0.05
    assert res.stats["slices"] == res.stats["total_slices"] == plan.n_slices


def test_path_fraction_half(rqc44):
    c, probs, plan = rqc44
    res = sample(c, plan, SamplingConfig(m=10_000, fidelity=f"{plan.n_slices // 2}/{plan.n_slices}", seed=6))
    assert res.stats["slices"] == plan.n_slices // 2
    assert abs(res.report.fidelity - 0.5) <= 0.07


def test_amplitude_fraction_half(rqc44):
    c, probs, plan = rqc44
    res = sample(c, plan, SamplingConfig(m=10_000, fidelity=0.5, mode="amplitude_fraction", seed=7))
    assert res.composition["full_fidelity"] == res.composition["uniform"] == 5000
    assert abs(res.report.fidelity - 0.5) <= 0.07


def test_amplitude_fraction_endpoints(rqc44):
    c, probs, plan = rqc44
    full = sample(c, plan, SamplingConfig(m=50, seed=8, score=False))
    same = sample_amplitude_fraction(c, plan, SamplingConfig(m=50, seed=8, mode="amplitude_fraction", score=False))
    assert same.samples == full.samples
    none = sample(c, plan, SamplingConfig(m=4000, fidelity=0, mode="amplitude_fraction", seed=8))
    assert none.composition["full_fidelity"] == 0
    assert abs(none.report.fidelity) <= 0.07


def test_rejection_converges_to_target():
    c = generate_rqc(3, 3, 10, 4)
    target = evolve(c).probabilities()
    res = sample(c, None, SamplingConfig(m=100_000, x2_region=(5, 6, 7, 8), seed=9, score=False))
    emp = np.bincount([bits_to_int(s) for s in res.samples], minlength=512) / 100_000
    assert 0.5 * np.abs(emp - target).sum() < 0.05


def test_samples_use_per_index_streams(rqc44):
    c, _, plan = rqc44
    short = sample(c, plan, SamplingConfig(m=5, seed=10, score=False)).samples
    long = sample(c, plan, SamplingConfig(m=12, seed=10, score=False)).samples
    assert long[:5] == short


def test_exhausted_batches_redraw():
    c = generate_rqc(3, 3, 8, 1)
    res = sample(c, None, SamplingConfig(m=40, x2_region=(8,), seed=11, score=False))
    assert len(res.samples) == 40
    assert res.stats["exhausted"] > 0
    assert res.stats["x1_accepted"] == 40 + res.stats["exhausted"]


def test_config_validation(rqc44):
    c, _, plan = rqc44
    with pytest.raises(SamplerError):
        SamplingConfig(m=1, fidelity=0)
    with pytest.raises(SamplerError):
        SamplingConfig(m=1, fidelity=1.5)
    with pytest.raises(SamplerError):
        SamplingConfig(m=1, mode="bogus")
    with pytest.raises(SamplerError):
        sample(c, plan, SamplingConfig(m=1, x2_region=(0, 1)))
    assert default_x2_region(16) == X2
    assert default_x2_region(3) == (1, 2)


def test_xeb_uniform_probabilities_exact():
    n = 16
    c = generate_rqc(4, 4, 2, 0)
    samples = [int_to_bits(x, n) for x in range(0, 2**n, 64)]
    report = xeb(c, samples, {s: 2.0**-n for s in samples}, ideal=np.full(2**n, 2.0**-n))
    assert report.cross_entropy == n * math.log(2)


def test_xeb_calibration(rqc44):
    c, probs, _ = rqc44
    sv_samples = exact_sample(evolve(c), 10_000, seed=12)
    exact = xeb(c, sv_samples, probs)
    assert abs(exact.fidelity - 1.0) <= 0.05
    assert exact.hog > 0.5
    rng = np.random.default_rng(13)
    uniform = [int_to_bits(int(x), 16) for x in rng.integers(0, 2**16, 10_000)]
    assert abs(xeb(c, uniform, probs).fidelity) <= 0.05


def test_xeb_zero_probability_flagged():
    c = Circuit(1, 2, tuple(Gate(0, (q,), GateKind.H) for q in range(2)))
    probs = {"00": 0.5, "01": 0.0, "10": 0.5}
    r = xeb(c, ["00", "01", "10"], probs, ideal=np.array([0.5, 0.0, 0.5, 0.0]))
    assert r.zero_probability == 1
    assert r.cross_entropy == pytest.approx(math.log(2))


def test_xeb_without_oracle_flags_hog():
    c = Circuit(1, 27, tuple(Gate(0, (q,), GateKind.H) for q in range(27)))
    r = xeb(c, ["0" * 27], {"0" * 27: 2.0**-27})
    assert r.hog_approximate and not r.normalized
    assert r.fidelity == r.fidelity_raw == pytest.approx(0.0)
