"""Bitstring sampling with recycled x2 batches, fidelity-matched noise, and XEB scoring.

Qubits split into a closed set x1 and an open region x2. One contraction with
x1 fixed yields all ``2**|x2|`` amplitudes of the batch; rejection sampling
then emits one bitstring from it and the next sample draws a fresh x1.

Sampling is two-stage so the output follows the target distribution exactly
(up to logged caps): x1 is accepted with probability proportional to its batch
mass, then x2 is drawn within the batch by rejection against a uniform
proposal. The x2 envelope is the batch's own peak ratio capped at ``kappa``, so
a uniform batch accepts every proposal. A batch gets at most ``2**|x2|``
proposals; x1 acceptance is scaled by the batch's success probability so that
this limit does not bias the output. Randomness for sample ``i`` comes from
``SeedSequence(seed, spawn_key=(0, i))``; the amplitude-fraction mixing stream
uses ``spawn_key=(1,)`` and its uniform draws ``spawn_key=(2, i)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .circuit import Circuit, bits_to_int, int_to_bits
from .engine import BatchEvaluator, parse_fraction
from .oracle import MAX_QUBITS, evolve
from .planner import ContractionPlan, plan_sampling, skeleton_from_circuit

log = logging.getLogger(__name__)

__all__ = [
    "SamplerError",
    "SamplingConfig",
    "SampleResult",
    "XebReport",
    "default_x2_region",
    "sample",
    "sample_amplitude_fraction",
    "xeb",
]

DEFAULT_X2 = 6
ORACLE_SCORING_MAX = 20


class SamplerError(ValueError):
    pass


@dataclass(frozen=True)
class SamplingConfig:
    m: int
    x2_region: tuple[int, ...] | None = None
    fidelity: float | str = 1
    mode: str = "path_fraction"  # or "amplitude_fraction"
    kappa: float = 6.0
    kappa1: float | None = None  # default 1 + 5/sqrt(batch size)
    two_stage: bool = True
    seed: int = 0
    score: bool = True

    def __post_init__(self):
        if self.m < 0:
            raise SamplerError("sample count must be >= 0")
        if self.mode not in ("path_fraction", "amplitude_fraction"):
            raise SamplerError(f"unknown sampling mode {self.mode!r}")
        f = parse_fraction(self.fidelity)
        lo_ok = f >= 0 if self.mode == "amplitude_fraction" else f > 0
        if not (lo_ok and f <= 1):
            raise SamplerError(f"fidelity {f} out of range for mode {self.mode}")
        if self.kappa <= 0:
            raise SamplerError("kappa must be positive")


@dataclass(frozen=True)
class XebReport:
    size: int
    n_qubits: int
    mean_log_p: float
    cross_entropy: float
    fidelity: float
    fidelity_raw: float
    hog: float
    zero_probability: int = 0
    hog_approximate: bool = False
    normalized: bool = False

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class SampleResult:
    samples: list[str]
    stats: dict = field(default_factory=dict)
    composition: dict = field(default_factory=dict)
    report: XebReport | None = None


def default_x2_region(n: int, size: int = DEFAULT_X2) -> tuple[int, ...]:
    """The last ``size`` qubits, keeping at least one qubit in x1."""
    k = max(1, min(size, n - 1)) if n > 1 else 1
    return tuple(range(n - k, n))


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


class _BatchSampler:
    def __init__(self, c: Circuit, plan: ContractionPlan, fraction, cfg: SamplingConfig):
        self.c = c
        self.cfg = cfg
        self.x2 = tuple(plan.open_qubits)
        self.x1 = tuple(q for q in range(c.n_qubits) if q not in set(self.x2))
        self.n1 = 1 << len(self.x1)
        self.b = 1 << len(self.x2)
        self.eval = BatchEvaluator(c, plan, fraction, cfg.seed)
        self.norm = self.eval.norm
        self.kappa1 = cfg.kappa1 if cfg.kappa1 is not None else 1.0 + 5.0 / math.sqrt(self.b)
        self._cache: dict[int, tuple[np.ndarray, float, float, float]] = {}
        # success probability of a batch at the loosest envelope; batches are reweighted to it
        self.s_ref = 1.0 - (1.0 - 1.0 / cfg.kappa) ** self.b
        self.stats = dict(x1_draws=0, x1_accepted=0, proposals=0, capped_x1=0, capped=0, exhausted=0,
                          empty_batches=0, batches_evaluated=0)

    def _batch(self, x1: int) -> tuple[np.ndarray, float, float, float]:
        hit = self._cache.get(x1)
        if hit is None:
            bits = ["x"] * self.c.n_qubits
            for q, ch in zip(self.x1, int_to_bits(x1, len(self.x1))):
                bits[q] = ch
            p = np.abs(self.eval.batch("".join(bits))) ** 2
            mass = math.fsum(p)
            env, succ = self.cfg.kappa, self.s_ref
            if mass > 0.0:
                r = p * self.b / mass
                env = min(self.cfg.kappa, float(r.max()))
                q = float(np.minimum(r, env).mean()) / env
                succ = 1.0 - (1.0 - q) ** self.b
            hit = (p, mass, env, succ)
            self._cache[x1] = hit
            self.stats["batches_evaluated"] += 1
        return hit

    def _compose(self, x1: int, j: int) -> str:
        bits = [""] * self.c.n_qubits
        for q, ch in zip(self.x1, int_to_bits(x1, len(self.x1))):
            bits[q] = ch
        for q, ch in zip(self.x2, int_to_bits(j, len(self.x2))):
            bits[q] = ch
        return "".join(bits)

    def draw(self, rng: np.random.Generator) -> tuple[str, float]:
        """One bitstring and its (unnormalized) engine probability."""
        st, cfg = self.stats, self.cfg
        scale = float(1 << self.c.n_qubits)
        while True:
            st["x1_draws"] += 1
            x1 = int(rng.integers(self.n1))
            p, mass, env, succ = self._batch(x1)
            if mass == 0.0:
                st["empty_batches"] += 1
                continue
            if cfg.two_stage:
                a1 = mass * self.n1 / (self.norm * self.kappa1) * (self.s_ref / succ)
                if a1 > 1.0:
                    st["capped_x1"] += 1
                if rng.random() >= a1:
                    continue
            st["x1_accepted"] += 1
            for _ in range(self.b):
                st["proposals"] += 1
                j = int(rng.integers(self.b))
                if cfg.two_stage:
                    a2 = p[j] * self.b / (mass * env)
                else:
                    a2 = p[j] / self.norm * scale / cfg.kappa
                if a2 > 1.0:
                    st["capped"] += 1
                if rng.random() < a2:
                    return self._compose(x1, j), float(p[j])
            st["exhausted"] += 1


def _sampling_plan(c: Circuit, plan: ContractionPlan | None, cfg: SamplingConfig) -> ContractionPlan:
    if plan is not None:
        if cfg.x2_region is not None and tuple(sorted(cfg.x2_region)) != tuple(plan.open_qubits):
            raise SamplerError(f"x2 region {sorted(cfg.x2_region)} differs from plan open qubits {plan.open_qubits}")
        if not plan.open_qubits:
            raise SamplerError("sampling needs a plan with open x2 qubits")
        return plan
    x2 = tuple(sorted(cfg.x2_region)) if cfg.x2_region is not None else default_x2_region(c.n_qubits)
    if not x2 or len(x2) >= c.n_qubits + (1 if c.n_qubits == 1 else 0):
        raise SamplerError("x2 region must leave at least one qubit in x1")
    return plan_sampling(skeleton_from_circuit(c, x2), x2, grid=(c.rows, c.cols))


def _score(c: Circuit, samples: Sequence[str], engine_p: Sequence[float], norm: float) -> XebReport | None:
    if not samples:
        return None
    if c.n_qubits <= ORACLE_SCORING_MAX:
        ideal = evolve(c).probabilities()
        return xeb(c, samples, ideal, ideal)
    return xeb(c, samples, {s: p / norm for s, p in zip(samples, engine_p)})


def sample(c: Circuit, plan: ContractionPlan | None, cfg: SamplingConfig) -> SampleResult:
    """Draw ``cfg.m`` bitstrings with recycled x2 batches.

    In ``path_fraction`` mode amplitudes are summed over a fraction ``f`` of
    the plan's slices, which lowers the fidelity of the emitted samples to
    about ``f``. ``amplitude_fraction`` mode is delegated to
    :func:`sample_amplitude_fraction`.
    """
    if cfg.mode == "amplitude_fraction":
        return sample_amplitude_fraction(c, plan, cfg)
    plan = _sampling_plan(c, plan, cfg)
    sampler = _BatchSampler(c, plan, cfg.fidelity, cfg)
    out, probs = [], []
    for i in range(cfg.m):
        s, p = sampler.draw(_stream(cfg.seed, 0, i))
        out.append(s)
        probs.append(p)
    st = dict(sampler.stats)
    st["acceptance_rate"] = cfg.m / st["proposals"] if st["proposals"] else 0.0
    st["slices"] = len(sampler.eval.slice_ids)
    st["total_slices"] = plan.n_slices
    st["flops"] = sampler.eval.counter.total
    if st["capped"] or st["capped_x1"]:
        log.warning("rejection caps hit: %d x2, %d x1", st["capped"], st["capped_x1"])
    report = _score(c, out, probs, sampler.norm) if cfg.score else None
    comp = {"mode": "path_fraction", "fidelity": str(parse_fraction(cfg.fidelity)), "full_fidelity": cfg.m, "uniform": 0}
    return SampleResult(out, st, comp, report)


def sample_amplitude_fraction(c: Circuit, plan: ContractionPlan | None, cfg: SamplingConfig) -> SampleResult:
    """Mix exact samples with uniform noise: ``round(f * M)`` from rejection sampling, the rest uniform.

    Which sample indices are exact is a seeded permutation (stream
    ``spawn_key=(1,)``); exact samples use the same per-index streams as
    :func:`sample`, so ``f = 1`` reproduces it.
    """
    f = parse_fraction(cfg.fidelity)
    m_full = round(f * cfg.m)
    order = _stream(cfg.seed, 1).permutation(cfg.m)
    full = set(int(i) for i in order[:m_full])
    out: list[str] = []
    stats: dict = {}
    if full:
        plan = _sampling_plan(c, plan, cfg)
        sampler = _BatchSampler(c, plan, "1/1", cfg)
    n = c.n_qubits
    for i in range(cfg.m):
        if i in full:
            s, _ = sampler.draw(_stream(cfg.seed, 0, i))
        else:
            s = int_to_bits(int(_stream(cfg.seed, 2, i).integers(1 << n)), n)
        out.append(s)
    if full:
        stats = dict(sampler.stats)
        stats["acceptance_rate"] = m_full / stats["proposals"] if stats["proposals"] else 0.0
        stats["flops"] = sampler.eval.counter.total
    comp = {"mode": "amplitude_fraction", "fidelity": str(f), "full_fidelity": m_full, "uniform": cfg.m - m_full,
            "full_indices": sorted(full)}
    report = None
    if cfg.score and out and n <= ORACLE_SCORING_MAX:
        ideal = evolve(c).probabilities()
        report = xeb(c, out, ideal, ideal)
    return SampleResult(out, stats, comp, report)


def _lookup(probabilities) -> Callable[[str], float]:
    if isinstance(probabilities, np.ndarray):
        return lambda s: float(probabilities[bits_to_int(s)])
    if isinstance(probabilities, Mapping):
        def get(s):
            if s not in probabilities:
                raise SamplerError(f"no probability for sample {s}")
            return float(probabilities[s])
        return get
    return lambda s: float(probabilities(s))


def xeb(c: Circuit, samples: Sequence[str], probabilities, ideal: np.ndarray | None = None) -> XebReport:
    """Cross-entropy benchmark of ``samples`` under ``probabilities``.

    ``probabilities`` is a full distribution array (index = bitstring read as
    binary, qubit 0 first), a mapping bitstring -> p, or a callable.
    ``cross_entropy = -(1/size) sum log p``. ``fidelity_raw`` is
    ``2^n <p> - 1``, which assumes Porter-Thomas statistics. When the ideal
    distribution is known, ``fidelity`` divides it by ``2^n sum p_ideal^2 - 1``,
    which makes exact samples score 1 and uniform samples 0 in expectation for
    any circuit; otherwise ``fidelity`` equals ``fidelity_raw``. Samples with ``p = 0`` are left out of the log terms and
    counted; they still enter the fidelity and HOG averages as zero. HOG is the
    fraction of samples whose probability exceeds the median of ``ideal``;
    without it the median comes from the oracle when ``n <= 26`` and otherwise
    from the exponential-distribution value ``ln 2 / 2^n`` (flagged
    approximate).
    """
    n = c.n_qubits
    size = len(samples)
    if size == 0:
        raise SamplerError("no samples to score")
    get = _lookup(probabilities)
    ps = [get(s) for s in samples]
    logs = [math.log(p) for p in ps if p > 0.0]
    zeros = size - len(logs)
    if zeros:
        log.warning("%d samples have zero probability; excluded from log terms", zeros)
    mean_log = math.fsum(logs) / len(logs) if logs else float("-inf")

    approx = False
    if ideal is None and isinstance(probabilities, np.ndarray) and probabilities.size == 1 << n:
        ideal = probabilities
    if ideal is None and n <= MAX_QUBITS:
        ideal = evolve(c).probabilities()
    raw = 2.0**n * (math.fsum(ps) / size) - 1.0
    fidelity, normalized = raw, False
    if ideal is not None:
        median = float(np.median(ideal))
        spread = 2.0**n * math.fsum(np.asarray(ideal, dtype=np.float64) ** 2) - 1.0
        if spread > 0:
            fidelity, normalized = raw / spread, True
    else:
        median = math.log(2) / 2.0**n
        approx = True
    hog = sum(1 for p in ps if p > median) / size
    return XebReport(size, n, mean_log, -mean_log, fidelity, raw, hog, zeros, approx, normalized)
