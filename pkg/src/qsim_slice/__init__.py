"""Sliced tensor-network simulation of random grid circuits."""

__version__ = "0.1.0"

from .circuit import Circuit, Gate, GateKind, generate_rqc, load_circuit, parse_circuit, serialize_circuit
from .engine import run_amplitudes, run_batches
from .oracle import evolve, exact_sample, porter_thomas_check
from .planner import fold_worldlines, load_plan, plan_contraction, plan_sampling, reference_plan_7x7
from .sampler import SamplingConfig, sample, sample_amplitude_fraction, xeb
from .tensor import Tensor, contract_ttgt, flop_count

__all__ = [
    "Circuit", "Gate", "GateKind", "generate_rqc", "load_circuit", "parse_circuit", "serialize_circuit",
    "run_amplitudes", "run_batches", "evolve", "exact_sample", "porter_thomas_check",
    "fold_worldlines", "load_plan", "plan_contraction", "plan_sampling", "reference_plan_7x7",
    "SamplingConfig", "sample", "sample_amplitude_fraction", "xeb", "Tensor", "contract_ttgt", "flop_count",
]
