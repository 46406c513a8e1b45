"""Command-line front end: ``qsim-slice <command> ...``.

Every command that computes something prints a JSON report on stdout (or to
``--report``). Result streams are JSON Lines, sample files hold one bitstring
per line. Timings cover the computation only: the start mark is taken after
inputs are loaded and workers are up, the stop mark before results are written.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import struct
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .circuit import Circuit, CircuitError, generate_rqc, load_circuit, serialize_circuit
from .engine import EngineError, parse_fraction, run_batches
from .oracle import OracleError, evolve, exact_sample
from .planner import (
    PlanError,
    estimate_cost,
    load_plan,
    plan_contraction,
    plan_sampling,
    plan_to_json,
    reference_plan_7x7,
    skeleton_from_circuit,
)
from .sampler import SamplerError, SamplingConfig, default_x2_region, sample, xeb
from .tensor import TensorError

log = logging.getLogger("qsim_slice")

REFERENCE_PLAN = "7x7_1+40+1.json"
STATE_MAGIC = b"QSSV"


class CliError(Exception):
    pass


# --- helpers ----------------------------------------------------------------------


def _read_lines(path: str) -> list[str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise CliError(f"cannot read {path}: {e.strerror}") from None
    return [l.strip() for l in text.splitlines() if l.strip() and not l.lstrip().startswith("#")]


def _load_circuit(path: str) -> Circuit:
    try:
        return load_circuit(path)
    except OSError as e:
        raise CliError(f"cannot read {path}: {e.strerror}") from None


def reference_plan_document() -> dict:
    return json.loads(resources.files("qsim_slice").joinpath("plans", REFERENCE_PLAN).read_text(encoding="utf-8"))


def _is_reference_shape(c: Circuit) -> bool:
    return (c.rows, c.cols) == (7, 7) and c.depth_label == (1, 40, 1)


def _load_plan(c: Circuit, path: str | None, open_qubits=()):
    sk = skeleton_from_circuit(c, open_qubits)
    if path:
        try:
            return load_plan(path, sk)
        except OSError as e:
            raise CliError(f"cannot read {path}: {e.strerror}") from None
    if _is_reference_shape(c) and not open_qubits:
        return load_plan(reference_plan_document(), sk)
    return None


def _config_hash(c: Circuit, plan_doc: dict | None, flags: dict) -> str:
    h = hashlib.sha256()
    h.update(serialize_circuit(c).encode())
    h.update(json.dumps(plan_doc, sort_keys=True).encode() if plan_doc else b"null")
    h.update(json.dumps(flags, sort_keys=True, default=str).encode())
    return h.hexdigest()


def _flags(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("func", "report")}


def _emit(report: dict, args) -> None:
    text = json.dumps(report, indent=2, sort_keys=True, default=str)
    if getattr(args, "report", None):
        Path(args.report).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


def _write_text(path: str | None, text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def amplitude_record(bitstring: str, a: complex) -> dict:
    mag2 = abs(a) ** 2
    return {"bitstring": bitstring, "re": a.real, "im": a.imag,
            "log2_norm": math.log2(mag2) if mag2 > 0 else None}


def write_state(path: str, amplitudes: np.ndarray, n: int) -> None:
    """Little-endian dump: ``b"QSSV"``, u32 version (1), u32 n, then 2^n complex128."""
    with open(path, "wb") as fh:
        fh.write(STATE_MAGIC + struct.pack("<II", 1, n))
        fh.write(np.asarray(amplitudes, dtype="<c16").tobytes())


def read_state(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(12)
        if head[:4] != STATE_MAGIC:
            raise CliError(f"{path} is not a state dump")
        _, n = struct.unpack("<II", head[4:])
        return np.frombuffer(fh.read(), dtype="<c16", count=1 << n)


# --- commands ---------------------------------------------------------------------


def cmd_generate(args) -> int:
    c = generate_rqc(args.rows, args.cols, args.cycles, args.seed)
    _write_text(args.output, serialize_circuit(c))
    return 0


def cmd_plan(args) -> int:
    c = _load_circuit(args.circuit)
    if args.reference:
        if not _is_reference_shape(c):
            raise CliError("the shipped reference plan is for 7x7 circuits of depth (1+40+1)")
        plan = reference_plan_7x7(c)
    elif args.x2 is not None:
        x2 = default_x2_region(c.n_qubits, args.x2)
        plan = plan_sampling(skeleton_from_circuit(c, x2), x2, cut=args.cut, grid=(c.rows, c.cols))
    else:
        plan = plan_contraction(skeleton_from_circuit(c), args.memory_budget, cut=args.cut,
                                grid=(c.rows, c.cols))
    doc = plan_to_json(plan)
    _write_text(args.output, json.dumps(doc, indent=1) + "\n")
    return 0


def _expand(bitstring: str, open_qubits, j: int) -> str:
    bits = list(bitstring)
    k = len(open_qubits)
    for i, q in enumerate(open_qubits):
        bits[q] = "1" if (j >> (k - 1 - i)) & 1 else "0"
    return "".join(bits)


def _amplitude_job(circuit: str, plan_path: str | None, bitstrings: str, fraction: str, workers: int,
                   seed: int, memory_budget: int | None, output: str | None, flags: dict) -> dict:
    c = _load_circuit(circuit)
    bits = _read_lines(bitstrings)
    plan = _load_plan(c, plan_path)
    if plan is None:
        plan = plan_contraction(skeleton_from_circuit(c), memory_budget, grid=(c.rows, c.cols))
    f = parse_fraction(fraction)
    if (f * plan.n_slices).denominator != 1:
        raise CliError(f"--fraction {fraction} is not a multiple of 1/{plan.n_slices}")
    amps, metrics = run_batches(c, plan, bits, f, workers, seed, memory_budget)
    lines = []
    for b, row in zip(bits, amps):
        for j, a in enumerate(row):
            lines.append(json.dumps(amplitude_record(_expand(b, plan.open_qubits, j), complex(a))))
    _write_text(output, "\n".join(lines) + "\n")
    est = estimate_cost(plan, metrics.n_slices, len(bits))
    return {
        "command": "amplitude",
        "config_hash": _config_hash(c, plan_to_json(plan), flags),
        "seed": seed,
        "fraction": str(f),
        "metrics": metrics.as_dict(),
        "estimate": est.as_dict(),
        "results": output,
    }


def cmd_amplitude(args) -> int:
    if args.manifest:
        try:
            job = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
        except OSError as e:
            raise CliError(f"cannot read {args.manifest}: {e.strerror}") from None
        for key in ("circuit", "bitstrings"):
            if key not in job:
                raise CliError(f"manifest lacks {key!r}")
        base = Path(args.manifest).parent
        rel = lambda p: str(base / p) if p and not os.path.isabs(p) else p
        report = _amplitude_job(rel(job["circuit"]), rel(job.get("plan")), rel(job["bitstrings"]),
                                job.get("fraction", "1/1"), int(job.get("workers", 1)), int(job.get("seed", 0)),
                                job.get("memory_budget"), rel(job.get("output")) or args.output, job)
    else:
        if not args.circuit or not args.bitstrings:
            raise CliError("amplitude needs -c/--circuit and -b/--bitstrings (or --manifest)")
        report = _amplitude_job(args.circuit, args.plan, args.bitstrings, args.fraction, args.workers,
                                args.seed, args.memory_budget, args.output, _flags(args))
    _emit(report, args)
    return 0


def cmd_sample(args) -> int:
    c = _load_circuit(args.circuit)
    plan = None
    if args.plan:
        plan = load_plan(args.plan, _plan_skeleton(c, args.plan))
    mode = "amplitude_fraction" if args.fidelity_mode == "amplitudes" else "path_fraction"
    x2 = tuple(plan.open_qubits) if plan else (default_x2_region(c.n_qubits, args.x2) if args.x2 else None)
    cfg = SamplingConfig(m=args.samples, x2_region=x2, fidelity=args.fraction, mode=mode, kappa=args.kappa,
                         seed=args.seed)
    t0 = time.perf_counter()
    res = sample(c, plan, cfg)
    wall = time.perf_counter() - t0
    _write_text(args.output, "".join(s + "\n" for s in res.samples))
    comp = {k: v for k, v in res.composition.items() if k != "full_indices"}
    _emit({
        "command": "sample",
        "config_hash": _config_hash(c, plan_to_json(plan) if plan else None, _flags(args)),
        "seed": args.seed,
        "wall_time": wall,
        "stats": res.stats,
        "composition": comp,
        "xeb": res.report.as_dict() if res.report else None,
        "results": args.output,
    }, args)
    return 0


def _plan_skeleton(c: Circuit, path: str):
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise CliError(f"cannot read {path}: {e.strerror}") from None
    return skeleton_from_circuit(c, doc.get("open_qubits", []))


def cmd_xeb(args) -> int:
    c = _load_circuit(args.circuit)
    samples = _read_lines(args.samples)
    if args.probabilities:
        probs = {}
        for line in _read_lines(args.probabilities):
            rec = json.loads(line)
            probs[rec["bitstring"]] = rec["re"] ** 2 + rec["im"] ** 2
        report = xeb(c, samples, probs)
    else:
        if c.n_qubits > 26:
            raise CliError("xeb without --probabilities needs the oracle (at most 26 qubits)")
        report = xeb(c, samples, evolve(c).probabilities())
    _emit({"command": "xeb", "config_hash": _config_hash(c, None, _flags(args)), "xeb": report.as_dict()}, args)
    return 0


def cmd_oracle(args) -> int:
    c = _load_circuit(args.circuit)
    t0 = time.perf_counter()
    sv = evolve(c)
    wall = time.perf_counter() - t0
    report = {"command": "oracle", "n_qubits": c.n_qubits, "wall_time": wall,
              "config_hash": _config_hash(c, None, _flags(args))}
    if args.dump:
        write_state(args.dump, sv.amplitudes, c.n_qubits)
        report["dump"] = args.dump
    if args.bitstrings:
        lines = [json.dumps(amplitude_record(b, sv.amplitude(b))) for b in _read_lines(args.bitstrings)]
        _write_text(args.output, "\n".join(lines) + "\n")
        report["results"] = args.output
    elif args.samples:
        _write_text(args.output, "".join(s + "\n" for s in exact_sample(sv, args.samples, args.seed)))
        report["results"] = args.output
    _emit(report, args)
    return 0


def cmd_bench(args) -> int:
    c = _load_circuit(args.circuit)
    plan = _load_plan(c, args.plan)
    if plan is None:
        plan = plan_contraction(skeleton_from_circuit(c), args.memory_budget, grid=(c.rows, c.cols))
    f = parse_fraction(args.fraction)
    k = f * plan.n_slices
    if k.denominator != 1 or not 1 <= k <= plan.n_slices:
        raise CliError(f"--fraction {args.fraction} is not k/{plan.n_slices}")
    est = estimate_cost(plan, int(k))
    report = {
        "command": "bench",
        "plan": plan.name,
        "n_slices": plan.n_slices,
        "max_rank": plan.max_rank,
        "config_hash": _config_hash(c, plan_to_json(plan), _flags(args)),
        "estimate": est.as_dict(),
        "dry_run": bool(args.dry_run),
    }
    if not args.dry_run:
        zeros = "0" * c.n_qubits
        _, metrics = run_batches(c, plan, [zeros], f, args.workers, args.seed, args.memory_budget)
        report["metrics"] = metrics.as_dict()
    _emit(report, args)
    return 0


# --- argument parsing -------------------------------------------------------------


def _budget(text: str) -> int:
    units = {"k": 1 << 10, "m": 1 << 20, "g": 1 << 30, "t": 1 << 40}
    t = text.strip().lower().rstrip("ib").rstrip("b")
    mult = units.get(t[-1:], 1)
    return int(float(t[:-1] if mult > 1 else t) * mult)


def _cut(text: str) -> list[str]:
    return [s for s in text.split(",") if s]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qsim-slice", description="Sliced tensor-network simulation of grid circuits.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, circuit=True):
        if circuit:
            sp.add_argument("-c", "--circuit", required=True)
        sp.add_argument("-o", "--output")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--report", help="write the JSON report here instead of stdout")

    g = sub.add_parser("generate", help="write a random grid circuit")
    g.add_argument("--rows", type=int, required=True)
    g.add_argument("--cols", type=int, required=True)
    g.add_argument("--cycles", type=int, required=True)
    common(g, circuit=False)
    g.set_defaults(func=cmd_generate)

    pl = sub.add_parser("plan", help="plan a contraction")
    common(pl)
    pl.add_argument("--memory-budget", type=_budget)
    pl.add_argument("--cut", type=_cut, help="comma-separated bond labels to cut first")
    pl.add_argument("--x2", type=int, help="plan batched sampling with this many open qubits")
    pl.add_argument("--reference", action="store_true", help="emit the hand-made 7x7 plan")
    pl.set_defaults(func=cmd_plan)

    a = sub.add_parser("amplitude", help="compute amplitudes")
    common(a, circuit=False)
    a.add_argument("-c", "--circuit")
    a.add_argument("-p", "--plan")
    a.add_argument("-b", "--bitstrings")
    a.add_argument("--fraction", default="1/1")
    a.add_argument("--workers", type=int, default=1)
    a.add_argument("--memory-budget", type=_budget)
    a.add_argument("--manifest", help="JSON job manifest")
    a.set_defaults(func=cmd_amplitude)

    s = sub.add_parser("sample", help="sample bitstrings")
    common(s)
    s.add_argument("-p", "--plan")
    s.add_argument("-m", "--samples", type=int, required=True)
    s.add_argument("--fraction", default="1/1")
    s.add_argument("--fidelity-mode", choices=("paths", "amplitudes"), default="paths")
    s.add_argument("--x2", type=int)
    s.add_argument("--kappa", type=float, default=6.0)
    s.set_defaults(func=cmd_sample)

    x = sub.add_parser("xeb", help="score samples")
    common(x)
    x.add_argument("--samples", required=True)
    x.add_argument("--probabilities", help="JSONL amplitudes to score against")
    x.set_defaults(func=cmd_xeb)

    o = sub.add_parser("oracle", help="state-vector reference")
    common(o)
    o.add_argument("-b", "--bitstrings")
    o.add_argument("--samples", type=int)
    o.add_argument("--dump")
    o.set_defaults(func=cmd_oracle)

    b = sub.add_parser("bench", help="cost estimate or timed run")
    common(b)
    b.add_argument("-p", "--plan")
    b.add_argument("--fraction", default="1/1")
    b.add_argument("--workers", type=int, default=1)
    b.add_argument("--memory-budget", type=_budget)
    b.add_argument("--dry-run", action="store_true")
    b.set_defaults(func=cmd_bench)
    return p


ERRORS = (CliError, CircuitError, PlanError, EngineError, SamplerError, OracleError, TensorError, ValueError)


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("QSIM_SLICE_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ERRORS as e:
        err = {"error": type(e).__name__, "message": str(e)}
        if isinstance(e, CircuitError) and getattr(e, "line", None):
            err["line"] = e.line
        print(json.dumps(err), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
