import json
import subprocess
import sys

import numpy as np
import pytest

from qsim_slice.circuit import generate_rqc, int_to_bits, serialize_circuit
from qsim_slice.cli import main, read_state
from qsim_slice.oracle import evolve


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def small(tmp_path, capsys):
    circ = tmp_path / "c.txt"
    assert run(capsys, "generate", "--rows", 2, "--cols", 3, "--cycles", 6, "--seed", 4, "-o", circ)[0] == 0
    bits = tmp_path / "bits.txt"
    bits.write_text("".join(int_to_bits(x, 6) + "\n" for x in (0, 5, 17, 63)))
    return circ, bits


def test_generate_is_byte_identical(tmp_path, capsys):
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    for path in (a, b):
        run(capsys, "generate", "--rows", 3, "--cols", 3, "--cycles", 10, "--seed", 9, "-o", path)
    assert a.read_bytes() == b.read_bytes()
    assert a.read_text() == serialize_circuit(generate_rqc(3, 3, 10, 9))


def test_amplitudes_match_oracle(small, tmp_path, capsys):
    circ, bits = small
    out = tmp_path / "amps.jsonl"
    plan = tmp_path / "plan.json"
    assert run(capsys, "plan", "-c", circ, "--cut", "b1:0-1", "-o", plan)[0] == 0
    code, text, _ = run(capsys, "amplitude", "-c", circ, "-p", plan, "-b", bits, "--workers", 2, "-o", out)
    assert code == 0
    report = json.loads(text)
    assert report["metrics"]["n_slices"] == 2 and len(report["config_hash"]) == 64
    sv = evolve(generate_rqc(2, 3, 6, 4))
    recs = [json.loads(l) for l in out.read_text().splitlines()]
    assert [r["bitstring"] for r in recs] == bits.read_text().split()
    for r in recs:
        a = sv.amplitude(r["bitstring"])
        assert abs(complex(r["re"], r["im"]) - a) <= 1e-6 * abs(a) + 1e-12
        assert r["log2_norm"] == pytest.approx(np.log2(abs(a) ** 2))


def test_manifest_job(small, tmp_path, capsys):
    circ, bits = small
    man = tmp_path / "job.json"
    man.write_text(json.dumps({"circuit": circ.name, "bitstrings": bits.name, "fraction": "1/1", "workers": 1,
                               "seed": 3, "output": "res.jsonl"}))
    code, text, _ = run(capsys, "amplitude", "--manifest", man)
    assert code == 0 and json.loads(text)["seed"] == 3
    assert len((tmp_path / "res.jsonl").read_text().splitlines()) == 4


def test_fraction_must_divide_slices(small, tmp_path, capsys):
    circ, bits = small
    plan = tmp_path / "plan.json"
    run(capsys, "plan", "-c", circ, "--cut", "b1:0-1", "-o", plan)
    code, _, err = run(capsys, "amplitude", "-c", circ, "-p", plan, "-b", bits, "--fraction", "1/3")
    assert code == 2 and json.loads(err)["error"] == "CliError"


def test_bad_circuit_reports_line(fixtures, capsys):
    code, _, err = run(capsys, "oracle", "-c", fixtures / "circuits" / "bad_unknown_gate.txt")
    assert code == 2
    assert json.loads(err)["line"] == 3


def test_oracle_dump_roundtrip(small, tmp_path, capsys):
    circ, _ = small
    dump = tmp_path / "state.bin"
    assert run(capsys, "oracle", "-c", circ, "--dump", dump)[0] == 0
    assert dump.read_bytes()[:4] == b"QSSV"
    np.testing.assert_array_equal(read_state(dump), evolve(generate_rqc(2, 3, 6, 4)).amplitudes)


def test_sample_and_xeb(tmp_path, capsys):
    circ = tmp_path / "c.txt"
    run(capsys, "generate", "--rows", 3, "--cols", 3, "--cycles", 8, "--seed", 1, "-o", circ)
    samples = tmp_path / "s.txt"
    code, text, _ = run(capsys, "sample", "-c", circ, "-m", 200, "--x2", 4, "--seed", 2, "-o", samples)
    assert code == 0
    assert json.loads(text)["composition"]["full_fidelity"] == 200
    assert len(samples.read_text().split()) == 200
    code, text, _ = run(capsys, "xeb", "-c", circ, "--samples", samples)
    assert code == 0 and json.loads(text)["xeb"]["size"] == 200


def test_bench_dry_run_reference(tmp_path, capsys):
    circ = tmp_path / "c7.txt"
    run(capsys, "generate", "--rows", 7, "--cols", 7, "--cycles", 40, "-o", circ)
    code, text, _ = run(capsys, "bench", "-c", circ, "--dry-run")
    report = json.loads(text)
    assert code == 0 and report["dry_run"]
    assert report["n_slices"] == 1024 and report["max_rank"] <= 30


def test_entry_point_runs():
    out = subprocess.run([sys.executable, "-m", "qsim_slice.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.strip()
