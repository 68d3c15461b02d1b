import csv
import io as stdio

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from meldiff import io
from meldiff.cli import main
from meldiff.denoiser import init_toy_params
from meldiff.schedule import build_linear_schedule, load as load_schedule


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=2, max_dims=2, max_side=20),
                  elements=st.floats(-1e6, 1e6, width=32)))
def test_tensor_round_trip_is_byte_exact(x):
    data = io.tensor_bytes(x)
    assert io.tensor_bytes(io.parse_tensor(data)) == data
    assert data.startswith(f"DIFFMEL1 {x.shape[0]} {x.shape[1]} f32\n".encode())
    assert len(data) - data.index(b"\n") - 1 == x.size * 4


def test_tensor_payload_is_little_endian_row_major():
    data = io.tensor_bytes(np.array([[1.0, 2.0], [3.0, 4.0]]))
    payload = data[data.index(b"\n") + 1:]
    assert np.frombuffer(payload, "<f4").tolist() == [1.0, 2.0, 3.0, 4.0]


@pytest.mark.parametrize("blob", [b"", b"DIFFMEL2 1 1 f32\n\0\0\0\0", b"DIFFMEL1 1 1 f64\n\0\0\0\0",
                                  b"DIFFMEL1 2 1 f32\n\0\0\0\0"])
def test_bad_tensor_files(blob):
    with pytest.raises(io.FormatError):
        io.parse_tensor(blob)


def test_toy_params_container(tmp_path):
    p = init_toy_params(2, 3, rng=0)
    io.save_toy_params(tmp_path / "p", p)
    back = io.load_toy_params(tmp_path / "p")
    assert np.array_equal(back.flat(), p.flat().astype(np.float32))
    assert [w.shape for w in back.weights] == [w.shape for w in p.weights]
    assert "layers = 37x64;64x64;64x64;64x2" in (tmp_path / "p.shapes").read_text()


# -- CLI

def test_schedule_command_defaults(tmp_path, capsys):
    assert main(["schedule"]) == 0
    text = capsys.readouterr().out
    assert text.splitlines()[0] == "400 0.0001 0.02 linear"
    out = tmp_path / "s.txt"
    assert main(["schedule", "--out", str(out)]) == 0
    back = load_schedule(out)
    ref = build_linear_schedule()
    assert back.betas.tobytes() == ref.betas.tobytes()


def test_schedule_command_single_step(capsys):
    assert main(["schedule", "--T", "1", "--beta-start", "0.02", "--beta-end", "0.02"]) == 0
    assert capsys.readouterr().out.splitlines() == ["1 0.02 0.02 linear", "0.02"]


@pytest.mark.parametrize("flags", [["--T", "0"], ["--beta-start", "0"], ["--beta-end", "1.5"]])
def test_schedule_command_rejects(flags):
    assert main(["schedule"] + flags) == 1


def _sample(out, *flags):
    return main(["sample", "--out", str(out), "--chains", "3", "--frames", "4", *flags])


@pytest.mark.parametrize("gamma", [1, 7, 21, 57])
def test_sample_accepts_paper_gammas(tmp_path, gamma):
    assert _sample(tmp_path, "--gamma", str(gamma)) == 0
    m = io.read_manifest(tmp_path / "manifest.txt")
    assert m["gamma"] == str(gamma) and m["command"] == "sample"
    assert {"timestamp", "wall_clock_sample_s", "seed", "eta", "T"} <= m.keys()
    assert io.read_tensor(tmp_path / "chain_00000.mel").shape == (1, 4)


def test_sample_seed_repeat_is_byte_identical(tmp_path):
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    assert _sample(a, "--seed", "5", "--gamma", "7") == 0
    assert _sample(b, "--seed", "5", "--gamma", "7") == 0
    assert _sample(c, "--seed", "6", "--gamma", "7") == 0
    names = sorted(p.name for p in a.glob("*.mel"))
    assert all((a / n).read_bytes() == (b / n).read_bytes() for n in names)
    assert any((a / n).read_bytes() != (c / n).read_bytes() for n in names)


def test_sample_zero_temperature_ignores_seed(tmp_path):
    assert _sample(tmp_path / "a", "--eta", "0", "--seed", "1") == 0
    assert _sample(tmp_path / "b", "--eta", "0", "--seed", "2") == 0
    assert (tmp_path / "a" / "chain_00002.mel").read_bytes() == \
        (tmp_path / "b" / "chain_00002.mel").read_bytes()


def test_sample_from_manifest_replays(tmp_path):
    assert _sample(tmp_path / "a", "--seed", "9", "--gamma", "21", "--eta", "0.6",
                   "--mu", "0,2", "--std", "1,0.3", "--channels", "2") == 0
    assert main(["sample", "--from-manifest", str(tmp_path / "a" / "manifest.txt"),
                 "--out", str(tmp_path / "b")]) == 0
    for i in range(3):
        name = f"chain_{i:05d}.mel"
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_sample_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("MELDIFF_OUTPUT_DIR", str(tmp_path / "env"))
    assert main(["sample"]) == 0
    assert (tmp_path / "env" / "manifest.txt").exists()


@pytest.mark.parametrize("flags", [["--gamma", "0"], ["--gamma", "500"], ["--eta", "-1"],
                                   ["--predictor", "toy"],
                                   ["--predictor", "toy", "--params", "/nonexistent/p"],
                                   ["--schedule", "/nonexistent"]])
def test_sample_validation_errors(tmp_path, flags):
    assert _sample(tmp_path, *flags) == 1


def test_train_toy_then_sample(tmp_path):
    train_dir = tmp_path / "toy"
    assert main(["train-toy", "--steps", "20", "--items", "64", "--out", str(train_dir)]) == 0
    losses = (train_dir / "losses.csv").read_text().splitlines()
    assert losses[0] == "step,loss" and len(losses) == 21
    args = ["--predictor", "toy", "--params", str(train_dir / "toy_params"), "--channels", "2",
            "--label", "1", "--gamma", "57"]
    assert _sample(tmp_path / "s1", *args) == 0
    assert _sample(tmp_path / "s2", *args) == 0
    assert (tmp_path / "s1" / "chain_00001.mel").read_bytes() == \
        (tmp_path / "s2" / "chain_00001.mel").read_bytes()
    assert _sample(tmp_path / "s3", *args[:-2], "--label", "7") == 1


def test_bench_command(tmp_path, capsys):
    out = tmp_path / "bench.csv"
    assert main(["bench", "--channels", "4", "--frames", "8", "--repeats", "2",
                 "--out", str(out)]) == 0
    rows = list(csv.DictReader(stdio.StringIO(out.read_text())))
    assert [int(r["predictor_calls"]) for r in rows] == [400, 58, 20, 8]
    assert [int(r["M"]) for r in rows] == [400, 58, 20, 8]
    assert float(rows[0]["speedup"]) == 1.0


def test_bench_speedup_is_monotone():
    from meldiff.bench import run_bench

    rows = run_bench(repeats=5, shape=(80, 100))
    speedups = [r["speedup"] for r in rows]
    assert all(b > a for a, b in zip(speedups, speedups[1:]))


def test_grad_check_command(capsys):
    assert main(["grad-check", "--train-steps", "20"]) == 0
    assert "PASS" in capsys.readouterr().out


def test_verify_rejects_corrupt_schedule(tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text("400 0.0001 0.02 linear\n0.1\nnot-a-number\n")
    assert main(["verify", "--schedule", str(bad)]) == 1


def test_verify_subset_records_seed(capsys):
    assert main(["verify", "--only", "1,2", "--seed", "123"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("# seed=123")
    assert out.count("\tPASS\t") == 2
