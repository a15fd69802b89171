import json

import numpy as np
import pytest

import bkfac.linalg
from bkfac.cli import main, parse_config, run_bench
from bkfac.errors import ConfigError
from bkfac.linalg import LowRankSPSD
from bkfac.maintainers import RegularizedInverse, apply_inverse, apply_inverse_linear
from bkfac.stream import load_stream, write_stream

MINIMAL = """
[stream]
d = 12
n_bs = 2
seeds = [0]

[run]
T_updt = 5
steps = 10
warmup = 10

[[strategy]]
kind = "kfac"
T_inv = 5
"""


def _run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err.strip().splitlines()


def _config(tmp_path, text=MINIMAL):
    path = tmp_path / "run.toml"
    path.write_text(text)
    return str(path)


def test_simulate_minimal_benchmark_is_zero(tmp_path, capsys):
    code, _, _ = _run(capsys, "simulate", "--config", _config(tmp_path), "--out", str(tmp_path / "o"))
    assert code == 0
    lines = (tmp_path / "o" / "metrics.csv").read_text().splitlines()
    assert lines[0] == "seed,strategy,step,m1,m2,m3,m4"
    assert len(lines) == 11
    assert all(line.endswith(",0,0,0,0") for line in lines[1:])


def test_simulate_is_byte_deterministic(tmp_path, capsys):
    text = MINIMAL + '\n[[strategy]]\nkind = "bkfac"\nT_brand = 5\nr = 4\n'
    cfg = _config(tmp_path, text)
    for out in ("a", "b"):
        assert _run(capsys, "simulate", "--config", cfg, "--out", str(tmp_path / out))[0] == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_seed_override_and_threads_env(tmp_path, capsys, monkeypatch):
    text = MINIMAL.replace("seeds = [0]", "seeds = [0, 1, 2]")
    monkeypatch.setenv("KFO_THREADS", "2")
    code, _, _ = _run(capsys, "simulate", "--config", _config(tmp_path, text), "--seed", "7", "--out", str(tmp_path))
    assert code == 0
    seeds = {line.split(",")[0] for line in (tmp_path / "metrics.csv").read_text().splitlines()[1:]}
    assert seeds == {"7"}


@pytest.mark.parametrize("edit, field", [
    (("n_bs = 2", "n_bs = 2\nrho = 1.2"), "stream.rho"),
    (("T_inv = 5", "T_inv = 7"), "strategy[0]"),
    (("steps = 10", "steps = 10\nbogus = 1"), "run.bogus"),
    (('kind = "kfac"', 'kind = "nope"'), "strategy[0].kind"),
    (("warmup = 10", "warmup = 12"), "run.warmup"),
    (("d = 12", "d = 12.5"), "stream.d"),
])
def test_config_errors_name_the_field(tmp_path, capsys, edit, field):
    code, _, err = _run(capsys, "simulate", "--config", _config(tmp_path, MINIMAL.replace(*edit)))
    assert code == 2
    assert err[-1].startswith("ERROR code=CONFIG_ERROR")
    assert f"field={field}" in err[-1]


def test_syntax_error_reports_line(tmp_path, capsys):
    code, _, err = _run(capsys, "simulate", "--config", _config(tmp_path, "[stream\nd = 1"))
    assert code == 2 and "line 1" in err[-1]


def test_missing_config_is_io_error(tmp_path, capsys):
    code, _, err = _run(capsys, "simulate", "--config", str(tmp_path / "missing.toml"))
    assert code == 3 and err[-1].startswith("ERROR code=IO_ERROR")


def test_bad_arguments_are_machine_readable(capsys):
    code, _, err = _run(capsys, "frobnicate")
    assert code == 2 and err[-1].startswith("ERROR code=CONFIG_ERROR")


def test_needs_a_strategy():
    with pytest.raises(ConfigError):
        parse_config({"stream": {"d": 8}})


def test_verify_small_passes(tmp_path, capsys):
    code, out, _ = _run(capsys, "verify", "--out", str(tmp_path))
    assert code == 0
    reports = json.loads((tmp_path / "propositions.json").read_text())
    assert {r["prop"] for r in reports} == {"3.1", "3.2", "4.1", "4.2"}
    assert all(a["pass"] for r in reports for a in r["assertions"])


def test_verify_catches_eigenvalue_sign_bug(tmp_path, capsys, monkeypatch):
    real = bkfac.linalg.sym_eigh

    def sign_bug(M):
        w, V = real(M)
        return -w[::-1], V[:, ::-1]

    monkeypatch.setattr(bkfac.linalg, "sym_eigh", sign_bug)
    code, _, err = _run(capsys, "verify", "--out", str(tmp_path))
    assert code == 1
    assert err[-1].startswith("ERROR code=VERIFY_FAILED")
    assert (tmp_path / "propositions.json").exists()


def test_bench_small_and_empty_dims(tmp_path, capsys):
    rows, slopes = run_bench([64, 128], r=8, n_bs=4, reps=1)
    assert [(s, d) for s, d, _ in rows] == [("bkfac", 64), ("rkfac", 64), ("bkfac", 128), ("rkfac", 128)]
    assert set(slopes) == {"bkfac", "rkfac"}
    code, _, err = _run(capsys, "bench", "--dims", "", "--out", str(tmp_path))
    assert code == 2 and "field=bench.dims" in err[-1]


@pytest.fixture
def inverse_spec(tmp_path, rng):
    def rep(d, r):
        U, _ = np.linalg.qr(rng.standard_normal((d, r)))
        return U, np.sort(rng.random(r))[::-1] + 0.5

    gU, gD = rep(6, 2)
    aU, aD = rep(5, 3)
    path = tmp_path / "inv.npz"
    np.savez(path, gamma_U=gU, gamma_D=gD, gamma_lambda=0.3, gamma_shift=gD[-1],
             a_U=aU, a_D=aD, a_lambda=0.2, a_shift=0.0)
    inv_g = RegularizedInverse(LowRankSPSD(gU, gD), 0.3, gD[-1])
    inv_a = RegularizedInverse(LowRankSPSD(aU, aD), 0.2, 0.0)
    return str(path), inv_g, inv_a


def test_apply_linear_and_dense_agree(tmp_path, capsys, rng, inverse_spec):
    spec, inv_g, inv_a = inverse_spec
    Gs = [rng.standard_normal((6, 3)) for _ in range(4)]
    As = [rng.standard_normal((5, 3)) for _ in range(4)]
    write_stream(tmp_path / "g.kfst", Gs)
    write_stream(tmp_path / "a.kfst", As)
    write_stream(tmp_path / "full.kfst", [G @ A.T for G, A in zip(Gs, As)])
    assert _run(capsys, "apply", "--inverse", spec, "--grad-g", str(tmp_path / "g.kfst"),
                "--grad-a", str(tmp_path / "a.kfst"), "--out", str(tmp_path / "lin"))[0] == 0
    assert _run(capsys, "apply", "--inverse", spec, "--grad", str(tmp_path / "full.kfst"),
                "--out", str(tmp_path / "dense"))[0] == 0
    lin = load_stream(tmp_path / "lin" / "steps.kfst")
    dense = load_stream(tmp_path / "dense" / "steps.kfst")
    for G, A, x, y in zip(Gs, As, lin, dense):
        assert np.linalg.norm(x - y) <= 1e-9 * np.linalg.norm(y)
        assert np.allclose(x, apply_inverse_linear(inv_g, inv_a, G, A), rtol=1e-12)


def test_apply_zero_gradient(tmp_path, capsys, inverse_spec):
    spec, _, _ = inverse_spec
    write_stream(tmp_path / "z.kfst", [np.zeros((6, 5))] * 2)
    assert _run(capsys, "apply", "--inverse", spec, "--grad", str(tmp_path / "z.kfst"), "--out", str(tmp_path))[0] == 0
    assert all(not s.any() for s in load_stream(tmp_path / "steps.kfst"))


def test_apply_malformed_file(tmp_path, capsys, inverse_spec):
    spec, _, _ = inverse_spec
    (tmp_path / "bad.kfst").write_bytes(b"NOPE" + bytes(20))
    code, _, err = _run(capsys, "apply", "--inverse", spec, "--grad", str(tmp_path / "bad.kfst"), "--out", str(tmp_path))
    assert code == 4
    assert err[-1].startswith("ERROR code=MALFORMED_FILE") and "offset=0" in err[-1]


def test_apply_missing_stream(tmp_path, capsys, inverse_spec):
    spec, _, _ = inverse_spec
    code, _, err = _run(capsys, "apply", "--inverse", spec, "--grad", str(tmp_path / "nope.kfst"))
    assert code == 3 and err[-1].startswith("ERROR code=IO_ERROR")
