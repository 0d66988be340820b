import subprocess
import sys

import pytest

from srlab.cli import main

SPEC = """
name = clitest
n = 32
d_in = 3
d_out = 1
hidden = [3]
formats = [E4M2]
batch_sizes = [4]
steps = 20
eval_every = 10
"""


def write(tmp_path, text, name="s.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_run_writes_csvs(tmp_path, capsys):
    spec = write(tmp_path, SPEC)
    assert main(["run", spec, "--out", str(tmp_path / "out")]) == 0
    assert (tmp_path / "out" / "runs.csv").exists() and (tmp_path / "out" / "summary.csv").exists()
    assert "1 cells, 0 failed" in capsys.readouterr().out


def test_run_failure_exit_code(tmp_path):
    spec = write(tmp_path, SPEC + "modes = [fp]\nlearning_rates = [1e4]\n")
    assert main(["run", spec, "--out", str(tmp_path / "out")]) == 1


def test_spec_error_is_usage_error(tmp_path, capsys):
    spec = write(tmp_path, "name = x\noptimzer = sgd\n")
    assert main(["run", spec]) == 2
    assert "optimzer" in capsys.readouterr().err


def test_missing_file_and_bad_args(tmp_path):
    assert main(["run", str(tmp_path / "nope.cfg")]) == 2
    assert main([]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["quantize", "0.5", "--grid", "bogus"]) == 2
    assert main(["quantize", "inf", "--grid", "u:1"]) == 2


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0


def test_quantize_rtn(capsys):
    assert main(["quantize", "0.7", "--grid", "u:1"]) == 0
    assert capsys.readouterr().out.strip() == "1.0"
    assert main(["quantize", "3.0", "--grid", "E4M0"]) == 0
    assert capsys.readouterr().out.strip() == "4.0"


def test_quantize_sr_is_seeded(capsys):
    main(["quantize", "0.7", "--grid", "u:1", "--mode", "sr", "--seed", "3", "--count", "20"])
    a = capsys.readouterr().out.split()
    main(["quantize", "0.7", "--grid", "u:1", "--mode", "sr", "--seed", "3", "--count", "20"])
    assert capsys.readouterr().out.split() == a
    assert set(a) == {"0.0", "1.0"}


def test_quantize_lfsr_source(capsys):
    # LFSR state 48 gives eps = 0.75 > 0.7, so 0.7 rounds down; the next state 24 (eps 0.375) rounds up
    main(["quantize", "0.7", "--grid", "u:1", "--mode", "sr", "--source", "lfsr6", "--seed", "48", "--count", "2"])
    assert capsys.readouterr().out.split() == ["0.0", "1.0"]


def test_verify_lemmas(tmp_path, capsys):
    spec = write(tmp_path, "name = lem\nn = 64\nd_in = 4\nd_out = 1\nhidden = []\nactivation = none\n"
                           "formats = [E4M1]\nweight_format = u:0.25\nbatch_sizes = [4]\nlemma_trials = 4000\n")
    code = main(["verify-lemmas", spec, "--out", str(tmp_path / "lem")])
    out = capsys.readouterr().out
    assert (tmp_path / "lem" / "lemmas.csv").exists()
    assert code == (1 if "FAIL" in out else 0)
    assert "tq_bits_slope" in out


@pytest.mark.parametrize("args", [["--help"], ["quantize", "0.25", "--grid", "u:0.5"]])
def test_console_entry_point(args):
    r = subprocess.run([sys.executable, "-m", "srlab.cli", *args], capture_output=True, text=True)
    assert r.returncode == 0
