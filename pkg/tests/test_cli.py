"""Command-line interface: configuration handling, outputs and exit codes."""
import csv
import io

import pytest

from pairswitch import cli
from pairswitch.cli import ConfigError, main, parse_config, params_from_config
from pairswitch.solver import SolverError

OU_CFG = """# reference OU set
model = OU
mu = 0.8
sigma = 0.5
rho = 0.1
lambda = 0.07
epsilon = 0.005
L = 0
"""

IGBM_2III_CFG = """model = IGBM
mu = 0.8
sigma = 0.3
rho = 0.2
lambda = 0.05
epsilon = 0.65
L = 0.1
"""


def run(tmp_path, command, text, *extra):
    cfg = tmp_path / f"{command}.cfg"
    cfg.write_text(text)
    out, err = io.StringIO(), io.StringIO()
    code = main([command, "--config", str(cfg), *extra], stdout=out, stderr=err)
    return code, out.getvalue(), err.getvalue()


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# -- configuration parsing ---------------------------------------------------------------

def test_parse_config_handles_comments_and_rejects_bad_lines():
    assert parse_config("a = 1  # note\n\n# only a comment\nb=2") == {"a": "1", "b": "2"}
    with pytest.raises(ConfigError, match="expected key = value"):
        parse_config("just words")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config("a = 1\na = 2")
    with pytest.raises(ConfigError, match="unknown key 'zeta'"):
        parse_config("zeta = 1", allowed={"a"})


def test_params_from_config_defaults_and_errors():
    p = params_from_config(parse_config(OU_CFG.replace("L = 0\n", "")))
    assert p.L == 0.0 and p.lam == 0.07
    with pytest.raises(ConfigError, match="missing required key 'L'"):
        params_from_config(parse_config(IGBM_2III_CFG.replace("L = 0.1\n", "")))
    with pytest.raises(ConfigError, match="expected OU or IGBM"):
        params_from_config(parse_config(OU_CFG.replace("OU", "CIR")))
    with pytest.raises(ConfigError, match="cannot parse"):
        params_from_config(parse_config(OU_CFG.replace("0.8", "fast")))


# -- exit codes --------------------------------------------------------------------------

def test_missing_key_exits_2_with_message(tmp_path):
    code, _, err = run(tmp_path, "solve", OU_CFG.replace("mu = 0.8\n", ""))
    assert code == 2
    assert "missing required key 'mu'" in err


@pytest.mark.parametrize("text", [
    OU_CFG + "grid = 10\n",              # key not accepted by this command
    OU_CFG.replace("0.5", "-0.5"),       # invalid parameter value
])
def test_invalid_input_exits_2(tmp_path, text):
    code, _, err = run(tmp_path, "solve", text)
    assert code == 2 and err.startswith("error:")


def test_unreadable_config_and_bad_usage_exit_2(tmp_path):
    err = io.StringIO()
    assert main(["solve", "--config", str(tmp_path / "absent.cfg")], stdout=io.StringIO(), stderr=err) == 2
    assert main(["launch", "--config", "x"], stdout=io.StringIO(), stderr=io.StringIO()) == 2


def test_solver_failure_exits_3(tmp_path, monkeypatch):
    def failing(_):
        raise SolverError("no root", attempts={"Case2i": "solve failed"})

    monkeypatch.setattr(cli, "solve", failing)
    code, _, err = run(tmp_path, "solve", OU_CFG)
    assert code == 3
    assert "solver error: no root" in err and "diagnostics" in err


# -- solve -----------------------------------------------------------------------------

def test_solve_prints_and_writes_cutoffs(tmp_path):
    out_csv = tmp_path / "cut.csv"
    code, out, _ = run(tmp_path, "solve", OU_CFG, "--out", str(out_csv))
    assert code == 0 and "Case1" in out
    rows = dict(read_csv(out_csv)[1:])
    assert read_csv(out_csv)[0] == ["quantity", "value"]
    assert float(rows["open_sell"]) == pytest.approx(0.209431, abs=1e-6)
    assert float(rows["xbar_01"]) == pytest.approx(0.209431, abs=1e-6)
    assert float(rows["xbar_-1"]) == pytest.approx(0.0482830, abs=1e-6)
    # 6 significant digits
    assert rows["open_sell"] == "0.209431"


def test_csv_output_is_deterministic(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    run(tmp_path, "solve", IGBM_2III_CFG, "--out", str(a))
    run(tmp_path, "solve", IGBM_2III_CFG, "--out", str(b))
    assert a.read_bytes() == b.read_bytes()
    rows = dict(read_csv(a)[1:])
    assert rows["case"] == "Case2iii" and rows["open_buy"] == "" and rows["B0"] == ""


# -- verify ------------------------------------------------------------------------------

def test_verify_passes_on_a_reference_set(tmp_path):
    out_csv = tmp_path / "v.csv"
    code, out, _ = run(tmp_path, "verify", OU_CFG, "--out", str(out_csv))
    assert code == 0 and "pass" in out
    rows = read_csv(out_csv)
    assert rows[0] == ["check", "max_residual", "tolerance", "pass"]
    assert rows[-1][0] == "overall" and rows[-1][3] == "true"
    assert sum(r[0].startswith("smooth_fit/") for r in rows) == 8


def test_verify_flags_a_perturbed_coefficient(tmp_path):
    code, out, _ = run(tmp_path, "verify", OU_CFG + "perturb_coeff = A0\nperturb_amount = 0.001\n")
    assert code == 4 and "FAIL" in out
    code, _, err = run(tmp_path, "verify", OU_CFG + "perturb_coeff = C7\n")
    assert code == 2 and "perturb_coeff" in err


def test_verify_notes_the_constant_short_value(tmp_path):
    code, out, _ = run(tmp_path, "verify", IGBM_2III_CFG, "--grid", "200")
    assert code == 0 and "v_-1 is the constant -lambda/rho" in out


# -- oracle ----------------------------------------------------------------------------

def test_oracle_agreement_table(tmp_path):
    out_csv = tmp_path / "o.csv"
    code, out, _ = run(tmp_path, "oracle", OU_CFG, "--grid", "1001", "--out", str(out_csv))
    assert code == 0 and "pass" in out
    rows = read_csv(out_csv)
    assert rows[0] == ["quantity", "closed_form", "oracle", "delta", "delta_cells", "pass"]
    edges = [r for r in rows[1:] if r[0].startswith("edge/")]
    assert len(edges) == 4 and all(float(r[4]) <= 2.0 for r in edges)


# -- simulate ----------------------------------------------------------------------------

SIM_KEYS = "x0 = 0\nhorizon = 40\ndt = 0.02\npaths = 300\nperturb = 0.2\n"


def test_simulate_reports_optimal_and_perturbed_strategies(tmp_path):
    out_csv, trace = tmp_path / "s.csv", tmp_path / "trace.csv"
    code, out, _ = run(tmp_path, "simulate", OU_CFG + SIM_KEYS + f"trace_out = {trace}\n",
                       "--seed", "3", "--out", str(out_csv))
    assert code == 0 and "v(x0) closed form" in out
    rows = read_csv(out_csv)
    assert rows[0][:3] == ["strategy", "mean_gain", "std_error"]
    names = [r[0] for r in rows[1:]]
    assert names[0] == "optimal" and len(names) == 9  # 4 edges x (+-20%)
    t = read_csv(trace)
    assert t[0] == ["t", "x", "regime"] and len(t) == 2002
    assert {r[2] for r in t[1:]} <= {"-1", "0", "1"}


def test_simulate_is_seed_reproducible(tmp_path):
    a, b, c = tmp_path / "a.csv", tmp_path / "b.csv", tmp_path / "c.csv"
    run(tmp_path, "simulate", OU_CFG + SIM_KEYS, "--seed", "5", "--out", str(a))
    run(tmp_path, "simulate", OU_CFG + SIM_KEYS, "--seed", "5", "--out", str(b))
    run(tmp_path, "simulate", OU_CFG + SIM_KEYS, "--seed", "6", "--out", str(c))
    assert a.read_bytes() == b.read_bytes()
    assert a.read_bytes() != c.read_bytes()


def test_simulate_rejects_a_bad_regime_and_step(tmp_path):
    assert run(tmp_path, "simulate", OU_CFG + "regime = 2\n")[0] == 2
    assert run(tmp_path, "simulate", OU_CFG + "horizon = 1\ndt = 0.1\n")[0] == 2


# -- sweep -----------------------------------------------------------------------------

def test_sweep_rows_and_failure_flags(tmp_path):
    out_csv = tmp_path / "sw.csv"
    text = OU_CFG + "sweep_key = sigma\nsweep_start = -0.2\nsweep_stop = 0.6\nsweep_steps = 3\n"
    code, _, _ = run(tmp_path, "sweep", text, "--out", str(out_csv))
    assert code == 0
    rows = read_csv(out_csv)
    assert rows[0] == ["sigma", "case", "open_buy", "close_buy", "close_sell", "open_sell", "failed", "message"]
    assert len(rows) == 4
    # sigma = -0.2 is invalid and flagged; 0.2 and 0.6 solve
    assert rows[1][6] == "true" and rows[1][7]
    assert [r[6] for r in rows[2:]] == ["false", "false"]
    assert all(r[1] == "Case1" for r in rows[2:])


def test_sweep_writes_to_stdout_without_out(tmp_path):
    text = OU_CFG + "sweep_key = lambda\nsweep_start = 0.05\nsweep_stop = 0.1\nsweep_steps = 2\n"
    code, out, _ = run(tmp_path, "sweep", text)
    assert code == 0 and out.splitlines()[0].startswith("lambda,case")
    assert len(out.splitlines()) == 3


def test_sweep_rejects_unknown_keys(tmp_path):
    text = OU_CFG + "sweep_key = rho\nsweep_start = 0.1\nsweep_stop = 0.2\nsweep_steps = 2\n"
    code, _, err = run(tmp_path, "sweep", text)
    assert code == 2 and "sweep_key" in err
