import json
import math
import subprocess
import sys
from pathlib import Path

import pytest

from metadescent import cli_io, experiments, theory_bounds
from metadescent.cli_io import (
    EXIT_CONFIG, EXIT_DEGENERATE, EXIT_OK, EXIT_VERIFY, ConfigFileError, load_config, main, parse_config,
)
from metadescent.solvers import DegenerateSystemError

GOLDEN_HEADER = (Path(__file__).parent / "data" / "golden_header.csv").read_text()

SMALL = {
    "system": {"p": 40, "s": 5, "m": 4, "n_t": 12, "n_v": 3, "nu": 2.0, "sigma": 0.5, "alpha_t": 0.01, "w0_norm_sq": 10.0},
    "sweep": {"p_grid": [10, 40], "replicates": 6, "estimands": ["model_error_l2", "term1"]},
    "seed": 11,
}


def write_cfg(tmp_path, doc, name="run.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc, indent=2))
    return str(path)


def test_round_trip_is_identity():
    for name in cli_io.BUNDLED:
        cfg = load_config(name)
        again = parse_config(cfg.dumps())
        assert again.to_dict() == cfg.to_dict()
        assert parse_config(again.dumps()).dumps() == cfg.dumps()


def test_unknown_key_reports_line():
    text = '{\n  "system": {"p": 4, "s": 1, "m": 1, "n_t": 2, "n_v": 1},\n  "sweep": {"p_grid": [4],\n    "replicas": 3}\n}'
    with pytest.raises(ConfigFileError, match=r":4: unknown key 'replicas'") as info:
        parse_config(text, "x.json")
    assert info.value.line == 4


def test_syntax_error_reports_line():
    with pytest.raises(ConfigFileError, match=r"x.json:3:"):
        parse_config('{\n "system": {"p": 4,\n  }', "x.json")


@pytest.mark.parametrize("doc", [
    {"sweep": {"p_grid": [4]}},
    {"system": {"p": 4, "s": 1, "m": 1, "n_t": 2}},
    {"system": {"p": 4, "s": 8, "m": 1, "n_t": 2, "n_v": 1}},
    {"system": {"p": 4, "s": 1, "m": 1, "n_t": 2, "n_v": 1, "w0": [1.0], "w0_norm_sq": 1.0}},
    {"system": {"p": 4, "s": 1, "m": 1, "n_t": 2, "n_v": 1}, "sweep": {"replicates": 2}},
    {"system": {"p": 4, "s": 1, "m": 1, "n_t": 2, "n_v": 1}, "curves": [{"nu": 1}]},
])
def test_invalid_documents(doc):
    with pytest.raises(ConfigFileError):
        parse_config(json.dumps(doc))


def test_explicit_w0_vector():
    doc = {"system": {"p": 6, "s": 2, "m": 1, "n_t": 2, "n_v": 1, "w0": [3.0, 4.0]}}
    assert parse_config(json.dumps(doc)).meta_config().w0_norm_sq == 25.0


def test_bundled_fig1_configs():
    for cid, (nu, sigma) in experiments.FIG1_CURVES.items():
        cfg = load_config(f"fig1_{cid}")
        plan = cfg.plan()
        assert plan.config_at(35).nu_total == nu and plan.config_at(35).sigma == sigma
        assert plan.p_grid == experiments.FIG1_P_GRID and plan.replicates == 100
        assert plan.config_at(1000).alpha_t == pytest.approx(0.02 / 1000)
    assert len(load_config("appendixE1").curves) == 5
    p1 = load_config("underparam_p1").meta_config()
    assert (p1.p, p1.s) == (1, 1)


def test_sweep_golden_header_and_row_count(tmp_path):
    doc = dict(SMALL, sweep={"p_grid": [40], "replicates": 1})
    out = tmp_path / "one.csv"
    assert main(["sweep", write_cfg(tmp_path, doc), "-o", str(out)]) == EXIT_OK
    text = out.read_bytes().decode()
    assert text.startswith(GOLDEN_HEADER)
    assert "\r" not in text
    rows = cli_io.read_csv(out)
    assert len(rows) == len(experiments.ESTIMANDS)
    assert [r["estimand"] for r in rows] == list(experiments.ESTIMANDS)


def test_sweep_values_round_trip(tmp_path):
    path = write_cfg(tmp_path, SMALL)
    out = tmp_path / "r.csv"
    main(["sweep", path, "-o", str(out)])
    recs = experiments.run_sweep(load_config(path).plan(), workers=1)
    for row, rec in zip(cli_io.read_csv(out), recs):
        assert float(row["mean"]) == rec.mean or (math.isnan(rec.mean) and row["mean"] == "nan")
        assert float(row["b_eig_min"]) == rec.bounds.b_eig_min
    assert "below_threshold" in cli_io.read_csv(out)[0]["flags"].split(";")


def test_sweep_byte_identical_across_runs_and_workers(tmp_path):
    path = write_cfg(tmp_path, SMALL)
    outs = []
    for i, workers in enumerate((1, 1, 4)):
        out = tmp_path / f"o{i}.csv"
        assert main(["sweep", path, "-o", str(out), "--workers", str(workers)]) == EXIT_OK
        outs.append(out.read_bytes())
    assert outs[0] == outs[1] == outs[2]
    seeded = tmp_path / "seeded.csv"
    main(["sweep", path, "-o", str(seeded), "--seed", "12"])
    assert seeded.read_bytes() != outs[0]


def test_sweep_one_file_per_curve(tmp_path):
    doc = dict(SMALL, curves=[{"id": "x", "nu": 1.0}, {"id": "y", "nu": 3.0, "sigma": 0.0}])
    assert main(["sweep", write_cfg(tmp_path, doc), "-o", str(tmp_path / "fig.csv"), "--replicates", "2"]) == EXIT_OK
    x, y = cli_io.read_csv(tmp_path / "fig_x.csv"), cli_io.read_csv(tmp_path / "fig_y.csv")
    assert {r["nu"] for r in x} == {"1.0"} and {r["sigma"] for r in y} == {"0.0"}
    assert {r["replicates"] for r in x} == {"2"}


def test_sweep_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["sweep", write_cfg(tmp_path, SMALL), "-o", str(blocker / "out.csv")]) != EXIT_OK


def test_sweep_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{\n "system": {"p": 4, "s": 1, "m": 1, "n_t": 2, "n_v": 1},\n "extra": 1\n}')
    assert main(["sweep", str(bad), "-o", str(tmp_path / "x.csv")]) == EXIT_CONFIG
    assert "bad.json:3: unknown key 'extra'" in capsys.readouterr().err
    assert main(["sweep", str(tmp_path / "missing.json")]) == EXIT_CONFIG
    assert main(["nonsense"]) == EXIT_CONFIG


def test_bounds_report(tmp_path, capsys):
    doc = {"system": {"p": 1000, "s": 5, "m": 10, "n_t": 50, "n_v": 3, "nu": 2.0, "sigma": 0.2,
                      "alpha_t": 0.0, "w0_norm_sq": 100.0}}
    out = tmp_path / "b.csv"
    assert main(["bounds", write_cfg(tmp_path, doc), "-o", str(out)]) == EXIT_OK
    text = capsys.readouterr().out
    for symbol in theory_bounds.BOUND_SYMBOLS.values():
        assert symbol in text
    assert "below_threshold" in text
    row = cli_io.read_csv(out)[0]
    assert float(row["alpha_t_prime"]) == 0 and float(row["D"]) == 1


def test_floor_report(tmp_path, capsys):
    assert main(["floor", "appendixE1"]) == EXIT_OK
    text = capsys.readouterr().out.splitlines()
    assert "monotone decreasing" in text[0] and "monotone decreasing" in text[1]
    assert "descent floor at p*" in text[2] and "descent floor at p*" in text[3]
    assert "no fluctuation term" in text[4]


def test_verify_default_passes(capsys):
    assert main(["verify"]) == EXIT_OK
    text = capsys.readouterr().out
    assert "FAIL" not in text and "xxxx_diag_mean" in text


def test_verify_detects_corrupted_formula(monkeypatch, capsys):
    real = theory_bounds.expected_delta_gamma_sq
    monkeypatch.setattr(theory_bounds, "expected_delta_gamma_sq", lambda cfg: 1.1 * real(cfg))
    assert main(["verify", "--replicates", "300"]) == EXIT_VERIFY
    assert "FAIL" in capsys.readouterr().out


def test_verify_zero_randomness_rows(tmp_path, capsys):
    doc = {"system": {"p": 40, "s": 5, "m": 4, "n_t": 12, "n_v": 3, "nu": 0.0, "sigma": 0.0, "alpha_t": 0.01,
                      "w0_norm_sq": 10.0},
           "audit": {"replicates": 50, "xxxx_draws": 2000, "identity_instances": 10}}
    assert main(["verify", write_cfg(tmp_path, doc)]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    values = {ln[:32].strip(): ln[32:].split()[0] for ln in lines if ln[:32].strip() in
              ("|delta_gamma|^2", "term2", "ideal model error", "delta_gamma_sq")}
    assert values == {"|delta_gamma|^2": "0", "term2": "0", "ideal model error": "0", "delta_gamma_sq": "0"}


def test_degenerate_exit_code(monkeypatch):
    def boom(*a, **k):
        raise DegenerateSystemError("forced", 0.0)
    monkeypatch.setattr(cli_io, "cmd_bounds", boom)
    assert main(["bounds", "fig1_a"]) == EXIT_DEGENERATE


def test_tightness_command(tmp_path):
    doc = dict(SMALL, sweep={"p_grid": [10, 40, 80], "replicates": 5})
    out = tmp_path / "t.csv"
    assert main(["tightness", write_cfg(tmp_path, doc), "-o", str(out)]) == EXIT_OK
    rows = cli_io.read_csv(out)
    assert [int(r["p"]) for r in rows] == [40, 80]


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "metadescent", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "sweep" in proc.stdout
