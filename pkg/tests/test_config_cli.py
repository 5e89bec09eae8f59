import json

import numpy as np
import pytest

from fipa.cli import main
from fipa.config import ConfigError, parse_config, serialize_config, set_path, to_dict
from fipa.oracles import SUITES
from fipa.runner import CSV_COLUMNS, OUTPUT_ENV, read_rounds_csv

TINY = """
seed: 3
model: {widths: [1, 4, 1]}
federation:
  n_per_client: 30
  rounds: 4
  warmup_rounds: 2
  local_epochs: 1
  lr: 0.01
  adaptive_energy: 0.99
  sketch_rank: 3
diagnostics: {gn_reference: true}
"""


def write(tmp_path, text, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


# -- parsing ------------------------------------------------------------------

def test_minimal_config_fills_every_default():
    cfg = parse_config("")
    d = to_dict(cfg)
    assert d["problem"]["kind"] == "sine" and d["model"]["widths"] == [1, 32, 32, 1]
    assert d["federation"]["rule"] == "fipa_dense" and d["federation"]["participation_fraction"] == 1.0
    assert "seed" in d and "output" in d


def test_participation_zero_reports_its_path():
    with pytest.raises(ConfigError) as err:
        parse_config("federation: {participation_fraction: 0}")
    assert [p for p, _ in err.value.errors] == ["federation.participation_fraction"]


def test_all_errors_are_collected():
    text = "federation: {participation_fraction: 0, lr: -1, rule: bogus}\nproblme: {}\n"
    with pytest.raises(ConfigError) as err:
        parse_config(text)
    paths = {p for p, _ in err.value.errors}
    assert {"federation.participation_fraction", "federation.lr", "federation.rule",
            "problme"} <= paths
    record = err.value.as_record()
    assert record["error"] == "invalid_config" and len(record["errors"]) == len(err.value.errors)


@pytest.mark.parametrize("text, path", [
    ("federation: {rule: fipa_qr}", "federation"),
    ("federation: {rounds: 3, warmup_rounds: 5}", "federation"),
    ("model: {widths: [2, 4, 1]}", "<root>"),
    ("problem: {kind: poisson}\nmodel: {activation: relu}\nfederation: {partition: slabs}", "<root>"),
    ("model: {trainable_layers: [7]}", "model"),
    ("federation: {partition: grid}", "federation"),
    ("federation: {typo_key: 1}", "federation.typo_key"),
])
def test_cross_field_and_strict_key_errors(text, path):
    with pytest.raises(ConfigError) as err:
        parse_config(text)
    assert path in [p for p, _ in err.value.errors]


def test_not_a_mapping_and_bad_yaml():
    with pytest.raises(ConfigError):
        parse_config("- 1\n- 2\n")
    with pytest.raises(ConfigError, match="YAML"):
        parse_config("a: [1, 2")


def test_round_trip_is_idempotent():
    cfg = parse_config(TINY)
    again = parse_config(serialize_config(cfg))
    assert to_dict(again) == to_dict(cfg)
    assert serialize_config(again) == serialize_config(cfg)


def test_set_path_revalidates():
    cfg = parse_config(TINY)
    assert set_path(cfg, "federation.lr", 0.5).federation.lr == 0.5
    with pytest.raises(ConfigError):
        set_path(cfg, "federation.lr", -1.0)
    with pytest.raises(ConfigError):
        set_path(cfg, "federation.nope", 1)


# -- run ----------------------------------------------------------------------

def test_run_writes_schema_and_is_byte_reproducible(tmp_path, capsys):
    cfg = write(tmp_path, TINY)
    assert main(["run", cfg, "--out", str(tmp_path / "a")]) == 0
    assert main(["run", cfg, "--out", str(tmp_path / "b"), "--workers", "2"]) == 0
    a = (tmp_path / "a" / "rounds.csv").read_bytes()
    assert a == (tmp_path / "b" / "rounds.csv").read_bytes()
    lines = a.decode().splitlines()
    assert len(lines) == 4 + 1
    assert tuple(lines[0].split(",")) == CSV_COLUMNS
    rows = read_rounds_csv(tmp_path / "a" / "rounds.csv")
    assert [r["rule"] for r in rows] == ["fedavg", "fedavg", "fipa_dense", "fipa_dense"]
    # GN diagnostics only on the main phase, starting from a shared point
    assert rows[0]["e_k"] == "" and float(rows[2]["e_k"]) == 0.0
    # two main rounds are too few for a contraction estimate
    assert rows[2]["rho_hat"] == "" and rows[-1]["delta_k"] != ""


def test_longer_run_reports_contraction_estimate(tmp_path):
    cfg = write(tmp_path, TINY.replace("rounds: 4", "rounds: 8"))
    assert main(["run", cfg, "--out", str(tmp_path)]) == 0
    rows = read_rounds_csv(tmp_path / "rounds.csv")
    rho = {r["rho_hat"] for r in rows[2:]}
    assert len(rho) == 1 and float(rho.pop()) > 0
    assert all(r["wall_ms"] == "0" for r in rows)


def test_summary_is_reproducible_from_csv(tmp_path):
    cfg = write(tmp_path, TINY)
    assert main(["run", cfg, "--out", str(tmp_path)]) == 0
    rows = read_rounds_csv(tmp_path / "rounds.csv")
    summary = json.loads((tmp_path / "summary.json").read_text())
    metrics = [float(r["test_metric"]) for r in rows]
    assert summary["final_test_metric"] == metrics[-1]
    assert summary["best_test_metric"] == min(metrics)
    assert summary["total_bytes_up"] == sum(int(r["bytes_up"]) for r in rows)
    assert summary["total_bytes_down"] == sum(int(r["bytes_down"]) for r in rows)
    assert summary["seed"] == 3 and len(summary["build_id"]) == 12
    assert summary["config"]["federation"]["rounds"] == 4


def test_bytes_in_csv_follow_payload_formula(tmp_path):
    cfg = write(tmp_path, TINY)
    assert main(["run", cfg, "--out", str(tmp_path)]) == 0
    rows = read_rounds_csv(tmp_path / "rounds.csv")
    p = 1 * 4 + 4 + 4 * 1 + 1
    for r in rows:
        if r["rule"] == "fedavg":
            assert int(r["bytes_up"]) == 2 * 8 * p
        else:
            # two clients, r_tot summed ranks: 8 (p + p r + r) each
            assert int(r["bytes_up"]) == 8 * (2 * p + (p + 1) * int(r["r_tot"]))
        assert int(r["bytes_down"]) == 2 * 8 * p


def test_output_directory_precedence(tmp_path, monkeypatch):
    cfg = write(tmp_path, TINY.replace("seed: 3", f"seed: 3\noutput: {{directory: {tmp_path / 'conf'}}}"))
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "env"))
    assert main(["run", cfg]) == 0
    assert (tmp_path / "env" / "rounds.csv").exists() and not (tmp_path / "conf").exists()
    assert main(["run", cfg, "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "flag" / "rounds.csv").exists()
    monkeypatch.delenv(OUTPUT_ENV)
    assert main(["run", cfg]) == 0
    assert (tmp_path / "conf" / "rounds.csv").exists()
    assert not list(tmp_path.rglob(".*.tmp*"))


def test_invalid_config_exits_2_before_any_output(tmp_path, capsys):
    cfg = write(tmp_path, "federation: {participation_fraction: 0, lr: 0}")
    assert main(["run", cfg, "--out", str(tmp_path / "out")]) == 2
    record = json.loads(capsys.readouterr().err)
    assert {e["path"] for e in record["errors"]} == {"federation.participation_fraction",
                                                    "federation.lr"}
    assert not (tmp_path / "out").exists()


def test_missing_file_and_bad_workers(tmp_path, capsys):
    assert main(["run", str(tmp_path / "nope.yaml")]) == 2
    assert json.loads(capsys.readouterr().err)["error"] == "file_not_found"
    assert main(["run", write(tmp_path, TINY), "--workers", "0"]) == 2


def test_sweep_runs_each_value(tmp_path):
    cfg = write(tmp_path, TINY)
    root = tmp_path / "sw"
    assert main(["sweep", cfg, "--param", "federation.lr", "--values", "0.01, 0.02",
                 "--out", str(root)]) == 0
    a = read_rounds_csv(tmp_path / "sw__lr=0.01" / "rounds.csv")
    b = read_rounds_csv(tmp_path / "sw__lr=0.02" / "rounds.csv")
    assert a[-1]["test_metric"] != b[-1]["test_metric"]


def test_sweep_validates_all_values_first(tmp_path, capsys):
    cfg = write(tmp_path, TINY)
    assert main(["sweep", cfg, "--param", "federation.lr", "--values", "0.01,-1",
                 "--out", str(tmp_path / "sw")]) == 2
    assert not list(tmp_path.glob("sw__*"))


# -- oracle-check ---------------------------------------------------------------

def test_oracle_check_passes_and_lists_suites(capsys):
    assert len(SUITES) >= 4
    assert main(["oracle-check"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == len(SUITES) and "FAIL" not in out


@pytest.mark.parametrize("suite", sorted(SUITES))
def test_oracle_check_negative_control(suite, capsys):
    assert main(["oracle-check", "--perturb", suite]) == 1
    out = capsys.readouterr().out
    assert f"FAIL {suite}" in out and out.count("FAIL ") == 1
