import csv
import io
import json

import pytest
from click.testing import CliRunner

from oscarkv.cli import cli, main
from oscarkv.datagen import read_file


@pytest.fixture
def runner():
    return CliRunner()


def rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_cost_defaults(runner):
    res = runner.invoke(cli, ["cost"])
    assert res.exit_code == 0
    lines = res.output.splitlines()
    assert lines[0] == "method,prefill_munits,decode_munits"
    assert "oscar,901.1,123.0" in lines
    assert "kivi,204.8,81.9" in lines


def test_cost_json_and_methods(runner):
    res = runner.invoke(cli, ["cost", "--methods", "kivi,oscar", "--json"])
    doc = json.loads(res.output)
    assert [r["method"] for r in doc["rows"]] == ["kivi", "oscar"]
    assert doc["columns"] == ["method", "prefill_munits", "decode_munits"]


def test_cost_validation_exit_2(runner):
    res = runner.invoke(cli, ["cost", "--h", "100"])
    assert res.exit_code == 2
    assert "power of two" in res.output
    res = runner.invoke(cli, ["cost", "--methods", "nope"])
    assert res.exit_code == 2


def test_demo_artifact(runner):
    res = runner.invoke(cli, ["demo-artifact"])
    assert res.exit_code == 0
    assert "alpha = N/|b| = 5.000000" in res.output
    assert "b' = [0.5000, 0.5000, 0.5000, 0.5000]" in res.output
    doc = json.loads(runner.invoke(cli, ["demo-artifact", "--json"]).output)
    assert doc["alpha"] == 5.0 and doc["b_scaled"] == [0.5] * 4
    assert min(doc["step_inflation"][:3]) >= 50


def test_generate_profile_error_study(runner, tmp_path):
    out = tmp_path / "k.kvt"
    res = runner.invoke(cli, ["generate", "--seq", "128", "--heads", "2", "--head-dim", "32",
                              "--outlier-channels", "3,9", "--sink-tokens", "0,70",
                              "--seed", "3", "--out", str(out)])
    assert res.exit_code == 0, res.output
    x, ann = read_file(out)
    assert x.shape == (128, 2, 32)
    assert ann["outlier_tokens"] == [0, 70]
    assert ann["manifest"] == f"{out}.manifest.json"
    manifest = json.loads((tmp_path / "k.kvt.manifest.json").read_text())
    assert manifest["command"] == "generate" and manifest["seed"] == 3
    assert manifest["config"]["seq_len"] == 128

    res = runner.invoke(cli, ["profile", str(out), "--state", "k"])
    table = rows(res.output)
    assert len(table) == 128 and list(table[0]) == ["token", "state", "min", "median", "max", "mean"]
    assert float(table[0]["max"]) < float(table[1]["min"])

    res = runner.invoke(cli, ["error-study", str(out), "--bits", "2,3"])
    assert res.exit_code == 0, res.output
    table = rows(res.output)
    assert list(table[0]) == ["bits", "condition", "axis", "mse_x100"]
    assert {r["condition"] for r in table} == {"with-outliers", "without-outliers"}
    assert len(table) == 8


def test_error_study_synthetic_and_modalities(runner):
    res = runner.invoke(cli, ["error-study", "--synthetic", "--seq", "128", "--sink-tokens", "0",
                              "--modality-block", "0:64:3", "--modality-block", "64:128:0.5"])
    assert res.exit_code == 0, res.output
    assert {r["condition"] for r in rows(res.output)} >= {"mixed-modality", "single-modality"}


def test_error_study_argument_errors(runner, tmp_path):
    assert runner.invoke(cli, ["error-study"]).exit_code == 2
    res = runner.invoke(cli, ["error-study", "--synthetic", "--seq", "100", "--sink-tokens", "1"])
    assert res.exit_code == 2 and "divisible" in res.output
    bad = tmp_path / "bad.kvt"
    bad.write_bytes(b"JUNK")
    res = runner.invoke(cli, ["profile", str(bad)])
    assert res.exit_code == 2 and "magic" in res.output


def test_simulate_fp_zero(runner):
    res = runner.invoke(cli, ["simulate", "--method", "fp", "--seq", "64", "--decode-steps", "8",
                              "--heads", "1", "--head-dim", "32"])
    assert res.exit_code == 0, res.output
    row = rows(res.output)[0]
    assert float(row["output_mse"]) == 0.0 and float(row["logit_mse"]) == 0.0


def test_simulate_oscar_beats_kivi(runner):
    def mse(method):
        res = runner.invoke(cli, ["simulate", "--method", method, "--heads", "2", "--seed", "1"])
        return float(rows(res.output)[0]["output_mse"])
    assert mse("oscar") < mse("kivi")


def test_simulate_validation(runner):
    assert runner.invoke(cli, ["simulate", "--method", "nope"]).exit_code == 2
    res = runner.invoke(cli, ["simulate", "--residual", "100"])
    assert res.exit_code == 2 and "multiple" in res.output


def test_seed_env_var(runner):
    a = runner.invoke(cli, ["simulate", "--heads", "1", "--decode-steps", "4"], env={"OSCAR_SEED": "5"})
    b = runner.invoke(cli, ["simulate", "--heads", "1", "--decode-steps", "4", "--seed", "5"])
    assert a.output == b.output
    assert rows(a.output)[0]["seed"] == "5"


def test_outputs_byte_identical(runner, tmp_path):
    paths = [tmp_path / "a.csv", tmp_path / "b.csv"]
    for p in paths:
        res = runner.invoke(cli, ["simulate", "--heads", "1", "--decode-steps", "4", "--out", str(p)])
        assert res.exit_code == 0
    assert paths[0].read_bytes() == paths[1].read_bytes()
    manifest = json.loads((tmp_path / "a.csv.manifest.json").read_text())
    assert {"command", "config", "seed", "version", "started", "finished", "outputs"} <= set(manifest)
    gens = [tmp_path / "a.kvt", tmp_path / "b.kvt"]
    for p in gens:
        assert runner.invoke(cli, ["generate", "--seq", "64", "--sink-tokens", "0", "--out", str(p)]).exit_code == 0
    assert gens[0].read_bytes().replace(b"a.kvt", b"") == gens[1].read_bytes().replace(b"b.kvt", b"")


def test_json_output_names_manifest(runner, tmp_path):
    out = tmp_path / "c.json"
    runner.invoke(cli, ["cost", "--json", "--out", str(out)])
    assert json.loads(out.read_text())["manifest"] == f"{out}.manifest.json"


@pytest.mark.parametrize("command,schema", [
    ("profile", "token,state,min,median,max,mean"),
    ("error-study", "bits,condition,axis,mse_x100"),
    ("cost", "method,prefill_munits,decode_munits"),
    ("simulate", "method,bits,group,residual,scaling,seed,prefill"),
])
def test_help_documents_schema(runner, command, schema):
    res = runner.invoke(cli, [command, "--help"])
    assert res.exit_code == 0
    assert schema in " ".join(res.output.split()).replace(", ", ",")


def test_help_lists_all_flags(runner):
    res = runner.invoke(cli, ["simulate", "--help"])
    for flag in ("--method", "--bits", "--group", "--residual", "--seq", "--decode-steps",
                 "--scaling", "--seed"):
        assert flag in res.output


def test_main_returns_exit_codes(capsys):
    assert main(["cost", "--methods", "kivi"]) == 0
    assert main(["cost", "--h", "3"]) == 2
    assert main(["--help"]) == 0
