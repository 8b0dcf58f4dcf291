import json

import pytest

from pohedge.cli import EXIT_CONFIG, EXIT_INVALID, EXIT_OK, main


@pytest.fixture
def run(tmp_path):
    def call(*argv):
        return main([*argv, "--out", str(tmp_path)])

    return call


def write_config(tmp_path, small_doc, **run_opts):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"model": small_doc, "run": run_opts}, indent=1))
    return str(path)


def test_validate(run, tmp_path):
    assert run("validate") == EXIT_OK
    rep = json.loads((tmp_path / "validation.json").read_text())
    assert rep["passed"]


def test_invalid_model(run, tmp_path, small_doc):
    doc = json.loads(json.dumps(small_doc))
    doc["coefficients"]["K1"] = {"type": "regime", "values": [[-1.5, -0.1], [0.08, 0.0]]}
    assert run("validate", "--config", write_config(tmp_path, doc)) == EXIT_INVALID


def test_bad_json_is_line_anchored(run, tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{\n  "model": {\n    "x": 1,\n}\n')
    assert run("validate", "--config", str(bad)) == EXIT_CONFIG
    assert "bad.json:4:" in capsys.readouterr().err


def test_missing_field(run, tmp_path, small_doc):
    doc = dict(small_doc)
    doc.pop("s0")
    assert run("validate", "--config", write_config(tmp_path, doc)) == EXIT_CONFIG


def test_unknown_suite(run):
    assert run("verify", "--suite", "nonsense") == EXIT_CONFIG


def test_empty_ensemble(run, tmp_path):
    assert run("simulate", "--n-paths", "0") == EXIT_OK
    assert (tmp_path / "ensemble_P.bin").exists()


def test_simulate_filter_report(run, tmp_path):
    assert run("simulate", "--n-paths", "5", "--n-steps", "8") == EXIT_OK
    assert run("filter", "--ensemble", str(tmp_path / "ensemble_P.bin")) == EXIT_OK
    for name in ("filter_P.csv", "filter_Pstar.csv", "innovations.json"):
        assert (tmp_path / name).exists()
    assert run("report") == EXIT_OK
    head = (tmp_path / "report.csv").read_bytes().split(b"\r\n")[0]
    assert head == b"source,row,column,value"


def test_hedge(run, tmp_path, small_doc):
    cfg = write_config(tmp_path, small_doc, n_steps=8, n_paths=20, train_paths=2000, lattice_depth=0)
    assert run("hedge", "--config", cfg) == EXIT_OK
    summ = json.loads((tmp_path / "hedge_summary.json").read_text())
    assert summ["n_paths"] == 20 and len(summ["orthogonality"]) == 5
    assert (tmp_path / "g.json").exists() and (tmp_path / "hedge_path_0.csv").exists()


def test_reruns_are_byte_identical(tmp_path):
    outs = []
    for k in range(2):
        d = tmp_path / str(k)
        assert main(["simulate", "--n-paths", "7", "--n-steps", "8", "--seed", "3", "--out", str(d)]) == EXIT_OK
        assert main(["filter", "--ensemble", str(d / "ensemble_P.bin"), "--out", str(d)]) == EXIT_OK
        outs.append({p.name: p.read_bytes() for p in sorted(d.iterdir())})
    assert outs[0] == outs[1]
