import csv
import hashlib
import json

import pytest

from railsim.cli import main
from railsim.experiment import CSV_COLUMNS, PRESETS, load_config, run_experiment


def write_cfg(path, **over):
    cfg = {
        "topology": {"M": 4, "N": 4, "R2": "100G"},
        "workload": {"family": "sparse_topk", "sparsity": 0.25, "total_bytes_per_sender": 400_000},
        "policies": ["rails_lpt", "ecmp"],
        "seeds": [0],
    }
    for k, v in over.items():
        if v is None:
            cfg.pop(k, None)
        else:
            cfg[k] = v
    path.write_text(json.dumps(cfg, indent=2))
    return path


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_preset_then_validate(tmp_path, capsys, name):
    out = tmp_path / f"{name}.json"
    assert main(["preset", name, "--out", str(out)]) == 0
    assert main(["validate", str(out)]) == 0
    text = capsys.readouterr().out
    body = text[text.index("ok\n") + 3:]
    resolved = json.loads(body)
    assert resolved["preset"] == name
    assert resolved["effective_topology"]["R2"] == "100G"
    if name.startswith("mixtral"):
        assert (tmp_path / f"{name}.trace.jsonl").exists()


def test_validate_missing_n(tmp_path, capsys):
    path = write_cfg(tmp_path / "c.json", topology={"M": 4, "R2": "100G"})
    assert main(["validate", str(path)]) == 2
    assert "topology.N: required field missing" in capsys.readouterr().err


def test_validate_r1_not_above_r2(tmp_path, capsys):
    path = write_cfg(tmp_path / "c.json", topology={"M": 4, "N": 2, "R2": "100G", "R1": "100G"})
    assert main(["validate", str(path)]) == 2
    assert "R1 must exceed R2" in capsys.readouterr().err


def test_validate_reports_json_position(tmp_path, capsys):
    path = tmp_path / "c.json"
    path.write_text('{\n  "topology": {"M": 4,\n  "N": }\n}\n')
    assert main(["validate", str(path)]) == 2
    assert f"{path}:3:" in capsys.readouterr().err


def test_validate_collects_all_problems(tmp_path, capsys):
    path = write_cfg(tmp_path / "c.json", policies=["rails_lpt", "warp"], seeds=[], bogus=1,
                     reference_policy="plb")
    assert main(["validate", str(path)]) == 2
    err = capsys.readouterr().err
    for needle in ("policies[1]", "seeds", "config.bogus", "reference_policy"):
        assert needle in err


def test_validate_unknown_knob(tmp_path, capsys):
    path = write_cfg(tmp_path / "c.json", policy_params={"ecmp": {"probe_quantum": 2}})
    assert main(["validate", str(path)]) == 2
    assert "policy_params.ecmp" in capsys.readouterr().err


def test_run_writes_csv_and_manifest(tmp_path):
    path = write_cfg(tmp_path / "c.json", policies=["rails_lpt", "ecmp", "plb"], seeds=[1, 2, 3],
                     output="out/res.csv")
    assert main(["run", str(path)]) == 0
    out = tmp_path / "out" / "res.csv"
    rows = read_rows(out)
    assert tuple(rows[0].keys()) == CSV_COLUMNS
    assert len(rows) == 3 * 3
    assert [(r["policy"], r["seed"]) for r in rows] == sorted((r["policy"], r["seed"]) for r in rows)
    for r in rows:
        if r["policy"] == "ecmp":
            assert float(r["busbw_norm"]) == 1.0
        assert float(r["sim_over_opt"]) >= 1 - 1e-6
        assert r["topo_hash"] and r["chunk_bytes"] == "32768" and r["qps"] == "64"
    first = sha(out)
    man = json.loads((tmp_path / "out" / "res.manifest.json").read_text())
    assert man["csv_sha256"] == first and man["rows"] == 9
    assert man["config"]["workload"]["zipf_exponent"] == 1.2
    assert man["plb"]["repath_threshold"] == 0.5 and len(man["plb"]["repaths"]) == 3
    assert main(["run", str(path)]) == 0
    assert sha(out) == first


def test_output_env_override(tmp_path, monkeypatch):
    path = write_cfg(tmp_path / "c.json", output="res.csv")
    target = tmp_path / "elsewhere"
    monkeypatch.setenv("RAILSIM_OUTPUT_DIR", str(target))
    assert main(["run", str(path)]) == 0
    assert (target / "res.csv").exists() and not (tmp_path / "res.csv").exists()


def test_parallel_matches_serial(tmp_path):
    path = write_cfg(tmp_path / "c.json", seeds=[0, 1], policies=["rails_lpt", "ecmp", "minrtt"])
    cfg = load_config(path)
    serial = run_experiment(cfg, workers=1)
    text = (tmp_path / "custom.csv").read_text()
    parallel = run_experiment(cfg, workers=2)
    assert serial["sha256"] == parallel["sha256"]
    assert (tmp_path / "custom.csv").read_text() == text


def test_mixtral_sparse_phase_rows(tmp_path):
    out = tmp_path / "m.json"
    assert main(["preset", "mixtral_sparse", "--out", str(out)]) == 0
    cfg = json.loads(out.read_text())
    cfg["policies"] = ["rails_lpt", "ecmp"]
    out.write_text(json.dumps(cfg))
    assert main(["run", str(out)]) == 0
    rows = read_rows(tmp_path / "mixtral_sparse.csv")
    assert [r["phase"] for r in rows] == ["Start", "Early", "Mid", "Stable"] * 2
    assert all(float(r["iter_time"]) > float(r["cct_total"]) for r in rows)


def test_bad_workers_flag(tmp_path, capsys):
    path = write_cfg(tmp_path / "c.json")
    assert main(["run", str(path), "--workers", "0"]) == 2
    assert "workers" in capsys.readouterr().err


def test_missing_trace_file(tmp_path, capsys):
    path = write_cfg(tmp_path / "c.json", workload={"family": "trace", "trace_path": "nope.jsonl"})
    assert main(["validate", str(path)]) == 2
    assert "nope.jsonl" in capsys.readouterr().err
