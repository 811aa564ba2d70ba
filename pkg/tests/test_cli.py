import csv
import json
import os

import pytest
import yaml

from mergetest.cli import main

FAST_TRAIN = {
    "episodes": 3,
    "warmup_steps": 16,
    "minibatch_size": 8,
    "eps_decay_steps": 200,
    "hidden_sizes": [8],
}

CONFIG = {
    "scenario": {"x_vut0": -40.0, "t_max": 20.0},
    "trainer": {
        "pov_level1": {**FAST_TRAIN, "seed": 1},
        "vut_level1": {**FAST_TRAIN, "seed": 2},
        "pov_level2": {**FAST_TRAIN, "seed": 3},
    },
    "sampler": {"batch_size": 10, "pool_size": 100},
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "config.yaml"
    cfg_path.write_text(yaml.safe_dump(CONFIG))
    lib = root / "library"
    rc = main(["train", "--config", str(cfg_path), "--out", str(lib)])
    assert rc == 0
    return root


def cfg_path(workdir):
    return str(workdir / "config.yaml")


def lib_path(workdir):
    return str(workdir / "library")


def test_train_outputs(workdir, capsys):
    lib = workdir / "library"
    manifest = json.loads((lib / "manifest.json").read_text())
    assert set(manifest["policies"]) == {"pov_level1", "vut_level1", "pov_level2"}
    for name in manifest["policies"]:
        assert (lib / f"{name}.json").exists()
        assert (lib / f"{name}_log.csv").exists()
    # rerun is a cache hit: identical policy bytes
    before = {p: (lib / p).read_bytes() for p in os.listdir(lib) if p.endswith(".json")}
    rc = main(["train", "--config", cfg_path(workdir), "--out", str(lib)])
    assert rc == 0
    for p, blob in before.items():
        if p != "manifest.json":
            assert (lib / p).read_bytes() == blob


def run_campaign(workdir, out, method, extra=()):
    args = [
        "campaign",
        "--config",
        cfg_path(workdir),
        "--library",
        lib_path(workdir),
        "--method",
        method,
        "--out",
        str(out),
        "--n",
        "30",
        *extra,
    ]
    return main(args)


def test_campaign_uniform_outputs(workdir, tmp_path):
    out = tmp_path / "uni"
    assert run_campaign(workdir, out, "uniform", ["--level", "1"]) == 0
    with open(out / "cases.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 30
    assert set(rows[0]) == {"level", "x_pov0", "v_pov0", "psi", "batch", "P", "crashed"}
    assert all(r["level"] == "1" for r in rows)
    summary = json.loads((out / "summary.json").read_text())
    assert summary["method"] == "uniform"
    assert summary["seed"] == 0
    assert "1" in summary["fmc"]
    assert len(summary["config_hash"]) == 16


def test_campaign_rerun_byte_identical(workdir, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_campaign(workdir, a, "uniform", ["--level", "0"]) == 0
    assert run_campaign(workdir, b, "uniform", ["--level", "0"]) == 0
    assert (a / "cases.csv").read_bytes() == (b / "cases.csv").read_bytes()


def test_campaign_jobs_deterministic(workdir, tmp_path):
    a, b = tmp_path / "j1", tmp_path / "j2"
    assert run_campaign(workdir, a, "uniform", ["--level", "1", "--jobs", "1"]) == 0
    assert run_campaign(workdir, b, "uniform", ["--level", "1", "--jobs", "2"]) == 0
    assert (a / "cases.csv").read_bytes() == (b / "cases.csv").read_bytes()


def test_campaign_gpr_multi_level(workdir, tmp_path):
    out = tmp_path / "gpr"
    assert run_campaign(workdir, out, "gpr") == 0
    with open(out / "cases.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 30
    assert {r["level"] for r in rows} == {"0", "1", "2"}
    summary = json.loads((out / "summary.json").read_text())
    assert len(summary["allocations"]) == 3
    assert sum(summary["allocations"][0]["allocations"].values()) == 10


def test_campaign_baselines_require_level(workdir, tmp_path, capsys):
    rc = run_campaign(workdir, tmp_path / "x", "sa")
    assert rc == 1
    err = json.loads(capsys.readouterr().err)
    assert "level" in err["error"]


def test_campaign_sa_and_subset_run(workdir, tmp_path):
    assert run_campaign(workdir, tmp_path / "sa", "sa", ["--level", "1"]) == 0
    assert run_campaign(workdir, tmp_path / "ss", "subset", ["--level", "1"]) == 0


def test_fmc_command(workdir, tmp_path, capsys):
    out = tmp_path / "uni"
    assert run_campaign(workdir, out, "uniform", ["--level", "1"]) == 0
    capsys.readouterr()
    report_path = tmp_path / "fmc.json"
    rc = main(
        [
            "fmc",
            "--config",
            cfg_path(workdir),
            "--cases",
            str(out / "cases.csv"),
            "--out",
            str(report_path),
        ]
    )
    assert rc == 0
    printed = json.loads(capsys.readouterr().out)
    saved = json.loads(report_path.read_text())
    assert printed == saved
    assert "1" in saved["levels"]
    assert saved["levels"]["1"]["n_cases"] == 30


def test_fmc_zero_radius_gives_zero_volume(workdir, tmp_path, capsys):
    out = tmp_path / "uni"
    assert run_campaign(workdir, out, "uniform", ["--level", "1"]) == 0
    capsys.readouterr()
    rc = main(["fmc", "--cases", str(out / "cases.csv"), "--rho", "0.0"])
    assert rc == 0
    report = json.loads(capsys.readouterr().out)
    assert all(v["fmc"] == 0.0 for v in report["levels"].values())


def test_fmc_empty_csv(workdir, tmp_path, capsys):
    path = tmp_path / "empty.csv"
    path.write_text("level,x_pov0,v_pov0,psi,batch,P,crashed\n")
    rc = main(["fmc", "--cases", str(path)])
    assert rc == 0
    report = json.loads(capsys.readouterr().out)
    assert report["levels"] == {}


def test_fmc_malformed_csv(tmp_path, capsys):
    path = tmp_path / "bad.csv"
    path.write_text("foo,bar\n1,2\n")
    rc = main(["fmc", "--cases", str(path)])
    assert rc == 1
    err = json.loads(capsys.readouterr().err)
    assert "malformed" in err["error"]


def test_compare_table(workdir, tmp_path, capsys):
    a, b = tmp_path / "u", tmp_path / "s"
    assert run_campaign(workdir, a, "uniform", ["--level", "1"]) == 0
    assert run_campaign(workdir, b, "sa", ["--level", "1"]) == 0
    capsys.readouterr()
    table_path = tmp_path / "table.csv"
    rc = main(
        [
            "compare",
            "--config",
            cfg_path(workdir),
            "--out",
            str(table_path),
            str(a),
            str(b),
        ]
    )
    assert rc == 0
    text = capsys.readouterr().out
    assert "uniform" in text and "sa" in text
    with open(table_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["method"] for r in rows} == {"uniform", "sa"}


def test_trajectory_dump(workdir, tmp_path, capsys):
    out = tmp_path / "traj.csv"
    rc = main(
        [
            "trajectory",
            "--config",
            cfg_path(workdir),
            "--library",
            lib_path(workdir),
            "--level",
            "2",
            "--psi",
            "0.5",
            "--x-pov0",
            "-273",
            "--v-pov0",
            "33",
            "--out",
            str(out),
        ]
    )
    assert rc == 0
    lines = capsys.readouterr().out.strip().splitlines()
    info = json.loads(lines[-1])
    assert info["terminated_by"] in ("merge", "timeout")
    with open(out, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert set(rows[0]) == {"t", "x_pov", "v_pov", "a_pov", "x_vut", "v_vut", "a_vut"}
    assert len(rows) >= 2


def test_unknown_vut_errors(workdir, tmp_path, capsys):
    rc = run_campaign(workdir, tmp_path / "x", "uniform", ["--level", "1", "--vut", "nope"])
    assert rc == 1
    err = json.loads(capsys.readouterr().err)
    assert "nope" in err["error"]


def test_corrupted_library_rejected(workdir, tmp_path, capsys):
    import shutil

    lib = tmp_path / "libcopy"
    shutil.copytree(lib_path(workdir), lib)
    target = lib / "pov_level1.json"
    data = json.loads(target.read_text())
    data["biases"][-1][0] += 1.0
    target.write_text(json.dumps(data))
    rc = main(
        [
            "campaign",
            "--config",
            cfg_path(workdir),
            "--library",
            str(lib),
            "--method",
            "uniform",
            "--level",
            "1",
            "--n",
            "5",
            "--out",
            str(tmp_path / "out"),
        ]
    )
    assert rc == 1
    err = json.loads(capsys.readouterr().err)
    assert "checksum" in err["error"]
