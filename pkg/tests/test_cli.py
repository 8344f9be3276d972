import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from pointdps.cli import main
from pointdps.core import read_xyz, write_xyz
from pointdps.data import synth_dataset
from pointdps.diffusion import GmmDenoiser

N = 32


def pdb_text(points):
    lines = []
    for i, (x, y, z) in enumerate(points, start=1):
        lines.append(f"ATOM  {i:5d}  CA  ALA A{i:4d}    {x:8.3f}{y:8.3f}{z:8.3f}  1.00 20.00           C")
    return "\n".join(lines + ["END"]) + "\n"


@pytest.fixture
def work(tmp_path):
    gmm = GmmDenoiser(np.array([[0.5, 0, 0], [-0.25, 0.45, 0], [-0.25, -0.45, 0.2]]), 0.15,
                      np.array([0.5, 0.3, 0.2]))
    gmm.save(tmp_path / "gmm.json")
    target = synth_dataset("blobs", 1, N, 0)[0]
    write_xyz(tmp_path / "target.xyz", target)
    (tmp_path / "target.pdb").write_text(pdb_text(target * 20 + 5))
    assert main(["simulate", "--cloud", str(tmp_path / "target.xyz"), "--projections", "2", "--points", "8",
                 "--subunit", "8", "--seed", "3", "--out", str(tmp_path / "obs.json")]) == 0
    return tmp_path


def outputs(directory):
    """Bytes of every non-manifest file below ``directory``."""
    return {p.relative_to(directory).as_posix(): p.read_bytes()
            for p in sorted(Path(directory).rglob("*")) if p.is_file() and "manifest" not in p.name}


def run_twice(tmp_path, build):
    """Run a command (built from an output root) twice; return both output snapshots."""
    snaps = []
    for k in (1, 2):
        root = tmp_path / f"run{k}"
        root.mkdir()
        assert main(build(root)) == 0
        snaps.append(outputs(root))
    return snaps


# -- train -------------------------------------------------------------------------


def test_train_writes_model_and_manifest(tmp_path):
    out = tmp_path / "m.json"
    assert main(["train", "--dataset", "synth:blobs", "--count", "8", "--points", "16", "--epochs", "2",
                 "--hidden", "8", "--seed", "1", "--out", str(out)]) == 0
    model = json.loads(out.read_text())
    assert model["kind"] == "network" and len(model["train_meta"]["loss_history"]) == 2
    manifest = json.loads((tmp_path / "m.json.manifest.json").read_text())
    assert manifest["command"] == "train" and manifest["seed"] == 1 and "elapsed_s" in manifest["timing"]


def test_train_byte_identical(tmp_path):
    a, b = run_twice(tmp_path, lambda r: ["train", "--dataset", "synth:helices", "--count", "8", "--points", "16",
                                          "--epochs", "3", "--hidden", "8", "--seed", "4", "--out", str(r / "m.json")])
    assert a == b and a


def test_train_missing_dataset_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--out", "x.json"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_train_bad_phase_config(tmp_path, capsys):
    (tmp_path / "ph.json").write_text('[{"epochs": 1, "warmup": 3}]')
    code = main(["train", "--dataset", "synth:blobs", "--count", "4", "--points", "8", "--phases",
                 str(tmp_path / "ph.json"), "--out", str(tmp_path / "m.json")])
    assert code == 2 and "usage" in capsys.readouterr().err


def test_train_from_directory(tmp_path):
    d = tmp_path / "clouds"
    d.mkdir()
    for i, c in enumerate(synth_dataset("lshapes", 4, 8, 0)):
        write_xyz(d / f"c{i}.xyz", c)
    assert main(["train", "--dataset", str(d), "--epochs", "1", "--hidden", "8",
                 "--out", str(tmp_path / "m.json")]) == 0


# -- simulate -------------------------------------------------------------------------


def test_simulate_projections(work):
    out = work / "p.json"
    assert main(["simulate", "--cloud", str(work / "target.xyz"), "--projections", "5", "--points", "20",
                 "--out", str(out)]) == 0
    obs = json.loads(out.read_text())["observations"]
    assert [o["kind"] for o in obs] == ["projection"] * 5 and all(len(o["points"]) == 20 for o in obs)


def test_simulate_coarse(work):
    out = work / "c.json"
    assert main(["simulate", "--cloud", str(work / "target.xyz"), "--coarse", "6", "--out", str(out)]) == 0
    obs = json.loads(out.read_text())["observations"]
    assert len(obs) == 1 and obs[0]["kind"] == "coarse" and len(obs[0]["points"]) == 6


def test_simulate_byte_identical(work):
    a, b = run_twice(work, lambda r: ["simulate", "--cloud", str(work / "target.xyz"), "--projections", "3",
                                      "--points", "10", "--coarse", "4", "--subunit", "8", "--seed", "9",
                                      "--out", str(r / "o.json")])
    assert a == b


# -- reconstruct / sample ----------------------------------------------------------------


def test_reconstruct_defaults_report_79_nfe(work):
    out = work / "rec"
    assert main(["reconstruct", "--model", str(work / "gmm.json"), "--obs", str(work / "obs.json"),
                 "--points", str(N), "--out-dir", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["nfe_per_sample"] == 79
    assert manifest["config"]["samples"] == 10 and manifest["config"]["steps"] == 40
    assert manifest["config"]["rho"] == 3 and manifest["config"]["tmax"] == 1 and manifest["config"]["tmin"] == 0.002
    assert len(list(out.glob("*.xyz"))) == 10 and len(manifest["final_energies"]) == 10


def test_reconstruct_sample_count(work):
    out = work / "rec3"
    assert main(["reconstruct", "--model", str(work / "gmm.json"), "--obs", str(work / "obs.json"), "--samples", "3",
                 "--points", str(N), "--steps", "5", "--out-dir", str(out)]) == 0
    assert sorted(p.name for p in out.glob("*.xyz")) == ["sample_000.xyz", "sample_001.xyz", "sample_002.xyz"]


def test_reconstruct_alpha_zero_is_unconditional(work):
    common = ["--model", str(work / "gmm.json"), "--samples", "4", "--points", str(N), "--steps", "8",
              "--tmax", "1", "--beta", "1/t@0.15", "--seed", "5"]
    assert main(["reconstruct", *common, "--obs", str(work / "obs.json"), "--alpha", "0",
                 "--out-dir", str(work / "a0")]) == 0
    assert main(["sample", *common, "--out-dir", str(work / "unc")]) == 0
    assert outputs(work / "a0") == outputs(work / "unc")


def test_reconstruct_threads_byte_identical(work, monkeypatch):
    base = ["reconstruct", "--model", str(work / "gmm.json"), "--obs", str(work / "obs.json"), "--samples", "70",
            "--points", str(N), "--steps", "4", "--seed", "2"]
    assert main([*base, "--threads", "1", "--out-dir", str(work / "t1")]) == 0
    assert main([*base, "--threads", "3", "--out-dir", str(work / "t3")]) == 0
    monkeypatch.setenv("POINTDPS_THREADS", "2")
    assert main([*base, "--out-dir", str(work / "tenv")]) == 0
    assert json.loads((work / "tenv" / "manifest.json").read_text())["threads"] == 2
    assert outputs(work / "t1") == outputs(work / "t3") == outputs(work / "tenv")


def test_reconstruct_incompatible_sizes(work, capsys):
    obs = json.loads((work / "obs.json").read_text())["observations"]
    too_few = len(obs[-1]["points"]) - 1
    code = main(["reconstruct", "--model", str(work / "gmm.json"), "--obs", str(work / "obs.json"),
                 "--points", str(too_few), "--out-dir", str(work / "bad")])
    assert code == 1 and "subunit" in capsys.readouterr().err


def test_bad_beta_is_usage_error(work):
    assert main(["sample", "--model", str(work / "gmm.json"), "--beta", "1/x", "--out-dir", str(work / "s")]) == 2


def test_missing_file_is_runtime_error(work):
    assert main(["reconstruct", "--model", str(work / "nope.json"), "--obs", str(work / "obs.json"),
                 "--out-dir", str(work / "r")]) == 1


def test_sample_defaults(work):
    out = work / "unc"
    assert main(["sample", "--model", str(work / "gmm.json"), "--samples", "2", "--points", "8",
                 "--out-dir", str(out)]) == 0
    m = json.loads((out / "manifest.json").read_text())
    assert m["config"]["tmax"] == 80 and m["config"]["steps"] == 100 and m["nfe_per_sample"] == 199


# -- ml --------------------------------------------------------------------------------------


def test_ml_defaults(work):
    out = work / "ml"
    assert main(["ml", "--obs", str(work / "obs.json"), "--points", str(N), "--steps", "5",
                 "--out-dir", str(out)]) == 0
    m = json.loads((out / "manifest.json").read_text())
    assert len(list(out.glob("*.xyz"))) == 10 and len(m["final_energies"]) == 10
    assert m["config"]["lr"] == 0.01
    assert all(f <= i for f, i in zip(m["final_energies"], m["initial_energies"]))


def test_ml_zero_steps_uniform(work):
    out = work / "ml0"
    assert main(["ml", "--obs", str(work / "obs.json"), "--points", str(N), "--steps", "0", "--samples", "3",
                 "--out-dir", str(out)]) == 0
    clouds = [read_xyz(p) for p in sorted(out.glob("*.xyz"))]
    assert len(clouds) == 3 and all(np.abs(c).max() <= 1 for c in clouds)


# -- evaluate ---------------------------------------------------------------------------------


def test_evaluate_identical_is_zero(work):
    out = work / "ev.json"
    assert main(["evaluate", "--model-clouds", str(work / "target.xyz"), "--target-cloud", str(work / "target.xyz"),
                 "--out", str(out)]) == 0
    res = json.loads(out.read_text())
    assert res["samples"][0] == {"file": str(work / "target.xyz"), "cd": 0.0, "emd": 0.0, "rmsd": 0.0}


def test_evaluate_hand_chamfer(tmp_path):
    write_xyz(tmp_path / "a.xyz", [[0, 0, 0]])
    write_xyz(tmp_path / "b.xyz", [[1, 0, 0]])
    out = tmp_path / "ev.json"
    assert main(["evaluate", "--model-clouds", str(tmp_path / "a.xyz"), "--target-cloud", str(tmp_path / "b.xyz"),
                 "--metric", "cd", "--out", str(out)]) == 0
    assert json.loads(out.read_text())["samples"][0]["cd"] == 2.0


def test_evaluate_against_pdb(work):
    rec = work / "clouds"
    rec.mkdir()
    target = read_xyz(work / "target.xyz")
    write_xyz(rec / "s0.xyz", target)
    write_xyz(rec / "s1.xyz", target[::-1] * 0.5)
    out = work / "ev.json"
    assert main(["evaluate", "--model-clouds", str(rec), "--pdb", str(work / "target.pdb"), "--out", str(out)]) == 0
    res = json.loads(out.read_text())
    assert len(res["samples"]) == 2
    for entry in res["samples"]:
        assert entry["rmsd_atomic"] < 0.05 and entry["rmsd_subsampled"] < 0.05
        assert set(entry["transform"]) >= {"rotation", "translation"}


def test_evaluate_needs_one_target(work):
    assert main(["evaluate", "--model-clouds", str(work / "target.xyz"), "--out", str(work / "e.json")]) == 2


# -- remaining subcommands ----------------------------------------------------------------------


def test_fit_gmm_and_parse_pdb_byte_identical(work):
    def build(root):
        return ["fit-gmm", "--pdb", str(work / "target.pdb"), "-k", "4", "--seed", "1", "--out", str(root / "cg.xyz")]

    a, b = run_twice(work, build)
    assert a == b and len(read_xyz(work / "run1" / "cg.xyz")) == 4
    out = work / "atoms.xyz"
    assert main(["parse-pdb", "--pdb", str(work / "target.pdb"), "--subsample", "10", "--out", str(out)]) == 0
    assert read_xyz(out).shape == (10, 3)
    first = out.read_bytes()
    assert main(["parse-pdb", "--pdb", str(work / "target.pdb"), "--subsample", "10", "--out", str(out)]) == 0
    assert out.read_bytes() == first


def test_parse_pdb_errors(tmp_path):
    (tmp_path / "h.pdb").write_text(
        "ATOM      1  H   MET A   1      11.104  13.207   2.100  1.00 20.00           H\n")
    assert main(["parse-pdb", "--pdb", str(tmp_path / "h.pdb"), "--out", str(tmp_path / "o.xyz")]) == 1


def test_genmetrics(work):
    s, r = work / "s", work / "r"
    s.mkdir()
    r.mkdir()
    clouds = synth_dataset("blobs", 6, 16, 1)
    for i, c in enumerate(clouds):
        write_xyz(s / f"{i}.xyz", c)
        write_xyz(r / f"{i}.xyz", c)
    a, b = run_twice(work, lambda root: ["genmetrics", "--samples", str(s), "--refs", str(r),
                                         "--out", str(root / "g.json")])
    assert a == b
    rep = json.loads((work / "run1" / "g.json").read_text())
    assert rep["cov"] == 100.0 and rep["mmd"] == 0.0


def test_ablate_reports_matched_nfe(work):
    def build(root):
        return ["ablate", "--model", str(work / "gmm.json"), "--count", "1", "--points", "16", "--proj-points", "4",
                "--subunit", "4", "--samples", "2", "--steps", "4", "--out", str(root / "abl.json")]

    a, b = run_twice(work, build)
    assert a == b
    rows = json.loads((work / "run1" / "abl.json").read_text())
    assert {v["nfe"] for v in rows.values()} == {7}


def test_console_script_usage_exit_code():
    proc = subprocess.run([sys.executable, "-m", "pointdps.cli", "reconstruct"], capture_output=True, text=True)
    assert proc.returncode == 2 and "usage" in proc.stderr
