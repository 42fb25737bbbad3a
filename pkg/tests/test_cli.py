import json
import subprocess
import sys

import numpy as np
import pytest

from stockpot.cli import run
from stockpot.tensor_store import Checkpoint, load_checkpoint, save_checkpoint, serialize


@pytest.fixture(scope="module")
def ens(tmp_path_factory):
    out = tmp_path_factory.mktemp("ens")
    assert run(["synth", "sample", "--n", "6", "--seed", "3", "--out", str(out)]) == 0
    return out


def models(ens, k=6):
    return [str(ens / f"model_{i:02d}.st") for i in range(k)]


def test_stock_merge_writes_checkpoint_and_ratios(ens, tmp_path, capsys):
    out = tmp_path / "h.st"
    code = run(["merge", "--method", "stock", "--anchor", str(ens / "anchor.st"), *models(ens, 2), "--out", str(out)])
    assert code == 0
    merged = load_checkpoint(out)
    assert merged.metadata["stockpot.method"] == "stock"
    ratios = json.loads((tmp_path / "h.st.ratios.json").read_text())
    assert {u["unit"] for u in ratios["units"]} == {"block0.weight", "block1.weight", "block2.weight"}
    assert all(0.0 <= u["t"] <= 1.0 for u in ratios["units"])
    assert "cos" in capsys.readouterr().out


def test_merge_ratio_csv(ens, tmp_path):
    out = tmp_path / "h.st"
    args = ["merge", "--method", "stock", "--anchor", str(ens / "anchor.st"), *models(ens, 3), "--out", str(out), "--csv"]
    assert run(args) == 0
    header = (tmp_path / "h.st.ratios.csv").read_text().splitlines()[0]
    assert header == "unit,class,cos_theta,t,clamped,degenerate,N,period"


def test_wise_alpha_zero_is_the_anchor(ens, tmp_path):
    out = tmp_path / "o.st"
    assert run(["merge", "--method", "wise", "--alpha", "0", "--anchor", str(ens / "anchor.st"), *models(ens, 1), "--out", str(out)]) == 0
    assert out.read_bytes() == serialize(load_checkpoint(ens / "anchor.st"))


def test_verify_passes_on_synthetic_ensemble(ens, tmp_path):
    report = tmp_path / "props.json"
    code = run(["verify", "--anchor", str(ens / "anchor.st"), "--center", str(ens / "center.st"),
                "--tol", "0.05", *models(ens), "--out", str(report)])
    assert code == 0
    assert json.loads(report.read_text())["passed"] is True


def test_verify_failure_exits_3(ens):
    code = run(["verify", "--anchor", str(ens / "anchor.st"), "--center", str(ens / "center.st"),
                "--tol", "1e-6", *models(ens)])
    assert code == 3


def test_usage_errors_exit_1(ens, capsys):
    assert run([]) == 1
    assert run(["merge", "--method", "nope", "--out", "x", "a"]) == 1
    assert run(["merge", "--method", "wise", "--alpha", "2", "--anchor", "a", "m", "--out", "x"]) == 1
    assert run(["merge", "--method", "stock", *models(ens, 2), "--out", "x"]) == 1
    assert run(["geometry", "--anchor", str(ens / "anchor.st"), "--granularity", "block", *models(ens, 2)]) == 1


def test_format_errors_exit_2(ens, tmp_path, capsys):
    bad = tmp_path / "bad.st"
    bad.write_bytes(b"\0" * 8)
    assert run(["inspect", str(bad)]) == 2
    assert "bad.st" in capsys.readouterr().err
    assert run(["inspect", str(tmp_path / "missing.st")]) == 2
    other = tmp_path / "other.st"
    save_checkpoint(Checkpoint.from_arrays({"x": np.zeros(3)}), other)
    assert run(["geometry", "--anchor", str(ens / "anchor.st"), str(other), *models(ens, 1)]) == 2


def test_merge_is_deterministic(ens, tmp_path):
    for name in ("a.st", "b.st"):
        assert run(["merge", "--method", "stock", "--anchor", str(ens / "anchor.st"), *models(ens, 3),
                    "--out", str(tmp_path / name), "--granularity", "filter"]) == 0
    assert (tmp_path / "a.st").read_bytes() == (tmp_path / "b.st").read_bytes()
    assert (tmp_path / "a.st.ratios.json").read_bytes() == (tmp_path / "b.st.ratios.json").read_bytes()


def test_merge_uniform_pair_greedy(ens, tmp_path):
    assert run(["merge", "--method", "uniform", *models(ens), "--out", str(tmp_path / "u.st")]) == 0
    assert run(["merge", "--method", "pair", "--t", "0.5", *models(ens, 2), "--out", str(tmp_path / "p.st")]) == 0
    assert run(["merge", "--method", "pair", *models(ens, 2), "--out", str(tmp_path / "p.st")]) == 1
    assert run(["merge", "--method", "greedy", "--score-distance-to", str(ens / "center.st"), *models(ens),
                "--out", str(tmp_path / "g.st")]) == 0
    trace = json.loads((tmp_path / "g.st.greedy.json").read_text())
    assert len(trace) == 6 and trace[0]["accepted"]


def test_greedy_score_command(ens, tmp_path):
    script = tmp_path / "score.py"
    script.write_text("import sys\nprint(1.0)\n")
    cmd = f"{sys.executable} {script}"
    assert run(["merge", "--method", "greedy", "--score-cmd", cmd, *models(ens, 3), "--out", str(tmp_path / "g.st")]) == 0
    trace = json.loads((tmp_path / "g.st.greedy.json").read_text())
    assert all(s["accepted"] for s in trace)
    uniform = tmp_path / "u.st"
    assert run(["merge", "--method", "uniform", *models(ens, 3), "--out", str(uniform)]) == 0
    assert load_checkpoint(tmp_path / "g.st").tensors == load_checkpoint(uniform).tensors


def test_geometry_center_distance_inspect(ens, tmp_path):
    assert run(["geometry", "--anchor", str(ens / "anchor.st"), *models(ens), "--out", str(tmp_path / "g.csv"), "--csv"]) == 0
    rows = (tmp_path / "g.csv").read_text().splitlines()
    assert rows[0].startswith("unit,class,n,mean_angle_deg")
    assert len(rows) == 4
    assert run(["center", *models(ens), "--out", str(tmp_path / "c.st")]) == 0
    assert run(["distance", "--center", str(tmp_path / "c.st"), *models(ens, 2), "--out", str(tmp_path / "d.json")]) == 0
    dist = json.loads((tmp_path / "d.json").read_text())
    assert dist[0]["global"] > 0
    assert run(["inspect", str(tmp_path / "c.st"), "--out", str(tmp_path / "i.json")]) == 0
    assert json.loads((tmp_path / "i.json").read_text())[0]["tensors"][0]["shape"] == [100, 100]


def test_plane(ens, tmp_path):
    out = tmp_path / "plane"
    m = models(ens, 2)
    assert run(["plane", str(ens / "anchor.st"), *m, "--rows", "2", "--cols", "3", "--margin", "0.1", "--out", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert len(manifest["grid"]) == 6
    assert abs(manifest["basis"]["e1_dot_e2"]) < 1e-10
    assert all((out / g["file"]).exists() for g in manifest["grid"])
    assert run(["plane", str(ens / "anchor.st"), str(ens / "anchor.st"), m[0], "--out", str(out)]) == 3


def test_perturb(ens, tmp_path):
    geo = tmp_path / "geo.json"
    assert run(["geometry", "--anchor", str(ens / "anchor.st"), *models(ens), "--out", str(geo)]) == 0
    for name in ("p1.st", "p2.st"):
        assert run(["perturb", "--center", str(ens / "center.st"), "--sigma-from", str(geo), "--seed", "5",
                    "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "p1.st").read_bytes() == (tmp_path / "p2.st").read_bytes()
    assert run(["perturb", "--center", str(ens / "center.st"), "--sigma", "0.01", "--out", str(tmp_path / "x.st")]) == 1


def test_synth_trajectory_and_periodic(tmp_path):
    out = tmp_path / "traj"
    assert run(["synth", "trajectory", "--seeds", "2", "--epochs", "3", "--seed", "1", "--out", str(out)]) == 0
    final = tmp_path / "final.st"
    code = run(["periodic", "--anchor", str(out / "anchor.st"), "--trajectory", str(out / "seed_00"),
                "--trajectory", str(out / "seed_01"), "--out", str(final)])
    assert code == 0
    assert (tmp_path / "final.period1.st").exists() and (tmp_path / "final.period2.st").exists()
    ratios = json.loads((tmp_path / "final.st.ratios.json").read_text())
    assert sorted({u["period"] for u in ratios["units"]}) == [1, 2, 3]


def test_synth_validate(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"seed": 2, "units": [{"name": "w", "shape": [100, 100]}]}))
    assert run(["synth", "validate", "--spec", str(spec), "--samples", "20", "--out", str(tmp_path / "v.json")]) == 0
    assert json.loads((tmp_path / "v.json").read_text())[0]["passed"]
    spec.write_text(json.dumps({"units": [{"shape": [3]}]}))
    assert run(["synth", "validate", "--spec", str(spec)]) == 2


def test_console_entry_point(tmp_path):
    done = subprocess.run([sys.executable, "-m", "stockpot.cli", "synth", "sample", "--n", "2", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert done.returncode == 0, done.stderr
    assert (tmp_path / "model_01.st").exists()
