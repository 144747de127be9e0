"""End-to-end command-line flows on a tiny world, including the determinism
and overwrite contracts."""

import json
import subprocess
import sys

import pytest

from protofuse.cli import main

GEN_FLAGS = ["--dim", "12", "--semantic-dim", "6", "--base-classes", "6",
             "--novel-classes", "4", "--attributes", "10", "--attrs-per-class", "3", "5",
             "--samples-per-class", "20", "--noise-std", "0.05", "--dropout", "0.4",
             "--offset-std", "0.8", "--seed", "3"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    world = root / "world"
    model = root / "model.pcn"
    assert main(["gen", "--out", str(world)] + GEN_FLAGS) == 0
    assert main(["train-completion", "--world", str(world), "--out", str(model),
                 "--epochs", "4", "--episodes-per-epoch", "8",
                 "--learning-rate", "0.01", "--seed", "5"]) == 0
    return root, world, model


def test_gen_writes_expected_files(workspace):
    _, world, _ = workspace
    for name in ("base.manifest.json", "base.labels.txt", "base.f64le",
                 "novel.manifest.json", "knowledge.json", "centers.json",
                 "worldspec.json"):
        assert (world / name).exists()


def test_gen_is_deterministic(tmp_path, workspace):
    _, world, _ = workspace
    again = tmp_path / "again"
    assert main(["gen", "--out", str(again)] + GEN_FLAGS) == 0
    for name in ("base.f64le", "novel.f64le", "knowledge.json", "centers.json"):
        assert (again / name).read_bytes() == (world / name).read_bytes()


def test_train_produces_checkpoint_and_sidecar(workspace):
    _, _, model = workspace
    assert model.exists()
    sidecar = json.loads((model.parent / "model.pcn.json").read_text())
    assert sidecar["input_dim"] == 12
    assert len(sidecar["metadata"]["losses"]) == 4


def test_train_refuses_overwrite_without_flag(workspace, capsys):
    root, world, model = workspace
    code = main(["train-completion", "--world", str(world), "--out", str(model),
                 "--epochs", "1", "--episodes-per-epoch", "4", "--seed", "5"])
    assert code == 1
    assert "error:" in capsys.readouterr().err


def test_train_is_deterministic(tmp_path, workspace):
    _, world, model = workspace
    other = tmp_path / "other.pcn"
    assert main(["train-completion", "--world", str(world), "--out", str(other),
                 "--epochs", "4", "--episodes-per-epoch", "8",
                 "--learning-rate", "0.01", "--seed", "5"]) == 0
    assert other.read_bytes() == model.read_bytes()


def test_eval_writes_report_and_is_deterministic(tmp_path, workspace, capsys):
    _, world, model = workspace
    out1, out2 = tmp_path / "r1.json", tmp_path / "r2.json"
    args = ["eval", "--world", str(world), "--checkpoint", str(model),
            "--mode", "gauss-fusion", "--n-way", "3", "--m-query", "5",
            "--episodes", "12", "--seed", "11"]
    assert main(args + ["--out", str(out1)]) == 0
    assert "gauss-fusion" in capsys.readouterr().out
    assert main(args + ["--out", str(out2)]) == 0
    assert out1.read_bytes() == out2.read_bytes()
    doc = json.loads(out1.read_text())
    assert doc["episodes"] == 12
    assert len(doc["per_episode"]) == 12
    assert 0.0 <= doc["mean_acc"] <= 1.0


def test_eval_fusion_dump(tmp_path, workspace):
    _, world, model = workspace
    out = tmp_path / "r.json"
    dump = tmp_path / "fusion.jsonl"
    assert main(["eval", "--world", str(world), "--checkpoint", str(model),
                 "--mode", "gauss-fusion", "--n-way", "3", "--m-query", "4",
                 "--episodes", "3", "--seed", "2", "--out", str(out),
                 "--dump-fusion", str(dump)]) == 0
    lines = dump.read_text().strip().splitlines()
    assert len(lines) == 3
    entry = json.loads(lines[0])
    assert {"mean_based", "completed", "posterior"} <= set(entry)


def test_meta_train_runs(tmp_path, workspace):
    _, world, model = workspace
    out = tmp_path / "meta.pcn"
    assert main(["meta-train", "--world", str(world), "--checkpoint", str(model),
                 "--out", str(out), "--epochs", "2", "--episodes-per-epoch", "4",
                 "--n-way", "3", "--m-query", "4", "--seed", "7"]) == 0
    sidecar = json.loads((tmp_path / "meta.pcn.json").read_text())
    assert sidecar["metadata"]["phase"] == "meta"
    assert len(sidecar["metadata"]["losses"]) == 2


def test_ablate_first_row_matches_eval(tmp_path, workspace):
    _, world, model = workspace
    table = tmp_path / "ablate.json"
    single = tmp_path / "single.json"
    shape = ["--n-way", "3", "--m-query", "5", "--episodes", "10", "--seed", "19"]
    assert main(["ablate", "--world", str(world), "--checkpoint", str(model),
                 "--out", str(table)] + shape) == 0
    assert main(["eval", "--world", str(world), "--checkpoint", str(model),
                 "--mode", "mean-only", "--out", str(single)] + shape) == 0
    rows = json.loads(table.read_text())
    assert set(rows) == {"mean-only", "completed-only", "mean-fusion", "gauss-fusion"}
    assert rows["mean-only"] == json.loads(single.read_text())


def test_noise_sweep_zero_level_matches_clean_eval(tmp_path, workspace):
    _, world, model = workspace
    out = tmp_path / "sweep.json"
    clean = tmp_path / "clean.json"
    shape = ["--n-way", "3", "--m-query", "5", "--episodes", "10", "--seed", "23"]
    assert main(["noise-sweep", "--world", str(world), "--checkpoint", str(model),
                 "--gamma-noise", "0.0", "0.3", "--out", str(out)] + shape) == 0
    assert main(["eval", "--world", str(world), "--checkpoint", str(model),
                 "--mode", "completed-only", "--out", str(clean)] + shape) == 0
    doc = json.loads(out.read_text())
    assert doc["completed-only"]["0.0"] == json.loads(clean.read_text())
    assert set(doc["completed-only"]) == {"0.0", "0.3"}


def test_report_outputs(tmp_path, workspace, capsys):
    _, world, model = workspace
    prefix = str(tmp_path / "diag")
    assert main(["report", "--world", str(world), "--checkpoint", str(model),
                 "--out-prefix", prefix, "--episodes", "20", "--n-way", "3",
                 "--m-query", "4", "--window", "10", "--seed", "29"]) == 0
    out = capsys.readouterr().out
    assert "averaged variance" in out
    similarity = json.loads((tmp_path / "diag-similarity.json").read_text())
    assert {"mean_based", "completed", "fused"} <= set(similarity)
    curve = (tmp_path / "diag-rank-curve.csv").read_text().splitlines()
    assert curve[0] == "rank,mean_based,completed"
    assert len(curve) == 21


def test_runtime_error_exit_code(tmp_path, capsys):
    code = main(["eval", "--world", str(tmp_path / "missing"), "--checkpoint", "x",
                 "--mode", "mean-only", "--out", str(tmp_path / "r.json"),
                 "--seed", "1"])
    assert code == 1
    err = capsys.readouterr().err
    assert err.startswith("error:")
    assert "\n" not in err.strip()


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as exc:
        main(["eval", "--mode", "nonsense"])
    assert exc.value.code == 2


def test_module_entry_point(tmp_path):
    result = subprocess.run(
        [sys.executable, "-m", "protofuse", "gen", "--out", str(tmp_path / "w"),
         "--base-classes", "3", "--novel-classes", "2", "--attributes", "6",
         "--attrs-per-class", "2", "3", "--samples-per-class", "5",
         "--dim", "8", "--semantic-dim", "4", "--seed", "1"],
        capture_output=True, text=True)
    assert result.returncode == 0, result.stderr
    assert (tmp_path / "w" / "base.manifest.json").exists()
