import json
import subprocess
import sys

import pytest

from gea.cli import main
from gea.exports import read_csv

COMMANDS = ("ingest", "make-fixture", "sample-flow", "train", "eval", "ablate", "omega-sweep",
            "mix", "export-heatmap", "project-2d")


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    fx = root / "fx"
    assert main(["make-fixture", "--identities", "4", "--texts", "2", "--dim", "16",
                 "--seed", "1", "--out", str(fx)]) == 0
    cfg = {"epochs": 2, "batch_size": 8, "samples_per_identity": 2, "heads": 2, "fusion_layers": 1,
           "warmup_epochs": 1, "train_manifest": "fx/train.json", "val_manifest": "fx/val.json"}
    (root / "train.json").write_text(json.dumps(cfg))
    assert main(["train", "--config", str(root / "train.json"), "--out", str(root / "run")]) == 0
    return root


@pytest.mark.parametrize("command", COMMANDS)
def test_every_command_has_help(command, capsys):
    with pytest.raises(SystemExit) as exc:
        main([command, "--help"])
    assert exc.value.code == 0
    assert "--seed" in capsys.readouterr().out


def test_run_directory_contents(workspace):
    run = workspace / "run"
    cfg = json.loads((run / "config.json").read_text())
    assert cfg["schema_version"] == 1 and cfg["command"] == "train" and len(cfg["config_digest"]) == 16
    assert (run / "checkpoints" / "last.geac").exists() and (run / "checkpoints" / "best.geac").exists()
    history = json.loads((run / "reports" / "history.json").read_text())["history"]
    assert len(history) == 2


def test_ingest(workspace, capsys):
    assert main(["ingest", "--manifest", str(workspace / "fx" / "val.json")]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["records"] == 8 and summary["identities"] == 4


def test_eval_table_and_report(workspace, capsys):
    ckpt = workspace / "run" / "checkpoints" / "best.geac"
    assert main(["eval", "--manifest", str(workspace / "fx" / "test.json"), "--checkpoint", str(ckpt),
                 "--omega", "0.3", "--out", str(workspace / "ev")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert [l.split()[0] for l in lines] == ["R-1", "R-5", "R-10", "mAP"]
    report = json.loads((workspace / "ev" / "report.json").read_text())
    assert report["meta"]["omega"] == 0.3 and report["schema_version"] == 1


def test_sweep_heatmap_projection_mix(workspace):
    ckpt = str(workspace / "run" / "checkpoints" / "best.geac")
    test = str(workspace / "fx" / "test.json")
    assert main(["omega-sweep", "--manifest", test, "--checkpoint", ckpt, "--omegas", "0,0.5,1",
                 "--out", str(workspace / "sw")]) == 0
    rows = read_csv(workspace / "sw" / "omega_sweep.csv")
    assert [float(r["omega"]) for r in rows] == [0.0, 0.5, 1.0]
    assert main(["export-heatmap", "--manifest", test, "--checkpoint", ckpt, "--sample", "test-0000-0",
                 "--out", str(workspace / "hm.csv")]) == 0
    cells = read_csv(workspace / "hm.csv")
    assert len(cells) == 5 * 5  # text rows x generated rows
    assert main(["project-2d", "--manifest", test, "--out", str(workspace / "p.csv")]) == 0
    assert list(read_csv(workspace / "p.csv")[0]) == ["schema_version", "sample_id", "modality",
                                                     "identity", "x", "y"]
    assert main(["mix", "--manifest", test, "--omega", "0.4", "--out", str(workspace / "mx")]) == 0
    assert len(read_csv(workspace / "mx" / "mixed.csv")) == 8


def test_sample_flow_updates_manifest(workspace):
    out = workspace / "gen"
    assert main(["sample-flow", "--manifest", str(workspace / "fx" / "val.json"), "--steps", "4",
                 "--out", str(out)]) == 0
    assert main(["ingest", "--manifest", str(out / "val.json")]) == 0
    rec = json.loads((out / "val.json").read_text())["records"][0]
    assert rec["generated_feature"].startswith("features/") and rec["generated_feature"].endswith(".gen.geaf")


def test_ablate_table(workspace, capsys):
    assert main(["ablate", "--config", str(workspace / "train.json"), "--out", str(workspace / "ab")]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].split() == ["Model", "TGTE", "GIF", "R-1", "R-5", "R-10", "mAP"]
    assert [l.split()[0] for l in out[1:]] == ["baseline", "tgte_only", "gif_only", "full"]
    assert len(read_csv(workspace / "ab" / "ablation.csv")) == 4


def test_exit_codes(workspace, tmp_path, capsys):
    assert main(["ingest", "--manifest", str(tmp_path / "missing.json")]) == 4
    assert capsys.readouterr().err.startswith("E_IO: ")
    (tmp_path / "bad.json").write_text('{"embedding_dim": 8, "split": "val", "records": [{}]}')
    assert main(["ingest", "--manifest", str(tmp_path / "bad.json")]) == 2
    assert capsys.readouterr().err.startswith("E_MANIFEST: ")
    (tmp_path / "cfg.json").write_text(json.dumps({"epochs": 0, "train_manifest": str(workspace / "fx" / "train.json")}))
    assert main(["train", "--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path / "r")]) == 2
    capsys.readouterr()
    (tmp_path / "nan.json").write_text(json.dumps({"epochs": 2, "warmup_epochs": 0, "lr_backbone": 1e30,
                                                   "heads": 2, "fusion_layers": 1, "batch_size": 8,
                                                   "train_manifest": str(workspace / "fx" / "train.json")}))
    assert main(["train", "--config", str(tmp_path / "nan.json"), "--out", str(tmp_path / "n")]) == 3
    assert capsys.readouterr().err.startswith("E_NUMERIC: ")


def test_locked_run_directory(workspace, tmp_path):
    from filelock import FileLock
    (tmp_path / "busy").mkdir()
    with FileLock(str(tmp_path / "busy" / ".gea.lock")):
        assert main(["make-fixture", "--identities", "2", "--texts", "2", "--dim", "8",
                     "--out", str(tmp_path / "busy")]) == 4


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "gea", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("gea ")
