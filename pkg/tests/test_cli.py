import json
import subprocess
import sys

import pytest

from posegan.cli import default_config, dispatch, merge_config
from posegan.errors import ValidationError

TINY_SETS = ["--set", "train.arch.image_size=32", "--set", "train.arch.base_width=4",
             "--set", "train.arch.n_res_elim=1", "--set", "train.arch.n_res_add=1"]


def run(capsys, *argv):
    code = dispatch([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory, tiny_dataset):
    out = tmp_path_factory.mktemp("cli_train")
    code = dispatch(["train", "--manifest", str(tiny_dataset / "train.jsonl"), "--out", str(out), "--epochs", "1",
                     "--batch-size", "8", "--n-critic", "1", "--quiet", *TINY_SETS])
    assert code == 0
    return out


def test_merge_rejects_unknown_keys():
    cfg = merge_config(default_config(), {"train": {"batch_size": 4}})
    assert cfg["train"]["batch_size"] == 4
    with pytest.raises(ValidationError, match="train.bogus"):
        merge_config(default_config(), {"train": {"bogus": 1}})
    with pytest.raises(ValidationError):
        merge_config(default_config(), {"train": 3})


def test_datagen_writes_dataset_and_config(tmp_path, capsys):
    code, out, _ = run(capsys, "datagen", "--classes", 2, "--instances", 2, "--size", 32, "--out", tmp_path,
                       "--json", "--seed", 5)
    assert code == 0
    assert json.loads(out)["images"] == 24
    echoed = json.loads((tmp_path / "config.json").read_text())
    assert echoed["command"] == "datagen" and echoed["config"]["seed"] == 5
    assert echoed["config"]["datagen"]["image_size"] == 32
    assert (tmp_path / "train.jsonl").exists() and (tmp_path / "instances.json").exists()


def test_precedence_defaults_file_flags_set(tmp_path, capsys):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"datagen": {"classes": 3, "instances": 3, "image_size": 32}}))
    code, _, _ = run(capsys, "datagen", "--config", conf, "--instances", 2, "--set", "datagen.classes=1",
                     "--out", tmp_path / "d", "--quiet")
    assert code == 0
    g = json.loads((tmp_path / "d" / "config.json").read_text())["config"]["datagen"]
    assert (g["classes"], g["instances"], g["image_size"]) == (1, 2, 32)


@pytest.mark.parametrize("argv,code,needle", [
    (["datagen", "--out", "x", "--set", "datagen.colour=1"], 3, "error: validation:"),
    (["datagen", "--out", "x", "--set", "nonsense"], 3, "error: validation:"),
    (["datagen", "--out", "x", "--classes", "0"], 3, "error: invalid-argument:"),
    (["datagen"], 2, "--out"),
    (["nope"], 2, "invalid choice"),
])
def test_error_exit_codes(tmp_path, capsys, monkeypatch, argv, code, needle):
    monkeypatch.chdir(tmp_path)
    got, _, err = run(capsys, *argv)
    assert got == code and needle in err


def test_missing_checkpoint_is_reported(tmp_path, capsys, tiny_dataset):
    code, _, err = run(capsys, "rank", "--checkpoint", tmp_path / "none", "--manifest",
                       tiny_dataset / "all.jsonl", "--pose", 0)
    assert code == 3 and err.startswith("error: checkpoint:")


def test_train_outputs(trained_dir):
    assert (trained_dir / "checkpoint" / "meta.json").exists()
    assert (trained_dir / "loss_log.csv").read_text().startswith("epoch,step,")
    echoed = json.loads((trained_dir / "config.json").read_text())["config"]["train"]
    assert echoed["total_epochs"] == 1 and echoed["arch"]["base_width"] == 4


def test_finetune(tmp_path, capsys, trained_dir, tiny_dataset):
    code, out, _ = run(capsys, "finetune", "--checkpoint", trained_dir / "checkpoint", "--manifest",
                       tiny_dataset / "test.jsonl", "--epochs", 1, "--out", tmp_path, "--json")
    assert code == 0
    res = json.loads(out)
    assert res["lr0"] == pytest.approx(1e-5) and (tmp_path / "checkpoint" / "meta.json").exists()


def test_synthesize_rebalance_and_sweep(tmp_path, capsys, trained_dir, tiny_dataset):
    avail = tmp_path / "avail.json"
    avail.write_text(json.dumps({"poses": {"cylinder": [1, 4]}}))
    img = next(tiny_dataset.glob("*.png"))
    code, out, _ = run(capsys, "synthesize", "--checkpoint", trained_dir / "checkpoint",
                       "--manifest", tiny_dataset / "train.jsonl", "--availability", avail,
                       "--out-manifest", tmp_path / "bal.jsonl", "--offsets", "0.5,2.5",
                       "--sweep-image", img, "--sweep-steps", "5x1", "--sweep-out", tmp_path / "s.png", "--json")
    assert code == 0
    res = json.loads(out)
    assert res["sweep"]["shape"] == [32, 160, 3]
    assert res["rebalanced"] == 0  # train.jsonl already holds every pose
    assert res["additional"] == 2 * 2
    assert (tmp_path / "bal.jsonl").exists() and (tmp_path / "s.png").exists()


def test_synthesize_needs_work(capsys, trained_dir):
    code, _, err = run(capsys, "synthesize", "--checkpoint", trained_dir / "checkpoint")
    assert code == 3 and "nothing to do" in err


def test_evaluate_with_baseline(tmp_path, capsys, trained_dir, tiny_dataset):
    code, out, _ = run(capsys, "evaluate", "--checkpoint", trained_dir / "checkpoint", "--manifest",
                       tiny_dataset / "test.jsonl", "--oracle", tiny_dataset, "--baseline", "--out", tmp_path)
    assert code == 0
    assert out.startswith("model") and "identity" in out and "mean PSNR" in out
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert set(metrics) == {"model", "identity"}


def test_rank_json(capsys, trained_dir, tiny_dataset):
    code, out, _ = run(capsys, "rank", "--checkpoint", trained_dir / "checkpoint", "--manifest",
                       tiny_dataset / "all.jsonl", "--pose", 1, "--k", 3, "--json")
    assert code == 0
    top = json.loads(out)["top"]
    assert len(top) == 3 and top[0]["probability"] >= top[-1]["probability"]


def test_experiment_plan(tmp_path, capsys, trained_dir, tiny_dataset):
    plan = {"train_manifest": str(tiny_dataset / "train.jsonl"), "test_manifest": str(tiny_dataset / "test.jsonl"),
            "checkpoint": str(trained_dir / "checkpoint"), "out_dir": "exp", "seeds": [0],
            "roles": ["P-UB", "S-P-B"], "availability": {"poses": {"cylinder": [1, 4]}},
            "classifier": {"width": 8, "n_blocks": 1, "epochs": 2, "batch_size": 8}}
    (tmp_path / "plan.json").write_text(json.dumps(plan))
    code, out, _ = run(capsys, "experiment", "--plan", tmp_path / "plan.json", "--json")
    assert code == 0
    assert set(json.loads(out)["summary"]) == {"P-UB", "S-P-B"}
    assert (tmp_path / "exp" / "accuracy_table.csv").exists() and (tmp_path / "exp" / "config.json").exists()


def test_console_script_help():
    proc = subprocess.run([sys.executable, "-m", "posegan.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("datagen", "train", "finetune", "synthesize", "evaluate", "experiment", "rank"):
        assert cmd in proc.stdout
