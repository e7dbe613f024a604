import csv
import io
import json
import shutil

import numpy as np
import pytest

import splitguard.datasets as datasets
from splitguard.cli import EXIT_CONFIG, EXIT_OK, EXIT_SWEEP, _axes, load_config, main
from splitguard.datasets import gen_synthetic, write_idx

SMALL = {
    "seed": 1,
    "dataset": {"kind": "synthetic", "classes": 4, "n_train": 300, "n_observe": 200},
    "model": {"name": "tiny_convnet", "epochs": 1, "cut": "deep"},
    "attack": {"latent_dim": 4, "epochs": 5},
    "detector": {"latent_dim": 4, "epochs": 5},
    "sweep": {"name": "small", "n_benign": 70, "n_adversarial": 30},
}


def write_config(tmp_path, body, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(body))
    return str(path)


def run(tmp_path, *args, body=SMALL):
    return main([args[0], "--config", write_config(tmp_path, body), "--out", str(tmp_path / "out"), *args[1:]])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """Classifier, attack and both detectors for the moderate preset."""
    tmp = tmp_path_factory.mktemp("cli")
    assert run(tmp, "train-classifier") == EXIT_OK
    assert run(tmp, "train-attack") == EXIT_OK
    assert run(tmp, "train-detector", "--variant", "NA") == EXIT_OK
    assert run(tmp, "train-detector", "--variant", "NU") == EXIT_OK
    return tmp


def test_artifacts_written(trained):
    ck = trained / "out" / "checkpoints"
    names = {p.name for p in ck.iterdir()}
    assert {"classifier.ssnn", "classifier-log.json", "attack-deep-moderate.ssav",
            "attack-deep-moderate.log.json", "detector-deep-moderate-NA.ssdt",
            "detector-deep-moderate-NU.ssdt", "detector-deep-moderate.log.json"} <= names
    log = json.loads((ck / "classifier-log.json").read_text())
    assert {"loss", "train_accuracy"} <= set(log["epochs"][0])


def test_attack_and_detector_loss_logs_decrease(trained):
    ck = trained / "out" / "checkpoints"
    for name in ("attack-deep-moderate.log.json", "detector-deep-moderate.log.json"):
        totals = [row["total"] for row in json.loads((ck / name).read_text())][:5]
        assert all(b < a for a, b in zip(totals, totals[1:])), name


def test_classifier_checkpoint_is_reproducible(trained, tmp_path):
    assert run(tmp_path, "train-classifier") == EXIT_OK
    a = (trained / "out" / "checkpoints" / "classifier.ssnn").read_bytes()
    assert (tmp_path / "out" / "checkpoints" / "classifier.ssnn").read_bytes() == a


def test_sweep_rows(trained, capsys):
    body = dict(SMALL, sweep=dict(SMALL["sweep"], nus=[0.0, 0.25, 0.5, 0.75, 1.0], variants=["NA", "NU"]))
    assert run(trained, "sweep", body=body) == EXIT_OK
    out = capsys.readouterr().out
    rows = list(csv.DictReader(io.StringIO(out[out.index("model,cut"):])))
    assert len(rows) == 10 and not any("error" in r["degenerate_flags"] for r in rows)
    stamps = list((trained / "out" / "reports" / "small").iterdir())
    assert (stamps[0] / "report.csv").is_file() and (stamps[0] / "report.json").is_file()


def test_shipped_configs():
    cells = {}
    for name in ("table-v-analog", "fig4-analog", "noise-presets"):
        axes = _axes(load_config(f"configs/{name}.json"))
        cells[name] = len(axes["nus"]) * len(axes["presets"]) * len(axes["cuts"]) * len(axes["variants"])
    assert cells["table-v-analog"] == 10


def test_variant_isolation(tmp_path):
    assert run(tmp_path, "train-classifier") == EXIT_OK
    assert run(tmp_path, "train-attack", "--noise", "extreme") == EXIT_OK
    assert run(tmp_path, "train-detector", "--noise", "extreme", "--variant", "NA") == EXIT_OK
    names = {p.name for p in (tmp_path / "out" / "checkpoints").iterdir()}
    assert not any("NU" in n for n in names)
    body = dict(SMALL, sweep=dict(SMALL["sweep"], variants=["NA", "NU"]))
    assert run(tmp_path, "sweep", "--noise", "extreme", "--variant", "NA", body=body) == EXIT_OK


def test_default_classifier_accuracy(tmp_path):
    assert main(["train-classifier", "--out", str(tmp_path)]) == EXIT_OK
    log = json.loads((tmp_path / "checkpoints" / "classifier-log.json").read_text())
    assert log["test_accuracy"] >= 0.90


def test_missing_checkpoints_without_auto(tmp_path, capsys):
    assert run(tmp_path, "sweep") == EXIT_CONFIG
    assert "classifier checkpoint" in capsys.readouterr().err


def test_all_rows_failing_exits_4(trained, tmp_path):
    ck = tmp_path / "out" / "checkpoints"
    shutil.copytree(trained / "out" / "checkpoints", ck)
    # a detector trained at another cut cannot score deep-cut features
    assert run(tmp_path, "train-detector", "--variant", "NA", body=dict(SMALL, model=dict(SMALL["model"], cut="mid"))) == EXIT_OK
    shutil.copy(ck / "detector-mid-moderate-NA.ssdt", ck / "detector-deep-moderate-NA.ssdt")
    assert run(tmp_path, "sweep", "--variant", "NA") == EXIT_SWEEP


@pytest.mark.parametrize("body,needle", [
    ({"dataset": {"kind": "idx", "labels": "x"}}, "dataset.images"),
    ({"dataset": {"kind": "idx", "images": "/nonexistent/img", "labels": "/nonexistent/lab"}}, "dataset.images"),
    ({"bogus": 1}, "bogus"),
    ({"model": {"depth": 3}}, "model.depth"),
    ({"model": {"epochs": "six"}}, "model.epochs"),
    ({"noise": {"preset": "loud"}}, "loud"),
    ({"sweep": {"nus": [0.5, 2.0]}}, "sweep.nus"),
    ({"sweep": {"cuts": ["head"]}}, "head"),
    ({"seed": -1}, "seed"),
])
def test_config_errors_exit_2_without_outputs(tmp_path, capsys, body, needle):
    assert run(tmp_path, "train-classifier", body=body) == EXIT_CONFIG
    assert needle in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_invalid_json(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    assert main(["sweep", "--config", str(path)]) == EXIT_CONFIG


@pytest.fixture
def idx_files(tmp_path):
    data = gen_synthetic(4, 600, seed=2, size=16, channels=1)
    write_idx(tmp_path / "img.idx", (data.images[:, 0] * 255).astype(np.uint8))
    write_idx(tmp_path / "lab.idx", data.labels.astype(np.uint8))
    return tmp_path / "img.idx", tmp_path / "lab.idx"


def test_train_attack_never_reads_labels(tmp_path, idx_files, monkeypatch):
    images, labels = idx_files
    body = dict(SMALL, dataset={"kind": "idx", "images": str(images), "labels": str(labels),
                                "n_train": 300, "n_observe": 200})
    assert run(tmp_path, "train-classifier", body=body) == EXIT_OK
    opened = []
    real = datasets._open
    monkeypatch.setattr(datasets, "_open", lambda p: opened.append(str(p)) or real(p))
    assert run(tmp_path, "train-attack", body=body) == EXIT_OK
    assert opened == [str(images)]
