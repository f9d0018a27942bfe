import json
import struct
import subprocess
import sys

import numpy as np
import pytest

from merkleguard.cli import main
from merkleguard.checkpoint import load_checkpoint, save_checkpoint
from merkleguard.guard import commit
from merkleguard.merkle import build_tree


def write_idx_split(directory, prefix, images, labels):
    n = len(labels)
    (directory / f"{prefix}-images-idx3-ubyte").write_bytes(
        struct.pack(">IIII", 0x803, n, 28, 28) + images.astype(np.uint8).tobytes()
    )
    (directory / f"{prefix}-labels-idx1-ubyte").write_bytes(
        struct.pack(">II", 0x801, n) + labels.astype(np.uint8).tobytes()
    )


@pytest.fixture(scope="module")
def tiny_mnist(tmp_path_factory):
    """Ten-class synthetic digits: class c lights up pixel block c."""
    d = tmp_path_factory.mktemp("mnist")
    rng = np.random.default_rng(0)

    def make(n):
        labels = np.arange(n) % 10
        images = rng.integers(0, 40, (n, 784))
        for i, c in enumerate(labels):
            images[i, c * 70 : c * 70 + 60] = 255
        return images, labels

    write_idx_split(d, "train", *make(300))
    write_idx_split(d, "t10k", *make(100))
    return d


@pytest.fixture(scope="module")
def trained(tiny_mnist, tmp_path_factory):
    out = tmp_path_factory.mktemp("model") / "m.ntck"
    assert main(["train", "--data", str(tiny_mnist), "--out", str(out), "--epochs", "3", "--hidden", "16,8"]) == 0
    return out


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, (json.loads(out) if out.strip() else None), err


def test_train_reports_json(tiny_mnist, tmp_path, capsys):
    code, payload, _ = run(capsys, "train", "--data", tiny_mnist, "--out", tmp_path / "m.ntck",
                           "--epochs", "3", "--hidden", "16,8", "--seed", "4")
    assert code == 0
    assert payload["command"] == "train"
    assert payload["epochs"] == 3 and payload["seed"] == 4
    assert payload["test_accuracy"] >= 0.8
    assert load_checkpoint(tmp_path / "m.ntck").shape == [(784, 16), (16, 8), (8, 10)]


def test_train_zero_epochs(tiny_mnist, tmp_path, capsys):
    code, payload, _ = run(capsys, "train", "--data", tiny_mnist, "--out", tmp_path / "m.ntck", "--epochs", "0")
    assert code == 0
    assert (tmp_path / "m.ntck").exists()
    assert 0.0 <= payload["test_accuracy"] <= 0.5


def test_train_missing_files(tmp_path, capsys):
    code, payload, err = run(capsys, "train", "--data", tmp_path, "--out", tmp_path / "m.ntck")
    assert code == 1 and payload is None
    assert "train-images" in err


def test_commit_and_verify_match(trained, tmp_path, capsys):
    manifest = tmp_path / "m.json"
    code, payload, _ = run(capsys, "commit", "--model", trained, "--manifest", manifest)
    assert code == 0
    assert len(payload["root"]) == 64 and int(payload["root"], 16) >= 0
    assert payload["root"] == build_tree(load_checkpoint(trained)).root.hex()
    code, payload, _ = run(capsys, "verify", "--model", trained, "--manifest", manifest)
    assert code == 0
    assert payload["verdict"] == "Match" and payload["nodes_visited"] == 1


def test_commit_bad_model(tmp_path, capsys):
    (tmp_path / "bad.ntck").write_bytes(b"XXXX")
    code, _, err = run(capsys, "commit", "--model", tmp_path / "bad.ntck", "--manifest", tmp_path / "m.json")
    assert code == 1
    assert "magic" in err


def test_attack_then_verify_localizes(trained, tiny_mnist, tmp_path, capsys):
    manifest = tmp_path / "m.json"
    run(capsys, "commit", "--model", trained, "--manifest", manifest)
    code, payload, _ = run(capsys, "attack", "--model", trained, "--sink", 7, "--out", tmp_path / "t.ntck",
                           "--data", tiny_mnist)
    assert code == 0
    assert payload["epsilon_chosen"] is True and payload["epsilon_used"] > 0
    assert payload["sink_rate_after"] == 0.0
    code, payload, err = run(capsys, "verify", "--model", tmp_path / "t.ntck", "--manifest", manifest)
    assert code == 2
    assert payload["verdict"] == "Tampered"
    assert payload["tampered_neurons"] == [[2, 7]]
    assert "tampering" in err


def test_attack_zero_epsilon_is_byte_identical(trained, tmp_path, capsys):
    code, payload, _ = run(capsys, "attack", "--model", trained, "--sink", 3, "--out", tmp_path / "t.ntck",
                           "--epsilon", 0)
    assert code == 0
    assert (tmp_path / "t.ntck").read_bytes() == trained.read_bytes()
    assert payload["baseline_accuracy"] is None


def test_attack_budget_warning(trained, tiny_mnist, tmp_path, capsys):
    code, payload, err = run(capsys, "attack", "--model", trained, "--sink", 1, "--out", tmp_path / "t.ntck",
                             "--data", tiny_mnist, "--budget", 0.01)
    assert code == 0
    assert payload["budget_exceeded"] is True
    assert "exceeds budget" in err


def test_attack_needs_data_or_epsilon(trained, tmp_path, capsys):
    code, _, err = run(capsys, "attack", "--model", trained, "--sink", 1, "--out", tmp_path / "t.ntck")
    assert code == 1 and "--data" in err


def test_verify_structure_changed(trained, tmp_path, capsys):
    from conftest import random_model

    manifest = tmp_path / "m.json"
    run(capsys, "commit", "--model", trained, "--manifest", manifest)
    other = tmp_path / "other.ntck"
    save_checkpoint(random_model(np.random.default_rng(0), [784, 10]), other)
    code, payload, _ = run(capsys, "verify", "--model", other, "--manifest", manifest)
    assert code == 3
    assert payload["verdict"] == "StructureChanged"


def test_verify_bad_manifest(trained, tmp_path, capsys):
    (tmp_path / "m.json").write_text('{"format_version": 1,\n', encoding="utf-8")
    code, _, err = run(capsys, "verify", "--model", trained, "--manifest", tmp_path / "m.json")
    assert code == 1 and "line" in err


def test_eval_rates_sum_to_one(trained, tiny_mnist, capsys):
    code, payload, _ = run(capsys, "eval", "--model", trained, "--data", tiny_mnist)
    assert code == 0
    assert 0.0 <= payload["accuracy"] <= 1.0
    assert abs(sum(payload["class_prediction_rates"]) - 1.0) <= 1e-6


def test_sink_class(trained, capsys):
    code, payload, _ = run(capsys, "sink-class", "--model", trained, "--layer", 2, "--unit", 5)
    assert code == 0 and payload["sink_class"] == 5


def test_experiment_writes_report(trained, tiny_mnist, tmp_path, capsys):
    code, payload, _ = run(capsys, "experiment", "--model", trained, "--data", tiny_mnist, "--out-dir", tmp_path / "rep")
    assert code == 0
    assert payload["detected"] == payload["localized"] == 10
    for name in ("attacks.csv", "study.json", "accuracy_by_sink_class.png", "drop_vs_class_share.png"):
        assert (tmp_path / "rep" / name).stat().st_size > 0
    assert (tmp_path / "rep" / "accuracy_by_sink_class.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_usage_error_exits_one(capsys):
    with pytest.raises(SystemExit) as info:
        main(["verify", "--model", "x"])
    assert info.value.code == 1


def test_module_entry_point_streams(trained, tmp_path):
    manifest = tmp_path / "m.json"
    write = subprocess.run([sys.executable, "-m", "merkleguard", "commit", "--model", str(trained),
                            "--manifest", str(manifest)], capture_output=True, text=True)
    assert write.returncode == 0 and write.stderr == ""
    json.loads(write.stdout)
    check = subprocess.run([sys.executable, "-m", "merkleguard", "verify", "--model", str(trained),
                            "--manifest", str(manifest)], capture_output=True, text=True)
    assert check.returncode == 0
    assert json.loads(check.stdout)["verdict"] == "Match"


def test_end_to_end_determinism(tiny_mnist, tmp_path, capsys):
    outputs = []
    for run_dir in ("a", "b"):
        d = tmp_path / run_dir
        d.mkdir()
        run(capsys, "train", "--data", tiny_mnist, "--out", d / "m.ntck", "--epochs", "2", "--hidden", "8")
        run(capsys, "commit", "--model", d / "m.ntck", "--manifest", d / "m.json")
        _, report, _ = run(capsys, "attack", "--model", d / "m.ntck", "--sink", 4, "--out", d / "t.ntck",
                           "--data", tiny_mnist)
        report.pop("out")
        outputs.append(((d / "m.ntck").read_bytes(), (d / "m.json").read_bytes(), (d / "t.ntck").read_bytes(), report))
    assert outputs[0] == outputs[1]
    assert commit(load_checkpoint(tmp_path / "a" / "m.ntck")).root == json.loads((tmp_path / "a" / "m.json").read_text())["levels"][-1][0]
