import json
import re

import numpy as np
import pytest

from binlite import cli, fileformat, synth
from binlite.data import write_ppm
from binlite.model import ArchPreset, build_preset


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    return synth.write_dataset(tmp_path_factory.mktemp("shapes"), synth.TASK_A, per_class=10,
                               size=24, seed=0)


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "model.bnlt"
    code = cli.main(["train", "--data", str(dataset), "--width", "0.25", "--size", "16",
                     "--epochs", "2", "--batch", "8", "--seed", "1", "--out", str(out)])
    assert code == 0
    return out


def _run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_train_writes_model_and_report(trained, capsys):
    report = json.loads(open(f"{trained}.report.json").read())
    assert 1 <= len(report["epochs"]) <= 2 and report["best_checkpoint"] == str(trained)
    g = fileformat.load(trained)
    assert g.class_names == sorted(synth.TASK_A) and g.input_shape == (16, 16, 3)
    assert g.metadata["split"] == {"seed": 1, "ratios": [0.7, 0.15, 0.15]}


def test_eval_verb(trained, dataset, capsys):
    code, out, _ = _run(capsys, "eval", "--model", trained, "--data", dataset, "--split", "test", "--json")
    assert code == 0
    payload = json.loads(out)
    conf = np.array(payload["confusion"])
    assert conf.shape == (6, 6) and conf.sum(1).tolist() == [1] * 6
    assert payload["accuracy"] == pytest.approx(np.trace(conf) / conf.sum())


def test_classify_topk_and_threads(trained, dataset, capsys):
    img = dataset / "ring" / "0003.ppm"
    outs = []
    for threads in (1, 4):
        code, out, _ = _run(capsys, "classify", "--model", trained, "--image", img, "--threads", threads)
        assert code == 0
        lines = out.strip().splitlines()
        assert len(lines) == 7 and lines[-1].startswith("latency_ms")
        probs = [float(line.split("\t")[1]) for line in lines[:6]]
        assert abs(sum(probs) - 1) <= 1e-4 and probs == sorted(probs, reverse=True)
        outs.append(lines[:6])
    assert outs[0] == outs[1]
    code, out, _ = _run(capsys, "classify", "--model", trained, "--image", img, "--topk", 2, "--json")
    assert code == 0 and len(json.loads(out)["predictions"]) == 2


def test_classify_corrupt_image(trained, tmp_path, capsys):
    bad = tmp_path / "broken.png"
    bad.write_bytes(b"\x89PNG\r\n\x1a\n garbage")
    code, _, err = _run(capsys, "classify", "--model", trained, "--image", bad)
    assert code == 2 and "broken.png" in err


def test_quantize_verify_then_inspect(trained, dataset, tmp_path, capsys):
    q = tmp_path / "q.bnlt"
    code, out, _ = _run(capsys, "quantize", "--in", trained, "--mode", "i8", "--out", q,
                        "--verify", dataset / "square", "--json")
    assert code == 0
    payload = json.loads(out)
    assert payload["verify_images"] == 10 and 0 <= payload["top1_agreement"] <= 1
    code, out, _ = _run(capsys, "inspect", "--model", q)
    assert code == 0 and "dtype i8" in out


def test_f16_ratio_printed_by_inspect(tmp_path, capsys):
    src = tmp_path / "m.bnlt"
    fileformat.save(build_preset(ArchPreset("scratch_cnn", 1.0, 6), 0), src)
    q = tmp_path / "h.bnlt"
    assert _run(capsys, "quantize", "--in", src, "--mode", "f16", "--out", q)[0] == 0
    code, out, _ = _run(capsys, "inspect", "--model", q)
    ratio = float(re.search(r"size ratio (\S+)", out).group(1))
    assert code == 0 and ratio <= 0.55


def test_bench_three_rows(trained, capsys):
    code, out, _ = _run(capsys, "bench", "--model", trained, "--threads", "1,2,4", "--iters", 10)
    assert code == 0
    rows = [line for line in out.splitlines() if re.match(r"\s+\d+\s", line)]
    assert [int(r.split()[0]) for r in rows] == [1, 2, 4]


def test_transfer_reports_frozen_and_trainable_counts(dataset, tmp_path, capsys):
    code, out, _ = _run(capsys, "train", "--data", dataset, "--arch", "transfer", "--width", "0.25",
                        "--size", "16", "--epochs", "1", "--out", tmp_path / "t.bnlt", "--json")
    assert code == 0
    payload = json.loads(out)
    assert payload["frozen_params"] > 0 and payload["trainable_params"] > 0
    assert payload["frozen_params"] + payload["trainable_params"] == payload["params"]


def test_lr_sweep_table(dataset, tmp_path, capsys):
    out_path = tmp_path / "s.bnlt"
    code, out, _ = _run(capsys, "train", "--data", dataset, "--width", "0.25", "--size", "16",
                        "--epochs", "1", "--lr-sweep", "1,0.1,0.01,0.001", "--out", out_path)
    assert code == 0
    sweep = json.loads(open(f"{out_path}.sweep.json").read())
    assert [r["lr"] for r in sweep["rows"]] == [1, 0.1, 0.01, 0.001]
    assert sweep["best_lr"] in (1, 0.1, 0.01, 0.001)
    assert out_path.exists()
    assert "best lr" in out


@pytest.mark.parametrize("argv", [
    ["train", "--out", "x.bnlt"],                       # missing --data
    ["train", "--data", ".", "--out", "x", "--bogus"],  # unknown flag
    ["bench", "--model", "x", "--threads", "1,a"],      # malformed list
    ["bench", "--model", "x", "--threads", "0,1"],
    ["frobnicate"],
])
def test_usage_errors_exit_one(argv, capsys):
    code, _, err = _run(capsys, *argv)
    assert code == 1 and "usage" in err


def test_missing_data_dir_exits_two(tmp_path, capsys):
    code, _, err = _run(capsys, "train", "--data", tmp_path / "none", "--out", tmp_path / "m")
    assert code == 2 and "none" in err


def test_corrupt_model_file_exits_two(trained, tmp_path, capsys):
    blob = bytearray(trained.read_bytes())
    blob[100] ^= 0x55
    bad = tmp_path / "bad.bnlt"
    bad.write_bytes(bytes(blob))
    assert _run(capsys, "inspect", "--model", bad)[0] == 2
    assert _run(capsys, "inspect", "--model", tmp_path / "absent.bnlt")[0] == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_training_exits_three(dataset, tmp_path, capsys):
    code, _, err = _run(capsys, "train", "--data", dataset, "--width", "0.25", "--size", "16",
                        "--epochs", "3", "--lr", "1e30", "--out", tmp_path / "n.bnlt")
    assert code == 3 and "numeric" in err


def test_seed_from_environment(dataset, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("BINLITE_SEED", "7")
    out = tmp_path / "e.bnlt"
    assert _run(capsys, "train", "--data", dataset, "--width", "0.25", "--size", "16",
                "--epochs", "1", "--out", out, "--json")[0] == 0
    assert fileformat.load(out).metadata["split"]["seed"] == 7
    monkeypatch.setenv("BINLITE_SEED", "seven")
    assert _run(capsys, "train", "--data", dataset, "--out", out)[0] == 1


def test_stray_file_in_dataset_only_warns(tmp_path, capsys):
    root = synth.write_dataset(tmp_path / "d", synth.TASK_B, per_class=4, size=16, seed=1)
    write_ppm(root / "stray.ppm", np.zeros((4, 4, 3), np.uint8))
    with pytest.warns(UserWarning):
        code, _, _ = _run(capsys, "train", "--data", root, "--width", "0.25", "--size", "16",
                          "--epochs", "1", "--ratios", "0.5,0.25,0.25", "--out", tmp_path / "m.bnlt")
    assert code == 0


@pytest.mark.slow
def test_inspect_full_vgg16(tmp_path, capsys):
    path = tmp_path / "vgg.bnlt"
    fileformat.save(build_preset(ArchPreset("vgg16", 1.0, 1000), 0), path)
    code, out, _ = _run(capsys, "inspect", "--model", path)
    params = int(re.search(r"^params (\d+)", out, re.M).group(1))
    assert code == 0 and params > 138_000_000
