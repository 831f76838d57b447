import json
import subprocess
import sys

import numpy as np
import pytest

from tnga import cli, signal

TINY_TRAIN = ["--epochs", "2", "--runs", "1", "--gru", "8", "8", "--fc", "8", "--batch-size", "8"]


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr().out.strip()
    return code, (json.loads(out) if code == 0 else None)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["synth", "--seed", "7", "--train", "10", "--test", "4", "--words", "1", "2",
                     "--out", str(root / "data")]) == 0
    assert cli.main(["cochlea", "--audio", str(root / "data"), "--out", str(root / "ev")]) == 0
    return root


def test_synth_contract(capsys, tmp_path):
    code, summary = run(capsys, "synth", "--seed", "7", "--train", "5", "--test", "2", "--out", tmp_path / "d")
    assert code == 0
    assert (tmp_path / "d" / "train.jsonl").exists() and (tmp_path / "d" / "test.jsonl").exists()
    assert summary["n_train"] == 5 and summary["status"] == "ok"


def test_cochlea_on_silence(capsys, tmp_path):
    signal.write_wav(signal.Waveform(np.zeros(8000), 16000), tmp_path / "x.wav")
    (tmp_path / "cochlea.json").write_text('{"sample_rate": 16000}')
    code, summary = run(capsys, "cochlea", "--config", tmp_path / "cochlea.json", "--wav", tmp_path / "x.wav",
                        "--out", tmp_path / "x.events.csv")
    assert code == 0 and summary["n_events"] == 0
    assert (tmp_path / "x.events.csv").read_text().strip() == "t_us,channel"
    assert (tmp_path / "x.events.png").exists()


def test_train_graft_eval_end_to_end(capsys, dataset, tmp_path):
    d, ev = dataset / "data", dataset / "ev"
    code, pt = run(capsys, "pretrain", "--audio", d, "--out", tmp_path / "pt", *TINY_TRAIN)
    assert code == 0
    code, sn = run(capsys, "train-sn", "--events", ev, "--out", tmp_path / "sn", *TINY_TRAIN)
    assert code == 0
    code, gn = run(capsys, "graft", "--pretrained", pt["checkpoints"][0], "--events", ev, "--audio", d,
                   "--epochs", "2", "--runs", "1", "--lr", "1e-3", "--out", tmp_path / "gn")
    assert code == 0
    assert (tmp_path / "gn" / "gn.metrics.json").exists() and (tmp_path / "gn" / "gn-seed0.ckpt").exists()
    assert (tmp_path / "gn" / "gn.losses.png").exists()
    doc = json.loads((tmp_path / "gn" / "gn.metrics.json").read_text())
    assert {"model_tag", "feature_config", "wer_mean", "wer_std", "runs"} <= set(doc)
    code, e = run(capsys, "eval", "--checkpoint", gn["checkpoints"][0], "--events", ev, "--out", tmp_path / "gn")
    assert code == 0 and e["wer_mean"] == pytest.approx(gn["wer_mean"])
    code, f = run(capsys, "featurize", "--wav", d / "test" / "test-00000.wav", "--out", tmp_path / "a.tftr")
    assert code == 0 and f["cols"] == 40
    code, f = run(capsys, "featurize", "--events", ev / "test" / "test-00000.csv", "--out", tmp_path / "e.tftr")
    assert code == 0 and f["cols"] == 64
    code, r = run(capsys, "decode-states", "--pretrained", pt["checkpoints"][0], "--grafted", gn["checkpoints"][0],
                  "--features", tmp_path / "e.tftr", "--reference", tmp_path / "a.tftr", "--iters", "20",
                  "--out", tmp_path / "dec.tftr")
    assert code == 0 and (tmp_path / "dec.png").exists()
    code, a = run(capsys, "align", "--wav", d / "test" / "test-00000.wav", "--events", ev / "test" / "test-00000.csv",
                  "--out", tmp_path / "al.csv")
    assert code == 0
    rep = json.loads((tmp_path / "al.align.json").read_text())
    assert set(rep) == {"sample_id", "dtw_cost", "clamped_events"}


def test_byte_identical_reruns(capsys, dataset, tmp_path):
    for tag in ("a", "b"):
        code, _ = run(capsys, "pretrain", "--audio", dataset / "data", "--out", tmp_path / tag, "--no-report", *TINY_TRAIN)
        assert code == 0
    for name in ("pt-seed0.ckpt", "pt.metrics.json", "pt.losses.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_exit_codes(capsys, tmp_path):
    assert cli.main(["bogus"]) == 1
    assert cli.main(["pretrain", "--out", str(tmp_path), "--bogus"]) == 1
    assert cli.main(["graft", "--out", str(tmp_path)]) == 1  # missing --pretrained
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--audio", str(tmp_path),
                     "--out", str(tmp_path)]) == 2
    (tmp_path / "bad.json").write_text("{not json")
    assert cli.main(["pretrain", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path)]) == 1
    capsys.readouterr()


def test_help_lists_every_flag():
    parser = cli.build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    for name, p in sub.choices.items():
        text = p.format_help()
        for action in p._actions:
            for opt in action.option_strings:
                assert opt in text, (name, opt)
            if action.option_strings and action.dest != "help":
                assert action.help, (name, action.dest)


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "tnga", "synth", "--train", "1", "--test", "1",
                          "--words", "1", "1", "--out", str(tmp_path)], capture_output=True, text=True)
    assert res.returncode == 0
    assert json.loads(res.stdout)["command"] == "synth"
