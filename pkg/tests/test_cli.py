import json

import numpy as np
import pytest

from arnn.cli import main
from arnn.data import SessionDataset


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    """Small generated corpus, preprocessed and trained for two epochs."""
    root = tmp_path_factory.mktemp("cli")
    raw = root / "raw"
    data = root / "data"
    ckpt = root / "ckpt"
    assert main(["synth", "--out", str(raw), "--sessions", "80", "--seed", "3"]) == 0
    assert main([
        "preprocess", "--input", str(raw / "events.tsv"), "--out", str(data),
        "--gap-threshold-seconds", "1800", "--item-coverage", "1.0",
        "--category-coverage", "1.0", "--test-window-days", "3",
    ]) == 0
    for stage in ("gru", "pnn", "merge"):
        assert main([
            "train", "--stage", stage, "--data", str(data / "train.json"),
            "--out", str(ckpt), "--profile", "synth", "--seed", "1",
            "--epochs", "2",
        ]) == 0
    return {"raw": raw, "data": data, "ckpt": ckpt}


def test_synth_writes_declared_counts(synth_dir):
    truth = json.loads((synth_dir["raw"] / "truth.json").read_text())
    lines = (synth_dir["raw"] / "events.tsv").read_text().splitlines()
    assert len(lines) - 1 == truth["counts"]["n_transactions"]


def test_preprocess_summary_matches_generator(synth_dir):
    truth = json.loads((synth_dir["raw"] / "truth.json").read_text())
    summary = (synth_dir["data"] / "summary.txt").read_text()
    stats = {}
    for line in summary.splitlines():
        key, _, value = line.partition(":")
        stats[key.strip()] = int(value.strip())
    assert stats["users"] == truth["counts"]["n_users"]
    assert stats["sessions"] == truth["counts"]["n_sessions"]
    assert stats["transactions"] == truth["counts"]["n_transactions"]
    assert stats["items"] == truth["counts"]["n_items"]
    assert stats["context fields"] == len(truth["field_names"])


def test_preprocess_degenerate_config_single_session_per_user(tmp_path, synth_dir):
    out = tmp_path / "d"
    assert main([
        "preprocess", "--input", str(synth_dir["raw"] / "events.tsv"),
        "--out", str(out), "--gap-threshold-seconds", "inf",
        "--item-coverage", "1.0", "--category-coverage", "1.0",
        "--test-window-days", "3",
    ]) == 0
    truth = json.loads((synth_dir["raw"] / "truth.json").read_text())
    train = SessionDataset.load(out / "train.json")
    test = SessionDataset.load(out / "test.json")
    assert len(train.sessions) + len(test.sessions) == truth["counts"]["n_sessions"]
    assert len(train.schema.item_vocabulary) == truth["counts"]["n_items"]


def test_train_stages_produce_checkpoints(synth_dir):
    for stage in ("gru", "pnn", "merge"):
        assert (synth_dir["ckpt"] / f"{stage}.npz").exists()
        assert (synth_dir["ckpt"] / f"{stage}_history.tsv").exists()


def test_train_merge_without_pretraining_fails(tmp_path, synth_dir):
    code = main([
        "train", "--stage", "merge", "--data",
        str(synth_dir["data"] / "train.json"), "--out", str(tmp_path / "empty"),
        "--profile", "synth", "--epochs", "1",
    ])
    assert code == 2


def test_evaluate_all_systems(tmp_path, synth_dir, capsys):
    report_path = tmp_path / "report.tsv"
    assert main([
        "evaluate", "--data", str(synth_dir["data"] / "test.json"),
        "--train-data", str(synth_dir["data"] / "train.json"),
        "--checkpoints", str(synth_dir["ckpt"]),
        "--k", "20", "--out", str(report_path),
    ]) == 0
    lines = report_path.read_text().splitlines()
    assert lines[0] == "system\tk\trecall\tmrr\tn_recs\tn_hits"
    systems = [line.split("\t")[0] for line in lines[1:]]
    assert systems == ["itemknn", "gru", "pnn", "arnn"]
    table = capsys.readouterr().out
    assert "arnn" in table


def test_evaluate_k1_recall_equals_mrr(tmp_path, synth_dir):
    report_path = tmp_path / "r1.tsv"
    assert main([
        "evaluate", "--data", str(synth_dir["data"] / "test.json"),
        "--train-data", str(synth_dir["data"] / "train.json"),
        "--checkpoints", str(synth_dir["ckpt"]),
        "--k", "1", "--out", str(report_path),
    ]) == 0
    for line in report_path.read_text().splitlines()[1:]:
        cells = line.split("\t")
        assert cells[2] == cells[3]


def test_evaluate_is_repeatable(tmp_path, synth_dir):
    paths = [tmp_path / "a.tsv", tmp_path / "b.tsv"]
    for p in paths:
        assert main([
            "evaluate", "--data", str(synth_dir["data"] / "test.json"),
            "--train-data", str(synth_dir["data"] / "train.json"),
            "--checkpoints", str(synth_dir["ckpt"]), "--out", str(p),
        ]) == 0
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_recommend_contract(synth_dir, capsys):
    train = SessionDataset.load(synth_dir["data"] / "train.json")
    item = train.schema.item_vocabulary[0]
    assert main([
        "recommend", "--checkpoint", str(synth_dir["ckpt"] / "merge.npz"),
        "--data", str(synth_dir["data"] / "train.json"),
        "--items", item, "--attrs", "f0=cat0;f1=cat1;f2=cat0;f3=cat3;f4=cat2;f5=cat1",
        "--k", "5",
    ]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 5
    scores = [float(line.split("\t")[2]) for line in lines]
    assert scores == sorted(scores, reverse=True)


def test_recommend_k_clamped_to_vocabulary(synth_dir, capsys):
    train = SessionDataset.load(synth_dir["data"] / "train.json")
    vocab = len(train.schema.item_vocabulary)
    item = train.schema.item_vocabulary[0]
    assert main([
        "recommend", "--checkpoint", str(synth_dir["ckpt"] / "gru.npz"),
        "--data", str(synth_dir["data"] / "train.json"),
        "--items", item, "--k", str(vocab + 50),
    ]) == 0
    assert len(capsys.readouterr().out.strip().splitlines()) == vocab


def test_recommend_unknown_item_exits_3(synth_dir, capsys):
    code = main([
        "recommend", "--checkpoint", str(synth_dir["ckpt"] / "gru.npz"),
        "--data", str(synth_dir["data"] / "train.json"),
        "--items", "no_such_item", "--k", "3",
    ])
    assert code == 3
    assert "no_such_item" in capsys.readouterr().err


def test_unknown_config_key_rejected(tmp_path, synth_dir):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("sessions=5\nnot_a_key=1\n")
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2
    assert not (tmp_path / "x").exists()  # validation precedes side effects


def test_config_file_with_flag_override(tmp_path):
    cfg = tmp_path / "ok.cfg"
    cfg.write_text("# comment\nsessions=30\nseed=9\n")
    out = tmp_path / "y"
    assert main(["synth", "--config", str(cfg), "--out", str(out),
                 "--sessions", "40"]) == 0
    truth = json.loads((out / "truth.json").read_text())
    assert truth["spec"]["n_sessions"] == 40  # flag beats file
    assert truth["spec"]["seed"] == 9


def test_missing_input_exits_3(tmp_path):
    assert main(["preprocess", "--input", str(tmp_path / "nope.tsv"),
                 "--out", str(tmp_path / "o")]) == 3


def test_missing_required_key_exits_2():
    assert main(["synth"]) == 2


def test_evaluate_schema_mismatch_exits_3(tmp_path, synth_dir):
    other_raw = tmp_path / "raw2"
    other_data = tmp_path / "data2"
    assert main(["synth", "--out", str(other_raw), "--sessions", "60",
                 "--items", "30", "--seed", "4"]) == 0
    assert main([
        "preprocess", "--input", str(other_raw / "events.tsv"),
        "--out", str(other_data), "--item-coverage", "1.0",
        "--category-coverage", "1.0", "--gap-threshold-seconds", "1800",
    ]) == 0
    code = main([
        "evaluate", "--data", str(other_data / "test.json"),
        "--systems", "gru", "--checkpoints", str(synth_dir["ckpt"]),
    ])
    assert code == 3
