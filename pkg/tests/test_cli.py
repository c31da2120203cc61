import json

import pytest

from divert.cli import main
from divert.data import load_corpus


@pytest.fixture
def tiny_config(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({
        "arch": {"d_model": 16, "n_layers": 1, "n_heads": 2, "max_len": 256},
        "sft": {"epochs": 1, "batch_size": 8},
        "variational": {"pairs_per_batch": 8, "max_error_len": 6},
        "weights": {"mc_samples": 2},
    }))
    return p


def test_full_command_chain(tmp_path, tiny_config, capsys):
    data = tmp_path / "all.jsonl"
    assert main(["gen-data", "--n", "20", "--seed", "1", "--out", str(data)]) == 0
    assert (tmp_path / "all.taxonomy.json").exists()
    assert (tmp_path / "all.jsonl.manifest.json").exists()

    assert main(["split", "--corpus", str(data), "--ratios", "0.6,0.2,0.2", "--seed", "0",
                 "--out", str(tmp_path / "syn")]) == 0
    train, val, test = (tmp_path / f"syn.{n}.jsonl" for n in ("train", "val", "test"))
    assert sum(len(load_corpus(p)) for p in (train, val, test)) == 20

    sft = tmp_path / "sft"
    assert main(["sft", "--corpus", str(train), "--val", str(val), "--config", str(tiny_config),
                 "--out-ckpt", str(sft)]) == 0
    manifest = json.loads((sft / "manifest.json").read_text())
    assert manifest["config"]["arch"]["d_model"] == 16
    assert set(manifest["inputs"]) == {str(train), str(val)}

    var = tmp_path / "var"
    assert main(["train", "--ckpt", str(sft), "--corpus", str(train), "--config", str(tiny_config),
                 "--beta", "0.2", "--lambda-end", "0.5", "--out-ckpt", str(var)]) == 0
    m = json.loads((var / "manifest.json").read_text())
    assert m["config"]["weights"]["beta"] == 0.2 and m["config"]["weights"]["mc_samples"] == 2
    header = (var / "train_log.csv").read_text().splitlines()[0]
    assert header == "step,reconstruction,kl_term,q_reg,total,lambda,grad_norm"

    gens = tmp_path / "gen.jsonl"
    assert main(["generate", "--ckpt", str(var), "--corpus", str(test), "--ne", "2", "--nd", "2",
                 "--k", "3", "--out", str(gens)]) == 0
    recs = [json.loads(line) for line in gens.read_text().splitlines()]
    assert len(recs) == len(load_corpus(test))
    assert all(len(r["candidates"]) <= 3 for r in recs)

    report = tmp_path / "report.json"
    assert main(["evaluate", "--corpus", str(test), "--generations", str(gens), "--k", "3,10",
                 "--similarity", "lcs_f1", "--out", str(report)]) == 0
    rep = json.loads(report.read_text())
    assert rep["similarity"] == "lcs_f1" and "prop@10" in rep["summary"]
    assert (tmp_path / "report.summary.csv").read_text().startswith("metric,k,value_percent\n")

    # same inputs give byte-identical metric output
    again = tmp_path / "report2.json"
    main(["evaluate", "--corpus", str(test), "--generations", str(gens), "--k", "3,10",
          "--similarity", "lcs_f1", "--out", str(again)])
    assert again.read_bytes() == report.read_bytes()


def test_missing_input_exits_nonzero_and_names_path(tmp_path, capsys):
    missing = tmp_path / "nope.jsonl"
    assert main(["split", "--corpus", str(missing), "--out", str(tmp_path / "x")]) == 2
    assert str(missing) in capsys.readouterr().err


def test_unknown_config_key_rejected(tmp_path, capsys):
    data = tmp_path / "d.jsonl"
    main(["gen-data", "--n", "6", "--out", str(data)])
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"sft": {"learning_rate": 0.1}}))
    assert main(["sft", "--corpus", str(data), "--config", str(cfg), "--out-ckpt", str(tmp_path / "c")]) == 2
    assert "sft.learning_rate" in capsys.readouterr().err
    cfg.write_text(json.dumps({"optimizer": "sgd"}))
    assert main(["sft", "--corpus", str(data), "--config", str(cfg), "--out-ckpt", str(tmp_path / "c")]) == 2
    assert "optimizer" in capsys.readouterr().err


def test_bad_decode_settings_rejected(tmp_path, capsys):
    data = tmp_path / "d.jsonl"
    main(["gen-data", "--n", "3", "--out", str(data)])
    (tmp_path / "ck").mkdir()
    assert main(["generate", "--ckpt", str(tmp_path / "ck"), "--corpus", str(data), "--ne", "2", "--nd", "2",
                 "--k", "10", "--out", str(tmp_path / "g.jsonl")]) == 2


def test_bad_checkpoint_rejected(tmp_path, capsys):
    data = tmp_path / "d.jsonl"
    main(["gen-data", "--n", "3", "--out", str(data)])
    (tmp_path / "ck").mkdir()
    assert main(["generate", "--ckpt", str(tmp_path / "ck"), "--corpus", str(data), "--out",
                 str(tmp_path / "g.jsonl")]) == 2
    assert "triple.json" in capsys.readouterr().err


def test_unknown_family_and_similarity(tmp_path, capsys):
    assert main(["gen-data", "--families", "geometry", "--out", str(tmp_path / "g.jsonl")]) == 2
    data = tmp_path / "d.jsonl"
    main(["gen-data", "--n", "3", "--out", str(data)])
    gens = tmp_path / "gen.jsonl"
    gens.write_text("")
    assert main(["evaluate", "--corpus", str(data), "--generations", str(gens), "--similarity", "bleu",
                 "--out", str(tmp_path / "r.json")]) == 2
