import json

import pytest

from core.cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, dispatch


def run_json(directory):
    return json.loads((directory / "run.json").read_text(encoding="utf-8"))


def test_help_exits_cleanly(capsys):
    assert dispatch(["--help"]) == EXIT_OK
    assert "pretrain" in capsys.readouterr().out


def test_missing_required_flag_is_usage_error(capsys):
    assert dispatch(["synth"]) == EXIT_USAGE
    err = capsys.readouterr().err
    assert err.strip().splitlines()[-1].startswith("error: UsageError:")


def test_unknown_stage_is_usage_error():
    assert dispatch(["distill", "--out", "x"]) == EXIT_USAGE


def test_bad_config_is_reported_on_one_line(tmp_path, capsys):
    config = tmp_path / "run.yaml"
    config.write_text("model:\n  hidden_size: 10\n  num_heads: 3\n")
    assert dispatch(["synth", "--config", str(config), "--out", str(tmp_path / "out")]) == EXIT_USAGE
    lines = capsys.readouterr().err.strip().splitlines()
    assert len(lines) == 1 and lines[0].startswith("error: ConfigurationError:")

    config.write_text("schedule: [1, 2\n")
    assert dispatch(["synth", "--config", str(config), "--out", str(tmp_path / "out")]) == EXIT_USAGE


def test_missing_input_is_usage_error(tmp_path, capsys):
    code = dispatch(["corpus", "--input", str(tmp_path / "absent.jsonl"), "--out", str(tmp_path / "corpus")])
    assert code == EXIT_USAGE
    assert "absent.jsonl" in capsys.readouterr().err


def test_runtime_failure_exits_one(tmp_path, tokenizer_dir, capsys):
    checkpoint = tmp_path / "bad.ckpt"
    checkpoint.write_bytes(b"not a checkpoint at all")
    pairs = tmp_path / "pairs.jsonl"
    pairs.write_text('{"phenomenon": "binding", "good": "a", "bad": "b"}\n')
    code = dispatch([
        "eval", "turblimp", "--ckpt", str(checkpoint), "--tokenizer", str(tokenizer_dir),
        "--pairs", str(pairs), "--out", str(tmp_path / "eval" / "turblimp.csv"),
    ])
    assert code == EXIT_FAILURE
    assert capsys.readouterr().err.strip().splitlines()[-1].startswith("error: CheckpointError:")


def test_synth_corpus_tokenizer_chain(tmp_path):
    data, corpus, tokenizer = tmp_path / "data", tmp_path / "corpus", tmp_path / "tokenizer"
    assert dispatch(["--quiet", "synth", "--out", str(data), "--seed", "3", "--docs", "80", "--sentences", "20", "--pairs", "2"]) == EXIT_OK
    manifest = run_json(data)
    assert manifest["stage"] == "synth" and manifest["seed"] == 3
    assert (data / "turblimp" / "pairs.jsonl").exists()

    assert dispatch([
        "--quiet", "corpus", "--input", str(data / "corpus" / "raw.jsonl"), "--out", str(corpus),
        "--seed", "3", "--workers", "1", "--valid-fraction", "0.1",
    ]) == EXIT_OK
    results = run_json(corpus)["results"]
    assert results["train_documents"] + results["valid_documents"] == 80
    assert results["dropped_invalid_encoding"] == 1

    assert dispatch([
        "--quiet", "tokenizer", "--data", str(corpus / "train"), "--vocab-size", "300", "--out", str(tokenizer),
    ]) == EXIT_OK
    tokenizer_run = run_json(tokenizer)
    assert tokenizer_run["results"]["vocab_size"] == 300
    flags = tokenizer_run["config"]["flags"]
    assert flags["data"] == str(corpus / "train") and flags["vocab_size"] == 300
    assert "sample_bytes" in flags
    assert tokenizer_run["results"]["params"]["vocab_size"] == 300
    corpus_run = run_json(corpus)
    assert corpus_run["config"]["flags"]["input"] == [str(data / "corpus" / "raw.jsonl")]
    assert corpus_run["results"]["params"]["valid_fraction"] == 0.1
    assert (tokenizer / "vocab.json").exists() and (tokenizer / "merges.txt").exists()


def test_flags_override_config_file(tmp_path):
    config = tmp_path / "run.yaml"
    config.write_text("seed: 5\n")
    out = tmp_path / "data"
    assert dispatch(["synth", "--config", str(config), "--out", str(out), "--docs", "10", "--sentences", "10", "--pairs", "1"]) == EXIT_OK
    assert run_json(out)["seed"] == 5
    assert dispatch(["synth", "--config", str(config), "--seed", "9", "--out", str(out), "--docs", "10", "--sentences", "10", "--pairs", "1"]) == EXIT_OK
    assert run_json(out)["seed"] == 9


def test_metrics_subcommand(tmp_path):
    gold = tmp_path / "gold.tsv"
    pred = tmp_path / "pred.tsv"
    gold.write_text("id\ttweet\tsubtask_a\n1\ta\tNOT\n2\tb\tNOT\n3\tc\tOFF\n4\td\tOFF\n")
    pred.write_text("id\ttweet\tsubtask_a\n1\ta\tNOT\n2\tb\tOFF\n3\tc\tOFF\n4\td\tOFF\n")
    out = tmp_path / "eval" / "offense.csv"
    assert dispatch(["eval", "metrics", "--task", "offense", "--gold", str(gold), "--pred", str(pred), "--out", str(out)]) == EXIT_OK
    assert out.read_text().splitlines() == ["name,score", "offense,73.33", "NOT,66.67", "OFF,80.00"]
    assert run_json(out.parent)["results"]["primary_score"] == pytest.approx(220 / 3)
