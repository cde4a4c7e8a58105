import csv
import json
from collections import Counter

import pytest

from core.cli import EXIT_OK, dispatch
from core.finetune import UPOS, load_dataset
from core.types import TaskKind

pytestmark = pytest.mark.slow


def majority_tag_score(path) -> float:
    counts = Counter(tag for record in load_dataset(path, TaskKind.token_tagging, UPOS) for tag in record.tags)
    return 100.0 * counts.most_common(1)[0][1] / sum(counts.values())


def test_every_stage_end_to_end(tmp_path):
    data, corpus, tokenizer = tmp_path / "data", tmp_path / "corpus", tmp_path / "tokenizer"
    toy, finetune, evaluation, report = tmp_path / "toy", tmp_path / "finetune-pos", tmp_path / "eval", tmp_path / "report"
    stages = [
        ["synth", "--out", str(data), "--seed", "1", "--docs", "1500", "--sentences", "300", "--pairs", "10"],
        [
            "corpus", "--input", str(data / "corpus" / "raw.jsonl"), "--out", str(corpus), "--seed", "1",
            "--shard-bytes", "200000", "--valid-fraction", "0.05",
        ],
        ["tokenizer", "--data", str(corpus / "train"), "--out", str(tokenizer), "--seed", "1", "--vocab-size", "400"],
        [
            "pretrain", "--data", str(corpus / "train"), "--valid", str(corpus / "valid"), "--tokenizer", str(tokenizer),
            "--out", str(toy), "--seed", "1", "--model-preset", "toy", "--schedule-preset", "desk",
            "--total-updates", "200", "--warmup-updates", "20",
        ],
        [
            "finetune", "--task", "pos", "--ckpt", str(toy / "final.ckpt"), "--tokenizer", str(tokenizer),
            "--data", str(data / "tasks" / "pos"), "--out", str(finetune), "--seed", "1",
            "--batch-sizes", "16", "--learning-rates", "5e-4", "--max-epochs", "8", "--name", "toy",
        ],
        [
            "eval", "turblimp", "--ckpt", str(toy / "final.ckpt"), "--tokenizer", str(tokenizer),
            "--pairs", str(data / "turblimp" / "pairs.jsonl"), "--out", str(evaluation / "turblimp.csv"),
            "--seed", "1", "--name", "toy",
        ],
        ["report", "--runs", str(toy), str(finetune), str(evaluation), "--out", str(report)],
    ]
    for argv in stages:
        assert dispatch(["--quiet"] + argv) == EXIT_OK, argv[0]

    for directory in (data, corpus, tokenizer, toy, finetune, evaluation, report):
        assert (directory / "run.json").exists(), directory

    with open(report / "scores.csv", newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    assert len(rows) == 2
    assert all(len(row) == 5 for row in rows)
    assert rows[1][0] == "toy"

    svg = (report / "perplexity-toy.svg").read_text(encoding="utf-8")
    assert svg.count("<polyline") == 2

    results = json.loads((finetune / "run.json").read_text(encoding="utf-8"))["results"]
    assert results["test_score"] > majority_tag_score(data / "tasks" / "pos" / "test.conll")
