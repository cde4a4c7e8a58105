import json
import re
import time

import pytest

from core.errors import ConfigurationError
from core.report import (
    RUN_MANIFEST,
    collect_runs,
    load_run_manifest,
    read_perplexity_csv,
    render_perplexity_svg,
    report,
    write_perplexity_csv,
    write_run_manifest,
)
from core.types import PHENOMENA, PerplexityLog
from core.utils import format_hours_minutes, round_half_up


def finetune_run(root, task, score, seconds, model="toy"):
    results = {"task": task, "test_score": score, "batch_size": 16, "learning_rate": 2e-5, "grid_seconds": seconds}
    return write_run_manifest(root / task, "finetune", {}, 1, time.time(), results, model=model).parent


def pretrain_run(root, log, model="toy"):
    directory = root / "pretrain"
    write_perplexity_csv(log, directory)
    write_run_manifest(directory, "pretrain", {}, 1, time.time(), {"vocab_size": 512, "parameters": 12345}, model=model)
    return directory


def turblimp_run(root, model="toy"):
    phenomena = {slug: 80.0 + i for i, slug in enumerate(PHENOMENA)}
    results = {"primary_score": sum(phenomena.values()) / len(phenomena), "phenomena": phenomena}
    return write_run_manifest(root / "turblimp", "eval", {}, 1, time.time(), results, model=model).parent


def sample_log(n_train=100, n_valid=5):
    log = PerplexityLog()
    for step in range(1, n_train + 1):
        log.add_train(step, 500.0 / step ** 0.5)
    for epoch in range(n_valid):
        log.add_valid(epoch, 400.0 / (epoch + 1))
    return log


def test_round_half_up():
    assert round_half_up(66.665) == 66.67
    assert round_half_up(2.675) == 2.68
    assert round_half_up(73.3333) == 73.33
    assert format_hours_minutes(3 * 3600 + 25 * 60) == "3:25"


def test_manifest_records_versions_and_results(tmp_path):
    started = time.time()
    path = write_run_manifest(tmp_path, "tokenizer", {"vocab_size": 512}, 7, started, {"entries": 512})
    manifest = json.loads(path.read_text())
    assert path.name == RUN_MANIFEST
    assert manifest["seed"] == 7 and manifest["results"] == {"entries": 512}
    assert set(manifest["versions"]) >= {"python", "torch", "numpy", "transformers"}
    assert manifest["timings"]["seconds"] >= 0
    assert load_run_manifest(tmp_path)["stage"] == "tokenizer"


def test_score_table_has_one_row_per_model(tmp_path):
    runs = [
        finetune_run(tmp_path / "a", "pos", 95.125, 3600),
        finetune_run(tmp_path / "b", "ner", 90.5, 1800),
        finetune_run(tmp_path / "c", "offense", 80.0, 600),
        turblimp_run(tmp_path / "d"),
    ]
    result = report(runs, tmp_path / "report")
    rows = (tmp_path / "report" / "scores.csv").read_text().splitlines()
    assert rows[0] == "Model,PoS,NER,Offense,TurBLiMP AVG"
    assert rows[1] == "toy,95.13,90.50,80.00,87.50"
    assert len(rows) == 2
    assert not result.warnings


def test_phenomenon_time_and_hyperparameter_tables(tmp_path):
    runs = [finetune_run(tmp_path, "pos", 95.0, 3600 + 25 * 60), finetune_run(tmp_path, "ner", 90.0, 600), turblimp_run(tmp_path)]
    report(runs, tmp_path / "report")
    turblimp = (tmp_path / "report" / "turblimp.csv").read_text().splitlines()
    assert turblimp[0].split(",")[1:] == list(PHENOMENA.values()) + ["AVG"]
    assert turblimp[1].split(",")[1] == "80.00" and turblimp[1].split(",")[-1] == "87.50"

    times = (tmp_path / "report" / "computation_time.csv").read_text().splitlines()
    assert times[1:] == ["toy,NER,0:10", "toy,PoS,1:25", "toy,Total,1:35"]
    hyper = (tmp_path / "report" / "best_hyperparameters.csv").read_text().splitlines()
    assert hyper[1] == "toy,NER,16,2e-05"


def test_report_is_byte_identical_across_runs(tmp_path):
    runs = [finetune_run(tmp_path, "pos", 95.0, 60), pretrain_run(tmp_path, sample_log())]
    first = report(runs, tmp_path / "one")
    second = report(runs, tmp_path / "two")
    assert [p.name for p in first.files] == [p.name for p in second.files]
    for a, b in zip(first.files, second.files):
        assert a.read_bytes() == b.read_bytes(), a.name


def test_perplexity_chart_has_one_vertex_per_point(tmp_path):
    svg = render_perplexity_svg(sample_log(100, 5))
    polylines = re.findall(r'points="([^"]*)"', svg)
    assert [len(p.split()) for p in polylines] == [100, 5]
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")

    directory = pretrain_run(tmp_path, sample_log(100, 5))
    result = report([directory], tmp_path / "report")
    assert tmp_path / "report" / "perplexity-toy.svg" in result.files
    sizes = (tmp_path / "report" / "model_sizes.csv").read_text().splitlines()
    assert sizes == ["Model,Vocab Size,Parameters", "toy,512,12345"]


def test_perplexity_csv_roundtrip(tmp_path):
    log = sample_log(10, 3)
    write_perplexity_csv(log, tmp_path)
    restored = read_perplexity_csv(tmp_path)
    assert [s for s, _ in restored.train_points] == list(range(1, 11))
    assert restored.valid_points[2][1] == pytest.approx(400.0 / 3, abs=1e-6)


def test_corrupt_manifest_is_warned_not_fatal(tmp_path):
    good = finetune_run(tmp_path, "pos", 95.0, 60)
    broken = tmp_path / "broken"
    broken.mkdir()
    (broken / RUN_MANIFEST).write_text("{not json")
    incomplete = write_run_manifest(tmp_path / "incomplete", "finetune", {}, 1, time.time(), {"task": "ner"}).parent

    models, warnings = collect_runs([good, broken, incomplete])
    assert len(warnings) == 2
    assert models["toy"].scores == {"pos": 95.0}
    result = report([good, broken], tmp_path / "report")
    assert len(result.warnings) == 1
    assert (tmp_path / "report" / "scores.csv").exists()


def test_missing_manifest(tmp_path):
    with pytest.raises(ConfigurationError):
        load_run_manifest(tmp_path)
