"""Evaluation records, report rendering, and CLI smoke tests."""

import csv
import json
from pathlib import Path

import pytest
import torch
from click.testing import CliRunner

from robustmark.cli import main
from robustmark.errors import ConfigError
from robustmark.evaluate import (ExperimentRecord, RECORD_COLUMNS,
                                 read_records, run_evaluation, write_records)
from robustmark.models import save_checkpoint
from robustmark.report import aggregate, report


@pytest.fixture(scope="module")
def records(bundle0, small_corpus, cfg):
    return run_evaluation(bundle0, small_corpus,
                          ["clean", "jpeg", "gaussian_noise"],
                          cfg["attacks"], run_id="t", model_tag="stage0",
                          seed=1)


class TestRecords:
    def test_one_record_per_image_attack(self, records, small_corpus):
        assert len(records) == len(small_corpus) * 3
        assert {r.attack_id for r in records} == {"clean", "jpeg",
                                                  "gaussian_noise"}

    def test_csv_round_trip(self, records, tmp_path):
        p = write_records(records, tmp_path / "r.csv")
        back = read_records(p)
        assert back == records
        with open(p) as f:
            assert next(csv.reader(f)) == RECORD_COLUMNS

    def test_unknown_attack_id_rejected(self, bundle0, small_corpus, cfg):
        with pytest.raises(ConfigError):
            run_evaluation(bundle0, small_corpus, ["nonsense"],
                           cfg["attacks"])

    def test_deterministic(self, bundle0, small_corpus, cfg, records):
        again = run_evaluation(bundle0, small_corpus,
                               ["clean", "jpeg", "gaussian_noise"],
                               cfg["attacks"], run_id="t",
                               model_tag="stage0", seed=1)
        for a, b in zip(records, again):
            assert a.bit_accuracy == b.bit_accuracy
            assert a.psnr == b.psnr


class TestReport:
    def test_aggregate_and_render(self, records, tmp_path):
        agg = aggregate(records)
        assert ("stage0", "clean") in agg
        p = write_records(records, tmp_path / "records.csv")
        outputs = report(tmp_path)
        assert outputs and all(Path(o).exists() for o in outputs)


class TestCli:
    def test_end_to_end_smoke(self, tmp_path, monkeypatch):
        monkeypatch.setenv("ROBUSTMARK_RUNS", str(tmp_path / "runs"))
        runner = CliRunner()
        corpus_dir = tmp_path / "corpus"
        r = runner.invoke(main, ["gen-corpus", "--out", str(corpus_dir),
                                 "--set", "corpus.count=8"])
        assert r.exit_code == 0, r.output
        assert len(list(corpus_dir.glob("*.png"))) == 8

        model = tmp_path / "b0.ckpt"
        r = runner.invoke(main, ["pretrain", "--corpus", str(corpus_dir),
                                 "--out", str(model)])
        assert r.exit_code == 0, r.output
        assert model.exists()

        r = runner.invoke(main, ["evaluate", "--corpus", str(corpus_dir),
                                 "--model", str(model),
                                 "--attacks", "clean,jpeg",
                                 "--model-tag", "stage0"])
        assert r.exit_code == 0, r.output
        run_dirs = list((tmp_path / "runs").iterdir())
        assert run_dirs
        csvs = list((tmp_path / "runs").rglob("records_*.csv"))
        assert csvs
        prov = list((tmp_path / "runs").rglob("provenance.json"))
        assert prov
        meta = json.loads(prov[0].read_text())
        assert "seed" in meta and "checkpoints" in meta

        r = runner.invoke(main, ["report", "--run-dir",
                                 str(csvs[0].parent)])
        assert r.exit_code == 0, r.output

    def test_unknown_override_rejected(self, tmp_path):
        runner = CliRunner()
        r = runner.invoke(main, ["gen-corpus", "--out", str(tmp_path / "c"),
                                 "--set", "corpus.bogus=1"])
        assert r.exit_code != 0
