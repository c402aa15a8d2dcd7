import json
from dataclasses import replace

import numpy as np
import pytest

from fwens import __version__
from fwens.errors import ConfigError, DataError
from fwens.experiment import (MANIFEST_TEXT, DataConfig, FeatureRow, RunConfig, StageFailed,
                              build_feature_rows, detect, entropy_report, exact_match,
                              label_generation, make_datasets, read_datasets, read_feature_dump,
                              run_experiment, token_f1, write_feature_dump)
from fwens.tasks import IDK

SMOKE_DATA = DataConfig(n_pretrain=1600, n_finetune=320, n_eval=200, n_heldout=60)
SMOKE_MODEL = {"d_model": 32, "n_heads": 2, "n_layers": 1, "max_seq_len": 40}


def smoke_config(out, **kw):
    return RunConfig(**{"data": SMOKE_DATA, "model": SMOKE_MODEL, "out_dir": str(out), **kw})


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    cfg = smoke_config(tmp_path_factory.mktemp("run") / "faith")
    return cfg, run_experiment(cfg)


class TestMetrics:
    def test_exact_match(self):
        assert exact_match("v7", "v7") == 1
        assert exact_match("v7 x", "v7") == 0
        assert exact_match(["v7"], ("v7",)) == 1

    def test_f1(self):
        assert token_f1(["a", "b"], ["b", "c"]) == pytest.approx(0.5)
        assert token_f1("a b", "a b") == 1.0
        assert token_f1("a", "b") == 0.0

    def test_f1_multiset(self):
        # precision 1/2, recall 1
        assert token_f1(["a", "a"], ["a"]) == pytest.approx(2 / 3)


class TestConfig:
    def test_json_roundtrip(self, tmp_path):
        cfg = smoke_config(tmp_path, experiment="ood", seed=3)
        (tmp_path / "c.json").write_text(cfg.to_json())
        assert RunConfig.load(tmp_path / "c.json") == cfg

    def test_pretrain_fraction_resolved(self):
        assert RunConfig().data.pretrain_unanswerable_frac == 0.0
        assert RunConfig(experiment="ood").data.pretrain_unanswerable_frac == 0.1

    def test_invalid(self):
        with pytest.raises(ConfigError):
            RunConfig(experiment="squad")
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"bogus": 1})

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            RunConfig.load(tmp_path / "nope.json")


class TestDatasets:
    def test_roles(self):
        ds = make_datasets(smoke_config("x"))
        assert set(ds) == {"pretrain", "finetune", "eval", "heldout"}
        assert all(r.answerable for r in ds["pretrain"])
        assert len(ds["eval"]) == 200 and not any(r.answerable for r in ds["eval"])

    def test_ood_finetune_answerable_only(self):
        ds = make_datasets(smoke_config("x", experiment="ood"))
        assert all(r.answerable for r in ds["finetune"])
        assert any(not r.answerable for r in ds["pretrain"])

    def test_factual(self):
        ds = make_datasets(smoke_config("x", experiment="factual"))
        assert len(ds["eval"]) == 200 and hasattr(ds["eval"][0], "options")


class TestFeatureRows:
    def test_labels_and_exclusion(self):
        ds = make_datasets(smoke_config("x"))
        recs = [ds["eval"][0], ds["heldout"][next(i for i, r in enumerate(ds["heldout"]) if r.answerable)]]
        gens = [{"id": 0, "answer": [IDK], "triples": [[0.1, 0.1, 0.0]]},
                {"id": 1, "answer": ["v1"], "triples": [[0.2, 0.1, 0.1]]}]
        rows = build_feature_rows("faithfulness", recs, gens)
        assert [(r.id, r.label) for r in rows] == [(0, 0)]

    def test_length_mismatch(self):
        with pytest.raises(DataError):
            build_feature_rows("faithfulness", [], [{"id": 0}])

    def test_dump_roundtrip(self, tmp_path, rng):
        rows = [FeatureRow(i, rng.random(4), i % 2, ["v1", "EOA"][: 1 + i % 2], list(rng.random(3))) for i in range(5)]
        write_feature_dump(tmp_path / "f.tsv", rows)
        back = read_feature_dump(tmp_path / "f.tsv")
        for a, b in zip(rows, back):
            np.testing.assert_array_equal(a.features, b.features)
            assert (a.id, a.label, a.answer, a.entropies) == (b.id, b.label, b.answer, b.entropies)

    def test_bad_dump(self, tmp_path):
        (tmp_path / "f.tsv").write_text("a\tb\n")
        with pytest.raises(DataError):
            read_feature_dump(tmp_path / "f.tsv")

    def test_entropy_report_format(self):
        rows = [FeatureRow(0, np.array([2.02, 0.03, 0.373, 0.0]), 1, ["v3"], [2.02, 0.03, 0.56, 0, 0, 0, 0]),
                FeatureRow(1, np.array([0.18, 0.0, 0.038, 0.0]), 0, [IDK], [0.18, 0, 0.01, 0, 0])]
        text = entropy_report(rows)
        assert "[2.02, 0.03, 0.56, 0.00, 0.00, 0.00, 0.00]" in text
        assert "first-token entropy: 2.02   average entropy: 0.37" in text
        assert "first-token entropy: 0.18   average entropy: 0.04" in text

    def test_detect_counts(self, rng):
        rows = [FeatureRow(i, rng.random(4) + (i % 3 == 0), int(i % 3 == 0), [], []) for i in range(100)]
        out = detect(rows)
        assert (out["n_train"], out["n_test"]) == (80, 20)
        assert out["top1_accuracy"] >= out["majority_baseline"]


class TestRun:
    def test_artefacts(self, smoke_run):
        cfg, report = smoke_run
        out = report.out_dir
        for name in ("run_config.json", "MANIFEST", "metrics.jsonl", "generations.jsonl", "features.tsv",
                     "classifiers.txt", "classifiers.jsonl", "predictive.txt", "nll.txt", "nll.jsonl",
                     "entropy_report.txt", "checkpoints/base.fweb", "checkpoints/ensemble.fweb",
                     "data/eval.jsonl", "data/vocab.json"):
            assert (out / name).exists(), name
        assert not (out / "FAILED").exists()
        assert MANIFEST_TEXT.strip() in (out / "MANIFEST").read_text()

    def test_config_embedded(self, smoke_run):
        cfg, report = smoke_run
        saved = json.loads((report.out_dir / "run_config.json").read_text())
        assert saved["code_version"] == __version__
        assert RunConfig.load(report.out_dir / "run_config.json") == cfg
        for line in (report.out_dir / "classifiers.jsonl").read_text().splitlines():
            assert "run_config" in json.loads(line) or "experiment" in json.loads(line)

    def test_labels_rederivable(self, smoke_run):
        _, report = smoke_run
        ds = read_datasets(report.out_dir / "data")
        gens = [json.loads(l) for l in (report.out_dir / "generations.jsonl").read_text().splitlines()]
        rows = read_feature_dump(report.out_dir / "features.tsv")
        stored = {r.id: r.label for r in rows}
        for rec, g in zip(ds["eval"], gens):
            assert label_generation("faithfulness", rec, g["answer"]) == stored[g["id"]]

    def test_tables(self, smoke_run):
        _, report = smoke_run
        t = report.classifiers["faithfulness"]
        assert t["n_train"] + t["n_test"] == 200
        assert "SVC" in (report.out_dir / "classifiers.txt").read_text()
        assert set(report.predictive) == {"exact_match", "f1", "n"}
        assert report.nll["base"] > 0 and report.nll["ensemble"] > 0

    def test_failed_marker(self, tmp_path):
        cfg = smoke_config(tmp_path / "bad", base_checkpoint=str(tmp_path / "missing.fweb"))
        with pytest.raises(Exception):
            run_experiment(cfg)
        assert (tmp_path / "bad" / "FAILED").read_text().startswith("stage: pretrain")
        assert (tmp_path / "bad" / "data" / "eval.jsonl").exists()

    def test_stage_failed_exit_code(self, tmp_path):
        cfg = smoke_config(tmp_path / "tiny", data=replace(SMOKE_DATA, n_eval=5))
        with pytest.raises(StageFailed) as info:
            run_experiment(cfg)
        assert info.value.stage == "detect" and info.value.exit_code == 3
