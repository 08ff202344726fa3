"""Pipeline tests: ingestion, config validation, end-to-end runs, CLI."""

import json

import numpy as np
import pytest

from mpquant.cli import main as cli_main
from mpquant.model import ModelConfig, TransformerModel, evaluate, gen_classification, train
from mpquant.model_io import load, model_from_container, save
from mpquant.pipeline import (
    ComparisonError,
    ConfigError,
    PipelineError,
    compare,
    comparison_text,
    dataset_from_dict,
    dataset_to_dict,
    ingest_labeled,
    ingest_text,
    load_dataset,
    parse_config,
    plan_from_dict,
    plan_to_dict,
    profile_from_dict,
    profile_to_dict,
    run,
    save_dataset,
)
from mpquant.rng import Rng


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------


class TestIngestText:
    def test_two_bytes_one_pair(self, tmp_path):
        p = tmp_path / "t.txt"
        p.write_bytes(b"ab")
        ds = ingest_text(str(p), seq_len=1, batch_size=4)
        assert ds.n_samples == 1
        assert ds.batches[0].tokens.tolist() == [[ord("a")]]
        assert ds.batches[0].labels.tolist() == [[ord("b")]]

    def test_n_plus_one_bytes_exactly_one_sequence(self, tmp_path):
        p = tmp_path / "t.txt"
        p.write_bytes(b"x" * 9)
        ds = ingest_text(str(p), seq_len=8, batch_size=4)
        assert ds.n_samples == 1

    def test_deterministic(self, tmp_path):
        p = tmp_path / "t.txt"
        p.write_bytes(bytes(range(64)) * 3)
        a = ingest_text(str(p), seq_len=8, batch_size=4)
        b = ingest_text(str(p), seq_len=8, batch_size=4)
        for ba, bb in zip(a.batches, b.batches):
            assert np.array_equal(ba.tokens, bb.tokens)
            assert np.array_equal(ba.labels, bb.labels)

    def test_empty_file_rejected(self, tmp_path):
        p = tmp_path / "t.txt"
        p.write_bytes(b"")
        with pytest.raises(ValueError):
            ingest_text(str(p), seq_len=4, batch_size=4)

    def test_targets_shift_by_one(self, tmp_path):
        p = tmp_path / "t.txt"
        p.write_bytes(b"abcdefghij")
        ds = ingest_text(str(p), seq_len=3, batch_size=8)
        for batch in ds.batches:
            assert np.array_equal(batch.tokens[:, 1:], batch.labels[:, :-1])


class TestIngestLabeled:
    def test_two_valid_lines(self, tmp_path):
        p = tmp_path / "d.tsv"
        p.write_text("1\tgood movie\n0\tbad movie\n")
        ds = ingest_labeled(str(p), seq_len=16, batch_size=8)
        assert ds.n_samples == 2
        assert ds.batches[0].labels.tolist() == [1, 0]

    def test_bad_label_reports_line_number(self, tmp_path):
        p = tmp_path / "d.tsv"
        p.write_text("2\tfoo\n")
        with pytest.raises(ValueError, match="line 1"):
            ingest_labeled(str(p), seq_len=8, batch_size=8)

    def test_missing_tab_reports_line_number(self, tmp_path):
        p = tmp_path / "d.tsv"
        p.write_text("1\tok\nnotab\n")
        with pytest.raises(ValueError, match="line 2"):
            ingest_labeled(str(p), seq_len=8, batch_size=8)

    def test_labels_round_trip(self, tmp_path):
        p = tmp_path / "d.tsv"
        labels = [1, 0, 0, 1, 1, 0]
        p.write_text("".join(f"{y}\ttext number {i}\n" for i, y in enumerate(labels)))
        ds = ingest_labeled(str(p), seq_len=12, batch_size=4)
        parsed = [int(y) for b in ds.batches for y in b.labels]
        assert parsed == labels

    def test_truncation_and_padding(self, tmp_path):
        p = tmp_path / "d.tsv"
        p.write_text("1\t" + "a" * 50 + "\n0\thi\n")
        ds = ingest_labeled(str(p), seq_len=8, batch_size=4)
        toks = ds.batches[0].tokens
        assert toks.shape == (2, 8)
        assert toks[0].tolist() == [ord("a")] * 8        # truncated
        assert toks[1].tolist() == [ord("h"), ord("i")] + [256] * 6  # padded


class TestDatasetSerialization:
    def test_round_trip(self, tmp_path):
        ds = gen_classification(Rng(3), 20, seq_len=6, vocab_size=16, batch_size=8)
        path = tmp_path / "ds.json"
        save_dataset(ds, str(path))
        back = load_dataset(str(path))
        assert back.task == ds.task and back.n_samples == ds.n_samples
        for a, b in zip(ds.batches, back.batches):
            assert np.array_equal(a.tokens, b.tokens)
            assert np.array_equal(a.labels, b.labels)

    def test_unknown_keys_rejected(self):
        d = dataset_to_dict(gen_classification(Rng(3), 8, seq_len=4, vocab_size=16,
                                               batch_size=8))
        d["surprise"] = 1
        with pytest.raises(ConfigError):
            dataset_from_dict(d)


# ---------------------------------------------------------------------------
# config validation (fail-closed)
# ---------------------------------------------------------------------------


def minimal_config(**over):
    cfg = {
        "seed": 7,
        "task": "classification",
        "model": {"train": {"n_layers": 2, "d_model": 16, "n_heads": 2, "d_ff": 32,
                            "vocab_size": 16, "max_seq_len": 8,
                            "epochs": 2, "lr": 0.01}},
        "data": {"generate": {"kind": "classification", "n": 64, "seq_len": 8,
                              "vocab_size": 16, "batch_size": 16}},
        "method": "tdmpq",
        "allocator": {"kind": "kmeans"},
    }
    cfg.update(over)
    return cfg


class TestConfigValidation:
    def test_minimal_config_parses(self):
        cfg = parse_config(minimal_config())
        assert cfg.seed == 7 and cfg.method == "tdmpq"

    def test_seed_mandatory(self):
        c = minimal_config()
        del c["seed"]
        with pytest.raises(ConfigError, match="seed"):
            parse_config(c)

    @pytest.mark.parametrize("mutate", [
        lambda c: c.update(bogus=1),
        lambda c: c["model"]["train"].update(dropout=0.5),
        lambda c: c["data"]["generate"].update(shape="wide"),
        lambda c: c["allocator"].update(extra=2),
        lambda c: c.update(method_params={"unknown_knob": 3}),
    ])
    def test_unknown_keys_rejected_everywhere(self, mutate):
        c = minimal_config()
        mutate(c)
        with pytest.raises(ConfigError):
            parse_config(c)

    def test_unknown_method(self):
        with pytest.raises(ConfigError):
            parse_config(minimal_config(method="magic"))

    def test_uniform_allocator_bits_checked(self):
        with pytest.raises(ConfigError):
            parse_config(minimal_config(allocator={"kind": "uniform", "bits": 12}))

    def test_budgeted_allocator_requires_budget(self):
        with pytest.raises(ConfigError):
            parse_config(minimal_config(allocator={"kind": "budgeted"}))

    def test_model_requires_exactly_one_source(self):
        with pytest.raises(ConfigError):
            parse_config(minimal_config(model={"path": "x", "train": {
                "n_layers": 1, "d_model": 8, "n_heads": 2, "d_ff": 16,
                "vocab_size": 8, "max_seq_len": 4}}))


# ---------------------------------------------------------------------------
# profile / plan JSON
# ---------------------------------------------------------------------------


class TestArtifactSerialization:
    def test_profile_round_trip(self):
        from mpquant.sensitivity import SensitivityProfile
        p = SensitivityProfile("pmpq", np.array([0.1, 0.2]), {"sparsity_levels": [0.5]}, 3)
        back = profile_from_dict(profile_to_dict(p))
        assert back.method == "pmpq"
        assert np.array_equal(back.scores, p.scores)
        assert back.seed == 3

    def test_plan_round_trip(self):
        from mpquant.allocate import PrecisionPlan
        plan = PrecisionPlan([16, 4, 8], "kmeans", "cmpq")
        back = plan_from_dict(plan_to_dict(plan))
        assert back.bits_per_layer == [16, 4, 8]
        assert back.provenance == "kmeans" and back.method == "cmpq"


# ---------------------------------------------------------------------------
# end-to-end runs
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def staged_artifacts(tmp_path_factory):
    """Pre-trained small model plus datasets on disk, for fast run() configs."""
    root = tmp_path_factory.mktemp("staged")
    train_ds = gen_classification(Rng(7).spawn(1), 256, seq_len=8, vocab_size=16,
                                  batch_size=32)
    eval_ds = gen_classification(Rng(7).spawn(2), 128, seq_len=8, vocab_size=16,
                                 batch_size=32)
    cfg = ModelConfig(3, 16, 2, 32, 16, 8, task="classification", n_classes=2)
    model = TransformerModel.init(cfg, Rng(7).spawn(4))
    train(model, train_ds, epochs=6, lr=0.01, rng=Rng(7).spawn(104))
    save(model, root / "model.mpqw")
    save_dataset(train_ds, str(root / "train.json"))
    save_dataset(eval_ds, str(root / "eval.json"))
    return root


def staged_config(root, method="tdmpq", allocator=None, out_dir=None):
    return parse_config({
        "seed": 7,
        "task": "classification",
        "model": {"path": str(root / "model.mpqw")},
        "data": {"path": str(root / "train.json")},
        "eval": {"path": str(root / "eval.json")},
        "method": method,
        "allocator": allocator or {"kind": "kmeans"},
        **({"out_dir": out_dir} if out_dir else {}),
    })


class TestRun:
    def test_uniform_16_drop_below_pinned_threshold(self, staged_artifacts):
        report = run(staged_config(staged_artifacts,
                                   allocator={"kind": "uniform", "bits": 16}))
        assert report.plan == [16, 16, 16]
        assert abs(report.drop) <= 0.01
        assert report.cr == pytest.approx(2.0, abs=0.01)

    def test_report_cross_checks(self, staged_artifacts):
        report = run(staged_config(staged_artifacts, method="pmpq"))
        assert abs(report.fpr_percent - 100.0 * (1.0 - 1.0 / report.cr)) < 1e-9
        assert report.drop == pytest.approx(report.base_metric - report.quant_metric)
        assert len(report.sensitivities) == 3 and len(report.plan) == 3
        assert set(report.segment_stats) == {"first30", "mid30", "rest"}

    def test_same_config_twice_byte_identical_report(self, staged_artifacts):
        a = run(staged_config(staged_artifacts)).to_json()
        b = run(staged_config(staged_artifacts)).to_json()
        assert a.encode() == b.encode()

    def test_written_container_reloads_to_same_metric(self, staged_artifacts, tmp_path):
        out = tmp_path / "out"
        report = run(staged_config(staged_artifacts, method="cmpq", out_dir=str(out)))
        sim = model_from_container(load(out / "quantized.mpqw"))
        eval_ds = load_dataset(str(staged_artifacts / "eval.json"))
        assert evaluate(sim, eval_ds) == pytest.approx(report.quant_metric, abs=1e-6)
        assert (out / "report.json").exists()
        assert (out / "profile.json").exists()
        assert (out / "plan.json").exists()

    def test_report_json_schema_fields(self, staged_artifacts):
        report = run(staged_config(staged_artifacts))
        d = json.loads(report.to_json())
        for key in ("method", "sensitivities", "plan", "m_o_bytes", "m_q_bytes",
                    "cr", "fpr_percent", "base_metric", "quant_metric", "drop",
                    "segment_stats", "config", "toolkit_version"):
            assert key in d, key
        assert set(d["segment_stats"]) == {"first30", "mid30", "rest"}

    def test_budgeted_allocator_via_config(self, staged_artifacts):
        from mpquant.quant import layer_memory_bytes
        model = model_from_container(load(staged_artifacts / "model.mpqw"))
        budget = sum(layer_memory_bytes(model, l, 8) for l in range(3))
        report = run(staged_config(staged_artifacts,
                                   allocator={"kind": "budgeted", "budget_bytes": budget}))
        assert report.allocator == "budgeted"
        assert all(b in (4, 8, 16) for b in report.plan)

    def test_model_vocab_must_cover_dataset(self, tmp_path):
        tsv = tmp_path / "d.tsv"
        tsv.write_text("1\tok\n0\tno\n")
        cfg = parse_config({
            "seed": 1,
            "task": "classification",
            "model": {"train": {"n_layers": 1, "d_model": 8, "n_heads": 2,
                                "d_ff": 16, "vocab_size": 256, "max_seq_len": 8,
                                "epochs": 1, "lr": 0.01}},
            "data": {"tsv": {"path": str(tsv), "seq_len": 8, "batch_size": 2}},
            "method": "tdmpq",
        })
        with pytest.raises(PipelineError, match="vocab_size"):
            run(cfg)  # byte datasets carry the pad id 256, needing vocab 257

    def test_referenced_paths_checked_at_run_start(self):
        cfg = parse_config({
            "seed": 1,
            "model": {"path": "/nonexistent/model.mpqw"},
            "data": {"path": "/nonexistent/data.json"},
            "method": "cmpq",
        })
        with pytest.raises(PipelineError, match="^config: referenced path"):
            run(cfg)

    def test_stage_errors_are_tagged(self, staged_artifacts):
        cfg = staged_config(staged_artifacts)
        cfg.method = None  # passes parsing shape, fails in the analyze stage
        with pytest.raises(PipelineError, match="^analyze:"):
            run(cfg)

    def test_lm_task_reports_perplexity_drop(self, tmp_path):
        cfg = parse_config({
            "seed": 11,
            "task": "lm",
            "model": {"train": {"n_layers": 2, "d_model": 16, "n_heads": 2,
                                "d_ff": 32, "vocab_size": 8, "max_seq_len": 16,
                                "epochs": 4, "lr": 0.01}},
            "data": {"generate": {"kind": "lm", "n_tokens": 2000, "vocab_size": 8,
                                  "seq_len": 16, "batch_size": 16}},
            "method": "pmpq",
            "allocator": {"kind": "kmeans"},
        })
        report = run(cfg)
        assert report.metric == "perplexity"
        assert report.base_metric >= 1.0 and report.quant_metric >= 1.0
        assert report.drop == pytest.approx(report.quant_metric - report.base_metric)
        assert report.cr >= 1.0

    def test_text_ingestion_end_to_end(self, tmp_path):
        text = tmp_path / "corpus.txt"
        text.write_bytes(b"the quick brown fox jumps over the lazy dog. " * 40)
        cfg = parse_config({
            "seed": 2,
            "task": "lm",
            "model": {"train": {"n_layers": 2, "d_model": 16, "n_heads": 2,
                                "d_ff": 32, "vocab_size": 257, "max_seq_len": 16,
                                "epochs": 2, "lr": 0.01}},
            "data": {"text": {"path": str(text), "seq_len": 16, "batch_size": 16}},
            "method": "tdmpq",
            "allocator": {"kind": "kmeans"},
        })
        report = run(cfg)
        assert report.metric == "perplexity"
        assert len(report.plan) == 2


class TestCompare:
    def test_config_with_itself_gives_identical_rows(self, staged_artifacts):
        result = compare([staged_config(staged_artifacts),
                          staged_config(staged_artifacts)])
        assert result["rows"][0] == result["rows"][1]

    def test_rows_sorted_by_method_then_allocator(self, staged_artifacts):
        result = compare([
            staged_config(staged_artifacts, method="tdmpq"),
            staged_config(staged_artifacts, method="cmpq",
                          allocator={"kind": "uniform", "bits": 4}),
            staged_config(staged_artifacts, method="cmpq"),
        ])
        keys = [(r["method"], r["allocator"]) for r in result["rows"]]
        assert keys == sorted(keys)

    def test_all_rows_compress(self, staged_artifacts):
        result = compare([staged_config(staged_artifacts, method=m)
                          for m in ("cmpq", "pmpq", "tdmpq")])
        assert all(r["cr"] >= 1.0 for r in result["rows"])

    def test_mismatched_data_rejected(self, staged_artifacts):
        a = staged_config(staged_artifacts)
        b = staged_config(staged_artifacts)
        b.data = {"path": "elsewhere.json"}
        with pytest.raises(ComparisonError):
            compare([a, b])

    def test_text_table_renders(self, staged_artifacts):
        result = compare([staged_config(staged_artifacts)])
        text = comparison_text(result)
        assert "method" in text and "tdmpq" in text


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------


class TestCli:
    def write_config(self, tmp_path, cfg):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg))
        return str(path)

    def test_gen_data_verb(self, tmp_path, capsys):
        cfg = {
            "seed": 3,
            "data": {"generate": {"kind": "classification", "n": 32, "seq_len": 6,
                                  "vocab_size": 16, "batch_size": 8}},
            "out_dir": str(tmp_path / "out"),
        }
        assert cli_main(["gen-data", self.write_config(tmp_path, cfg)]) == 0
        ds = load_dataset(str(tmp_path / "out" / "dataset.json"))
        assert ds.n_samples == 32

    def test_run_verb_and_seed_override(self, tmp_path, staged_artifacts):
        cfg = {
            "seed": 7,
            "task": "classification",
            "model": {"path": str(staged_artifacts / "model.mpqw")},
            "data": {"path": str(staged_artifacts / "train.json")},
            "eval": {"path": str(staged_artifacts / "eval.json")},
            "method": "tdmpq",
            "allocator": {"kind": "kmeans"},
        }
        path = self.write_config(tmp_path, cfg)
        out = str(tmp_path / "out")
        assert cli_main(["run", path, "--out", out]) == 0
        report = json.loads((tmp_path / "out" / "report.json").read_text())
        assert report["method"] == "tdmpq"
        assert report["config"]["out_dir"] == out

    def test_failure_exit_code_and_stderr(self, tmp_path, capsys):
        cfg = {"seed": 1, "data": {"path": "/missing.json"}, "method": "cmpq"}
        code = cli_main(["run", self.write_config(tmp_path, cfg)])
        assert code == 1
        assert "run:" in capsys.readouterr().err

    def test_bad_config_fails_closed(self, tmp_path, capsys):
        code = cli_main(["run", self.write_config(tmp_path, {"seed": 1, "oops": 2})])
        assert code == 1
        assert "unknown keys" in capsys.readouterr().err

    def test_compare_verb(self, tmp_path, staged_artifacts, capsys):
        base = {
            "seed": 7,
            "task": "classification",
            "model": {"path": str(staged_artifacts / "model.mpqw")},
            "data": {"path": str(staged_artifacts / "train.json")},
            "eval": {"path": str(staged_artifacts / "eval.json")},
            "allocator": {"kind": "kmeans"},
        }
        cfg = {"runs": [{**base, "method": m} for m in ("pmpq", "tdmpq")]}
        path = self.write_config(tmp_path, cfg)
        assert cli_main(["compare", path, "--out", str(tmp_path / "cmp")]) == 0
        table = capsys.readouterr().out
        assert "pmpq" in table and "tdmpq" in table
        result = json.loads((tmp_path / "cmp" / "comparison.json").read_text())
        assert [r["method"] for r in result["rows"]] == ["pmpq", "tdmpq"]

    def test_stagewise_flow_through_all_verbs(self, tmp_path):
        out = str(tmp_path / "out")
        base_cfg = {
            "seed": 5,
            "task": "classification",
            "model": {"train": {"n_layers": 2, "d_model": 16, "n_heads": 2,
                                "d_ff": 32, "vocab_size": 16, "max_seq_len": 8,
                                "epochs": 2, "lr": 0.01}},
            "data": {"generate": {"kind": "classification", "n": 64, "seq_len": 8,
                                  "vocab_size": 16, "batch_size": 16}},
            "out_dir": out,
        }

        def write(name, **over):
            cfg = {**base_cfg, **over}
            path = tmp_path / f"{name}.json"
            path.write_text(json.dumps(cfg))
            return str(path)

        assert cli_main(["train", write("train")]) == 0
        model_section = {"path": out + "/model.mpqw"}

        assert cli_main(["analyze", write("an", model=model_section,
                                          method="tdmpq")]) == 0
        prof = json.loads((tmp_path / "out" / "profile.json").read_text())
        assert prof["method"] == "tdmpq" and len(prof["scores"]) == 2

        assert cli_main(["plan", write("plan", model=model_section,
                                       profile_path=out + "/profile.json")]) == 0
        plan = json.loads((tmp_path / "out" / "plan.json").read_text())
        assert len(plan["bits_per_layer"]) == 2

        assert cli_main(["quantize", write("quant", model=model_section,
                                           plan_path=out + "/plan.json")]) == 0
        mem = json.loads((tmp_path / "out" / "memory.json").read_text())
        assert mem["cr"] >= 1.0
        assert abs(mem["fpr_percent"] - 100.0 * (1 - 1 / mem["cr"])) < 1e-9

        assert cli_main(["eval", write("eval", model=model_section)]) == 0
        quantized_section = {"path": out + "/quantized.mpqw"}
        assert cli_main(["eval", write("eval_q", model=quantized_section)]) == 0
