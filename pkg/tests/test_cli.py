"""CLI contract: exit codes, file outputs, end-to-end determinism."""

from __future__ import annotations

import json

import numpy as np
import pytest

from conftest import make_config, make_documents, random_weights

from cusprune import byte_vocab, save_bundle
from cusprune.cli import main


@pytest.fixture
def workspace(tmp_path):
    """Bundle + tagged documents + MCQ set on disk."""
    cfg = make_config(n_layers=2, d_model=4, n_heads=1, head_dim=4, d_ff=96,
                      vocab_size=256, max_seq_len=64)
    weights = random_weights(cfg, seed=0)
    save_bundle(cfg, weights, byte_vocab(), tmp_path / "model")
    rng = np.random.default_rng(0)
    docs = (
        make_documents(rng, "de", "news", "qa", 6, "abcdefgh mn", prefix="d")
        + make_documents(rng, "de", "medical", "qa", 6, "abcdefgh qr", prefix="m")
        + make_documents(rng, "zh", "news", "sum", 6, "stuvwxyz ab", prefix="z")
    )
    lines = [
        json.dumps({"id": d.id, "text": d.text, "language": d.language,
                    "domain": d.domain, "task": d.task})
        for d in docs
    ]
    (tmp_path / "docs.jsonl").write_text("\n".join(lines) + "\n")
    mcq = [{"id": "q1", "prompt": "ab", "options": ["cd", "ef"], "gold": 0}]
    (tmp_path / "mcq.jsonl").write_text("\n".join(json.dumps(i) for i in mcq) + "\n")
    return tmp_path


def run(args):
    return main([str(a) for a in args])


class TestPrunePipeline:
    def test_score_writes_artifacts(self, workspace, capsys):
        code = run(["score", "--model", workspace / "model",
                    "--corpus", workspace / "docs.jsonl", "--dim", "lang=de",
                    "--tau", "60", "--out", workspace / "scores"])
        assert code == 0
        assert (workspace / "scores" / "language=de.impacts.bin").exists()
        setfile = workspace / "scores" / "language=de.irrelevant.txt"
        assert setfile.read_text().startswith("# provenance: ")
        assert "language:de" in capsys.readouterr().out

    def test_prune_apply_inspect(self, workspace, capsys):
        assert run(["prune", "--model", workspace / "model",
                    "--corpus", workspace / "docs.jsonl",
                    "--dim", "lang=de", "--dim", "domain=medical",
                    "--sigma", "0.25", "--out", workspace / "plan.json"]) == 0
        plan = json.loads((workspace / "plan.json").read_text())
        assert 0.245 <= plan["achieved_ratio"] <= 0.255
        assert run(["apply", "--model", workspace / "model",
                    "--plan", workspace / "plan.json",
                    "--out", workspace / "pruned"]) == 0
        assert run(["inspect", workspace / "pruned"]) == 0
        out = capsys.readouterr().out
        dense_params = plan["total_params"]
        assert str(dense_params - plan["removed_params"]) in out

    def test_prune_without_dim_fails(self, workspace, capsys):
        code = run(["prune", "--model", workspace / "model",
                    "--corpus", workspace / "docs.jsonl",
                    "--sigma", "0.25", "--out", workspace / "plan.json"])
        assert code == 1
        assert "dimension required" in capsys.readouterr().err

    def test_fixed_tau_mode(self, workspace):
        assert run(["prune", "--model", workspace / "model",
                    "--corpus", workspace / "docs.jsonl", "--dim", "lang=de",
                    "--tau", "40", "--out", workspace / "plan.json"]) == 0
        plan = json.loads((workspace / "plan.json").read_text())
        assert plan["tau"] == 40.0

    def test_pipeline_deterministic(self, workspace):
        common = ["--model", workspace / "model", "--corpus", workspace / "docs.jsonl",
                  "--dim", "lang=de", "--sigma", "0.2", "--seed", "3"]
        assert run(["prune", *common, "--threads", "1", "--out", workspace / "p1.json"]) == 0
        assert run(["prune", *common, "--threads", "2", "--out", workspace / "p2.json"]) == 0
        assert (workspace / "p1.json").read_bytes() == (workspace / "p2.json").read_bytes()
        assert run(["apply", "--model", workspace / "model", "--plan", workspace / "p1.json",
                    "--out", workspace / "b1"]) == 0
        assert run(["apply", "--model", workspace / "model", "--plan", workspace / "p2.json",
                    "--out", workspace / "b2"]) == 0
        assert (workspace / "b1" / "tensors.bin").read_bytes() == \
            (workspace / "b2" / "tensors.bin").read_bytes()

    def test_multi_corpus_pairing(self, workspace):
        # second --corpus re-points the following --dim
        assert run(["prune", "--model", workspace / "model",
                    "--corpus", workspace / "docs.jsonl", "--dim", "lang=de",
                    "--corpus", workspace / "docs.jsonl", "--dim", "task=sum",
                    "--sigma", "0.1", "--out", workspace / "plan.json"]) == 0
        plan = json.loads((workspace / "plan.json").read_text())
        labels = [d["label"] for d in plan["provenance"]["dimensions"]]
        assert labels == ["language:de", "task:sum"]


class TestEvalBench:
    def _pruned(self, workspace):
        run(["prune", "--model", workspace / "model", "--corpus", workspace / "docs.jsonl",
             "--dim", "lang=de", "--sigma", "0.25", "--out", workspace / "plan.json"])
        run(["apply", "--model", workspace / "model", "--plan", workspace / "plan.json",
             "--out", workspace / "pruned"])

    def test_eval_writes_report_csv_figures(self, workspace):
        self._pruned(workspace)
        code = run(["eval", "--dense", workspace / "model", "--pruned", workspace / "pruned",
                    "--expert-docs", workspace / "docs.jsonl",
                    "--general-docs", workspace / "docs.jsonl",
                    "--mcq", workspace / "mcq.jsonl",
                    "--plan", workspace / "plan.json",
                    "--out", workspace / "report.json"])
        assert code == 0
        report = json.loads((workspace / "report.json").read_text())
        assert {"expert", "general", "mcq:mcq"} <= set(report["datasets"])
        assert report["plan"] == str(workspace / "plan.json")
        assert (workspace / "report.csv").exists()
        assert (workspace / "report_metrics.png").exists()
        assert (workspace / "report_retention.png").exists()

    def test_eval_no_figures_flag(self, workspace):
        self._pruned(workspace)
        assert run(["eval", "--dense", workspace / "model", "--pruned", workspace / "pruned",
                    "--expert-docs", workspace / "docs.jsonl",
                    "--general-docs", workspace / "docs.jsonl",
                    "--no-figures", "--out", workspace / "r2.json"]) == 0
        assert (workspace / "r2.json").exists()
        assert not (workspace / "r2_metrics.png").exists()

    def test_bench_report(self, workspace):
        self._pruned(workspace)
        code = run(["bench", "--dense", workspace / "model", "--pruned", workspace / "pruned",
                    "--docs", workspace / "docs.jsonl", "--reps", "3",
                    "--out", workspace / "bench.json"])
        assert code == 0
        report = json.loads((workspace / "bench.json").read_text())
        assert report["timing"]["speedup"] > 0
        assert (workspace / "bench_speed.png").exists()


class TestErrors:
    def test_unknown_flag_exits_one(self, workspace, capsys):
        assert run(["prune", "--frobnicate"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_missing_model_exits_two(self, workspace):
        assert run(["inspect", workspace / "missing"]) == 2

    def test_bad_log_level(self, workspace, monkeypatch):
        monkeypatch.setenv("CUSPRUNE_LOG", "loud")
        assert run(["inspect", workspace / "model"]) == 1

    def test_log_level_accepted(self, workspace, monkeypatch):
        monkeypatch.setenv("CUSPRUNE_LOG", "debug")
        assert run(["inspect", workspace / "model"]) == 0

    def test_sigma_and_tau_both_missing(self, workspace, capsys):
        assert run(["prune", "--model", workspace / "model",
                    "--corpus", workspace / "docs.jsonl", "--dim", "lang=de",
                    "--out", workspace / "p.json"]) == 1
        assert "--sigma or --tau" in capsys.readouterr().err

    def test_dim_before_corpus_rejected(self, workspace, capsys):
        assert run(["prune", "--model", workspace / "model",
                    "--dim", "lang=de", "--corpus", workspace / "docs.jsonl",
                    "--sigma", "0.2", "--out", workspace / "p.json"]) == 1
        assert "before any --corpus" in capsys.readouterr().err

    def test_no_partial_plan_on_failure(self, workspace):
        run(["prune", "--model", workspace / "model",
             "--corpus", workspace / "docs.jsonl", "--dim", "lang=th",
             "--sigma", "0.2", "--out", workspace / "p.json"])
        assert not (workspace / "p.json").exists()
