"""End-to-end CLI smoke tests via click's test runner."""

from __future__ import annotations

import json

import pytest
from click.testing import CliRunner

from sapt.cli import main


@pytest.fixture
def runner():
    return CliRunner()


def invoke(runner, args):
    result = runner.invoke(main, args, catch_exceptions=False)
    assert result.exit_code == 0, result.output
    return result


def test_gen_corpus_and_probe_flow(runner, tmp_path):
    corpus = tmp_path / "corpus.jsonl"
    out = invoke(runner, [
        "gen-corpus", "--out", str(corpus), "--n", "8", "--turns", "4", "8",
        "--informative-fraction", "0.4", "--seed", "3",
    ])
    assert "wrote 8 dialogues" in out.output
    assert len(corpus.read_text().splitlines()) == 8

    scores = tmp_path / "scores.jsonl"
    figure = tmp_path / "scores.png"
    out = invoke(runner, [
        "probe", "score", "--corpus", str(corpus), "--backend", "rule_dst",
        "--out", str(scores), "--figure", str(figure),
    ])
    assert "median=" in out.output
    assert figure.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    skeletons = tmp_path / "skeletons.jsonl"
    out = invoke(runner, [
        "probe", "extract", "--corpus", str(corpus), "--scores", str(scores),
        "--out", str(skeletons),
    ])
    assert "extracted" in out.output

    random_out = tmp_path / "random.jsonl"
    out = invoke(runner, [
        "probe", "random", "--corpus", str(corpus), "--seed", "1",
        "--out", str(random_out),
    ])
    assert "random skeleton turns" in out.output


def write_config(tmp_path, **overrides) -> str:
    from sapt import synthetic
    from sapt.dialogue import write_corpus

    paths = {}
    for name, n, seed in [("src", 6, 1), ("tgt", 5, 2), ("tst", 4, 3)]:
        records = synthetic.generate_corpus(synthetic.GenConfig(
            n_dialogues=n, turns_range=(2, 4), informative_fraction=0.4,
            seed=seed, id_prefix=name,
        ))
        paths[name] = str(tmp_path / f"{name}.jsonl")
        write_corpus(records, paths[name])
    cfg = {
        "variant": "spot",
        "probe_backend": "rule_dst",
        "fewshot_k": 3,
        "d": 8, "h": 12, "prompt_len": 2, "max_len": 8,
        "source_corpus": paths["src"],
        "target_corpus": paths["tgt"],
        "test_corpus": paths["tst"],
        "train": {"lr0": 0.1, "epochs": 1, "batch": 4},
    }
    cfg.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def test_run_eval_compare_report(runner, tmp_path):
    config = write_config(tmp_path, run_id="cli-run")
    runs = tmp_path / "runs"
    out = invoke(runner, ["run", "--config", config, "--out", str(runs)])
    assert "cli-run" in out.output

    cfg = json.loads(open(config).read())
    out = invoke(runner, [
        "eval", "--run", str(runs / "cli-run"), "--test", cfg["test_corpus"],
    ])
    assert "R-L=" in out.output

    out = invoke(runner, [
        "compare", "--config", config, "--out", str(runs),
        "--variants", "prompt_tuning,spot", "--seeds", "2",
    ])
    assert "report written" in out.output
    for name in ("report.tsv", "report.json", "report.png"):
        assert (runs / name).exists()

    rerun = tmp_path / "rerender"
    out = invoke(runner, [
        "report", "--rows", str(runs / "report.json"), "--out", str(rerun),
    ])
    assert (rerun / "report.png").exists()


def test_compare_rejects_unknown_variant(runner, tmp_path):
    config = write_config(tmp_path)
    result = runner.invoke(main, [
        "compare", "--config", config, "--variants", "nonsense",
    ])
    assert result.exit_code != 0
