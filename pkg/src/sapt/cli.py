"""Command-line interface: corpus generation, probing, runs, and reports."""

from __future__ import annotations

import dataclasses
import json
import sys
from pathlib import Path

import click

from sapt import probing, synthetic
from sapt.backends import make_backend
from sapt.dialogue import TargetKind, load_corpus, write_corpus
from sapt.pipeline import (
    VARIANTS,
    PipelineConfig,
    RunManifest,
    evaluate_run,
    run_pipeline,
)
from sapt.report import compare, emit_report, render_score_histogram


@click.group()
def main():
    """Skeleton-assisted prompt transfer pipeline."""


@main.command("gen-corpus")
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.option("--n", "n_dialogues", type=int, default=20, show_default=True)
@click.option("--turns", nargs=2, type=int, default=(4, 10), show_default=True)
@click.option("--informative-fraction", type=float, default=0.4, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--allow-overwrite", is_flag=True, default=False)
@click.option("--id-prefix", default="dlg", show_default=True)
def gen_corpus(out, n_dialogues, turns, informative_fraction, seed, allow_overwrite, id_prefix):
    """Generate a synthetic dialogue corpus file."""
    cfg = synthetic.GenConfig(
        n_dialogues=n_dialogues,
        turns_range=tuple(turns),
        informative_fraction=informative_fraction,
        seed=seed,
        allow_overwrite=allow_overwrite,
        id_prefix=id_prefix,
    )
    records = synthetic.generate_corpus(cfg)
    write_corpus(records, out)
    click.echo(f"wrote {len(records)} dialogues to {out}")


def _backend_options(fn):
    fn = click.option("--backend", type=click.Choice(["echo", "rule_dst", "remote", "learner"]),
                      default="rule_dst", show_default=True)(fn)
    fn = click.option("--endpoint", default=None, help="remote backend URL")(fn)
    fn = click.option("--checkpoint", default=None, help="learner checkpoint path")(fn)
    fn = click.option("--cache", "cache_path", default=None, help="response cache file")(fn)
    return fn


@main.group()
def probe():
    """Perturbation probing and skeleton extraction."""


@probe.command("score")
@click.option("--corpus", "corpus_path", required=True)
@click.option("--kind", type=click.Choice(["DST", "SUMMARY"]), default="DST", show_default=True)
@click.option("--sim", type=click.Choice(["rouge-1", "rouge-2", "rouge-l"]),
              default="rouge-l", show_default=True)
@click.option("--out", required=True, help="score table output path")
@click.option("--figure", default=None, help="optional score-histogram PNG")
@_backend_options
def probe_score(corpus_path, kind, sim, out, figure, backend, endpoint, checkpoint, cache_path):
    """Score every (dialogue, turn) pair by leave-one-turn-out similarity."""
    corpus = load_corpus(corpus_path, TargetKind(kind))
    b = make_backend(backend, endpoint=endpoint, checkpoint=checkpoint, cache_path=cache_path)
    table = probing.score_corpus(corpus, b, sim=sim)
    probing.write_score_table(table, out)
    if figure:
        render_score_histogram([s.score for s in table.scores], table.median, figure)
    click.echo(f"scored {len(table.scores)} turns; median={table.median:.6f}")


@probe.command("extract")
@click.option("--corpus", "corpus_path", required=True)
@click.option("--kind", type=click.Choice(["DST", "SUMMARY"]), default="DST", show_default=True)
@click.option("--scores", "scores_path", required=True)
@click.option("--out", required=True, help="skeleton set output path")
@click.option("--min-one-turn", is_flag=True, default=False,
              help="force the lowest-scoring turn into empty skeletons")
def probe_extract(corpus_path, kind, scores_path, out, min_one_turn):
    """Extract skeletons from a persisted score table."""
    corpus = load_corpus(corpus_path, TargetKind(kind))
    table = probing.read_score_table(scores_path)
    skeletons = probing.extract_skeletons(table, corpus, min_one_turn=min_one_turn)
    probing.write_skeleton_set(skeletons, out)
    total = sum(len(s) for s in skeletons.values())
    click.echo(f"extracted {total} skeleton turns over {len(skeletons)} dialogues")


@probe.command("random")
@click.option("--corpus", "corpus_path", required=True)
@click.option("--kind", type=click.Choice(["DST", "SUMMARY"]), default="DST", show_default=True)
@click.option("--seed", type=int, required=True)
@click.option("--out", required=True)
def probe_random(corpus_path, kind, seed, out):
    """Random-skeleton baseline: half of all turns, at least one per dialogue."""
    corpus = load_corpus(corpus_path, TargetKind(kind))
    skeletons = probing.random_skeletons(corpus, seed)
    probing.write_skeleton_set(skeletons, out)
    total = sum(len(s) for s in skeletons.values())
    click.echo(f"selected {total} random skeleton turns")


def _load_config(path: str) -> PipelineConfig:
    with open(path, encoding="utf-8") as fh:
        return PipelineConfig.from_dict(json.load(fh))


@main.command("run")
@click.option("--config", "config_path", required=True, help="pipeline config JSON")
@click.option("--out", "out_dir", default="runs", show_default=True)
def run_cmd(config_path, out_dir):
    """Execute one pipeline variant end to end."""
    cfg = _load_config(config_path)
    manifest = run_pipeline(cfg, out_dir)
    click.echo(f"run {manifest.run_id}: {len(manifest.steps)} steps "
               f"-> {manifest.final_checkpoint}")


@main.command("eval")
@click.option("--run", "run_dir", required=True, help="run directory containing manifest.json")
@click.option("--test", "test_path", required=True)
def eval_cmd(run_dir, test_path):
    """Evaluate a finished run's final checkpoint on a test corpus."""
    manifest = RunManifest.load(Path(run_dir) / "manifest.json")
    test = load_corpus(test_path, TargetKind.SUMMARY)
    report = evaluate_run(manifest, test, out_dir=Path(run_dir) / "eval")
    manifest.save(Path(run_dir) / "manifest.json")
    d = report.to_dict()
    click.echo(f"n={d['n']} R-1={d['r1_f1']:.4f} R-2={d['r2_f1']:.4f} R-L={d['rl_f1']:.4f}")


@main.command("compare")
@click.option("--config", "config_path", required=True)
@click.option("--out", "out_dir", default="runs", show_default=True)
@click.option("--variants", default="all", show_default=True,
              help="'all' or comma-separated variant names")
@click.option("--seeds", type=int, default=5, show_default=True)
def compare_cmd(config_path, out_dir, variants, seeds):
    """Run every variant over several seeds and emit the comparison report."""
    cfg = _load_config(config_path)
    chosen = VARIANTS if variants == "all" else tuple(variants.split(","))
    unknown = set(chosen) - set(VARIANTS)
    if unknown:
        raise click.BadParameter(f"unknown variants: {sorted(unknown)}")
    rows = compare(cfg, out_dir, variants=chosen, seeds=tuple(range(seeds)))
    summary = emit_report(rows, out_dir)
    click.echo(f"report written to {Path(out_dir) / 'report.tsv'}")
    for variant, metrics in summary["medians"].items():
        click.echo(f"  {variant}: R-L median {metrics['rl_f1']:.4f}")


@main.command("report")
@click.option("--rows", "rows_path", required=True,
              help="JSON file of evaluated rows (report.json from compare)")
@click.option("--out", "out_dir", default="runs", show_default=True)
def report_cmd(rows_path, out_dir):
    """Re-render the results table and figures from evaluated rows."""
    with open(rows_path, encoding="utf-8") as fh:
        data = json.load(fh)
    rows = data["rows"] if isinstance(data, dict) else data
    emit_report(rows, out_dir)
    click.echo(f"report written to {Path(out_dir) / 'report.tsv'}")


if __name__ == "__main__":
    sys.exit(main())
