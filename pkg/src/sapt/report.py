"""Multi-variant experiment driver and report emission.

``compare`` runs the requested variants over several seeds with paired
few-shot subsets, then writes a results table (TSV + JSON) and bar-chart
figures next to it.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from sapt.dialogue import Corpus
from sapt.pipeline import (
    VARIANTS,
    PipelineConfig,
    RunManifest,
    evaluate_run,
    run_pipeline,
)

VARIANT_LABELS = {
    "prompt_tuning": "Prompt Tuning",
    "spot": "SPoT",
    "sapt_dst": "SAPT [DST]",
    "sapt_summ": "SAPT [Summ]",
    "sapt_both": "SAPT [DST+Summ]",
}

METRIC_COLUMNS = ("r1_f1", "r2_f1", "rl_f1")


def _median(values: list[float]) -> float:
    ordered = sorted(values)
    n = len(ordered)
    mid = n // 2
    return ordered[mid] if n % 2 else (ordered[mid - 1] + ordered[mid]) / 2


def seed_plan(experiment_seed: int) -> dict[str, int]:
    """Derived seeds for one experiment batch; shared by all variants so
    comparisons are paired."""
    base = 1000 * experiment_seed
    return {
        "backbone_seed": base + 1,
        "prompt_seed": base + 2,
        "train_seed": base + 3,
        "fewshot_seed": base + 4,
    }


def compare(
    base_cfg: PipelineConfig,
    out_dir: str | Path,
    variants: tuple[str, ...] = VARIANTS,
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4),
    source: Corpus | None = None,
    target: Corpus | None = None,
    test: Corpus | None = None,
) -> list[dict]:
    """Run variants x seeds, evaluate each run, and return per-run rows."""
    out = Path(out_dir)
    rows = []
    for seed in seeds:
        plan = seed_plan(seed)
        for variant in variants:
            cfg = dataclasses.replace(
                base_cfg,
                variant=variant,
                run_id=f"{variant}-seed{seed}",
                backbone_seed=plan["backbone_seed"],
                prompt_seed=plan["prompt_seed"],
                fewshot_seed=plan["fewshot_seed"],
                train=dataclasses.replace(base_cfg.train, seed=plan["train_seed"]),
            )
            manifest = run_pipeline(cfg, out, source=source, target=target, test=test)
            report = evaluate_run(
                manifest, test if test is not None else _load_test(cfg),
                out_dir=out / cfg.run_id / "eval",
            )
            manifest.save(out / cfg.run_id / "manifest.json")
            row = {"variant": variant, "seed": seed}
            row.update(report.to_dict())
            rows.append(row)
    return rows


def _load_test(cfg: PipelineConfig) -> Corpus:
    from sapt.dialogue import TargetKind, load_corpus

    return load_corpus(cfg.test_corpus, TargetKind.SUMMARY)


def emit_report(rows: list[dict], out_dir: str | Path) -> dict:
    """Write the results table and figures; returns the summary structure.

    Emits ``report.tsv`` (per-run rows then per-variant medians),
    ``report.json``, and ``report.png``.
    """
    if not rows:
        raise ValueError("no evaluated runs to report")
    for row in rows:
        missing = [c for c in METRIC_COLUMNS if c not in row]
        if missing:
            raise ValueError(f"run {row.get('variant')}/{row.get('seed')} lacks {missing}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    present = [v for v in VARIANTS if any(r["variant"] == v for r in rows)]
    medians = {}
    for variant in present:
        vrows = [r for r in rows if r["variant"] == variant]
        medians[variant] = {
            col: _median([r[col] for r in vrows]) for col in METRIC_COLUMNS
        }

    header = ["variant", "seed", "r1_f1", "r2_f1", "rl_f1"]
    lines = ["\t".join(header)]
    for variant in present:
        for r in sorted((r for r in rows if r["variant"] == variant),
                        key=lambda r: r["seed"]):
            lines.append("\t".join(
                [VARIANT_LABELS[variant], str(r["seed"])]
                + [f"{r[c]:.6f}" for c in METRIC_COLUMNS]))
    for variant in present:
        lines.append("\t".join(
            [VARIANT_LABELS[variant], "median"]
            + [f"{medians[variant][c]:.6f}" for c in METRIC_COLUMNS]))
    (out / "report.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    summary = {"rows": rows, "medians": medians}
    with open(out / "report.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
        fh.write("\n")

    render_figure(medians, out / "report.png")
    return summary


def render_figure(medians: dict[str, dict[str, float]], path: str | Path) -> None:
    """Grouped bar chart of median R-1/R-2/R-L F1 per variant."""
    variants = list(medians)
    x = range(len(variants))
    width = 0.25
    fig, ax = plt.subplots(figsize=(1.8 * max(4, len(variants)), 4))
    for k, (col, label) in enumerate(zip(METRIC_COLUMNS, ("R-1", "R-2", "R-L"))):
        ax.bar([i + (k - 1) * width for i in x],
               [medians[v][col] for v in variants],
               width=width, label=label)
    ax.set_xticks(list(x))
    ax.set_xticklabels([VARIANT_LABELS[v] for v in variants], rotation=20, ha="right")
    ax.set_ylabel("median F1")
    ax.set_ylim(0, 1)
    ax.legend()
    ax.set_title("Few-shot summarization by transfer variant")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_score_histogram(scores: list[float], median: float, path: str | Path) -> None:
    """Histogram of probe similarity scores with the extraction threshold."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(scores, bins=30, color="steelblue", edgecolor="black")
    ax.axvline(median, color="crimson", linestyle="--", label=f"median = {median:.3f}")
    ax.set_xlabel("probe similarity")
    ax.set_ylabel("turns")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
