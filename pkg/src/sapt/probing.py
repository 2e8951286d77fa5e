"""Leave-one-turn-out probing and skeleton extraction.

For every dialogue the backend is queried on the full linearized history and
on each single-turn-deletion probe; per-turn similarity scores are pooled
corpus-wide, and turns scoring strictly below the global median enter the
skeleton.
"""

from __future__ import annotations

import json
import statistics
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from sapt import rouge
from sapt.backends import Decode, GenerationBackend, GenerationRequest
from sapt.dialogue import (
    DEFAULT_TOKEN_BUDGET,
    Corpus,
    Dialogue,
    Skeleton,
    delete_turn,
    linearize_dialogue,
)


class ProbeError(RuntimeError):
    pass


@dataclass(frozen=True)
class ProbeScore:
    dialogue_id: str
    turn_index: int
    score: float


@dataclass(frozen=True)
class ScoreTable:
    scores: tuple[ProbeScore, ...]
    median: float


SkeletonSet = dict[str, Skeleton]


def build_probes(d: Dialogue) -> list[tuple[int, Dialogue]]:
    """One probe per turn, the j-th omitting turn j."""
    if len(d) < 1:
        raise ProbeError(f"dialogue {d.id!r} has no turns to probe")
    return [(t.index, delete_turn(d, t.index)) for t in d.turns]


def similarity(ref: str, hyp: str, metric: str = "rouge-l") -> float:
    """Probe similarity: ROUGE F1, with identical token lists pinned to 1.0.

    The explicit identity case covers outputs that tokenize to nothing (e.g.
    two empty states), which plain ROUGE would score 0.
    """
    if rouge.tokenize(ref) == rouge.tokenize(hyp):
        return 1.0
    return rouge.score(ref, hyp, metric).f1


def score_corpus(
    corpus: Corpus,
    backend: GenerationBackend,
    sim: str = "rouge-l",
    budget: int = DEFAULT_TOKEN_BUDGET,
    max_len: int = 64,
    decode: Decode | None = None,
) -> ScoreTable:
    """Compute the full per-(dialogue, turn) similarity table and its median."""
    if not corpus:
        raise ProbeError("cannot score an empty corpus")
    decode = decode or Decode()
    requests: list[GenerationRequest] = []
    layout: list[tuple[str, list[int]]] = []  # (dialogue id, probed turn indices)
    for sample in corpus:
        d = sample.dialogue
        requests.append(GenerationRequest(linearize_dialogue(d, budget), max_len, decode))
        probes = build_probes(d)
        layout.append((d.id, [j for j, _ in probes]))
        for _, probe in probes:
            requests.append(GenerationRequest(
                linearize_dialogue(probe, budget) if len(probe) else "", max_len, decode
            ))
    try:
        outputs = [r.output for r in backend.batch_generate(requests)]
    except Exception as e:
        raise ProbeError(f"probing failed: {e}") from e
    scores: list[ProbeScore] = []
    pos = 0
    for did, turn_indices in layout:
        full = outputs[pos]
        pos += 1
        for j in turn_indices:
            scores.append(ProbeScore(did, j, similarity(full, outputs[pos], sim)))
            pos += 1
    median = float(statistics.median(s.score for s in scores))
    return ScoreTable(scores=tuple(scores), median=median)


def extract_skeletons(
    table: ScoreTable, corpus: Corpus, min_one_turn: bool = False
) -> SkeletonSet:
    """Turn j of dialogue i enters skeleton i iff its score is strictly below
    the global median. ``min_one_turn`` forces the lowest-scoring turn into
    each otherwise-empty skeleton."""
    by_dialogue: dict[str, dict[int, float]] = {}
    for s in table.scores:
        by_dialogue.setdefault(s.dialogue_id, {})[s.turn_index] = s.score
    skeletons: SkeletonSet = {}
    for sample in corpus:
        d = sample.dialogue
        turn_scores = by_dialogue.get(d.id, {})
        missing = [t.index for t in d.turns if t.index not in turn_scores]
        if missing:
            raise ProbeError(f"score table missing turns {missing} of dialogue {d.id!r}")
        chosen = [t.index for t in d.turns if turn_scores[t.index] < table.median]
        if not chosen and min_one_turn:
            lowest = min(turn_scores.items(), key=lambda kv: (kv[1], kv[0]))
            chosen = [lowest[0]]
        skeletons[d.id] = Skeleton(turn_indices=tuple(chosen))
    return skeletons


def random_skeletons(corpus: Corpus, seed: int) -> SkeletonSet:
    """Uniform random skeletons covering half of all turns, >= 1 per dialogue."""
    total_turns = sum(len(s.dialogue) for s in corpus)
    target = total_turns // 2
    n = len(corpus)
    if target < n:
        raise ProbeError(
            f"cannot select {target} turns across {n} dialogues with >= 1 each"
        )
    rng = np.random.default_rng(seed)
    chosen: dict[str, set[int]] = {}
    remaining: list[tuple[str, int]] = []
    for sample in corpus:
        d = sample.dialogue
        indices = [t.index for t in d.turns]
        first = indices[int(rng.integers(len(indices)))]
        chosen[d.id] = {first}
        remaining.extend((d.id, i) for i in indices if i != first)
    extra = target - n
    if extra:
        picks = rng.choice(len(remaining), size=extra, replace=False)
        for k in sorted(int(i) for i in picks):
            did, idx = remaining[k]
            chosen[did].add(idx)
    return {did: Skeleton(turn_indices=tuple(sorted(ids))) for did, ids in chosen.items()}


def run_extraction(
    corpus: Corpus,
    backend: GenerationBackend,
    sim: str = "rouge-l",
    budget: int = DEFAULT_TOKEN_BUDGET,
    max_len: int = 64,
    out_dir: str | Path | None = None,
    min_one_turn: bool = False,
) -> tuple[ScoreTable, SkeletonSet]:
    """Score the corpus and extract skeletons; optionally persist both."""
    table = score_corpus(corpus, backend, sim=sim, budget=budget, max_len=max_len)
    skeletons = extract_skeletons(table, corpus, min_one_turn=min_one_turn)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_score_table(table, out / "scores.jsonl")
        write_skeleton_set(skeletons, out / "skeletons.jsonl")
    return table, skeletons


def write_score_table(table: ScoreTable, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in table.scores:
            fh.write(json.dumps(
                {"dialogue_id": s.dialogue_id, "turn_index": s.turn_index,
                 "score": s.score}, sort_keys=True) + "\n")


def read_score_table(path: str | Path) -> ScoreTable:
    scores = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                r = json.loads(line)
                scores.append(ProbeScore(r["dialogue_id"], r["turn_index"], r["score"]))
    if not scores:
        raise ProbeError(f"{path}: empty score table")
    return ScoreTable(scores=tuple(scores),
                      median=float(statistics.median(s.score for s in scores)))


def write_skeleton_set(skeletons: SkeletonSet, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for did in sorted(skeletons):
            fh.write(json.dumps(
                {"dialogue_id": did,
                 "turn_indices": list(skeletons[did].turn_indices)},
                sort_keys=True) + "\n")


def read_skeleton_set(path: str | Path) -> SkeletonSet:
    skeletons: SkeletonSet = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                r = json.loads(line)
                skeletons[r["dialogue_id"]] = Skeleton(tuple(r["turn_indices"]))
    return skeletons
