"""Tests for leave-one-turn-out probing and skeleton extraction."""

from __future__ import annotations

import statistics

import pytest
from hypothesis import given
from hypothesis import strategies as st

from sapt import probing, synthetic
from sapt.backends import EchoBackend, GenerationBackend, RuleDstBackend
from sapt.dialogue import (
    Dialogue,
    Sample,
    Skeleton,
    Speaker,
    SupervisionTarget,
    TargetKind,
    insert_turn,
    records_to_corpus,
)


def make_dialogue(n: int, id: str = "d0") -> Dialogue:
    texts = [
        (Speaker.USER if i % 2 == 0 else Speaker.SYSTEM, f"utterance {i}")
        for i in range(n)
    ]
    return Dialogue.from_texts(id, texts)


def make_corpus(turn_counts: list[int]) -> list[Sample]:
    return [
        Sample(
            dialogue=make_dialogue(n, id=f"d{i}"),
            target=SupervisionTarget(kind=TargetKind.SUMMARY, text="a summary"),
        )
        for i, n in enumerate(turn_counts)
    ]


def test_build_probes_counts_and_inverse():
    d = make_dialogue(3)
    probes = probing.build_probes(d)
    assert [j for j, _ in probes] == [0, 1, 2]
    for j, probe in probes:
        assert len(probe) == 2
        assert insert_turn(probe, d.turns[j]) == d


def test_build_probes_single_turn_dialogue():
    (j, probe), = probing.build_probes(make_dialogue(1))
    assert j == 0 and len(probe) == 0


def test_build_probes_rejects_empty_dialogue():
    with pytest.raises(probing.ProbeError):
        probing.build_probes(Dialogue(id="e", turns=()))


def test_similarity_identity_is_exactly_one():
    assert probing.similarity("", "") == 1.0
    assert probing.similarity("a b", "a  b!") == 1.0  # same token lists
    assert probing.similarity("a b", "a c") < 1.0


def test_score_corpus_counts_and_median():
    table = probing.score_corpus(make_corpus([3, 2]), EchoBackend())
    assert len(table.scores) == 5
    assert table.median == statistics.median(s.score for s in table.scores)
    assert all(0.0 <= s.score <= 1.0 for s in table.scores)


def test_score_corpus_rejects_empty_corpus():
    with pytest.raises(probing.ProbeError):
        probing.score_corpus([], EchoBackend())


class ExplodingBackend(GenerationBackend):
    kind = "exploding"

    def generate(self, request):
        raise RuntimeError("backend down")


def test_score_corpus_wraps_backend_failure():
    with pytest.raises(probing.ProbeError):
        probing.score_corpus(make_corpus([2]), ExplodingBackend())


def test_extract_skeletons_strict_below_median():
    corpus = make_corpus([4])
    table = probing.ScoreTable(
        scores=(
            probing.ProbeScore("d0", 0, 0.9),
            probing.ProbeScore("d0", 1, 0.5),
            probing.ProbeScore("d0", 2, 0.7),
            probing.ProbeScore("d0", 3, 0.3),
        ),
        median=0.6,
    )
    skeletons = probing.extract_skeletons(table, corpus)
    assert skeletons["d0"] == Skeleton(turn_indices=(1, 3))


def test_extract_skeletons_all_tied_yields_empty():
    corpus = make_corpus([2])
    table = probing.ScoreTable(
        scores=(probing.ProbeScore("d0", 0, 0.4), probing.ProbeScore("d0", 1, 0.4)),
        median=0.4,
    )
    assert probing.extract_skeletons(table, corpus)["d0"] == Skeleton(())
    forced = probing.extract_skeletons(table, corpus, min_one_turn=True)
    assert forced["d0"] == Skeleton(turn_indices=(0,))  # lowest index breaks the tie


def test_extract_skeletons_missing_turn_raises():
    corpus = make_corpus([2])
    table = probing.ScoreTable(scores=(probing.ProbeScore("d0", 0, 0.5),), median=0.5)
    with pytest.raises(probing.ProbeError):
        probing.extract_skeletons(table, corpus)


def rule_corpus(n_dialogues: int = 20, fraction: float = 0.4) -> list[Sample]:
    records = synthetic.generate_corpus(synthetic.GenConfig(
        n_dialogues=n_dialogues, turns_range=(4, 8),
        informative_fraction=fraction, seed=11,
    ))
    return records_to_corpus(records, TargetKind.DST)


def test_rule_backend_ranking_property():
    """Turns whose deletion changes the extraction score strictly below all others."""
    corpus = rule_corpus()
    table = probing.score_corpus(corpus, RuleDstBackend())
    labels = {s.dialogue.id: set(s.informative_turns) for s in corpus}
    informative = [s.score for s in table.scores if s.turn_index in labels[s.dialogue_id]]
    other = [s.score for s in table.scores if s.turn_index not in labels[s.dialogue_id]]
    assert max(informative) < min(other) == 1.0


@given(st.lists(st.integers(min_value=1, max_value=6), min_size=1, max_size=8),
       st.integers(min_value=0, max_value=2**32 - 1))
def test_random_skeletons_exact_count_and_coverage(turn_counts, seed):
    corpus = make_corpus(turn_counts)
    total = sum(turn_counts)
    if total // 2 < len(corpus):
        with pytest.raises(probing.ProbeError):
            probing.random_skeletons(corpus, seed)
        return
    skeletons = probing.random_skeletons(corpus, seed)
    assert sum(len(s) for s in skeletons.values()) == total // 2
    assert all(len(skeletons[f"d{i}"]) >= 1 for i in range(len(corpus)))
    # determinism
    assert probing.random_skeletons(corpus, seed) == skeletons


def test_run_extraction_persists_artifacts(tmp_path):
    corpus = rule_corpus(n_dialogues=6)
    table, skeletons = probing.run_extraction(
        corpus, RuleDstBackend(), out_dir=tmp_path
    )
    reread = probing.read_score_table(tmp_path / "scores.jsonl")
    assert reread.scores == table.scores
    assert reread.median == table.median
    assert probing.read_skeleton_set(tmp_path / "skeletons.jsonl") == skeletons


def test_read_empty_score_table_raises(tmp_path):
    path = tmp_path / "scores.jsonl"
    path.write_text("", encoding="utf-8")
    with pytest.raises(probing.ProbeError):
        probing.read_score_table(path)
