"""Dialogue data model: turns, states, skeletons, and supervision assembly.

All types are immutable after construction and all operations are pure, so
everything here is safe to share across threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

USER_TOKEN = "[USER]"
SYSTEM_TOKEN = "[SYSTEM]"
SEP_TOKEN = "[SEP]"

DEFAULT_TOKEN_BUDGET = 1024


class CorpusError(ValueError):
    """Raised for malformed corpus files or records."""


class Speaker(str, Enum):
    USER = "USER"
    SYSTEM = "SYSTEM"

    @property
    def tag(self) -> str:
        return USER_TOKEN if self is Speaker.USER else SYSTEM_TOKEN


class TargetKind(str, Enum):
    DST = "DST"
    SUMMARY = "SUMMARY"


@dataclass(frozen=True)
class Turn:
    """A single utterance. ``index`` is the turn's position in its dialogue."""

    index: int
    speaker: Speaker
    text: str

    def __post_init__(self):
        if self.index < 0:
            raise ValueError(f"turn index must be >= 0, got {self.index}")
        if not self.text.strip():
            raise ValueError(f"turn {self.index} has empty text")

    def render(self) -> str:
        return f"{self.speaker.tag} {self.text}"


@dataclass(frozen=True)
class Dialogue:
    """An ordered sequence of turns.

    Corpus dialogues carry contiguous indices 0..p-1; dialogues produced by
    :func:`delete_turn` keep the surviving turns' original indices, so the
    invariant here is only that indices strictly increase.
    """

    id: str
    turns: tuple[Turn, ...]

    def __post_init__(self):
        indices = [t.index for t in self.turns]
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise ValueError(f"dialogue {self.id!r}: turn indices must strictly increase")

    def __len__(self) -> int:
        return len(self.turns)

    @classmethod
    def from_texts(cls, id: str, texts: list[tuple[Speaker, str]]) -> "Dialogue":
        turns = tuple(Turn(i, sp, tx) for i, (sp, tx) in enumerate(texts))
        return cls(id=id, turns=turns)


@dataclass(frozen=True)
class DstState:
    """Ordered slot-value pairs with last-write-wins semantics upstream."""

    pairs: tuple[tuple[str, str], ...]

    def __post_init__(self):
        slots = [s for s, _ in self.pairs]
        if len(slots) != len(set(slots)):
            raise ValueError(f"duplicate slots in state: {slots}")


@dataclass(frozen=True)
class Skeleton:
    """An order-preserving subset of a dialogue's turns, stored by index."""

    turn_indices: tuple[int, ...]

    def __post_init__(self):
        idx = self.turn_indices
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("skeleton indices must strictly increase")

    def __len__(self) -> int:
        return len(self.turn_indices)


@dataclass(frozen=True)
class SupervisionTarget:
    kind: TargetKind
    text: str

    def __post_init__(self):
        if self.kind is TargetKind.DST:
            parse_dst_state(self.text)  # raises if malformed


@dataclass(frozen=True)
class Sample:
    dialogue: Dialogue
    target: SupervisionTarget
    skeleton: Skeleton | None = None
    # Labels emitted by the synthetic generator; used only by oracle tests.
    informative_turns: tuple[int, ...] | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.skeleton is not None:
            valid = {t.index for t in self.dialogue.turns}
            bad = [i for i in self.skeleton.turn_indices if i not in valid]
            if bad:
                raise ValueError(
                    f"skeleton of {self.dialogue.id!r} references unknown turns {bad}"
                )


Corpus = list[Sample]


def linearize_dst_state(state: DstState) -> str:
    """Render a state as ``slot1 is value1, slot2 is value2``."""
    return ", ".join(f"{slot} is {value}" for slot, value in state.pairs)


def parse_dst_state(text: str) -> DstState:
    """Inverse of :func:`linearize_dst_state` on clean slot/value strings."""
    text = text.strip()
    if not text:
        return DstState(pairs=())
    pairs = []
    for chunk in text.split(", "):
        if " is " not in chunk:
            raise CorpusError(f"cannot parse state fragment {chunk!r}")
        slot, value = chunk.split(" is ", 1)
        pairs.append((slot, value))
    return DstState(pairs=tuple(pairs))


def linearize_dialogue(d: Dialogue, budget: int = DEFAULT_TOKEN_BUDGET) -> str:
    """Render turns with speaker tags and truncate to ``budget`` whitespace tokens."""
    if budget < 1:
        raise ValueError(f"budget must be >= 1, got {budget}")
    tokens = " ".join(t.render() for t in d.turns).split()
    return " ".join(tokens[:budget])


def render_skeleton(d: Dialogue, s: Skeleton) -> str:
    """Render the skeleton's turns with speaker tags, no truncation."""
    by_index = {t.index: t for t in d.turns}
    try:
        return " ".join(by_index[i].render() for i in s.turn_indices)
    except KeyError as e:
        raise ValueError(f"skeleton index {e.args[0]} not in dialogue {d.id!r}") from None


def assemble_supervision(
    y: SupervisionTarget,
    s: Skeleton,
    d: Dialogue,
    position: str = "append",
) -> str:
    """Join target text and rendered skeleton with the separator token.

    ``position="prepend"`` swaps the order (ablation mode). An empty skeleton
    keeps the separator so the assembled string stays parseable.
    """
    rendered = render_skeleton(d, s)
    if position == "append":
        return f"{y.text} {SEP_TOKEN} {rendered}".rstrip()
    if position == "prepend":
        return f"{rendered} {SEP_TOKEN} {y.text}".strip() if rendered else f"{SEP_TOKEN} {y.text}".strip()
    raise ValueError(f"unknown skeleton position {position!r}")


def parse_supervision(text: str) -> tuple[str, str]:
    """Split an assembled target into (target text, skeleton text)."""
    parts = text.split(SEP_TOKEN)
    if len(parts) > 2:
        raise CorpusError(f"multiple {SEP_TOKEN} occurrences in {text!r}")
    if len(parts) == 1:
        return text.strip(), ""
    return parts[0].strip(), parts[1].strip()


def delete_turn(d: Dialogue, j: int) -> Dialogue:
    """Return a copy of ``d`` with turn ``j`` removed; original indices kept."""
    if not any(t.index == j for t in d.turns):
        raise ValueError(f"dialogue {d.id!r} has no turn {j}")
    return Dialogue(id=d.id, turns=tuple(t for t in d.turns if t.index != j))


def insert_turn(d: Dialogue, turn: Turn) -> Dialogue:
    """Inverse of :func:`delete_turn`: re-insert a turn at its index."""
    if any(t.index == turn.index for t in d.turns):
        raise ValueError(f"dialogue {d.id!r} already has turn {turn.index}")
    turns = sorted(d.turns + (turn,), key=lambda t: t.index)
    return Dialogue(id=d.id, turns=tuple(turns))


def _record_to_sample(record: dict, kind: TargetKind) -> Sample:
    dialogue = Dialogue.from_texts(
        record["id"],
        [(Speaker(t["speaker"]), t["text"]) for t in record["turns"]],
    )
    if kind is TargetKind.DST:
        if "dst_state" not in record or record["dst_state"] is None:
            raise CorpusError(f"record {record['id']!r} is missing 'dst_state'")
        state = DstState(pairs=tuple((s, v) for s, v in record["dst_state"]))
        target = SupervisionTarget(kind=kind, text=linearize_dst_state(state))
    else:
        if "summary" not in record or record["summary"] is None:
            raise CorpusError(f"record {record['id']!r} is missing 'summary'")
        target = SupervisionTarget(kind=kind, text=record["summary"])
    informative = record.get("informative_turns")
    return Sample(
        dialogue=dialogue,
        target=target,
        informative_turns=tuple(informative) if informative is not None else None,
    )


def records_to_corpus(records: list[dict], kind: TargetKind) -> Corpus:
    return [_record_to_sample(r, kind) for r in records]


def load_corpus(path: str | Path, kind: TargetKind) -> Corpus:
    """Read a line-delimited corpus file into samples of the requested kind."""
    samples: Corpus = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusError(f"{path}: malformed record on line {lineno}: {e}") from e
            try:
                samples.append(_record_to_sample(record, kind))
            except CorpusError:
                raise
            except (KeyError, TypeError, ValueError) as e:
                raise CorpusError(f"{path}: bad record on line {lineno}: {e}") from e
    return samples


def write_corpus(records: list[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
