"""Seeded generator of task-oriented dialogues with known slot-value ground truth.

Every generated record carries the dialogue, its accumulated state, a
templated summary, and the list of informative turns. Informative labels are
computed by direct simulation against the rule-based extractor, so they stay
correct even in overwrite scenarios.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from sapt.backends import rule_dst_extract
from sapt.dialogue import (
    Dialogue,
    Speaker,
    Turn,
    delete_turn,
    linearize_dialogue,
)

DEFAULT_SLOTS = ("food", "area", "pricerange", "day", "time", "people", "stars", "type")
DEFAULT_VALUES: dict[str, tuple[str, ...]] = {
    "food": ("italian", "chinese", "indian", "british", "thai", "mexican"),
    "area": ("centre", "north", "south", "east", "west"),
    "pricerange": ("cheap", "moderate", "expensive"),
    "day": ("monday", "tuesday", "friday", "saturday", "sunday"),
    "time": ("noon", "evening", "morning", "midnight"),
    "people": ("one", "two", "four", "six", "eight"),
    "stars": ("two", "three", "four", "five"),
    "type": ("hotel", "guesthouse", "restaurant", "cafe"),
}
DEFAULT_CHITCHAT = (
    "hello there how are you doing",
    "thanks a lot that sounds good",
    "sure no problem happy to help",
    "what lovely weather we are having",
    "let me check that for you",
    "is there anything else you need",
    "i appreciate your patience today",
    "okay noted moving right along",
)
_INFORMATIVE_TEMPLATES = (
    "i am looking for {slot}={value} please",
    "could you find me {slot}={value} today",
    "i would really like {slot}={value} if possible",
)


class GenerationConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GenConfig:
    n_dialogues: int = 20
    turns_range: tuple[int, int] = (4, 10)
    slots_pool: tuple[str, ...] = DEFAULT_SLOTS
    values_pool: dict[str, tuple[str, ...]] = field(default_factory=lambda: dict(DEFAULT_VALUES))
    informative_fraction: float = 0.4
    chitchat_pool: tuple[str, ...] = DEFAULT_CHITCHAT
    seed: int = 0
    allow_overwrite: bool = False
    id_prefix: str = "dlg"

    def __post_init__(self):
        if not (0 < self.informative_fraction < 1):
            raise GenerationConfigError("informative_fraction must be in (0, 1)")
        if self.n_dialogues < 1:
            raise GenerationConfigError("n_dialogues must be >= 1")
        lo, hi = self.turns_range
        if not (1 <= lo <= hi):
            raise GenerationConfigError(f"bad turns_range {self.turns_range}")
        if not self.slots_pool or not self.chitchat_pool:
            raise GenerationConfigError("slot and chitchat pools must be nonempty")
        for slot in self.slots_pool:
            values = self.values_pool.get(slot)
            if not values:
                raise GenerationConfigError(f"no values configured for slot {slot!r}")
            for v in values:
                if any(ch.isspace() for ch in v) or "=" in v:
                    raise GenerationConfigError(
                        f"value {v!r} for slot {slot!r} must be a single token without '='"
                    )


def _informative_count(fraction: float, n_turns: int) -> int:
    return int(np.floor(fraction * n_turns + 0.5))


def summary_template(pairs: list[tuple[str, str]]) -> str:
    """Fixed summary template mentioning every slot-value pair exactly once."""
    if not pairs:
        return "The user wants nothing in particular ."
    body = " and ".join(f"{slot} {value}" for slot, value in pairs)
    return f"The user wants {body} ."


def generate_corpus(cfg: GenConfig) -> list[dict]:
    """Generate corpus records (the line-delimited corpus file schema)."""
    rng = np.random.default_rng(cfg.seed)
    records = []
    for i in range(cfg.n_dialogues):
        records.append(_generate_dialogue(cfg, rng, f"{cfg.id_prefix}-{i:04d}"))
    return records


def _generate_dialogue(cfg: GenConfig, rng: np.random.Generator, did: str) -> dict:
    lo, hi = cfg.turns_range
    p = int(rng.integers(lo, hi + 1))
    user_positions = list(range(0, p, 2))
    n_inf = _informative_count(cfg.informative_fraction, p)
    if n_inf > len(user_positions):
        raise GenerationConfigError(
            f"dialogue of {p} turns has only {len(user_positions)} user turns, "
            f"cannot place {n_inf} informative turns"
        )
    if not cfg.allow_overwrite and n_inf > len(cfg.slots_pool):
        raise GenerationConfigError(
            f"{n_inf} informative turns need distinct slots but the pool has "
            f"{len(cfg.slots_pool)}"
        )
    inf_positions = sorted(
        int(j) for j in rng.choice(len(user_positions), size=n_inf, replace=False)
    )
    inf_turn_set = {user_positions[j] for j in inf_positions}

    if cfg.allow_overwrite and n_inf >= 2 and rng.random() < 0.5:
        # one slot assigned twice: a later turn overwrites an earlier value
        slots = [cfg.slots_pool[int(s)] for s in
                 rng.choice(len(cfg.slots_pool), size=n_inf - 1, replace=False)]
        slots.append(slots[0])
    else:
        slots = [cfg.slots_pool[int(s)] for s in
                 rng.choice(len(cfg.slots_pool), size=n_inf, replace=False)]

    statements = iter([
        (slot, cfg.values_pool[slot][int(rng.integers(len(cfg.values_pool[slot])))])
        for slot in slots
    ])

    texts: list[tuple[Speaker, str]] = []
    for j in range(p):
        speaker = Speaker.USER if j % 2 == 0 else Speaker.SYSTEM
        if j in inf_turn_set:
            slot, value = next(statements)
            template = _INFORMATIVE_TEMPLATES[int(rng.integers(len(_INFORMATIVE_TEMPLATES)))]
            text = template.format(slot=slot, value=value)
        else:
            text = cfg.chitchat_pool[int(rng.integers(len(cfg.chitchat_pool)))]
        texts.append((speaker, text))
    dialogue = Dialogue.from_texts(did, texts)

    # last-write-wins state in first-mention order
    state: dict[str, str] = {}
    for j in sorted(inf_turn_set):
        slot, value = _slot_in_text(dialogue.turns[j].text)
        state[slot] = value
    pairs = list(state.items())

    informative = _simulate_informative(dialogue)
    return {
        "id": did,
        "turns": [{"speaker": t.speaker.value, "text": t.text} for t in dialogue.turns],
        "dst_state": [[s, v] for s, v in pairs],
        "summary": summary_template(pairs),
        "informative_turns": informative,
    }


def _slot_in_text(text: str) -> tuple[str, str]:
    for token in text.split():
        if "=" in token:
            slot, value = token.split("=", 1)
            return slot, value
    raise AssertionError(f"no slot statement in informative turn {text!r}")


def _simulate_informative(d: Dialogue) -> list[int]:
    """Turns whose deletion changes the rule-based extraction."""
    baseline = rule_dst_extract(linearize_dialogue(d))
    changed = []
    for t in d.turns:
        probe = delete_turn(d, t.index)
        out = rule_dst_extract(linearize_dialogue(probe) if len(probe) else "")
        if out != baseline:
            changed.append(t.index)
    return changed
