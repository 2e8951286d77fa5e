"""Four-step prompt-transfer workflow with checkpoint hand-off.

Variants: prompt tuning from scratch, plain prompt transfer (steps 1+4), and
the three skeleton-assisted variants that insert skeleton-supervised steps 2
and/or 3 between them. Each training step persists its checkpoint (plus probe
scores and skeletons where applicable) under the run directory.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from sapt import probing
from sapt.backends import GenerationBackend, RemoteBackend, RuleDstBackend, make_backend
from sapt.dialogue import (
    DEFAULT_TOKEN_BUDGET,
    SEP_TOKEN,
    Corpus,
    Sample,
    Skeleton,
    TargetKind,
    assemble_supervision,
    linearize_dialogue,
    load_corpus,
    render_skeleton,
)
from sapt.learner import (
    Checkpoint,
    FrozenBackbone,
    LearnerBackend,
    PromptBlock,
    TrainConfig,
    Vocab,
    batch_greedy,
    train,
    transfer_init,
)
from sapt.rouge import EvalReport, evaluate_corpus

VARIANTS = ("prompt_tuning", "spot", "sapt_dst", "sapt_summ", "sapt_both")

STEP1 = "step1_dst"
STEP2 = "step2_dst_skeleton"
STEP3 = "step3_summ_skeleton"
STEP4 = "step4_summ"

VARIANT_STEPS: dict[str, tuple[str, ...]] = {
    "prompt_tuning": (STEP4,),
    "spot": (STEP1, STEP4),
    "sapt_dst": (STEP1, STEP2, STEP4),
    "sapt_summ": (STEP1, STEP3, STEP4),
    "sapt_both": (STEP1, STEP2, STEP3, STEP4),
}


class PipelineError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    variant: str = "sapt_both"
    skeleton_source: str = "probe"          # probe | random
    random_skeleton_seed: int = 0
    skeleton_position: str = "append"       # append | prepend
    keep_supervision: bool = True
    fewshot_k: int = 100
    fewshot_seed: int = 0
    source_corpus: str = ""
    target_corpus: str = ""
    test_corpus: str = ""
    sim: str = "rouge-l"
    probe_backend: str = "learner"          # learner | rule_dst | remote
    remote_endpoint: str = ""
    step3_probe_state: str = "latest"       # latest | step1
    d: int = 32
    h: int = 64
    init_scale: float = 0.1
    prompt_len: int = 16
    backbone_seed: int = 0
    prompt_seed: int = 1
    budget: int = DEFAULT_TOKEN_BUDGET
    max_len: int = 48
    train: TrainConfig = field(default_factory=TrainConfig)
    train_overrides: dict[str, dict] = field(default_factory=dict)
    run_id: str = "run"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.skeleton_source not in ("probe", "random"):
            raise ConfigError(f"unknown skeleton_source {self.skeleton_source!r}")
        if self.skeleton_position not in ("append", "prepend"):
            raise ConfigError(f"unknown skeleton_position {self.skeleton_position!r}")
        if self.probe_backend not in ("learner", "rule_dst", "remote"):
            raise ConfigError(f"unknown probe_backend {self.probe_backend!r}")
        if self.step3_probe_state not in ("latest", "step1"):
            raise ConfigError(f"unknown step3_probe_state {self.step3_probe_state!r}")
        if self.fewshot_k < 1:
            raise ConfigError("fewshot_k must be >= 1")
        bad = set(self.train_overrides) - {STEP1, STEP2, STEP3, STEP4}
        if bad:
            raise ConfigError(f"train_overrides for unknown steps: {sorted(bad)}")

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        data = dict(data)
        if "train" in data and isinstance(data["train"], dict):
            tc_known = {f.name for f in fields(TrainConfig)}
            tc_unknown = set(data["train"]) - tc_known
            if tc_unknown:
                raise ConfigError(f"unknown train config keys: {sorted(tc_unknown)}")
            data["train"] = TrainConfig(**data["train"])
        return cls(**data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def train_config_for(self, step: str) -> TrainConfig:
        override = self.train_overrides.get(step)
        if not override:
            return self.train
        tc_known = {f.name for f in fields(TrainConfig)}
        bad = set(override) - tc_known
        if bad:
            raise ConfigError(f"unknown train override keys for {step}: {sorted(bad)}")
        return dataclasses.replace(self.train, **override)


@dataclass
class StepRecord:
    name: str
    directory: str
    checkpoint: str
    seconds: float
    backbone_before: str
    backbone_after: str
    skeletons: str | None = None
    scores: str | None = None


@dataclass
class RunManifest:
    run_id: str
    variant: str
    config: dict
    vocab_hash: str
    steps: list[StepRecord] = field(default_factory=list)
    eval_report: str | None = None

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "variant": self.variant,
            "config": self.config,
            "vocab_hash": self.vocab_hash,
            "steps": [dataclasses.asdict(s) for s in self.steps],
            "eval_report": self.eval_report,
        }

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> "RunManifest":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        return cls(
            run_id=data["run_id"],
            variant=data["variant"],
            config=data["config"],
            vocab_hash=data["vocab_hash"],
            steps=[StepRecord(**s) for s in data["steps"]],
            eval_report=data.get("eval_report"),
        )

    @property
    def final_checkpoint(self) -> str:
        if not self.steps:
            raise PipelineError(f"run {self.run_id!r} recorded no training steps")
        return self.steps[-1].checkpoint


def few_shot_sample(corpus: Corpus, k: int, seed: int) -> Corpus:
    """Uniform subset without replacement, original order preserved."""
    if k > len(corpus):
        raise PipelineError(f"cannot sample {k} from a corpus of {len(corpus)}")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(corpus), size=k, replace=False)
    return [corpus[i] for i in sorted(int(i) for i in picks)]


def build_vocab(source: Corpus, fewshot: Corpus, test: Corpus,
                budget: int = DEFAULT_TOKEN_BUDGET) -> Vocab:
    """Vocabulary over all training text plus test dialogue inputs (never
    test references)."""
    texts = []
    for sample in source + fewshot:
        texts.append(linearize_dialogue(sample.dialogue, budget))
        texts.append(sample.target.text)
    for sample in test:
        texts.append(linearize_dialogue(sample.dialogue, budget))
    texts.append(SEP_TOKEN)
    return Vocab.build(texts)


def _encode_pairs(vocab: Vocab, pairs: list[tuple[str, str]]) -> list[tuple[np.ndarray, np.ndarray]]:
    eos = np.array([vocab.eos_id], dtype=np.int64)
    return [
        (vocab.encode(x), np.concatenate([vocab.encode(y), eos]))
        for x, y in pairs
    ]


def _skeleton_targets(
    corpus: Corpus, skeletons: probing.SkeletonSet, cfg: PipelineConfig
) -> list[tuple[str, str]]:
    pairs = []
    for sample in corpus:
        skel = skeletons[sample.dialogue.id]
        if cfg.keep_supervision:
            target = assemble_supervision(
                sample.target, skel, sample.dialogue, position=cfg.skeleton_position
            )
        else:
            target = render_skeleton(sample.dialogue, skel)
        pairs.append((linearize_dialogue(sample.dialogue, cfg.budget), target))
    return pairs


def _plain_targets(corpus: Corpus, cfg: PipelineConfig) -> list[tuple[str, str]]:
    return [
        (linearize_dialogue(s.dialogue, cfg.budget), s.target.text) for s in corpus
    ]


def _probe_backend(cfg: PipelineConfig, latest: Checkpoint | None) -> GenerationBackend:
    if cfg.probe_backend == "rule_dst":
        return RuleDstBackend()
    if cfg.probe_backend == "remote":
        return RemoteBackend(cfg.remote_endpoint)
    if latest is None:
        raise PipelineError("learner probe backend requires a prior checkpoint")
    return LearnerBackend.from_checkpoint(latest)


def _skeletons_for(
    corpus: Corpus,
    cfg: PipelineConfig,
    latest: Checkpoint | None,
    step_dir: Path,
) -> probing.SkeletonSet:
    if cfg.skeleton_source == "random":
        skeletons = probing.random_skeletons(corpus, cfg.random_skeleton_seed)
        probing.write_skeleton_set(skeletons, step_dir / "skeletons.jsonl")
        return skeletons
    backend = _probe_backend(cfg, latest)
    _, skeletons = probing.run_extraction(
        corpus, backend, sim=cfg.sim, budget=cfg.budget, max_len=cfg.max_len,
        out_dir=step_dir,
    )
    return skeletons


def run_pipeline(
    cfg: PipelineConfig,
    out_dir: str | Path,
    source: Corpus | None = None,
    target: Corpus | None = None,
    test: Corpus | None = None,
) -> RunManifest:
    """Execute the variant's step sequence and persist all artifacts."""
    out = Path(out_dir) / cfg.run_id
    out.mkdir(parents=True, exist_ok=True)

    source = source if source is not None else load_corpus(cfg.source_corpus, TargetKind.DST)
    target = target if target is not None else load_corpus(cfg.target_corpus, TargetKind.SUMMARY)
    test = test if test is not None else load_corpus(cfg.test_corpus, TargetKind.SUMMARY)

    fewshot = few_shot_sample(target, cfg.fewshot_k, cfg.fewshot_seed)
    vocab = build_vocab(source, fewshot, test, budget=cfg.budget)
    bb = FrozenBackbone.create(cfg.backbone_seed, len(vocab), d=cfg.d, h=cfg.h,
                               init_scale=cfg.init_scale)

    manifest = RunManifest(
        run_id=cfg.run_id, variant=cfg.variant, config=cfg.to_dict(),
        vocab_hash=vocab.hash(),
    )
    latest: Checkpoint | None = None
    step1_ck: Checkpoint | None = None

    for step in VARIANT_STEPS[cfg.variant]:
        step_dir = out / step
        step_dir.mkdir(parents=True, exist_ok=True)
        started = time.monotonic()
        before = bb.fingerprint()

        skeleton_path = None
        scores_path = None
        if step == STEP1:
            pairs = _plain_targets(source, cfg)
        elif step == STEP2:
            skeletons = _skeletons_for(source, cfg, step1_ck, step_dir)
            pairs = _skeleton_targets(source, skeletons, cfg)
        elif step == STEP3:
            probe_ck = step1_ck if cfg.step3_probe_state == "step1" else latest
            skeletons = _skeletons_for(fewshot, cfg, probe_ck, step_dir)
            pairs = _skeleton_targets(fewshot, skeletons, cfg)
        else:
            pairs = _plain_targets(fewshot, cfg)
        if step in (STEP2, STEP3):
            skeleton_path = str(step_dir / "skeletons.jsonl")
            if (step_dir / "scores.jsonl").exists():
                scores_path = str(step_dir / "scores.jsonl")

        if latest is None:
            prompt = PromptBlock.random(cfg.prompt_seed, cfg.prompt_len, cfg.d,
                                        scale=cfg.init_scale)
            lineage: tuple[str, ...] = ()
        else:
            prompt = transfer_init(latest, bb, vocab)
            lineage = latest.lineage

        data = _encode_pairs(vocab, pairs)
        ck = train(bb, prompt, data, cfg.train_config_for(step), vocab,
                   step_name=step, parent_lineage=lineage)
        ck_path = step_dir / "checkpoint.json"
        ck.save(ck_path)

        manifest.steps.append(StepRecord(
            name=step,
            directory=str(step_dir),
            checkpoint=str(ck_path),
            seconds=time.monotonic() - started,
            backbone_before=before,
            backbone_after=bb.fingerprint(),
            skeletons=skeleton_path,
            scores=scores_path,
        ))
        manifest.save(out / "manifest.json")

        latest = ck
        if step == STEP1:
            step1_ck = ck

    manifest.save(out / "manifest.json")
    return manifest


def strip_skeleton_suffix(text: str) -> str:
    """Drop everything from the separator token on (eval safety net)."""
    idx = text.find(SEP_TOKEN)
    return text[:idx].strip() if idx >= 0 else text.strip()


def evaluate_run(
    manifest: RunManifest,
    test: Corpus,
    out_dir: str | Path | None = None,
) -> EvalReport:
    """Generate summaries for the test set with the final checkpoint and score them."""
    if not test:
        raise PipelineError("test corpus is empty")
    ck = Checkpoint.load(manifest.final_checkpoint)
    bb = FrozenBackbone.create(ck.backbone_seed, len(ck.vocab), d=ck.d, h=ck.h,
                               init_scale=ck.init_scale)
    cfg = manifest.config
    inputs = [
        ck.vocab.encode(linearize_dialogue(sample.dialogue, cfg["budget"]))
        for sample in test
    ]
    decoded = batch_greedy(bb, ck.prompt, inputs, ck.vocab,
                           [cfg["max_len"]] * len(test))
    pairs = [
        (sample.target.text, strip_skeleton_suffix(ck.vocab.decode(ids)))
        for sample, ids in zip(test, decoded)
    ]
    report = evaluate_corpus(pairs)
    if out_dir is not None:
        eval_dir = Path(out_dir)
        eval_dir.mkdir(parents=True, exist_ok=True)
        path = eval_dir / "report.json"
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, sort_keys=True, indent=2)
            fh.write("\n")
        manifest.eval_report = str(path)
    return report
