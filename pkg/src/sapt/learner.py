"""Compact frozen-backbone seq2seq learner with a trainable soft prompt.

The backbone is a deliberately small stand-in for a large PLM: a mean-pooled
bag-of-embeddings context (prompt rows prepended to the input tokens) feeding
one nonlinear decoding layer. Only the prompt matrix is trainable; gradients
are analytic, so training is exactly reproducible and framework-free.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from sapt.backends import (
    BEAM,
    GREEDY,
    GenerationBackend,
    GenerationRequest,
    GenerationResponse,
)
from sapt.dialogue import SEP_TOKEN, SYSTEM_TOKEN, USER_TOKEN

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIAL_TOKENS = (PAD, BOS, EOS, UNK, USER_TOKEN, SYSTEM_TOKEN, SEP_TOKEN)

PRNG_ID = "numpy-pcg64"
CHECKPOINT_FORMAT = "sapt-checkpoint"
CHECKPOINT_VERSION = 1


class LearnerError(RuntimeError):
    pass


class CheckpointError(LearnerError):
    pass


@dataclass(frozen=True)
class Vocab:
    """Contiguous token <-> id bijection; specials occupy the lowest ids."""

    tokens: tuple[str, ...]

    def __post_init__(self):
        if self.tokens[: len(SPECIAL_TOKENS)] != SPECIAL_TOKENS:
            raise ValueError("vocab must start with the special tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocab contains duplicate tokens")
        object.__setattr__(self, "_ids", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def build(cls, texts: list[str]) -> "Vocab":
        seen = set(SPECIAL_TOKENS)
        extra = sorted({tok for text in texts for tok in text.split()} - seen)
        return cls(tokens=SPECIAL_TOKENS + tuple(extra))

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def bos_id(self) -> int:
        return 1

    @property
    def eos_id(self) -> int:
        return 2

    @property
    def unk_id(self) -> int:
        return 3

    def encode(self, text: str) -> np.ndarray:
        ids = self._ids  # type: ignore[attr-defined]
        return np.array([ids.get(tok, self.unk_id) for tok in text.split()], dtype=np.int64)

    def decode(self, ids: np.ndarray | list[int]) -> str:
        skip = {self.pad_id, self.bos_id, self.eos_id}
        return " ".join(self.tokens[i] for i in ids if i not in skip)

    def hash(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class FrozenBackbone:
    """Random frozen parameters, fully determined by (seed, |V|, d, h)."""

    seed: int
    d: int
    h: int
    init_scale: float
    E: np.ndarray  # |V| x d token embeddings
    W: np.ndarray  # h x 2d hidden transform
    b: np.ndarray  # h bias
    U: np.ndarray  # |V| x h output projection

    @classmethod
    def create(cls, seed: int, vocab_size: int, d: int = 32, h: int = 64,
               init_scale: float = 0.1) -> "FrozenBackbone":
        rng = np.random.default_rng(seed)
        sample = lambda *shape: rng.uniform(-init_scale, init_scale, size=shape)
        return cls(
            seed=seed, d=d, h=h, init_scale=init_scale,
            E=sample(vocab_size, d),
            W=sample(h, 2 * d),
            b=sample(h),
            U=sample(vocab_size, h),
        )

    @property
    def vocab_size(self) -> int:
        return self.E.shape[0]

    def to_bytes(self) -> bytes:
        return b"".join(
            np.ascontiguousarray(a, dtype="<f8").tobytes()
            for a in (self.E, self.W, self.b, self.U)
        )

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


@dataclass(frozen=True)
class PromptBlock:
    """The trainable prompt matrix (m x d)."""

    P: np.ndarray

    def __post_init__(self):
        if self.P.ndim != 2:
            raise ValueError("prompt matrix must be 2-dimensional")
        if not np.isfinite(self.P).all():
            raise ValueError("prompt matrix contains non-finite entries")

    @property
    def m(self) -> int:
        return self.P.shape[0]

    @classmethod
    def random(cls, seed: int, m: int, d: int, scale: float = 0.1) -> "PromptBlock":
        rng = np.random.default_rng(seed)
        return cls(P=rng.uniform(-scale, scale, size=(m, d)))


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.05
    epochs: int = 50
    batch: int = 8
    seed: int = 0
    decay: str = "linear"

    def __post_init__(self):
        if self.decay not in ("linear", "none"):
            raise ValueError(f"decay must be linear or none, got {self.decay!r}")
        if self.epochs < 1 or self.batch < 1:
            raise ValueError("epochs and batch must be >= 1")


def learning_rate(cfg: TrainConfig, step: int, total_steps: int) -> float:
    """lr at global step ``step`` (0-based); hits 0 at ``step == total_steps``."""
    if cfg.decay == "none":
        return cfg.lr0
    return cfg.lr0 * max(0.0, 1.0 - step / total_steps)


@dataclass(frozen=True)
class Checkpoint:
    prompt: PromptBlock
    backbone_seed: int
    d: int
    h: int
    init_scale: float
    vocab: Vocab
    lineage: tuple[str, ...] = ()
    prng_id: str = PRNG_ID

    def to_dict(self) -> dict:
        raw = np.ascontiguousarray(self.prompt.P, dtype="<f8").tobytes()
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "backbone_seed": self.backbone_seed,
            "d": self.d,
            "h": self.h,
            "init_scale": self.init_scale,
            "m": self.prompt.m,
            "prng_id": self.prng_id,
            "vocab_hash": self.vocab.hash(),
            "vocab_tokens": list(self.vocab.tokens),
            "prompt_b64": base64.b64encode(raw).decode("ascii"),
            "lineage": list(self.lineage),
        }

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        if data.get("format") != CHECKPOINT_FORMAT or data.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"{path}: unknown checkpoint format/version "
                f"{data.get('format')!r}/{data.get('version')!r}"
            )
        vocab = Vocab(tokens=tuple(data["vocab_tokens"]))
        if vocab.hash() != data["vocab_hash"]:
            raise CheckpointError(f"{path}: vocab hash mismatch")
        raw = base64.b64decode(data["prompt_b64"])
        P = np.frombuffer(raw, dtype="<f8").reshape(data["m"], data["d"]).copy()
        return cls(
            prompt=PromptBlock(P=P),
            backbone_seed=data["backbone_seed"],
            d=data["d"],
            h=data["h"],
            init_scale=data["init_scale"],
            vocab=vocab,
            lineage=tuple(data["lineage"]),
            prng_id=data["prng_id"],
        )


def transfer_init(ck: Checkpoint, bb: FrozenBackbone, vocab: Vocab) -> PromptBlock:
    """Prompt initialization for the next pipeline step, after compatibility checks."""
    if (ck.d, ck.h) != (bb.d, bb.h):
        raise CheckpointError(
            f"checkpoint dims (d={ck.d}, h={ck.h}) do not match backbone "
            f"(d={bb.d}, h={bb.h})"
        )
    if ck.vocab.hash() != vocab.hash():
        raise CheckpointError("checkpoint vocab hash does not match current vocab")
    if ck.backbone_seed != bb.seed:
        raise CheckpointError(
            f"checkpoint backbone seed {ck.backbone_seed} != backbone seed {bb.seed}"
        )
    return PromptBlock(P=ck.prompt.P.copy())


def _pooled_context(bb: FrozenBackbone, p: PromptBlock, x_ids: np.ndarray) -> np.ndarray:
    """Mean over the prompt rows and the input-token embedding rows."""
    total = p.P.sum(axis=0)
    if len(x_ids):
        total = total + bb.E[x_ids].sum(axis=0)
    return total / (p.m + len(x_ids))


def _step_states(bb: FrozenBackbone, ctx: np.ndarray, prev_ids: np.ndarray) -> np.ndarray:
    """tanh hidden states for each decoding step, (T, h)."""
    inputs = np.concatenate(
        [np.broadcast_to(ctx, (len(prev_ids), bb.d)), bb.E[prev_ids]], axis=1
    )
    return np.tanh(inputs @ bb.W.T + bb.b)


def sequence_logits(
    bb: FrozenBackbone, p: PromptBlock, x_ids: np.ndarray, prev_ids: np.ndarray
) -> np.ndarray:
    """Logits for every decoding step, teacher-forced on ``prev_ids``; (T, |V|)."""
    if prev_ids.size and (prev_ids.max() >= bb.vocab_size or prev_ids.min() < 0):
        raise LearnerError("token id out of vocabulary range")
    if x_ids.size and (x_ids.max() >= bb.vocab_size or x_ids.min() < 0):
        raise LearnerError("token id out of vocabulary range")
    ctx = _pooled_context(bb, p, x_ids)
    return _step_states(bb, ctx, prev_ids) @ bb.U.T


def forward(
    bb: FrozenBackbone, p: PromptBlock, x_ids: np.ndarray, y_prefix: np.ndarray
) -> np.ndarray:
    """Next-token logits given the input and the decoded prefix (starts at BOS)."""
    if len(y_prefix) == 0:
        raise LearnerError("y_prefix must start with BOS")
    return sequence_logits(bb, p, x_ids, y_prefix[-1:])[0]


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def per_step_nll(
    bb: FrozenBackbone, p: PromptBlock, x_ids: np.ndarray, y_ids: np.ndarray,
    bos_id: int,
) -> np.ndarray:
    """Teacher-forced negative log-likelihood per target position."""
    if len(y_ids) == 0:
        raise LearnerError("target must be nonempty (and end with EOS)")
    prev = np.concatenate([[bos_id], y_ids[:-1]])
    logits = sequence_logits(bb, p, x_ids, prev)
    return -_log_softmax(logits)[np.arange(len(y_ids)), y_ids]


def nll_loss(
    bb: FrozenBackbone, p: PromptBlock, x_ids: np.ndarray, y_ids: np.ndarray,
    bos_id: int,
) -> float:
    """Sum of per-step NLL (no length normalization)."""
    return float(per_step_nll(bb, p, x_ids, y_ids, bos_id).sum())


def grad_prompt(
    bb: FrozenBackbone, p: PromptBlock, x_ids: np.ndarray, y_ids: np.ndarray,
    bos_id: int,
) -> tuple[np.ndarray, float]:
    """Analytic gradient of the sample NLL w.r.t. the prompt matrix.

    The backbone receives no gradient. Because the prompt enters only through
    the pooled context mean, every prompt row gets the same gradient.
    Returns (gradient m x d, loss).
    """
    if len(y_ids) == 0:
        raise LearnerError("target must be nonempty (and end with EOS)")
    prev = np.concatenate([[bos_id], y_ids[:-1]])
    ctx = _pooled_context(bb, p, x_ids)
    Z = _step_states(bb, ctx, prev)          # (T, h)
    logits = Z @ bb.U.T                      # (T, |V|)
    logp = _log_softmax(logits)
    loss = float(-logp[np.arange(len(y_ids)), y_ids].sum())
    dlogits = np.exp(logp)
    dlogits[np.arange(len(y_ids)), y_ids] -= 1.0
    dZ = dlogits @ bb.U                      # (T, h)
    dpre = dZ * (1.0 - Z * Z)                # through tanh
    dctx = (dpre @ bb.W[:, : bb.d]).sum(axis=0)
    row = dctx / (p.m + len(x_ids))
    return np.tile(row, (p.m, 1)), loss


def train(
    bb: FrozenBackbone,
    p0: PromptBlock,
    data: list[tuple[np.ndarray, np.ndarray]],
    cfg: TrainConfig,
    vocab: Vocab,
    step_name: str,
    parent_lineage: tuple[str, ...] = (),
) -> Checkpoint:
    """Mini-batch gradient descent on the prompt only.

    ``data`` holds (input ids, target ids ending with EOS) pairs. Batch order
    is reshuffled every epoch with a generator seeded by ``cfg.seed``, so training
    is bit-reproducible. The backbone is never touched.
    """
    if not data:
        raise LearnerError("training data is empty")
    for _, y_ids in data:
        if len(y_ids) == 0:
            raise LearnerError("target must be nonempty (and end with EOS)")
    rng = np.random.default_rng(cfg.seed)
    P = p0.P.copy()
    n = len(data)
    m = p0.m
    batches_per_epoch = (n + cfg.batch - 1) // cfg.batch
    total_steps = cfg.epochs * batches_per_epoch
    step = 0

    # Static per-sample quantities: pooled input-embedding sums, padded
    # teacher-forcing tables, and step masks.
    sum_e = np.stack([
        bb.E[x].sum(axis=0) if len(x) else np.zeros(bb.d) for x, _ in data
    ])
    pool_n = np.array([m + len(x) for x, _ in data], dtype=np.float64)
    lengths = np.array([len(y) for _, y in data], dtype=np.int64)
    t_max = int(lengths.max())
    prev_pad = np.zeros((n, t_max), dtype=np.int64)
    gold_pad = np.zeros((n, t_max), dtype=np.int64)
    for i, (_, y) in enumerate(data):
        prev_pad[i, : len(y)] = np.concatenate([[vocab.bos_id], y[:-1]])
        gold_pad[i, : len(y)] = y
    mask = (np.arange(t_max)[None, :] < lengths[:, None]).astype(np.float64)

    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch):
            batch = order[start : start + cfg.batch]
            B = len(batch)
            T = int(lengths[batch].max())
            ctx = (P.sum(axis=0) + sum_e[batch]) / pool_n[batch, None]  # (B, d)
            prev = prev_pad[batch, :T]
            inputs = np.concatenate(
                [np.repeat(ctx[:, None, :], T, axis=1), bb.E[prev]], axis=2
            )
            Z = np.tanh(inputs @ bb.W.T + bb.b)                       # (B, T, h)
            logits = Z @ bb.U.T                                       # (B, T, V)
            shifted = logits - logits.max(axis=-1, keepdims=True)
            expd = np.exp(shifted)
            denom = expd.sum(axis=-1, keepdims=True)
            gold = gold_pad[batch, :T]
            bi, ti = np.indices((B, T))
            step_mask = mask[batch, :T]
            logp_gold = shifted[bi, ti, gold] - np.log(denom[..., 0])
            loss = float(-(logp_gold * step_mask).sum())
            if not np.isfinite(loss):
                raise LearnerError(f"training diverged at step {step} (non-finite loss)")
            dlogits = expd / denom
            dlogits[bi, ti, gold] -= 1.0
            dlogits *= step_mask[..., None]
            dpre = (dlogits @ bb.U) * (1.0 - Z * Z)                   # (B, T, h)
            dctx = (dpre @ bb.W[:, : bb.d]).sum(axis=1)               # (B, d)
            row = (dctx / pool_n[batch, None]).sum(axis=0) / B
            P = P - learning_rate(cfg, step, total_steps) * row       # same row for all m
            step += 1
    return Checkpoint(
        prompt=PromptBlock(P=P),
        backbone_seed=bb.seed,
        d=bb.d,
        h=bb.h,
        init_scale=bb.init_scale,
        vocab=vocab,
        lineage=parent_lineage + (step_name,),
    )


def generate(
    bb: FrozenBackbone,
    p: PromptBlock,
    x_ids: np.ndarray,
    vocab: Vocab,
    max_len: int = 64,
    decode_kind: str = GREEDY,
    beam_width: int = 1,
) -> list[int]:
    """Decode token ids. Greedy ties break toward the lowest token id; beam
    search is length-normalized with lexicographic tie-breaking."""
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    ctx = _pooled_context(bb, p, x_ids)
    eos = vocab.eos_id

    def step_logprobs(prev_id: int) -> np.ndarray:
        logits = _step_states(bb, ctx, np.array([prev_id])) @ bb.U.T
        return _log_softmax(logits[0])

    if decode_kind == GREEDY or (decode_kind == BEAM and beam_width == 1):
        out: list[int] = []
        prev = vocab.bos_id
        while len(out) < max_len:
            nxt = int(np.argmax(step_logprobs(prev)))  # argmax -> lowest id on ties
            if nxt == eos:
                break
            out.append(nxt)
            prev = nxt
        return out
    if decode_kind != BEAM:
        raise ValueError(f"unknown decode kind {decode_kind!r}")

    # (ids, total logprob, finished); score = logprob / len(ids)
    beams: list[tuple[tuple[int, ...], float, bool]] = [((), 0.0, False)]
    for _ in range(max_len + 1):  # +1 allows the final EOS transition
        if all(done for _, _, done in beams):
            break
        candidates: list[tuple[tuple[int, ...], float, bool]] = []
        for ids, lp, done in beams:
            if done:
                candidates.append((ids, lp, True))
                continue
            prev = ids[-1] if ids else vocab.bos_id
            logprobs = step_logprobs(prev)
            for tok in range(len(logprobs)):
                new_lp = lp + float(logprobs[tok])
                if tok == eos:
                    candidates.append((ids, new_lp, True))
                elif len(ids) + 1 >= max_len:
                    candidates.append((ids + (tok,), new_lp, True))
                else:
                    candidates.append((ids + (tok,), new_lp, False))
        candidates.sort(key=lambda c: (-(c[1] / max(1, len(c[0]))), c[0]))
        beams = candidates[:beam_width]
    best = min(beams, key=lambda c: (-(c[1] / max(1, len(c[0]))), c[0]))
    return list(best[0])


def batch_greedy(
    bb: FrozenBackbone,
    p: PromptBlock,
    inputs: list[np.ndarray],
    vocab: Vocab,
    max_lens: list[int],
) -> list[list[int]]:
    """Lock-step greedy decoding over many inputs; matches ``generate`` exactly."""
    n = len(inputs)
    if n == 0:
        return []
    psum = p.P.sum(axis=0)
    ctx = np.stack([
        (psum + (bb.E[x].sum(axis=0) if len(x) else 0.0)) / (p.m + len(x))
        for x in inputs
    ])
    limits = np.asarray(max_lens, dtype=np.int64)
    prev = np.full(n, vocab.bos_id, dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    outs: list[list[int]] = [[] for _ in range(n)]
    for step in range(int(limits.max())):
        alive &= limits > step
        idx = np.nonzero(alive)[0]
        if not len(idx):
            break
        Z = np.tanh(
            np.concatenate([ctx[idx], bb.E[prev[idx]]], axis=1) @ bb.W.T + bb.b
        )
        nxt = (Z @ bb.U.T).argmax(axis=1)
        for k, i in enumerate(idx):
            tok = int(nxt[k])
            if tok == vocab.eos_id:
                alive[i] = False
            else:
                outs[i].append(tok)
                prev[i] = tok
    return outs


class LearnerBackend(GenerationBackend):
    """Adapts a (backbone, prompt, vocab) triple to the generation interface."""

    kind = "learner"

    def __init__(self, bb: FrozenBackbone, prompt: PromptBlock, vocab: Vocab):
        self.bb = bb
        self.prompt = prompt
        self.vocab = vocab

    @classmethod
    def from_checkpoint(cls, ck: Checkpoint) -> "LearnerBackend":
        bb = FrozenBackbone.create(ck.backbone_seed, len(ck.vocab), d=ck.d, h=ck.h,
                                   init_scale=ck.init_scale)
        return cls(bb=bb, prompt=ck.prompt, vocab=ck.vocab)

    @classmethod
    def from_checkpoint_file(cls, path: str | Path) -> "LearnerBackend":
        return cls.from_checkpoint(Checkpoint.load(path))

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        ids = generate(
            self.bb,
            self.prompt,
            self.vocab.encode(request.input),
            self.vocab,
            max_len=request.max_len,
            decode_kind=request.decode.kind,
            beam_width=request.decode.beam_width,
        )
        return GenerationResponse(output=self.vocab.decode(ids))

    def batch_generate(self, requests_: list[GenerationRequest]) -> list[GenerationResponse]:
        """Vectorized lock-step decoding when every request is greedy."""
        if any(req.decode.kind == BEAM and req.decode.beam_width > 1 for req in requests_):
            return super().batch_generate(requests_)
        outs = batch_greedy(
            self.bb,
            self.prompt,
            [self.vocab.encode(req.input) for req in requests_],
            self.vocab,
            [req.max_len for req in requests_],
        )
        return [GenerationResponse(output=self.vocab.decode(ids)) for ids in outs]
