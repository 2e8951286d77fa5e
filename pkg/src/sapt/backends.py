"""Black-box generation backends behind a single ``generate`` interface.

Four flavors: an identity echo, a rule-based slot extractor, a remote HTTP
client for the POST /generate wire protocol, and the built-in learner (which
lives in :mod:`sapt.learner` and implements the same interface). A file-backed
cache makes remote probing replay-stable.
"""

from __future__ import annotations

import hashlib
import json
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import requests

GREEDY = "greedy"
BEAM = "beam"


class BackendError(RuntimeError):
    """Raised when a backend cannot produce an output."""


class TransportError(BackendError):
    """Remote call failed after all retry attempts."""

    def __init__(self, message: str, attempts: int):
        super().__init__(message)
        self.attempts = attempts


class CacheError(BackendError):
    """Cache file is unreadable or contains a corrupt entry."""


class BatchError(BackendError):
    """One or more batch items failed; positions recorded in ``errors``."""

    def __init__(self, errors: dict[int, Exception]):
        positions = ", ".join(str(i) for i in sorted(errors))
        super().__init__(f"batch items failed at positions: {positions}")
        self.errors = errors


@dataclass(frozen=True)
class Decode:
    kind: str = GREEDY
    beam_width: int = 1

    def __post_init__(self):
        if self.kind not in (GREEDY, BEAM):
            raise ValueError(f"decode kind must be greedy or beam, got {self.kind!r}")
        if self.beam_width < 1:
            raise ValueError(f"beam width must be >= 1, got {self.beam_width}")

    @classmethod
    def beam(cls, width: int) -> "Decode":
        return cls(kind=BEAM, beam_width=width)


@dataclass(frozen=True)
class GenerationRequest:
    input: str
    max_len: int = 64
    decode: Decode = field(default_factory=Decode)

    def __post_init__(self):
        if self.max_len < 1:
            raise ValueError(f"max_len must be >= 1, got {self.max_len}")


@dataclass(frozen=True)
class GenerationResponse:
    output: str


class GenerationBackend:
    """Interface shared by all backends; subclasses implement ``generate``."""

    kind = "abstract"

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        raise NotImplementedError

    def batch_generate(self, requests_: list[GenerationRequest]) -> list[GenerationResponse]:
        """Sequential map over ``generate``; per-item errors collected positionally."""
        results: list[GenerationResponse | None] = []
        errors: dict[int, Exception] = {}
        for i, req in enumerate(requests_):
            try:
                results.append(self.generate(req))
            except Exception as e:  # noqa: BLE001 - reported positionally below
                results.append(None)
                errors[i] = e
        if errors:
            raise BatchError(errors)
        return results  # type: ignore[return-value]


class EchoBackend(GenerationBackend):
    """Returns the input verbatim."""

    kind = "echo"

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        return GenerationResponse(output=request.input)


_SLOT_RE = re.compile(r"([A-Za-z0-9]+)=(\S+)")


def rule_dst_extract(text: str) -> str:
    """Extract ``slot=value`` mentions into the linearized state format.

    Later mentions of a slot overwrite earlier ones (dialogue-state
    semantics); slot order follows first mention.
    """
    state: dict[str, str] = {}
    for slot, value in _SLOT_RE.findall(text):
        state[slot] = value  # dict preserves first-mention order on re-assignment
    return ", ".join(f"{slot} is {value}" for slot, value in state.items())


class RuleDstBackend(GenerationBackend):
    """Deterministic stand-in for a trained dialogue-state model."""

    kind = "rule_dst"

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        return GenerationResponse(output=rule_dst_extract(request.input))


class ResponseCache:
    """Append-only key-value log of generation outputs.

    Each line is ``{"key_hash": ..., "output": ...}``. Writes are serialized
    internally; lookups are from an in-memory view of the log.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._entries: dict[str, str] = {}
        if self.path.exists():
            self._load()

    def _load(self) -> None:
        with open(self.path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                    self._entries[record["key_hash"]] = record["output"]
                except (json.JSONDecodeError, KeyError, TypeError) as e:
                    raise CacheError(
                        f"{self.path}: corrupt cache entry on line {lineno}: {e}"
                    ) from e

    @staticmethod
    def key_for(kind: str, endpoint: str, request: GenerationRequest) -> str:
        payload = json.dumps(
            [kind, endpoint, request.input, request.decode.kind,
             request.decode.beam_width, request.max_len],
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def get(self, key: str) -> str | None:
        with self._lock:
            return self._entries.get(key)

    def put(self, key: str, output: str) -> None:
        with self._lock:
            if key in self._entries:
                return
            self._entries[key] = output
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps({"key_hash": key, "output": output}) + "\n")


class CachingBackend(GenerationBackend):
    """Wraps a backend with a persistent response cache."""

    def __init__(self, inner: GenerationBackend, cache: ResponseCache, endpoint: str = ""):
        self.inner = inner
        self.cache = cache
        self.endpoint = endpoint
        self.kind = inner.kind

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        key = ResponseCache.key_for(self.inner.kind, self.endpoint, request)
        cached = self.cache.get(key)
        if cached is not None:
            return GenerationResponse(output=cached)
        response = self.inner.generate(request)
        self.cache.put(key, response.output)
        return response


class RemoteBackend(GenerationBackend):
    """HTTP client for the POST /generate wire protocol."""

    kind = "remote"

    def __init__(self, endpoint: str, attempts: int = 3, timeout: float = 30.0,
                 backoff: float = 0.2):
        if not endpoint.startswith(("http://", "https://")):
            raise ValueError(f"endpoint must be an http(s) URL, got {endpoint!r}")
        self.endpoint = endpoint.rstrip("/")
        self.attempts = attempts
        self.timeout = timeout
        self.backoff = backoff
        self._session = requests.Session()

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        body = {
            "input": request.input,
            "max_len": request.max_len,
            "decode": request.decode.kind,
            "beam_width": request.decode.beam_width,
        }
        last_error: Exception | None = None
        for attempt in range(1, self.attempts + 1):
            try:
                resp = self._session.post(
                    f"{self.endpoint}/generate", json=body, timeout=self.timeout
                )
                if resp.status_code != 200:
                    raise BackendError(
                        f"{self.endpoint}/generate returned status {resp.status_code}"
                    )
                return GenerationResponse(output=resp.json()["output"])
            except (requests.RequestException, BackendError, KeyError, ValueError) as e:
                last_error = e
                if attempt < self.attempts:
                    time.sleep(self.backoff * attempt)
        raise TransportError(
            f"remote generation failed after {self.attempts} attempts: {last_error}",
            attempts=self.attempts,
        )


def make_backend(kind: str, *, endpoint: str | None = None,
                 checkpoint: str | Path | None = None,
                 cache_path: str | Path | None = None) -> GenerationBackend:
    """Build a backend from a descriptor; optionally wrap it with a cache."""
    if kind == "echo":
        backend: GenerationBackend = EchoBackend()
    elif kind == "rule_dst":
        backend = RuleDstBackend()
    elif kind == "remote":
        if not endpoint:
            raise ValueError("remote backend requires an endpoint")
        backend = RemoteBackend(endpoint)
    elif kind == "learner":
        if checkpoint is None:
            raise ValueError("learner backend requires a checkpoint path")
        from sapt.learner import LearnerBackend

        backend = LearnerBackend.from_checkpoint_file(checkpoint)
    else:
        raise ValueError(f"unknown backend kind {kind!r}")
    if cache_path is not None:
        backend = CachingBackend(backend, ResponseCache(cache_path),
                                 endpoint=endpoint or "")
    return backend
