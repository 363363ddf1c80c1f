"""Chat-completion gateway: an HTTP backend plus deterministic local mocks."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Protocol, Sequence

import httpx

from .tkg import Vocabulary
from .verbalize import SELECT_KINDS, PromptBundle

logger = logging.getLogger(__name__)

BACKEND_KINDS = ("http_chat", "scripted_mock", "recency_mock", "oracle_mock")

_KIND_FIELDS = {
    "http_chat": {"endpoint", "model", "auth_env", "timeout", "retries", "backoff"},
    "scripted_mock": {"script"},
    "recency_mock": set(),
    "oracle_mock": {"hit_probability", "seed", "answer_count"},
}


@dataclass(frozen=True)
class GenerationParams:
    max_tokens: int = 8000
    temperature: float = 0.0
    top_p: float = 1.0


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "recency_mock"
    endpoint: str | None = None
    model: str | None = None
    auth_env: str | None = None
    timeout: float | None = None
    retries: int | None = None
    backoff: float | None = None
    script: str | None = None
    hit_probability: float | None = None
    seed: int | None = None
    answer_count: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in BACKEND_KINDS:
            raise ValueError(f"unknown backend kind {self.kind!r}")
        own = _KIND_FIELDS[self.kind]
        stray = [
            f.name
            for f in fields(self)
            if f.name != "kind" and f.name not in own and getattr(self, f.name) is not None
        ]
        if stray:
            raise ValueError(f"{self.kind} backend does not take {', '.join(stray)}")
        if self.kind == "http_chat" and not (self.endpoint and self.model):
            raise ValueError("http_chat backend needs endpoint and model")
        if self.kind == "scripted_mock" and not self.script:
            raise ValueError("scripted_mock backend needs a script path")
        if self.kind == "oracle_mock":
            p = self.hit_probability if self.hit_probability is not None else 1.0
            if not 0.0 <= p <= 1.0:
                raise ValueError("hit_probability must lie in [0, 1]")

    @classmethod
    def http(cls, endpoint: str, model: str, auth_env: str | None = None, timeout: float = 120.0,
             retries: int = 3, backoff: float = 1.0) -> "BackendConfig":
        return cls("http_chat", endpoint=endpoint, model=model, auth_env=auth_env,
                   timeout=timeout, retries=retries, backoff=backoff)

    @classmethod
    def scripted(cls, script: str | Path) -> "BackendConfig":
        return cls("scripted_mock", script=str(script))

    @classmethod
    def oracle(cls, hit_probability: float = 1.0, seed: int = 0, answer_count: int = 1) -> "BackendConfig":
        return cls("oracle_mock", hit_probability=hit_probability, seed=seed, answer_count=answer_count)


@dataclass
class Transcript:
    request: str
    response: str | None
    latency: float
    backend: str
    attempts: int
    started: float = 0.0
    finished: float = 0.0
    step_kind: str | None = None
    error: str | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), ensure_ascii=False)


class GatewayError(RuntimeError):
    def __init__(self, message: str, transcript: Transcript | None = None, attempts: int = 1) -> None:
        super().__init__(message)
        self.transcript = transcript
        self.attempts = attempts


class TransportError(GatewayError):
    pass


class ProtocolError(GatewayError):
    pass


class Backend(Protocol):
    kind: str

    def __call__(self, bundle: PromptBundle, params: GenerationParams) -> tuple[str, int]:
        """Return (response text, attempts used)."""


def _stable_seed(*parts: object) -> int:
    digest = hashlib.sha256("\x1f".join(map(str, parts)).encode()).digest()
    return int.from_bytes(digest[:8], "big")


class RecencyMock:
    """Selects the first ``n`` ids (newest histories); answers with the newest tail objects."""

    kind = "recency_mock"

    def __init__(self, vocab: Vocabulary | None = None, kg=None) -> None:
        self.vocab = vocab
        self.kg = kg

    def __call__(self, bundle: PromptBundle, params: GenerationParams) -> tuple[str, int]:
        if bundle.step_kind in SELECT_KINDS:
            k = min(bundle.n or len(bundle.id_map), len(bundle.id_map))
            return ", ".join(str(i) for i in range(k)), 1
        if bundle.step_kind in ("answer", "explain") and self.vocab is not None and self.kg is not None:
            names, seen = [], set()
            for chain in bundle.chains:
                obj = int(self.kg.facts[chain.tail, 2])
                if obj not in seen:
                    seen.add(obj)
                    names.append(self.vocab.entity(obj))
            body = "\n".join(f"{i}. {name}" for i, name in enumerate(names, 1))
            return "Possible answers:\n" + body, 1
        if bundle.step_kind == "leakage":
            return "No.", 1
        return "", 1


class OracleMock:
    """Puts the ground truth first with probability ``hit_probability``.

    Misses list only seeded random non-truth entities.  Each bundle draws
    from its own RNG so results do not depend on call order.
    """

    kind = "oracle_mock"

    def __init__(self, config: BackendConfig, vocab: Vocabulary) -> None:
        self.p = 1.0 if config.hit_probability is None else config.hit_probability
        self.seed = config.seed or 0
        self.count = config.answer_count or 1
        self.vocab = vocab

    def __call__(self, bundle: PromptBundle, params: GenerationParams) -> tuple[str, int]:
        if bundle.step_kind in SELECT_KINDS:
            k = min(bundle.n or len(bundle.id_map), len(bundle.id_map))
            return ", ".join(str(i) for i in range(k)), 1
        if bundle.step_kind == "leakage":
            return "No.", 1
        q = bundle.query
        if q is None:
            raise ProtocolError("oracle mock needs the bundle's query")
        rng = random.Random(_stable_seed(self.seed, q.index, q.subject, q.relation, q.time, bundle.step_kind))
        hit = rng.random() < self.p
        others = [e for e in range(self.vocab.num_entities) if e != q.ground_truth]
        distractors = rng.sample(others, min(len(others), self.count - 1 if hit else self.count))
        picked = ([q.ground_truth] if hit else []) + distractors
        lines = [f"{i}. {self.vocab.entity(e)}" for i, e in enumerate(picked, 1)]
        if bundle.step_kind == "explain":
            lines.append("Explanation:")
            lines += [f"{i}. {self.vocab.entity(e)}: canned oracle explanation." for i, e in enumerate(picked, 1)]
        return "\n".join(lines), 1


class ScriptedMock:
    """Replays recorded responses.

    The script is JSONL; each record holds ``response`` and either
    ``request`` (exact prompt text) or ``match`` (a substring of it),
    optionally narrowed by ``step_kind``.  Exact matches win; otherwise the
    first matching record in file order is used.  A transcript log is a
    valid script.
    """

    kind = "scripted_mock"

    def __init__(self, path: str | Path) -> None:
        self.records = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    if rec.get("response") is None:
                        continue
                    self.records.append(rec)
        self.exact = {}
        for rec in self.records:
            if "request" in rec:
                self.exact.setdefault(rec["request"], rec["response"])

    def __call__(self, bundle: PromptBundle, params: GenerationParams) -> tuple[str, int]:
        if bundle.text in self.exact:
            return self.exact[bundle.text], 1
        for rec in self.records:
            kind = rec.get("step_kind")
            if kind is not None and kind != bundle.step_kind:
                continue
            if "match" in rec and rec["match"] in bundle.text:
                return rec["response"], 1
        raise ProtocolError(f"no scripted response for {bundle.step_kind} prompt")


_TRANSIENT_STATUS = {408, 409, 425, 429, 500, 502, 503, 504}


class HttpChatBackend:
    """Single-user-message chat completion over HTTP with retry and backoff."""

    kind = "http_chat"

    def __init__(self, config: BackendConfig, client: httpx.Client | None = None,
                 sleep: Callable[[float], None] = time.sleep) -> None:
        self.config = config
        self.timeout = config.timeout if config.timeout is not None else 120.0
        self.retries = config.retries if config.retries is not None else 3
        self.backoff = config.backoff if config.backoff is not None else 1.0
        self.client = client or httpx.Client(timeout=self.timeout)
        self.sleep = sleep

    def payload(self, text: str, params: GenerationParams) -> dict:
        return {
            "model": self.config.model,
            "messages": [{"role": "user", "content": text}],
            "max_tokens": params.max_tokens,
            "temperature": params.temperature,
            "top_p": params.top_p,
        }

    def headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.config.auth_env:
            token = os.environ.get(self.config.auth_env)
            if token:
                headers["Authorization"] = f"Bearer {token}"
        return headers

    def __call__(self, bundle: PromptBundle, params: GenerationParams) -> tuple[str, int]:
        body = self.payload(bundle.text, params)
        delay = self.backoff
        last_error = "no attempt made"
        for attempt in range(1, self.retries + 2):
            try:
                resp = self.client.post(self.config.endpoint, json=body, headers=self.headers(),
                                        timeout=self.timeout)
            except httpx.TransportError as exc:
                last_error = f"{type(exc).__name__}: {exc}"
            else:
                if resp.status_code in _TRANSIENT_STATUS:
                    last_error = f"HTTP {resp.status_code}"
                elif resp.status_code >= 400:
                    raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}", attempts=attempt)
                else:
                    try:
                        return resp.json()["choices"][0]["message"]["content"], attempt
                    except (ValueError, KeyError, IndexError, TypeError) as exc:
                        raise ProtocolError(f"unparseable chat reply ({exc!r})", attempts=attempt) from exc
            if attempt <= self.retries:
                logger.warning("chat request failed (%s); retry %d in %.1fs", last_error, attempt, delay)
                self.sleep(delay)
                delay *= 2
        raise TransportError(f"retries exhausted after {self.retries + 1} attempts: {last_error}",
                             attempts=self.retries + 1)


def make_backend(config: BackendConfig, vocab: Vocabulary | None = None, kg=None) -> Backend:
    if config.kind == "http_chat":
        return HttpChatBackend(config)
    if config.kind == "scripted_mock":
        return ScriptedMock(config.script)
    if config.kind == "oracle_mock":
        if vocab is None:
            raise ValueError("oracle mock needs the vocabulary")
        return OracleMock(config, vocab)
    return RecencyMock(vocab, kg)


class Gateway:
    """Dispatches bundles to one backend with at most ``max_in_flight`` calls outstanding."""

    def __init__(
        self,
        backend: Backend,
        params: GenerationParams = GenerationParams(),
        max_in_flight: int = 4,
        log_path: str | Path | None = None,
    ) -> None:
        if max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        self.backend = backend
        self.params = params
        self.max_in_flight = max_in_flight
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._log_lock = threading.Lock()
        self.log_path = Path(log_path) if log_path else None
        self.calls = 0

    @classmethod
    def from_config(cls, config: BackendConfig, params: GenerationParams = GenerationParams(),
                    vocab: Vocabulary | None = None, kg=None, **kwargs) -> "Gateway":
        return cls(make_backend(config, vocab, kg), params, **kwargs)

    def _log(self, transcript: Transcript) -> None:
        with self._log_lock:
            self.calls += 1
            if self.log_path is not None:
                with self.log_path.open("a", encoding="utf-8") as fh:
                    fh.write(transcript.to_json() + "\n")

    def complete(self, bundle: PromptBundle) -> tuple[str, Transcript]:
        with self._slots:
            started = time.monotonic()
            try:
                text, attempts = self.backend(bundle, self.params)
            except GatewayError as exc:
                finished = time.monotonic()
                tr = Transcript(bundle.text, None, finished - started, self.backend.kind,
                                exc.attempts, started, finished,
                                bundle.step_kind, str(exc))
                exc.transcript = tr
                self._log(tr)
                raise
            finished = time.monotonic()
        tr = Transcript(bundle.text, text, finished - started, self.backend.kind, attempts,
                        started, finished, bundle.step_kind)
        self._log(tr)
        return text, tr

    def complete_batch(self, bundles: Sequence[PromptBundle]) -> list:
        """Responses in input order; a failed slot holds its ``GatewayError``."""

        def one(bundle):
            try:
                return self.complete(bundle)
            except GatewayError as exc:
                return exc

        with ThreadPoolExecutor(max_workers=self.max_in_flight) as pool:
            return list(pool.map(one, bundles))


def complete(bundle: PromptBundle, params: GenerationParams, config: BackendConfig,
             vocab: Vocabulary | None = None) -> tuple[str, Transcript]:
    return Gateway.from_config(config, params, vocab=vocab, max_in_flight=1).complete(bundle)


def complete_batch(bundles: Sequence[PromptBundle], params: GenerationParams, config: BackendConfig,
                   max_in_flight: int, vocab: Vocabulary | None = None) -> list:
    gateway = Gateway.from_config(config, params, vocab=vocab, max_in_flight=max_in_flight)
    return gateway.complete_batch(bundles)
