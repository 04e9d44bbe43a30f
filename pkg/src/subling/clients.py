"""JSON-over-HTTP clients for the translator, judge and term-extractor roles,
plus deterministic in-process mocks."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Protocol, Sequence
from urllib.parse import urlparse

import httpx

log = logging.getLogger(__name__)


class ClientError(RuntimeError):
    pass


class TransportError(ClientError):
    """Network failure, timeout or non-success status after all retries."""


class ProtocolError(ClientError):
    """Response body does not follow the wire protocol."""

    def __init__(self, message: str, body: str = ""):
        super().__init__(message)
        self.body = body


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 1.0
    top_k: int = 40
    top_p: float = 0.9
    seed: Optional[int] = None

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must lie in (0, 1]")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    base_backoff: float = 0.5
    multiplier: float = 2.0
    retry_statuses: tuple[int, ...] = (429, 500, 502, 503, 504)

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if self.base_backoff <= 0 or self.multiplier <= 1:
            raise ValueError("backoff must be positive and strictly increasing")

    def delay(self, attempt: int) -> float:
        """Sleep before retry number ``attempt`` (1-based)."""
        return self.base_backoff * self.multiplier ** (attempt - 1)


@dataclass(frozen=True)
class Endpoint:
    base_url: str
    token_env: Optional[str] = None
    timeout: float = 60.0

    def __post_init__(self):
        parsed = urlparse(self.base_url)
        if parsed.scheme not in ("http", "https") or not parsed.netloc:
            raise ValueError(f"malformed endpoint URL {self.base_url!r}")
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")


class Translator(Protocol):
    def translate(self, context: str, lines: Sequence[str], prefix: Sequence[str],
                  params: SamplingParams, k: int) -> list[str]: ...


class Judge(Protocol):
    def judge_scores(self, source: str, context: str, candidates: Sequence[str]) -> list[int]: ...


class Extractor(Protocol):
    def extract_terms(self, source_lines: Sequence[str],
                      target_lines: Sequence[str]) -> list[tuple[str, str, str]]: ...


def _check_translate_args(lines, prefix, k):
    if not lines:
        raise ValueError("no lines to translate")
    if len(prefix) >= len(lines):
        raise ValueError("prefix must be shorter than the line list")
    if k < 1:
        raise ValueError("k must be >= 1")


def clip_score(value) -> int:
    """Round half up, then clip to 0..100."""
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise TypeError(f"non-numeric score {value!r}")
    return int(min(100, max(0, math.floor(value + 0.5))))


def parse_scores(payload, n: int, body: str = "") -> list[int]:
    scores = payload.get("scores") if isinstance(payload, dict) else None
    if not isinstance(scores, list):
        raise ProtocolError("response lacks a scores list", body)
    if len(scores) != n:
        raise ProtocolError(f"expected {n} scores, got {len(scores)}", body)
    try:
        return [clip_score(s) for s in scores]
    except TypeError as exc:
        raise ProtocolError(str(exc), body) from None


def parse_candidates(payload, k: int, body: str = "") -> list[str]:
    cands = payload.get("candidates") if isinstance(payload, dict) else None
    if not isinstance(cands, list) or not all(isinstance(c, str) for c in cands):
        raise ProtocolError("response lacks a candidates list of strings", body)
    if len(cands) != k:
        raise ProtocolError(f"expected {k} candidates, got {len(cands)}", body)
    return cands


def parse_terms(payload, body: str = "") -> list[tuple[str, str, str]]:
    terms = payload.get("terms") if isinstance(payload, dict) else None
    if not isinstance(terms, list):
        raise ProtocolError("response lacks a terms list", body)
    out = []
    for n, t in enumerate(terms):
        if not isinstance(t, dict):
            raise ProtocolError(f"term {n} is not an object", body)
        for key in ("surface", "type", "translation"):
            if not isinstance(t.get(key), str):
                raise ProtocolError(f"term {n} lacks string field {key!r}", body)
        out.append((t["surface"], t["type"], t["translation"]))
    return out


class HttpModelClient:
    """One endpoint, one POST per call. Implements all three model roles."""

    def __init__(self, endpoint: Endpoint, retry: RetryPolicy = RetryPolicy(),
                 transport: Optional[httpx.BaseTransport] = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.endpoint = endpoint
        self.retry = retry
        self._sleep = sleep
        headers = {}
        if endpoint.token_env:
            token = os.environ.get(endpoint.token_env)
            if token:
                headers["Authorization"] = f"Bearer {token}"
        self._http = httpx.Client(timeout=endpoint.timeout, headers=headers, transport=transport)

    def close(self):
        self._http.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _post(self, body: dict):
        data = json.dumps(body, ensure_ascii=False).encode("utf-8")
        last = None
        for attempt in range(1, self.retry.max_attempts + 1):
            if attempt > 1:
                self._sleep(self.retry.delay(attempt - 1))
            try:
                resp = self._http.post(self.endpoint.base_url, content=data,
                                       headers={"Content-Type": "application/json"})
            except httpx.HTTPError as exc:
                last = f"{type(exc).__name__}: {exc}"
                log.warning("%s attempt %d failed: %s", body["role"], attempt, last)
                continue
            if resp.status_code in self.retry.retry_statuses:
                last = f"HTTP {resp.status_code}"
                log.warning("%s attempt %d failed: %s", body["role"], attempt, last)
                continue
            if resp.status_code >= 400:
                raise TransportError(f"{body['role']}: HTTP {resp.status_code}")
            text = resp.text
            try:
                return json.loads(text), text
            except json.JSONDecodeError:
                raise ProtocolError(f"{body['role']}: response is not JSON", text) from None
        raise TransportError(f"{body['role']}: giving up after {self.retry.max_attempts} attempts ({last})")

    def translate(self, context, lines, prefix, params: SamplingParams, k: int) -> list[str]:
        _check_translate_args(lines, prefix, k)
        payload, body = self._post({
            "role": "translator", "context": context, "lines": list(lines),
            "prefix": list(prefix), "k": k, "params": params.to_json(),
        })
        return parse_candidates(payload, k, body)

    def judge_scores(self, source, context, candidates) -> list[int]:
        if not candidates:
            raise ValueError("no candidates to score")
        payload, body = self._post({
            "role": "judge", "source": source, "context": context, "candidates": list(candidates),
        })
        return parse_scores(payload, len(candidates), body)

    def extract_terms(self, source_lines, target_lines) -> list[tuple[str, str, str]]:
        if len(source_lines) != len(target_lines):
            raise ValueError("source and target line lists differ in length")
        payload, body = self._post({
            "role": "extractor", "source_lines": list(source_lines), "target_lines": list(target_lines),
        })
        return parse_terms(payload, body)


# ---------------------------------------------------------------- mocks

def stable_hash(*parts) -> int:
    """64-bit blake2b digest of a JSON encoding of ``parts``."""
    blob = json.dumps(parts, ensure_ascii=False, separators=(",", ":")).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "big")


def _swap_halves(s):
    words = s.split()
    if len(words) < 2:
        return s[len(s) // 2:] + s[: len(s) // 2]
    mid = len(words) // 2
    return " ".join(words[mid:] + words[:mid])


REWRITE_RULES: tuple[Callable[[str], str], ...] = (
    lambda s: s,
    lambda s: s + "!",
    lambda s: s + "...",
    lambda s: "Well, " + s,
    lambda s: s.upper(),
    lambda s: s.lower(),
    _swap_halves,
    lambda s: "“" + s + "”",
)


@dataclass
class MockTranslator:
    """Candidate ``j`` is a rewrite rule picked by hashing (line, prefix, seed, j)."""

    seed: int = 0
    calls: int = field(default=0, compare=False)

    def translate(self, context, lines, prefix, params: SamplingParams, k: int) -> list[str]:
        _check_translate_args(lines, prefix, k)
        self.calls += 1
        line = lines[len(prefix)]
        seed = self.seed if params.seed is None else params.seed
        return [REWRITE_RULES[stable_hash(line, list(prefix), seed, j) % len(REWRITE_RULES)](line)
                for j in range(k)]


@dataclass
class MockJudge:
    """Score = 50 + (hash of the candidate mod 51)."""

    def judge_scores(self, source, context, candidates) -> list[int]:
        if not candidates:
            raise ValueError("no candidates to score")
        return [50 + stable_hash(c) % 51 for c in candidates]


@dataclass
class MockExtractor:
    """Returns the planted ``surface -> (type, translation)`` entries whose
    surface occurs in the source lines, in dictionary order."""

    dictionary: dict[str, tuple[str, str]] = field(default_factory=dict)

    def extract_terms(self, source_lines, target_lines) -> list[tuple[str, str, str]]:
        if len(source_lines) != len(target_lines):
            raise ValueError("source and target line lists differ in length")
        return [(surface, tp, tr) for surface, (tp, tr) in self.dictionary.items()
                if any(surface in line for line in source_lines)]
