"""Generation backends: an OpenAI-compatible completions client and two
deterministic mocks (a replayed script and a rule-based evidence seeker).

Every backend exposes ``generate_stream(request)``, a generator that yields
:class:`GenerationChunk` objects and returns a :class:`FinishReason`. Use
:func:`collect` to drain one into ``(chunks, finish)``.

When a stop sequence fires, the emitted text ends with that stop sequence
(it is included, never cut off or run past).
"""

from __future__ import annotations

import json
import math
import os
import re
import threading
import time
import zlib
from collections.abc import Callable, Generator, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import httpx
import numpy as np

from .protocol import ANSWER_CLOSE, ANSWER_OPEN, QUERY_CLOSE, QUERY_OPEN, STOP_SEQUENCES

HTTP = "http-endpoint"
SCRIPTED = "scripted-mock"
EVIDENCE = "evidence-mock"

MAX_TOP_LOGPROBS = 20

_DELIM = r"</?(?:think|query|answer|knowledge)>"
_TOKEN_RE = re.compile(rf"{_DELIM}|\s+(?={_DELIM})|\s*\w+|\s*[^\w\s]|\s+")


class BackendError(Exception):
    pass


class TransportError(BackendError):
    """Endpoint unreachable after all retries."""


class ProtocolError(BackendError):
    """Endpoint answered with something that is not a completions response."""


class FixtureMismatch(BackendError):
    """A scripted mock was asked for a turn its script does not cover."""


class ScriptExhausted(FixtureMismatch):
    pass


@dataclass(frozen=True)
class GenerationRequest:
    prompt: str
    stop_sequences: tuple[str, ...] = STOP_SEQUENCES
    max_tokens: int = 1024
    temperature: float = 1.0
    top_logprobs: int = 5
    seed: int | None = None

    def __post_init__(self):
        if not self.prompt:
            raise ValueError("prompt must be nonempty")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not 0 <= self.top_logprobs <= MAX_TOP_LOGPROBS:
            raise ValueError(f"top_logprobs must lie in [0, {MAX_TOP_LOGPROBS}]")


@dataclass(frozen=True)
class GenerationChunk:
    token_text: str
    logprob: float
    top_alternatives: tuple[tuple[str, float], ...] = ()
    # True for text the endpoint swallowed (an excluded stop sequence) and we re-appended
    synthetic: bool = False

    def to_dict(self) -> dict:
        d = {"text": self.token_text, "logprob": self.logprob,
             "top": [[t, lp] for t, lp in self.top_alternatives]}
        if self.synthetic:
            d["synthetic"] = True
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenerationChunk":
        return cls(d["text"], float(d["logprob"]),
                   tuple((t, float(lp)) for t, lp in d.get("top", [])),
                   bool(d.get("synthetic", False)))


@dataclass(frozen=True)
class FinishReason:
    kind: str  # "stop_sequence" | "length" | "end_of_sequence"
    stop: str | None = None

    def to_dict(self) -> dict:
        return {"kind": self.kind, "stop": self.stop}


def collect(stream: Generator[GenerationChunk, None, FinishReason]) -> tuple[list[GenerationChunk], FinishReason]:
    chunks = []
    while True:
        try:
            chunks.append(next(stream))
        except StopIteration as stop:
            return chunks, stop.value


def tokenize(text: str) -> list[str]:
    """Deterministic mock tokenizer; tag delimiters are single tokens."""
    toks = _TOKEN_RE.findall(text)
    assert "".join(toks) == text
    return toks


def _emit(tokens: Sequence[tuple[str, float, tuple]], request: GenerationRequest):
    """Replay prepared tokens honouring max_tokens and stop sequences."""
    text = ""
    emitted = 0
    for tok, lp, top in tokens:
        before = len(text)
        text += tok
        hit = _first_stop(text, request.stop_sequences, before)
        if hit is not None:
            pos, stop = hit
            cut = pos + len(stop) - before
            yield GenerationChunk(tok[:cut], lp, top[:request.top_logprobs])
            return FinishReason("stop_sequence", stop)
        yield GenerationChunk(tok, lp, top[:request.top_logprobs])
        emitted += 1
        if emitted >= request.max_tokens:
            return FinishReason("length")
    return FinishReason("end_of_sequence")


def _first_stop(text: str, stops: Sequence[str], new_from: int) -> tuple[int, str] | None:
    best = None
    for stop in stops:
        i = text.find(stop, max(0, new_from - len(stop) + 1))
        if i >= 0 and (best is None or i + len(stop) < best[0] + len(best[1])):
            best = (i, stop)
    return best


def _synthetic_alternatives(token: str, n: int, rng: np.random.Generator,
                            concentration: float) -> tuple[float, tuple[tuple[str, float], ...]]:
    probs = np.sort(rng.dirichlet([concentration] * n))[::-1] * 0.95
    alts = [(token, math.log(probs[0]))]
    alts += [(f"<alt{j}>", math.log(p)) for j, p in enumerate(probs[1:], start=1)]
    return alts[0][1], tuple(alts)


def _prepare_tokens(emit: str, spec: dict, seed_base: int) -> list[tuple[str, float, tuple]]:
    """Build (token, logprob, alternatives) triples from a script record."""
    lps = spec.get("logprobs")
    if lps and isinstance(lps[0], dict):
        toks = [(e["token"], float(e["logprob"]),
                 tuple((t, float(lp)) for t, lp in e.get("top_logprobs", [[e["token"], e["logprob"]]])))
                for e in lps]
        if "".join(t for t, _, _ in toks) != emit:
            raise ValueError("script logprob tokens do not spell the emitted text")
        return toks
    pieces = tokenize(emit)
    if "uniform_top" in spec:
        n = int(spec["uniform_top"])
        lp = math.log(1.0 / n)
        return [(t, lp, ((t, lp),) + tuple((f"<alt{j}>", lp) for j in range(1, n))) for t in pieces]
    if "synthetic_top" in spec:
        cfg = spec["synthetic_top"]
        n, conc = int(cfg.get("n", 5)), float(cfg.get("concentration", 0.5))
        rng = np.random.default_rng(int(cfg.get("seed", 0)) + seed_base)
        out = []
        for t in pieces:
            lp, alts = _synthetic_alternatives(t, n, rng, conc)
            out.append((t, lp, alts))
        return out
    if lps:
        if len(lps) != len(pieces):
            raise ValueError(f"script has {len(lps)} logprobs for {len(pieces)} tokens")
        return [(t, float(lp), ((t, float(lp)),)) for t, lp in zip(pieces, lps)]
    return [(t, 0.0, ((t, 0.0),)) for t in pieces]


@dataclass
class ScriptTurn:
    expect_substring: str
    emit: str
    spec: dict = field(default_factory=dict)


class ScriptedMock:
    """Replays scripted turns; turn *i* answers only prompts containing its expected substring."""

    full_distribution = False

    def __init__(self, turns: Sequence[ScriptTurn]):
        self.turns = list(turns)
        self._next = 0
        self._lock = threading.Lock()

    @property
    def turn(self) -> int:
        return self._next

    def generate_stream(self, request: GenerationRequest) -> Generator[GenerationChunk, None, FinishReason]:
        with self._lock:
            i = self._next
            if i >= len(self.turns):
                raise ScriptExhausted(f"script exhausted at turn {i}")
            turn = self.turns[i]
            if turn.expect_substring not in request.prompt:
                raise FixtureMismatch(
                    f"script turn {i}: prompt does not contain {turn.expect_substring[:60]!r}")
            self._next += 1
        tokens = _prepare_tokens(turn.emit, turn.spec, seed_base=i)
        return _emit(tokens, request)


def load_script(path: str | Path, question: str | None = None) -> ScriptedMock:
    """Load a line-delimited script.

    Records are ``{"expect_substring", "emit", "logprobs"?, ...}``. Records
    carrying a ``"question"`` key are kept only when it equals ``question``,
    which lets one file hold scripts for several questions.
    """
    turns = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if question is not None and rec.get("question", question) != question:
                    continue
                turns.append(ScriptTurn(rec["expect_substring"], rec["emit"],
                                        {k: v for k, v in rec.items()
                                         if k not in ("expect_substring", "emit", "question")}))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad script record ({exc})") from None
    return ScriptedMock(turns)


class EvidenceSeekingMock:
    """Rule-based policy that answers as soon as its evidence is in context.

    ``hops`` is an ordered list of ``{"query", "evidence"}``; the policy
    searches for the first hop whose evidence string is absent from the
    prompt, and answers once every hop's evidence is present. With
    ``guess_rate > 0`` it sometimes answers early with ``distractor``.
    """

    full_distribution = False

    def __init__(self, answer: str, hops: Sequence[dict], *, distractor: str = "unknown",
                 guess_rate: float = 0.0, seed: int = 0, top_n: int = 5):
        self.answer = answer
        self.hops = list(hops)
        self.distractor = distractor
        self.guess_rate = guess_rate
        self.top_n = top_n
        self.seed = seed
        self._rng = np.random.default_rng(seed)
        self._calls = 0
        self._lock = threading.Lock()

    def _plan(self, prompt: str) -> str:
        missing = [h for h in self.hops if h["evidence"] not in prompt]
        if not missing:
            return (f"<think>The knowledge in context covers every hop, so I can answer.</think>\n"
                    f"{ANSWER_OPEN}{self.answer}{ANSWER_CLOSE}")
        if self.guess_rate and self._rng.random() < self.guess_rate:
            return (f"<think>I will answer without further searching.</think>\n"
                    f"{ANSWER_OPEN}{self.distractor}{ANSWER_CLOSE}")
        query = json.dumps({"query": missing[0]["query"]})
        return (f"<think>I still need one more fact before answering.</think>\n"
                f"{QUERY_OPEN}{query}{QUERY_CLOSE}")

    def generate_stream(self, request: GenerationRequest) -> Generator[GenerationChunk, None, FinishReason]:
        with self._lock:
            emit = self._plan(request.prompt)
            seed_base = self._calls
            self._calls += 1
        spec = {"synthetic_top": {"n": self.top_n, "seed": self.seed * 1000 + zlib.crc32(self.answer.encode()) % 997}}
        return _emit(_prepare_tokens(emit, spec, seed_base), request)


class HttpBackend:
    """OpenAI-compatible ``/completions`` client with logprobs.

    Completions endpoints drop the matched stop string from ``text``; it is
    re-appended as a synthetic zero-logprob chunk so callers always see the
    closing delimiter.
    """

    full_distribution = False

    def __init__(self, endpoint: str, model: str, *, api_key: str | None = None,
                 timeout: float = 60.0, max_retries: int = 3, backoff: float = 1.0,
                 client: httpx.Client | None = None, sleep: Callable[[float], None] = time.sleep):
        self.endpoint = endpoint
        self.model = model
        self.max_retries = max_retries
        self.backoff = backoff
        self._sleep = sleep
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = client or httpx.Client(timeout=timeout, headers=headers)

    def _post(self, payload: dict) -> dict:
        err = "no attempt made"
        for attempt in range(self.max_retries + 1):
            try:
                resp = self._client.post(self.endpoint, json=payload)
            except httpx.TimeoutException as exc:
                err = f"timeout: {exc}"
            except httpx.TransportError as exc:
                err = f"transport failure: {exc}"
            else:
                if resp.status_code == 200:
                    try:
                        return resp.json()
                    except ValueError:
                        raise ProtocolError("endpoint returned non-JSON body") from None
                err = f"HTTP {resp.status_code}"
                if resp.status_code != 429 and resp.status_code < 500:
                    raise TransportError(f"{self.endpoint}: {err}: {resp.text[:200]}")
            if attempt < self.max_retries:
                self._sleep(self.backoff * 2 ** attempt)
        raise TransportError(f"{self.endpoint}: {err} after {self.max_retries + 1} attempts")

    def generate_stream(self, request: GenerationRequest) -> Generator[GenerationChunk, None, FinishReason]:
        payload = {
            "model": self.model,
            "prompt": request.prompt,
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
            "stop": list(request.stop_sequences),
            "logprobs": max(request.top_logprobs, 1),
        }
        if request.seed is not None:
            payload["seed"] = request.seed
        body = self._post(payload)
        chunks, finish = self._parse(body, request)
        return _replay(chunks, finish)

    @staticmethod
    def _parse(body: dict, request: GenerationRequest) -> tuple[list[GenerationChunk], FinishReason]:
        try:
            choice = body["choices"][0]
            text = choice["text"]
            lp = choice["logprobs"]
            tokens, token_lps = lp["tokens"], lp["token_logprobs"]
            tops = lp.get("top_logprobs") or [None] * len(tokens)
            reason = choice.get("finish_reason")
        except (KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"malformed completions response: {exc!r}") from None
        if len(tokens) != len(token_lps) or len(tops) != len(tokens):
            raise ProtocolError("logprob arrays have mismatched lengths")
        chunks = []
        for tok, tlp, top in zip(tokens, token_lps, tops):
            alts = sorted(((t, float(v)) for t, v in (top or {}).items()), key=lambda a: -a[1])
            chunks.append(GenerationChunk(tok, min(float(tlp if tlp is not None else 0.0), 0.0),
                                          tuple(alts[:request.top_logprobs])))
        if reason == "length":
            return chunks, FinishReason("length")
        if reason == "stop":
            stop = choice.get("stop_reason")
            if not isinstance(stop, str) or stop not in request.stop_sequences:
                stop = _infer_stop(text, request.stop_sequences)
            if stop is None:
                return chunks, FinishReason("end_of_sequence")
            if not text.endswith(stop):
                chunks.append(GenerationChunk(stop, 0.0, (), synthetic=True))
            return chunks, FinishReason("stop_sequence", stop)
        return chunks, FinishReason("end_of_sequence")


def _infer_stop(text: str, stops: Sequence[str]) -> str | None:
    for stop in stops:
        if text.endswith(stop):
            return stop
    opens = {QUERY_CLOSE: QUERY_OPEN, ANSWER_CLOSE: ANSWER_OPEN}
    best, best_at = None, -1
    for stop in stops:
        opener = opens.get(stop)
        if opener is None:
            continue
        at = text.rfind(opener)
        if at > best_at and text.find(stop, at) < 0:
            best, best_at = stop, at
    return best


def _replay(chunks, finish):
    yield from chunks
    return finish


@dataclass
class BackendConfig:
    kind: str = SCRIPTED
    endpoint: str | None = None
    model: str | None = None
    api_key_env: str = "OPENAI_API_KEY"
    timeout: float = 60.0
    max_retries: int = 3
    script: str | None = None
    parallelism: int = 4
    guess_rate: float = 0.0
    top_logprobs: int = 5

    def __post_init__(self):
        if self.kind not in (HTTP, SCRIPTED, EVIDENCE):
            raise ValueError(f"unknown backend kind {self.kind!r}")
        if self.kind == HTTP and not (self.endpoint and self.model):
            raise ValueError("http-endpoint backend needs endpoint and model")
        if self.kind == SCRIPTED and not self.script:
            raise ValueError("scripted-mock backend needs a script path")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "endpoint": self.endpoint, "model": self.model,
                "script": Path(self.script).name if self.script else None,
                "guess_rate": self.guess_rate, "top_logprobs": self.top_logprobs}


def make_backend(config: BackendConfig, record: dict | None = None, seed: int = 0):
    """Instantiate a fresh backend for one rollout.

    ``record`` is the dataset record being answered; scripted mocks use its
    question to select script records, evidence mocks read its ``hops``.
    """
    question = (record or {}).get("question")
    if config.kind == SCRIPTED:
        return load_script(config.script, question=question)
    if config.kind == EVIDENCE:
        if not record or "hops" not in record:
            raise ValueError("evidence-mock needs a dataset record with 'hops'")
        answers = record.get("golden_answers") or [""]
        return EvidenceSeekingMock(record.get("answer", answers[0]), record["hops"],
                                   distractor=record.get("distractor", "unknown"),
                                   guess_rate=config.guess_rate, seed=seed,
                                   top_n=config.top_logprobs or 5)
    return HttpBackend(config.endpoint, config.model, api_key=os.environ.get(config.api_key_env),
                       timeout=config.timeout, max_retries=config.max_retries)
