"""The iterative think/search/answer rollout loop with early knowledge.

With early knowledge enabled the question is first sent to the retriever and
the result is placed in the prompt inside knowledge tags. The policy is then
sampled turn by turn until it closes a query (retrieve, inject knowledge,
continue), closes an answer (stop), or the turn budget runs out.
"""

from __future__ import annotations

import logging
import math
import re
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources

from . import metrics
from .backends import BackendConfig, BackendError, GenerationRequest, collect, make_backend
from .protocol import (
    INVALID_QUERY_FEEDBACK,
    STOP_SEQUENCES,
    Action,
    ActionKind,
    Malformed,
    SegmentComplete,
    StopDetected,
    StopReason,
    Tag,
    TaggedSegment,
    TagParser,
    ValidationReport,
    align_tokens,
    extract_query,
    parse_query_payload,
    render_knowledge,
    validate_pipeline,
    wrap_knowledge,
)
from .retrieval import RetrievalError, RetrievedPassage, RetrieverConfig, early_knowledge, retrieve
from .rl_math import EPS_STD, grpo_advantages

log = logging.getLogger(__name__)

ANSWERED = "answered"
BUDGET_EXHAUSTED = "budget_exhausted"
MALFORMED = "malformed"

DEFAULT_MAX_TURNS = 8


def load_template(name: str) -> str:
    return resources.files("ekarag").joinpath(f"templates/{name}.txt").read_text(encoding="utf-8")


_SLOT_RE = re.compile(r"\{(question|knowledge)\}")


def render_prompt(question: str, knowledge_block: str | None, template: str) -> str:
    """Fill a prompt template; the knowledge slot takes a full tagged block."""
    text = load_template(template)
    values = {"question": question, "knowledge": knowledge_block or ""}
    return _SLOT_RE.sub(lambda m: values[m.group(1)], text)


@dataclass
class RolloutConfig:
    max_turns: int = DEFAULT_MAX_TURNS
    eka_enabled: bool = True
    strict_query_format: bool = False
    retriever: RetrieverConfig = field(default_factory=RetrieverConfig)
    backend: BackendConfig | None = None
    prompt_template: str | None = None
    temperature: float = 0.0
    group_temperature: float = 1.0
    max_tokens_per_turn: int = 1024
    max_total_tokens: int = 4096
    top_logprobs: int = 5
    reward: str = "em"
    seed: int = 0

    def __post_init__(self):
        if self.prompt_template is None:
            self.prompt_template = "eka" if self.eka_enabled else "baseline"
        if self.max_turns < 1:
            raise ValueError("max_turns must be >= 1")
        if self.eka_enabled and self.prompt_template != "eka":
            raise ValueError("early knowledge requires the eka prompt template")
        if self.reward not in ("em", "f1"):
            raise ValueError("reward must be 'em' or 'f1'")

    def to_dict(self) -> dict:
        return {
            "max_turns": self.max_turns,
            "eka_enabled": self.eka_enabled,
            "strict_query_format": self.strict_query_format,
            "prompt_template": self.prompt_template,
            "temperature": self.temperature,
            "group_temperature": self.group_temperature,
            "max_tokens_per_turn": self.max_tokens_per_turn,
            "max_total_tokens": self.max_total_tokens,
            "top_logprobs": self.top_logprobs,
            "reward": self.reward,
            "seed": self.seed,
            "retriever": self.retriever.to_dict(),
            "backend": self.backend.to_dict() if self.backend else None,
        }


@dataclass
class TokenRecord:
    text: str
    logprob: float
    top: tuple[tuple[str, float], ...]
    start: int  # offset in the response text
    turn: int

    @property
    def end(self) -> int:
        return self.start + len(self.text)

    def to_dict(self) -> dict:
        return {"text": self.text, "logprob": self.logprob, "top": [list(a) for a in self.top],
                "start": self.start, "turn": self.turn}

    @classmethod
    def from_dict(cls, d: dict) -> "TokenRecord":
        return cls(d["text"], float(d["logprob"]), tuple((t, float(lp)) for t, lp in d["top"]),
                   int(d["start"]), int(d["turn"]))


@dataclass
class TurnRecord:
    index: int
    text: str
    stop: str
    query: str | None = None
    passages: list[RetrievedPassage] = field(default_factory=list)
    injected: str = ""
    feedback: bool = False
    malformed: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"index": self.index, "text": self.text, "stop": self.stop, "query": self.query,
                "passages": [p.to_dict() for p in self.passages], "injected": self.injected,
                "feedback": self.feedback, "malformed": list(self.malformed)}

    @classmethod
    def from_dict(cls, d: dict) -> "TurnRecord":
        return cls(d["index"], d["text"], d["stop"], d.get("query"),
                   [RetrievedPassage.from_dict(p) for p in d.get("passages", [])],
                   d.get("injected", ""), d.get("feedback", False), list(d.get("malformed", [])))


@dataclass
class Trajectory:
    question: str
    eka_enabled: bool
    prompt: str = ""
    early_knowledge: list[RetrievedPassage] = field(default_factory=list)
    early_knowledge_text: str = ""
    response: str = ""
    segments: list[TaggedSegment] = field(default_factory=list)
    actions: list[Action] = field(default_factory=list)
    tokens: list[TokenRecord] = field(default_factory=list)
    turns: list[TurnRecord] = field(default_factory=list)
    final_answer: str | None = None
    termination: str | None = None
    pipeline: ValidationReport | None = None

    @property
    def turn_count(self) -> int:
        return len(self.turns)

    @property
    def policy_segments(self) -> list[TaggedSegment]:
        return [s for s in self.segments if s.kind is not Tag.KNOWLEDGE]

    @property
    def search_count(self) -> int:
        """In-loop searches (the implicit early retrieval is not counted)."""
        return sum(1 for a in self.actions if a.kind is ActionKind.SEARCH and not a.implicit)

    @property
    def feedback_count(self) -> int:
        return sum(1 for t in self.turns if t.feedback)

    def retrieved_text(self, include_early: bool = True) -> str:
        parts = [self.early_knowledge_text] if include_early and self.early_knowledge_text else []
        parts += [s.content for s in self.segments if s.kind is Tag.KNOWLEDGE]
        return "\n".join(p for p in parts if p)

    def to_dict(self) -> dict:
        return {
            "question": self.question,
            "eka_enabled": self.eka_enabled,
            "prompt": self.prompt,
            "early_knowledge": [p.to_dict() for p in self.early_knowledge],
            "early_knowledge_text": self.early_knowledge_text,
            "response": self.response,
            "segments": [s.to_dict() for s in self.segments],
            "actions": [a.to_dict() for a in self.actions],
            "tokens": [t.to_dict() for t in self.tokens],
            "turns": [t.to_dict() for t in self.turns],
            "turn_count": self.turn_count,
            "final_answer": self.final_answer,
            "termination": self.termination,
            "pipeline": self.pipeline.to_dict() if self.pipeline else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectory":
        pipe = d.get("pipeline")
        return cls(
            question=d["question"],
            eka_enabled=d["eka_enabled"],
            prompt=d.get("prompt", ""),
            early_knowledge=[RetrievedPassage.from_dict(p) for p in d.get("early_knowledge", [])],
            early_knowledge_text=d.get("early_knowledge_text", ""),
            response=d.get("response", ""),
            segments=[TaggedSegment.from_dict(s) for s in d.get("segments", [])],
            actions=[Action(ActionKind(a["kind"]), a.get("implicit", False)) for a in d.get("actions", [])],
            tokens=[TokenRecord.from_dict(t) for t in d.get("tokens", [])],
            turns=[TurnRecord.from_dict(t) for t in d.get("turns", [])],
            final_answer=d.get("final_answer"),
            termination=d.get("termination"),
            pipeline=ValidationReport(pipe["ok"], pipe.get("violation_index"), pipe.get("detail", ""))
            if pipe else None,
        )


class RolloutError(Exception):
    """Backend failure mid-rollout; ``trajectory`` holds what was recorded."""

    def __init__(self, message: str, trajectory: Trajectory):
        super().__init__(message)
        self.trajectory = trajectory


class GroupError(Exception):
    pass


def _finalize(traj: Trajectory) -> Trajectory:
    offsets = [(t.start, t.end) for t in traj.tokens]
    traj.segments = [s if s.kind is Tag.KNOWLEDGE else align_tokens(s, offsets) for s in traj.segments]
    traj.pipeline = validate_pipeline(traj.policy_segments, traj.eka_enabled)
    traj.actions = traj.pipeline.actions if traj.pipeline.ok else _raw_actions(traj)
    return traj


def _raw_actions(traj: Trajectory) -> list[Action]:
    acts = [Action(ActionKind.SEARCH, implicit=True)] if traj.eka_enabled else []
    for seg in traj.policy_segments:
        acts.append(Action({Tag.THINK: ActionKind.THINK, Tag.QUERY: ActionKind.SEARCH,
                            Tag.ANSWER: ActionKind.ANSWER}[seg.kind]))
    return acts


def run_rollout(config: RolloutConfig, question: str, index, backend, *, seed: int | None = None,
                temperature: float | None = None) -> Trajectory:
    """Run one rollout for ``question`` against ``index`` with ``backend``."""
    if not question or not question.strip():
        raise ValueError("empty question")
    traj = Trajectory(question=question, eka_enabled=config.eka_enabled)
    corpus = index.corpus
    knowledge_block = None
    if config.eka_enabled:
        traj.early_knowledge = early_knowledge(index, question, config.retriever)
        knowledge_block = render_knowledge(traj.early_knowledge, corpus)
        traj.early_knowledge_text = knowledge_block[len("<knowledge>"):-len("</knowledge>")]
    traj.prompt = render_prompt(question, knowledge_block, config.prompt_template)

    parser = TagParser()
    tokens_used = 0
    temp = config.temperature if temperature is None else temperature
    last_malformed = False
    while traj.turn_count < config.max_turns:
        remaining = config.max_total_tokens - tokens_used
        if remaining <= 0:
            break
        request = GenerationRequest(
            prompt=traj.prompt + traj.response,
            stop_sequences=STOP_SEQUENCES,
            max_tokens=min(config.max_tokens_per_turn, remaining),
            temperature=temp,
            top_logprobs=config.top_logprobs,
            seed=seed,
        )
        try:
            chunks, finish = collect(backend.generate_stream(request))
        except BackendError as exc:
            raise RolloutError(f"rollout turn {traj.turn_count}: {exc}", _finalize(traj)) from exc
        tokens_used += len(chunks)
        b = traj.turn_count
        base = len(traj.response)
        pos = base
        for ch in chunks:
            traj.tokens.append(TokenRecord(ch.token_text, ch.logprob, ch.top_alternatives, pos, b))
            pos += len(ch.token_text)
        text = "".join(ch.token_text for ch in chunks)
        events = parser.feed(text)
        if finish.kind != "stop_sequence":
            events += parser.finish()
        traj.response += text
        turn = TurnRecord(index=b, text=text, stop=finish.stop or finish.kind)
        traj.turns.append(turn)
        stop = None
        for ev in events:
            if isinstance(ev, SegmentComplete):
                traj.segments.append(ev.segment)
            elif isinstance(ev, Malformed):
                turn.malformed.append(ev.detail)
            elif isinstance(ev, StopDetected):
                stop = ev.reason

        if stop is StopReason.ANSWER_CLOSE:
            traj.final_answer = traj.segments[-1].content.strip()
            traj.termination = ANSWERED
            break
        if stop is StopReason.QUERY_CLOSE:
            _handle_query(config, traj, turn, index)
            parser.resume()
            for ev in parser.feed(turn.injected):
                if isinstance(ev, SegmentComplete):
                    traj.segments.append(ev.segment)
            traj.response += turn.injected
            last_malformed = turn.feedback
            continue
        # Stream ended without a stop: the turn produced no action.
        turn.malformed.append("turn ended without query or answer")
        last_malformed = True
        parser = TagParser(offset=len(traj.response))

    if traj.termination is None:
        traj.termination = MALFORMED if last_malformed else BUDGET_EXHAUSTED
    return _finalize(traj)


def _handle_query(config: RolloutConfig, traj: Trajectory, turn: TurnRecord, index) -> None:
    seg = traj.segments[-1]
    payload = parse_query_payload(seg.content)
    if config.strict_query_format and payload is None:
        turn.feedback = True
        turn.malformed.append("query payload is not JSON-shaped")
        turn.injected = wrap_knowledge(INVALID_QUERY_FEEDBACK)
        return
    query = extract_query(seg).strip()
    if not query:
        turn.malformed.append("empty query")
        if config.strict_query_format:
            turn.feedback = True
            turn.injected = wrap_knowledge(INVALID_QUERY_FEEDBACK)
        else:
            turn.injected = wrap_knowledge("")
        return
    turn.query = query
    try:
        turn.passages = retrieve(index, query, config.retriever.k)
    except RetrievalError as exc:
        log.warning("retrieval failed for %r: %s", query, exc)
        turn.passages = []
    turn.injected = render_knowledge(turn.passages, index.corpus)


def reward(trajectory: Trajectory, gold_answers: Sequence[str], kind: str = "em") -> float:
    """Answer reward gated on a clean finish.

    Zero unless the rollout answered and its action order is well formed.
    """
    if trajectory.termination != ANSWERED or trajectory.final_answer is None:
        return 0.0
    if trajectory.pipeline is None or not trajectory.pipeline.ok:
        return 0.0
    if kind == "f1":
        return metrics.f1(trajectory.final_answer, gold_answers)
    return float(metrics.exact_match(trajectory.final_answer, gold_answers))


def average_turns(trajectories: Sequence[Trajectory]) -> float:
    if not trajectories:
        raise ValueError("average_turns needs at least one trajectory")
    return math.fsum(t.turn_count for t in trajectories) / len(trajectories)


@dataclass
class GroupRollout:
    question: str
    trajectories: list[Trajectory | None]
    rewards: list[float]
    advantages: list[float]
    failed: list[bool]
    errors: list[str | None]

    def to_dict(self) -> dict:
        return {"question": self.question, "rewards": self.rewards, "advantages": self.advantages,
                "failed": self.failed, "errors": self.errors,
                "turn_counts": [t.turn_count if t else None for t in self.trajectories]}


BackendFactory = Callable[[int], object]


def run_group(config: RolloutConfig, question: str, G: int, index, gold_answers: Sequence[str], *,
              backend_factory: BackendFactory | None = None, record: dict | None = None,
              epsilon_std: float = EPS_STD) -> GroupRollout:
    """Sample ``G`` rollouts and attach group-relative advantages.

    ``backend_factory(slot)`` must return a fresh backend per slot; by default
    one is built from ``config.backend`` with seed ``config.seed + slot``.
    A slot whose rollout fails keeps reward 0 and is flagged.
    """
    if G < 1:
        raise ValueError("G must be >= 1")
    if backend_factory is None:
        if config.backend is None:
            raise ValueError("no backend configured")
        rec = dict(record or {"question": question})
        backend_factory = lambda slot: make_backend(config.backend, rec, seed=config.seed + slot)  # noqa: E731

    def one(slot: int):
        try:
            backend = backend_factory(slot)
            traj = run_rollout(config, question, index, backend, seed=config.seed + slot,
                               temperature=config.group_temperature)
            return traj, None
        except (RolloutError, BackendError, ValueError) as exc:
            log.warning("group slot %d failed: %s", slot, exc)
            return None, str(exc)

    workers = max(1, min(G, config.backend.parallelism if config.backend else 4))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(one, range(G)))
    trajs = [r[0] for r in results]
    errors = [r[1] for r in results]
    failed = [t is None for t in trajs]
    if all(failed):
        raise GroupError(f"all {G} rollouts failed: {errors[0]}")
    rewards = [reward(t, gold_answers, config.reward) if t is not None else 0.0 for t in trajs]
    return GroupRollout(question, trajs, rewards, grpo_advantages(rewards, epsilon_std), failed, errors)
