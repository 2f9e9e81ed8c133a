"""Incremental parser for the think/query/answer/knowledge tag protocol.

The parser is fed text fragments in generation order and emits events. Its
output depends only on the concatenated text, never on how that text was cut
into fragments: a delimiter may be split at any character boundary, and
events are only produced at positions fixed by the full text.

Inside an open segment only that segment's own closing delimiter is
recognised, so knowledge blocks may quote ``<query>`` literally.
"""

from __future__ import annotations

import enum
import json
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field, replace


class Tag(enum.Enum):
    THINK = "think"
    QUERY = "query"
    ANSWER = "answer"
    KNOWLEDGE = "knowledge"

    @property
    def open(self) -> str:
        return f"<{self.value}>"

    @property
    def close(self) -> str:
        return f"</{self.value}>"


THINK_OPEN, THINK_CLOSE = Tag.THINK.open, Tag.THINK.close
QUERY_OPEN, QUERY_CLOSE = Tag.QUERY.open, Tag.QUERY.close
ANSWER_OPEN, ANSWER_CLOSE = Tag.ANSWER.open, Tag.ANSWER.close
KNOWLEDGE_OPEN, KNOWLEDGE_CLOSE = Tag.KNOWLEDGE.open, Tag.KNOWLEDGE.close

STOP_SEQUENCES = (QUERY_CLOSE, ANSWER_CLOSE)

INVALID_QUERY_FEEDBACK = 'Invalid tool call format. Please use <query>{ "query": "statement" }</query> format.'

_OPENERS = {t.open: t for t in Tag}


class ActionKind(enum.Enum):
    SEARCH = "search"
    ANSWER = "answer"
    THINK = "think"


class StopReason(enum.Enum):
    QUERY_CLOSE = "query_close"
    ANSWER_CLOSE = "answer_close"
    END_OF_SEQUENCE = "end_of_sequence"


@dataclass(frozen=True)
class TaggedSegment:
    kind: Tag
    content: str
    # half-open character offsets of the delimiter-wrapped segment in the raw text
    byte_span: tuple[int, int]
    # half-open token indices of the content tokens, when token-aligned
    token_span: tuple[int, int] | None = None

    @property
    def content_span(self) -> tuple[int, int]:
        start, end = self.byte_span
        return start + len(self.kind.open), end - len(self.kind.close)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "content": self.content,
            "byte_span": list(self.byte_span),
            "token_span": list(self.token_span) if self.token_span is not None else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaggedSegment":
        ts = d.get("token_span")
        return cls(Tag(d["kind"]), d["content"], tuple(d["byte_span"]),
                   tuple(ts) if ts is not None else None)


@dataclass(frozen=True)
class Action:
    kind: ActionKind
    # Early-knowledge retrieval is a Search the policy never generated.
    implicit: bool = False

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "implicit": self.implicit}


_ACTION_OF = {Tag.THINK: ActionKind.THINK, Tag.QUERY: ActionKind.SEARCH, Tag.ANSWER: ActionKind.ANSWER}


def action_for(segment: TaggedSegment) -> Action | None:
    """Action a policy segment stands for; ``None`` for injected knowledge."""
    kind = _ACTION_OF.get(segment.kind)
    return Action(kind) if kind is not None else None


@dataclass(frozen=True)
class SegmentComplete:
    segment: TaggedSegment


@dataclass(frozen=True)
class StopDetected:
    reason: StopReason


@dataclass(frozen=True)
class Malformed:
    detail: str


ParseEvent = SegmentComplete | StopDetected | Malformed


def _held_suffix(buf: str, candidates: Iterable[str]) -> int:
    """Length of the longest suffix of ``buf`` that is a proper prefix of a candidate."""
    best = 0
    for cand in candidates:
        for n in range(min(len(cand) - 1, len(buf)), best, -1):
            if buf.endswith(cand[:n]):
                best = n
                break
    return best


class TagParser:
    """Streaming state machine over the tag protocol.

    ``offset`` is the position of the first fed character in the caller's raw
    text; segment spans are reported in that coordinate system.
    """

    def __init__(self, offset: int = 0):
        self._pos = offset  # absolute position of _buf[0]
        self._buf = ""
        self._open: Tag | None = None
        self._open_at = 0
        self._content: list[str] = []
        self._stray: list[str] = []
        self.halted = False
        self.finished = False

    @property
    def position(self) -> int:
        """Absolute offset just past the last character consumed."""
        return self._pos

    @property
    def open_tag(self) -> Tag | None:
        return self._open

    def resume(self) -> list[ParseEvent]:
        """Continue after a stop, scanning any text buffered behind it."""
        if self.finished:
            return []
        self.halted = False
        return self._scan()

    def feed(self, fragment: str) -> list[ParseEvent]:
        """Consume a fragment; while halted it is buffered until ``resume()``."""
        if self.finished or not fragment:
            return []
        self._buf += fragment
        if self.halted:
            return []
        return self._scan()

    def finish(self) -> list[ParseEvent]:
        """Signal end of stream from the backend."""
        if self.halted or self.finished:
            return []
        events: list[ParseEvent] = []
        if self._open is not None:
            events.append(Malformed(f"unterminated {self._open.value}"))
            self._open = None
            self._content = []
        else:
            self._stray.append(self._buf)
            events.extend(self._flush_stray())
        self._pos += len(self._buf)
        self._buf = ""
        events.append(StopDetected(StopReason.END_OF_SEQUENCE))
        self.finished = True
        return events

    def _flush_stray(self) -> list[ParseEvent]:
        stray = "".join(self._stray)
        self._stray = []
        if stray.strip():
            return [Malformed(f"text outside tags: {stray.strip()[:60]!r}")]
        return []

    def _consume(self, n: int) -> str:
        taken, self._buf = self._buf[:n], self._buf[n:]
        self._pos += n
        return taken

    def _scan(self) -> list[ParseEvent]:
        events: list[ParseEvent] = []
        while self._buf and not self.halted:
            if self._open is None:
                hit = self._find_opener()
                if hit is None:
                    keep = _held_suffix(self._buf, _OPENERS)
                    self._stray.append(self._consume(len(self._buf) - keep))
                    break
                idx, tag = hit
                self._stray.append(self._consume(idx))
                events.extend(self._flush_stray())
                self._open_at = self._pos
                self._consume(len(tag.open))
                self._open = tag
                self._content = []
            else:
                close = self._open.close
                idx = self._buf.find(close)
                if idx < 0:
                    keep = _held_suffix(self._buf, (close,))
                    self._content.append(self._consume(len(self._buf) - keep))
                    break
                self._content.append(self._consume(idx))
                self._consume(len(close))
                seg = TaggedSegment(self._open, "".join(self._content), (self._open_at, self._pos))
                events.append(SegmentComplete(seg))
                self._open = None
                self._content = []
                if seg.kind is Tag.QUERY:
                    events.append(StopDetected(StopReason.QUERY_CLOSE))
                    self.halted = True
                elif seg.kind is Tag.ANSWER:
                    events.append(StopDetected(StopReason.ANSWER_CLOSE))
                    self.halted = True
        return events

    def _find_opener(self) -> tuple[int, Tag] | None:
        best: tuple[int, Tag] | None = None
        for text, tag in _OPENERS.items():
            i = self._buf.find(text)
            if i >= 0 and (best is None or i < best[0]):
                best = (i, tag)
        return best


def parse_events(text: str, *, finish: bool = True) -> list[ParseEvent]:
    """Events for ``text`` fed at once; stops consuming at the first stop."""
    parser = TagParser()
    events = parser.feed(text)
    if finish:
        events += parser.finish()
    return events


def parse_all(text: str) -> list[TaggedSegment]:
    """Every complete segment in ``text``, resuming through stops."""
    parser = TagParser()
    events = parser.feed(text)
    while parser.halted:
        events += parser.resume()
    return [e.segment for e in events if isinstance(e, SegmentComplete)]


def serialize(segments: Iterable[TaggedSegment], separator: str = "") -> str:
    return separator.join(f"{s.kind.open}{s.content}{s.kind.close}" for s in segments)


def extract_query(segment: TaggedSegment) -> str:
    """Search string carried by a query segment.

    JSON objects with a string ``"query"`` field yield that field; anything
    else is returned verbatim.
    """
    if segment.kind is not Tag.QUERY:
        raise ValueError(f"extract_query needs a query segment, got {segment.kind.value}")
    payload = parse_query_payload(segment.content)
    return payload if payload is not None else segment.content


def parse_query_payload(content: str) -> str | None:
    """The ``"query"`` value when ``content`` is JSON-shaped, else ``None``.

    Typographic double quotes are accepted as JSON quotes.
    """
    text = content.strip()
    if not (text.startswith("{") and text.endswith("}")):
        return None
    for candidate in (text, text.replace("“", '"').replace("”", '"')):
        try:
            obj = json.loads(candidate)
        except json.JSONDecodeError:
            continue
        if isinstance(obj, dict) and isinstance(obj.get("query"), str):
            return obj["query"]
        return None
    return None


@dataclass
class ValidationReport:
    ok: bool
    violation_index: int | None = None
    detail: str = ""
    actions: list[Action] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"ok": self.ok, "violation_index": self.violation_index, "detail": self.detail}


def validate_pipeline(segments: Sequence[TaggedSegment], eka_enabled: bool,
                      require_answer: bool = False) -> ValidationReport:
    """Check the action order [Search] Think -> (Search | Answer) -> Think -> ... .

    Indices refer to ``segments`` (knowledge segments must already be removed).
    The optional leading Search is the implicit early retrieval when
    ``eka_enabled``; otherwise the first segment may be an explicit query.
    Nothing may follow the first Answer. A trajectory that stops before
    answering is accepted unless ``require_answer`` is set.
    """
    actions = [Action(ActionKind.SEARCH, implicit=True)] if eka_enabled else []
    prev: ActionKind | None = None
    for i, seg in enumerate(segments):
        action = action_for(seg)
        if action is None:
            return ValidationReport(False, i, "knowledge segment in policy pipeline", actions)
        if prev is ActionKind.ANSWER:
            return ValidationReport(False, i, f"{action.kind.value} after final answer", actions)
        if action.kind is ActionKind.THINK:
            if prev is ActionKind.THINK:
                return ValidationReport(False, i, "think not preceded by search", actions)
        elif action.kind is ActionKind.SEARCH and i == 0 and not eka_enabled:
            pass
        elif prev is not ActionKind.THINK:
            return ValidationReport(False, i, f"{action.kind.value} not preceded by think", actions)
        actions.append(action)
        prev = action.kind
    if require_answer and prev is not ActionKind.ANSWER:
        return ValidationReport(False, len(segments), "no final answer", actions)
    return ValidationReport(True, None, "", actions)


def render_knowledge(passages, corpus) -> str:
    """Wrap retrieved passage texts, in rank order, in knowledge tags."""
    texts = []
    for p in passages:
        chunk = corpus.get(p.chunk_id)
        if chunk is None:
            raise KeyError(f"dangling chunk_id {p.chunk_id!r}")
        texts.append(chunk.text)
    return wrap_knowledge("\n".join(texts))


def wrap_knowledge(body: str) -> str:
    return f"{KNOWLEDGE_OPEN}{body}{KNOWLEDGE_CLOSE}"


def align_tokens(segment: TaggedSegment, token_offsets: Sequence[tuple[int, int]]) -> TaggedSegment:
    """Attach the range of tokens lying wholly inside the segment's content.

    Delimiter tokens are excluded; a token straddling a delimiter boundary is
    excluded too.
    """
    lo, hi = segment.content_span
    inside = [i for i, (s, e) in enumerate(token_offsets) if s >= lo and e <= hi and e > s]
    if not inside:
        return replace(segment, token_span=None)
    return replace(segment, token_span=(inside[0], inside[-1] + 1))
