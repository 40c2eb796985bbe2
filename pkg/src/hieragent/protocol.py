"""Tag grammar for Planner emissions and full trajectories.

A Planner emission is zero or more ``<think>`` blocks followed by exactly one
terminal block, either ``<tool_calling>`` or ``<answer>``. Observation blocks
(``<obs>``) are inserted by the engine, never by the Planner. Payloads are
literal text; they may not contain anything that looks like a tag.
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field
from typing import Any, Iterable

Span = tuple[int, int]


class SegmentKind(str, enum.Enum):
    THINK = "think"
    TOOL_CALL = "tool_call"
    OBSERVATION = "observation"
    ANSWER = "answer"


class Terminal(str, enum.Enum):
    ANSWERED = "Answered"
    MALFORMED_OUTPUT = "MalformedOutput"
    ROUND_LIMIT_EXCEEDED = "RoundLimitExceeded"


class ParseReason(str, enum.Enum):
    UNCLOSED_TAG = "UnclosedTag"
    UNKNOWN_TAG = "UnknownTag"
    MULTIPLE_TERMINALS = "MultipleTerminals"
    EMPTY_PAYLOAD = "EmptyPayload"
    TRAILING_GARBAGE = "TrailingGarbage"
    MISSING_TERMINAL = "MissingTerminal"
    BAD_SEQUENCE = "BadSequence"


class ParseError(ValueError):
    def __init__(self, reason: ParseReason, detail: str = "", offset: int | None = None):
        self.reason = reason
        self.detail = detail
        self.offset = offset
        msg = reason.value if not detail else f"{reason.value}: {detail}"
        if offset is not None:
            msg += f" (at offset {offset})"
        super().__init__(msg)


@dataclass(frozen=True)
class TagSet:
    """Literal tag names for each segment kind.

    The answer tag is not fixed by any upstream convention, so it is the one
    most likely to be overridden.
    """

    think: str = "think"
    tool_call: str = "tool_calling"
    observation: str = "obs"
    answer: str = "answer"

    def name_of(self, kind: SegmentKind) -> str:
        return getattr(self, kind.name.lower())

    def kind_of(self, name: str) -> SegmentKind | None:
        for kind in SegmentKind:
            if self.name_of(kind) == name:
                return kind
        return None


DEFAULT_TAGS = TagSet()

# Anything shaped like <word> or </word> counts as a tag.
_TAG_RE = re.compile(r"<(/?)([A-Za-z_][A-Za-z0-9_]*)>")


@dataclass(frozen=True)
class Segment:
    kind: SegmentKind
    text: str
    # Offsets into the text the segment was parsed from or serialized into,
    # tags inclusive. Not part of structural equality.
    char_span: Span | None = field(default=None, compare=False)


@dataclass
class Trajectory:
    prompt_id: str
    segments: list[Segment]
    terminal: Terminal
    failure: str | None = None
    extras: dict[str, Any] = field(default_factory=dict, compare=False)

    @property
    def rounds_used(self) -> int:
        return sum(1 for s in self.segments if s.kind is SegmentKind.TOOL_CALL)

    @property
    def answer(self) -> str | None:
        if self.terminal is Terminal.ANSWERED and self.segments:
            return self.segments[-1].text
        return None

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "prompt_id": self.prompt_id,
            "terminal": self.terminal.value,
            "rounds_used": self.rounds_used,
            "segments": [{"kind": s.kind.value, "text": s.text} for s in self.segments],
        }
        if self.failure is not None:
            d["failure"] = self.failure
        d.update(self.extras)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Trajectory:
        known = {"prompt_id", "terminal", "rounds_used", "segments", "failure"}
        segments = [Segment(SegmentKind(s["kind"]), s["text"]) for s in d["segments"]]
        t = cls(
            prompt_id=d["prompt_id"],
            segments=segments,
            terminal=Terminal(d["terminal"]),
            failure=d.get("failure"),
            extras={k: v for k, v in d.items() if k not in known},
        )
        if d.get("rounds_used", t.rounds_used) != t.rounds_used:
            raise ValueError(
                f"rounds_used={d['rounds_used']} disagrees with {t.rounds_used} tool calls"
            )
        return t


def _lex(text: str, tags: TagSet) -> list[Segment]:
    segments: list[Segment] = []
    pos = 0
    open_kind: SegmentKind | None = None
    open_start = open_end = 0
    for m in _TAG_RE.finditer(text):
        closing, name = m.group(1) == "/", m.group(2)
        kind = tags.kind_of(name)
        if open_kind is None:
            if text[pos : m.start()].strip():
                raise ParseError(ParseReason.TRAILING_GARBAGE, "text outside tags", pos)
            if kind is None:
                raise ParseError(ParseReason.UNKNOWN_TAG, m.group(0), m.start())
            if closing:
                raise ParseError(ParseReason.TRAILING_GARBAGE, f"stray {m.group(0)}", m.start())
            open_kind, open_start, open_end = kind, m.start(), m.end()
        else:
            if kind is None:
                raise ParseError(ParseReason.UNKNOWN_TAG, m.group(0), m.start())
            if not (closing and kind is open_kind):
                raise ParseError(
                    ParseReason.UNCLOSED_TAG,
                    f"<{tags.name_of(open_kind)}> not closed before {m.group(0)}",
                    open_start,
                )
            payload = text[open_end : m.start()]
            if not payload.strip():
                raise ParseError(ParseReason.EMPTY_PAYLOAD, tags.name_of(kind), open_start)
            segments.append(Segment(kind, payload, (open_start, m.end())))
            open_kind = None
        pos = m.end()
    if open_kind is not None:
        raise ParseError(
            ParseReason.UNCLOSED_TAG, f"<{tags.name_of(open_kind)}> never closed", open_start
        )
    if text[pos:].strip():
        raise ParseError(ParseReason.TRAILING_GARBAGE, "text after last tag", pos)
    return segments


def parse_planner_emission(text: str, tags: TagSet = DEFAULT_TAGS) -> list[Segment]:
    """Parse one Planner generation into segments, or raise ParseError."""
    segments = _lex(text, tags)
    for s in segments:
        if s.kind is SegmentKind.OBSERVATION:
            raise ParseError(
                ParseReason.UNKNOWN_TAG,
                f"<{tags.observation}> is engine-inserted, not a Planner tag",
                s.char_span[0] if s.char_span else None,
            )
    terminals = [i for i, s in enumerate(segments) if s.kind is not SegmentKind.THINK]
    if not terminals:
        raise ParseError(ParseReason.MISSING_TERMINAL, "no tool call or answer")
    if len(terminals) > 1:
        raise ParseError(ParseReason.MULTIPLE_TERMINALS, f"{len(terminals)} terminal blocks")
    if terminals[0] != len(segments) - 1:
        raise ParseError(ParseReason.TRAILING_GARBAGE, "block after terminal")
    return segments


def check_sequence(segments: list[Segment]) -> None:
    """Raise ParseError unless the segments form a well-formed trajectory body.

    A leading observation is allowed (search context injected before the
    first Planner turn); every other observation must answer a tool call.
    """
    n = len(segments)
    answers = [i for i, s in enumerate(segments) if s.kind is SegmentKind.ANSWER]
    if len(answers) > 1:
        raise ParseError(ParseReason.MULTIPLE_TERMINALS, f"{len(answers)} answer blocks")
    if answers and answers[0] != n - 1:
        raise ParseError(ParseReason.TRAILING_GARBAGE, "block after answer")
    for i, s in enumerate(segments):
        if s.kind is SegmentKind.TOOL_CALL:
            if i + 1 >= n or segments[i + 1].kind is not SegmentKind.OBSERVATION:
                raise ParseError(ParseReason.BAD_SEQUENCE, f"tool call {i} lacks an observation")
        elif s.kind is SegmentKind.OBSERVATION and i > 0:
            if segments[i - 1].kind is not SegmentKind.TOOL_CALL:
                raise ParseError(ParseReason.BAD_SEQUENCE, f"observation {i} answers no tool call")


def parse_trajectory(text: str, tags: TagSet = DEFAULT_TAGS) -> list[Segment]:
    segments = _lex(text, tags)
    check_sequence(segments)
    return segments


def render_segment(segment: Segment, tags: TagSet = DEFAULT_TAGS) -> str:
    name = tags.name_of(segment.kind)
    return f"<{name}>{segment.text}</{name}>"


def serialize_segments(segments: Iterable[Segment], tags: TagSet = DEFAULT_TAGS) -> str:
    return "\n".join(render_segment(s, tags) for s in segments)


def serialize_trajectory(t: Trajectory, tags: TagSet = DEFAULT_TAGS) -> str:
    return serialize_segments(t.segments, tags)


def segment_spans(segments: Iterable[Segment], tags: TagSet = DEFAULT_TAGS) -> list[Span]:
    """Spans of each segment within ``serialize_segments(segments)``."""
    spans = []
    pos = 0
    for i, s in enumerate(segments):
        if i:
            pos += 1  # newline separator
        width = len(render_segment(s, tags))
        spans.append((pos, pos + width))
        pos += width
    return spans


def observation_char_spans(t: Trajectory, tags: TagSet = DEFAULT_TAGS) -> list[Span]:
    spans = segment_spans(t.segments, tags)
    return [sp for s, sp in zip(t.segments, spans) if s.kind is SegmentKind.OBSERVATION]


def contains_tag(text: str) -> bool:
    return _TAG_RE.search(text) is not None


def scrub_tags(text: str) -> str:
    """Remove tag-shaped strings so external text can sit inside a payload."""
    # Repeat: removing "<a>" from "<<a>b>" exposes "<b>".
    while True:
        text, n = _TAG_RE.subn("", text)
        if not n:
            return text


def dumps_trajectories(trajectories: Iterable[Trajectory]) -> str:
    return "".join(
        json.dumps(t.to_dict(), ensure_ascii=False, sort_keys=True) + "\n" for t in trajectories
    )


def loads_trajectories(text: str) -> list[Trajectory]:
    return [Trajectory.from_dict(json.loads(line)) for line in text.splitlines() if line.strip()]
