"""Think/bbox/answer trace protocol: prompt rendering and a total parser.

A well-formed trace is a sequence of grounding rounds, each one or more
``<think>`` blocks followed by a ``<bbox>``, optionally closed by one or
more ``<think>`` blocks and a final ``<answer>``.  Whitespace between tags is
ignored; anything else outside tags makes the trace malformed.
"""
from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass, field
from importlib import resources

from .errors import ParseError
from .geometry import BBox

PROMPT_VERSION = "v1"
DEFAULT_ROUND_CAP = 5

WHITESPACE = " \t\n\r\f\v"
TAGS = ("think", "bbox", "answer")

_OPEN_RE = re.compile(r"<(think|bbox|answer)>")
_ANY_TAG_RE = re.compile(r"</?(?:think|bbox|answer)>")
_NUM = r"[+-]?(?:\d+(?:\.\d*)?|\.\d+)"
_BBOX_RE = re.compile(
    r"[ \t\n\r\f\v]*\[[ \t\n\r\f\v]*({n})[ \t\n\r\f\v]*,[ \t\n\r\f\v]*({n})[ \t\n\r\f\v]*,"
    r"[ \t\n\r\f\v]*({n})[ \t\n\r\f\v]*,[ \t\n\r\f\v]*({n})[ \t\n\r\f\v]*\][ \t\n\r\f\v]*".format(n=_NUM)
)


class SegmentKind(str, enum.Enum):
    THINK = "think"
    BBOX = "bbox"
    ANSWER = "answer"


class Terminal(str, enum.Enum):
    ANSWERED = "answered"
    GROUNDED = "grounded"
    MALFORMED = "malformed"


class PromptMode(str, enum.Enum):
    GROUNDED_REASONING = "grounded_reasoning"
    DIRECT_ANSWER = "direct_answer"
    REFERRING_GROUNDING = "referring_grounding"


@dataclass(frozen=True)
class TraceSegment:
    kind: SegmentKind
    text: str | None = None
    box: BBox | None = None

    def __post_init__(self):
        if self.kind is SegmentKind.BBOX:
            if self.box is None or self.text is not None:
                raise ValueError("bbox segment carries exactly a box")
        else:
            if self.text is None or self.box is not None:
                raise ValueError(f"{self.kind.value} segment carries exactly a text")
            if _ANY_TAG_RE.search(self.text):
                raise ValueError("segment text may not contain protocol tags")

    @classmethod
    def think(cls, text: str) -> "TraceSegment":
        return cls(SegmentKind.THINK, text=text)

    @classmethod
    def answer(cls, text: str) -> "TraceSegment":
        return cls(SegmentKind.ANSWER, text=text)

    @classmethod
    def bbox(cls, box: BBox) -> "TraceSegment":
        return cls(SegmentKind.BBOX, box=box)


@dataclass(frozen=True)
class ReasoningTrace:
    segments: tuple[TraceSegment, ...]
    raw: str
    terminal: Terminal
    over_round_cap: bool = False
    error: str | None = field(default=None, compare=False)

    @property
    def boxes(self) -> list[BBox]:
        return [s.box for s in self.segments if s.kind is SegmentKind.BBOX]

    @property
    def num_rounds(self) -> int:
        return sum(1 for s in self.segments if s.kind is SegmentKind.BBOX)

    @property
    def final_answer(self) -> str | None:
        if self.terminal is not Terminal.ANSWERED:
            return None
        return self.segments[-1].text

    def to_dict(self) -> dict:
        segs = []
        for s in self.segments:
            if s.kind is SegmentKind.BBOX:
                segs.append({"kind": s.kind.value, "box": s.box.as_list()})
            else:
                segs.append({"kind": s.kind.value, "text": s.text})
        return {"segments": segs, "terminal": self.terminal.value,
                "over_round_cap": self.over_round_cap}


@dataclass(frozen=True)
class PromptSpec:
    question: str
    mode: PromptMode = PromptMode.GROUNDED_REASONING

    def __post_init__(self):
        if not self.question:
            raise ValueError("question must be non-empty")


def load_template(mode: PromptMode, version: str = PROMPT_VERSION) -> str:
    name = f"{PromptMode(mode).value}.{version}.txt"
    return resources.files("groundzoom").joinpath("prompts", name).read_text(encoding="utf-8")


def render_prompt(spec: PromptSpec) -> str:
    template = load_template(spec.mode)
    if spec.mode is PromptMode.REFERRING_GROUNDING:
        return template.replace("<ref>", spec.question)
    return template.replace("{input}", spec.question)


def parse_bbox_text(payload: str) -> BBox:
    m = _BBOX_RE.fullmatch(payload)
    if m is None:
        raise ParseError(f"not a [x1,y1,x2,y2] payload: {payload!r}")
    coords = [float(g) for g in m.groups()]
    if not all(math.isfinite(c) for c in coords):
        raise ParseError(f"coordinate overflow in {payload!r}")
    return BBox(*coords)


def format_number(v: float) -> str:
    """Shortest positional decimal that parses back to ``v`` exactly."""
    if float(v).is_integer():
        return str(int(v))
    s = repr(float(v))
    if "e" in s or "E" in s:
        from decimal import Decimal
        s = format(Decimal(s), "f")
    return s


def format_bbox(b: BBox) -> str:
    return "[" + ",".join(format_number(v) for v in b.as_list()) + "]"


def render_segments(segments) -> str:
    parts = []
    for s in segments:
        if s.kind is SegmentKind.BBOX:
            parts.append(f"<bbox>{format_bbox(s.box)}</bbox>")
        else:
            parts.append(f"<{s.kind.value}>{s.text}</{s.kind.value}>")
    return "".join(parts)


def _malformed(segments, raw, reason):
    return ReasoningTrace(tuple(segments), raw, Terminal.MALFORMED, error=reason)


def parse_trace(raw, round_cap: int = DEFAULT_ROUND_CAP) -> ReasoningTrace:
    """Parse model output into segments.  Never raises on any input.

    Violations are reported through ``terminal=MALFORMED`` with the
    segments that were recognised before the violation.
    """
    if isinstance(raw, (bytes, bytearray)):
        raw = bytes(raw).decode("utf-8", errors="replace")
    segments: list[TraceSegment] = []
    pos, n = 0, len(raw)
    pending_think = False
    answered = False
    while True:
        while pos < n and raw[pos] in WHITESPACE:
            pos += 1
        if pos >= n:
            break
        if answered:
            return _malformed(segments, raw, "content after answer")
        m = _OPEN_RE.match(raw, pos)
        if m is None:
            return _malformed(segments, raw, f"unexpected text at offset {pos}")
        tag = m.group(1)
        close = f"</{tag}>"
        end = raw.find(close, m.end())
        if end < 0:
            return _malformed(segments, raw, f"unclosed <{tag}>")
        inner = raw[m.end():end]
        if _ANY_TAG_RE.search(inner):
            return _malformed(segments, raw, f"nested tag inside <{tag}>")
        if tag == "think":
            segments.append(TraceSegment.think(inner))
            pending_think = True
        else:
            if not pending_think:
                return _malformed(segments, raw, f"<{tag}> without preceding <think>")
            if tag == "bbox":
                try:
                    box = parse_bbox_text(inner)
                except ParseError as exc:
                    return _malformed(segments, raw, str(exc))
                segments.append(TraceSegment.bbox(box))
            else:
                segments.append(TraceSegment.answer(inner))
                answered = True
            pending_think = False
        pos = end + len(close)

    if not segments:
        return _malformed(segments, raw, "empty trace")
    last = segments[-1].kind
    if last is SegmentKind.THINK:
        return _malformed(segments, raw, "trace ends inside reasoning")
    rounds = sum(1 for s in segments if s.kind is SegmentKind.BBOX)
    terminal = Terminal.ANSWERED if last is SegmentKind.ANSWER else Terminal.GROUNDED
    return ReasoningTrace(tuple(segments), raw, terminal, over_round_cap=rounds > round_cap)
