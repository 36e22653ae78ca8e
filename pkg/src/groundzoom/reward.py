"""Scalar rewards for grounding and answer rollouts.

The grounding phase is scored on format alone.  The answer phase adds an
accuracy term: exact match for multiple-choice questions, mean of
ROUGE-1/2/L for free-form ones.  ``GROUND_R1_BBOX`` additionally pays the
mean IoU between emitted boxes and a ground-truth box.
"""
from __future__ import annotations

import enum
import re
from dataclasses import asdict, dataclass

from .geometry import BBox, iou
from .rouge import mean_rouge
from .trace import DEFAULT_ROUND_CAP, ReasoningTrace, SegmentKind, Terminal


class RewardMode(str, enum.Enum):
    GROUND_R1 = "ground-r1"
    GROUND_R1_BBOX = "ground-r1-bbox"
    VANILLA_R1 = "vanilla-r1"


class QuestionType(str, enum.Enum):
    MULTIPLE_CHOICE = "multiple_choice"
    FREE_FORM = "free_form"


_DEFAULT_WEIGHTS = {
    RewardMode.GROUND_R1: (1.0, 1.0, 1.0, 0.0),
    RewardMode.GROUND_R1_BBOX: (1.0, 1.0, 1.0, 1.0),
    RewardMode.VANILLA_R1: (0.0, 1.0, 1.0, 0.0),
}


@dataclass(frozen=True)
class RewardConfig:
    w_fg: float = 1.0
    w_fa: float = 1.0
    w_acc: float = 1.0
    w_iou: float = 0.0
    mode: RewardMode = RewardMode.GROUND_R1
    question_type: QuestionType = QuestionType.MULTIPLE_CHOICE
    # "sum" is the weighted sum; "gate" multiplies the content terms by the format terms.
    combine: str = "sum"
    round_cap: int = DEFAULT_ROUND_CAP

    def __post_init__(self):
        object.__setattr__(self, "mode", RewardMode(self.mode))
        object.__setattr__(self, "question_type", QuestionType(self.question_type))
        for name in ("w_fg", "w_fa", "w_acc", "w_iou"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.mode is RewardMode.VANILLA_R1 and (self.w_fg != 0 or self.w_iou != 0):
            raise ValueError("vanilla-r1 has no grounding phase: w_fg and w_iou must be 0")
        if self.combine not in ("sum", "gate"):
            raise ValueError(f"unknown combine rule {self.combine!r}")

    @classmethod
    def for_mode(cls, mode, **overrides) -> "RewardConfig":
        mode = RewardMode(mode)
        w_fg, w_fa, w_acc, w_iou = _DEFAULT_WEIGHTS[mode]
        kwargs = dict(w_fg=w_fg, w_fa=w_fa, w_acc=w_acc, w_iou=w_iou, mode=mode)
        kwargs.update(overrides)
        return cls(**kwargs)


@dataclass(frozen=True)
class GoldAnswer:
    text: str
    choices: tuple[str, ...] | None = None
    gt_box: BBox | None = None

    def __post_init__(self):
        if self.choices is not None:
            object.__setattr__(self, "choices", tuple(self.choices))
            if not self.choices:
                raise ValueError("choices must be non-empty")
            if self.text not in self.choices:
                raise ValueError(f"gold {self.text!r} is not among the choices")

    @classmethod
    def from_dict(cls, d: dict) -> "GoldAnswer":
        box = d.get("gt_box")
        return cls(text=d["text"], choices=d.get("choices"),
                   gt_box=BBox(*box) if box is not None else None)


@dataclass(frozen=True)
class RewardBreakdown:
    format_ground: float = 0.0
    format_answer: float = 0.0
    accuracy: float = 0.0
    iou_bonus: float = 0.0
    total: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


_WS_RE = re.compile(r"\s+")
TERMINAL_PUNCTUATION = ".,;:!?"


def normalize_answer(s: str) -> str:
    s = _WS_RE.sub(" ", s.strip().casefold())
    return s.rstrip(TERMINAL_PUNCTUATION).strip()


def format_reward_grounding(t: ReasoningTrace, round_cap: int | None = None) -> float:
    if t.terminal is Terminal.MALFORMED:
        return 0.0
    cap = DEFAULT_ROUND_CAP if round_cap is None else round_cap
    if t.num_rounds > cap:
        return 0.0
    prev = None
    for seg in t.segments:
        if seg.kind is SegmentKind.BBOX and prev is not SegmentKind.THINK:
            return 0.0
        prev = seg.kind
    return 1.0


def format_reward_answer(t: ReasoningTrace) -> float:
    if t.terminal is not Terminal.ANSWERED:
        return 0.0
    if len(t.segments) < 2 or t.segments[-2].kind is not SegmentKind.THINK:
        return 0.0
    return 1.0


def exact_match_reward(pred: str, gold: GoldAnswer) -> float:
    return 1.0 if normalize_answer(pred) == normalize_answer(gold.text) else 0.0


def accuracy_reward(pred: str, gold: GoldAnswer, qtype) -> float:
    if QuestionType(qtype) is QuestionType.MULTIPLE_CHOICE:
        return exact_match_reward(pred, gold)
    return mean_rouge(pred, gold.text)


def iou_reward(trace: ReasoningTrace, gt: BBox) -> float:
    boxes = trace.boxes
    if not boxes:
        return 0.0
    gt = gt.normalized()
    return sum(iou(b.normalized(), gt) for b in boxes) / len(boxes)


def total_reward(t: ReasoningTrace, gold: GoldAnswer, cfg: RewardConfig) -> RewardBreakdown:
    fg = format_reward_grounding(t, cfg.round_cap) if cfg.w_fg > 0 else 0.0
    fa = format_reward_answer(t)
    acc = 0.0
    if t.terminal is Terminal.ANSWERED:
        acc = accuracy_reward(t.final_answer, gold, cfg.question_type)
    bonus = 0.0
    if cfg.mode is RewardMode.GROUND_R1_BBOX and gold.gt_box is not None:
        bonus = iou_reward(t, gold.gt_box)
    if t.terminal is Terminal.MALFORMED:
        fg = fa = acc = bonus = 0.0
    if cfg.combine == "gate":
        gate = fa * (fg if cfg.w_fg > 0 else 1.0)
        total = gate * (cfg.w_acc * acc + cfg.w_iou * bonus)
    else:
        total = cfg.w_fg * fg + cfg.w_fa * fa + cfg.w_acc * acc + cfg.w_iou * bonus
    return RewardBreakdown(fg, fa, acc, bonus, total)
