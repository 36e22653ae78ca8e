"""Training curves, zoom-count histograms and benchmark accuracy summaries."""
from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field

from .errors import JoinError
from .reward import GoldAnswer, QuestionType, accuracy_reward

DEFAULT_WINDOW = 25


class CurveName(str, enum.Enum):
    FORMAT_REWARD = "format_reward"
    ACCURACY_REWARD = "accuracy_reward"
    RESPONSE_LENGTH = "response_length"
    GIOU = "giou"


# TrainStats field feeding each curve
CURVE_FIELDS = {
    CurveName.FORMAT_REWARD: "mean_format_reward",
    CurveName.ACCURACY_REWARD: "mean_accuracy_reward",
    CurveName.RESPONSE_LENGTH: "mean_response_rounds",
    CurveName.GIOU: "mean_giou",
}

CURVE_CSV_HEADER = ("series", "step", "value", "window_std")
ZOOM_CSV_HEADER = ("zoom_count", "count", "percentage")
ZOOM_BUCKETS = ("0", "1", "2", ">=3")


@dataclass(frozen=True)
class CurvePoint:
    step: int
    value: float
    window_std: float


@dataclass
class CurveSeries:
    name: CurveName
    points: list[CurvePoint] = field(default_factory=list)

    def __post_init__(self):
        steps = [p.step for p in self.points]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError("curve steps must be strictly increasing")


@dataclass(frozen=True)
class ZoomHistogram:
    counts: tuple[int, int, int, int]
    total: int

    def percentages(self) -> tuple[float, ...]:
        if self.total == 0:
            return (0.0, 0.0, 0.0, 0.0)
        return tuple(round(100.0 * c / self.total, 2) for c in self.counts)

    def to_rows(self) -> list[tuple[str, int, str]]:
        return [(b, c, f"{p:.2f}") for b, c, p in zip(ZOOM_BUCKETS, self.counts, self.percentages())]


def _mean(xs: list[float]) -> float:
    # shifted by the first element so constant windows come back exact
    x0 = xs[0]
    return x0 + math.fsum(x - x0 for x in xs) / len(xs)


def _sample_std(xs: list[float]) -> float:
    if len(xs) < 2:
        return 0.0
    m = _mean(xs)
    return math.sqrt(math.fsum((x - m) ** 2 for x in xs) / (len(xs) - 1))


def smooth_curve(points, window: int, name: CurveName = CurveName.FORMAT_REWARD) -> CurveSeries:
    """Centered moving average; windows shrink at the series edges."""
    if window < 1:
        raise ValueError("window must be >= 1")
    points = [(int(s), float(v)) for s, v in points]
    values = [v for _, v in points]
    before, after = (window - 1) // 2, window // 2
    out = []
    for i, (step, _) in enumerate(points):
        span = values[max(0, i - before):i + after + 1]
        out.append(CurvePoint(step, _mean(span), _sample_std(span)))
    return CurveSeries(CurveName(name), out)


def curves_from_stats(stats, window: int = DEFAULT_WINDOW) -> list[CurveSeries]:
    rows = [s if isinstance(s, dict) else s.to_dict() for s in stats]
    return [smooth_curve([(r["step"], r[fieldname]) for r in rows], window, name)
            for name, fieldname in CURVE_FIELDS.items()]


def curves_to_csv(series: list[CurveSeries]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_CSV_HEADER)
    for s in series:
        for p in s.points:
            w.writerow((s.name.value, p.step, repr(p.value), repr(p.window_std)))
    return buf.getvalue()


def curves_to_wide_csv(series: list[CurveSeries]) -> str:
    """One row per step, one column per curve: the plot-data layout."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step"] + [s.name.value for s in series] + [f"{s.name.value}_std" for s in series])
    by_step = [dict((p.step, p) for p in s.points) for s in series]
    steps = sorted(set().union(*by_step)) if by_step else []
    for step in steps:
        vals = [repr(d[step].value) if step in d else "" for d in by_step]
        stds = [repr(d[step].window_std) if step in d else "" for d in by_step]
        w.writerow([step] + vals + stds)
    return buf.getvalue()


def _zoom_count(record) -> int:
    return int(record["zoom_count"] if isinstance(record, dict) else record.zoom_count)


def zoom_distribution(records) -> ZoomHistogram:
    counts = [0, 0, 0, 0]
    total = 0
    for r in records:
        counts[min(_zoom_count(r), 3)] += 1
        total += 1
    return ZoomHistogram(tuple(counts), total)


def zoom_to_csv(h: ZoomHistogram) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ZOOM_CSV_HEADER)
    w.writerows(h.to_rows())
    return buf.getvalue()


def _get(record, name):
    return record.get(name) if isinstance(record, dict) else getattr(record, name)


def score_benchmark(records, golds: dict, qtype=QuestionType.MULTIPLE_CHOICE) -> dict:
    """Mean accuracy reward over records joined to golds on ``sample_id``.

    ``golds`` maps sample_id to a GoldAnswer or to ``(GoldAnswer, qtype)``.
    Records without a final answer score 0.  ``per_bucket`` groups by the
    zoom-count buckets of the histogram.
    """
    scores, buckets = [], {b: [] for b in ZOOM_BUCKETS}
    for r in records:
        sid = _get(r, "sample_id")
        if sid not in golds:
            raise JoinError(f"no gold answer for sample {sid!r}")
        gold = golds[sid]
        q = qtype
        if isinstance(gold, tuple):
            gold, q = gold
        answer = _get(r, "final_answer")
        s = accuracy_reward(answer, gold, q) if answer is not None else 0.0
        scores.append(s)
        buckets[ZOOM_BUCKETS[min(_zoom_count(r), 3)]].append(s)
    mean = math.fsum(scores) / len(scores) if scores else 0.0
    per_bucket = {b: {"n": len(v), "accuracy_mean": math.fsum(v) / len(v) if v else 0.0}
                  for b, v in buckets.items()}
    return {"accuracy_mean": mean, "n": len(scores), "per_bucket": per_bucket}


def load_golds(rows) -> dict:
    """Build the ``score_benchmark`` gold map from sample records."""
    out = {}
    for row in rows:
        gold = GoldAnswer(text=row["answer"], choices=row.get("choices"))
        out[row["sample_id"]] = (gold, QuestionType(row.get("question_type", "free_form")))
    return out
