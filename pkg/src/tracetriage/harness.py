"""Evaluation metrics, class-prior projection and cost accounting."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from decimal import Decimal
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .errors import EvalError

LABELS = ("phishing", "benign")
PREDICTIONS = ("phishing", "benign", "error", "blocked")
FIXED_OPERATOR_USD = 0.20


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0
    errors: int = 0
    blocked: int = 0

    @property
    def positives(self) -> int:
        return self.tp + self.fn

    @property
    def negatives(self) -> int:
        return self.fp + self.tn


@dataclass(frozen=True)
class Metrics:
    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]


@dataclass(frozen=True)
class PriorShiftPoint:
    prevalence: float
    precision: Optional[float]
    recall: float
    f1: Optional[float]


@dataclass(frozen=True)
class Evaluation:
    counts: ConfusionCounts
    metrics: Metrics


@dataclass
class CostRecord:
    per_item_usd: list = field(default_factory=list)
    fixed_operator_usd: float = FIXED_OPERATOR_USD
    quantiles: dict = field(default_factory=dict)

    @property
    def total_usd(self) -> float:
        return float(sum(self.per_item_usd))

    def total_at(self, q: str) -> float:
        """Per-URL figure at quantile ``q`` including the fixed operator cost."""
        return self.quantiles[q] + self.fixed_operator_usd

    def to_dict(self) -> dict:
        return {
            "per_item_usd": [round(c, 6) for c in self.per_item_usd],
            "fixed_operator_usd": self.fixed_operator_usd,
            "quantiles": dict(self.quantiles),
        }

    @classmethod
    def from_dict(cls, data) -> "CostRecord":
        return cls(list(data.get("per_item_usd", [])), data.get("fixed_operator_usd", FIXED_OPERATOR_USD),
                   dict(data.get("quantiles", {})))


def f1_from(precision: Optional[float], recall: Optional[float]) -> Optional[float]:
    if precision is None or recall is None or precision + recall == 0:
        return None
    return 2 * precision * recall / (precision + recall)


def prf(counts: Optional[ConfusionCounts] = None, *, precision: Optional[float] = None,
        recall: Optional[float] = None) -> Metrics:
    """Precision, recall and F1 from confusion counts or from a (P, R) pair.

    Undefined values are None rather than 0.
    """
    if counts is not None:
        precision = counts.tp / (counts.tp + counts.fp) if counts.tp + counts.fp else None
        recall = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else None
    return Metrics(precision, recall, f1_from(precision, recall))


def prior_shift(tpr: float, fpr: float, prevalence: float) -> PriorShiftPoint:
    """Project precision and F1 to another phishing prevalence with TPR/FPR fixed."""
    if not (0 <= tpr <= 1 and 0 <= fpr <= 1):
        raise EvalError("tpr and fpr must lie in [0, 1]")
    if not 0 < prevalence < 1:
        raise EvalError("prevalence must lie in (0, 1)")
    hits = tpr * prevalence
    alarms = hits + fpr * (1 - prevalence)
    precision = hits / alarms if alarms > 0 else None
    return PriorShiftPoint(prevalence, precision, tpr, f1_from(precision, tpr))


def parse_grid(spec: str) -> list[float]:
    """``start:stop:step`` inclusive grid, stepped in exact decimal arithmetic."""
    try:
        start, stop, step = (Decimal(part) for part in spec.split(":"))
    except Exception:
        raise EvalError(f"bad grid {spec!r}; expected start:stop:step") from None
    if step <= 0 or stop < start:
        raise EvalError(f"bad grid {spec!r}")
    out = []
    value = start
    while value <= stop:
        out.append(float(value))
        value += step
    return out


def prior_shift_curve(tpr: float, fpr: float, grid: Iterable[float]) -> list[PriorShiftPoint]:
    return [prior_shift(tpr, fpr, p) for p in grid]


def evaluate(predictions: Sequence[str], labels: Sequence[str]) -> Evaluation:
    """Tally a confusion matrix; error and blocked slots are counted but excluded."""
    if len(predictions) != len(labels):
        raise EvalError(f"{len(predictions)} predictions for {len(labels)} labels")
    tp = fp = fn = tn = errors = blocked = 0
    for pred, label in zip(predictions, labels):
        if pred not in PREDICTIONS:
            raise EvalError(f"unknown prediction {pred!r}")
        if label not in LABELS + ("error",):
            raise EvalError(f"unknown label {label!r}")
        if pred == "error" or label == "error":
            errors += 1
        elif pred == "blocked":
            blocked += 1
        elif pred == "phishing":
            if label == "phishing":
                tp += 1
            else:
                fp += 1
        elif label == "phishing":
            fn += 1
        else:
            tn += 1
    counts = ConfusionCounts(tp, fp, fn, tn, errors, blocked)
    return Evaluation(counts, prf(counts))


def nearest_rank(values: Sequence[float], q: float) -> float:
    """Order statistic at rank ``ceil(q * (n - 1))`` (0-based) of the sorted values.

    Never interpolates: the result is always one of the inputs.
    """
    if not values:
        raise EvalError("no values")
    if not 0 <= q <= 1:
        raise EvalError("quantile must lie in [0, 1]")
    ordered = sorted(values)
    rank = math.ceil(Fraction(str(q)) * (len(ordered) - 1))
    return ordered[rank]


def cost_quantiles(costs: Sequence[float], fixed_operator_usd: float = FIXED_OPERATOR_USD) -> CostRecord:
    if not costs:
        raise EvalError("cost quantiles need at least one cost")
    return CostRecord(
        per_item_usd=list(costs),
        fixed_operator_usd=fixed_operator_usd,
        quantiles={"p50": nearest_rank(costs, 0.5), "p99": nearest_rank(costs, 0.99)},
    )


# -- file formats --------------------------------------------------------------

def _fmt(value) -> str:
    if value is None:
        return "NA"
    if isinstance(value, int):
        return str(value)
    return f"{value:.4f}"


def metrics_table(evaluation: Evaluation) -> str:
    """``metrics.v1``: two-column TSV with a header row."""
    c, m = evaluation.counts, evaluation.metrics
    rows = [("tp", c.tp), ("fp", c.fp), ("fn", c.fn), ("tn", c.tn), ("errors", c.errors),
            ("blocked", c.blocked), ("precision", m.precision), ("recall", m.recall), ("f1", m.f1)]
    return "metric\tvalue\n" + "".join(f"{k}\t{_fmt(v)}\n" for k, v in rows)


def curve_table(points: Iterable[PriorShiftPoint]) -> str:
    lines = ["prevalence\tprecision\trecall\tf1\n"]
    for p in points:
        lines.append(f"{p.prevalence:.4f}\t{_fmt(p.precision)}\t{p.recall:.4f}\t{_fmt(p.f1)}\n")
    return "".join(lines)


def load_truth(path) -> dict[str, dict]:
    """Truth TSV: ``bundle_id<TAB>label[<TAB>blocked]`` with an optional header."""
    truth = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if lineno == 1 and parts[0] == "bundle_id":
            continue
        if len(parts) < 2 or parts[1] not in LABELS:
            raise EvalError(f"{path}:{lineno}: expected bundle_id<TAB>phishing|benign")
        blocked = len(parts) > 2 and parts[2].strip().lower() in ("1", "true", "yes", "blocked")
        truth[parts[0]] = {"label": parts[1], "blocked": blocked}
    return truth


def truth_table(entries: Iterable[tuple[str, str, bool]]) -> str:
    return "bundle_id\tlabel\tblocked\n" + "".join(
        f"{bid}\t{label}\t{'true' if blocked else 'false'}\n" for bid, label, blocked in entries)
