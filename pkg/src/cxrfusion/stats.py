"""Evaluation arithmetic: accuracy, confusion matrices, weighted PRF,
agreement decomposition and McNemar's test."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from decimal import ROUND_HALF_UP, Decimal
from enum import Enum
from fractions import Fraction
from typing import TYPE_CHECKING, Mapping, Optional, Sequence

from .core import ConsensusOutcome, ValidationError, Verdict

if TYPE_CHECKING:
    from .consensus import SensitivityTable


def _check_pair(predictions: Sequence[int], truths: Sequence[int]) -> None:
    if len(predictions) != len(truths):
        raise ValidationError(f"length mismatch: {len(predictions)} predictions vs {len(truths)} truths")
    if not predictions:
        raise ValidationError("need at least one prediction")


def accuracy(predictions: Sequence[int], truths: Sequence[int]) -> float:
    _check_pair(predictions, truths)
    return sum(int(p) == int(t) for p, t in zip(predictions, truths)) / len(truths)


def percent(numerator: int, denominator: int, places: int = 1) -> Optional[float]:
    """Exact ratio as a percentage, rounded half-up; None for a zero denominator."""
    if denominator == 0:
        return None
    frac = Fraction(100 * numerator, denominator)
    q = Decimal(frac.numerator) / Decimal(frac.denominator)
    return float(q.quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class ConfusionMatrix2x2:
    """Rows are the true class (0, 1), columns the predicted class."""

    tn: int
    fp: int
    fn: int
    tp: int

    def __post_init__(self) -> None:
        if min(self.tn, self.fp, self.fn, self.tp) < 0:
            raise ValidationError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tn + self.fp + self.fn + self.tp

    @property
    def correct(self) -> int:
        return self.tn + self.tp

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.tn, self.fp, self.fn, self.tp)


def confusion(predictions: Sequence[int], truths: Sequence[int]) -> ConfusionMatrix2x2:
    _check_pair(predictions, truths)
    counts = {(0, 0): 0, (0, 1): 0, (1, 0): 0, (1, 1): 0}
    for p, t in zip(predictions, truths):
        key = (int(t), int(p))
        if key not in counts:
            raise ValidationError(f"non-binary value in pair (truth={t}, prediction={p})")
        counts[key] += 1
    return ConfusionMatrix2x2(tn=counts[0, 0], fp=counts[0, 1], fn=counts[1, 0], tp=counts[1, 1])


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def weighted_prf(cm: ConfusionMatrix2x2) -> PRF:
    """Per-class precision/recall/F1 averaged by true-class support (0/0 -> 0)."""
    if cm.total == 0:
        raise ValidationError("empty confusion matrix")
    per_class = []
    # (true positives for the class, predicted as class, actually class)
    for hit, predicted, support in ((cm.tn, cm.tn + cm.fn, cm.tn + cm.fp), (cm.tp, cm.tp + cm.fp, cm.tp + cm.fn)):
        p, r = _ratio(hit, predicted), _ratio(hit, support)
        f = 2 * p * r / (p + r) if p + r else 0.0
        per_class.append((p, r, f, support))
    n = cm.total
    return PRF(
        precision=sum(p * s for p, _, _, s in per_class) / n,
        recall=sum(r * s for _, r, _, s in per_class) / n,
        f1=sum(f * s for _, _, f, s in per_class) / n,
    )


@dataclass(frozen=True)
class AgreementSummary:
    total_cases: int
    agreement_count: int
    agreement_correct: int
    agreement_incorrect: int
    disagreement_count: int

    @property
    def agreement_rate_pct(self) -> Optional[float]:
        return percent(self.agreement_count, self.total_cases)

    @property
    def consensus_accuracy(self) -> Optional[float]:
        """Accuracy over agreed cases; None (not applicable) when nothing agreed."""
        if self.agreement_count == 0:
            return None
        return self.agreement_correct / self.agreement_count

    @property
    def consensus_accuracy_pct(self) -> Optional[float]:
        return percent(self.agreement_correct, self.agreement_count)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(
            agreement_rate_pct=self.agreement_rate_pct,
            agreement_correct_pct=self.consensus_accuracy_pct,
            agreement_incorrect_pct=percent(self.agreement_incorrect, self.agreement_count),
            disagreement_pct=percent(self.disagreement_count, self.total_cases),
            consensus_accuracy=self.consensus_accuracy,
        )
        return d


def agreement_summary(outcomes: Sequence[ConsensusOutcome], truths: Mapping[str, Verdict]) -> AgreementSummary:
    seen = set()
    agreed = correct = 0
    for o in outcomes:
        if o.case_id in seen:
            raise ValidationError(f"duplicate outcome for {o.case_id}")
        seen.add(o.case_id)
        if o.case_id not in truths:
            raise ValidationError(f"no ground truth for {o.case_id}")
        if o.is_consensus:
            agreed += 1
            correct += int(o.fused_verdict) == int(truths[o.case_id])
    total = len(outcomes)
    return AgreementSummary(total, agreed, correct, agreed - correct, total - agreed)


def chi2_sf_1dof(x: float) -> float:
    """Upper tail of the chi-square distribution with one degree of freedom."""
    if x < 0:
        raise ValidationError("chi-square statistic must be non-negative")
    return math.erfc(math.sqrt(x / 2.0))


@dataclass(frozen=True)
class McNemarResult:
    b: int
    c: int
    chi_square: Optional[float]
    p_value: Optional[float]

    @property
    def applicable(self) -> bool:
        return self.chi_square is not None


def mcnemar(b: int, c: int) -> McNemarResult:
    """Uncorrected McNemar statistic (b - c)^2 / (b + c) with its 1-dof p-value.

    ``b``: individual right, consensus wrong. ``c``: the reverse. With no
    discordant pairs the test is inapplicable and both fields are None.
    """
    if b < 0 or c < 0:
        raise ValidationError("discordant counts must be non-negative")
    if b + c == 0:
        return McNemarResult(b, c, None, None)
    chi2 = (b - c) ** 2 / (b + c)
    return McNemarResult(b, c, chi2, chi2_sf_1dof(chi2))


class McNemarUniverse(str, Enum):
    """Which cases enter the model-vs-consensus contingency table.

    ALL_CASES: every evaluable case with a parsed model verdict; a flagged
    case counts as a consensus miss (the ensemble abstained).
    AGREED_ONLY: only cases that reached consensus.
    """

    ALL_CASES = "all_cases"
    AGREED_ONLY = "agreed_only"


def discordant_pairs(
    model_verdicts: Mapping[str, Optional[Verdict]],
    outcomes: Sequence[ConsensusOutcome],
    truths: Mapping[str, Verdict],
    universe: McNemarUniverse = McNemarUniverse.ALL_CASES,
) -> tuple[int, int, int]:
    """Return (b, c, n) for one model against the consensus over ``universe``."""
    universe = McNemarUniverse(universe)
    b = c = n = 0
    for o in outcomes:
        mv = model_verdicts.get(o.case_id)
        if mv is None:
            continue
        if universe is McNemarUniverse.AGREED_ONLY and not o.is_consensus:
            continue
        truth = int(truths[o.case_id])
        model_ok = int(mv) == truth
        cons_ok = o.is_consensus and int(o.fused_verdict) == truth
        n += 1
        if model_ok and not cons_ok:
            b += 1
        elif cons_ok and not model_ok:
            c += 1
    return b, c, n


def model_discordant_pairs(
    verdicts_a: Mapping[str, Optional[Verdict]],
    verdicts_b: Mapping[str, Optional[Verdict]],
    truths: Mapping[str, Verdict],
) -> tuple[int, int, int]:
    """(b, c, n) for model A against model B over cases where both parsed.

    With two backends the consensus can only be right where both models are,
    so a model-vs-consensus table never has consensus-only wins; this paired
    comparison is the informative one.
    """
    b = c = n = 0
    for case_id, va in verdicts_a.items():
        vb = verdicts_b.get(case_id)
        if va is None or vb is None:
            continue
        truth = int(truths[case_id])
        n += 1
        a_ok, b_ok = int(va) == truth, int(vb) == truth
        b += a_ok and not b_ok
        c += b_ok and not a_ok
    return b, c, n


# ---------------------------------------------------------------- run summary


class RunError(ValidationError):
    pass


@dataclass(frozen=True)
class BackendMetrics:
    backend_id: str
    confusion: ConfusionMatrix2x2
    accuracy: float
    prf: PRF
    parse_failures: int
    backend_failures: int

    def to_dict(self) -> dict:
        cm = self.confusion
        return {
            "confusion": {"tn": cm.tn, "fp": cm.fp, "fn": cm.fn, "tp": cm.tp},
            "n": cm.total,
            "correct": cm.correct,
            "accuracy": self.accuracy,
            "accuracy_pct": percent(cm.correct, cm.total),
            "precision_weighted": self.prf.precision,
            "recall_weighted": self.prf.recall,
            "f1_weighted": self.prf.f1,
            "parse_failures": self.parse_failures,
            "backend_failures": self.backend_failures,
        }


@dataclass(frozen=True)
class EvalSummary:
    total_cases: int
    unevaluable: tuple[str, ...]
    backends: dict[str, BackendMetrics]
    agreement: AgreementSummary
    mcnemar: dict[str, tuple[McNemarResult, int]]
    mcnemar_universe: McNemarUniverse
    pairwise: dict[str, tuple[McNemarResult, int]]
    sensitivity: "SensitivityTable"
    flag_reasons: dict[str, int]
    metadata: dict

    @property
    def consensus_accuracy(self) -> Optional[float]:
        return self.agreement.consensus_accuracy

    def to_dict(self) -> dict:
        return {
            "metadata": self.metadata,
            "cases": {
                "total": self.total_cases,
                "evaluable": self.total_cases - len(self.unevaluable),
                "unevaluable": len(self.unevaluable),
                "unevaluable_ids": list(self.unevaluable),
            },
            "backends": {k: v.to_dict() for k, v in sorted(self.backends.items())},
            "consensus": {
                "agreed": self.agreement.agreement_count,
                "correct": self.agreement.agreement_correct,
                "accuracy": self.consensus_accuracy,
                "accuracy_pct": self.agreement.consensus_accuracy_pct,
            },
            "agreement": self.agreement.to_dict(),
            "flag_reasons": dict(sorted(self.flag_reasons.items())),
            "mcnemar": {
                "universe": self.mcnemar_universe.value,
                "continuity_correction": False,
                "tests": {
                    k: {"b": r.b, "c": r.c, "n": n, "chi_square": r.chi_square, "p_value": r.p_value, "applicable": r.applicable}
                    for k, (r, n) in sorted(self.mcnemar.items())
                },
                "pairwise": {
                    k: {"b": r.b, "c": r.c, "n": n, "chi_square": r.chi_square, "p_value": r.p_value, "applicable": r.applicable}
                    for k, (r, n) in sorted(self.pairwise.items())
                },
            },
            "sensitivity": self.sensitivity.to_records(),
        }


def build_eval_summary(
    truths: Mapping[str, Verdict],
    outcomes: Sequence[ConsensusOutcome],
    backend_ids: Sequence[str],
    thresholds: Sequence[float],
    unevaluable: Sequence[str] = (),
    universe: McNemarUniverse = McNemarUniverse.ALL_CASES,
    metadata: Optional[dict] = None,
) -> EvalSummary:
    """Assemble every table from fused outcomes of evaluable cases.

    Unevaluable cases (all backends failed) are counted but stay out of every
    denominator. A backend's matrix only covers cases where it parsed.
    """
    from .consensus import scored_case, sweep

    outcomes = sorted(outcomes, key=lambda o: o.case_id)
    if not outcomes:
        raise RunError("no evaluable cases")
    bad = set(unevaluable) & {o.case_id for o in outcomes}
    if bad:
        raise RunError(f"cases marked unevaluable but fused: {sorted(bad)}")

    backends: dict[str, BackendMetrics] = {}
    per_model: dict[str, dict[str, Optional[Verdict]]] = {}
    for bid in sorted(backend_ids):
        preds, gold = [], []
        verdicts: dict[str, Optional[Verdict]] = {}
        parse_fail = backend_fail = 0
        for o in outcomes:
            out = next((x for x in o.outputs if x.backend_id == bid), None)
            if out is None or out.failed:
                backend_fail += 1
                continue
            verdicts[o.case_id] = out.verdict
            if out.verdict is None:
                parse_fail += 1
                continue
            preds.append(int(out.verdict))
            gold.append(int(truths[o.case_id]))
        per_model[bid] = verdicts
        if not preds:
            raise RunError(f"backend {bid} produced no parsed verdicts")
        cm = confusion(preds, gold)
        backends[bid] = BackendMetrics(bid, cm, accuracy(preds, gold), weighted_prf(cm), parse_fail, backend_fail)

    reasons: dict[str, int] = {}
    for o in outcomes:
        if not o.is_consensus:
            key = (o.reason or "flagged").split(":")[0]
            reasons[key] = reasons.get(key, 0) + 1

    tests = {}
    for bid, verdicts in per_model.items():
        b, c, n = discordant_pairs(verdicts, outcomes, truths, universe)
        tests[bid] = (mcnemar(b, c), n)

    pairwise = {}
    ids = sorted(per_model)
    for i, x in enumerate(ids):
        for y in ids[i + 1:]:
            b, c, n = model_discordant_pairs(per_model[x], per_model[y], truths)
            pairwise[f"{x}|{y}"] = (mcnemar(b, c), n)

    table = sweep([scored_case(o, truths[o.case_id]) for o in outcomes], thresholds)
    return EvalSummary(
        total_cases=len(outcomes) + len(unevaluable),
        unevaluable=tuple(sorted(unevaluable)),
        backends=backends,
        agreement=agreement_summary(outcomes, truths),
        mcnemar=tests,
        mcnemar_universe=McNemarUniverse(universe),
        pairwise=pairwise,
        sensitivity=table,
        flag_reasons=reasons,
        metadata=dict(metadata or {}),
    )
