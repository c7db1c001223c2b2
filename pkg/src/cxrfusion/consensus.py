"""Inter-model similarity, the consensus gate, and threshold sweeps."""

from __future__ import annotations

import itertools
import json
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import ConsensusOutcome, ConsensusStatus, ModelOutput, ValidationError, Verdict
from .embeddings import EmbeddingProvider, HashingTextEmbedder, _cosine

DEFAULT_THRESHOLD = 0.95
DEFAULT_GRID = (0.90, 0.925, 0.95, 0.975, 1.00)


class SimilarityMetric(str, Enum):
    EXACT_VERDICT = "exact_verdict"
    TOKEN_F1 = "token_f1"
    EMBEDDING_COSINE = "embedding_cosine"
    BERTSCORE_F1 = "bertscore_f1"


class MetricError(ValidationError):
    """An embedding-backed metric could not be computed."""


@dataclass
class ConsensusConfig:
    threshold: float = DEFAULT_THRESHOLD
    metric: SimilarityMetric = SimilarityMetric.EXACT_VERDICT
    provider: Optional[EmbeddingProvider] = field(default=None, repr=False)

    def __post_init__(self) -> None:
        self.metric = SimilarityMetric(self.metric)
        if not 0.0 <= self.threshold <= 1.0:
            raise ValidationError(f"threshold {self.threshold} outside [0, 1]")
        if self.metric in (SimilarityMetric.EMBEDDING_COSINE, SimilarityMetric.BERTSCORE_F1) and self.provider is None:
            self.provider = HashingTextEmbedder()


def _tokens(text: str) -> list[str]:
    return text.lower().split()


def f1_from_pr(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def token_f1(a: str, b: str) -> float:
    ta, tb = _tokens(a), _tokens(b)
    if not ta or not tb:
        return 0.0
    matched = sum((Counter(ta) & Counter(tb)).values())
    return f1_from_pr(matched / len(ta), matched / len(tb))


def _token_matrix(provider, tokens: Sequence[str]) -> np.ndarray:
    if hasattr(provider, "embed_tokens"):
        return provider.embed_tokens(tokens)
    return np.stack([provider.embed(t).as_array() for t in tokens])


def bertscore_f1(a: str, b: str, provider) -> float:
    """Greedy token matching: each token pairs with its most similar counterpart.

    Precision averages over tokens of ``a``, recall over tokens of ``b``.
    Negative cosines are clipped to zero so the score stays in [0, 1].
    """
    ta, tb = _tokens(a), _tokens(b)
    if not ta or not tb:
        return 0.0
    ea, eb = _token_matrix(provider, ta), _token_matrix(provider, tb)
    na = np.linalg.norm(ea, axis=1, keepdims=True)
    nb = np.linalg.norm(eb, axis=1, keepdims=True)
    if not (na > 0).all() or not (nb > 0).all():
        raise MetricError("token embedding with zero norm")
    sim = (ea / na) @ (eb / nb).T
    # identical tokens always match exactly, whatever the embedder's rounding
    same = np.array([[x == y for y in tb] for x in ta])
    sim = np.clip(np.where(same, 1.0, sim), 0.0, 1.0)
    precision = float(sim.max(axis=1).mean())
    recall = float(sim.max(axis=0).mean())
    return min(1.0, f1_from_pr(precision, recall))


def similarity(a: ModelOutput, b: ModelOutput, metric: SimilarityMetric, provider=None) -> float:
    """Score two outputs in [0, 1]; symmetric in its arguments.

    A missing response or (for EXACT_VERDICT) a missing parse scores 0.
    """
    metric = SimilarityMetric(metric)
    if metric is SimilarityMetric.EXACT_VERDICT:
        if a.verdict is None or b.verdict is None:
            return 0.0
        return 1.0 if a.verdict == b.verdict else 0.0
    if a.raw_text is None or b.raw_text is None:
        return 0.0
    if metric is SimilarityMetric.TOKEN_F1:
        return token_f1(a.raw_text, b.raw_text)
    if provider is None:
        provider = HashingTextEmbedder()
    try:
        if metric is SimilarityMetric.BERTSCORE_F1:
            return bertscore_f1(a.raw_text, b.raw_text, provider)
        if a.raw_text == b.raw_text:
            return 1.0 if a.raw_text.strip() else 0.0
        va, vb = provider.embed(a.raw_text), provider.embed(b.raw_text)
        return max(0.0, _cosine(va.as_array(), vb.as_array()))
    except MetricError:
        raise
    except Exception as exc:
        raise MetricError(f"{metric.value} failed: {exc}") from exc


def fuse(outputs: Sequence[ModelOutput], config: ConsensusConfig) -> ConsensusOutcome:
    """Gate a case's outputs on their (minimum pairwise) similarity.

    Consensus needs score >= threshold *and* identical parsed verdicts from
    every backend; text similarity never overrides a verdict disagreement.
    """
    if len(outputs) < 2:
        raise ValidationError("fusion needs at least two outputs")
    outputs = tuple(sorted(outputs, key=lambda o: o.backend_id))
    case_ids = {o.case_id for o in outputs}
    if len(case_ids) != 1:
        raise ValidationError(f"outputs span several cases: {sorted(case_ids)}")
    case_id = outputs[0].case_id

    reason = None
    try:
        score = min(
            similarity(a, b, config.metric, config.provider) for a, b in itertools.combinations(outputs, 2)
        )
    except MetricError as exc:
        score, reason = 0.0, f"metric_error: {exc}"
    score = min(1.0, max(0.0, score))

    verdicts = [o.verdict for o in outputs]
    if reason is None:
        if any(o.failed for o in outputs):
            reason = "backend_error"
        elif any(v is None for v in verdicts):
            reason = "parse_failure"
        elif score < config.threshold:
            reason = "below_threshold"
        elif len(set(verdicts)) > 1:
            reason = "verdict_mismatch"

    if reason is None:
        return ConsensusOutcome(case_id, score, ConsensusStatus.CONSENSUS, Verdict(verdicts[0]), outputs)
    return ConsensusOutcome(case_id, score, ConsensusStatus.FLAGGED, None, outputs, reason)


@dataclass(frozen=True)
class ScoredCase:
    case_id: str
    similarity: float
    correct: bool
    verdicts: tuple[Optional[int], ...] = ()


@dataclass(frozen=True)
class SensitivityRow:
    threshold: float
    consensus_count: int
    consensus_correct: int

    @property
    def consensus_accuracy(self) -> Optional[float]:
        return self.consensus_correct / self.consensus_count if self.consensus_count else None


@dataclass(frozen=True)
class SensitivityTable:
    rows: tuple[SensitivityRow, ...]

    def counts(self) -> list[int]:
        return [r.consensus_count for r in self.rows]

    def to_records(self) -> list[dict]:
        return [
            {
                "threshold": r.threshold,
                "consensus_count": r.consensus_count,
                "consensus_correct": r.consensus_correct,
                "consensus_accuracy": r.consensus_accuracy,
            }
            for r in self.rows
        ]


def scored_case(outcome: ConsensusOutcome, truth: Verdict) -> ScoredCase:
    """Summarise an outcome for re-gating at other thresholds.

    A case counts as correct only if every backend produced the same verdict
    and it matches ground truth.
    """
    verdicts = tuple(None if o.verdict is None else int(o.verdict) for o in outcome.outputs)
    agreed = bool(verdicts) and None not in verdicts and len(set(verdicts)) == 1
    return ScoredCase(outcome.case_id, outcome.similarity, agreed and verdicts[0] == int(truth), verdicts)


def sweep(scored_cases: Iterable[ScoredCase], thresholds: Sequence[float] = DEFAULT_GRID) -> SensitivityTable:
    """Re-apply the gate at each threshold using the stored similarities."""
    cases = sorted(scored_cases, key=lambda c: c.case_id)
    if not cases:
        raise ValidationError("sweep needs at least one case")
    if list(thresholds) != sorted(thresholds):
        raise ValidationError("thresholds must be sorted ascending")
    rows = []
    for t in thresholds:
        kept = [c for c in cases if c.similarity >= t]
        rows.append(SensitivityRow(float(t), len(kept), sum(c.correct for c in kept)))
    return SensitivityTable(tuple(rows))


def review_record(outcome: ConsensusOutcome, raw_paths: Optional[dict[str, str]] = None) -> dict:
    """One line of the manual-review queue for a flagged case."""
    raw_paths = raw_paths or {}
    return {
        "case_id": outcome.case_id,
        "similarity": outcome.similarity,
        "reason": outcome.reason,
        "backends": [
            {
                "backend_id": o.backend_id,
                "verdict": None if o.verdict is None else int(o.verdict),
                "raw_text_path": raw_paths.get(o.backend_id),
                "error": o.error,
            }
            for o in outcome.outputs
        ],
    }


def write_review_queue(path, outcomes: Iterable[ConsensusOutcome], raw_paths: Optional[dict] = None) -> int:
    """Write flagged outcomes (sorted by case_id) as JSON lines; returns the count."""
    raw_paths = raw_paths or {}
    flagged = sorted((o for o in outcomes if not o.is_consensus), key=lambda o: o.case_id)
    with open(path, "w", encoding="utf-8") as fh:
        for o in flagged:
            fh.write(json.dumps(review_record(o, raw_paths.get(o.case_id)), sort_keys=True) + "\n")
    return len(flagged)
