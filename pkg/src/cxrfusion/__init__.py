"""Chest X-ray triage with two vision-language backends and a similarity-gated consensus."""

from .core import (
    CaseRecord,
    ConsensusOutcome,
    ConsensusStatus,
    FindingLabel,
    LabelState,
    LabelVector,
    ModelOutput,
    UncertainPolicy,
    Verdict,
)
from .consensus import ConsensusConfig, SimilarityMetric, fuse, sweep
from .parser import parse_response
from .stats import build_eval_summary, mcnemar, weighted_prf

__version__ = "0.1.0"

__all__ = [
    "CaseRecord", "ConsensusOutcome", "ConsensusStatus", "FindingLabel", "LabelState", "LabelVector",
    "ModelOutput", "UncertainPolicy", "Verdict", "ConsensusConfig", "SimilarityMetric", "fuse", "sweep",
    "parse_response", "build_eval_summary", "mcnemar", "weighted_prf",
]
