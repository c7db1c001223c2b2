"""Shared vocabulary: findings, label states, case records and model outputs."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Iterator, Mapping, Optional


class CxrFusionError(Exception):
    """Base class for all package errors."""


class ValidationError(CxrFusionError, ValueError):
    """Raised when a value violates a domain invariant."""


class ExcludedCase(ValidationError):
    """Raised when the uncertainty policy drops a case."""


class FindingLabel(str, Enum):
    ENLARGED_CARDIOMEDIASTINUM = "Enlarged Cardiomediastinum"
    CARDIOMEGALY = "Cardiomegaly"
    LUNG_OPACITY = "Lung Opacity"
    LUNG_LESION = "Lung Lesion"
    EDEMA = "Edema"
    CONSOLIDATION = "Consolidation"
    PNEUMONIA = "Pneumonia"
    ATELECTASIS = "Atelectasis"
    PNEUMOTHORAX = "Pneumothorax"
    PLEURAL_EFFUSION = "Pleural Effusion"
    PLEURAL_OTHER = "Pleural Other"
    FRACTURE = "Fracture"
    SUPPORT_DEVICES = "Support Devices"
    NO_FINDING = "No Finding"

    @property
    def is_abnormality(self) -> bool:
        return self is not FindingLabel.NO_FINDING

    @classmethod
    def parse(cls, text: str) -> "FindingLabel":
        """Accept the display name, the member name, or a compact CamelCase form."""
        key = text.strip().replace("_", " ").replace(" ", "").lower()
        for member in cls:
            if key in (member.value.replace(" ", "").lower(), member.name.replace("_", "").lower()):
                return member
        raise ValidationError(f"unknown finding {text!r}")


FINDINGS: tuple[FindingLabel, ...] = tuple(FindingLabel)
ABNORMALITIES: tuple[FindingLabel, ...] = tuple(f for f in FINDINGS if f.is_abnormality)


class LabelState(str, Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"
    UNCERTAIN = "uncertain"
    UNMENTIONED = "unmentioned"


class UncertainPolicy(str, Enum):
    UNCERTAIN_AS_POSITIVE = "uncertain_as_positive"
    UNCERTAIN_AS_NEGATIVE = "uncertain_as_negative"
    EXCLUDE_CASE = "exclude_case"


DEFAULT_POLICY = UncertainPolicy.UNCERTAIN_AS_NEGATIVE


class ViewType(str, Enum):
    PA = "PA"
    AP = "AP"
    LATERAL = "Lateral"
    UNKNOWN = "Unknown"


class Verdict(int, Enum):
    """Case-level answer: 1 if any abnormality is present, 0 otherwise."""

    NEGATIVE = 0
    POSITIVE = 1


@dataclass(frozen=True)
class LabelVector:
    """Total mapping from the 14 findings to a label state.

    Stored as a tuple in ``FINDINGS`` order so equality and hashing do not
    depend on how the vector was assembled.
    """

    states: tuple[LabelState, ...]

    def __post_init__(self) -> None:
        if len(self.states) != len(FINDINGS):
            raise ValidationError(f"label vector needs {len(FINDINGS)} states, got {len(self.states)}")
        for s in self.states:
            if not isinstance(s, LabelState):
                raise ValidationError(f"not a LabelState: {s!r}")

    @classmethod
    def from_mapping(cls, mapping: Mapping[FindingLabel, LabelState]) -> "LabelVector":
        missing = [f.value for f in FINDINGS if f not in mapping]
        if missing:
            raise ValidationError(f"label vector missing findings: {', '.join(missing)}")
        extra = set(mapping) - set(FINDINGS)
        if extra:
            raise ValidationError(f"unknown findings in label vector: {extra}")
        return cls(tuple(LabelState(mapping[f]) for f in FINDINGS))

    @classmethod
    def from_positive(cls, positives: Iterable[FindingLabel] = ()) -> "LabelVector":
        """Resolved vector with the given abnormalities positive, NoFinding set accordingly."""
        pos = set(positives)
        if FindingLabel.NO_FINDING in pos:
            raise ValidationError("NoFinding is derived; pass abnormalities only")
        mapping = {f: LabelState.POSITIVE if f in pos else LabelState.NEGATIVE for f in ABNORMALITIES}
        mapping[FindingLabel.NO_FINDING] = LabelState.NEGATIVE if pos else LabelState.POSITIVE
        return cls.from_mapping(mapping)

    def __getitem__(self, finding: FindingLabel) -> LabelState:
        return self.states[FINDINGS.index(finding)]

    def items(self) -> Iterator[tuple[FindingLabel, LabelState]]:
        return zip(FINDINGS, self.states)

    def positives(self) -> list[FindingLabel]:
        return [f for f, s in self.items() if f.is_abnormality and s is LabelState.POSITIVE]

    @property
    def is_resolved(self) -> bool:
        return all(s in (LabelState.POSITIVE, LabelState.NEGATIVE) for s in self.states)

    def resolve(self, policy: UncertainPolicy = DEFAULT_POLICY) -> "LabelVector":
        """Map Uncertain per ``policy`` and Unmentioned to Negative.

        Raises ExcludedCase under EXCLUDE_CASE when any state is Uncertain and
        ValidationError if the resolved vector is self-contradictory.
        """
        policy = UncertainPolicy(policy)
        out = []
        for finding, state in self.items():
            if state is LabelState.UNMENTIONED:
                state = LabelState.NEGATIVE
            elif state is LabelState.UNCERTAIN:
                if policy is UncertainPolicy.EXCLUDE_CASE:
                    raise ExcludedCase(f"{finding.value} is uncertain and policy excludes the case")
                state = (
                    LabelState.POSITIVE
                    if policy is UncertainPolicy.UNCERTAIN_AS_POSITIVE
                    else LabelState.NEGATIVE
                )
            out.append(state)
        resolved = LabelVector(tuple(out))
        if resolved[FindingLabel.NO_FINDING] is LabelState.POSITIVE and resolved.positives():
            names = ", ".join(f.value for f in resolved.positives())
            raise ValidationError(f"No Finding is positive together with: {names}")
        return resolved

    def to_dict(self) -> dict[str, str]:
        return {f.value: s.value for f, s in self.items()}

    @classmethod
    def from_dict(cls, data: Mapping[str, str]) -> "LabelVector":
        return cls.from_mapping({FindingLabel.parse(k): LabelState(v) for k, v in data.items()})


def ground_truth_verdict(labels: LabelVector, policy: UncertainPolicy = DEFAULT_POLICY) -> Verdict:
    """Return POSITIVE iff any of the 13 abnormalities is positive after resolution."""
    resolved = labels.resolve(policy)
    return Verdict.POSITIVE if resolved.positives() else Verdict.NEGATIVE


@dataclass(frozen=True)
class CaseRecord:
    case_id: str
    image_refs: tuple[str, ...]
    view: ViewType
    labels: LabelVector
    ground_truth: Verdict
    note: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.case_id:
            raise ValidationError("case_id must be non-empty")
        if not self.image_refs:
            raise ValidationError(f"{self.case_id}: image_refs must be non-empty")

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "image_refs": list(self.image_refs),
            "view": self.view.value,
            "labels": self.labels.to_dict(),
            "ground_truth": int(self.ground_truth),
            "note": self.note,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "CaseRecord":
        return cls(
            case_id=data["case_id"],
            image_refs=tuple(data["image_refs"]),
            view=ViewType(data.get("view", "Unknown")),
            labels=LabelVector.from_dict(data["labels"]),
            ground_truth=Verdict(int(data["ground_truth"])),
            note=data.get("note"),
        )


@dataclass(frozen=True)
class ModelOutput:
    """One backend's answer for one case; ``raw_text`` is kept verbatim."""

    backend_id: str
    case_id: str
    raw_text: Optional[str]
    verdict: Optional[Verdict]
    latency_ms: int = 0
    error: Optional[str] = None

    def __post_init__(self) -> None:
        if self.latency_ms < 0:
            raise ValidationError("latency_ms must be non-negative")
        if self.verdict is None and not self.error:
            raise ValidationError(f"{self.backend_id}/{self.case_id}: missing verdict needs an error")

    @property
    def failed(self) -> bool:
        """True when the backend itself failed (no response text at all)."""
        return self.raw_text is None


class ConsensusStatus(str, Enum):
    CONSENSUS = "consensus"
    FLAGGED = "flagged"


@dataclass(frozen=True)
class ConsensusOutcome:
    case_id: str
    similarity: float
    status: ConsensusStatus
    fused_verdict: Optional[Verdict]
    outputs: tuple[ModelOutput, ...] = field(default=())
    reason: Optional[str] = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.similarity <= 1.0:
            raise ValidationError(f"similarity {self.similarity} outside [0, 1]")
        if (self.status is ConsensusStatus.CONSENSUS) != (self.fused_verdict is not None):
            raise ValidationError("fused_verdict must be present exactly when status is consensus")

    @property
    def is_consensus(self) -> bool:
        return self.status is ConsensusStatus.CONSENSUS
