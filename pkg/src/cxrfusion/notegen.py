"""Synthetic five-section radiology notes generated from label vectors.

Findings carry exactly one sentence per abnormality, drawn from a phrase
bank, so the label vector can be recovered from the note text.
"""

from __future__ import annotations

import csv
import random
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Union

from .core import ABNORMALITIES, FINDINGS, CxrFusionError, FindingLabel, LabelState, LabelVector, ValidationError

SECTIONS = ("EXAMINATION", "INDICATION", "TECHNIQUE", "FINDINGS", "IMPRESSION")

EXAMINATION_TEXT = "Chest radiograph"
INDICATION_TEXT = "Evaluation for acute cardiopulmonary process"
TECHNIQUE_TEXT = "Frontal and lateral views of the chest were obtained"


class BankError(ValidationError):
    pass


class ExtractionError(CxrFusionError):
    pass


def _norm(text: str) -> str:
    return " ".join(text.strip().rstrip(".").split()).lower()


@dataclass(frozen=True)
class PhraseBank:
    positive: dict[FindingLabel, tuple[str, ...]]
    negative: dict[FindingLabel, tuple[str, ...]]
    _lookup: dict[str, tuple[FindingLabel, LabelState]] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        lookup: dict[str, tuple[FindingLabel, LabelState]] = {}
        for finding in FINDINGS:
            for pol, pool in ((LabelState.POSITIVE, self.positive.get(finding)), (LabelState.NEGATIVE, self.negative.get(finding))):
                if not pool:
                    raise BankError(f"empty {pol.value} phrase pool for {finding.value}")
                for phrase in pool:
                    if not phrase.strip() or "." in phrase or "\n" in phrase:
                        raise BankError(f"phrase must be a single sentence without periods: {phrase!r}")
                    key = _norm(phrase)
                    if key in lookup and lookup[key] != (finding, pol):
                        raise BankError(f"phrase {phrase!r} is assigned to more than one finding/polarity")
                    lookup[key] = (finding, pol)
            for p in self.positive[finding]:
                for n in self.negative[finding]:
                    if _norm(p) in _norm(n) or _norm(n) in _norm(p):
                        raise BankError(f"{finding.value}: {p!r} and {n!r} overlap across polarities")
        object.__setattr__(self, "_lookup", lookup)

    def pool(self, finding: FindingLabel, state: LabelState) -> tuple[str, ...]:
        return (self.positive if state is LabelState.POSITIVE else self.negative)[finding]

    def classify(self, sentence: str) -> Optional[tuple[FindingLabel, LabelState]]:
        return self._lookup.get(_norm(sentence))

    @classmethod
    def load(cls, path: Union[str, Path, None] = None) -> "PhraseBank":
        """Read a tab-separated bank (finding, polarity, text); bundled bank by default."""
        if path is None:
            text = resources.files("cxrfusion").joinpath("data/phrase_bank.tsv").read_text(encoding="utf-8")
        else:
            text = Path(path).read_text(encoding="utf-8")
        rows = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
        pos: dict[FindingLabel, list[str]] = {}
        neg: dict[FindingLabel, list[str]] = {}
        for rec in csv.DictReader(rows, delimiter="\t"):
            try:
                finding = FindingLabel.parse(rec["finding"])
                polarity = rec["polarity"].strip().lower()
            except (KeyError, AttributeError) as exc:
                raise BankError(f"malformed bank row: {rec}") from exc
            if polarity not in ("positive", "negative"):
                raise BankError(f"bad polarity {rec['polarity']!r}")
            (pos if polarity == "positive" else neg).setdefault(finding, []).append(rec["text"].strip())
        return cls({k: tuple(v) for k, v in pos.items()}, {k: tuple(v) for k, v in neg.items()})

    def dump(self, path: Union[str, Path]) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(["finding", "polarity", "text"])
            for finding in FINDINGS:
                for p in self.positive[finding]:
                    w.writerow([finding.value, "positive", p])
                for p in self.negative[finding]:
                    w.writerow([finding.value, "negative", p])


_DEFAULT_BANK: Optional[PhraseBank] = None


def default_bank() -> PhraseBank:
    global _DEFAULT_BANK
    if _DEFAULT_BANK is None:
        _DEFAULT_BANK = PhraseBank.load()
    return _DEFAULT_BANK


@dataclass(frozen=True)
class ClinicalNote:
    examination: str
    indication: str
    technique: str
    findings: str
    impression: str
    seed: Optional[int] = None
    labels: Optional[LabelVector] = None

    def sections(self) -> dict[str, str]:
        return dict(zip(SECTIONS, (self.examination, self.indication, self.technique, self.findings, self.impression)))

    def render(self) -> str:
        return "".join(f"{name}: {body}\n" for name, body in self.sections().items())

    @classmethod
    def parse(cls, text: str) -> "ClinicalNote":
        """Inverse of :meth:`render`; sections must appear in the fixed order."""
        pattern = "".join(rf"{name}:(?P<{name.lower()}>.*?)\n?" for name in SECTIONS)
        m = re.fullmatch(pattern + r"\s*", text, flags=re.DOTALL)
        if not m:
            raise ExtractionError("note does not have the five expected sections in order")
        return cls(*(m.group(name.lower()).strip() for name in SECTIONS))


def _join_names(names: list[str]) -> str:
    if len(names) == 1:
        return names[0]
    return ", ".join(names[:-1]) + " and " + names[-1]


def generate_note(labels: LabelVector, seed: int, bank: Optional[PhraseBank] = None) -> ClinicalNote:
    """Render a note for resolved ``labels``; a pure function of (labels, seed, bank)."""
    bank = bank or default_bank()
    if not labels.is_resolved:
        raise ValidationError("labels must be resolved before note generation")
    rng = random.Random(seed)
    sentences = [rng.choice(bank.pool(f, labels[f])) for f in ABNORMALITIES]
    rng.shuffle(sentences)
    findings = " ".join(s + "." for s in sentences)
    positives = labels.positives()
    if positives:
        impression = "Findings consistent with " + _join_names([f.value.lower() for f in positives]) + "."
    else:
        impression = rng.choice(bank.pool(FindingLabel.NO_FINDING, LabelState.POSITIVE)) + "."
    return ClinicalNote(
        examination=EXAMINATION_TEXT + ".",
        indication=INDICATION_TEXT + ".",
        technique=TECHNIQUE_TEXT + ".",
        findings=findings,
        impression=impression,
        seed=seed,
        labels=labels,
    )


def extract_labels(note: ClinicalNote, bank: Optional[PhraseBank] = None) -> LabelVector:
    """Recover the label vector from the Findings section.

    Every abnormality needs exactly one polarity; unknown sentences are skipped.
    """
    bank = bank or default_bank()
    found: dict[FindingLabel, LabelState] = {}
    for sentence in re.split(r"(?<=\.)\s+", note.findings.strip()):
        if not sentence.strip():
            continue
        hit = bank.classify(sentence)
        if hit is None or not hit[0].is_abnormality:
            continue
        finding, state = hit
        if found.get(finding, state) is not state:
            raise ExtractionError(f"{finding.value} is stated both positive and negative")
        found[finding] = state
    missing = [f.value for f in ABNORMALITIES if f not in found]
    if missing:
        raise ExtractionError(f"no phrase found for: {', '.join(missing)}")
    any_pos = any(s is LabelState.POSITIVE for s in found.values())
    found[FindingLabel.NO_FINDING] = LabelState.NEGATIVE if any_pos else LabelState.POSITIVE
    return LabelVector.from_mapping(found)
