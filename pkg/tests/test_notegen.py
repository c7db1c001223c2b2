import random

import pytest

from cxrfusion.core import ABNORMALITIES, FindingLabel, LabelState, LabelVector, ValidationError
from cxrfusion.notegen import (
    SECTIONS,
    BankError,
    ClinicalNote,
    ExtractionError,
    PhraseBank,
    default_bank,
    extract_labels,
    generate_note,
)


def random_vector(rng):
    k = rng.choice([0, 0, 1, 2, 3, rng.randrange(14)])
    return LabelVector.from_positive(rng.sample(ABNORMALITIES, k))


def test_round_trip_thousand_vectors():
    rng = random.Random(20240501)
    bank = default_bank()
    for i in range(1000):
        v = random_vector(rng)
        seed = rng.randrange(2**32)
        note = generate_note(v, seed, bank)
        assert extract_labels(note, bank) == v
        assert extract_labels(ClinicalNote.parse(note.render()), bank) == v


def test_generation_deterministic_per_vector_and_seed():
    v = LabelVector.from_positive([FindingLabel.EDEMA, FindingLabel.CARDIOMEGALY])
    assert generate_note(v, 11).render() == generate_note(v, 11).render()
    renders = {generate_note(v, s).render() for s in range(20)}
    assert len(renders) > 1


def test_five_sections_in_order():
    text = generate_note(LabelVector.from_positive(), 3).render()
    assert [line.split(":")[0] for line in text.splitlines()] == list(SECTIONS)


def test_impression_lists_positives():
    v = LabelVector.from_positive([FindingLabel.EDEMA, FindingLabel.PNEUMOTHORAX])
    note = generate_note(v, 1)
    assert note.impression == "Findings consistent with edema and pneumothorax."
    assert generate_note(LabelVector.from_positive(), 1).impression in {
        p + "." for p in default_bank().pool(FindingLabel.NO_FINDING, LabelState.POSITIVE)
    }


def test_unresolved_labels_rejected():
    states = list(LabelVector.from_positive().states)
    states[0] = LabelState.UNCERTAIN
    with pytest.raises(ValidationError):
        generate_note(LabelVector(tuple(states)), 0)


def test_extraction_errors():
    note = generate_note(LabelVector.from_positive([FindingLabel.EDEMA]), 5)
    dropped = ClinicalNote(note.examination, note.indication, note.technique, note.findings.split(". ", 1)[1], note.impression)
    with pytest.raises(ExtractionError):
        extract_labels(dropped)
    bank = default_bank()
    both = note.findings + " " + bank.pool(FindingLabel.EDEMA, LabelState.NEGATIVE)[0] + "."
    with pytest.raises(ExtractionError):
        extract_labels(ClinicalNote(note.examination, note.indication, note.technique, both, note.impression))
    with pytest.raises(ExtractionError):
        ClinicalNote.parse("FINDINGS: nothing\n")


def test_bank_round_trips_through_tsv(tmp_path):
    bank = default_bank()
    bank.dump(tmp_path / "bank.tsv")
    assert PhraseBank.load(tmp_path / "bank.tsv") == bank


def test_bank_validation():
    bank = default_bank()
    pos, neg = dict(bank.positive), dict(bank.negative)
    with pytest.raises(BankError):
        PhraseBank({**pos, FindingLabel.EDEMA: ()}, neg)
    with pytest.raises(BankError):
        PhraseBank({**pos, FindingLabel.EDEMA: ("Edema. Present",)}, neg)
    with pytest.raises(BankError):
        PhraseBank({**pos, FindingLabel.EDEMA: pos[FindingLabel.FRACTURE]}, neg)
    with pytest.raises(BankError):
        PhraseBank({**pos, FindingLabel.EDEMA: ("pulmonary edema",)}, {**neg, FindingLabel.EDEMA: ("No pulmonary edema",)})


def test_bundled_bank_shape():
    bank = default_bank()
    for f in ABNORMALITIES:
        assert len(bank.pool(f, LabelState.POSITIVE)) >= 2
        assert len(bank.pool(f, LabelState.NEGATIVE)) >= 2
