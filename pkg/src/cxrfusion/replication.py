"""Build two-backend replay fixtures that realise chosen evaluation tables.

Given each backend's confusion matrix and a target agreement decomposition,
:func:`solve_joint_counts` searches every joint (truth, verdict_a, verdict_b)
table consistent with both matrices. Cases where both backends give the same
verdict can still miss the gate under a text metric when one response carries
extra prose; the search uses as few of those as possible. :func:`write_bundle`
then writes a dataset index, images and a replay fixture to disk.
"""

from __future__ import annotations

import csv
import io
import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .core import ABNORMALITIES, FINDINGS, CxrFusionError, FindingLabel
from .orchestrator import write_fixture
from .stats import ConfusionMatrix2x2

RESPONSE_FORMATS = (
    "POSSIBLE DIAGNOSES:\n{d}",
    "POSSIBLE DIAGNOSES: {d}",
    "Possible Diagnoses:\n{d}\n",
    "POSSIBLE DIAGNOSES:\n\n{d}",
)
DIVERGENT_SUFFIX = "\nThe study is limited by patient rotation and low lung volumes."


class InfeasibleTargets(CxrFusionError):
    pass


@dataclass(frozen=True)
class JointCounts:
    """``cells[(truth, a, b)]`` case counts; ``divergent[(truth, v)]`` of the
    same-verdict cells are given diverging texts so they miss the gate."""

    cells: dict[tuple[int, int, int], int]
    divergent: dict[tuple[int, int], int]

    @property
    def total(self) -> int:
        return sum(self.cells.values())

    @property
    def agreed(self) -> int:
        return sum(self.cells[t, v, v] for t in (0, 1) for v in (0, 1)) - sum(self.divergent.values())

    @property
    def agreed_correct(self) -> int:
        return self.cells[0, 0, 0] + self.cells[1, 1, 1] - self.divergent[0, 0] - self.divergent[1, 1]

    def matrix(self, which: int) -> ConfusionMatrix2x2:
        counts = {(t, p): 0 for t in (0, 1) for p in (0, 1)}
        for (t, a, b), n in self.cells.items():
            counts[t, (a, b)[which]] += n
        return ConfusionMatrix2x2(counts[0, 0], counts[0, 1], counts[1, 0], counts[1, 1])


def _candidates(cm_a: ConfusionMatrix2x2, cm_b: ConfusionMatrix2x2):
    n0, n1 = cm_a.tn + cm_a.fp, cm_a.fn + cm_a.tp
    if (n0, n1) != (cm_b.tn + cm_b.fp, cm_b.fn + cm_b.tp):
        raise InfeasibleTargets("the two matrices disagree on class totals")
    for k in range(0, min(cm_a.tn, cm_b.tn) + 1):
        c0 = {(0, 0, 0): k, (0, 0, 1): cm_a.tn - k, (0, 1, 0): cm_b.tn - k, (0, 1, 1): n0 - cm_a.tn - cm_b.tn + k}
        if min(c0.values()) < 0:
            continue
        for j in range(0, min(cm_a.tp, cm_b.tp) + 1):
            c1 = {(1, 1, 1): j, (1, 1, 0): cm_a.tp - j, (1, 0, 1): cm_b.tp - j, (1, 0, 0): n1 - cm_a.tp - cm_b.tp + j}
            if min(c1.values()) < 0:
                continue
            yield {**c0, **c1}


def feasible_decompositions(cm_a: ConfusionMatrix2x2, cm_b: ConfusionMatrix2x2) -> set[tuple[int, int]]:
    """Every reachable (agreed, agreed_correct) pair, by exhaustive enumeration."""
    out = set()
    for cells in _candidates(cm_a, cm_b):
        right = cells[0, 0, 0] + cells[1, 1, 1]
        wrong = cells[0, 1, 1] + cells[1, 0, 0]
        for oc in range(right + 1):
            for ow in range(wrong + 1):
                out.add((right + wrong - oc - ow, right - oc))
    return out


def solve_joint_counts(
    cm_a: ConfusionMatrix2x2,
    cm_b: ConfusionMatrix2x2,
    agreed: int,
    agreed_correct: Optional[int] = None,
) -> JointCounts:
    """Joint table realising both matrices and the agreement targets.

    With ``agreed_correct=None`` the largest reachable value is used. Among
    solutions, fewest divergent-text cases win, then the most even spread
    across cells. Raises InfeasibleTargets if nothing fits.
    """
    best = None
    for cells in _candidates(cm_a, cm_b):
        right = cells[0, 0, 0] + cells[1, 1, 1]
        wrong = cells[0, 1, 1] + cells[1, 0, 0]
        targets = range(right, -1, -1) if agreed_correct is None else [agreed_correct]
        for ac in targets:
            oc = right - ac
            ow = wrong - (agreed - ac)
            if not (0 <= oc <= right and 0 <= ow <= wrong):
                continue
            key = (-ac if agreed_correct is None else 0, oc + ow, -min(cells.values()))
            if best is None or key < best[0]:
                best = (key, cells, oc, ow)
            break
    if best is None:
        raise InfeasibleTargets(
            f"no joint table gives {agreed} agreed cases"
            + ("" if agreed_correct is None else f" with {agreed_correct} correct")
            + f" for matrices {cm_a.as_tuple()} and {cm_b.as_tuple()}"
        )
    _, cells, oc, ow = best
    div = {(0, 0): 0, (1, 1): 0, (0, 1): 0, (1, 0): 0}
    for (t, v), pool in (((0, 0), cells[0, 0, 0]), ((1, 1), cells[1, 1, 1])):
        take = min(oc, pool)
        div[t, v], oc = take, oc - take
    for (t, v), pool in (((0, 1), cells[0, 1, 1]), ((1, 0), cells[1, 0, 0])):
        take = min(ow, pool)
        div[t, v], ow = take, ow - take
    return JointCounts(cells, div)


@dataclass(frozen=True)
class FixtureCase:
    case_id: str
    truth: int
    verdicts: tuple[int, int]
    divergent: bool


def expand_cases(joint: JointCounts, seed: int = 0, prefix: str = "case") -> list[FixtureCase]:
    """One FixtureCase per joint-table count, shuffled with ``seed``."""
    kinds: list[tuple[int, tuple[int, int], bool]] = []
    for (t, a, b), n in sorted(joint.cells.items()):
        d = joint.divergent.get((t, a), 0) if a == b else 0
        kinds += [(t, (a, b), True)] * d + [(t, (a, b), False)] * (n - d)
    random.Random(seed).shuffle(kinds)
    width = max(3, len(str(len(kinds))))
    return [FixtureCase(f"{prefix}{i + 1:0{width}d}", t, v, d) for i, (t, v, d) in enumerate(kinds)]


def response_texts(case: FixtureCase, index: int) -> tuple[str, str]:
    fmt_a = RESPONSE_FORMATS[index % len(RESPONSE_FORMATS)]
    fmt_b = RESPONSE_FORMATS[(index // len(RESPONSE_FORMATS)) % len(RESPONSE_FORMATS)]
    a = fmt_a.format(d=case.verdicts[0])
    b = fmt_b.format(d=case.verdicts[1])
    if case.divergent:
        b = b.rstrip("\n") + DIVERGENT_SUFFIX
    return a, b


def _label_row(case: FixtureCase, rng: random.Random) -> dict[str, str]:
    row = {f.value: "" for f in FINDINGS}
    if case.truth:
        for f in rng.sample(ABNORMALITIES, rng.choice((1, 1, 2, 3))):
            row[f.value] = "1.0"
        spare = [f for f in ABNORMALITIES if not row[f.value]]
        row[rng.choice(spare).value] = rng.choice(("0.0", "-1.0", ""))
    else:
        row[FindingLabel.NO_FINDING.value] = "1.0"
        row[ABNORMALITIES[rng.randrange(len(ABNORMALITIES))].value] = "0.0"
    return row


def synthetic_radiograph(seed: int, size: int = 24) -> np.ndarray:
    """Small deterministic 12-bit frame: a bright mediastinum on a dark field."""
    rng = np.random.default_rng(seed)
    y, x = np.mgrid[0:size, 0:size]
    body = 2600 - 2000 * (np.abs(x - size / 2) / (size / 2)) ** 2
    img = body + 300 * (y / size) + rng.normal(0, 60, (size, size))
    return np.clip(img, 0, 4095).astype(np.uint16)


def write_dicom(path: Union[str, Path], pixels: np.ndarray, photometric: str = "MONOCHROME2",
                slope: float = 1.0, intercept: float = 0.0, uid_suffix: str = "1") -> None:
    """Write a single-frame uncompressed 16-bit grayscale DICOM file."""
    from pydicom.dataset import FileMetaDataset, Dataset
    from pydicom.uid import ExplicitVRLittleEndian, SecondaryCaptureImageStorage

    uid = f"1.2.826.0.1.3680043.8.498.{uid_suffix}"
    meta = FileMetaDataset()
    meta.MediaStorageSOPClassUID = SecondaryCaptureImageStorage
    meta.MediaStorageSOPInstanceUID = uid
    meta.TransferSyntaxUID = ExplicitVRLittleEndian
    ds = Dataset()
    ds.file_meta = meta
    ds.SOPClassUID = SecondaryCaptureImageStorage
    ds.SOPInstanceUID = uid
    ds.Modality = "DX"
    ds.Rows, ds.Columns = pixels.shape
    ds.SamplesPerPixel = 1
    ds.PhotometricInterpretation = photometric
    ds.BitsAllocated = 16
    ds.BitsStored = 12
    ds.HighBit = 11
    ds.PixelRepresentation = 0
    ds.RescaleSlope = slope
    ds.RescaleIntercept = intercept
    ds.PixelData = np.ascontiguousarray(pixels, dtype=np.uint16).tobytes()
    ds.save_as(str(path), enforce_file_format=True)


def _write_image(path: Path, pixels: np.ndarray, uid_suffix: str) -> None:
    from PIL import Image

    if path.suffix == ".dcm":
        write_dicom(path, pixels, uid_suffix=uid_suffix)
        return
    img8 = (pixels.astype(np.float64) / 4095 * 255).round().astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(img8).save(buf, format="PNG" if path.suffix == ".png" else "JPEG", quality=95)
    path.write_bytes(buf.getvalue())


def write_bundle(
    directory: Union[str, Path],
    cases: Sequence[FixtureCase],
    backend_ids: tuple[str, str] = ("chatgpt", "claude"),
    seed: int = 0,
) -> dict[str, Path]:
    """Write ``index.csv``, ``images/`` and ``replay.jsonl`` for ``cases``."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    rng = random.Random(seed)
    header = ["Path", "case_id", "Frontal/Lateral", "AP/PA"] + [f.value for f in FINDINGS]
    entries = []
    with open(directory / "index.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
        w.writeheader()
        for i, case in enumerate(cases):
            ext = (".dcm", ".png", ".jpg")[i % 3]
            rel = f"images/{case.case_id}{ext}"
            _write_image(directory / rel, synthetic_radiograph(seed * 100_003 + i), uid_suffix=f"{seed}.{i + 1}")
            view = rng.choice((("Frontal", "PA"), ("Frontal", "AP"), ("Lateral", "")))
            w.writerow({"Path": rel, "case_id": case.case_id, "Frontal/Lateral": view[0], "AP/PA": view[1], **_label_row(case, rng)})
            a, b = response_texts(case, i)
            entries += [(backend_ids[0], case.case_id, a), (backend_ids[1], case.case_id, b)]
    write_fixture(directory / "replay.jsonl", entries)
    with open(directory / "truth.json", "w", encoding="utf-8") as fh:
        json.dump({c.case_id: c.truth for c in cases}, fh, indent=0, sort_keys=True)
    return {"index": directory / "index.csv", "images": directory, "fixture": directory / "replay.jsonl"}
