"""Dataset index loading and radiograph decoding/normalisation/encoding."""

from __future__ import annotations

import base64
import csv
import hashlib
import io
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path, PurePosixPath
from typing import Optional, Sequence, Union

import numpy as np

from .core import (
    FINDINGS,
    CaseRecord,
    CxrFusionError,
    ExcludedCase,
    LabelState,
    LabelVector,
    UncertainPolicy,
    ValidationError,
    ViewType,
    ground_truth_verdict,
)

log = logging.getLogger(__name__)

DEFAULT_JPEG_QUALITY = 90


class SchemaError(CxrFusionError):
    pass


class DecodeError(CxrFusionError):
    pass


class UnsupportedInput(DecodeError):
    pass


class DataError(CxrFusionError, ValueError):
    pass


class SourceFormat(str, Enum):
    DICOM = "DICOM"
    JPEG = "JPEG"
    PNG = "PNG"


# ---------------------------------------------------------------- index


@dataclass(frozen=True)
class SamplingSpec:
    count: int
    seed: int


@dataclass
class DatasetIndex:
    records: list[CaseRecord]
    source: str
    policy: UncertainPolicy
    rows_read: int = 0
    rejected: list[dict] = field(default_factory=list)
    sample: Optional[SamplingSpec] = None

    def __len__(self) -> int:
        return len(self.records)

    def report(self) -> dict:
        return {
            "source": self.source,
            "policy": self.policy.value,
            "rows_read": self.rows_read,
            "records": len(self.records),
            "rejected": len(self.rejected),
            "rejections": self.rejected,
            "sample": None if self.sample is None else {"count": self.sample.count, "seed": self.sample.seed},
        }


_CELL_STATES = {1.0: LabelState.POSITIVE, 0.0: LabelState.NEGATIVE, -1.0: LabelState.UNCERTAIN}


def parse_label_cell(cell: Optional[str]) -> LabelState:
    text = (cell or "").strip()
    if text == "":
        return LabelState.UNMENTIONED
    try:
        value = float(text)
    except ValueError:
        raise ValidationError(f"unparseable label cell {cell!r}") from None
    if value not in _CELL_STATES:
        raise ValidationError(f"label cell {cell!r} not in {{1.0, 0.0, -1.0, blank}}")
    return _CELL_STATES[value]


def _view_from_row(row: dict) -> ViewType:
    appa = (row.get("AP/PA") or "").strip().upper()
    if appa in ("PA", "AP"):
        return ViewType(appa)
    if (row.get("Frontal/Lateral") or "").strip().lower() == "lateral":
        return ViewType.LATERAL
    return ViewType.UNKNOWN


def case_id_from_path(path: str) -> str:
    """``.../patient00001/study1/view1_frontal.jpg`` -> ``patient00001_study1_view1_frontal``."""
    p = PurePosixPath(path.replace("\\", "/"))
    parts = [x for x in p.with_suffix("").parts[-3:] if x not in ("/", "..", ".")]
    return "_".join(parts)


def sample_rank(key: str, seed: int) -> bytes:
    """BLAKE2b(seed, key): the sort key of the hash-rank sampler."""
    return hashlib.blake2b(f"{seed}\x1f{key}".encode("utf-8"), digest_size=16).digest()


def seeded_sample(keys: Sequence[str], count: int, seed: int) -> list[str]:
    """Uniform sample without replacement: the ``count`` keys with the smallest
    BLAKE2b(seed, key) digests. Depends only on the key set, count and seed."""
    if count > len(keys):
        raise ValidationError(f"sample count {count} exceeds {len(keys)} available rows")
    if count < 0:
        raise ValidationError("sample count must be non-negative")
    chosen = set(sorted(keys, key=lambda k: sample_rank(k, seed))[:count])
    return [k for k in keys if k in chosen]


def load_dataset_index(
    index_file: Union[str, Path],
    policy: UncertainPolicy = UncertainPolicy.UNCERTAIN_AS_NEGATIVE,
    sample: Optional[SamplingSpec] = None,
    path_column: str = "Path",
) -> DatasetIndex:
    """Read a CheXpert-style CSV into case records.

    ``Path`` may hold several image paths separated by ``;`` (multi-view study).
    An optional ``case_id`` column overrides the id derived from the path.
    """
    policy = UncertainPolicy(policy)
    index_file = Path(index_file)
    with index_file.open(newline="", encoding="utf-8-sig") as fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        reader.fieldnames = header
        required = [path_column] + [f.value for f in FINDINGS]
        missing = [c for c in required if c not in header]
        if missing:
            raise SchemaError(f"{index_file}: missing required columns: {', '.join(missing)}")
        rows = list(reader)

    records: list[CaseRecord] = []
    rejected: list[dict] = []
    seen: set[str] = set()
    for lineno, row in enumerate(rows, start=2):
        refs = tuple(p.strip() for p in (row.get(path_column) or "").split(";") if p.strip())
        case_id = (row.get("case_id") or "").strip() or (case_id_from_path(refs[0]) if refs else "")
        try:
            if not refs:
                raise ValidationError("empty image path")
            if case_id in seen:
                raise ValidationError(f"duplicate case_id {case_id!r}")
            labels = LabelVector.from_mapping({f: parse_label_cell(row.get(f.value)) for f in FINDINGS})
            truth = ground_truth_verdict(labels, policy)
        except (ValidationError, ExcludedCase) as exc:
            kind = "policy" if isinstance(exc, ExcludedCase) else "row"
            rejected.append({"line": lineno, "case_id": case_id or None, "kind": kind, "reason": str(exc)})
            log.info("rejected row %d (%s): %s", lineno, case_id, exc)
            continue
        seen.add(case_id)
        records.append(CaseRecord(case_id, refs, _view_from_row(row), labels, truth))

    if sample is not None:
        keep = set(seeded_sample([r.case_id for r in records], sample.count, sample.seed))
        records = [r for r in records if r.case_id in keep]
    return DatasetIndex(records, str(index_file), policy, len(rows), rejected, sample)


# ---------------------------------------------------------------- images


@dataclass
class Raster:
    """Decoded pixels plus what is needed to normalise them."""

    pixels: np.ndarray
    source_format: SourceFormat
    photometric: Optional[str] = None
    rescale_slope: float = 1.0
    rescale_intercept: float = 0.0
    bits_stored: Optional[int] = None

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])


def detect_format(data: bytes) -> Optional[SourceFormat]:
    if data[:3] == b"\xff\xd8\xff":
        return SourceFormat.JPEG
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        return SourceFormat.PNG
    if data[128:132] == b"DICM":
        return SourceFormat.DICOM
    return None


def decode_image(data: bytes, hint: Optional[SourceFormat] = None) -> Raster:
    """Decode DICOM into a 2-D matrix with rescale metadata, JPEG/PNG into RGB."""
    fmt = detect_format(data) or (SourceFormat(hint) if hint else None)
    if fmt is None:
        raise DecodeError("unrecognised image format (not DICOM, JPEG or PNG)")
    if fmt is SourceFormat.DICOM:
        return _decode_dicom(data)
    from PIL import Image

    try:
        with Image.open(io.BytesIO(data)) as im:
            im.load()
            if im.mode.startswith("I") or im.mode == "F":
                # 16-bit or float grayscale: keep full depth, to_display normalises
                return Raster(np.asarray(im).astype(np.float64), fmt, photometric="MONOCHROME2")
            rgb = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except Exception as exc:
        raise DecodeError(f"cannot decode {fmt.value} image: {exc}") from exc
    return Raster(rgb, fmt)


def _decode_dicom(data: bytes) -> Raster:
    import pydicom

    try:
        ds = pydicom.dcmread(io.BytesIO(data), force=True)
        frames = int(getattr(ds, "NumberOfFrames", 1) or 1)
        if frames > 1:
            raise UnsupportedInput(f"multi-frame DICOM ({frames} frames) is not supported")
        pixels = np.asarray(ds.pixel_array)
    except UnsupportedInput:
        raise
    except Exception as exc:
        raise DecodeError(f"cannot decode DICOM image: {exc}") from exc
    if pixels.ndim != 2:
        raise UnsupportedInput(f"expected a 2-D DICOM frame, got shape {pixels.shape}")
    return Raster(
        pixels,
        SourceFormat.DICOM,
        photometric=str(getattr(ds, "PhotometricInterpretation", "MONOCHROME2")),
        rescale_slope=float(getattr(ds, "RescaleSlope", 1.0) or 1.0),
        rescale_intercept=float(getattr(ds, "RescaleIntercept", 0.0) or 0.0),
        bits_stored=getattr(ds, "BitsStored", None),
    )


def normalize_to_8bit(raster: Raster) -> Raster:
    """Rescale, invert MONOCHROME1, then min-max to [0, 255] rounding half up.

    A constant frame maps to all zeros.
    """
    values = raster.pixels.astype(np.float64) * raster.rescale_slope + raster.rescale_intercept
    if not np.isfinite(values).all():
        raise DataError("non-finite pixel values after rescale")
    if (raster.photometric or "").upper() == "MONOCHROME1":
        values = -values
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        out = np.zeros(values.shape, dtype=np.uint8)
    else:
        out = np.floor((values - lo) / (hi - lo) * 255.0 + 0.5).clip(0, 255).astype(np.uint8)
    return Raster(out, raster.source_format, photometric="MONOCHROME2", bits_stored=8)


@dataclass(frozen=True)
class EncodedImage:
    jpeg_bytes: bytes
    base64_text: str
    width: int
    height: int
    source_format: SourceFormat
    mime_type: str = "image/jpeg"


def to_display(raster: Raster) -> Raster:
    """8-bit pixels ready for JPEG: DICOM and high-depth rasters normalised, 8-bit passed through."""
    if raster.source_format is SourceFormat.DICOM or raster.pixels.dtype != np.uint8:
        return normalize_to_8bit(raster)
    return raster


def encode_payload(raster: Union[Raster, np.ndarray], quality: int = DEFAULT_JPEG_QUALITY) -> EncodedImage:
    """JPEG-encode an 8-bit grayscale or RGB raster and base64 it (standard alphabet)."""
    from PIL import Image

    if isinstance(raster, np.ndarray):
        raster = Raster(raster, SourceFormat.PNG)
    pixels = np.asarray(raster.pixels)
    if pixels.ndim not in (2, 3) or 0 in pixels.shape[:2]:
        raise ValidationError(f"cannot encode raster of shape {pixels.shape}")
    if not 1 <= int(quality) <= 100:
        raise ValidationError("JPEG quality must be in 1..100")
    if pixels.dtype != np.uint8:
        raise ValidationError("encode_payload expects 8-bit pixels; normalise first")
    buf = io.BytesIO()
    Image.fromarray(pixels).save(buf, format="JPEG", quality=int(quality))
    jpeg = buf.getvalue()
    return EncodedImage(
        jpeg_bytes=jpeg,
        base64_text=base64.b64encode(jpeg).decode("ascii"),
        width=int(pixels.shape[1]),
        height=int(pixels.shape[0]),
        source_format=raster.source_format,
    )


def encode_file(path: Union[str, Path], quality: int = DEFAULT_JPEG_QUALITY) -> EncodedImage:
    path = Path(path)
    hint = SourceFormat.DICOM if path.suffix.lower() == ".dcm" else None
    return encode_payload(to_display(decode_image(path.read_bytes(), hint)), quality)


def image_hash(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()

