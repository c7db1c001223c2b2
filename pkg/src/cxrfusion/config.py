"""Run configuration: one YAML/JSON file, CLI flags override its values."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import yaml

from .consensus import DEFAULT_GRID, DEFAULT_THRESHOLD, SimilarityMetric
from .core import UncertainPolicy
from .orchestrator import DEFAULT_QUESTION, BackendConfig, BackendKind, ConfigError, ErrorProfile
from .stats import McNemarUniverse


class Mode(str, Enum):
    UNIMODAL = "unimodal"
    MULTIMODAL = "multimodal"


@dataclass(frozen=True)
class RunConfig:
    dataset: Optional[Path] = None
    image_root: Optional[Path] = None
    out: Path = Path("cxrfusion-out")
    mode: Mode = Mode.UNIMODAL
    uncertain_policy: UncertainPolicy = UncertainPolicy.UNCERTAIN_AS_NEGATIVE
    seed: int = 0
    sample_count: Optional[int] = None
    notegen_seed: Optional[int] = None
    notes_dir: Optional[Path] = None
    phrase_bank: Optional[Path] = None
    notegen_audit: bool = False
    threshold: float = DEFAULT_THRESHOLD
    metric: SimilarityMetric = SimilarityMetric.EXACT_VERDICT
    embedding_provider: str = "hashing-text"
    thresholds: tuple[float, ...] = DEFAULT_GRID
    backends: tuple[BackendConfig, ...] = ()
    concurrency: int = 4
    question: str = DEFAULT_QUESTION
    jpeg_quality: int = 90
    mcnemar_universe: McNemarUniverse = McNemarUniverse.ALL_CASES
    alignment: bool = False
    image_embedding_provider: str = "thumbnail-image"

    def __post_init__(self) -> None:
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"threshold {self.threshold} outside [0, 1]")
        if list(self.thresholds) != sorted(self.thresholds):
            raise ConfigError("threshold grid must be ascending")
        if self.concurrency < 1:
            raise ConfigError("concurrency must be at least 1")
        if not 1 <= self.jpeg_quality <= 100:
            raise ConfigError("jpeg_quality must be in 1..100")
        ids = [b.backend_id for b in self.backends]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate backend ids: {ids}")

    @property
    def resolved_notes_dir(self) -> Path:
        return self.notes_dir or self.out / "notes"

    @property
    def resolved_notegen_seed(self) -> int:
        return self.seed if self.notegen_seed is None else self.notegen_seed

    def to_dict(self) -> dict:
        d: dict[str, Any] = {}
        for name in self.__dataclass_fields__:
            v = getattr(self, name)
            if isinstance(v, Enum):
                v = v.value
            elif isinstance(v, Path):
                v = str(v)
            elif name == "backends":
                v = [b.to_dict() for b in v]
            elif isinstance(v, tuple):
                v = list(v)
            d[name] = v
        return d

    def config_hash(self) -> str:
        """Hash of everything that can change results; the output directory is excluded."""
        d = self.to_dict()
        d.pop("out")
        d.pop("concurrency")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode("utf-8")).hexdigest()

    def validate_paths(self, *names: str) -> None:
        for name in names:
            p = getattr(self, name)
            if p is None:
                raise ConfigError(f"config value {name!r} is required")
            if not Path(p).exists():
                raise ConfigError(f"{name}: {p} does not exist")
        for b in self.backends:
            if b.kind is BackendKind.REPLAY and not Path(b.fixture_path).exists():
                raise ConfigError(f"backend {b.backend_id}: fixture {b.fixture_path} does not exist")


_PATH_KEYS = ("dataset", "image_root", "out", "notes_dir", "phrase_bank")


def _flatten(raw: Mapping) -> dict:
    """Accept nested ``consensus``/``notegen``/``sample`` sections."""
    d = dict(raw)
    for section, mapping in (
        ("consensus", {"threshold": "threshold", "metric": "metric", "embedding_provider": "embedding_provider"}),
        ("notegen", {"seed": "notegen_seed", "notes_dir": "notes_dir", "audit": "notegen_audit", "phrase_bank": "phrase_bank"}),
        ("sample", {"count": "sample_count", "seed": "seed"}),
    ):
        sub = d.pop(section, None)
        if sub is None:
            continue
        if section == "sample" and isinstance(sub, int):
            d["sample_count"] = sub
            continue
        for k, v in dict(sub).items():
            if k not in mapping:
                raise ConfigError(f"unknown key {section}.{k}")
            d[mapping[k]] = v
    return d


def config_from_dict(raw: Mapping, base_dir: Optional[Path] = None) -> RunConfig:
    base_dir = Path(base_dir or ".")
    d = _flatten(raw)
    known = set(RunConfig.__dataclass_fields__)
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key in _PATH_KEYS:
        if d.get(key) is not None:
            p = Path(d[key])
            d[key] = p if p.is_absolute() else (base_dir / p)
    backends = []
    for b in d.get("backends", ()) or ():
        b = dict(b)
        for key in ("fixture", "fixture_path"):
            if b.get(key) and not Path(b[key]).is_absolute():
                b[key] = str(base_dir / b[key])
        backends.append(BackendConfig.from_dict(b))
    d["backends"] = tuple(backends)
    if "thresholds" in d:
        d["thresholds"] = tuple(float(t) for t in d["thresholds"])
    try:
        for key, enum in (("mode", Mode), ("uncertain_policy", UncertainPolicy), ("metric", SimilarityMetric), ("mcnemar_universe", McNemarUniverse)):
            if key in d:
                d[key] = enum(d[key])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(**d)


def load_config(path: Optional[Path]) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(raw, path.parent)


def parse_backend_flag(spec: str) -> BackendConfig:
    """``ID=replay:PATH`` or ``ID=mock:SENS,SPEC[,SEED]``."""
    try:
        backend_id, rest = spec.split("=", 1)
        kind, arg = rest.split(":", 1)
    except ValueError:
        raise ConfigError(f"bad --backend {spec!r}; use ID=replay:PATH or ID=mock:SENS,SPEC[,SEED]") from None
    if kind == "replay":
        return BackendConfig(backend_id, BackendKind.REPLAY, fixture_path=str(Path(arg).resolve()))
    if kind == "mock":
        parts = arg.split(",")
        if len(parts) not in (2, 3):
            raise ConfigError(f"bad mock profile {arg!r}")
        seed = int(parts[2]) if len(parts) == 3 else 0
        return BackendConfig(backend_id, BackendKind.MOCK, error_profile=ErrorProfile(float(parts[0]), float(parts[1]), seed))
    raise ConfigError(f"--backend supports replay and mock; configure {kind!r} backends in the config file")


def apply_overrides(
    cfg: RunConfig,
    mode: Optional[str] = None,
    threshold: Optional[float] = None,
    seed: Optional[int] = None,
    sample: Optional[int] = None,
    out: Optional[Path] = None,
    backends: Sequence[str] = (),
) -> RunConfig:
    changes: dict[str, Any] = {}
    if mode is not None:
        changes["mode"] = Mode(mode)
    if threshold is not None:
        changes["threshold"] = float(threshold)
    if seed is not None:
        changes["seed"] = int(seed)
    if sample is not None:
        changes["sample_count"] = int(sample)
    if out is not None:
        changes["out"] = Path(out)
    if backends:
        changes["backends"] = tuple(parse_backend_flag(b) for b in backends)
    return replace(cfg, **changes) if changes else cfg
