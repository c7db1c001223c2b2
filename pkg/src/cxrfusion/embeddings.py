"""Embedding providers, cosine similarity and multimodal concatenation.

Real encoders (CLIP, BioClinicalBERT, hosted text-embedding APIs) plug in
through :class:`EmbeddingProvider`. The two local providers shipped here are
deterministic and *non-semantic*; they exist so the embedding path can be
exercised offline.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import os
import threading
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional, Protocol, Sequence, Union, runtime_checkable

import numpy as np

from .core import ValidationError


class Modality(str, Enum):
    IMAGE = "image"
    TEXT = "text"
    MULTIMODAL = "multimodal"


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]
    provider_id: str
    modality: Modality
    # Providers that embed into a common space (e.g. CLIP image+text towers)
    # declare the same ``space``; cross-modal cosines are only defined then.
    space: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.values:
            raise ValidationError("embedding must have positive dimension")
        if not all(math.isfinite(v) for v in self.values):
            raise ValidationError("embedding values must be finite")

    @classmethod
    def from_array(cls, arr, provider_id: str, modality: Modality, space: Optional[str] = None):
        return cls(tuple(float(v) for v in np.asarray(arr, dtype=np.float64).ravel()), provider_id, Modality(modality), space)

    @property
    def dimension(self) -> int:
        return len(self.values)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


@runtime_checkable
class EmbeddingProvider(Protocol):
    provider_id: str
    dimension: int
    modality: Modality
    space: Optional[str]

    def embed(self, content: Union[str, bytes]) -> EmbeddingVector: ...


def cosine_similarity(x: EmbeddingVector, y: EmbeddingVector) -> float:
    """(x . y) / (|x| |y|) in double precision, clipped to [-1, 1]."""
    if x.dimension != y.dimension:
        raise ValidationError(f"dimension mismatch: {x.dimension} vs {y.dimension}")
    return _cosine(x.as_array(), y.as_array())


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = math.sqrt(float(np.dot(a, a)))
    nb = math.sqrt(float(np.dot(b, b)))
    if na == 0.0 or nb == 0.0:
        raise ValidationError("cosine similarity is undefined for a zero vector")
    return max(-1.0, min(1.0, float(np.dot(a, b)) / (na * nb)))


def concat_multimodal(img: EmbeddingVector, text: EmbeddingVector) -> EmbeddingVector:
    """Image values followed by text values; argument order is enforced."""
    if img.modality is not Modality.IMAGE or text.modality is not Modality.TEXT:
        raise ValidationError(
            f"concat_multimodal expects (image, text), got ({img.modality.value}, {text.modality.value})"
        )
    return EmbeddingVector(
        img.values + text.values,
        provider_id=f"{img.provider_id}+{text.provider_id}",
        modality=Modality.MULTIMODAL,
    )


def cross_modal_cosine(img: EmbeddingVector, text: EmbeddingVector) -> Optional[float]:
    """Image-text cosine when both providers share a space, else None."""
    if img.space is None or img.space != text.space or img.dimension != text.dimension:
        return None
    return cosine_similarity(img, text)


def _hash_feature(feature: str, seed: int, dim: int) -> tuple[int, float]:
    digest = hashlib.blake2b(feature.encode("utf-8"), digest_size=8, key=seed.to_bytes(8, "little")).digest()
    h = int.from_bytes(digest, "little")
    return h % dim, (1.0 if (h >> 63) & 1 else -1.0)


class HashingTextEmbedder:
    """Signed feature hashing of lowercased tokens and their character trigrams.

    Non-semantic: similar spellings get similar vectors, synonyms do not.
    """

    modality = Modality.TEXT
    space = None

    def __init__(self, dimension: int = 768, seed: int = 0, provider_id: Optional[str] = None):
        if dimension <= 0:
            raise ValidationError("dimension must be positive")
        self.dimension = dimension
        self.seed = seed
        self.provider_id = provider_id or f"hashing-text-{dimension}-s{seed}"

    def _features(self, token: str) -> list[str]:
        padded = f"<{token}>"
        grams = [padded[i : i + 3] for i in range(max(1, len(padded) - 2))]
        return [f"w:{token}"] + [f"g:{g}" for g in grams]

    def token_array(self, token: str) -> np.ndarray:
        vec = np.zeros(self.dimension, dtype=np.float64)
        for feat in self._features(token.lower()):
            idx, sign = _hash_feature(feat, self.seed, self.dimension)
            vec[idx] += sign
        return vec

    def embed_tokens(self, tokens: Sequence[str]) -> np.ndarray:
        if not tokens:
            return np.zeros((0, self.dimension))
        return np.stack([self.token_array(t) for t in tokens])

    def embed(self, content: Union[str, bytes]) -> EmbeddingVector:
        if isinstance(content, bytes):
            content = content.decode("utf-8")
        tokens = content.lower().split()
        vec = self.embed_tokens(tokens).sum(axis=0) if tokens else np.zeros(self.dimension)
        if not vec.any():
            # empty text or a full cancellation; keep the vector usable
            idx, sign = _hash_feature("<empty>", self.seed, self.dimension)
            vec[idx] = sign
        return EmbeddingVector.from_array(vec, self.provider_id, Modality.TEXT)


class ThumbnailImageEmbedder:
    """Grayscale thumbnail pixels, mean-centred, as an image vector.

    Default 16x32 gives 512 values. Non-semantic.
    """

    modality = Modality.IMAGE
    space = None

    def __init__(self, width: int = 32, height: int = 16, provider_id: Optional[str] = None):
        self.size = (width, height)
        self.dimension = width * height
        self.provider_id = provider_id or f"thumbnail-{width}x{height}"

    def embed(self, content: Union[str, bytes]) -> EmbeddingVector:
        from PIL import Image

        if isinstance(content, str):
            import base64

            content = base64.b64decode(content)
        with Image.open(io.BytesIO(content)) as im:
            arr = np.asarray(im.convert("L").resize(self.size, Image.BILINEAR), dtype=np.float64)
        vec = arr.ravel() / 255.0
        vec = vec - vec.mean()
        if not vec.any():
            vec = np.full(self.dimension, 1.0 / math.sqrt(self.dimension))
        return EmbeddingVector.from_array(vec, self.provider_id, Modality.IMAGE)


class CachedEmbedder:
    """Wrap a provider with a JSONL cache keyed by (provider_id, sha256(content)).

    Lookups read a dict without locking; inserts take a lock and append to the file.
    """

    def __init__(self, provider: EmbeddingProvider, path: Union[str, os.PathLike, None] = None):
        self.provider = provider
        self.provider_id = provider.provider_id
        self.dimension = provider.dimension
        self.modality = provider.modality
        self.space = getattr(provider, "space", None)
        self.path = Path(path) if path else None
        self._lock = threading.Lock()
        self._cache: dict[tuple[str, str], tuple[float, ...]] = {}
        if self.path and self.path.exists():
            with self.path.open(encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        rec = json.loads(line)
                        self._cache[(rec["provider_id"], rec["sha256"])] = tuple(rec["values"])

    @staticmethod
    def _digest(content: Union[str, bytes]) -> str:
        data = content.encode("utf-8") if isinstance(content, str) else content
        return hashlib.sha256(data).hexdigest()

    def __len__(self) -> int:
        return len(self._cache)

    def embed(self, content: Union[str, bytes]) -> EmbeddingVector:
        key = (self.provider_id, self._digest(content))
        hit = self._cache.get(key)
        if hit is not None:
            return EmbeddingVector(hit, self.provider_id, self.modality, self.space)
        vec = self.provider.embed(content)
        with self._lock:
            if key not in self._cache:
                self._cache[key] = vec.values
                if self.path:
                    self.path.parent.mkdir(parents=True, exist_ok=True)
                    with self.path.open("a", encoding="utf-8") as fh:
                        rec = {"provider_id": key[0], "sha256": key[1], "values": list(vec.values)}
                        fh.write(json.dumps(rec) + "\n")
        return EmbeddingVector(self._cache[key], self.provider_id, self.modality, self.space)


_PROVIDERS = {
    "hashing-text": HashingTextEmbedder,
    "thumbnail-image": ThumbnailImageEmbedder,
}


def make_provider(name: str, cache_path=None, **kwargs) -> EmbeddingProvider:
    """Build one of the bundled providers by name, optionally cached on disk."""
    try:
        cls = _PROVIDERS[name]
    except KeyError:
        raise ValidationError(f"unknown embedding provider {name!r}; known: {sorted(_PROVIDERS)}") from None
    provider = cls(**kwargs)
    return CachedEmbedder(provider, cache_path) if cache_path else provider
