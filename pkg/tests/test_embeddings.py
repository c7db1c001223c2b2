import io
import math

import numpy as np
import pytest
from PIL import Image
from scipy.spatial.distance import cosine as scipy_cosine_distance

from cxrfusion.core import ValidationError
from cxrfusion.embeddings import (
    CachedEmbedder,
    EmbeddingVector,
    HashingTextEmbedder,
    Modality,
    ThumbnailImageEmbedder,
    concat_multimodal,
    cosine_similarity,
    cross_modal_cosine,
    make_provider,
)


def text_vec(values, space=None):
    return EmbeddingVector.from_array(values, "t", Modality.TEXT, space)


def img_vec(values, space=None):
    return EmbeddingVector.from_array(values, "i", Modality.IMAGE, space)


def jpeg(shade, size=(40, 30)):
    buf = io.BytesIO()
    arr = np.full(size[::-1], shade, dtype=np.uint8)
    arr[:, : size[0] // 2] = 255 - shade
    Image.fromarray(arr).save(buf, format="JPEG")
    return buf.getvalue()


def test_cosine_matches_scipy():
    rng = np.random.default_rng(3)
    for _ in range(50):
        a, b = rng.normal(size=17), rng.normal(size=17)
        assert cosine_similarity(text_vec(a), text_vec(b)) == pytest.approx(1 - scipy_cosine_distance(a, b), abs=1e-12)


def test_cosine_range_and_self_similarity():
    v = text_vec([0.3, -2.0, 5.0])
    assert cosine_similarity(v, v) == pytest.approx(1.0)
    assert cosine_similarity(v, text_vec([-0.3, 2.0, -5.0])) == pytest.approx(-1.0)


def test_cosine_dimension_mismatch_and_zero_norm():
    with pytest.raises(ValidationError):
        cosine_similarity(text_vec([1.0, 0.0]), text_vec([1.0, 0.0, 0.0]))
    with pytest.raises(ValidationError):
        cosine_similarity(text_vec([0.0, 0.0]), text_vec([1.0, 0.0]))


def test_concat_is_image_then_text():
    joint = concat_multimodal(img_vec([1.0, 2.0]), text_vec([3.0, 4.0, 5.0]))
    assert joint.values == (1.0, 2.0, 3.0, 4.0, 5.0)
    assert joint.dimension == 5 and joint.modality is Modality.MULTIMODAL
    with pytest.raises(ValidationError):
        concat_multimodal(text_vec([3.0]), img_vec([1.0]))


def test_cross_modal_requires_shared_space():
    assert cross_modal_cosine(img_vec([1.0, 0.0]), text_vec([1.0, 0.0])) is None
    assert cross_modal_cosine(img_vec([1.0, 0.0], "clip"), text_vec([1.0, 1.0], "clip")) == pytest.approx(1 / math.sqrt(2))


def test_hashing_embedder_default_dimension_and_determinism():
    e = HashingTextEmbedder()
    v = e.embed("Cardiomegaly with small effusion")
    assert v.dimension == 768
    assert HashingTextEmbedder().embed("Cardiomegaly with small effusion") == v
    assert HashingTextEmbedder(seed=1).embed("Cardiomegaly with small effusion") != v


def test_hashing_embedder_case_insensitive_and_empty_usable():
    e = HashingTextEmbedder(64)
    assert e.embed("Edema") == e.embed("edema")
    blank = e.embed("")
    assert any(blank.values)


def test_thumbnail_embedder_dimension():
    e = ThumbnailImageEmbedder()
    v = e.embed(jpeg(40))
    assert v.dimension == 512 and v.modality is Modality.IMAGE
    assert cosine_similarity(v, e.embed(jpeg(40))) == pytest.approx(1.0)


def test_cache_hits_and_persists(tmp_path):
    calls = []

    class Counting(HashingTextEmbedder):
        def embed(self, content):
            calls.append(content)
            return super().embed(content)

    path = tmp_path / "cache.jsonl"
    c = CachedEmbedder(Counting(32), path)
    first = c.embed("pleural effusion")
    assert c.embed("pleural effusion") == first
    assert calls == ["pleural effusion"]
    reloaded = CachedEmbedder(Counting(32), path)
    assert len(reloaded) == 1
    assert reloaded.embed("pleural effusion") == first
    assert len(calls) == 1


def test_make_provider_names():
    assert make_provider("hashing-text").dimension == 768
    assert make_provider("thumbnail-image").dimension == 512
    with pytest.raises(ValidationError):
        make_provider("clip")
