import numpy as np
import pytest

from capfuse.data import CaptionRecord, EmbeddingStore, SampleRecord


def build_tiny_store(
    class_vectors: dict[str, np.ndarray],
    samples_per_class: int = 2,
    captions_per_sample: int = 1,
    noise: float = 0.0,
    split: str = "train",
    seed: int = 0,
    dim: int | None = None,
):
    """Small store where every embedding sits at (or near) its class vector."""
    rng = np.random.default_rng(seed)
    classes = sorted(class_vectors)
    dim = dim or len(next(iter(class_vectors.values())))
    characteristics = ("visual", "shape", "texture")[:captions_per_sample]
    samples, image_embeddings, text_embeddings, captions = [], {}, {}, []
    for cid, cname in enumerate(classes):
        base = np.asarray(class_vectors[cname], dtype=np.float64)
        for i in range(samples_per_class):
            sid = f"{cname}_{i}"
            samples.append(SampleRecord(sid, cid, cname, split))
            image_embeddings[sid] = base + noise * rng.normal(size=dim)
            for char in characteristics:
                text_embeddings[(sid, char)] = base + noise * rng.normal(size=dim)
                captions.append(CaptionRecord(
                    sample_id=sid, characteristic=char,
                    raw_text=f"{char} text", final_text=f"a photo of a {cname}. {char} text",
                    model_id="fixture", prompt_hash=f"{sid}-{char}",
                ))
    store = EmbeddingStore.build(
        dim=dim, encoder_id="fixture", classes=classes, samples=samples,
        image_embeddings=image_embeddings, text_embeddings=text_embeddings)
    return store, captions


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
