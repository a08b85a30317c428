"""Seeded synthetic dataset: Gaussian class clusters on the unit sphere.

Image and caption embeddings of a class share its mean direction;
every embedding is normalize(mean + sigma * noise). Template text rows
are identical for all samples of a class, mirroring a deterministic
text encoder. Useful for end-to-end tests and offline demos where no
real encoder output is available.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .captions import make_template_captions, prepend_prefix
from .data import (
    CHARACTERISTICS,
    CaptionRecord,
    EmbeddingStore,
    SampleRecord,
    TEMPLATE_CHARACTERISTIC,
    save_captions,
)
from .provider import cache_key


def make_synthetic_dataset(
    n_classes: int = 10,
    dim: int = 32,
    sigma: float = 0.3,
    captions_per_image: int = 3,
    train_per_class: int = 20,
    val_per_class: int = 5,
    test_per_class: int = 20,
    seed: int = 0,
    encoder_id: str = "synthetic-gaussian-v1",
) -> tuple[EmbeddingStore, list[CaptionRecord]]:
    """Build an in-memory store plus matching caption records."""
    if captions_per_image > len(CHARACTERISTICS):
        raise ValueError(f"at most {len(CHARACTERISTICS)} captions per image")
    rng = np.random.default_rng(seed)
    classes = [f"class_{c:02d}" for c in range(n_classes)]
    means = rng.normal(size=(n_classes, dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)

    def noisy(mean: np.ndarray) -> np.ndarray:
        v = mean + sigma * rng.normal(size=dim)
        return v / np.linalg.norm(v)

    samples: list[SampleRecord] = []
    image_embeddings: dict[str, np.ndarray] = {}
    text_embeddings: dict[tuple[str, str], np.ndarray] = {}
    captions: list[CaptionRecord] = []
    chars = CHARACTERISTICS[:captions_per_image]

    template_vecs = [noisy(means[c]) for c in range(n_classes)]
    counts = {"train": train_per_class, "val": val_per_class, "test": test_per_class}
    for cid, cname in enumerate(classes):
        for split, per_class in counts.items():
            for i in range(per_class):
                sid = f"{split}_{cid:02d}_{i:03d}"
                samples.append(SampleRecord(sid, cid, cname, split))
                image_embeddings[sid] = noisy(means[cid])
                for char in chars:
                    text_embeddings[(sid, char)] = noisy(means[cid])
                    raw = f"synthetic {char} description of a {cname} sample {i}"
                    captions.append(CaptionRecord(
                        sample_id=sid,
                        characteristic=char,
                        raw_text=raw,
                        final_text=prepend_prefix(cname, raw),
                        model_id="synthetic",
                        prompt_hash=cache_key(sid, char, "synthetic", raw),
                    ))
                text_embeddings[(sid, TEMPLATE_CHARACTERISTIC)] = template_vecs[cid]

    captions.extend(make_template_captions(samples))
    store = EmbeddingStore.build(
        dim=dim,
        encoder_id=encoder_id,
        classes=classes,
        samples=samples,
        image_embeddings=image_embeddings,
        text_embeddings=text_embeddings,
    )
    return store, captions


def write_synthetic_dataset(out_dir: str | Path, **kwargs) -> Path:
    """Materialize a synthetic store + captions.jsonl under out_dir."""
    out_dir = Path(out_dir)
    store, captions = make_synthetic_dataset(**kwargs)
    store.save(out_dir / "store")
    save_captions(captions, out_dir / "captions.jsonl")
    return out_dir
