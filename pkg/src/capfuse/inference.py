"""Class-averaged caption-prototype inference and top-1 evaluation.

Default mode normalizes every caption embedding, averages per class,
renormalizes, and classifies a query image by cosine against the K
prototypes. Variant modes keep the full caption bank and aggregate in
score space (per-class mean) or by the single nearest caption; the
template mode scores against plain "a photo of a {class}." embeddings.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (
    CHARACTERISTICS,
    CaptionIndex,
    CaptionRecord,
    EmbeddingStore,
    SampleRecord,
    TEMPLATE_CHARACTERISTIC,
)
from .errors import DimMismatch, EmptyClassCaptions, EmptySplit
from .linalg import l2_normalize, mean_renormalize, normalize_rows

MODES = ("embedding_avg", "logit_avg", "nearest", "template")


@dataclass
class ClassPrototypeSet:
    """Per-class text evidence in one of the aggregation modes.

    prototypes is K x d (unit rows) for embedding_avg/template; the
    bank keeps all normalized caption embeddings for logit_avg/nearest.
    class_ids are sorted ascending, which makes argmax tie-breaking
    deterministic (lowest class id wins).
    """

    class_ids: list[int]
    class_names: list[str]
    mode: str
    n_k: list[int]
    prototypes: np.ndarray | None = None
    bank: np.ndarray | None = None
    bank_class_ids: np.ndarray | None = None

    @property
    def dim(self) -> int:
        if self.prototypes is not None:
            return self.prototypes.shape[1]
        return self.bank.shape[1]


def build_prototypes(
    store: EmbeddingStore,
    captions: list[CaptionRecord] | CaptionIndex,
    adapter=None,
    mode: str = "embedding_avg",
    splits: tuple[str, ...] = ("train",),
    sample_filter: set[str] | None = None,
    characteristics: tuple[str, ...] | None = None,
) -> ClassPrototypeSet:
    """Aggregate caption embeddings into per-class prototypes or a bank.

    Captions are restricted to samples in the given splits (or the
    explicit sample_filter, which overrides splits). Non-template modes
    use the generated characteristics; template mode uses the template
    records. Every class in the store must end up with at least one
    caption.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    records = captions.all_records() if isinstance(captions, CaptionIndex) else list(captions)
    # Canonical accumulation order makes prototypes bit-reproducible
    # regardless of how the caption list was ordered.
    records.sort(key=lambda r: (r.sample_id, r.characteristic, r.prompt_hash))
    if characteristics is None:
        characteristics = (
            (TEMPLATE_CHARACTERISTIC,) if mode == "template" else CHARACTERISTICS
        )
    wanted = set(characteristics)

    vectors_by_class: dict[int, list[np.ndarray]] = {}
    for rec in records:
        if rec.characteristic not in wanted:
            continue
        sample = store.sample(rec.sample_id)
        if sample_filter is not None:
            if rec.sample_id not in sample_filter:
                continue
        elif sample.split not in splits:
            continue
        vec = store.text_vector(rec.sample_id, rec.characteristic)
        if adapter is not None:
            vec = adapter.apply_txt(vec[None, :])[0]
        vectors_by_class.setdefault(sample.class_id, []).append(l2_normalize(vec))

    missing = [store.classes[cid] for cid in range(len(store.classes))
               if cid not in vectors_by_class]
    if missing:
        raise EmptyClassCaptions(f"no captions for classes: {', '.join(missing)}")

    class_ids = sorted(vectors_by_class)
    class_names = [store.classes[cid] for cid in class_ids]
    n_k = [len(vectors_by_class[cid]) for cid in class_ids]

    if mode in ("embedding_avg", "template"):
        protos = np.stack([mean_renormalize(vectors_by_class[cid]) for cid in class_ids])
        return ClassPrototypeSet(class_ids=class_ids, class_names=class_names,
                                 mode=mode, n_k=n_k, prototypes=protos)
    bank, bank_cids = [], []
    for cid in class_ids:
        bank.extend(vectors_by_class[cid])
        bank_cids.extend([cid] * len(vectors_by_class[cid]))
    return ClassPrototypeSet(
        class_ids=class_ids, class_names=class_names, mode=mode, n_k=n_k,
        bank=np.stack(bank), bank_class_ids=np.array(bank_cids),
    )


def class_scores(image_embedding: np.ndarray, protos: ClassPrototypeSet) -> np.ndarray:
    """Per-class similarity scores for one (already adapted) query."""
    q = np.asarray(image_embedding, dtype=np.float64)
    if q.shape[-1] != protos.dim:
        raise DimMismatch(f"query dim {q.shape[-1]} vs prototypes {protos.dim}")
    q = l2_normalize(q)
    if protos.mode in ("embedding_avg", "template"):
        return protos.prototypes @ q
    sims = protos.bank @ q
    scores = np.empty(len(protos.class_ids))
    for i, cid in enumerate(protos.class_ids):
        member = sims[protos.bank_class_ids == cid]
        scores[i] = member.mean() if protos.mode == "logit_avg" else member.max()
    return scores


def classify(image_embedding: np.ndarray, protos: ClassPrototypeSet) -> tuple[int, np.ndarray]:
    """Predicted class id and the per-class score vector."""
    scores = class_scores(image_embedding, protos)
    return protos.class_ids[int(np.argmax(scores))], scores


@dataclass
class EvalResult:
    accuracy: float
    per_class_accuracy: dict[str, float]
    confusion: np.ndarray  # true x predicted, indexed by class id
    predictions: list[dict]  # sample_id, true/pred names, top-5 scores
    n: int


def evaluate_top1(
    store: EmbeddingStore,
    split: str | list[SampleRecord],
    protos: ClassPrototypeSet,
    adapter=None,
) -> EvalResult:
    """Top-1 accuracy of prototype classification over a split.

    The adapter (when given) is applied to each image embedding before
    scoring, mirroring how caption embeddings were adapted at
    prototype-construction time.
    """
    samples = store.split_samples(split) if isinstance(split, str) else list(split)
    if not samples:
        raise EmptySplit(f"no samples in split {split!r}")
    k = len(store.classes)
    confusion = np.zeros((k, k), dtype=int)
    predictions = []
    correct = 0
    for s in sorted(samples, key=lambda r: r.sample_id):
        vec = store.image_vector(s.sample_id)
        if adapter is not None:
            vec = adapter.apply_img(vec[None, :])[0]
        pred, scores = classify(vec, protos)
        confusion[s.class_id, pred] += 1
        correct += int(pred == s.class_id)
        top = np.argsort(-scores)[:5]
        row = {"sample_id": s.sample_id,
               "true_class": s.class_name,
               "pred_class": store.classes[pred]}
        for rank, idx in enumerate(top, 1):
            row[f"top{rank}_class"] = protos.class_names[idx]
            row[f"top{rank}_score"] = float(scores[idx])
        predictions.append(row)

    totals = confusion.sum(axis=1)
    per_class = {
        store.classes[cid]: float(confusion[cid, cid] / totals[cid])
        for cid in range(k) if totals[cid] > 0
    }
    return EvalResult(
        accuracy=correct / len(samples),
        per_class_accuracy=per_class,
        confusion=confusion,
        predictions=predictions,
        n=len(samples),
    )


def write_predictions_csv(result: EvalResult, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = ["sample_id", "true_class", "pred_class"]
    for rank in range(1, 6):
        fields += [f"top{rank}_class", f"top{rank}_score"]
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        for row in result.predictions:
            writer.writerow(row)


def write_metrics_json(result: EvalResult, path: str | Path,
                       extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "accuracy": result.accuracy,
        "n": result.n,
        "per_class_accuracy": result.per_class_accuracy,
        "confusion": result.confusion.tolist(),
    }
    if extra:
        payload.update(extra)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=1, sort_keys=True)
