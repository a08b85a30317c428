"""Data model: samples, captions, the on-disk embedding store, sampling.

The store is two files in one directory: ``manifest.json`` (version,
dim, count, dtype, encoder id, class table, sample table, row indexes)
and ``embeddings.bin`` (count x dim float32 little-endian, row-major,
no header). Image rows are keyed by sample id; text rows by
(sample id, characteristic). Captions persist as JSON-Lines.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    CorruptManifest,
    DataError,
    MissingEmbedding,
    NoCaptions,
    TruncatedBlob,
)

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
# The three MLLM prompt characteristics plus the plain class template.
CHARACTERISTICS = ("visual", "shape", "texture")
TEMPLATE_CHARACTERISTIC = "template"
ALL_CHARACTERISTICS = CHARACTERISTICS + (TEMPLATE_CHARACTERISTIC,)

MANIFEST_NAME = "manifest.json"
BLOB_NAME = "embeddings.bin"
STORE_VERSION = 1
STORE_DTYPE = "f32le"


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    class_id: int
    class_name: str
    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DataError(f"unknown split {self.split!r} for {self.sample_id}")


@dataclass(frozen=True)
class CaptionRecord:
    """One caption for one sample, with provenance.

    final_text is the class-prefixed text when prefixing was enabled,
    otherwise equal to raw_text. prompt_hash identifies the exact
    prompt/model combination that produced it.
    """

    sample_id: str
    characteristic: str
    raw_text: str
    final_text: str
    model_id: str
    prompt_hash: str

    def __post_init__(self):
        if self.characteristic not in ALL_CHARACTERISTICS:
            raise DataError(f"unknown characteristic {self.characteristic!r}")


@dataclass(frozen=True)
class FewShotSpec:
    """K class-balanced shots; k may be the string "full"."""

    k: int | str
    seed: int = 0

    def __post_init__(self):
        if self.k != "full" and (not isinstance(self.k, int) or self.k < 1):
            raise ValueError(f"k must be >= 1 or 'full', got {self.k!r}")


def save_captions(records: list[CaptionRecord], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(asdict(rec), ensure_ascii=False) + "\n")


def load_captions(path: str | Path) -> list[CaptionRecord]:
    records = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(CaptionRecord(**json.loads(line)))
            except (json.JSONDecodeError, TypeError) as exc:
                raise DataError(f"{path}:{line_no}: bad caption record: {exc}") from exc
    return records


class CaptionIndex:
    """Per-sample caption lookup with seeded uniform picking.

    Captions are kept in a canonical order (characteristic, then
    prompt hash) so picks do not depend on file append order.
    """

    def __init__(self, records: list[CaptionRecord]):
        by_sample: dict[str, list[CaptionRecord]] = {}
        for rec in records:
            by_sample.setdefault(rec.sample_id, []).append(rec)
        for recs in by_sample.values():
            recs.sort(key=lambda r: (r.characteristic, r.prompt_hash, r.final_text))
        self._by_sample = by_sample

    def captions_for(self, sample_id: str) -> list[CaptionRecord]:
        return list(self._by_sample.get(sample_id, []))

    def pick(self, sample_id: str, rng: np.random.Generator) -> CaptionRecord:
        recs = self._by_sample.get(sample_id)
        if not recs:
            raise NoCaptions(f"sample {sample_id} has no captions")
        return recs[int(rng.integers(len(recs)))]

    def sample_ids(self) -> list[str]:
        return sorted(self._by_sample)

    def all_records(self) -> list[CaptionRecord]:
        return [rec for sid in sorted(self._by_sample) for rec in self._by_sample[sid]]

    def __len__(self) -> int:
        return sum(len(v) for v in self._by_sample.values())


class EmbeddingStore:
    """Frozen encoder outputs for images and caption texts.

    The blob is held as float32 (bit-exact round trip); accessors
    return float64 copies for computation.
    """

    def __init__(
        self,
        dim: int,
        encoder_id: str,
        classes: list[str],
        samples: list[SampleRecord],
        image_rows: dict[str, int],
        text_rows: dict[tuple[str, str], int],
        blob: np.ndarray,
    ):
        self.dim = dim
        self.encoder_id = encoder_id
        self.classes = list(classes)
        self.samples = list(samples)
        self.image_rows = dict(image_rows)
        self.text_rows = dict(text_rows)
        self.blob = np.ascontiguousarray(blob, dtype="<f4")
        self._by_id = {s.sample_id: s for s in self.samples}
        self._validate()

    def _validate(self) -> None:
        if self.dim <= 0:
            raise CorruptManifest(f"dim must be positive, got {self.dim}")
        count = self.blob.shape[0]
        if self.blob.ndim != 2 or self.blob.shape[1] != self.dim:
            raise CorruptManifest(
                f"blob shape {self.blob.shape} does not match dim {self.dim}")
        if len(self._by_id) != len(self.samples):
            raise CorruptManifest("duplicate sample ids")
        rows = list(self.image_rows.values()) + list(self.text_rows.values())
        if len(rows) != count:
            raise CorruptManifest(
                f"{len(rows)} indexed rows but blob has {count}")
        if len(set(rows)) != len(rows):
            raise CorruptManifest("duplicate row indices")
        if rows and (min(rows) < 0 or max(rows) >= count):
            raise CorruptManifest("row index out of range")
        for s in self.samples:
            if not 0 <= s.class_id < len(self.classes):
                raise CorruptManifest(f"class_id {s.class_id} out of range")
            if s.class_name != self.classes[s.class_id]:
                raise CorruptManifest(
                    f"{s.sample_id}: class_name {s.class_name!r} does not match "
                    f"class table entry {self.classes[s.class_id]!r}")
        for sid in self.image_rows:
            if sid not in self._by_id:
                raise CorruptManifest(f"image row for unknown sample {sid}")
        for sid, char in self.text_rows:
            if sid not in self._by_id:
                raise CorruptManifest(f"text row for unknown sample {sid}")
            if char not in ALL_CHARACTERISTICS:
                raise CorruptManifest(f"text row with unknown characteristic {char!r}")

    # -- accessors ---------------------------------------------------

    def sample(self, sample_id: str) -> SampleRecord:
        try:
            return self._by_id[sample_id]
        except KeyError:
            raise MissingEmbedding(f"unknown sample {sample_id}") from None

    def split_samples(self, split: str) -> list[SampleRecord]:
        return [s for s in self.samples if s.split == split]

    def image_vector(self, sample_id: str) -> np.ndarray:
        try:
            row = self.image_rows[sample_id]
        except KeyError:
            raise MissingEmbedding(f"no image embedding for {sample_id}") from None
        return self.blob[row].astype(np.float64)

    def text_vector(self, sample_id: str, characteristic: str) -> np.ndarray:
        try:
            row = self.text_rows[(sample_id, characteristic)]
        except KeyError:
            raise MissingEmbedding(
                f"no text embedding for ({sample_id}, {characteristic})") from None
        return self.blob[row].astype(np.float64)

    def image_matrix(self, sample_ids: list[str]) -> np.ndarray:
        return np.stack([self.image_vector(sid) for sid in sample_ids])

    # -- persistence -------------------------------------------------

    @classmethod
    def build(
        cls,
        dim: int,
        encoder_id: str,
        classes: list[str],
        samples: list[SampleRecord],
        image_embeddings: dict[str, np.ndarray],
        text_embeddings: dict[tuple[str, str], np.ndarray],
    ) -> "EmbeddingStore":
        """Assemble a store with a canonical row layout.

        Image rows come first, sorted by sample id, then text rows
        sorted by (sample id, characteristic).
        """
        image_rows, text_rows = {}, {}
        rows = []
        for sid in sorted(image_embeddings):
            image_rows[sid] = len(rows)
            rows.append(np.asarray(image_embeddings[sid], dtype="<f4"))
        for key in sorted(text_embeddings):
            text_rows[key] = len(rows)
            rows.append(np.asarray(text_embeddings[key], dtype="<f4"))
        blob = np.stack(rows) if rows else np.zeros((0, dim), dtype="<f4")
        return cls(dim, encoder_id, classes, samples, image_rows, text_rows, blob)

    def save(self, store_dir: str | Path) -> None:
        store_dir = Path(store_dir)
        store_dir.mkdir(parents=True, exist_ok=True)
        manifest = {
            "version": STORE_VERSION,
            "dim": self.dim,
            "count": int(self.blob.shape[0]),
            "dtype": STORE_DTYPE,
            "encoder_id": self.encoder_id,
            "classes": self.classes,
            "samples": [
                {"sample_id": s.sample_id, "class_id": s.class_id, "split": s.split}
                for s in self.samples
            ],
            "image_rows": self.image_rows,
            "text_rows": [
                {"sample_id": sid, "characteristic": char, "row": row}
                for (sid, char), row in sorted(self.text_rows.items())
            ],
        }
        with open(store_dir / MANIFEST_NAME, "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=1, sort_keys=True)
        with open(store_dir / BLOB_NAME, "wb") as f:
            f.write(self.blob.tobytes(order="C"))

    @classmethod
    def load(cls, store_dir: str | Path) -> "EmbeddingStore":
        store_dir = Path(store_dir)
        manifest_path = store_dir / MANIFEST_NAME
        blob_path = store_dir / BLOB_NAME
        if not manifest_path.exists():
            raise DataError(f"no {MANIFEST_NAME} in {store_dir}")
        if not blob_path.exists():
            raise DataError(f"no {BLOB_NAME} in {store_dir}")
        try:
            with open(manifest_path, encoding="utf-8") as f:
                man = json.load(f)
        except json.JSONDecodeError as exc:
            raise BadMagic(f"{manifest_path}: not a JSON manifest: {exc}") from exc
        if man.get("version") != STORE_VERSION:
            raise BadMagic(f"unsupported store version {man.get('version')!r}")
        if man.get("dtype") != STORE_DTYPE:
            raise BadMagic(f"unsupported dtype {man.get('dtype')!r}")
        try:
            dim = int(man["dim"])
            count = int(man["count"])
            classes = list(man["classes"])
            samples = [
                SampleRecord(
                    sample_id=s["sample_id"],
                    class_id=int(s["class_id"]),
                    class_name=classes[int(s["class_id"])],
                    split=s["split"],
                )
                for s in man["samples"]
            ]
            image_rows = {sid: int(r) for sid, r in man["image_rows"].items()}
            text_rows = {
                (t["sample_id"], t["characteristic"]): int(t["row"])
                for t in man["text_rows"]
            }
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise CorruptManifest(f"{manifest_path}: {exc!r}") from exc

        raw = blob_path.read_bytes()
        expected = count * dim * 4
        if len(raw) != expected:
            raise TruncatedBlob(
                f"{blob_path}: {len(raw)} bytes, manifest implies {expected}")
        blob = np.frombuffer(raw, dtype="<f4").reshape(count, dim)
        return cls(
            dim=dim,
            encoder_id=man["encoder_id"],
            classes=classes,
            samples=samples,
            image_rows=image_rows,
            text_rows=text_rows,
            blob=blob,
        )


def few_shot_sample(
    samples: list[SampleRecord],
    spec: FewShotSpec,
    n_classes: int | None = None,
) -> list[SampleRecord]:
    """Class-balanced selection of min(K, available) samples per class.

    Candidates are pre-sorted by sample id and shuffled with a per-class
    generator seeded from (seed, class_id), so the selection is
    deterministic and independent of input order. Classes with no
    candidates are reported at warning level, not raised.
    """
    if not samples:
        raise DataError("no samples to select from")
    by_class: dict[int, list[SampleRecord]] = {}
    for s in samples:
        by_class.setdefault(s.class_id, []).append(s)
    if n_classes is not None:
        for cid in range(n_classes):
            if cid not in by_class:
                log.warning("class %d has no candidate samples", cid)
    selected: list[SampleRecord] = []
    for cid in sorted(by_class):
        group = sorted(by_class[cid], key=lambda s: s.sample_id)
        if spec.k == "full":
            selected.extend(group)
            continue
        rng = np.random.default_rng([spec.seed, cid])
        order = rng.permutation(len(group))
        take = min(spec.k, len(group))
        selected.extend(sorted((group[i] for i in order[:take]),
                               key=lambda s: s.sample_id))
    return selected


def train_val_split(
    samples: list[SampleRecord], val_fraction: float = 0.1, seed: int = 0
) -> list[SampleRecord]:
    """Seeded random reassignment of a fraction of train samples to val.

    Samples already marked val/test pass through untouched.
    """
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError(f"val_fraction {val_fraction} outside [0, 1)")
    train = sorted((s for s in samples if s.split == "train"),
                   key=lambda s: s.sample_id)
    rest = [s for s in samples if s.split != "train"]
    n_val = int(round(val_fraction * len(train)))
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(train))
    val_ids = {train[i].sample_id for i in order[:n_val]}
    out = []
    for s in train:
        split = "val" if s.sample_id in val_ids else "train"
        out.append(SampleRecord(s.sample_id, s.class_id, s.class_name, split))
    out.extend(rest)
    out.sort(key=lambda s: s.sample_id)
    return out
