"""Adapter fine-tuning over frozen embeddings.

The desk-scale stand-in for encoder fine-tuning: one trainable affine
map per tower (v -> W v + b, identity-initialized so step 0 reproduces
the frozen model), trained with AdamW under cosine annealing on the
combined contrastive objective. Also provides the cross-entropy
linear-probe baseline on image embeddings.

Determinism contract: one seeded generator drives epoch shuffles and
per-iteration caption picks in a fixed single-threaded order, so a
fixed seed yields a bit-identical loss history and checkpoint.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .captions import make_template_captions
from .data import (
    CaptionIndex,
    CaptionRecord,
    EmbeddingStore,
    SampleRecord,
    TEMPLATE_CHARACTERISTIC,
)
from .errors import NoCaptions
from .losses import LossConfig, combined_loss
from .optim import OptimState, adamw_step, cosine_lr

HISTORY_FIELDS = ("epoch", "l_i", "l_t", "l_std", "l_sup", "total", "lr")
CHECKPOINT_MANIFEST = "checkpoint.json"
CHECKPOINT_BLOB = "checkpoint.bin"


@dataclass
class AdapterParams:
    """Per-tower affine adapters, plus the optional learnable logit scale."""

    w_img: np.ndarray
    b_img: np.ndarray
    w_txt: np.ndarray
    b_txt: np.ndarray
    log_scale: np.ndarray | None = None  # 0-d array, ln(1 / tau_std)

    @classmethod
    def identity(cls, dim: int, learn_temp: bool = False,
                 tau_std: float = 0.07) -> "AdapterParams":
        return cls(
            w_img=np.eye(dim),
            b_img=np.zeros(dim),
            w_txt=np.eye(dim),
            b_txt=np.zeros(dim),
            log_scale=np.array(math.log(1.0 / tau_std)) if learn_temp else None,
        )

    @property
    def dim(self) -> int:
        return self.w_img.shape[0]

    def apply_img(self, x: np.ndarray) -> np.ndarray:
        return x @ self.w_img.T + self.b_img

    def apply_txt(self, x: np.ndarray) -> np.ndarray:
        return x @ self.w_txt.T + self.b_txt

    def tau_std(self, default: float) -> float:
        if self.log_scale is None:
            return default
        return 1.0 / math.exp(float(self.log_scale))

    def as_dict(self) -> dict[str, np.ndarray]:
        d = {"w_img": self.w_img, "b_img": self.b_img,
             "w_txt": self.w_txt, "b_txt": self.b_txt}
        if self.log_scale is not None:
            d["log_scale"] = self.log_scale
        return d

    def copy(self) -> "AdapterParams":
        return AdapterParams(
            w_img=self.w_img.copy(), b_img=self.b_img.copy(),
            w_txt=self.w_txt.copy(), b_txt=self.b_txt.copy(),
            log_scale=None if self.log_scale is None else self.log_scale.copy(),
        )


class IdentityAdapter:
    """No-op adapter for zero-training inference paths."""

    def apply_img(self, x: np.ndarray) -> np.ndarray:
        return x

    def apply_txt(self, x: np.ndarray) -> np.ndarray:
        return x


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-5
    weight_decay: float = 1e-4
    epochs: int = 50
    batch_size: int = 64
    min_lr: float = 0.0
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    caption_mode: str = "generated"  # generated | template
    learn_temp: bool = False
    train_text_tower: bool = True
    select: str = "best_val"  # best_val | final

    def __post_init__(self):
        # lr = 0 is allowed as the degenerate no-op run.
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("lr >= 0, batch_size >= 1, epochs >= 1 required")
        if self.caption_mode not in ("generated", "template"):
            raise ValueError(f"unknown caption_mode {self.caption_mode!r}")
        if self.select not in ("best_val", "final"):
            raise ValueError(f"unknown select {self.select!r}")


@dataclass
class TrainResult:
    params: AdapterParams
    history: list[dict]
    val_accuracy: list[float]
    best_epoch: int  # 1-based epoch whose params were selected
    final_params: AdapterParams


def _batch_grads(img_raw, txt_raw, labels, params: AdapterParams, loss_cfg: LossConfig):
    """Loss and gradients w.r.t. the adapter parameters for one batch."""
    a_img = params.apply_img(img_raw)
    a_txt = params.apply_txt(txt_raw)
    if params.log_scale is not None:
        loss_cfg = replace(loss_cfg, tau_std=params.tau_std(loss_cfg.tau_std))
    res = combined_loss(a_img, a_txt, labels, loss_cfg)
    grads = {
        "w_img": res.grad_img.T @ img_raw,
        "b_img": res.grad_img.sum(axis=0),
        "w_txt": res.grad_txt.T @ txt_raw,
        "b_txt": res.grad_txt.sum(axis=0),
    }
    if params.log_scale is not None:
        grads["log_scale"] = np.asarray(res.grad_log_scale)
    return res.breakdown, grads


def _training_captions(samples: list[SampleRecord], captions: list[CaptionRecord],
                       caption_mode: str) -> CaptionIndex:
    if caption_mode == "template":
        return CaptionIndex(make_template_captions(samples))
    generated = [c for c in captions if c.characteristic != TEMPLATE_CHARACTERISTIC]
    index = CaptionIndex(generated)
    for s in samples:
        if not index.captions_for(s.sample_id):
            raise NoCaptions(f"sample {s.sample_id} has no generated captions")
    return index


def train(
    store: EmbeddingStore,
    samples: list[SampleRecord],
    captions: list[CaptionRecord],
    cfg: TrainConfig,
    val_samples: list[SampleRecord] | None = None,
) -> TrainResult:
    """Fine-tune the two adapters on (image, picked-caption) batches.

    Each epoch reshuffles the samples and re-picks one caption per
    image. When val_samples are given, held-out accuracy (prototypes
    rebuilt from the training captions under the current adapters) is
    recorded per epoch and cfg.select chooses the returned parameters.
    """
    from . import inference  # local import: inference has no back-dependency

    if not samples:
        raise ValueError("no training samples")
    index = _training_captions(samples, captions, cfg.caption_mode)
    img_raw = store.image_matrix([s.sample_id for s in samples])
    labels = np.array([s.class_id for s in samples])

    params = AdapterParams.identity(store.dim, cfg.learn_temp, cfg.loss.tau_std)
    state = OptimState.for_params(params.as_dict())
    rng = np.random.default_rng(cfg.seed)

    n = len(samples)
    batches_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * batches_per_epoch
    proto_mode = "template" if cfg.caption_mode == "template" else "embedding_avg"

    history: list[dict] = []
    val_accuracy: list[float] = []
    best_acc, best_epoch, best_params = -1.0, cfg.epochs, None
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        picked = [index.pick(samples[i].sample_id, rng) for i in order]
        txt_epoch = np.stack([
            store.text_vector(c.sample_id, c.characteristic) for c in picked
        ])
        img_epoch = img_raw[order]
        labels_epoch = labels[order]

        sums = {k: 0.0 for k in ("l_i", "l_t", "l_std", "l_sup", "total")}
        lr_t = cfg.lr
        for start in range(0, n, cfg.batch_size):
            stop = min(start + cfg.batch_size, n)
            lr_t = cosine_lr(step, total_steps, cfg.lr, cfg.min_lr)
            breakdown, grads = _batch_grads(
                img_epoch[start:stop], txt_epoch[start:stop],
                labels_epoch[start:stop], params, cfg.loss)
            if not cfg.train_text_tower:
                grads.pop("w_txt")
                grads.pop("b_txt")
            adamw_step(params.as_dict(), grads, state, lr_t, cfg.weight_decay)
            weight = stop - start
            for key in sums:
                sums[key] += getattr(breakdown, key) * weight
            step += 1

        row = {"epoch": epoch, "lr": lr_t}
        row.update({k: v / n for k, v in sums.items()})
        history.append(row)

        if val_samples:
            protos = inference.build_prototypes(
                store, index, adapter=params, mode=proto_mode,
                sample_filter={s.sample_id for s in samples})
            acc = inference.evaluate_top1(
                store, val_samples, protos, adapter=params).accuracy
            val_accuracy.append(acc)
            if acc > best_acc:
                best_acc, best_epoch, best_params = acc, epoch, params.copy()

    final_params = params
    if cfg.select == "best_val" and best_params is not None:
        selected, selected_epoch = best_params, best_epoch
    else:
        selected, selected_epoch = final_params, cfg.epochs
    return TrainResult(
        params=selected,
        history=history,
        val_accuracy=val_accuracy,
        best_epoch=selected_epoch,
        final_params=final_params,
    )


# -- cross-entropy linear probe (FT baseline) -------------------------


@dataclass
class ProbeResult:
    weights: np.ndarray  # K x d
    bias: np.ndarray  # K
    history: list[dict]  # epoch, loss, acc, lr


def cross_entropy_probe(
    store: EmbeddingStore,
    samples: list[SampleRecord],
    cfg: TrainConfig,
) -> ProbeResult:
    """K-way linear classifier on frozen image embeddings.

    Same optimizer, schedule, batching, and determinism contract as
    the contrastive trainer.
    """
    if not samples:
        raise ValueError("no training samples")
    x = store.image_matrix([s.sample_id for s in samples])
    y = np.array([s.class_id for s in samples])
    n, d = x.shape
    k = len(store.classes)

    params = {"w": np.zeros((k, d)), "b": np.zeros(k)}
    state = OptimState.for_params(params)
    rng = np.random.default_rng(cfg.seed)
    batches_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * batches_per_epoch

    history = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        lr_t = cfg.lr
        for start in range(0, n, cfg.batch_size):
            stop = min(start + cfg.batch_size, n)
            xb, yb = x[order[start:stop]], y[order[start:stop]]
            logits = xb @ params["w"].T + params["b"]
            logits -= logits.max(axis=1, keepdims=True)
            p = np.exp(logits)
            p /= p.sum(axis=1, keepdims=True)
            nb = stop - start
            loss = -np.log(p[np.arange(nb), yb]).mean()
            correct += int((logits.argmax(axis=1) == yb).sum())
            delta = p
            delta[np.arange(nb), yb] -= 1.0
            grads = {"w": delta.T @ xb / nb, "b": delta.mean(axis=0)}
            lr_t = cosine_lr(step, total_steps, cfg.lr, cfg.min_lr)
            adamw_step(params, grads, state, lr_t, cfg.weight_decay)
            loss_sum += loss * nb
            step += 1
        history.append({
            "epoch": epoch, "loss": loss_sum / n, "acc": correct / n, "lr": lr_t,
        })
    return ProbeResult(weights=params["w"], bias=params["b"], history=history)


# -- gradient validation through the full chain -----------------------


def adapter_grad_check(
    img_raw, txt_raw, labels, params: AdapterParams, loss_cfg: LossConfig,
    h: float = 1e-5,
) -> float:
    """Max relative error of adapter gradients vs central differences.

    Covers the full chain adapter -> normalize -> similarity -> loss
    for every entry of W_img, b_img, W_txt, b_txt (and the logit scale
    when learned).
    """
    img_raw = np.asarray(img_raw, dtype=np.float64)
    txt_raw = np.asarray(txt_raw, dtype=np.float64)
    _, grads = _batch_grads(img_raw, txt_raw, labels, params, loss_cfg)

    def total() -> float:
        breakdown, _ = _batch_grads(img_raw, txt_raw, labels, params, loss_cfg)
        return breakdown.total

    worst = 0.0
    for key, arr in params.as_dict().items():
        grad = np.atleast_1d(grads[key]).reshape(-1)
        flat = np.atleast_1d(arr).reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            f_plus = total()
            flat[idx] = orig - h
            f_minus = total()
            flat[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            worst = max(worst, abs(grad[idx] - numeric) / max(1.0, abs(numeric)))
    return worst


# -- persistence -------------------------------------------------------


def write_history_csv(history: list[dict], path: str | Path,
                      fields: tuple[str, ...] = HISTORY_FIELDS) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(fields), extrasaction="ignore")
        writer.writeheader()
        for row in history:
            writer.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k]
                             for k in fields})


def save_checkpoint(params: AdapterParams, run_dir: str | Path,
                    meta: dict | None = None) -> None:
    """Manifest JSON plus a float32 little-endian parameter blob.

    Blob layout: W_img, b_img, W_txt, b_txt row-major, then the logit
    scale when present. No timestamps, so identical runs hash equal.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    parts = [params.w_img.reshape(-1), params.b_img,
             params.w_txt.reshape(-1), params.b_txt]
    if params.log_scale is not None:
        parts.append(np.atleast_1d(params.log_scale))
    blob = np.concatenate(parts).astype("<f4")
    manifest = {
        "version": 1,
        "dim": params.dim,
        "learn_temp": params.log_scale is not None,
    }
    if meta:
        manifest["meta"] = meta
    with open(run_dir / CHECKPOINT_MANIFEST, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    (run_dir / CHECKPOINT_BLOB).write_bytes(blob.tobytes())


def load_checkpoint(run_dir: str | Path) -> tuple[AdapterParams, dict]:
    run_dir = Path(run_dir)
    with open(run_dir / CHECKPOINT_MANIFEST, encoding="utf-8") as f:
        manifest = json.load(f)
    d = int(manifest["dim"])
    raw = np.frombuffer((run_dir / CHECKPOINT_BLOB).read_bytes(), dtype="<f4")
    expected = 2 * d * d + 2 * d + (1 if manifest.get("learn_temp") else 0)
    if raw.size != expected:
        raise ValueError(f"checkpoint blob has {raw.size} values, expected {expected}")
    offset = 0

    def take(count, shape):
        nonlocal offset
        out = raw[offset:offset + count].astype(np.float64).reshape(shape)
        offset += count
        return out

    params = AdapterParams(
        w_img=take(d * d, (d, d)),
        b_img=take(d, (d,)),
        w_txt=take(d * d, (d, d)),
        b_txt=take(d, (d,)),
        log_scale=take(1, ())  if manifest.get("learn_temp") else None,
    )
    return params, manifest.get("meta", {})
