"""Prompt construction and the caption-generation pipeline.

Each image gets one caption per characteristic (visual, shape,
texture); the rendered prompt asks the MLLM to describe that aspect
within a word budget, and the class prefix "a photo of a {name}. " is
prepended to the reply unless disabled. Requests are content-addressed
against a disk cache so reruns are free and byte-identical.
"""

from __future__ import annotations

import base64
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .data import (
    CHARACTERISTICS,
    TEMPLATE_CHARACTERISTIC,
    CaptionRecord,
    SampleRecord,
    load_captions,
    save_captions,
)
from .errors import EmptySlot, Reject
from .provider import CaptionCache, ProviderConfig, cache_key

PROMPT_TEMPLATE = (
    "To differentiate this {class_name} photo from other {domain} photos, "
    "describe its primary {characteristic} characteristics based on the "
    "photo in {word_budget} words."
)
CLASS_PREFIX = "a photo of a {class_name}. "
CLASS_TEMPLATE_TEXT = "a photo of a {class_name}."
ZERO_SHOT_PROMPT = (
    "Select the most appropriate category for the image from the following "
    "options: {class_names}. Write only the category name."
)


def _require(value: str, slot: str) -> str:
    if not value or not value.strip():
        raise EmptySlot(f"empty {slot}")
    return value


def build_prompt(
    class_name: str, domain: str, characteristic: str, word_budget: int = 50
) -> str:
    """Render the captioning prompt for one class/domain/characteristic."""
    _require(class_name, "class_name")
    _require(domain, "domain")
    _require(characteristic, "characteristic")
    if characteristic not in CHARACTERISTICS:
        raise ValueError(f"characteristic must be one of {CHARACTERISTICS}")
    return PROMPT_TEMPLATE.format(
        class_name=class_name,
        domain=domain,
        characteristic=characteristic,
        word_budget=word_budget,
    )


def prepend_prefix(class_name: str, raw_text: str) -> str:
    """Prefix a caption with the standard class template."""
    _require(class_name, "class_name")
    return CLASS_PREFIX.format(class_name=class_name) + raw_text


def make_template_captions(samples: list[SampleRecord]) -> list[CaptionRecord]:
    """Plain "a photo of a {class}." records, one per sample.

    These stand in for generated captions in template-caption training
    and template-prototype inference; no provider involved.
    """
    records = []
    for s in samples:
        text = CLASS_TEMPLATE_TEXT.format(class_name=s.class_name)
        records.append(CaptionRecord(
            sample_id=s.sample_id,
            characteristic=TEMPLATE_CHARACTERISTIC,
            raw_text="",
            final_text=text,
            model_id="template",
            prompt_hash=cache_key(s.sample_id, TEMPLATE_CHARACTERISTIC, "template", text),
        ))
    return records


def dir_image_loader(image_dir: str | Path):
    """Loader that base64-encodes {sample_id}.{jpg,jpeg,png} from a directory."""
    image_dir = Path(image_dir)

    def load(sample_id: str) -> str | None:
        for ext in ("jpg", "jpeg", "png"):
            path = image_dir / f"{sample_id}.{ext}"
            if path.exists():
                return base64.b64encode(path.read_bytes()).decode("ascii")
        return None

    return load


def generate_captions(
    samples: list[SampleRecord],
    domain: str,
    provider,
    cache_dir: str | Path,
    characteristics: tuple[str, ...] = CHARACTERISTICS,
    out_path: str | Path | None = None,
    prefix: bool = True,
    word_budget: int = 50,
    image_loader=None,
    concurrency: int | None = None,
) -> list[CaptionRecord]:
    """One CaptionRecord per (sample, characteristic).

    Cache hits skip the provider entirely. When out_path is given the
    records are merged into that JSON-Lines file keyed by
    (sample_id, characteristic, model_id), written in canonical order
    so a warm rerun reproduces the file byte for byte.
    """
    cache = CaptionCache(cache_dir)
    cfg: ProviderConfig = provider.cfg
    if concurrency is None:
        concurrency = cfg.concurrency

    def run_one(task: tuple[SampleRecord, str]) -> CaptionRecord:
        sample, characteristic = task
        prompt = build_prompt(sample.class_name, domain, characteristic, word_budget)
        key = cache_key(sample.sample_id, characteristic, cfg.model_id, prompt)
        raw = cache.get(key)
        if raw is None:
            image_b64 = image_loader(sample.sample_id) if image_loader else None
            raw = provider.complete(prompt, image_b64, key_hint=key)
            cache.put(key, raw, meta={
                "sample_id": sample.sample_id,
                "characteristic": characteristic,
                "model_id": cfg.model_id,
                "prompt": prompt,
            })
        final = prepend_prefix(sample.class_name, raw) if prefix else raw
        return CaptionRecord(
            sample_id=sample.sample_id,
            characteristic=characteristic,
            raw_text=raw,
            final_text=final,
            model_id=cfg.model_id,
            prompt_hash=key,
        )

    tasks = [(s, c) for s in samples for c in characteristics]
    if concurrency > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=concurrency) as pool:
            records = list(pool.map(run_one, tasks))
    else:
        records = [run_one(t) for t in tasks]
    records.sort(key=lambda r: (r.sample_id, r.characteristic))

    if out_path is not None:
        out_path = Path(out_path)
        merged = {}
        if out_path.exists():
            for rec in load_captions(out_path):
                merged[(rec.sample_id, rec.characteristic, rec.model_id)] = rec
        for rec in records:
            merged[(rec.sample_id, rec.characteristic, rec.model_id)] = rec
        save_captions([merged[k] for k in sorted(merged)], out_path)
    return records


def match_class_name(answer: str, class_names: list[str]) -> str:
    """Map a free-text answer onto a class name.

    Exact case-insensitive match wins (surrounding whitespace, quotes
    and a trailing period are ignored); failing that, an answer that
    mentions exactly one class name maps to it. Anything else raises
    Reject.
    """
    norm = answer.strip().strip('"\'').rstrip(".").strip().casefold()
    for name in class_names:
        if norm == name.casefold():
            return name
    mentioned = [name for name in class_names if name.casefold() in answer.casefold()]
    if len(set(mentioned)) == 1:
        return mentioned[0]
    raise Reject(answer)


def mllm_zero_shot(
    sample: SampleRecord,
    class_names: list[str],
    provider,
    image_b64: str | None = None,
) -> str:
    """Ask the MLLM to pick the class for one image directly."""
    if not class_names:
        raise ValueError("class_names must be nonempty")
    prompt = ZERO_SHOT_PROMPT.format(class_names=", ".join(class_names))
    answer = provider.complete(prompt, image_b64, key_hint=sample.sample_id)
    return match_class_name(answer, class_names)


def mllm_zero_shot_eval(
    samples: list[SampleRecord],
    class_names: list[str],
    provider,
    image_loader=None,
) -> tuple[dict[str, str], dict[str, str]]:
    """Classify every sample; rejected answers are recorded, not raised.

    Returns (predictions by sample id, rejected raw answers by sample id).
    """
    predictions: dict[str, str] = {}
    rejects: dict[str, str] = {}
    for sample in samples:
        image_b64 = image_loader(sample.sample_id) if image_loader else None
        try:
            predictions[sample.sample_id] = mllm_zero_shot(
                sample, class_names, provider, image_b64)
        except Reject as rej:
            rejects[sample.sample_id] = rej.answer
    return predictions, rejects
