"""Command-line pipeline driver.

Subcommands: synth, captions generate, fewshot sample, train, eval,
zeroshot, analyze captions, sweep w, report. Every stochastic step
derives from the single config seed; each run directory receives an
echo of the effective configuration.

Exit codes: 0 success, 2 config error, 3 data error, 4 provider error,
5 internal invariant failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import analysis, config, inference, synth, training
from .captions import dir_image_loader, generate_captions
from .data import (
    EmbeddingStore,
    FewShotSpec,
    few_shot_sample,
    load_captions,
)
from .errors import ConfigError, DataError, NumericError, ProviderError
from .provider import make_provider
from .tokenizer import BpeVocab


def _load_cfg(args) -> dict:
    cfg = config.load_config(getattr(args, "config", None))
    cfg = config.apply_overrides(cfg, getattr(args, "overrides", None))
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    return cfg


def _require_path(value: str | None, flag: str) -> Path:
    if not value:
        raise ConfigError(f"{flag} is required")
    path = Path(value)
    if not path.exists():
        raise ConfigError(f"{flag}: path does not exist: {path}")
    return path


def _load_selection(path: str | None) -> dict | None:
    if not path:
        return None
    with open(_require_path(path, "--selection"), encoding="utf-8") as f:
        sel = json.load(f)
    if "sample_ids" not in sel:
        raise DataError(f"{path}: selection file has no sample_ids")
    return sel


def _train_samples(store: EmbeddingStore, cfg: dict, selection: dict | None):
    train_split = store.split_samples("train")
    if selection is not None:
        wanted = set(selection["sample_ids"])
        chosen = [s for s in train_split if s.sample_id in wanted]
        missing = wanted - {s.sample_id for s in chosen}
        if missing:
            raise DataError(f"selection ids not in train split: {sorted(missing)[:5]}")
        return chosen
    k = cfg["k_shots"]
    if k == "full":
        return train_split
    try:
        k = int(k)
    except ValueError as exc:
        raise ConfigError(f"k_shots must be an integer or 'full', got {k!r}") from exc
    spec = FewShotSpec(k=k, seed=cfg["seed"])
    return few_shot_sample(train_split, spec, n_classes=len(store.classes))


def _proto_splits(cfg: dict) -> tuple[str, ...]:
    return tuple(s.strip() for s in str(cfg["infer.proto_splits"]).split(",") if s.strip())


# -- subcommands -------------------------------------------------------


def cmd_synth(args) -> int:
    out = Path(args.out)
    synth.write_synthetic_dataset(
        out,
        n_classes=args.classes,
        dim=args.dim,
        sigma=args.sigma,
        train_per_class=args.train_per_class,
        val_per_class=args.val_per_class,
        test_per_class=args.test_per_class,
        seed=args.seed if args.seed is not None else 0,
    )
    print(f"wrote synthetic store + captions under {out}")
    return 0


def cmd_captions_generate(args) -> int:
    cfg = _load_cfg(args)
    store = EmbeddingStore.load(_require_path(args.store, "--store"))
    splits = tuple(s.strip() for s in args.splits.split(","))
    samples = [s for s in store.samples if s.split in splits]
    if not samples:
        raise DataError(f"no samples in splits {splits}")
    provider = make_provider(config.provider_config(cfg))
    image_loader = dir_image_loader(args.images) if args.images else None
    out_path = Path(args.out)
    records = generate_captions(
        samples,
        domain=cfg["domain"],
        provider=provider,
        cache_dir=args.cache_dir or out_path.parent / "caption-cache",
        characteristics=config.characteristics_tuple(cfg),
        out_path=out_path,
        prefix=cfg["prefix"] and not args.no_prefix,
        word_budget=cfg["word_budget"],
        image_loader=image_loader,
    )
    print(f"{len(records)} caption records -> {out_path} "
          f"({provider.call_count} provider calls)")
    return 0


def cmd_fewshot_sample(args) -> int:
    cfg = _load_cfg(args)
    store = EmbeddingStore.load(_require_path(args.store, "--store"))
    k = args.k if args.k is not None else cfg["k_shots"]
    k = "full" if k == "full" else int(k)
    spec = FewShotSpec(k=k, seed=cfg["seed"])
    chosen = few_shot_sample(store.split_samples("train"), spec,
                             n_classes=len(store.classes))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as f:
        json.dump({"k": spec.k, "seed": spec.seed,
                   "sample_ids": [s.sample_id for s in chosen]}, f, indent=1)
    print(f"selected {len(chosen)} samples -> {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    if args.w is not None:
        cfg["loss.w"] = args.w
    if args.epochs is not None:
        cfg["train.epochs"] = args.epochs
    store = EmbeddingStore.load(_require_path(args.store, "--store"))
    captions = load_captions(_require_path(args.captions, "--captions"))
    selection = _load_selection(args.selection)
    samples = _train_samples(store, cfg, selection)
    val_samples = store.split_samples("val")

    run_dir = Path(args.out)
    config.echo_config(cfg, run_dir, command="train")
    result = training.train(store, samples, captions, config.train_config(cfg),
                            val_samples=val_samples or None)
    training.save_checkpoint(result.params, run_dir, meta={
        "seed": cfg["seed"],
        "epoch": result.best_epoch,
        "w": cfg["loss.w"],
        "caption_mode": cfg["train.caption_mode"],
        "config": {k: cfg[k] for k in sorted(cfg)
                   if k.startswith(("train.", "loss."))},
        "train_samples": [s.sample_id for s in samples],
    })
    training.write_history_csv(result.history, run_dir / "history.csv")
    series = {key: [(row["epoch"], row[key]) for row in result.history]
              for key in ("total", "l_std", "l_sup")}
    analysis.emit_report(series, run_dir / "plots" / "loss_curves",
                         title="training loss", xlabel="epoch", ylabel="loss")
    if result.val_accuracy:
        print(f"trained {len(result.history)} epochs; selected epoch "
              f"{result.best_epoch} (val acc {max(result.val_accuracy):.4f})")
    else:
        print(f"trained {len(result.history)} epochs")
    print(f"checkpoint + history in {run_dir}")
    return 0


def _run_eval(args, adapter, checkpoint_meta: dict | None = None) -> int:
    cfg = _load_cfg(args)
    if args.mode is not None:
        cfg["infer.mode"] = args.mode
    store = EmbeddingStore.load(_require_path(args.store, "--store"))
    captions = load_captions(_require_path(args.captions, "--captions"))
    selection = _load_selection(args.selection)
    if selection is None and checkpoint_meta and checkpoint_meta.get("train_samples"):
        selection = {"sample_ids": checkpoint_meta["train_samples"],
                     "k": checkpoint_meta.get("k", "full")}
    sample_filter = set(selection["sample_ids"]) if selection else None

    protos = inference.build_prototypes(
        store, captions, adapter=adapter, mode=cfg["infer.mode"],
        splits=_proto_splits(cfg), sample_filter=sample_filter)
    split = args.split or cfg["infer.eval_split"]
    result = inference.evaluate_top1(store, split, protos, adapter=adapter)

    run_dir = Path(args.out)
    meta = {
        "mode": cfg["infer.mode"],
        "split": split,
        "w": cfg["loss.w"],
        "series": args.name,
    }
    if selection and "k" in selection:
        meta["k"] = selection["k"]
    config.echo_config(cfg, run_dir, command="eval", meta=meta)
    # metrics.json holds measurements only; run metadata lives in the
    # config echo so runs differing only in mode compare byte-equal.
    inference.write_metrics_json(result, run_dir / "metrics.json")
    inference.write_predictions_csv(result, run_dir / "predictions.csv")
    print(f"top-1 accuracy {result.accuracy:.4f} on {result.n} {split} samples "
          f"(mode={cfg['infer.mode']})")
    return 0


def cmd_eval(args) -> int:
    ckpt_dir = _require_path(args.checkpoint, "--checkpoint")
    adapter, meta = training.load_checkpoint(ckpt_dir)
    return _run_eval(args, adapter, checkpoint_meta=meta)


def cmd_zeroshot(args) -> int:
    return _run_eval(args, adapter=None)


def cmd_analyze_captions(args) -> int:
    cfg = _load_cfg(args)
    captions = load_captions(_require_path(args.captions, "--captions"))
    if not args.merges and not args.store:
        raise ConfigError("analyze captions needs --merges and/or --store")
    out_dir = Path(args.out)
    stats: dict[str, object] = {"n_captions": len(captions)}
    if args.merges:
        max_merges = cfg["analyze.max_merges"]
        vocab = BpeVocab.from_merges_file(
            args.merges,
            max_merges=None if max_merges < 0 else max_merges,
            context_limit=cfg["analyze.context_limit"])
        token_stats, over_limit = analysis.token_length_stats(captions, vocab)
        stats["token_length"] = token_stats
        stats["over_limit"] = over_limit
        print(f"token length mean {token_stats.mean:.2f} "
              f"({len(over_limit)} captions over {vocab.context_limit})")
    if args.store:
        store = EmbeddingStore.load(_require_path(args.store, "--store"))
        clip_stats = analysis.clip_score_stats(store, captions)
        stats["clip_score"] = clip_stats
        print(f"image/caption cosine mean {clip_stats.mean:.4f}")
    analysis.write_stats_json(stats, out_dir / "caption-stats.json")
    print(f"stats -> {out_dir / 'caption-stats.json'}")
    return 0


def cmd_sweep_w(args) -> int:
    cfg = _load_cfg(args)
    if args.epochs is not None:
        cfg["train.epochs"] = args.epochs
    store = EmbeddingStore.load(_require_path(args.store, "--store"))
    captions = load_captions(_require_path(args.captions, "--captions"))
    selection = _load_selection(args.selection)
    samples = _train_samples(store, cfg, selection)
    val_samples = store.split_samples("val")
    sample_filter = {s.sample_id for s in samples}

    run_dir = Path(args.out)
    config.echo_config(cfg, run_dir, command="sweep w")
    base_tc = config.train_config(cfg)
    points = []
    for i in range(11):
        w = round(i * 0.1, 1)
        tc = replace(base_tc, loss=replace(base_tc.loss, w=w))
        result = training.train(store, samples, captions, tc,
                                val_samples=val_samples or None)
        protos = inference.build_prototypes(
            store, captions, adapter=result.params, mode=cfg["infer.mode"],
            sample_filter=sample_filter)
        acc = inference.evaluate_top1(
            store, cfg["infer.eval_split"], protos, adapter=result.params).accuracy
        points.append((w, acc))
        print(f"w={w:.1f} accuracy {acc:.4f}")
    analysis.emit_report({"accuracy": points}, run_dir / "sweep",
                         title="loss-weight sweep", xlabel="w", ylabel="top-1 accuracy")
    print(f"sweep plot + table in {run_dir}")
    return 0


def cmd_report(args) -> int:
    rows = []
    series: dict[str, list[tuple[float, float]]] = {}
    for run in args.runs:
        metrics_path = Path(run) / "metrics.json"
        if not metrics_path.exists():
            raise DataError(f"{run}: no metrics.json")
        with open(metrics_path, encoding="utf-8") as f:
            metrics = json.load(f)
        meta = {}
        echo_path = Path(run) / "config-echo.json"
        if echo_path.exists():
            with open(echo_path, encoding="utf-8") as f:
                meta = json.load(f).get("meta", {})
        rows.append({
            "run": str(run),
            "accuracy": metrics.get("accuracy"),
            "n": metrics.get("n"),
            "k": meta.get("k", ""),
            "w": meta.get("w", ""),
            "mode": meta.get("mode", ""),
        })
        name = meta.get("series", "run")
        k = meta.get("k")
        x = float(k) if isinstance(k, (int, float)) else float(len(series.get(name, [])))
        series.setdefault(name, []).append((x, float(metrics["accuracy"])))
    out_base = Path(args.out)
    out_base.parent.mkdir(parents=True, exist_ok=True)
    with open(out_base.with_suffix(".csv"), "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["run", "accuracy", "n", "k", "w", "mode"])
        writer.writeheader()
        writer.writerows(rows)
    analysis.emit_report(series, out_base, title="accuracy by run",
                         xlabel="shots", ylabel="top-1 accuracy")
    print(f"aggregated {len(rows)} runs -> {out_base.with_suffix('.csv')}")
    return 0


# -- parser ------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file with flat keys")
    p.add_argument("--set", action="append", dest="overrides", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--seed", type=int, help="override the config seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="capfuse",
        description="caption-driven multimodal fine-tuning toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic embedding store + captions")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--sigma", type=float, default=0.3)
    p.add_argument("--train-per-class", type=int, default=20)
    p.add_argument("--val-per-class", type=int, default=5)
    p.add_argument("--test-per-class", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    captions_parser = sub.add_parser("captions", help="caption generation")
    captions_sub = captions_parser.add_subparsers(dest="subcommand", required=True)
    p = captions_sub.add_parser("generate", help="generate captions via the provider")
    _add_common(p)
    p.add_argument("--store", required=True, help="embedding store (sample manifest)")
    p.add_argument("--out", required=True, help="captions.jsonl output path")
    p.add_argument("--cache-dir", help="provider response cache directory")
    p.add_argument("--images", help="directory of {sample_id}.jpg/png payloads")
    p.add_argument("--splits", default="train", help="comma list of splits to caption")
    p.add_argument("--no-prefix", action="store_true",
                   help="skip the 'a photo of a {class}. ' prefix")
    p.set_defaults(func=cmd_captions_generate)

    fewshot_parser = sub.add_parser("fewshot", help="few-shot sampling")
    fewshot_sub = fewshot_parser.add_subparsers(dest="subcommand", required=True)
    p = fewshot_sub.add_parser("sample", help="materialize a K-shot selection")
    _add_common(p)
    p.add_argument("--store", required=True)
    p.add_argument("--k", help="shots per class (integer or 'full')")
    p.add_argument("--out", required=True, help="selection JSON output path")
    p.set_defaults(func=cmd_fewshot_sample)

    p = sub.add_parser("train", help="fine-tune adapters on store + captions")
    _add_common(p)
    p.add_argument("--store", required=True)
    p.add_argument("--captions", required=True)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--selection", help="few-shot selection JSON")
    p.add_argument("--w", type=float, help="supervised loss weight override")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    _add_common(p)
    p.add_argument("--store", required=True)
    p.add_argument("--captions", required=True)
    p.add_argument("--checkpoint", required=True, help="run directory with checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=inference.MODES)
    p.add_argument("--split")
    p.add_argument("--selection", help="restrict the prototype caption bank")
    p.add_argument("--name", default="run", help="series label for reports")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("zeroshot", help="prototype inference with identity adapter")
    _add_common(p)
    p.add_argument("--store", required=True)
    p.add_argument("--captions", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=inference.MODES)
    p.add_argument("--split")
    p.add_argument("--selection")
    p.add_argument("--name", default="run")
    p.set_defaults(func=cmd_zeroshot)

    analyze_parser = sub.add_parser("analyze", help="caption analytics")
    analyze_sub = analyze_parser.add_subparsers(dest="subcommand", required=True)
    p = analyze_sub.add_parser("captions", help="token-length and CLIP-score stats")
    _add_common(p)
    p.add_argument("--captions", required=True)
    p.add_argument("--merges", help="BPE merges file (enables token stats)")
    p.add_argument("--store", help="embedding store (enables cosine stats)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze_captions)

    sweep_parser = sub.add_parser("sweep", help="hyperparameter sweeps")
    sweep_sub = sweep_parser.add_subparsers(dest="subcommand", required=True)
    p = sweep_sub.add_parser("w", help="train+eval over w in 0.0..1.0 step 0.1")
    _add_common(p)
    p.add_argument("--store", required=True)
    p.add_argument("--captions", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--selection")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_sweep_w)

    p = sub.add_parser("report", help="aggregate run metrics")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", required=True, help="output basename (gets .csv/.svg)")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except ProviderError as exc:
        print(f"provider error: {exc}", file=sys.stderr)
        return 4
    except NumericError as exc:
        print(f"invariant failure: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
