"""Flat run configuration: defaults, file loading, CLI overrides.

One JSON file with a flat, dotted key set; command-line --set key=value
pairs override file values, and the effective configuration is echoed
into the run directory for reproducibility.
"""

from __future__ import annotations

import json
from pathlib import Path

from .errors import ConfigError
from .losses import LossConfig
from .provider import ProviderConfig
from .training import TrainConfig

DEFAULTS: dict[str, object] = {
    "seed": 0,
    "domain": "objects",
    "characteristics": "visual,shape,texture",
    "prefix": True,
    "word_budget": 50,
    "k_shots": "full",
    "provider.kind": "mock",
    "provider.endpoint_url": "",
    "provider.model_id": "mock-mllm",
    "provider.temperature": 0.2,
    "provider.max_retries": 3,
    "provider.rate_limit": 0.0,  # requests/sec; 0 disables limiting
    "provider.api_key_env": "CAPFUSE_API_KEY",
    "provider.concurrency": 4,
    "provider.retry_base_s": 1.0,
    "train.lr": 1e-5,
    "train.weight_decay": 1e-4,
    "train.epochs": 50,
    "train.batch_size": 64,
    "train.min_lr": 0.0,
    "train.caption_mode": "generated",
    "train.learn_temp": False,
    "train.train_text_tower": True,
    "train.select": "best_val",
    "loss.w": 0.2,
    "loss.tau_std": 0.07,
    "loss.tau_sup": 1.0,
    "loss.direction": "img_to_txt",
    "infer.mode": "embedding_avg",
    "infer.eval_split": "test",
    "infer.proto_splits": "train",
    "analyze.max_merges": -1,  # -1 = use every merge rule in the file
    "analyze.context_limit": 77,
}


def _coerce(key: str, value: object) -> object:
    default = DEFAULTS[key]
    if isinstance(value, str) and not isinstance(default, str):
        text = value.strip()
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        try:
            if isinstance(default, int):
                return int(text)
            if isinstance(default, float):
                return float(text)
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from exc
    if isinstance(default, bool) and not isinstance(value, bool):
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if type(default) is not type(value) and not isinstance(default, str):
        raise ConfigError(
            f"{key}: expected {type(default).__name__}, got {type(value).__name__}")
    return value


def load_config(path: str | Path | None = None) -> dict:
    cfg = dict(DEFAULTS)
    if path is None:
        return cfg
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    for key, value in data.items():
        if key not in DEFAULTS:
            raise ConfigError(f"{path}: unknown config key {key!r}")
        cfg[key] = _coerce(key, value)
    return cfg


def apply_overrides(cfg: dict, pairs: list[str] | None) -> dict:
    out = dict(cfg)
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = _coerce(key, value)
    return out


def echo_config(cfg: dict, run_dir: str | Path, command: str,
                meta: dict | None = None) -> None:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, "config": {k: cfg[k] for k in sorted(cfg)}}
    if meta:
        payload["meta"] = meta
    with open(run_dir / "config-echo.json", "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=1, sort_keys=True)


def provider_config(cfg: dict) -> ProviderConfig:
    rate = cfg["provider.rate_limit"]
    return ProviderConfig(
        kind=cfg["provider.kind"],
        endpoint_url=cfg["provider.endpoint_url"],
        model_id=cfg["provider.model_id"],
        temperature=cfg["provider.temperature"],
        max_retries=cfg["provider.max_retries"],
        rate_limit=rate if rate else None,
        api_key_env=cfg["provider.api_key_env"],
        concurrency=cfg["provider.concurrency"],
        retry_base_s=cfg["provider.retry_base_s"],
    )


def loss_config(cfg: dict) -> LossConfig:
    try:
        return LossConfig(
            w=cfg["loss.w"],
            tau_std=cfg["loss.tau_std"],
            tau_sup=cfg["loss.tau_sup"],
            direction=cfg["loss.direction"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(
            lr=cfg["train.lr"],
            weight_decay=cfg["train.weight_decay"],
            epochs=cfg["train.epochs"],
            batch_size=cfg["train.batch_size"],
            min_lr=cfg["train.min_lr"],
            seed=cfg["seed"],
            loss=loss_config(cfg),
            caption_mode=cfg["train.caption_mode"],
            learn_temp=cfg["train.learn_temp"],
            train_text_tower=cfg["train.train_text_tower"],
            select=cfg["train.select"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def characteristics_tuple(cfg: dict) -> tuple[str, ...]:
    return tuple(c.strip() for c in str(cfg["characteristics"]).split(",") if c.strip())
