"""Flat key-value run configuration.

One `key = value` per line, `#` comments, no sections. Unknown keys are hard
errors so a typo like `lamda_ss` cannot silently fall back to a default.
Resolution order: built-in profile defaults, then the file, then explicit
overrides. The hash of the fully resolved config is stamped into every
artifact a run produces.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError, FormatError


@dataclass(frozen=True)
class RunConfig:
    profile: str = "paper"
    seed: int = 0
    data_dir: str = "data"

    # geometry
    ratio: int = 4
    bands: int = 4

    # fusion model
    stages: int = 4
    width: int = 32
    share_stage_weights: bool = False
    share_degradation_ops: bool = True
    freeze_encoder: bool = False
    encoder_lr_scale: float = 0.1

    # optimizer / schedule
    lr: float = 5e-4
    batch_size: int = 4
    epochs: int = 1000
    decay_epoch: int = 200
    max_steps: int = 0  # 0 = no cap
    lambda_ss: float = 1.0

    # ablation switches
    disable_u_mae: bool = False
    disable_l_mae: bool = False

    # pretraining
    mask_ratio_spatial: float = 0.75
    mask_ratio_spectral: float = 0.5
    mask_cell: int = 8
    token_patch_side: int = 16
    token_band_group: int = 2
    token_embed_dim: int = 128
    token_enc_layers: int = 4
    token_dec_layers: int = 2
    token_heads: int = 4
    pretrain_steps: int = 2000
    pretrain_lr: float = 5e-4

    # data simulation
    noise_std: float = 0.0
    toy_train_scenes: int = 24
    toy_val_scenes: int = 16
    toy_size: int = 256


PROFILES: dict[str, dict[str, object]] = {
    "paper": {},
    # small enough that the whole pipeline finishes on a laptop CPU
    "desk": {
        "epochs": 80,
        "max_steps": 500,
        "pretrain_steps": 200,
        "toy_size": 64,
        "token_embed_dim": 64,
        "token_enc_layers": 2,
        "token_dec_layers": 1,
    },
}

_FIELDS = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(key: str, raw: str):
    kind = _FIELDS[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"key {key!r}: cannot parse {raw!r} as {kind}") from None


def parse_kv_text(text: str) -> dict[str, str]:
    """Raw key -> value-string mapping; syntax errors only, no key checks."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise FormatError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = stripped.split("=", 1)
        key = key.strip()
        if key in out:
            raise FormatError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def resolve_config(raw: dict[str, str], overrides: dict[str, str] | None = None) -> RunConfig:
    merged = dict(raw)
    merged.update(overrides or {})
    unknown = sorted(set(merged) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    profile = merged.get("profile", "paper")
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    values: dict[str, object] = {"profile": profile}
    values.update(PROFILES[profile])
    for key, raw_value in merged.items():
        if key != "profile":
            values[key] = _parse_value(key, raw_value)
    cfg = RunConfig(**values)
    _validate(cfg)
    return cfg


def load_config(path: str | Path, overrides: dict[str, str] | None = None) -> RunConfig:
    return resolve_config(parse_kv_text(Path(path).read_text()), overrides)


def _validate(cfg: RunConfig) -> None:
    checks = [
        (cfg.ratio >= 2, "ratio must be >= 2"),
        (cfg.bands >= 2, "bands must be >= 2"),
        (0 <= cfg.stages <= 6, "stages must be in 0..6"),
        (cfg.width >= 4, "width must be >= 4"),
        (cfg.lr > 0 and cfg.pretrain_lr > 0, "learning rates must be positive"),
        (cfg.batch_size >= 1, "batch_size must be >= 1"),
        (cfg.epochs >= 1, "epochs must be >= 1"),
        (cfg.decay_epoch >= 1, "decay_epoch must be >= 1"),
        (cfg.max_steps >= 0, "max_steps must be >= 0"),
        (cfg.lambda_ss >= 0, "lambda_ss must be >= 0"),
        (0 < cfg.mask_ratio_spatial <= 1, "mask_ratio_spatial must be in (0, 1]"),
        (0 < cfg.mask_ratio_spectral <= 1, "mask_ratio_spectral must be in (0, 1]"),
        (cfg.mask_cell >= 1, "mask_cell must be >= 1"),
        (cfg.token_patch_side >= 1, "token_patch_side must be >= 1"),
        (cfg.token_band_group >= 1, "token_band_group must be >= 1"),
        (cfg.bands % cfg.token_band_group == 0, "token_band_group must divide bands"),
        (cfg.token_embed_dim % cfg.token_heads == 0, "token_heads must divide token_embed_dim"),
        (cfg.pretrain_steps >= 1, "pretrain_steps must be >= 1"),
        (cfg.noise_std >= 0, "noise_std must be >= 0"),
        (cfg.toy_train_scenes >= 1 and cfg.toy_val_scenes >= 1, "toy scene counts must be >= 1"),
        (cfg.toy_size % cfg.ratio == 0, "toy_size must be divisible by ratio"),
    ]
    for ok, message in checks:
        if not ok:
            raise ConfigError(message)


def dump_config(cfg: RunConfig) -> str:
    """Canonical text form: sorted keys, one per line. Parses back equal."""
    return "\n".join(f"{name} = {getattr(cfg, name)}" for name in sorted(_FIELDS)) + "\n"


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()
