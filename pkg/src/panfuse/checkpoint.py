"""Checkpoint serialization with provenance.

A checkpoint records the module weights, the hash of the producing config,
and the hashes of any pretrained encoders it consumed, so downstream stages
can refuse to mix artifacts from different runs. Weight hashes are computed
over name + shape + dtype + raw bytes, which makes "identical training run"
checkable as a string comparison.
"""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Mapping

import torch

from .errors import ConfigError, FormatError

FORMAT_VERSION = 1

_REQUIRED = ("format_version", "kind", "state", "config_hash", "provenance", "epoch")


def state_hash(state: Mapping[str, torch.Tensor]) -> str:
    """Order-independent digest of a state dict."""
    h = hashlib.sha256()
    for name in sorted(state):
        t = state[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(str(t.dtype).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(
    path: str | Path,
    kind: str,
    state: Mapping[str, torch.Tensor],
    config_hash: str,
    epoch: int = 0,
    provenance: Mapping[str, str] | None = None,
    extra: Mapping[str, object] | None = None,
) -> str:
    """Write the checkpoint and return its state hash."""
    payload = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "state": {k: v.detach().cpu() for k, v in state.items()},
        "config_hash": config_hash,
        "epoch": int(epoch),
        "provenance": dict(provenance or {}),
    }
    payload.update(dict(extra or {}))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    return state_hash(payload["state"])


def load_checkpoint(
    path: str | Path,
    kind: str | None = None,
    expect_config_hash: str | None = None,
    allow_mismatch: bool = False,
) -> dict:
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or any(key not in payload for key in _REQUIRED):
        missing = [k for k in _REQUIRED if not isinstance(payload, dict) or k not in payload]
        raise FormatError(f"checkpoint {path} is missing fields: {missing}")
    if payload["format_version"] != FORMAT_VERSION:
        raise FormatError(
            f"checkpoint {path} has format version {payload['format_version']}, "
            f"expected {FORMAT_VERSION}"
        )
    if kind is not None and payload["kind"] != kind:
        raise FormatError(f"checkpoint {path} holds {payload['kind']!r}, expected {kind!r}")
    if (
        expect_config_hash is not None
        and payload["config_hash"] != expect_config_hash
        and not allow_mismatch
    ):
        raise ConfigError(
            f"checkpoint {path} was produced under config {payload['config_hash'][:12]}..., "
            f"current config is {expect_config_hash[:12]}... "
            "(pass the mismatch override to mix on purpose)"
        )
    return payload
