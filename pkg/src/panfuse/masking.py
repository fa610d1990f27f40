"""Random masking over patch grids and joint spatial-spectral token lattices.

The spatial spec masks square cells of a ceil-divided pixel grid (partial
cells at the bottom/right edges are allowed). The spatial-spectral spec
masks (cell, band-group) tokens of an exactly divided lattice; the token id
convention, (cell_row * grid_w + cell_col) * n_groups + group, is shared
with the token autoencoder.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from math import ceil

import numpy as np
import torch

from .errors import FormatError, GeometryError, ValidationError


def _mask_count(rho: float, total: int) -> int:
    return int(round(rho * total))


def _sample_ids(total: int, count: int, seed: int) -> tuple[int, ...]:
    rng = np.random.default_rng(seed)
    perm = rng.permutation(total)
    return tuple(sorted(int(i) for i in perm[:count]))


@dataclass(frozen=True)
class SpatialMaskSpec:
    """Masked cells of a ceil(h/p) x ceil(w/p) patch grid."""

    height: int
    width: int
    patch_side: int
    mask_ratio: float
    seed: int
    masked: tuple[int, ...]

    @property
    def grid(self) -> tuple[int, int]:
        return (ceil(self.height / self.patch_side), ceil(self.width / self.patch_side))

    @property
    def n_cells(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def visible(self) -> tuple[int, ...]:
        masked = set(self.masked)
        return tuple(i for i in range(self.n_cells) if i not in masked)

    def pixel_mask(self) -> np.ndarray:
        """(h, w) boolean array, True where masked."""
        gh, gw = self.grid
        p = self.patch_side
        out = np.zeros((self.height, self.width), dtype=bool)
        for cell in self.masked:
            i, j = divmod(cell, gw)
            out[i * p : min((i + 1) * p, self.height), j * p : min((j + 1) * p, self.width)] = True
        return out

    def to_json(self) -> str:
        return json.dumps(
            {
                "kind": "spatial",
                "height": self.height,
                "width": self.width,
                "patch_side": self.patch_side,
                "mask_ratio": self.mask_ratio,
                "seed": self.seed,
                "masked": list(self.masked),
            }
        )


def make_spatial_mask(h: int, w: int, p: int, rho: float, seed: int) -> SpatialMaskSpec:
    if not 0.0 <= rho <= 1.0:
        raise ValidationError(f"mask ratio must be in [0, 1], got {rho}")
    if p < 1:
        raise ValidationError(f"patch side must be >= 1, got {p}")
    if p > min(h, w):
        raise ValidationError(f"patch side {p} exceeds image dims {h}x{w}")
    total = ceil(h / p) * ceil(w / p)
    masked = _sample_ids(total, _mask_count(rho, total), seed)
    return SpatialMaskSpec(h, w, p, rho, seed, masked)


def apply_spatial_mask(img: torch.Tensor, spec: SpatialMaskSpec, token: torch.Tensor) -> torch.Tensor:
    """Replace masked cells with the per-channel token value; visible cells
    are copied bit-for-bit. img is (B, C, H, W), token is (C,)."""
    if img.ndim != 4:
        raise GeometryError(f"expected (B, C, H, W), got shape {tuple(img.shape)}")
    if img.shape[2] != spec.height or img.shape[3] != spec.width:
        raise GeometryError(
            f"mask spec is {spec.height}x{spec.width}, image is {img.shape[2]}x{img.shape[3]}"
        )
    if token.ndim != 1 or token.shape[0] != img.shape[1]:
        raise GeometryError(
            f"token must be ({img.shape[1]},), got shape {tuple(token.shape)}"
        )
    mask = torch.from_numpy(spec.pixel_mask()).to(img.device)
    return torch.where(mask.view(1, 1, *mask.shape), token.view(1, -1, 1, 1).to(img.dtype), img)


@dataclass(frozen=True)
class SpatialSpectralMaskSpec:
    """Masked tokens of the (h/p x w/p) x (c/g) spatial-spectral lattice."""

    height: int
    width: int
    channels: int
    patch_side: int
    band_group: int
    mask_ratio: float
    seed: int
    masked: tuple[int, ...]

    @property
    def grid(self) -> tuple[int, int]:
        return (self.height // self.patch_side, self.width // self.patch_side)

    @property
    def n_groups(self) -> int:
        return self.channels // self.band_group

    @property
    def n_tokens(self) -> int:
        gh, gw = self.grid
        return gh * gw * self.n_groups

    @property
    def visible(self) -> tuple[int, ...]:
        masked = set(self.masked)
        return tuple(i for i in range(self.n_tokens) if i not in masked)

    def to_json(self) -> str:
        return json.dumps(
            {
                "kind": "spatial_spectral",
                "height": self.height,
                "width": self.width,
                "channels": self.channels,
                "patch_side": self.patch_side,
                "band_group": self.band_group,
                "mask_ratio": self.mask_ratio,
                "seed": self.seed,
                "masked": list(self.masked),
            }
        )


def make_spatial_spectral_mask(
    h: int, w: int, c: int, p: int, g: int, rho: float, seed: int
) -> SpatialSpectralMaskSpec:
    if not 0.0 <= rho <= 1.0:
        raise ValidationError(f"mask ratio must be in [0, 1], got {rho}")
    if p < 1 or g < 1:
        raise ValidationError(f"patch side and band group must be >= 1, got {p}, {g}")
    if h % p or w % p:
        raise GeometryError(f"dims {h}x{w} not divisible by patch side {p}")
    if c % g:
        raise GeometryError(f"{c} channels not divisible by band group {g}")
    total = (h // p) * (w // p) * (c // g)
    masked = _sample_ids(total, _mask_count(rho, total), seed)
    return SpatialSpectralMaskSpec(h, w, c, p, g, rho, seed, masked)


def mask_spec_from_json(text: str) -> SpatialMaskSpec | SpatialSpectralMaskSpec:
    try:
        doc = json.loads(text)
        kind = doc.pop("kind")
        doc["masked"] = tuple(doc["masked"])
        spec = (
            SpatialMaskSpec(**doc) if kind == "spatial" else SpatialSpectralMaskSpec(**doc)
        )
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed mask spec: {exc}") from exc
    if len(spec.masked) != _mask_count(spec.mask_ratio, spec.n_tokens if isinstance(spec, SpatialSpectralMaskSpec) else spec.n_cells):
        raise FormatError("mask spec cardinality does not match its ratio")
    return spec
