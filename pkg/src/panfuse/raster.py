"""Core raster types, bit-exact I/O, and Catmull-Rom resampling.

Images live in [0, 1] as float32 arrays of shape (height, width, bands).
The on-disk format is a raw little-endian float32 band-planar payload
(`<name>.bin`) next to a JSON sidecar header (`<name>.json`).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import FormatError, GeometryError, IntegrityError, ValidationError

_DTYPE_TAG = "float32"
_RANGE_TAG = "unit"
_BYTE_ORDER_TAG = "little"


def _validate_payload(data: np.ndarray, what: str) -> np.ndarray:
    if data.ndim != 3:
        raise GeometryError(f"{what} payload must be (height, width, bands), got shape {data.shape}")
    data = np.ascontiguousarray(data, dtype=np.float32)
    if not np.all(np.isfinite(data)):
        raise ValidationError(f"{what} contains non-finite values")
    if data.min() < 0.0 or data.max() > 1.0:
        raise ValidationError(
            f"{what} values outside [0, 1]: min={data.min():.6g} max={data.max():.6g}"
        )
    return data


@dataclass(frozen=True)
class MSImage:
    """Multi-spectral raster, (H, W, C) with C >= 2, values in [0, 1]."""

    data: np.ndarray
    band_names: tuple[str, ...] | None = None

    def __post_init__(self):
        data = _validate_payload(self.data, "MSImage")
        if data.shape[2] < 2:
            raise ValidationError(f"MSImage needs >= 2 bands, got {data.shape[2]}")
        if self.band_names is not None and len(self.band_names) != data.shape[2]:
            raise ValidationError("band_names length does not match band count")
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def bands(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class PanImage:
    """Single-band raster, (H, W, 1), values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        data = self.data
        if data.ndim == 2:
            data = data[:, :, None]
        data = _validate_payload(data, "PanImage")
        if data.shape[2] != 1:
            raise ValidationError(f"PanImage must have exactly 1 band, got {data.shape[2]}")
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


Raster = MSImage | PanImage


@dataclass(frozen=True)
class RasterHeader:
    """Sidecar header describing one .bin payload."""

    height: int
    width: int
    bands: int
    dtype: str = _DTYPE_TAG
    value_range: str = _RANGE_TAG
    byte_order: str = _BYTE_ORDER_TAG
    band_names: tuple[str, ...] | None = field(default=None)

    def validate(self) -> None:
        if min(self.height, self.width, self.bands) < 1:
            raise FormatError(f"non-positive header dimensions {self.height}x{self.width}x{self.bands}")
        if self.dtype != _DTYPE_TAG:
            raise FormatError(f"unsupported dtype tag {self.dtype!r}")
        if self.value_range != _RANGE_TAG:
            raise FormatError(f"unsupported value-range tag {self.value_range!r}")
        if self.byte_order != _BYTE_ORDER_TAG:
            raise FormatError(f"unsupported byte-order tag {self.byte_order!r}")

    def to_json(self) -> str:
        doc = {
            "height": self.height,
            "width": self.width,
            "bands": self.bands,
            "dtype": self.dtype,
            "range": self.value_range,
            "byte_order": self.byte_order,
        }
        if self.band_names is not None:
            doc["band_names"] = list(self.band_names)
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "RasterHeader":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"header is not valid JSON: {exc}") from exc
        try:
            names = doc.get("band_names")
            return cls(
                height=int(doc["height"]),
                width=int(doc["width"]),
                bands=int(doc["bands"]),
                dtype=str(doc.get("dtype", _DTYPE_TAG)),
                value_range=str(doc.get("range", _RANGE_TAG)),
                byte_order=str(doc.get("byte_order", _BYTE_ORDER_TAG)),
                band_names=tuple(names) if names is not None else None,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed header: {exc}") from exc


def _paths(path: str | Path) -> tuple[Path, Path]:
    base = Path(path)
    if base.suffix in (".bin", ".json"):
        base = base.with_suffix("")
    return base.with_suffix(".bin"), base.with_suffix(".json")


def save_raster(img: Raster, path: str | Path) -> Path:
    """Write `<path>.bin` + `<path>.json`; the pair round-trips bit-exactly."""
    bin_path, json_path = _paths(path)
    names = img.band_names if isinstance(img, MSImage) else None
    header = RasterHeader(
        height=img.height, width=img.width, bands=img.data.shape[2], band_names=names
    )
    header.validate()
    # band-planar little-endian payload
    planar = np.ascontiguousarray(img.data.transpose(2, 0, 1)).astype("<f4")
    bin_path.parent.mkdir(parents=True, exist_ok=True)
    bin_path.write_bytes(planar.tobytes())
    json_path.write_text(header.to_json())
    return bin_path


def load_raster(path: str | Path) -> Raster:
    """Read a .bin/.json pair written by save_raster."""
    bin_path, json_path = _paths(path)
    if not json_path.exists():
        raise FormatError(f"missing header {json_path}")
    if not bin_path.exists():
        raise FormatError(f"missing payload {bin_path}")
    header = RasterHeader.from_json(json_path.read_text())
    header.validate()
    payload = bin_path.read_bytes()
    expected = header.height * header.width * header.bands * 4
    if len(payload) != expected:
        raise IntegrityError(
            f"payload holds {len(payload)} bytes, header implies {expected} "
            f"({header.height}x{header.width}x{header.bands} float32)"
        )
    planar = np.frombuffer(payload, dtype="<f4").reshape(header.bands, header.height, header.width)
    data = np.ascontiguousarray(planar.transpose(1, 2, 0))
    if header.bands == 1:
        return PanImage(data)
    return MSImage(data, band_names=header.band_names)


def normalize(raw: np.ndarray, bit_depth: int) -> Raster:
    """Map integer counts in [0, 2^bit_depth - 1] onto [0, 1] floats."""
    if bit_depth < 1:
        raise ValidationError(f"bit_depth must be >= 1, got {bit_depth}")
    arr = np.asarray(raw)
    peak = float(2**bit_depth - 1)
    if arr.min() < 0 or arr.max() > peak:
        raise ValidationError(
            f"raw values outside [0, {int(peak)}] for bit depth {bit_depth}"
        )
    data = (arr.astype(np.float64) / peak).astype(np.float32)
    if data.ndim == 2:
        data = data[:, :, None]
    if data.shape[2] == 1:
        return PanImage(data)
    return MSImage(data)


# ---------------------------------------------------------------------------
# Catmull-Rom (a = -0.5) upsampling, shared by the raster API and the network
# ---------------------------------------------------------------------------

_CUBIC_A = -0.5


def _cubic_taps(t: float) -> tuple[float, float, float, float]:
    """Four Catmull-Rom tap weights for fractional offset t in [0, 1)."""
    a = _CUBIC_A

    def w_near(x):  # |x| <= 1
        return (a + 2) * x**3 - (a + 3) * x**2 + 1

    def w_far(x):  # 1 < |x| < 2
        return a * x**3 - 5 * a * x**2 + 8 * a * x - 4 * a

    return (w_far(1 + t), w_near(t), w_near(1 - t), w_far(2 - t))


def _upsample_axis(x: torch.Tensor, r: int, axis: int) -> torch.Tensor:
    """Upsample one spatial axis of a (B, C, H, W) tensor by integer factor r."""
    if axis == -1 or axis == 3:
        x = x.transpose(2, 3)
        out = _upsample_axis(x, r, 2)
        return out.transpose(2, 3)
    n = x.shape[2]
    pad = F.pad(x, (0, 0, 2, 2), mode="reflect")
    out = x.new_empty((x.shape[0], x.shape[1], n * r, x.shape[3]))
    for ph in range(r):
        u = (ph + 0.5) / r - 0.5
        base = int(np.floor(u))
        t = u - base
        taps = _cubic_taps(t)
        acc = None
        for m, w in enumerate(taps):
            start = base + 1 + m  # offset into the 2-padded tensor
            piece = pad[:, :, start : start + n, :] * w
            acc = piece if acc is None else acc + piece
        out[:, :, ph::r, :] = acc
    return out


def upsample_tensor(x: torch.Tensor, r: int) -> torch.Tensor:
    """Differentiable Catmull-Rom upsampling of a (B, C, H, W) tensor.

    Reflect padding at the borders; exact on constant and (in the interior)
    on linear ramps.
    """
    if r < 2:
        raise ValidationError(f"upsampling factor must be >= 2, got {r}")
    if x.ndim != 4:
        raise GeometryError(f"expected (B, C, H, W) tensor, got shape {tuple(x.shape)}")
    if min(x.shape[2], x.shape[3]) < 2:
        raise GeometryError("inputs smaller than 2x2 cannot be reflect-padded for resampling")
    return _upsample_axis(_upsample_axis(x, r, 2), r, 3)


def bicubic_upsample(img: MSImage, r: int) -> MSImage:
    """Upsample an MSImage by integer factor r (Catmull-Rom), clipped to [0, 1]."""
    t = to_tensor(img)
    up = upsample_tensor(t, r).clamp_(0.0, 1.0)
    return MSImage(from_tensor(up), band_names=img.band_names)


# ---------------------------------------------------------------------------
# numpy <-> torch helpers
# ---------------------------------------------------------------------------


def to_tensor(img: Raster | np.ndarray) -> torch.Tensor:
    """(H, W, C) array or image -> (1, C, H, W) float32 tensor."""
    data = img.data if isinstance(img, (MSImage, PanImage)) else np.asarray(img)
    if data.ndim == 2:
        data = data[:, :, None]
    # plain copy: the source may be a read-only buffer from load_raster
    return torch.from_numpy(np.array(data.transpose(2, 0, 1), dtype=np.float32)).unsqueeze(0)


def from_tensor(t: torch.Tensor) -> np.ndarray:
    """(1, C, H, W) or (C, H, W) tensor -> (H, W, C) float32 array."""
    if t.ndim == 4:
        if t.shape[0] != 1:
            raise GeometryError("from_tensor expects a single-image batch")
        t = t[0]
    return np.ascontiguousarray(t.detach().cpu().numpy().transpose(1, 2, 0), dtype=np.float32)
