"""Reduced-resolution training data: degrade full-res scenes, cut patches.

The simulator follows the usual reduced-resolution protocol: the original
MS acquisition becomes the ground truth, its blurred and decimated copy is
the low-res input, and the PAN channel is degraded to the ground-truth grid
with the same kernel. Blur uses circular boundary handling so the operator
matches the fixed degradation oracle exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import FormatError, GeometryError, ValidationError
from .raster import MSImage, PanImage, load_raster, save_raster


@dataclass(frozen=True)
class DegradationConfig:
    """Blur/decimate/noise settings for one simulation run."""

    ratio: int
    blur_sigma: float | None = None  # default r/2
    kernel_size: int | None = None  # default 2r+1
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.ratio < 2:
            raise ValidationError(f"ratio must be >= 2, got {self.ratio}")
        if self.noise_std < 0:
            raise ValidationError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.blur_sigma is None:
            object.__setattr__(self, "blur_sigma", self.ratio / 2.0)
        if self.kernel_size is None:
            object.__setattr__(self, "kernel_size", 2 * self.ratio + 1)
        if self.kernel_size < 3 or self.kernel_size % 2 == 0:
            raise ValidationError(f"kernel size must be odd and >= 3, got {self.kernel_size}")
        if self.blur_sigma <= 0:
            raise ValidationError(f"blur sigma must be > 0, got {self.blur_sigma}")


@dataclass(frozen=True)
class SamplePair:
    """Aligned (lrms, pan, gt) triple at ratio r."""

    lrms: MSImage
    pan: PanImage
    gt: MSImage
    ratio: int

    def __post_init__(self):
        r = self.ratio
        if r < 2:
            raise ValidationError(f"ratio must be >= 2, got {r}")
        if self.pan.height != self.gt.height or self.pan.width != self.gt.width:
            raise GeometryError(
                f"pan {self.pan.height}x{self.pan.width} does not match "
                f"gt {self.gt.height}x{self.gt.width}"
            )
        if self.gt.height != r * self.lrms.height or self.gt.width != r * self.lrms.width:
            raise GeometryError(
                f"gt {self.gt.height}x{self.gt.width} is not {r}x the "
                f"low-res grid {self.lrms.height}x{self.lrms.width}"
            )
        if self.gt.bands != self.lrms.bands:
            raise GeometryError(
                f"band mismatch: gt has {self.gt.bands}, lrms has {self.lrms.bands}"
            )


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """Normalized 2-D Gaussian tap grid, float64, sums to 1."""
    if size < 3 or size % 2 == 0:
        raise ValidationError(f"kernel size must be odd and >= 3, got {size}")
    half = size // 2
    ax = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def blur_decimate(data: np.ndarray, kernel: np.ndarray, r: int) -> np.ndarray:
    """Correlate each band with `kernel` (circular boundary), keep every r-th
    sample starting at the top-left corner."""
    if data.shape[0] % r or data.shape[1] % r:
        raise GeometryError(
            f"dimensions {data.shape[0]}x{data.shape[1]} not divisible by ratio {r}"
        )
    out = np.empty_like(data, dtype=np.float64)
    for b in range(data.shape[2]):
        out[:, :, b] = ndimage.correlate(data[:, :, b].astype(np.float64), kernel, mode="wrap")
    return out[::r, ::r, :]


def degrade(scene_ms: MSImage, scene_pan: PanImage, cfg: DegradationConfig) -> SamplePair:
    """Simulate a reduced-resolution pair from one full-resolution scene.

    scene_pan must live on the r-times-finer grid; the MS scene is blurred
    and decimated into the low-res input, the PAN is degraded onto the
    ground-truth grid, and the MS scene itself becomes the target.
    """
    r = cfg.ratio
    if scene_pan.height != r * scene_ms.height or scene_pan.width != r * scene_ms.width:
        raise GeometryError(
            f"scene PAN {scene_pan.height}x{scene_pan.width} is not {r}x the "
            f"MS scene {scene_ms.height}x{scene_ms.width}"
        )
    if scene_ms.height % r or scene_ms.width % r:
        raise GeometryError(
            f"MS scene {scene_ms.height}x{scene_ms.width} not divisible by ratio {r}"
        )
    kernel = gaussian_kernel(cfg.kernel_size, cfg.blur_sigma)
    low = blur_decimate(scene_ms.data, kernel, r)
    if cfg.noise_std > 0:
        rng = np.random.default_rng(cfg.seed)
        low = low + rng.normal(0.0, cfg.noise_std, size=low.shape)
    low = np.clip(low, 0.0, 1.0).astype(np.float32)
    pan_low = np.clip(blur_decimate(scene_pan.data, kernel, r), 0.0, 1.0).astype(np.float32)
    return SamplePair(
        lrms=MSImage(low, band_names=scene_ms.band_names),
        pan=PanImage(pan_low),
        gt=scene_ms,
        ratio=r,
    )


def crop_patch_dataset(pairs: list[SamplePair], pan_patch: int, stride: int) -> list[SamplePair]:
    """Cut every pair into aligned patch triples with a sliding window
    of `pan_patch` / `stride` on the ground-truth grid."""
    if not pairs:
        return []
    r = pairs[0].ratio
    if pan_patch % r:
        raise ValidationError(f"pan_patch {pan_patch} not divisible by ratio {r}")
    if stride < 1 or stride % r:
        # alignment: low-res window must advance on integer low-res pixels
        raise ValidationError(f"stride {stride} must be a positive multiple of ratio {r}")
    ms_patch = pan_patch // r
    out: list[SamplePair] = []
    for pair in pairs:
        if pair.ratio != r:
            raise ValidationError("all pairs in one crop batch must share the ratio")
        if pan_patch > pair.gt.height or pan_patch > pair.gt.width:
            raise GeometryError(
                f"pan_patch {pan_patch} exceeds scene {pair.gt.height}x{pair.gt.width}"
            )
        for top in range(0, pair.gt.height - pan_patch + 1, stride):
            for left in range(0, pair.gt.width - pan_patch + 1, stride):
                lt, ll = top // r, left // r
                out.append(
                    SamplePair(
                        lrms=MSImage(
                            pair.lrms.data[lt : lt + ms_patch, ll : ll + ms_patch, :],
                            band_names=pair.lrms.band_names,
                        ),
                        pan=PanImage(pair.pan.data[top : top + pan_patch, left : left + pan_patch, :]),
                        gt=MSImage(
                            pair.gt.data[top : top + pan_patch, left : left + pan_patch, :],
                            band_names=pair.gt.band_names,
                        ),
                        ratio=r,
                    )
                )
    return out


def synth_toy_scene(seed: int, size: int = 128, bands: int = 4) -> tuple[MSImage, PanImage]:
    """Deterministic synthetic scene: smooth per-band backgrounds plus a
    shared high-frequency texture, PAN = equal-weight band mix plus extra
    fine texture.
    """
    if size < 8:
        raise ValidationError(f"size must be >= 8, got {size}")
    if bands < 2:
        raise ValidationError(f"bands must be >= 2, got {bands}")
    rng = np.random.default_rng(seed)

    def smooth(sigma):
        f = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
        return f / max(f.std(), 1e-12)

    texture = smooth(1.0)
    blocks = np.zeros((size, size))
    for _ in range(6):
        h = int(rng.integers(size // 8, size // 2))
        w = int(rng.integers(size // 8, size // 2))
        top = int(rng.integers(0, size - h))
        left = int(rng.integers(0, size - w))
        blocks[top : top + h, left : left + w] += rng.uniform(-1.0, 1.0)
    blocks = blocks / max(np.abs(blocks).max(), 1e-12)

    gains = 0.6 + 0.8 * rng.random(bands)  # positive per-band texture gains
    ms = np.empty((size, size, bands), dtype=np.float64)
    for b in range(bands):
        background = 0.5 + 0.18 * smooth(size / 8.0)
        ms[:, :, b] = background + gains[b] * (0.10 * texture + 0.12 * blocks)
    ms = np.clip(ms, 0.02, 0.98).astype(np.float32)

    pan = ms.mean(axis=2) + 0.05 * smooth(0.8)
    pan = np.clip(pan, 0.0, 1.0).astype(np.float32)
    return MSImage(ms), PanImage(pan)


# ---------------------------------------------------------------------------
# dataset directory layout: <root>/manifest.json + <root>/pairs/<id>/...
# ---------------------------------------------------------------------------

_PAIR_PARTS = ("lrms", "pan", "gt")


def save_pair(pair: SamplePair, pair_dir: str | Path) -> None:
    d = Path(pair_dir)
    d.mkdir(parents=True, exist_ok=True)
    save_raster(pair.lrms, d / "lrms")
    save_raster(pair.pan, d / "pan")
    save_raster(pair.gt, d / "gt")


def load_pair(pair_dir: str | Path, ratio: int) -> SamplePair:
    d = Path(pair_dir)
    lrms = load_raster(d / "lrms")
    pan = load_raster(d / "pan")
    gt = load_raster(d / "gt")
    if not isinstance(lrms, MSImage) or not isinstance(gt, MSImage):
        raise FormatError(f"{d}: lrms/gt must be multi-band")
    if not isinstance(pan, PanImage):
        raise FormatError(f"{d}: pan must be single-band")
    return SamplePair(lrms=lrms, pan=pan, gt=gt, ratio=ratio)


def save_dataset(
    pairs: list[SamplePair],
    root: str | Path,
    meta: dict | None = None,
) -> Path:
    """Write pairs/<id>/{lrms,pan,gt} plus a manifest listing ids and ratio."""
    if not pairs:
        raise ValidationError("refusing to write an empty dataset")
    root = Path(root)
    ratio = pairs[0].ratio
    ids = []
    for i, pair in enumerate(pairs):
        if pair.ratio != ratio:
            raise ValidationError("all pairs in one dataset must share the ratio")
        pid = f"{i:05d}"
        save_pair(pair, root / "pairs" / pid)
        ids.append(pid)
    manifest = {"ratio": ratio, "count": len(ids), "pairs": ids}
    if meta:
        manifest.update(meta)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return root


def load_dataset(root: str | Path) -> tuple[list[SamplePair], dict]:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"no manifest.json under {root}")
    try:
        manifest = json.loads(manifest_path.read_text())
        ratio = int(manifest["ratio"])
        ids = list(manifest["pairs"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed manifest {manifest_path}: {exc}") from exc
    pairs = [load_pair(root / "pairs" / pid, ratio) for pid in ids]
    return pairs, manifest
