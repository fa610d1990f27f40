"""Classical fusion baselines: IHS, Brovey, GS, SFIM, GFPCA.

All methods take an already-upsampled MS image plus the PAN channel on the
same grid and return a fused MSImage clipped to [0, 1]. Ratio guards use
eps = 1e-6 throughout.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import GeometryError, ValidationError
from .raster import MSImage, PanImage

_EPS = 1e-6


@dataclass(frozen=True)
class FusionInput:
    """Bicubic-upsampled MS plus PAN on a shared grid."""

    ms_up: MSImage
    pan: PanImage

    def __post_init__(self):
        if (self.ms_up.height, self.ms_up.width) != (self.pan.height, self.pan.width):
            raise GeometryError(
                f"MS grid {self.ms_up.height}x{self.ms_up.width} does not match "
                f"PAN grid {self.pan.height}x{self.pan.width}"
            )

    @property
    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """float64 (H, W, C) and (H, W) views."""
        return self.ms_up.data.astype(np.float64), self.pan.data[:, :, 0].astype(np.float64)


def _finish(out: np.ndarray, names) -> MSImage:
    return MSImage(np.clip(out, 0.0, 1.0).astype(np.float32), band_names=names)


def _inject_mean_detail(ms: np.ndarray, pan: np.ndarray) -> np.ndarray:
    """out_b = MS_b + (PAN - I), I = band mean. No band-count guard; the
    public IHS entry point adds the C >= 3 check."""
    intensity = ms.mean(axis=2)
    return ms + (pan - intensity)[:, :, None]


def ihs_fuse(inp: FusionInput) -> MSImage:
    """Generalized intensity substitution: inject (PAN - band mean)."""
    ms, pan = inp.arrays
    if ms.shape[2] < 3:
        raise ValidationError(f"intensity substitution needs >= 3 bands, got {ms.shape[2]}")
    return _finish(_inject_mean_detail(ms, pan), inp.ms_up.band_names)


def brovey_fuse(inp: FusionInput) -> MSImage:
    """Multiplicative normalization: out_b = MS_b * PAN / (I + eps)."""
    ms, pan = inp.arrays
    intensity = ms.mean(axis=2)
    scale = pan / (intensity + _EPS)
    return _finish(ms * scale[:, :, None], inp.ms_up.band_names)


def gs_fuse(inp: FusionInput) -> MSImage:
    """Component substitution against the band-mean simulated intensity.

    PAN is mean/std matched to the intensity, then injected per band with
    gain cov(MS_b, I) / var(I) (population statistics). Degenerate intensity
    variance falls back to mean-detail injection with a warning.
    """
    ms, pan = inp.arrays
    if ms.shape[2] < 2:
        raise ValidationError(f"component substitution needs >= 2 bands, got {ms.shape[2]}")
    intensity = ms.mean(axis=2)
    var_i = float(intensity.var())
    if var_i < _EPS:
        warnings.warn("intensity variance is degenerate; falling back to mean-detail injection")
        return _finish(_inject_mean_detail(ms, pan), inp.ms_up.band_names)
    std_pan = float(pan.std())
    if std_pan < _EPS:
        matched = np.full_like(pan, intensity.mean())
    else:
        matched = (pan - pan.mean()) * (np.sqrt(var_i) / std_pan) + intensity.mean()
    delta = matched - intensity
    centered_i = intensity - intensity.mean()
    out = np.empty_like(ms)
    for b in range(ms.shape[2]):
        band = ms[:, :, b]
        gain = float(np.mean((band - band.mean()) * centered_i)) / var_i
        out[:, :, b] = band + gain * delta
    return _finish(out, inp.ms_up.band_names)


def sfim_fuse(inp: FusionInput, ratio: int = 4) -> MSImage:
    """Smoothing-filter intensity modulation: out_b = MS_b * PAN / boxed PAN,
    box side 2*ratio + 1 (reflect boundary)."""
    ms, pan = inp.arrays
    if ratio < 1:
        raise ValidationError(f"ratio must be >= 1, got {ratio}")
    low = uniform_filter(pan, size=2 * ratio + 1, mode="reflect")
    return _finish(ms * (pan / (low + _EPS))[:, :, None], inp.ms_up.band_names)


# ---------------------------------------------------------------------------
# GFPCA
# ---------------------------------------------------------------------------


def principal_components(ms: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """PCA over bands: returns (scores (H, W, C), band means (C,), basis
    (C, C) with components in columns, sorted by descending variance)."""
    h, w, c = ms.shape
    flat = ms.reshape(-1, c)
    mean = flat.mean(axis=0)
    centered = flat - mean
    cov = centered.T @ centered / flat.shape[0]
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    basis = eigvecs[:, order]
    # sign convention: make each component's largest-loading entry positive
    for k in range(c):
        j = int(np.argmax(np.abs(basis[:, k])))
        if basis[j, k] < 0:
            basis[:, k] = -basis[:, k]
    scores = centered @ basis
    return scores.reshape(h, w, c), mean, basis


def _guided_filter(guide: np.ndarray, src: np.ndarray, radius: int, reg: float) -> np.ndarray:
    size = 2 * radius + 1

    def box(a):
        return uniform_filter(a, size=size, mode="reflect")

    mean_i = box(guide)
    mean_p = box(src)
    var_i = box(guide * guide) - mean_i**2
    cov_ip = box(guide * src) - mean_i * mean_p
    a = cov_ip / (var_i + reg)
    b = mean_p - a * mean_i
    return box(a) * guide + box(b)


def gfpca_fuse(inp: FusionInput, radius: int = 8, reg: float = 1e-3) -> MSImage:
    """Replace the first principal component with the guided-filtered PAN
    (guide = PC1), mean/std matched back to PC1, then invert the PCA.
    Degenerate band covariance falls back to mean-detail injection."""
    ms, pan = inp.arrays
    if ms.shape[2] < 2:
        raise ValidationError(f"PCA substitution needs >= 2 bands, got {ms.shape[2]}")
    scores, mean, basis = principal_components(ms)
    pc1 = scores[:, :, 0]
    if float(pc1.var()) < _EPS:
        warnings.warn("band covariance is degenerate; falling back to mean-detail injection")
        return _finish(_inject_mean_detail(ms, pan), inp.ms_up.band_names)
    filtered = _guided_filter(pc1, pan, radius, reg)
    std_f = float(filtered.std())
    if std_f < _EPS:
        matched = np.full_like(filtered, pc1.mean())
    else:
        matched = (filtered - filtered.mean()) * (pc1.std() / std_f) + pc1.mean()
    new_scores = scores.copy()
    new_scores[:, :, 0] = matched
    h, w, c = ms.shape
    out = new_scores.reshape(-1, c) @ basis.T + mean
    return _finish(out.reshape(h, w, c), inp.ms_up.band_names)


FUSE_BASELINES = {
    "ihs": ihs_fuse,
    "brovey": brovey_fuse,
    "gs": gs_fuse,
    "sfim": sfim_fuse,
    "gfpca": gfpca_fuse,
}
