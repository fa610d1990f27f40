"""Fusion quality metrics.

Reference metrics (PSNR, SSIM, SAM, ERGAS) score a fused product against
ground truth at reduced resolution; the no-reference family (D_lambda, D_s,
QNR) scores spectral and spatial consistency at full resolution. Everything
runs in float64 on (H, W, C) arrays in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import correlate2d

from .errors import GeometryError, MetricUndefinedError, ValidationError
from .raster import MSImage, PanImage
from .wald import blur_decimate, gaussian_kernel

_PSNR_CAP = 100.0
_Q_EPS = 1e-8
_SSIM_WIN = 11
_SSIM_SIGMA = 1.5


def _as_array(img, what: str) -> np.ndarray:
    if isinstance(img, (MSImage, PanImage)):
        img = img.data
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise GeometryError(f"{what} must be (H, W, C), got shape {arr.shape}")
    return arr


def _paired(x, y) -> tuple[np.ndarray, np.ndarray]:
    a = _as_array(x, "first image")
    b = _as_array(y, "second image")
    if a.shape != b.shape:
        raise GeometryError(f"shape mismatch {a.shape} vs {b.shape}")
    for name, arr in (("first", a), ("second", b)):
        if arr.min() < -1e-6 or arr.max() > 1.0 + 1e-6:
            raise ValidationError(f"{name} image values outside [0, 1]")
    return a, b


# ---------------------------------------------------------------------------
# reference metrics
# ---------------------------------------------------------------------------


def psnr(x, y) -> float:
    """10*log10(1 / MSE) on unit-range data, capped at 100 dB."""
    a, b = _paired(x, y)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return _PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def _ssim_band(a: np.ndarray, b: np.ndarray, window: np.ndarray) -> float:
    c1 = 0.01**2
    c2 = 0.03**2
    mu_a = correlate2d(a, window, mode="valid")
    mu_b = correlate2d(b, window, mode="valid")
    var_a = correlate2d(a * a, window, mode="valid") - mu_a**2
    var_b = correlate2d(b * b, window, mode="valid") - mu_b**2
    cov = correlate2d(a * b, window, mode="valid") - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(x, y) -> float:
    """Mean local SSIM, 11x11 Gaussian window (sigma 1.5), unit peak,
    computed per band and averaged."""
    a, b = _paired(x, y)
    if a.shape[0] < _SSIM_WIN or a.shape[1] < _SSIM_WIN:
        raise GeometryError(
            f"image {a.shape[0]}x{a.shape[1]} smaller than the {_SSIM_WIN}x{_SSIM_WIN} window"
        )
    half = _SSIM_WIN // 2
    ax = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(ax**2) / (2.0 * _SSIM_SIGMA**2))
    window = np.outer(g, g)
    window /= window.sum()
    return float(np.mean([_ssim_band(a[:, :, c], b[:, :, c], window) for c in range(a.shape[2])]))


def sam(x, y) -> float:
    """Mean spectral angle in radians; pixels with a zero vector in either
    image are skipped."""
    a, b = _paired(x, y)
    if a.shape[2] < 2:
        raise ValidationError("spectral angle needs >= 2 bands")
    flat_a = a.reshape(-1, a.shape[2])
    flat_b = b.reshape(-1, b.shape[2])
    na = np.linalg.norm(flat_a, axis=1)
    nb = np.linalg.norm(flat_b, axis=1)
    keep = (na > 0) & (nb > 0)
    if not np.any(keep):
        raise MetricUndefinedError("spectral angle undefined: all pixel vectors are zero")
    unit_a = flat_a[keep] / na[keep, None]
    unit_b = flat_b[keep] / nb[keep, None]
    # half-angle chord form: well conditioned near zero, exact for equal
    # directions, unlike arccos of the cosine
    chord = np.linalg.norm(unit_a - unit_b, axis=1)
    return float(np.mean(2.0 * np.arcsin(np.clip(chord / 2.0, 0.0, 1.0))))


def ergas(x, y, ratio: int) -> float:
    """100/r * sqrt(mean_b(RMSE_b^2 / mean_b(y)^2)); y is the reference."""
    a, b = _paired(x, y)
    if ratio < 1:
        raise ValidationError(f"ratio must be >= 1, got {ratio}")
    means = b.reshape(-1, b.shape[2]).mean(axis=0)
    if np.any(means == 0):
        raise MetricUndefinedError("relative error undefined: a reference band has zero mean")
    mse_b = np.mean((a - b) ** 2, axis=(0, 1))
    return float(100.0 / ratio * np.sqrt(np.mean(mse_b / means**2)))


# ---------------------------------------------------------------------------
# no-reference metrics
# ---------------------------------------------------------------------------


def q_index(x: np.ndarray, y: np.ndarray, block: int = 32) -> float:
    """Universal image quality index between two single-band arrays,
    averaged over non-overlapping block x block tiles (stride = block,
    trailing partial tiles dropped, block clipped to the image size).
    Block statistics use sample (N-1) normalization; 1e-8 stabilizes both
    numerator and denominator so identical inputs always score 1."""
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(y, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise GeometryError(f"q_index needs matching 2-D arrays, got {a.shape} vs {b.shape}")
    side = min(block, a.shape[0], a.shape[1])
    if side < 2:
        raise GeometryError("q_index blocks need at least 2x2 pixels")
    scores = []
    for top in range(0, a.shape[0] - side + 1, side):
        for left in range(0, a.shape[1] - side + 1, side):
            pa = a[top : top + side, left : left + side].ravel()
            pb = b[top : top + side, left : left + side].ravel()
            n = pa.size - 1
            mu_a, mu_b = pa.mean(), pb.mean()
            da, db = pa - mu_a, pb - mu_b
            var_a = float(np.sum(da * da)) / n
            var_b = float(np.sum(db * db)) / n
            cov = float(np.sum(da * db)) / n
            # numerator mirrors the denominator term by term so identical
            # inputs land on exactly 1 despite rounding
            num = (cov + cov) * (mu_a * mu_b + mu_a * mu_b) + _Q_EPS
            den = (var_a + var_b) * (mu_a * mu_a + mu_b * mu_b) + _Q_EPS
            scores.append(num / den)
    return float(np.mean(scores))


def d_lambda(fused, lrms) -> float:
    """Spectral distortion: mean absolute gap between inter-band Q values
    of the fused product and of the low-res input (exponent 1)."""
    f = _as_array(fused, "fused")
    l = _as_array(lrms, "lrms")
    if f.shape[2] != l.shape[2]:
        raise GeometryError(f"band mismatch: fused {f.shape[2]} vs lrms {l.shape[2]}")
    c = f.shape[2]
    if c < 2:
        raise ValidationError("spectral distortion needs >= 2 bands")
    total = 0.0
    for b in range(c):
        for k in range(c):
            if b == k:
                continue
            total += abs(q_index(f[:, :, b], f[:, :, k]) - q_index(l[:, :, b], l[:, :, k]))
    return total / (c * (c - 1))


def d_s(fused, lrms, pan, kernel: np.ndarray | None = None) -> float:
    """Spatial distortion: mean absolute gap between Q(fused_b, pan) and
    Q(lrms_b, degraded pan) (exponent 1). The PAN degradation reuses the
    simulator's Gaussian blur + decimation at the ratio implied by the
    geometry."""
    f = _as_array(fused, "fused")
    l = _as_array(lrms, "lrms")
    p = _as_array(pan, "pan")
    if p.shape[2] != 1:
        raise GeometryError(f"pan must be single-band, got {p.shape[2]}")
    if f.shape[0] != p.shape[0] or f.shape[1] != p.shape[1]:
        raise GeometryError(f"fused {f.shape[:2]} does not match pan {p.shape[:2]}")
    if f.shape[0] % l.shape[0] or f.shape[1] % l.shape[1]:
        raise GeometryError(f"fused {f.shape[:2]} not an integer multiple of lrms {l.shape[:2]}")
    ratio = f.shape[0] // l.shape[0]
    if ratio < 2 or f.shape[1] // l.shape[1] != ratio:
        raise GeometryError(f"inconsistent resolution ratio between fused {f.shape[:2]} and lrms {l.shape[:2]}")
    if kernel is None:
        kernel = gaussian_kernel(2 * ratio + 1, ratio / 2.0)
    pan_low = blur_decimate(p, kernel, ratio)[:, :, 0]
    c = f.shape[2]
    total = 0.0
    for b in range(c):
        total += abs(q_index(f[:, :, b], p[:, :, 0]) - q_index(l[:, :, b], pan_low))
    return total / c


def qnr(d_lambda_value: float, d_s_value: float, alpha: float = 1.0, beta: float = 1.0) -> float:
    """(1 - D_lambda)^alpha * (1 - D_s)^beta."""
    for name, v in (("d_lambda", d_lambda_value), ("d_s", d_s_value)):
        if not 0.0 <= v <= 1.0:
            raise ValidationError(f"{name} must be in [0, 1], got {v}")
    return float((1.0 - d_lambda_value) ** alpha * (1.0 - d_s_value) ** beta)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

_METRIC_KEYS = ("psnr", "ssim", "sam", "ergas", "d_lambda", "d_s", "qnr")


@dataclass(frozen=True)
class MetricReport:
    """Per-image metric rows plus their aggregate means."""

    per_image: tuple[dict, ...]
    aggregate: dict = field(default_factory=dict)

    def __post_init__(self):
        for row in self.per_image:
            dl, ds, q = row.get("d_lambda"), row.get("d_s"), row.get("qnr")
            if dl is not None and ds is not None and q is not None:
                if abs(q - (1.0 - dl) * (1.0 - ds)) > 1e-9:
                    raise ValidationError(
                        f"inconsistent row: qnr {q} != (1-{dl})*(1-{ds})"
                    )


def build_report(rows: list[dict]) -> MetricReport:
    """Aggregate = plain mean of each metric over the rows carrying it."""
    if not rows:
        raise ValidationError("cannot build a report from zero rows")
    aggregate = {}
    for key in _METRIC_KEYS:
        values = [row[key] for row in rows if key in row and row[key] is not None]
        if values:
            aggregate[key] = float(np.mean(values))
    return MetricReport(per_image=tuple(dict(r) for r in rows), aggregate=aggregate)


def full_metric_row(fused, gt, lrms, pan, ratio: int) -> dict:
    """All seven metrics for one image; reference metrics against gt,
    no-reference metrics from (fused, lrms, pan)."""
    dl = d_lambda(fused, lrms)
    ds = d_s(fused, lrms, pan)
    return {
        "psnr": psnr(fused, gt),
        "ssim": ssim(fused, gt),
        "sam": sam(fused, gt),
        "ergas": ergas(fused, gt, ratio),
        "d_lambda": dl,
        "d_s": ds,
        "qnr": qnr(dl, ds),
    }
