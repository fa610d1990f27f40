"""Resolution-change operators used inside the unfolded network.

LearnedDownOp plays the role of the blur-plus-decimation operator, and
LearnedUpOp its learned transpose. Both are bias-free so they stay exactly
linear. FixedDegradeOracle is the analytic counterpart: the simulator's
Gaussian kernel with stride decimation and its exact mathematical adjoint,
kept around as a reference for gradient and fixed-point tests.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import GeometryError
from .wald import gaussian_kernel


def _check_divisible(x: torch.Tensor, s: int) -> None:
    if x.ndim != 4:
        raise GeometryError(f"expected (B, C, H, W), got shape {tuple(x.shape)}")
    if x.shape[2] % s or x.shape[3] % s:
        raise GeometryError(
            f"spatial dims {x.shape[2]}x{x.shape[3]} not divisible by stride {s}"
        )


class LearnedDownOp(nn.Module):
    """3x3 shape-preserving conv followed by an s-stride sxs conv.

    Starts out as plain sxs average pooling (identity 3x3, uniform sxs taps)
    so constants survive the operator before any training.
    """

    def __init__(self, channels: int, ratio: int):
        super().__init__()
        self.ratio = ratio
        self.shape_conv = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.stride_conv = nn.Conv2d(channels, channels, ratio, stride=ratio, bias=False)
        nn.init.dirac_(self.shape_conv.weight)
        with torch.no_grad():
            w = torch.zeros_like(self.stride_conv.weight)
            for c in range(channels):
                w[c, c] = 1.0 / (ratio * ratio)
            self.stride_conv.weight.copy_(w)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_divisible(x, self.ratio)
        return self.stride_conv(self.shape_conv(x))


class LearnedUpOp(nn.Module):
    """s-stride transposed conv followed by a 3x3 shape-preserving conv.

    Starts out as nearest-neighbour upsampling so constants survive; the
    weights are independent of any LearnedDownOp.
    """

    def __init__(self, channels: int, ratio: int):
        super().__init__()
        self.ratio = ratio
        self.stride_deconv = nn.ConvTranspose2d(channels, channels, ratio, stride=ratio, bias=False)
        self.shape_conv = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        nn.init.dirac_(self.shape_conv.weight)
        with torch.no_grad():
            w = torch.zeros_like(self.stride_deconv.weight)  # (C_in, C_out, s, s)
            for c in range(channels):
                w[c, c] = 1.0
            self.stride_deconv.weight.copy_(w)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4:
            raise GeometryError(f"expected (B, C, H, W), got shape {tuple(x.shape)}")
        return self.shape_conv(self.stride_deconv(x))


def down_apply(op: LearnedDownOp, x: torch.Tensor) -> torch.Tensor:
    """(B, C, M, N) -> (B, C, M/s, N/s); differentiable in input and weights."""
    return op(x)


def up_apply(op: LearnedUpOp, x: torch.Tensor) -> torch.Tensor:
    """(B, C, M/s, N/s) -> (B, C, M, N); differentiable in input and weights."""
    return op(x)


class FixedDegradeOracle:
    """Gaussian blur (circular boundary) + stride-s decimation, with its
    exact adjoint: zero-stuffing followed by correlation with the flipped
    kernel. ⟨Ax, y⟩ == ⟨x, Aᵀy⟩ holds to rounding error."""

    def __init__(self, ratio: int, kernel: np.ndarray | None = None):
        if kernel is None:
            kernel = gaussian_kernel(2 * ratio + 1, ratio / 2.0)
        self.ratio = ratio
        self.kernel = np.asarray(kernel, dtype=np.float64)
        if self.kernel.ndim != 2 or self.kernel.shape[0] % 2 == 0 or self.kernel.shape[1] % 2 == 0:
            raise GeometryError(f"kernel must be odd-sided 2-D, got {self.kernel.shape}")

    def _correlate(self, x: torch.Tensor, kernel: np.ndarray) -> torch.Tensor:
        c = x.shape[1]
        kh, kw = kernel.shape
        weight = torch.as_tensor(kernel, dtype=x.dtype, device=x.device)
        weight = weight.expand(c, 1, kh, kw).contiguous()
        padded = F.pad(x, (kw // 2, kw // 2, kh // 2, kh // 2), mode="circular")
        return F.conv2d(padded, weight, groups=c)

    def apply(self, x: torch.Tensor) -> torch.Tensor:
        _check_divisible(x, self.ratio)
        blurred = self._correlate(x, self.kernel)
        return blurred[:, :, :: self.ratio, :: self.ratio]

    def adjoint(self, y: torch.Tensor) -> torch.Tensor:
        if y.ndim != 4:
            raise GeometryError(f"expected (B, C, h, w), got shape {tuple(y.shape)}")
        r = self.ratio
        full = y.new_zeros((y.shape[0], y.shape[1], y.shape[2] * r, y.shape[3] * r))
        full[:, :, ::r, ::r] = y
        return self._correlate(full, self.kernel[::-1, ::-1].copy())


def _as_batch(x: np.ndarray) -> torch.Tensor:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).unsqueeze(0)


def oracle_apply(oracle: FixedDegradeOracle, x) -> np.ndarray | torch.Tensor:
    """Apply the fixed operator; numpy (H, W, C) in -> numpy out, torch in -> torch out."""
    if isinstance(x, torch.Tensor):
        return oracle.apply(x)
    out = oracle.apply(_as_batch(x))
    return out[0].numpy().transpose(1, 2, 0)


def oracle_adjoint(oracle: FixedDegradeOracle, y) -> np.ndarray | torch.Tensor:
    """Apply the exact adjoint; same array conventions as oracle_apply."""
    if isinstance(y, torch.Tensor):
        return oracle.adjoint(y)
    out = oracle.adjoint(_as_batch(y))
    return out[0].numpy().transpose(1, 2, 0)
