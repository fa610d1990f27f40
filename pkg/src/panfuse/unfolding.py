"""K-stage unfolded fusion network.

Each stage alternates two updates derived from the variational model
"data term ||L - DK H||^2 plus prior on H": a proximal network that
refines the current estimate under PAN guidance (unet_prox), and an
explicit gradient step on the quadratic penalty (hnet_update) using the
learned degradation pair. Stage step sizes and penalty weights are kept
positive through a softplus reparameterization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .degradation import LearnedDownOp, LearnedUpOp
from .errors import GeometryError, TrainingDivergenceError, ValidationError
from .mae import ConvMAE, TokenMAE, ss_consistency_loss
from .raster import upsample_tensor
from .wald import SamplePair


def _softplus_inverse(y: float) -> float:
    return math.log(math.expm1(y))


class StageParams(nn.Module):
    """Positive per-stage step size delta2 and penalty eta."""

    def __init__(self, init: float = 0.1):
        super().__init__()
        raw = _softplus_inverse(init)
        self.raw_delta2 = nn.Parameter(torch.tensor(raw))
        self.raw_eta = nn.Parameter(torch.tensor(raw))

    @property
    def delta2(self) -> torch.Tensor:
        return F.softplus(self.raw_delta2)

    @property
    def eta(self) -> torch.Tensor:
        return F.softplus(self.raw_eta)


# ---------------------------------------------------------------------------
# spatial-frequency transformation block
# ---------------------------------------------------------------------------


def fft_amp_phase(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Orthonormal 2-D real FFT split into amplitude and phase."""
    z = torch.fft.rfft2(x, norm="ortho")
    return torch.abs(z), torch.angle(z)


def fft_from_amp_phase(amp: torch.Tensor, phase: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Inverse of fft_amp_phase for the given spatial size."""
    return torch.fft.irfft2(torch.polar(amp, phase), s=size, norm="ortho")


class SFTBlock(nn.Module):
    """Fuse encoder features with PAN features.

    A spatial conv branch and a Fourier amplitude/phase branch are merged,
    then modulated per channel by (gamma, beta) predicted from the PAN
    features. Both modulation heads start at zero, so at initialization
    gamma = 1, beta = 0 and the output ignores the PAN input.
    """

    def __init__(self, width: int):
        super().__init__()
        self.width = width
        self.spatial = nn.Sequential(
            nn.Conv2d(width, width, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, width, 3, padding=1),
        )
        self.freq = nn.Sequential(
            nn.Conv2d(2 * width, 2 * width, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(2 * width, 2 * width, 1),
        )
        self.fuse = nn.Conv2d(2 * width, width, 3, padding=1)
        self.gamma_head = nn.Conv2d(width, width, 3, padding=1)
        self.beta_head = nn.Conv2d(width, width, 3, padding=1)
        for head in (self.gamma_head, self.beta_head):
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)

    def forward(self, h_rs: torch.Tensor, f_p: torch.Tensor) -> torch.Tensor:
        if h_rs.shape[-2:] != f_p.shape[-2:]:
            raise GeometryError(
                f"feature grids differ: {tuple(h_rs.shape[-2:])} vs {tuple(f_p.shape[-2:])}"
            )
        if h_rs.shape[1] != self.width or f_p.shape[1] != self.width:
            raise GeometryError(f"expected {self.width}-channel features")
        spatial = self.spatial(h_rs)
        amp, phase = fft_amp_phase(h_rs)
        ap = self.freq(torch.cat([amp, phase], dim=1))
        amp2, phase2 = ap.chunk(2, dim=1)
        freq = fft_from_amp_phase(amp2, phase2, h_rs.shape[-2:])
        fused = self.fuse(torch.cat([spatial, freq], dim=1))
        gamma = 1.0 + self.gamma_head(f_p)
        beta = self.beta_head(f_p)
        return fused * gamma + beta


class _ProxDecoder(nn.Module):
    """Small encoder-decoder head mapping fused features to a residual.

    The output conv is zero-initialized, so the proximal update starts out
    as the identity. Odd feature grids are reflect-padded to even before
    the strided level and cropped back after.
    """

    def __init__(self, width: int, channels: int):
        super().__init__()
        self.keep = nn.Sequential(
            nn.Conv2d(width, width, 3, padding=1), nn.ReLU(inplace=True)
        )
        self.down = nn.Sequential(
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(2 * width, 2 * width, 3, padding=1),
            nn.ReLU(inplace=True),
        )
        self.up = nn.ConvTranspose2d(2 * width, width, 2, stride=2)
        self.out = nn.Conv2d(2 * width, channels, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        pad_h, pad_w = h % 2, w % 2
        if pad_h or pad_w:
            x = F.pad(x, (0, pad_w, 0, pad_h), mode="reflect")
        skip = self.keep(x)
        deep = self.up(self.down(skip))
        out = self.out(torch.cat([skip, deep], dim=1))
        return out[:, :, :h, :w]


# ---------------------------------------------------------------------------
# the unfolded model
# ---------------------------------------------------------------------------


class UnfoldingModel(nn.Module):
    def __init__(
        self,
        channels: int,
        ratio: int,
        stages: int = 4,
        width: int = 32,
        encoder: ConvMAE | None = None,
        share_stage_weights: bool = False,
        share_degradation_ops: bool = True,
        freeze_encoder: bool = False,
    ):
        super().__init__()
        if not 0 <= stages <= 6:
            raise ValidationError(f"stage count must be in 0..6, got {stages}")
        if ratio < 2:
            raise ValidationError(f"ratio must be >= 2, got {ratio}")
        if encoder is not None and (encoder.channels != channels or encoder.width != width):
            raise GeometryError(
                f"encoder built for {encoder.channels} channels / width {encoder.width}, "
                f"model wants {channels} / {width}"
            )
        self.channels = channels
        self.ratio = ratio
        self.stages = stages
        self.width = width
        self.share_stage_weights = share_stage_weights
        self.share_degradation_ops = share_degradation_ops

        self.encoder = encoder if encoder is not None else ConvMAE(channels, width)
        if freeze_encoder:
            for p in self.encoder.parameters():
                p.requires_grad_(False)
        self.pan_conv = nn.Conv2d(1, width, 3, padding=1, bias=False)

        n_blocks = 1 if (share_stage_weights and stages > 0) else stages
        self.sft_blocks = nn.ModuleList(SFTBlock(width) for _ in range(n_blocks))
        self.prox_decoders = nn.ModuleList(_ProxDecoder(width, channels) for _ in range(n_blocks))
        n_ops = 1 if (share_degradation_ops or stages == 0) else max(stages, 1)
        self.down_ops = nn.ModuleList(LearnedDownOp(channels, ratio) for _ in range(n_ops))
        self.up_ops = nn.ModuleList(LearnedUpOp(channels, ratio) for _ in range(n_ops))
        self.stage_params = nn.ModuleList(StageParams() for _ in range(stages))

    # --- per-stage component lookup ---

    def _block_index(self, k: int) -> int:
        if not 0 <= k < max(self.stages, 1):
            raise ValidationError(f"stage index {k} out of range for K={self.stages}")
        return 0 if self.share_stage_weights else k

    def _op_index(self, k: int) -> int:
        return 0 if self.share_degradation_ops else k

    # --- operations ---

    def pan_shallow_features(self, pan: torch.Tensor) -> torch.Tensor:
        if pan.ndim != 4 or pan.shape[1] != 1:
            raise GeometryError(f"PAN must be (B, 1, H, W), got shape {tuple(pan.shape)}")
        return self.pan_conv(pan)

    def unet_prox(self, h: torch.Tensor, pan_feats: torch.Tensor, k: int) -> torch.Tensor:
        if h.ndim != 4 or h.shape[1] != self.channels:
            raise GeometryError(f"expected (B, {self.channels}, M, N), got {tuple(h.shape)}")
        if h.shape[-2:] != pan_feats.shape[-2:]:
            raise GeometryError(
                f"estimate grid {tuple(h.shape[-2:])} does not match PAN grid "
                f"{tuple(pan_feats.shape[-2:])}"
            )
        i = self._block_index(k)
        fused = self.sft_blocks[i](self.encoder.encode(h), pan_feats)
        return h + self.prox_decoders[i](fused)

    def hnet_update(self, h: torch.Tensor, u: torch.Tensor, low: torch.Tensor, k: int) -> torch.Tensor:
        params = self.stage_params[k]
        i = self._op_index(k)
        return hnet_gradient_step(
            h, u, low, params.delta2, params.eta, self.down_ops[i], self.up_ops[i]
        )

    def forward(self, low: torch.Tensor, pan: torch.Tensor) -> torch.Tensor:
        if low.ndim != 4 or pan.ndim != 4:
            raise GeometryError("inputs must be (B, C, h, w) and (B, 1, H, W)")
        if low.shape[1] != self.channels:
            raise GeometryError(f"model expects {self.channels} bands, got {low.shape[1]}")
        if pan.shape[1] != 1:
            raise GeometryError(f"PAN must be single-band, got {pan.shape[1]}")
        if (
            pan.shape[0] != low.shape[0]
            or pan.shape[2] != self.ratio * low.shape[2]
            or pan.shape[3] != self.ratio * low.shape[3]
        ):
            raise GeometryError(
                f"PAN grid {tuple(pan.shape[2:])} is not {self.ratio}x the "
                f"low-res grid {tuple(low.shape[2:])}"
            )
        h = upsample_tensor(low, self.ratio)
        if self.stages > 0:
            pan_feats = self.pan_shallow_features(pan)
            for k in range(self.stages):
                u = self.unet_prox(h, pan_feats, k)
                h = self.hnet_update(h, u, low, k)
        if not self.training:
            h = h.clamp(0.0, 1.0)
        return h


def hnet_gradient_step(h, u, low, delta2, eta, down, up):
    """H - delta2 * [ up(down(H) - L) + eta * (H - U) ].

    down/up may be the model's learned operators or any callable pair
    (e.g. the analytic degradation oracle)."""
    if h.shape != u.shape:
        raise GeometryError(f"estimate/prox shapes differ: {tuple(h.shape)} vs {tuple(u.shape)}")
    resid = down(h) - low
    return h - delta2 * (up(resid) + eta * (h - u))


# --- free-function entry points matching the operation names ---


def pan_shallow_features(model: UnfoldingModel, pan: torch.Tensor) -> torch.Tensor:
    return model.pan_shallow_features(pan)


def sft_fuse(block: SFTBlock, h_rs: torch.Tensor, f_p: torch.Tensor) -> torch.Tensor:
    return block(h_rs, f_p)


def unet_prox(model: UnfoldingModel, h: torch.Tensor, pan: torch.Tensor, k: int) -> torch.Tensor:
    return model.unet_prox(h, model.pan_shallow_features(pan), k)


def hnet_update(model: UnfoldingModel, h, u, low, k: int) -> torch.Tensor:
    return model.hnet_update(h, u, low, k)


# ---------------------------------------------------------------------------
# losses and the training step
# ---------------------------------------------------------------------------


def _batch_tensors(batch) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    if isinstance(batch, (tuple, list)) and batch and isinstance(batch[0], SamplePair):
        from .raster import to_tensor

        low = torch.cat([to_tensor(p.lrms) for p in batch])
        pan = torch.cat([to_tensor(p.pan) for p in batch])
        gt = torch.cat([to_tensor(p.gt) for p in batch])
        return low, pan, gt
    if isinstance(batch, (tuple, list)) and len(batch) == 3 and isinstance(batch[0], torch.Tensor):
        return batch[0], batch[1], batch[2]
    raise ValidationError("batch must be a non-empty list of SamplePairs or an (L, P, GT) tensor triple")


def image_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Per-pixel mean absolute error."""
    if pred.shape != gt.shape:
        raise GeometryError(f"shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
    return torch.abs(pred - gt).mean()


def total_loss(
    model: UnfoldingModel,
    batch,
    e_mae: TokenMAE | None,
    lambda_ss: float = 1.0,
) -> torch.Tensor:
    """image L1 + lambda * encoder-feature L1. lambda_ss = 0 or e_mae = None
    drops the feature term (ablation mode)."""
    low, pan, gt = _batch_tensors(batch)
    if low.shape[0] == 0:
        raise ValidationError("empty batch")
    pred = model(low, pan)
    loss = image_loss(pred, gt)
    if e_mae is not None and lambda_ss != 0.0:
        loss = loss + lambda_ss * ss_consistency_loss(e_mae, pred, gt)
    return loss


@dataclass
class TrainState:
    """Optimizer plus schedule bookkeeping for the unfolding model."""

    optimizer: torch.optim.Optimizer
    base_lr: float
    decay_epoch: int
    epoch: int = 1
    step: int = 0
    last_loss: float = field(default=float("nan"))

    def lr_factor(self) -> float:
        return 0.5 if self.epoch > self.decay_epoch else 1.0


def make_train_state(
    model: UnfoldingModel,
    lr: float = 5e-4,
    decay_epoch: int = 200,
    encoder_lr_scale: float = 0.1,
) -> TrainState:
    """Adam over the model with the pretrained encoder on a scaled-down
    learning rate (fine-tuning); frozen parameters are excluded."""
    encoder_ids = {id(p) for p in model.encoder.parameters()}
    enc, rest = [], []
    for p in model.parameters():
        if not p.requires_grad:
            continue
        (enc if id(p) in encoder_ids else rest).append(p)
    groups = [{"params": rest, "lr_scale": 1.0}]
    if enc:
        groups.append({"params": enc, "lr_scale": encoder_lr_scale})
    optimizer = torch.optim.Adam(groups, lr=lr)
    return TrainState(optimizer=optimizer, base_lr=lr, decay_epoch=decay_epoch)


def train_step(
    model: UnfoldingModel,
    batch,
    state: TrainState,
    e_mae: TokenMAE | None = None,
    lambda_ss: float = 1.0,
) -> tuple[float, TrainState]:
    """One Adam step on total_loss under the stepped learning-rate schedule."""
    factor = state.lr_factor()
    for group in state.optimizer.param_groups:
        group["lr"] = state.base_lr * group.get("lr_scale", 1.0) * factor
    model.train()
    loss = total_loss(model, batch, e_mae, lambda_ss)
    value = float(loss.detach())
    if not np.isfinite(value):
        raise TrainingDivergenceError(
            f"non-finite training loss at step {state.step}",
            diagnostics={
                "step": state.step,
                "epoch": state.epoch,
                "loss": value,
                "lr": state.base_lr * factor,
                "last_loss": state.last_loss,
            },
        )
    if loss.requires_grad:  # K = 0 or fully frozen models have nothing to fit
        state.optimizer.zero_grad()
        loss.backward()
        state.optimizer.step()
    state.step += 1
    state.last_loss = value
    return value, state
