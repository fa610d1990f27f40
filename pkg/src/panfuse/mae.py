"""Masked-autoencoder priors.

ConvMAE is a pure-convolution autoencoder pretrained on spatially masked
whole images; its encoder later conditions the proximal network. TokenMAE
is a plain token transformer over a joint spatial-spectral token lattice;
its frozen encoder defines a feature-consistency loss. Neither model uses
any attention factorization or hierarchy: the lattice embedding is the only
structure-aware part of TokenMAE.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .errors import GeometryError, ValidationError
from .masking import (
    SpatialMaskSpec,
    SpatialSpectralMaskSpec,
    apply_spatial_mask,
    make_spatial_mask,
    make_spatial_spectral_mask,
)
from .raster import MSImage, to_tensor


def _batch_tensor(batch) -> torch.Tensor:
    """List of MSImage (same shape) or a ready (B, C, H, W) tensor."""
    if isinstance(batch, torch.Tensor):
        if batch.ndim != 4:
            raise GeometryError(f"expected (B, C, H, W), got shape {tuple(batch.shape)}")
        if batch.shape[0] == 0:
            raise ValidationError("empty batch")
        return batch
    if not batch:
        raise ValidationError("empty batch")
    tensors = [to_tensor(img) if isinstance(img, MSImage) else to_tensor(np.asarray(img)) for img in batch]
    shapes = {tuple(t.shape) for t in tensors}
    if len(shapes) != 1:
        raise GeometryError(f"batch mixes shapes: {sorted(shapes)}")
    return torch.cat(tensors, dim=0)


# ---------------------------------------------------------------------------
# stage 1: convolutional MAE on spatially masked whole images
# ---------------------------------------------------------------------------


class ConvMAE(nn.Module):
    """Whole-image conv autoencoder; masked cells are filled with a learned
    per-channel token so the encoder always sees a full-size image."""

    def __init__(self, channels: int, width: int = 32, enc_blocks: int = 4, dec_blocks: int = 2):
        super().__init__()
        self.channels = channels
        self.width = width
        enc = []
        c_in = channels
        for _ in range(enc_blocks):
            enc += [nn.Conv2d(c_in, width, 3, padding=1), nn.ReLU(inplace=True)]
            c_in = width
        self.encoder = nn.Sequential(*enc)
        dec = []
        for i in range(dec_blocks):
            last = i == dec_blocks - 1
            dec.append(nn.Conv2d(width, channels if last else width, 3, padding=1))
            if not last:
                dec.append(nn.ReLU(inplace=True))
        self.decoder = nn.Sequential(*dec)
        self.mask_token = nn.Parameter(torch.full((channels,), 0.5))

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4:
            raise GeometryError(f"expected (B, C, H, W), got shape {tuple(x.shape)}")
        if x.shape[1] != self.channels:
            raise GeometryError(f"encoder expects {self.channels} channels, got {x.shape[1]}")
        return self.encoder(x)

    def forward(self, x: torch.Tensor, spec: SpatialMaskSpec) -> torch.Tensor:
        masked = apply_spatial_mask(x, spec, self.mask_token)
        return self.decoder(self.encode(masked))


def cmae_encode(model: ConvMAE, x: torch.Tensor) -> torch.Tensor:
    """Whole-image features, (B, C, M, N) -> (B, F, M, N)."""
    return model.encode(x)


def conv_mae_pretrain_step(
    model: ConvMAE,
    batch,
    optimizer: torch.optim.Optimizer,
    patch_side: int,
    mask_ratio: float,
    seed: int,
) -> float:
    """One masked-reconstruction step; the loss scores masked cells only."""
    if mask_ratio <= 0.0:
        raise ValidationError("pretraining needs mask_ratio > 0: nothing is scored otherwise")
    x = _batch_tensor(batch)
    b, _, h, w = x.shape
    losses = []
    for i in range(b):
        spec = make_spatial_mask(h, w, patch_side, mask_ratio, seed * 10007 + i)
        recon = model(x[i : i + 1], spec)
        losses.append(masked_cell_l1(recon, x[i : i + 1], spec))
    loss = torch.stack(losses).mean()
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def masked_cell_l1(recon: torch.Tensor, target: torch.Tensor, spec: SpatialMaskSpec) -> torch.Tensor:
    """Mean absolute error over masked cells only (all channels)."""
    if recon.shape != target.shape:
        raise GeometryError(f"shape mismatch {tuple(recon.shape)} vs {tuple(target.shape)}")
    mask = torch.from_numpy(spec.pixel_mask()).to(recon.dtype)
    denom = mask.sum() * recon.shape[1]
    if denom.item() == 0:
        raise ValidationError("mask has no masked cells to score")
    return (torch.abs(recon - target) * mask.view(1, 1, *mask.shape)).sum() / denom


# ---------------------------------------------------------------------------
# stage 2: token MAE on the joint spatial-spectral lattice
# ---------------------------------------------------------------------------


class TokenMAE(nn.Module):
    """Vanilla token transformer over (spatial cell, band group) tokens.

    Fixed input geometry: the learned position table is tied to the
    (height, width, channels) the model was built for.
    """

    def __init__(
        self,
        height: int,
        width: int,
        channels: int,
        patch_side: int = 16,
        band_group: int = 2,
        embed_dim: int = 128,
        enc_layers: int = 4,
        dec_layers: int = 2,
        heads: int = 4,
    ):
        super().__init__()
        if height % patch_side or width % patch_side:
            raise GeometryError(f"dims {height}x{width} not divisible by patch {patch_side}")
        if channels % band_group:
            raise GeometryError(f"{channels} channels not divisible by band group {band_group}")
        self.geometry = (height, width, channels)
        self.patch_side = patch_side
        self.band_group = band_group
        self.embed_dim = embed_dim
        self.grid = (height // patch_side, width // patch_side)
        self.n_groups = channels // band_group
        self.n_tokens = self.grid[0] * self.grid[1] * self.n_groups
        token_dim = patch_side * patch_side * band_group

        self.embed = nn.Linear(token_dim, embed_dim)
        self.pos_enc = nn.Parameter(torch.zeros(1, self.n_tokens, embed_dim))
        self.pos_dec = nn.Parameter(torch.zeros(1, self.n_tokens, embed_dim))
        nn.init.normal_(self.pos_enc, std=0.02)
        nn.init.normal_(self.pos_dec, std=0.02)
        self.mask_token = nn.Parameter(torch.zeros(embed_dim))

        def layer():
            return nn.TransformerEncoderLayer(
                d_model=embed_dim,
                nhead=heads,
                dim_feedforward=2 * embed_dim,
                dropout=0.0,
                activation="gelu",
                batch_first=True,
                norm_first=True,
            )

        self.enc_layers = nn.ModuleList([layer() for _ in range(enc_layers)])
        self.enc_norm = nn.LayerNorm(embed_dim)
        self.dec_embed = nn.Linear(embed_dim, embed_dim)
        self.dec_layers = nn.ModuleList([layer() for _ in range(dec_layers)])
        self.dec_norm = nn.LayerNorm(embed_dim)
        self.head = nn.Linear(embed_dim, token_dim)

    # --- token lattice <-> pixels ---

    def tokenize(self, x: torch.Tensor) -> torch.Tensor:
        """(B, C, H, W) -> (B, T, p*p*g), token id = cell * n_groups + group."""
        h, w, c = self.geometry
        if x.ndim != 4 or x.shape[1] != c or x.shape[2] != h or x.shape[3] != w:
            raise GeometryError(
                f"model built for ({c}, {h}, {w}), got input shape {tuple(x.shape)}"
            )
        b = x.shape[0]
        p, g = self.patch_side, self.band_group
        gh, gw = self.grid
        t = x.reshape(b, self.n_groups, g, gh, p, gw, p)
        t = t.permute(0, 3, 5, 1, 2, 4, 6)  # (B, gh, gw, G, g, p, p)
        return t.reshape(b, self.n_tokens, g * p * p)

    def untokenize(self, tokens: torch.Tensor) -> torch.Tensor:
        h, w, c = self.geometry
        b = tokens.shape[0]
        p, g = self.patch_side, self.band_group
        gh, gw = self.grid
        t = tokens.reshape(b, gh, gw, self.n_groups, g, p, p)
        t = t.permute(0, 3, 4, 1, 5, 2, 6)
        return t.reshape(b, c, h, w)

    # --- encoder / decoder ---

    def encode_tokens(self, tokens: torch.Tensor, visible: tuple[int, ...] | None = None) -> torch.Tensor:
        """Embed + position, keep visible tokens only, run the encoder."""
        z = self.embed(tokens) + self.pos_enc
        if visible is not None:
            idx = torch.as_tensor(visible, dtype=torch.long, device=z.device)
            z = z.index_select(1, idx)
        for layer in self.enc_layers:
            z = layer(z)
        return self.enc_norm(z)

    def forward(self, x: torch.Tensor, spec: SpatialSpectralMaskSpec) -> torch.Tensor:
        """Masked reconstruction, back on the pixel grid."""
        if (spec.height, spec.width, spec.channels) != self.geometry or (
            spec.patch_side != self.patch_side or spec.band_group != self.band_group
        ):
            raise GeometryError("mask spec does not match model lattice")
        tokens = self.tokenize(x)
        visible = spec.visible
        z = self.encode_tokens(tokens, visible)
        z = self.dec_embed(z)
        full = self.mask_token.expand(z.shape[0], self.n_tokens, self.embed_dim).clone()
        idx = torch.as_tensor(visible, dtype=torch.long, device=z.device)
        full = full.index_copy(1, idx, z)
        full = full + self.pos_dec
        for layer in self.dec_layers:
            full = layer(full)
        return self.untokenize(self.head(self.dec_norm(full)))


def token_encode(model: TokenMAE, x: torch.Tensor) -> torch.Tensor:
    """Unmasked encoder features over the full lattice, (B, T, D)."""
    return model.encode_tokens(model.tokenize(x), visible=None)


def token_mae_pretrain_step(
    model: TokenMAE,
    batch,
    optimizer: torch.optim.Optimizer,
    mask_ratio: float,
    seed: int,
) -> float:
    """One masked-reconstruction step over the token lattice; the loss
    scores masked tokens only."""
    if mask_ratio <= 0.0:
        raise ValidationError("pretraining needs mask_ratio > 0: nothing is scored otherwise")
    x = _batch_tensor(batch)
    h, w, c = model.geometry
    losses = []
    for i in range(x.shape[0]):
        spec = make_spatial_spectral_mask(
            h, w, c, model.patch_side, model.band_group, mask_ratio, seed * 10007 + i
        )
        recon = model(x[i : i + 1], spec)
        losses.append(masked_token_l1(model, recon, x[i : i + 1], spec))
    loss = torch.stack(losses).mean()
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def masked_token_l1(
    model: TokenMAE, recon: torch.Tensor, target: torch.Tensor, spec: SpatialSpectralMaskSpec
) -> torch.Tensor:
    """Mean absolute error over masked tokens only, in pixel space."""
    if recon.shape != target.shape:
        raise GeometryError(f"shape mismatch {tuple(recon.shape)} vs {tuple(target.shape)}")
    if not spec.masked:
        raise ValidationError("mask has no masked tokens to score")
    got = model.tokenize(recon)
    want = model.tokenize(target)
    idx = torch.as_tensor(spec.masked, dtype=torch.long, device=got.device)
    return torch.abs(got.index_select(1, idx) - want.index_select(1, idx)).mean()


def ss_consistency_loss(model: TokenMAE, pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference between encoder features of pred and gt.

    The encoder is used as a fixed feature map: gradients flow into pred,
    never into the encoder weights (callers keep them out of the optimizer).
    """
    if pred.shape != gt.shape:
        raise GeometryError(f"shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
    # both sides must take the same kernel path (no_grad flips the fused
    # transformer path) so that pred == gt gives exactly zero
    feats_pred = token_encode(model, pred)
    feats_gt = token_encode(model, gt.detach())
    return torch.abs(feats_pred - feats_gt).mean()
