"""Pixel-space autoencoder: visual encoder and decoder around a spatial latent grid.

The latent is deterministic (no KL term, no codebook).  Training minimises
L1 reconstruction plus an L1 penalty on finite-difference image gradients,
which keeps edges crisp.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from . import numerics as nx
from .errors import DimensionError, TrainingDiverged


@dataclass
class AEConfig:
    in_channels: int = 1
    latent_channels: int = 4
    downsample: int = 4
    widths: tuple[int, ...] = (16, 32, 64)
    groups: int = 8
    padding_mode: str = "zeros"
    edge_weight: float = 0.5


@dataclass
class LatentGrid:
    values: torch.Tensor  # [c, h, w]
    downsample_factor: int

    @property
    def shape(self):
        return tuple(self.values.shape)


def latent_values(z) -> torch.Tensor:
    return z.values if isinstance(z, LatentGrid) else z


class _Block(nn.Module):
    def __init__(self, cin, cout, stride, groups, padding_mode):
        super().__init__()
        self.conv = nx.Conv2d(cin, cout, 3, stride=stride, padding_mode=padding_mode)
        self.norm = nx.GroupNorm(groups, cout)

    def forward(self, x):
        return nx.silu(self.norm(self.conv(x)))


class AutoEncoder(nn.Module):
    """Conv blocks down to ``[c, H/f, W/f]`` and a mirrored upsampling decoder.

    With ``f = 2**k`` the encoder is one full-resolution block followed by
    ``k`` stride-2 blocks; the decoder mirrors it with nearest upsampling.
    """

    def __init__(self, cfg: AEConfig | None = None):
        super().__init__()
        cfg = cfg or AEConfig()
        self.cfg = cfg
        k = int(round(math.log2(cfg.downsample)))
        if 2 ** k != cfg.downsample or len(cfg.widths) != k + 1:
            raise DimensionError(f"downsample {cfg.downsample} needs {k + 1} widths, got {cfg.widths}")
        w, g, pm = cfg.widths, cfg.groups, cfg.padding_mode
        self.enc = nn.ModuleList([_Block(cfg.in_channels, w[0], 1, g, pm)] +
                                 [_Block(w[i], w[i + 1], 2, g, pm) for i in range(k)])
        self.enc_out = nx.Conv2d(w[-1], cfg.latent_channels, 1)
        self.dec_in = _Block(cfg.latent_channels, w[-1], 1, g, pm)
        self.dec = nn.ModuleList([_Block(w[i + 1], w[i], 1, g, pm) for i in reversed(range(k))])
        self.dec_out = nx.Conv2d(w[0], cfg.in_channels, 3, padding_mode=pm)
        # multiplies raw latents so downstream diffusion sees roughly unit variance
        self.register_buffer("latent_scale", torch.ones(()))

    @property
    def factor(self) -> int:
        return self.cfg.downsample

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """[N,1,H,W] -> [N,c,H/f,W/f] (scaled latents)."""
        f = self.factor
        if x.dim() != 4 or x.shape[-1] % f or x.shape[-2] % f:
            raise DimensionError(f"encode: {tuple(x.shape)} not divisible by factor {f}")
        h = x
        for blk in self.enc:
            h = blk(h)
        return self.enc_out(h) * self.latent_scale

    def decode_raw(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() != 4 or z.shape[1] != self.cfg.latent_channels:
            raise DimensionError(f"decode: latent shape {tuple(z.shape)} "
                                 f"incompatible with {self.cfg.latent_channels} channels")
        h = self.dec_in(z / self.latent_scale)
        for blk in self.dec:
            h = blk(nx.upsample(h, 2))
        return self.dec_out(h)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.decode_raw(z).clamp(0.0, 1.0)

    def forward(self, x):
        return self.decode_raw(self.encode(x))


def encode(ae: AutoEncoder, image: torch.Tensor) -> LatentGrid:
    """Single image [1,H,W] -> LatentGrid [c,H/f,W/f]."""
    if image.dim() != 3:
        raise DimensionError(f"encode expects [1,H,W], got {tuple(image.shape)}")
    with torch.no_grad():
        z = ae.encode(image[None])[0]
    return LatentGrid(z, ae.factor)


def decode(ae: AutoEncoder, latent: LatentGrid | torch.Tensor) -> torch.Tensor:
    z = latent_values(latent)
    with torch.no_grad():
        return ae.decode(z[None])[0]


def image_gradients(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    return x[..., :, 1:] - x[..., :, :-1], x[..., 1:, :] - x[..., :-1, :]


def ae_loss(x: torch.Tensor, x_hat: torch.Tensor, edge_weight: float = 0.5) -> dict[str, torch.Tensor]:
    l1 = (x - x_hat).abs().mean()
    gx, gy = image_gradients(x)
    hx, hy = image_gradients(x_hat)
    edge = 0.5 * ((gx - hx).abs().mean() + (gy - hy).abs().mean())
    return {"loss": l1 + edge_weight * edge, "l1": l1, "edge": edge}


def ae_train_step(ae: nn.Module, images: torch.Tensor, opt: nx.Adam,
                  edge_weight: float = 0.5) -> dict[str, float]:
    if images.shape[0] == 0:
        raise DimensionError("ae_train_step: empty batch")
    opt.zero_grad()
    terms = ae_loss(images, ae(images), edge_weight)
    if not torch.isfinite(terms["loss"]):
        raise TrainingDiverged(f"autoencoder loss became {terms['loss'].item()}")
    nx.backward(terms["loss"])
    opt.step()
    return {k: v.item() for k, v in terms.items()}


@torch.no_grad()
def calibrate_latent_scale(ae: AutoEncoder, images: torch.Tensor) -> float:
    """Set ``latent_scale`` so encoded training latents have unit standard deviation."""
    ae.latent_scale.fill_(1.0)
    z = torch.cat([ae.encode(images[i:i + 64]) for i in range(0, len(images), 64)])
    scale = 1.0 / max(float(z.std()), 1e-6)
    ae.latent_scale.fill_(scale)
    return scale


@torch.no_grad()
def reconstruction_l1(ae: AutoEncoder, images: torch.Tensor) -> float:
    err = [(ae.decode(ae.encode(images[i:i + 64])) - images[i:i + 64]).abs().sum()
           for i in range(0, len(images), 64)]
    return float(sum(err)) / images.numel()
