"""Latent DDPM: noise schedule, age-conditioned U-Net, source fusion, sampler."""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import torch
from torch import nn

from . import numerics as nx
from .autoenc import latent_values
from .errors import DimensionError, DomainError, TrainingDiverged


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------

@dataclass
class NoiseSchedule:
    T: int
    beta: torch.Tensor       # [T], beta[t-1] is the variance added at step t
    alpha_bar: torch.Tensor  # [T+1], alpha_bar[0] = 1

    def check_t(self, t):
        tt = torch.as_tensor(t)
        if bool(((tt < 0) | (tt > self.T)).any()):
            raise DomainError(f"timestep {t} outside [0, {self.T}]")
        return tt


def make_schedule(T: int = 200, beta_start: float | None = None,
                  beta_end: float | None = None) -> NoiseSchedule:
    """Linear beta ramp.

    Without explicit endpoints the classic 1e-4 .. 0.02 range (defined for
    1000 steps) is rescaled by 1000/T so the chain still ends near pure noise
    (the end point is capped at 0.5 for very short chains).
    """
    if T < 1:
        raise DomainError("T must be >= 1")
    scale = 1000.0 / T
    beta_start = 1e-4 * scale if beta_start is None else beta_start
    beta_end = min(0.02 * scale, 0.5) if beta_end is None else beta_end
    if not (0 < beta_start <= beta_end < 1):
        raise DomainError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alpha_bar = torch.cat([torch.ones(1, dtype=torch.float64), torch.cumprod(1.0 - beta, 0)])
    return NoiseSchedule(T, beta, alpha_bar)


def _bcast(v: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    v = v.to(like.dtype)
    return v.reshape(v.shape + (1,) * (like.dim() - v.dim()))


def q_sample(z0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps; ``t`` scalar or per-sample [N]."""
    z0 = latent_values(z0)
    if eps.shape != z0.shape:
        raise DimensionError(f"q_sample: noise {tuple(eps.shape)} vs latent {tuple(z0.shape)}")
    tt = schedule.check_t(t)
    ab = schedule.alpha_bar[tt]
    return _bcast(ab.sqrt(), z0) * z0 + _bcast((1.0 - ab).sqrt(), z0) * eps


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

@dataclass
class DenoiserConfig:
    latent_channels: int = 4
    latent_size: int = 16
    base_channels: int = 32
    channel_multipliers: tuple[int, ...] = (1, 2)
    attention_resolutions: tuple[int, ...] = (16, 8)
    hidden_dim: int = 64      # width of the age embedding (cross-attention context)
    time_embed_dim: int = 64
    groups: int = 8

    def level_channels(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_multipliers]

    def level_sizes(self) -> list[int]:
        return [self.latent_size // 2 ** i for i in range(len(self.channel_multipliers))]


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.to(torch.float32)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, temb_dim, groups):
        super().__init__()
        self.norm1 = nx.GroupNorm(groups, cin)
        self.conv1 = nx.Conv2d(cin, cout, 3)
        self.temb = nx.Linear(temb_dim, cout)
        self.norm2 = nx.GroupNorm(groups, cout)
        self.conv2 = nx.Conv2d(cout, cout, 3)
        self.skip = nx.Conv2d(cin, cout, 1) if cin != cout else None

    def forward(self, x, temb):
        h = self.conv1(nx.silu(self.norm1(x)))
        h = h + self.temb(nx.silu(temb))[:, :, None, None]
        h = self.conv2(nx.silu(self.norm2(h)))
        return h + (self.skip(x) if self.skip is not None else x)


class CrossAttention(nn.Module):
    """Queries from the flattened feature map, keys/values from the age context."""

    def __init__(self, channels, context_dim, groups):
        super().__init__()
        self.norm = nx.GroupNorm(groups, channels)
        self.to_q = nx.Linear(channels, channels)
        self.to_k = nx.Linear(context_dim, channels)
        self.to_v = nx.Linear(context_dim, channels)
        self.out = nx.Linear(channels, channels)

    def forward(self, x, context):
        n, c, h, w = x.shape
        flat = self.norm(x).flatten(2).transpose(1, 2)  # [N, HW, C]
        ctx = context[:, None, :] if context.dim() == 2 else context
        attn = nx.attention(self.to_q(flat), self.to_k(ctx), self.to_v(ctx))
        return x + self.out(attn).transpose(1, 2).reshape(n, c, h, w)


class _Level(nn.Module):
    def __init__(self, cin, cout, cfg: DenoiserConfig, size: int):
        super().__init__()
        self.res = ResBlock(cin, cout, cfg.time_embed_dim, cfg.groups)
        self.attn = (CrossAttention(cout, cfg.hidden_dim, cfg.groups)
                     if size in cfg.attention_resolutions else None)

    def forward(self, x, temb, ctx):
        h = self.res(x, temb)
        return self.attn(h, ctx) if self.attn is not None else h


class UNetEncoder(nn.Module):
    """Time embedding, input conv, down levels and middle block.

    Returns the middle activation and one skip per level; these are exactly
    the features a control branch adds residuals to.
    """

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        te = cfg.time_embed_dim
        self.time_mlp = nn.Sequential(nx.Linear(te, te), nn.SiLU(), nx.Linear(te, te))
        chans, sizes = cfg.level_channels(), cfg.level_sizes()
        self.conv_in = nx.Conv2d(cfg.latent_channels, chans[0], 3)
        self.levels = nn.ModuleList()
        self.downs = nn.ModuleList()
        prev = chans[0]
        for i, (ch, sz) in enumerate(zip(chans, sizes)):
            self.levels.append(_Level(prev, ch, cfg, sz))
            prev = ch
            if i < len(chans) - 1:
                self.downs.append(nx.Conv2d(ch, ch, 3, stride=2))
        self.mid = _Level(chans[-1], chans[-1], cfg, sizes[-1])

    def time_embed(self, t: torch.Tensor) -> torch.Tensor:
        return self.time_mlp(timestep_embedding(t, self.cfg.time_embed_dim))

    def forward(self, x, t, ctx, hint: torch.Tensor | None = None):
        temb = self.time_embed(t)
        h = self.conv_in(x)
        if hint is not None:
            h = h + hint
        skips = []
        for i, level in enumerate(self.levels):
            h = level(h, temb, ctx)
            skips.append(h)
            if i < len(self.downs):
                h = self.downs[i](h)
        h = self.mid(h, temb, ctx)
        return h, skips, temb


class UNetDecoder(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        chans, sizes = cfg.level_channels(), cfg.level_sizes()
        self.levels = nn.ModuleList()
        self.ups = nn.ModuleList()
        prev = chans[-1]
        for i in reversed(range(len(chans))):
            self.levels.append(_Level(prev + chans[i], chans[i], cfg, sizes[i]))
            prev = chans[i]
            if i > 0:
                self.ups.append(nx.Conv2d(chans[i], chans[i - 1], 3))
                prev = chans[i - 1]
        self.norm_out = nx.GroupNorm(cfg.groups, chans[0])
        self.conv_out = nx.Conv2d(chans[0], cfg.latent_channels, 3)

    def forward(self, h, skips, temb, ctx):
        for j, level in enumerate(self.levels):
            h = level(nx.concat_channels(h, skips[-1 - j]), temb, ctx)
            if j < len(self.ups):
                h = self.ups[j](nx.upsample(h, 2))
        return self.conv_out(nx.silu(self.norm_out(h)))


class UNet(nn.Module):
    """Noise predictor with cross-attention on the age embedding."""

    def __init__(self, cfg: DenoiserConfig | None = None):
        super().__init__()
        self.cfg = cfg or DenoiserConfig()
        self.encoder = UNetEncoder(self.cfg)
        self.decoder = UNetDecoder(self.cfg)
        self.register_buffer("pretrain_steps", torch.zeros(()))

    @property
    def pretrained(self) -> bool:
        return float(self.pretrain_steps) > 0

    def forward(self, z, t, ctx, control: list[torch.Tensor] | None = None):
        cfg = self.cfg
        if z.dim() != 4 or z.shape[1:] != (cfg.latent_channels, cfg.latent_size, cfg.latent_size):
            raise DimensionError(f"denoiser: latent {tuple(z.shape)} does not match config")
        if ctx.shape[-1] != cfg.hidden_dim:
            raise DimensionError(f"denoiser: context width {ctx.shape[-1]} != {cfg.hidden_dim}")
        t = torch.as_tensor(t).reshape(-1).expand(z.shape[0]) if torch.as_tensor(t).numel() == 1 \
            else torch.as_tensor(t)
        h, skips, temb = self.encoder(z, t, ctx)
        if control is not None:
            # residual injection: one per skip, the last one for the middle block
            if len(control) != len(skips) + 1:
                raise DimensionError(f"expected {len(skips) + 1} control residuals, got {len(control)}")
            skips = [s + c for s, c in zip(skips, control[:-1])]
            h = h + control[-1]
        return self.decoder(h, skips, temb, ctx)


def denoise_forward(unet: UNet, z_in, t, ctx, control=None) -> torch.Tensor:
    ctx = getattr(ctx, "vector", ctx)
    if ctx.dim() == 1:
        ctx = ctx[None].expand(z_in.shape[0], -1)
    return unet(z_in, t, ctx, control)


class SourceFusion(nn.Module):
    """1x1 conv over [Z_t, Z_A]; starts as channel selection of Z_t."""

    def __init__(self, channels: int = 4):
        super().__init__()
        self.channels = channels
        self.conv = nx.Conv2d(2 * channels, channels, 1)
        with torch.no_grad():
            self.conv.weight.zero_()
            self.conv.bias.zero_()
            for c in range(channels):
                self.conv.weight[c, c] = 1.0

    def forward(self, z_t, z_a):
        if z_t.shape != z_a.shape or z_t.shape[1] != self.channels:
            raise DimensionError(f"fuse_source: {tuple(z_t.shape)} vs {tuple(z_a.shape)}")
        return self.conv(nx.concat_channels(z_t, z_a))


def fuse_source(fusion: SourceFusion, z_t, z_a) -> torch.Tensor:
    return fusion(latent_values(z_t), latent_values(z_a))


# ---------------------------------------------------------------------------
# training & sampling
# ---------------------------------------------------------------------------

def sample_timesteps(n: int, schedule: NoiseSchedule, gen: torch.Generator) -> torch.Tensor:
    return torch.randint(1, schedule.T + 1, (n,), generator=gen)


def pretrain_step(unet: UNet, age_encoder, z0: torch.Tensor, ages, schedule: NoiseSchedule,
                  opt: nx.Adam, gen: torch.Generator) -> float:
    """Noise-prediction MSE on a latent batch conditioned on each latent's own age."""
    opt.zero_grad()
    t = sample_timesteps(z0.shape[0], schedule, gen)
    eps = torch.randn(z0.shape, generator=gen)
    z_t = q_sample(z0, t, eps, schedule)
    loss = ((eps - unet(z_t, t, age_encoder(ages))) ** 2).mean()
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"pretraining loss became {loss.item()}")
    nx.backward(loss)
    opt.step()
    unet.pretrain_steps += 1
    return loss.item()


def _noise(shape, gen) -> torch.Tensor:
    """Gaussian noise from one generator, or row-wise from a list of generators."""
    if isinstance(gen, (list, tuple)):
        if len(gen) != shape[0]:
            raise DimensionError(f"{len(gen)} generators for a batch of {shape[0]}")
        return torch.stack([torch.randn(shape[1:], generator=g) for g in gen])
    return torch.randn(shape, generator=gen)


@torch.no_grad()
def ddpm_sample(eps_model, z_a: torch.Tensor, ctx: torch.Tensor, schedule: NoiseSchedule,
                gen, z_id: torch.Tensor | None = None,
                clip_x0: float | None = None) -> torch.Tensor:
    """Ancestral sampling with fixed posterior variance.

    ``eps_model(z_t, z_a, t, ctx, z_id)`` must fuse the source and apply any
    control branch itself.  Batched: ``z_a`` is [N,c,h,w], ``ctx`` [N,d].
    ``gen`` is a generator or one generator per row; with per-row generators a
    row's trajectory does not depend on what else is in the batch.
    """
    z = _noise(z_a.shape, gen)
    beta = schedule.beta
    ab = schedule.alpha_bar
    for t in range(schedule.T, 0, -1):
        tt = torch.full((z.shape[0],), t, dtype=torch.long)
        eps = eps_model(z, z_a, tt, ctx, z_id)
        x0 = (z - math.sqrt(1.0 - ab[t]) * eps) / math.sqrt(ab[t])
        if clip_x0 is not None:
            x0 = x0.clamp(-clip_x0, clip_x0)
        if t == 1:
            z = x0
            break
        b_t = float(beta[t - 1])
        coef_x0 = math.sqrt(ab[t - 1]) * b_t / (1.0 - ab[t])
        coef_z = math.sqrt(1.0 - b_t) * (1.0 - ab[t - 1]) / (1.0 - ab[t])
        var = b_t * (1.0 - ab[t - 1]) / (1.0 - ab[t])
        z = coef_x0 * x0 + coef_z * z + math.sqrt(var) * _noise(z.shape, gen)
    return z.to(nx.DTYPE)
