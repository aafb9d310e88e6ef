"""Identity control branch, the joint objective and end-to-end age transformation."""
from __future__ import annotations

import copy
from dataclasses import dataclass

import torch
from torch import nn

from . import numerics as nx
from .autoenc import AutoEncoder
from .conditioning import AgeEncoder, IdentityNet
from .diffusion import (NoiseSchedule, SourceFusion, UNet, ddpm_sample, q_sample,
                        sample_timesteps)
from .errors import ContractError, DimensionError, TrainingDiverged


class ControlBranch(nn.Module):
    """Trainable copy of the denoiser encoder bracketed by zero convolutions.

    The identity grid enters once, after the copy's input conv, through
    ``zero_in``; every skip level and the middle block leave through their
    own ``zero_out`` conv and are added to the base decoder's inputs.
    """

    def __init__(self, unet: UNet, id_channels: int):
        super().__init__()
        self.cfg = unet.cfg
        self.encoder = copy.deepcopy(unet.encoder)
        chans = self.cfg.level_channels()
        self.zero_in = nx.Conv2d(id_channels, chans[0], 1, zero_init=True)
        self.zero_out = nn.ModuleList([nx.Conv2d(ch, ch, 1, zero_init=True) for ch in chans] +
                                      [nx.Conv2d(chans[-1], chans[-1], 1, zero_init=True)])

    def forward(self, z_in, t, ctx, z_id) -> list[torch.Tensor]:
        if z_id.dim() != 4 or z_id.shape[0] != z_in.shape[0]:
            raise DimensionError(f"control: identity grid {tuple(z_id.shape)} vs input {tuple(z_in.shape)}")
        size = self.cfg.latent_size
        if z_id.shape[-1] % size or z_id.shape[-2] % size:
            raise DimensionError(f"control: identity grid {tuple(z_id.shape[-2:])} not poolable to {size}")
        hint = self.zero_in(nx.avg_pool(z_id, z_id.shape[-1] // size))
        h, skips, _ = self.encoder(z_in, t, ctx, hint=hint)
        return [zc(f) for zc, f in zip(self.zero_out, skips + [h])]


def init_control(unet: UNet, id_channels: int = 4) -> ControlBranch:
    if not unet.pretrained:
        raise ContractError("init_control: denoiser has not been pretrained")
    return ControlBranch(unet, id_channels)


def controlled_forward(unet: UNet, ctrl: ControlBranch, z_in, t, ctx, z_id) -> torch.Tensor:
    ctx = getattr(ctx, "vector", ctx)
    if ctx.dim() == 1:
        ctx = ctx[None].expand(z_in.shape[0], -1)
    z_id = getattr(z_id, "grid", z_id)
    if z_id.dim() == 3:
        z_id = z_id[None].expand(z_in.shape[0], -1, -1, -1)
    t = torch.as_tensor(t).reshape(-1).expand(z_in.shape[0])
    return unet(z_in, t, ctx, control=ctrl(z_in, t, ctx, z_id))


@dataclass
class ModelBundle:
    ae: AutoEncoder
    age: AgeEncoder
    unet: UNet
    fusion: SourceFusion
    schedule: NoiseSchedule
    irl: IdentityNet | None = None
    ctrl: ControlBranch | None = None

    def modules(self) -> dict[str, nn.Module]:
        named = {"ae": self.ae, "age": self.age, "unet": self.unet, "fuse": self.fusion,
                 "irl": self.irl, "ctrl": self.ctrl}
        return {k: v for k, v in named.items() if v is not None}

    def identity_grid(self, z_a: torch.Tensor) -> torch.Tensor | None:
        if self.ctrl is None:
            return None
        return self.irl.grid(z_a)

    def eps(self, z_t, z_a, t, ctx, z_id=None) -> torch.Tensor:
        fused = self.fusion(z_t, z_a)
        if self.ctrl is None:
            return self.unet(fused, t, ctx)
        return controlled_forward(self.unet, self.ctrl, fused, t, ctx, z_id)

    def joint_parameters(self) -> list[torch.nn.Parameter]:
        """Base decoder, fusion conv and control branch; everything else stays frozen."""
        params = list(self.unet.decoder.parameters()) + list(self.fusion.parameters())
        if self.ctrl is not None:
            params += list(self.ctrl.parameters())
        return params


def joint_train_step(bundle: ModelBundle, z_a, z_b, ages_b, schedule: NoiseSchedule,
                     opt: nx.Adam, gen: torch.Generator, z_id=None) -> float:
    """Noise the target latent, fuse the source, predict the noise under target age.

    ``z_id`` may be passed precomputed (the identity net is frozen here).
    """
    opt.zero_grad()
    t = sample_timesteps(z_b.shape[0], schedule, gen)
    eps = torch.randn(z_b.shape, generator=gen)
    z_t = q_sample(z_b, t, eps, schedule)
    with torch.no_grad():
        ctx = bundle.age(ages_b)
        if z_id is None:
            z_id = bundle.identity_grid(z_a)
    loss = ((eps - bundle.eps(z_t, z_a, t, ctx, z_id)) ** 2).mean()
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"joint loss became {loss.item()}")
    nx.backward(loss)
    opt.step()
    return loss.item()


@torch.no_grad()
def transform_batch(bundle: ModelBundle, sources: torch.Tensor, target_ages, seeds,
                    clip_x0: float | None = None) -> torch.Tensor:
    """[N,1,H,W] sources + N target ages -> [N,1,H,W] generated images in [0, 1].

    ``seeds`` gives one sampling seed per row (or a single generator shared by
    the batch).
    """
    if isinstance(seeds, torch.Generator):
        gen = seeds
    else:
        gen = [torch.Generator().manual_seed(int(s)) for s in seeds]
    z_a = bundle.ae.encode(sources)
    ctx = bundle.age(target_ages)
    z_id = bundle.identity_grid(z_a)
    z0 = ddpm_sample(bundle.eps, z_a, ctx, bundle.schedule, gen, z_id=z_id, clip_x0=clip_x0)
    return bundle.ae.decode(z0)


def transform_age(bundle: ModelBundle, source_image: torch.Tensor, target_age: float,
                  seed: int = 0) -> torch.Tensor:
    """Generate the subject of ``source_image`` [1,H,W] at ``target_age``."""
    if source_image.dim() != 3:
        raise DimensionError(f"transform_age expects [1,H,W], got {tuple(source_image.shape)}")
    bundle.age.normalize([target_age])  # domain check before any work
    return transform_batch(bundle, source_image[None], [target_age], [seed])[0]
