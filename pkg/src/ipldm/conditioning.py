"""Age embeddings and identity-preserving representation learning.

``AgeEncoder`` maps a continuous age to the cross-attention context vector.
``IdentityNet`` is the bottleneck (encoder phi, decoder phi-bar) over AE
latents plus an optional projector head; it is trained with the triplet,
cosine and decorrelation losses below.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from . import numerics as nx
from .autoenc import latent_values
from .errors import ContractError, DimensionError, DomainError, TrainingDiverged
from .phantoms import ELDERLY, Profile, TripletBatch, get_profile, stack_images


# ---------------------------------------------------------------------------
# age
# ---------------------------------------------------------------------------

@dataclass
class AgeEmbedding:
    vector: torch.Tensor  # [d]
    normalized_age: float


class AgeEncoder(nn.Module):
    """Four-layer MLP on the normalised age with ReLU and instance normalisation."""

    def __init__(self, dim: int = 64, hidden: int = 64, profile: str | Profile = ELDERLY):
        super().__init__()
        self.profile = get_profile(profile)
        self.dim = dim
        self.layers = nn.ModuleList([nx.Linear(1, hidden), nx.Linear(hidden, hidden),
                                     nx.Linear(hidden, hidden), nx.Linear(hidden, dim)])
        self.norms = nn.ModuleList([nx.InstanceNorm(hidden), nx.InstanceNorm(hidden)])

    def normalize(self, ages) -> torch.Tensor:
        ages = torch.as_tensor(ages, dtype=nx.DTYPE).reshape(-1)
        p = self.profile
        if bool(((ages < p.age_min) | (ages > p.age_max) | torch.isnan(ages)).any()):
            raise DomainError(f"age outside {p.name} range [{p.age_min}, {p.age_max}]")
        return (ages - p.age_min) / (p.age_max - p.age_min)

    def forward(self, ages) -> torch.Tensor:
        """ages [B] (raw units) -> embeddings [B, d]."""
        h = self.normalize(ages)[:, None]
        h = nx.relu(self.layers[0](h))
        for lin, norm in zip(self.layers[1:3], self.norms):
            h = nx.relu(norm(lin(h)))
        return self.layers[3](h)


def encode_age(encoder: AgeEncoder, age: float) -> AgeEmbedding:
    norm = float(encoder.normalize([age])[0])
    with torch.no_grad():
        vec = encoder([age])[0]
    return AgeEmbedding(vec, norm)


# ---------------------------------------------------------------------------
# identity network
# ---------------------------------------------------------------------------

@dataclass
class IRLConfig:
    latent_channels: int = 4
    latent_size: int = 16
    id_channels: int = 4
    width: int = 32
    embed_dim: int = 128
    projector_hidden: int = 256
    use_projector: bool = True


@dataclass
class IdentityFeatures:
    grid: torch.Tensor       # [c_id, h, w]
    embedding: torch.Tensor  # [e]


class IdentityNet(nn.Module):
    def __init__(self, cfg: IRLConfig | None = None):
        super().__init__()
        cfg = cfg or IRLConfig()
        self.cfg = cfg
        c, w = cfg.latent_channels, cfg.width
        self.phi = nn.Sequential(
            nx.Conv2d(c, w, 3), nx.GroupNorm(8, w), nn.SiLU(),
            nx.Conv2d(w, w, 3), nx.GroupNorm(8, w), nn.SiLU(),
            nx.Conv2d(w, cfg.id_channels, 3))
        self.phi_bar = nn.Sequential(
            nx.Conv2d(cfg.id_channels, w, 3), nx.GroupNorm(8, w), nn.SiLU(),
            nx.Conv2d(w, c, 3))
        flat = cfg.id_channels * cfg.latent_size ** 2
        self.projector = nn.Sequential(
            nx.Linear(flat, cfg.projector_hidden), nn.ReLU(),
            nx.Linear(cfg.projector_hidden, cfg.embed_dim)) if cfg.use_projector else None

    def grid(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() != 4 or z.shape[1] != self.cfg.latent_channels:
            raise DimensionError(f"identity encoder: bad latent shape {tuple(z.shape)}")
        return self.phi(z)

    def embed(self, grid: torch.Tensor) -> torch.Tensor:
        flat = grid.flatten(1)
        return self.projector(flat) if self.projector is not None else flat

    def forward(self, z):
        g = self.grid(z)
        return g, self.embed(g), self.phi_bar(g)


def identity_encode(net: IdentityNet, latent) -> IdentityFeatures:
    z = latent_values(latent)
    with torch.no_grad():
        g, e, _ = net(z[None])
    return IdentityFeatures(g[0], e[0])


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _as_batch(e: torch.Tensor) -> torch.Tensor:
    return e[None] if e.dim() == 1 else e


def triplet_loss(ea, ep, en, margin: float = 0.2) -> torch.Tensor:
    """Batch mean of max(|a-p|^2 - |a-n|^2 + margin, 0)."""
    ea, ep, en = _as_batch(ea), _as_batch(ep), _as_batch(en)
    if not (ea.shape == ep.shape == en.shape):
        raise DimensionError("triplet_loss: embedding shapes differ")
    d_pos = ((ea - ep) ** 2).sum(-1)
    d_neg = ((ea - en) ** 2).sum(-1)
    return torch.clamp(d_pos - d_neg + margin, min=0.0).mean()


def cosine_loss(ea, ep) -> torch.Tensor:
    ea, ep = _as_batch(ea), _as_batch(ep)
    na, np_ = torch.linalg.vector_norm(ea, dim=-1), torch.linalg.vector_norm(ep, dim=-1)
    if bool((na == 0).any() | (np_ == 0).any()):
        raise DomainError("cosine_loss: zero-length embedding")
    return (1.0 - (ea * ep).sum(-1) / (na * np_)).mean()


def cross_correlation(ea: torch.Tensor, ep: torch.Tensor) -> torch.Tensor:
    """Per-dimension batch-standardised cross-correlation, ``A^T P / B``."""
    if ea.dim() != 2 or ea.shape != ep.shape:
        raise DimensionError("cross_correlation: need matching [B, e] batches")
    b = ea.shape[0]
    if b < 2:
        raise ContractError("collapse regularisation needs a batch of at least 2")

    def standardize(e):
        mu = e.mean(0, keepdim=True)
        return (e - mu) / torch.sqrt(((e - mu) ** 2).mean(0, keepdim=True) + nx.NORM_EPS)

    return standardize(ea).T @ standardize(ep) / b


def collapse_penalty(corr: torch.Tensor, gamma: float) -> torch.Tensor:
    eye = torch.eye(corr.shape[0], dtype=corr.dtype)
    return gamma * ((corr - eye) ** 2).sum()


def collapse_reg(ea, ep, gamma: float = 0.005) -> torch.Tensor:
    return collapse_penalty(cross_correlation(ea, ep), gamma)


def identity_loss(ea, ep, en, margin: float = 0.2, gamma: float = 0.005,
                  recon: torch.Tensor | None = None, target: torch.Tensor | None = None,
                  recon_weight: float = 1.0) -> dict[str, torch.Tensor]:
    """Triplet + cosine + decorrelation terms, plus latent L1 through phi-bar when given."""
    terms = {
        "triplet": triplet_loss(ea, ep, en, margin),
        "cosine": cosine_loss(ea, ep),
        "collapse": collapse_reg(ea, ep, gamma),
    }
    if recon is not None:
        terms["recon"] = recon_weight * (recon - target).abs().mean()
    terms["loss"] = sum(terms.values())
    return terms


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def encode_triplets(ae, batch: TripletBatch):
    with torch.no_grad():
        return tuple(ae.encode(stack_images(rs)) for rs in (batch.anchors, batch.positives, batch.negatives))


def irl_train_step(net: IdentityNet, batch, opt: nx.Adam, ae=None, margin: float = 0.2,
                   gamma: float = 0.005, identity_loss_on: bool = True) -> dict[str, float]:
    """One update of phi, phi-bar and the projector.

    ``batch`` is a :class:`TripletBatch` (encoded through the frozen ``ae``)
    or a tuple of anchor/positive/negative latents.  With
    ``identity_loss_on=False`` only the latent reconstruction term is used.
    """
    if isinstance(batch, TripletBatch):
        if ae is None:
            raise ContractError("irl_train_step: TripletBatch given without an autoencoder")
        batch = encode_triplets(ae, batch)
    za, zp, zn = batch
    opt.zero_grad()
    z = torch.cat([za, zp, zn])
    _, emb, rec = net(z)
    b = za.shape[0]
    if identity_loss_on:
        terms = identity_loss(emb[:b], emb[b:2 * b], emb[2 * b:], margin, gamma, rec, z)
    else:
        terms = {"recon": (rec - z).abs().mean()}
        terms["loss"] = terms["recon"]
    if not torch.isfinite(terms["loss"]):
        raise TrainingDiverged(f"identity loss became {terms['loss'].item()}")
    nx.backward(terms["loss"])
    opt.step()
    return {k: v.item() for k, v in terms.items()}
