"""Differentiable tensor substrate.

Storage and reverse-mode differentiation are delegated to ``torch`` (float32 by
default, float64 accepted everywhere for gradient verification).  This module
adds the shape contracts the rest of the package relies on, the small set of
layers the networks are assembled from, a hand-written Adam and an
independent central-difference gradient checker.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import torch
from torch import nn
import torch.nn.functional as F

from .errors import ContractError, DimensionError

DTYPE = torch.float32
NORM_EPS = 1e-5

Tensor = torch.Tensor


def configure_determinism(threads: int | None = None) -> int:
    """Pin the intra-op thread count and force deterministic kernels.

    ``IPLDM_THREADS`` caps the count when ``threads`` is not given.
    """
    if threads is None:
        threads = int(os.environ.get("IPLDM_THREADS", "1"))
    threads = max(1, threads)
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)
    return threads


def tensor(data, requires_grad: bool = False, dtype: torch.dtype = DTYPE) -> Tensor:
    t = torch.as_tensor(data, dtype=dtype).clone()
    t.requires_grad_(requires_grad)
    return t


def check_finite(t: Tensor, what: str = "tensor") -> Tensor:
    if not bool(torch.isfinite(t).all()):
        bad = int((~torch.isfinite(t)).sum())
        raise ContractError(f"{what} contains {bad} non-finite value(s)")
    return t


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def _need_ndim(x: Tensor, ndim: int, op: str):
    if x.dim() != ndim:
        raise DimensionError(f"{op}: expected {ndim}-d input, got shape {tuple(x.shape)}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, padding_mode: str = "zeros") -> Tensor:
    """[N,Cin,H,W] * [Cout,Cin,kh,kw] -> [N,Cout,H',W'], H' = (H+2p-kh)//s + 1."""
    _need_ndim(x, 4, "conv2d")
    _need_ndim(weight, 4, "conv2d kernel")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"conv2d: input has {x.shape[1]} channels, kernel expects {weight.shape[1]}")
    kh, kw = weight.shape[-2:]
    if kh > x.shape[2] + 2 * padding or kw > x.shape[3] + 2 * padding:
        raise DimensionError("conv2d: kernel larger than padded input")
    if padding and padding_mode == "circular":
        x = F.pad(x, (padding,) * 4, mode="circular")
        padding = 0
    elif padding_mode not in ("zeros", "circular"):
        raise ValueError(f"unknown padding_mode {padding_mode!r}")
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(
            f"linear: input width {x.shape[-1]} != weight fan-in {weight.shape[1]}")
    return F.linear(x, weight, bias)


def relu(x: Tensor) -> Tensor:
    return torch.relu(x)


def silu(x: Tensor) -> Tensor:
    return F.silu(x)


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d)) v over the last two axes; leading axes are batch."""
    d = q.shape[-1]
    if d == 0:
        raise DimensionError("attention: zero feature dimension")
    if k.shape[-1] != d:
        raise DimensionError(f"attention: query width {d} != key width {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError("attention: keys and values differ in length")
    logits = q @ k.transpose(-1, -2) / math.sqrt(d)
    return torch.softmax(logits, dim=-1) @ v


def group_norm(x: Tensor, groups: int, weight: Tensor | None = None,
               bias: Tensor | None = None, eps: float = NORM_EPS) -> Tensor:
    if x.dim() < 2 or x.shape[1] % groups:
        raise DimensionError(f"group_norm: {x.shape[1] if x.dim() > 1 else '?'} channels "
                             f"not divisible into {groups} groups")
    return F.group_norm(x, groups, weight, bias, eps)


def instance_norm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None,
                  eps: float = NORM_EPS) -> Tensor:
    """Per-sample, per-channel normalisation over spatial axes.

    A 2-d input ``[N, D]`` has no spatial axes; each row is normalised over its
    features instead (this is how the age MLP uses it).
    """
    if x.dim() < 2:
        raise DimensionError("instance_norm: need at least [N, D]")
    axes = tuple(range(2, x.dim())) if x.dim() > 2 else (1,)
    mean = x.mean(axes, keepdim=True)
    var = ((x - mean) ** 2).mean(axes, keepdim=True)
    return _affine((x - mean) / torch.sqrt(var + eps), weight, bias)


def _affine(x: Tensor, weight: Tensor | None, bias: Tensor | None) -> Tensor:
    shape = (1, -1) + (1,) * (x.dim() - 2)
    if weight is not None:
        x = x * weight.reshape(shape)
    if bias is not None:
        x = x + bias.reshape(shape)
    return x


def upsample(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of [N,C,H,W]."""
    _need_ndim(x, 4, "upsample")
    return F.interpolate(x, scale_factor=factor, mode="nearest")


def avg_pool(x: Tensor, factor: int) -> Tensor:
    _need_ndim(x, 4, "avg_pool")
    if factor == 1:
        return x
    if x.shape[2] % factor or x.shape[3] % factor:
        raise DimensionError(f"avg_pool: {tuple(x.shape[2:])} not divisible by {factor}")
    return F.avg_pool2d(x, factor)


def concat_channels(*xs: Tensor) -> Tensor:
    if len(xs) < 1:
        raise DimensionError("concat_channels: nothing to concatenate")
    ref = xs[0].shape
    for x in xs[1:]:
        if x.dim() != len(ref) or x.shape[0] != ref[0] or x.shape[2:] != ref[2:]:
            raise DimensionError(
                f"concat_channels: shape {tuple(x.shape)} incompatible with {tuple(ref)}")
    return torch.cat(xs, dim=1)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf."""
    if loss.numel() != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise ContractError("backward: loss is not connected to any tracked tensor")
    loss.reshape(()).backward()


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def numerical_grad(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5
                   ) -> list[Tensor]:
    """Central differences of scalar ``fn(*inputs)`` w.r.t. every input element."""
    xs = [x.detach().clone() for x in inputs]
    grads = []
    with torch.no_grad():
        for x in xs:
            g = torch.zeros_like(x)
            flat, gflat = x.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = float(fn(*xs))
                flat[i] = orig - h
                down = float(fn(*xs))
                flat[i] = orig
                gflat[i] = (up - down) / (2 * h)
            grads.append(g)
    return grads


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """Return the worst relative error between autograd and finite differences.

    Relative error per input is ``||g_auto - g_fd|| / max(||g_fd||, 1e-8)``.
    Pass float64 inputs for the tight check.
    """
    leaves = [x.detach().clone().requires_grad_(True) for x in inputs]
    out = fn(*leaves)
    backward(out)
    fd = numerical_grad(fn, inputs, h)
    worst = 0.0
    for leaf, g in zip(leaves, fd):
        auto = leaf.grad if leaf.grad is not None else torch.zeros_like(g)
        err = float(torch.linalg.vector_norm(auto - g)) / max(float(torch.linalg.vector_norm(g)), 1e-8)
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list[Tensor] = field(default_factory=list)
    second_moment: list[Tensor] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], state: AdamState) -> AdamState:
    """One bias-corrected Adam update applied in place to ``params``."""
    params = list(params)
    for i, p in enumerate(params):
        if p.grad is None:
            raise ContractError(f"adam_step: parameter #{i} {tuple(p.shape)} has no gradient")
    if not state.first_moment:
        state.first_moment = [torch.zeros_like(p) for p in params]
        state.second_moment = [torch.zeros_like(p) for p in params]
    if len(state.first_moment) != len(params):
        raise ContractError("adam_step: parameter list changed between steps")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    with torch.no_grad():
        for p, m, v in zip(params, state.first_moment, state.second_moment):
            if m.shape != p.shape:
                raise ContractError("adam_step: moment buffer shape mismatch")
            g = p.grad
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            p.sub_(state.lr * (m / c1) / (torch.sqrt(v / c2) + state.epsilon))
    return state


class Adam:
    """Thin owner of a parameter list plus its :class:`AdamState`."""

    def __init__(self, params: Iterable[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = [p for p in params]
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], epsilon=eps)

    def zero_grad(self):
        zero_grad(self.params)

    def step(self):
        adam_step(self.params, self.state)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Conv2d(nn.Module):
    def __init__(self, cin: int, cout: int, k: int = 3, stride: int = 1, padding: int | None = None,
                 padding_mode: str = "zeros", zero_init: bool = False):
        super().__init__()
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.padding_mode = padding_mode
        self.weight = nn.Parameter(torch.empty(cout, cin, k, k))
        self.bias = nn.Parameter(torch.empty(cout))
        if zero_init:
            nn.init.zeros_(self.weight)
            nn.init.zeros_(self.bias)
        else:
            nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
            bound = 1.0 / math.sqrt(cin * k * k)
            nn.init.uniform_(self.bias, -bound, bound)

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.padding_mode)


class Linear(nn.Module):
    def __init__(self, fan_in: int, fan_out: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(fan_out, fan_in))
        self.bias = nn.Parameter(torch.empty(fan_out))
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        bound = 1.0 / math.sqrt(fan_in)
        nn.init.uniform_(self.bias, -bound, bound)

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class GroupNorm(nn.Module):
    def __init__(self, groups: int, channels: int):
        super().__init__()
        self.groups = groups
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        return group_norm(x, self.groups, self.weight, self.bias)


class InstanceNorm(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        return instance_norm(x, self.weight, self.bias)


def named_tensors(module: nn.Module, prefix: str) -> dict[str, Tensor]:
    """Flatten a module's parameters and buffers into ``prefix.name`` entries."""
    out = {f"{prefix}.{k}": v for k, v in module.state_dict().items()}
    return out
