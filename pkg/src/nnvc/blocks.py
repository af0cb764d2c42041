"""Neural building blocks: ResBlock, split attention, the Dense Split Attention
block, and overfittable multiplicative parameters (OMPs).

OMPs are passed to ``forward`` as ``{layer_id: multiplier_vector}`` and are
applied to a convolution's output right after the convolution, before the
activation. Layer ids inside a :class:`DSABlock` are ``"head"``,
``"res{i}.conv{j}"``, ``"attn.conv"`` and ``"tail"``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

LEAKY_SLOPE = 0.2
OMP_LEVELS = 256


class ConfigurationError(ValueError):
    pass


class AddressingError(KeyError):
    pass


def act(x: torch.Tensor) -> torch.Tensor:
    return F.leaky_relu(x, LEAKY_SLOPE)


_GAIN = math.sqrt(2.0 / (1 + LEAKY_SLOPE**2))


def conv(in_ch: int, out_ch: int, k: int = 3, stride: int = 1, groups: int = 1) -> nn.Conv2d:
    """Convolution with variance-preserving init for the leaky activation."""
    layer = nn.Conv2d(in_ch, out_ch, k, stride=stride, padding=k // 2, groups=groups)
    nn.init.normal_(layer.weight, std=_GAIN / math.sqrt(in_ch // groups * k * k))
    nn.init.zeros_(layer.bias)
    return layer


def upconv(in_ch: int, out_ch: int, k: int = 5, stride: int = 2) -> nn.ConvTranspose2d:
    layer = nn.ConvTranspose2d(in_ch, out_ch, k, stride=stride, padding=k // 2, output_padding=stride - 1)
    # each output sums about in_ch * k^2 / stride^2 taps
    nn.init.normal_(layer.weight, std=_GAIN * stride / math.sqrt(in_ch * k * k))
    nn.init.zeros_(layer.bias)
    return layer


def apply_omp(fmap: torch.Tensor, kernel_index: int, value: float) -> torch.Tensor:
    """Scale one output channel (dim -3) of ``fmap`` by ``value``."""
    channels = fmap.shape[-3]
    if not 0 <= kernel_index < channels:
        raise IndexError(f"kernel index {kernel_index} out of range for {channels} channels")
    out = fmap.clone()
    out[..., kernel_index, :, :] = fmap[..., kernel_index, :, :] * value
    return out


def scale_channels(fmap: torch.Tensor, multipliers: torch.Tensor | None) -> torch.Tensor:
    if multipliers is None:
        return fmap
    if multipliers.numel() != fmap.shape[-3]:
        raise AddressingError(f"{multipliers.numel()} multipliers for {fmap.shape[-3]} channels")
    return fmap * multipliers.view(-1, 1, 1)


def _check_channels(x: torch.Tensor, channels: int) -> None:
    if x.shape[-3] != channels:
        raise ConfigurationError(f"expected {channels} channels, got {x.shape[-3]}")


@dataclass
class DsaConfig:
    channels: int = 64
    resblock_convs: int = 2
    num_resblocks: int = 4
    groups: int = 1
    radix: int = 2

    def __post_init__(self) -> None:
        if self.resblock_convs not in (2, 3):
            raise ConfigurationError("resblock_convs must be 2 or 3")
        if self.num_resblocks < 1:
            raise ConfigurationError("need at least one ResBlock")
        if self.channels % (self.groups * self.radix):
            raise ConfigurationError(
                f"channels ({self.channels}) must be divisible by groups*radix ({self.groups * self.radix})"
            )


class ResBlock(nn.Module):
    def __init__(self, channels: int, num_convs: int = 2):
        super().__init__()
        if num_convs not in (2, 3):
            raise ConfigurationError("ResBlock supports 2 or 3 convolutions")
        self.channels = channels
        self.convs = nn.ModuleList(conv(channels, channels) for _ in range(num_convs))

    def layer_ids(self) -> list[str]:
        return [f"conv{j}" for j in range(len(self.convs))]

    def forward(self, x, omps=None, trace=None, prefix: str = ""):
        _check_channels(x, self.channels)
        omps = omps or {}
        h = x
        last = len(self.convs) - 1
        for j, layer in enumerate(self.convs):
            name = f"conv{j}"
            h = scale_channels(layer(h), omps.get(name))
            if trace is not None:
                trace[prefix + name] = h
            if j < last:
                h = act(h)
        return x + h


class SplitAttention(nn.Module):
    """ResNeSt-style split attention with ``groups`` cardinal groups and ``radix`` splits.

    A grouped convolution expands the input into ``radix`` splits; their sum is
    globally pooled and passed through two 1x1 dense layers whose output is
    normalized across splits by a radix softmax (sigmoid when ``radix == 1``).
    """

    def __init__(self, channels: int, radix: int = 2, groups: int = 1, kernel_size: int = 3):
        super().__init__()
        if channels % (radix * groups):
            raise ConfigurationError(f"channels ({channels}) not divisible by radix*groups ({radix * groups})")
        self.channels, self.radix, self.groups = channels, radix, groups
        inner = max(channels // 4, 8)
        inner = -(-inner // groups) * groups
        self.conv = conv(channels, channels * radix, kernel_size, groups=groups * radix)
        self.fc1 = nn.Conv2d(channels, inner, 1, groups=groups)
        self.fc2 = nn.Conv2d(inner, channels * radix, 1, groups=groups)

    def attention(self, x, omps=None, trace=None, prefix: str = ""):
        """Return ``(splits, weights)`` with shapes ``(N, r, C, H, W)`` and ``(N, r, C)``."""
        _check_channels(x, self.channels)
        omps = omps or {}
        n, c, h, w = x.shape
        feats = scale_channels(self.conv(x), omps.get("conv"))
        if trace is not None:
            trace[prefix + "conv"] = feats
        splits = act(feats).view(n, self.radix, c, h, w)
        gap = splits.sum(1).mean((2, 3), keepdim=True)
        logits = self.fc2(act(self.fc1(gap))).view(n, self.groups, self.radix, c // self.groups)
        if self.radix > 1:
            weights = torch.softmax(logits, dim=2)
        else:
            weights = torch.sigmoid(logits)
        weights = weights.transpose(1, 2).reshape(n, self.radix, c)
        return splits, weights

    def forward(self, x, omps=None, trace=None, prefix: str = ""):
        splits, weights = self.attention(x, omps, trace, prefix)
        return (splits * weights[..., None, None]).sum(1)


class DSABlock(nn.Module):
    """Dense Split Attention block.

    head conv -> ResBlocks -> split attention; the attention output is
    concatenated with the head output and every ResBlock output, and a 1x1
    tail conv projects back to ``channels``.
    """

    def __init__(self, cfg: DsaConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        self.head = conv(c, c)
        self.resblocks = nn.ModuleList(ResBlock(c, cfg.resblock_convs) for _ in range(cfg.num_resblocks))
        self.attn = SplitAttention(c, cfg.radix, cfg.groups)
        self.tail = nn.Conv2d(c * (cfg.num_resblocks + 2), c, 1)

    def layer_channels(self) -> dict[str, int]:
        c = self.cfg.channels
        out = {"head": c}
        for i, rb in enumerate(self.resblocks):
            for name in rb.layer_ids():
                out[f"res{i}.{name}"] = c
        out["attn.conv"] = c * self.cfg.radix
        out["tail"] = c
        return out

    def forward(self, x, omps: dict[str, torch.Tensor] | None = None, trace: dict | None = None):
        _check_channels(x, self.cfg.channels)
        omps = omps or {}
        unknown = set(omps) - set(self.layer_channels())
        if unknown:
            raise AddressingError(f"no such layer(s) in DSA block: {sorted(unknown)}")
        h = scale_channels(self.head(x), omps.get("head"))
        if trace is not None:
            trace["head"] = h
        h = act(h)
        dense = [h]
        for i, rb in enumerate(self.resblocks):
            sub = {k.split(".", 1)[1]: v for k, v in omps.items() if k.startswith(f"res{i}.")}
            h = rb(h, sub, trace, prefix=f"res{i}.")
            dense.append(h)
        sub = {k.split(".", 1)[1]: v for k, v in omps.items() if k.startswith("attn.")}
        dense.append(self.attn(h, sub, trace, prefix="attn."))
        out = scale_channels(self.tail(torch.cat(dense, 1)), omps.get("tail"))
        if trace is not None:
            trace["tail"] = out
        return out


Address = tuple[str, str, int]


@dataclass
class OMPSet:
    """Overfittable multiplicative parameters at ``(block_id, layer_id, kernel)`` addresses."""

    placement: list[Address]
    values: torch.Tensor
    quant_step: float = 0.0
    offset: float = 0.0
    codes: np.ndarray | None = None
    included: bool = True
    quant_levels: int = field(default=OMP_LEVELS, init=False)

    def __post_init__(self) -> None:
        if self.values.numel() != len(self.placement):
            raise ValueError(f"{self.values.numel()} values for {len(self.placement)} addresses")

    @classmethod
    def ones(cls, placement: Iterable[Address]) -> "OMPSet":
        placement = list(placement)
        return cls(placement, torch.ones(len(placement), dtype=torch.float32))

    def multipliers(self, layer_channels: dict[tuple[str, str], int]) -> dict[str, dict[str, torch.Tensor]]:
        """Expand to ``{block_id: {layer_id: vector}}``; unaddressed kernels get 1.

        Differentiable with respect to ``values``.
        """
        grouped: dict[tuple[str, str], tuple[list[int], list[int]]] = {}
        for i, (block, layer, k) in enumerate(self.placement):
            if (block, layer) not in layer_channels:
                raise AddressingError(f"unknown OMP layer {block}/{layer}")
            if not 0 <= k < layer_channels[(block, layer)]:
                raise AddressingError(f"kernel {k} out of range for {block}/{layer}")
            idx, pos = grouped.setdefault((block, layer), ([], []))
            idx.append(k)
            pos.append(i)
        out: dict[str, dict[str, torch.Tensor]] = {}
        values = self.values
        for (block, layer), (idx, pos) in grouped.items():
            ones = torch.ones(layer_channels[(block, layer)], dtype=values.dtype)
            vec = ones.index_put((torch.tensor(idx),), values[torch.tensor(pos)])
            out.setdefault(block, {})[layer] = vec
        return out
