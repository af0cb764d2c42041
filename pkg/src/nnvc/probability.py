"""Multi-resolution probability model for integer latents.

The latent is downscaled into a pyramid (level 0 = coarsest). The coarsest
level is coded with one shared learned categorical PMF; every finer level is
coded group by group (2x2 checkerboard phases) with discretized Gaussians whose
mean and scale come from a small conv net that sees the upsampled coarser
level, the already coded groups of the current level and, for inter frames,
features of the reference reconstructions.
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from scipy.special import ndtr
from torch import nn

from .blocks import conv
from .entropy import RangeDecoder, RangeEncoder, pmf_to_cdf

SYMBOL_MIN, SYMBOL_MAX = -127, 128
ALPHABET = SYMBOL_MAX - SYMBOL_MIN + 1
SIGMA_MIN = 0.01
P_MIN = 2.0**-16
# likelihood mixing weight that leaves room for the P_MIN floor on every symbol
_KEEP = 1.0 - ALPHABET * P_MIN
# checkerboard phase order within each level
GROUP_PHASES = ((0, 0), (1, 1), (0, 1), (1, 0))


class CausalityError(RuntimeError):
    pass


PmfObserver = Callable[[int, int, np.ndarray], None]
_observers: list[PmfObserver] = []


@contextmanager
def observe_pmfs(fn: PmfObserver):
    """Call ``fn(level, group, pmf)`` for every PMF block handed to the coder.

    ``group`` is -1 for the coarsest (i.i.d.) level.
    """
    _observers.append(fn)
    try:
        yield fn
    finally:
        _observers.remove(fn)


def _emit(level: int, group: int, pmf: np.ndarray) -> None:
    for fn in list(_observers):
        fn(level, group, pmf)


def quantize(values: torch.Tensor) -> torch.Tensor:
    """Round half away from zero."""
    return torch.sign(values) * torch.floor(values.abs() + 0.5)


def quantize_train_proxy(values: torch.Tensor) -> torch.Tensor:
    return values + torch.empty_like(values).uniform_(-0.5, 0.5)


def quantize_ste(values: torch.Tensor) -> torch.Tensor:
    return values + (quantize(values) - values).detach()


def downscale(level: torch.Tensor) -> torch.Tensor:
    """2x2 average of integer symbols, rounded half away from zero.

    Odd sizes are edge-padded first, so output dims are ``ceil(dim / 2)``.
    """
    h, w = level.shape[-2:]
    x = level.to(torch.int64)
    if h % 2 or w % 2:
        x = F.pad(x.double(), (0, w % 2, 0, h % 2), mode="replicate").to(torch.int64)
    s = x[..., 0::2, 0::2] + x[..., 1::2, 0::2] + x[..., 0::2, 1::2] + x[..., 1::2, 1::2]
    return torch.sign(s) * ((s.abs() + 2) // 4)


def effective_levels(h: int, w: int, num_levels: int) -> int:
    """Drop levels that would need a latent smaller than ``2**(L-1)``."""
    return max(1, min(num_levels, 1 + int(math.floor(math.log2(min(h, w))))))


def build_pyramid(latent: torch.Tensor, num_levels: int) -> list[torch.Tensor]:
    if num_levels < 1:
        raise ValueError("num_levels must be >= 1")
    levels = [latent.to(torch.int64)]
    for _ in range(effective_levels(*latent.shape[-2:], num_levels) - 1):
        levels.insert(0, downscale(levels[0]))
    return levels


def make_group_plan(h: int, w: int) -> list[torch.Tensor]:
    """Boolean ``(h, w)`` masks, one per non-empty checkerboard phase, in coding order."""
    ys = torch.arange(h).view(-1, 1) % 2
    xs = torch.arange(w).view(1, -1) % 2
    plan = []
    for py, px in GROUP_PHASES:
        m = (ys == py) & (xs == px)
        if m.any():
            plan.append(m)
    return plan


def upsample_to(lower: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    up = lower.repeat_interleave(2, dim=-2).repeat_interleave(2, dim=-1)
    return up[..., : size[0], : size[1]]


def downscale_features(feats: torch.Tensor) -> torch.Tensor:
    return F.avg_pool2d(feats, 2, ceil_mode=True)


def discretize_gaussian(mean, scale, symbol_range=(SYMBOL_MIN, SYMBOL_MAX), p_min: float = P_MIN) -> np.ndarray:
    """PMF rows over ``symbol_range`` for each ``(mean, scale)`` pair.

    Interior symbols get ``Phi((x + .5 - mu) / s) - Phi((x - .5 - mu) / s)``; the
    tails beyond the range are folded into the extreme symbols. Rows are then
    mixed with a floor so every probability is at least ``p_min``; this moves
    each probability by at most ``n * p_min``. ``p_min=0`` gives the bare
    discretization.
    """
    lo, hi = symbol_range
    n = hi - lo + 1
    mean = np.asarray(mean, dtype=np.float64).reshape(-1, 1)
    scale = np.maximum(np.asarray(scale, dtype=np.float64).reshape(-1, 1), SIGMA_MIN)
    edges = np.arange(lo, hi + 2, dtype=np.float64) - 0.5
    # evaluate on the side of the mean where the CDF is small to keep precision
    z = (edges - mean) / scale
    upper = z > 0
    cdf = np.where(upper, 1.0 - ndtr(-z), ndtr(z))
    sf = np.where(upper, ndtr(-z), 1.0 - ndtr(z))
    pmf = np.where(upper[:, 1:], sf[:, :-1] - sf[:, 1:], cdf[:, 1:] - cdf[:, :-1])
    pmf[:, 0] = ndtr(z[:, 1])
    pmf[:, -1] = ndtr(-z[:, -2])
    pmf = np.clip(pmf, 0.0, None)
    pmf /= pmf.sum(axis=1, keepdims=True)
    if n * p_min >= 1.0:
        raise ValueError(f"floor {p_min} too large for {n} symbols")
    return (1.0 - n * p_min) * pmf + p_min


def gaussian_likelihood(values: torch.Tensor, mean: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    """Differentiable probability mass of ``values`` (tails folded, floor applied)."""
    scale = scale.clamp_min(SIGMA_MIN)
    centered = (values - mean).abs()
    upper = 0.5 * torch.erfc((centered - 0.5) / (scale * math.sqrt(2)))
    lower = 0.5 * torch.erfc((centered + 0.5) / (scale * math.sqrt(2)))
    p = upper - lower
    std_normal = torch.distributions.Normal(0.0, 1.0)
    at_min = values <= SYMBOL_MIN
    at_max = values >= SYMBOL_MAX
    if at_min.any():
        p = torch.where(at_min, std_normal.cdf((SYMBOL_MIN + 0.5 - mean) / scale), p)
    if at_max.any():
        p = torch.where(at_max, 1 - std_normal.cdf((SYMBOL_MAX - 0.5 - mean) / scale), p)
    return _KEEP * p + P_MIN


class ConditionalNet(nn.Module):
    def __init__(self, latent_channels: int, ref_channels: int, hidden: int):
        super().__init__()
        c = latent_channels
        self.latent_channels = c
        self.ref_channels = ref_channels
        self.body = nn.Sequential(
            conv(2 * c + 1 + ref_channels, hidden), nn.LeakyReLU(0.2),
            conv(hidden, hidden), nn.LeakyReLU(0.2),
            nn.Conv2d(hidden, 2 * c, 1),
        )

    def forward(self, lower_up, context, coded_mask, ref=None):
        parts = [lower_up, context, coded_mask.expand(lower_up.shape[0], 1, *lower_up.shape[-2:])]
        if self.ref_channels:
            if ref is None:
                ref = lower_up.new_zeros(lower_up.shape[0], self.ref_channels, *lower_up.shape[-2:])
            parts.append(ref)
        out = self.body(torch.cat(parts, 1))
        mean = lower_up + out[:, : self.latent_channels]
        scale = F.softplus(out[:, self.latent_channels :]).clamp_min(SIGMA_MIN)
        return mean, scale


class ProbabilityModel(nn.Module):
    def __init__(self, latent_channels: int, num_levels: int = 3, hidden: int = 64, ref_channels: int = 0):
        super().__init__()
        self.latent_channels = latent_channels
        self.num_levels = num_levels
        self.ref_channels = ref_channels
        self.base_logits = nn.Parameter(torch.zeros(ALPHABET))
        # cond_nets[k] predicts the level k steps below the top
        self.cond_nets = nn.ModuleList(
            ConditionalNet(latent_channels, ref_channels, hidden) for _ in range(num_levels - 1)
        )

    # -- shared pieces ---------------------------------------------------
    def base_pmf(self) -> np.ndarray:
        p = torch.softmax(self.base_logits.detach().double(), 0).numpy()
        return _KEEP * p + P_MIN

    def _base_log2_prob(self, symbols: torch.Tensor) -> torch.Tensor:
        p = _KEEP * torch.softmax(self.base_logits, 0) + P_MIN
        idx = (symbols.round().clamp(SYMBOL_MIN, SYMBOL_MAX) - SYMBOL_MIN).long()
        return torch.log2(p)[idx]

    def _ref_levels(self, ref_feats, levels):
        if ref_feats is None or not self.ref_channels:
            return [None] * len(levels)
        out = [ref_feats]
        for _ in range(len(levels) - 1):
            out.insert(0, downscale_features(out[0]))
        return out

    def conditional_params(self, level_index, num_levels, lower, context, coded_mask,
                           ref=None, group_mask=None, debug=False):
        """Gaussian parameters for a level given its causal context.

        ``coded_mask`` is a ``(1, 1, H, W)`` float mask of already coded
        positions; ``context`` must be zero elsewhere. With ``debug`` the
        causality of the inputs is verified.
        """
        if debug:
            coded = coded_mask[0, 0] > 0
            if group_mask is not None and (coded & group_mask).any():
                raise CausalityError("current group marked as already coded")
            if (context[..., ~coded] != 0).any():
                raise CausalityError("context holds values at positions not yet coded")
        net = self.cond_nets[num_levels - 1 - level_index]
        lower_up = upsample_to(lower.to(context.dtype), context.shape[-2:])
        return net(lower_up, context, coded_mask.to(context.dtype), ref)

    # -- training / estimation -------------------------------------------
    def rate_bits(self, y_coded: torch.Tensor, y_context: torch.Tensor | None = None, ref_feats=None) -> torch.Tensor:
        """Estimated bits per sample, shape ``(N,)``.

        ``y_coded`` holds the top-level values whose likelihood is evaluated
        (noisy during training, straight-through rounded otherwise);
        ``y_context`` is the rounded latent used for causal context.
        """
        if y_context is None:
            y_context = quantize_ste(y_coded)
        n = y_coded.shape[0]
        levels = build_pyramid(quantize(y_context.detach()), self.num_levels)
        num = len(levels)
        refs = self._ref_levels(ref_feats, levels)
        bits = -self._base_log2_prob(levels[0].to(y_coded.dtype)).reshape(n, -1).sum(1)
        for li in range(1, num):
            top = li == num - 1
            cur_ctx = y_context if top else levels[li].to(y_coded.dtype)
            cur_val = y_coded if top else cur_ctx
            lower = levels[li - 1]
            h, w = cur_ctx.shape[-2:]
            coded = torch.zeros(1, 1, h, w, dtype=y_coded.dtype)
            for g in make_group_plan(h, w):
                mean, scale = self.conditional_params(li, num, lower, cur_ctx * coded, coded, refs[li])
                p = gaussian_likelihood(cur_val, mean, scale)
                bits = bits - (torch.log2(p) * g.to(p.dtype)).reshape(n, -1).sum(1)
                coded = coded + g.to(coded.dtype)
        return bits

    # -- entropy coding --------------------------------------------------
    def _group_pmfs(self, li, num, levels, cur_ctx, coded, g, refs):
        # where() rather than a product so uncoded positions are +0.0 on both sides
        context = torch.where(coded > 0, cur_ctx, torch.zeros_like(cur_ctx))
        mean, scale = self.conditional_params(li, num, levels[li - 1], context, coded, refs[li])
        sel_mean = mean[0][:, g].double().numpy().ravel()
        sel_scale = scale[0][:, g].double().numpy().ravel()
        return discretize_gaussian(sel_mean, sel_scale)

    @torch.no_grad()
    def compress(self, latent: torch.Tensor, ref_feats=None, trace: list | None = None) -> bytes:
        """Range-code an integer latent of shape ``(1, C, H, W)``."""
        if latent.shape[0] != 1:
            raise ValueError("compress expects a single latent")
        if latent.min() < SYMBOL_MIN or latent.max() > SYMBOL_MAX:
            raise ValueError("latent symbols outside the coding range")
        levels = build_pyramid(latent, self.num_levels)
        num = len(levels)
        refs = self._ref_levels(ref_feats, levels)
        enc = RangeEncoder()
        base = self.base_pmf()
        _emit(0, -1, base[None])
        base_cdf = pmf_to_cdf(base).tolist()
        for s in levels[0].flatten().tolist():
            enc.encode(s - SYMBOL_MIN, base_cdf)
        dtype = next(self.parameters()).dtype
        for li in range(1, num):
            cur = levels[li]
            h, w = cur.shape[-2:]
            cur_ctx = cur.to(dtype)
            coded = torch.zeros(1, 1, h, w, dtype=dtype)
            for gi, g in enumerate(make_group_plan(h, w)):
                if trace is not None:
                    trace.append((li, gi))
                pmf = self._group_pmfs(li, num, levels, cur_ctx, coded, g, refs)
                _emit(li, gi, pmf)
                cdfs = pmf_to_cdf(pmf).tolist()
                symbols = cur[0][:, g].ravel().tolist()
                for s, cdf in zip(symbols, cdfs):
                    enc.encode(s - SYMBOL_MIN, cdf)
                coded = coded + g.to(dtype)
        return enc.finish()

    @torch.no_grad()
    def decompress(self, data: bytes, shape: tuple[int, int, int], ref_feats=None, trace: list | None = None) -> torch.Tensor:
        """Inverse of :meth:`compress`; ``shape`` is ``(C, H, W)`` of the latent."""
        c, h, w = shape
        dims = [(h, w)]
        for _ in range(effective_levels(h, w, self.num_levels) - 1):
            ph, pw = dims[0]
            dims.insert(0, ((ph + 1) // 2, (pw + 1) // 2))
        num = len(dims)
        dec = RangeDecoder(data)
        base_cdf = pmf_to_cdf(self.base_pmf()).tolist()
        n0 = c * dims[0][0] * dims[0][1]
        first = [dec.decode(base_cdf) + SYMBOL_MIN for _ in range(n0)]
        levels = [torch.tensor(first, dtype=torch.int64).view(1, c, *dims[0])]
        refs = self._ref_levels(ref_feats, dims)
        dtype = next(self.parameters()).dtype
        for li in range(1, num):
            lh, lw = dims[li]
            cur = torch.zeros(1, c, lh, lw, dtype=torch.int64)
            levels.append(cur)
            coded = torch.zeros(1, 1, lh, lw, dtype=dtype)
            for gi, g in enumerate(make_group_plan(lh, lw)):
                if trace is not None:
                    trace.append((li, gi))
                pmf = self._group_pmfs(li, num, levels, cur.to(dtype), coded, g, refs)
                cdfs = pmf_to_cdf(pmf).tolist()
                vals = [dec.decode(cdf) + SYMBOL_MIN for cdf in cdfs]
                block = cur[0]
                block[:, g] = torch.tensor(vals, dtype=torch.int64).view(c, -1)
                coded = coded + g.to(dtype)
        dec.verify_consumed()
        return levels[-1]

    @torch.no_grad()
    def estimate_bits(self, latent: torch.Tensor, ref_feats=None) -> float:
        """Ideal code length under the exact coding PMFs (before CDF quantization)."""
        levels = build_pyramid(latent, self.num_levels)
        num = len(levels)
        refs = self._ref_levels(ref_feats, levels)
        base = self.base_pmf()
        bits = -np.log2(base[(levels[0] - SYMBOL_MIN).flatten().numpy()]).sum()
        dtype = next(self.parameters()).dtype
        for li in range(1, num):
            cur = levels[li]
            h, w = cur.shape[-2:]
            coded = torch.zeros(1, 1, h, w, dtype=dtype)
            for g in make_group_plan(h, w):
                pmf = self._group_pmfs(li, num, levels, cur.to(dtype), coded, g, refs)
                sym = (cur[0][:, g].ravel() - SYMBOL_MIN).numpy()
                bits -= np.log2(pmf[np.arange(len(sym)), sym]).sum()
                coded = coded + g.to(dtype)
        return float(bits)
