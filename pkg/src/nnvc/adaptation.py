"""Inference-time adaptation of signaled quantities.

Every optimizer here follows a keep-best rule: the objective is evaluated on
the quantized (signalable) value at each step and the best one seen, starting
with the initialization, is returned. A result is never worse than its start.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .bitstream import OmpChunk, decode_scalar, encode_scalar
from .blocks import OMPSet
from .inter import CombinerScalars, combine_terms
from .intra import IntraModel, QuantizedLatent, finalize
from .metrics import fit_scales, ms_ssim
from .probability import SYMBOL_MAX, SYMBOL_MIN, quantize_ste

STRATEGIES = ("c1", "c2", "c3")


@dataclass
class OverfitConfig:
    steps: int = 100
    lr: float = 1e-2
    lam: float = 0.1
    strategy: str = "c1"
    scales: int = 4

    def __post_init__(self) -> None:
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown OMP strategy {self.strategy!r}")


def latent_config(lam: float = 0.1, steps: int = 100, scales: int = 4) -> OverfitConfig:
    return OverfitConfig(steps=steps, lr=1e-2, lam=lam, scales=scales)


def omp_config(lam: float = 0.1, strategy: str = "c1", steps: int = 200, scales: int = 4) -> OverfitConfig:
    return OverfitConfig(steps=steps, lr=1e-3, lam=lam, strategy=strategy, scales=scales)


def scalar_config(lam: float = 0.1, steps: int = 50, scales: int = 4) -> OverfitConfig:
    return OverfitConfig(steps=steps, lr=1e-3, lam=lam, scales=scales)


@dataclass
class OverfitResult:
    value: object
    initial_loss: float
    final_loss: float
    aborted: bool = False
    history: list[float] = field(default_factory=list)

    @property
    def improved(self) -> bool:
        return self.final_loss < self.initial_loss


@dataclass
class GateDecision:
    included: bool
    loss_with: float
    loss_without: float

    @property
    def signaled_loss(self) -> float:
        return self.loss_with if self.included else self.loss_without


@contextlib.contextmanager
def frozen(module: torch.nn.Module):
    """Temporarily stop gradients into ``module``'s weights."""
    flags = [p.requires_grad for p in module.parameters()]
    for p in module.parameters():
        p.requires_grad_(False)
    try:
        yield module
    finally:
        for p, flag in zip(module.parameters(), flags):
            p.requires_grad_(flag)


def _snap(x_hat: torch.Tensor) -> torch.Tensor:
    """8-bit reconstruction in the forward pass, identity gradient."""
    return x_hat + (finalize(x_hat) - x_hat).detach()


def frame_distortion(target: torch.Tensor, x_hat: torch.Tensor, scales: int = 4) -> torch.Tensor:
    """Negative MS-SSIM of the 8-bit reconstruction, the objective's distortion term."""
    s = fit_scales(*target.shape[-2:], scales)
    return -ms_ssim(target, _snap(x_hat), s)


def latent_objective(model: IntraModel, symbols: torch.Tensor, target: torch.Tensor, lam: float,
                     scales: int = 4, omps: OMPSet | None = None) -> torch.Tensor:
    """RD loss of a (possibly straight-through) quantized intra latent."""
    h, w = target.shape[-2:]
    x_hat = model.synthesis(symbols, omps, (h, w))
    bits = model.prob.rate_bits(symbols).sum()
    return frame_distortion(target, x_hat, scales) + lam * bits / (h * w * target.shape[0])


def overfit_latent(latent: QuantizedLatent, model: IntraModel, target: torch.Tensor, cfg: OverfitConfig,
                   omps: OMPSet | None = None) -> OverfitResult:
    """Refine an intra latent for ``target`` with the decoder frozen.

    A continuous copy is optimized with straight-through rounding; the returned
    ``value`` is a :class:`QuantizedLatent` whose RD loss is no worse than the
    initial one. A non-finite loss aborts and returns the initial latent.
    """
    dtype = next(model.parameters()).dtype
    initial = latent.symbols
    with torch.no_grad():
        init_loss = float(latent_objective(model, initial.to(dtype), target, cfg.lam, cfg.scales, omps))
    result = OverfitResult(latent, init_loss, init_loss, history=[init_loss])
    if cfg.steps == 0 or not math.isfinite(init_loss):
        return result
    best, best_loss = initial, init_loss
    y = initial.to(dtype).clone().requires_grad_(True)
    opt = torch.optim.Adam([y], lr=cfg.lr)
    with frozen(model):
        for step in range(cfg.steps + 1):
            y_q = quantize_ste(y).clamp(SYMBOL_MIN, SYMBOL_MAX)
            final = step == cfg.steps
            with torch.set_grad_enabled(not final):
                loss = latent_objective(model, y_q, target, cfg.lam, cfg.scales, omps)
            value = float(loss.detach())
            if not math.isfinite(value):
                return OverfitResult(latent, init_loss, init_loss, aborted=True, history=result.history)
            if step > 0:
                result.history.append(value)
                if value < best_loss:
                    best, best_loss = y_q.detach().to(torch.int64), value
            if final:
                break
            opt.zero_grad()
            loss.backward()
            opt.step()
    out = QuantizedLatent(best, latent.height, latent.width, latent.scale_factor, latent.symbol_range)
    return OverfitResult(out, init_loss, best_loss, history=result.history)


def overfit_omps(model: IntraModel, frame: torch.Tensor, latent: QuantizedLatent, cfg: OverfitConfig) -> OverfitResult:
    """Optimize the strategy's OMPs to minimize the distortion of ``frame``.

    The returned ``value`` is an unquantized :class:`OMPSet`; it starts at 1
    and keeps the lowest-distortion values seen. Strategy ``c3`` returns an
    empty set.
    """
    placement = model.omp_placement(cfg.strategy)
    omps = OMPSet.ones(placement)
    dtype = next(model.parameters()).dtype
    y = latent.symbols.to(dtype)
    size = (latent.height, latent.width)

    def objective(values):
        return frame_distortion(frame, model.synthesis(y, OMPSet(placement, values), size), cfg.scales)

    with torch.no_grad():
        init_loss = float(objective(omps.values.to(dtype)))
    if not placement or cfg.steps == 0:
        return OverfitResult(omps, init_loss, init_loss, history=[init_loss])
    values = omps.values.to(dtype).clone().requires_grad_(True)
    opt = torch.optim.Adam([values], lr=cfg.lr)
    best, best_loss, history = omps.values.clone(), init_loss, [init_loss]
    with frozen(model):
        for step in range(cfg.steps + 1):
            final = step == cfg.steps
            with torch.set_grad_enabled(not final):
                loss = objective(values)
            value = float(loss.detach())
            if not math.isfinite(value):
                break
            if step > 0:
                history.append(value)
                if value < best_loss:
                    best, best_loss = values.detach().to(torch.float32).clone(), value
            if final:
                break
            opt.zero_grad()
            loss.backward()
            opt.step()
    return OverfitResult(OMPSet(placement, best), init_loss, best_loss, history=history)


def quantize_omps(values) -> tuple[np.ndarray, float, float]:
    """Uniform 8-bit quantizer over ``[min, max]`` of the values.

    Returns ``(codes, quant_step, offset)`` with step and offset representable
    in float32, chosen so the grid covers the range; the reconstruction
    ``offset + code * step`` (see :func:`dequantize_omps`) is within step/2 of
    every value. Identical values give step 0 and exact reconstruction.
    """
    if isinstance(values, torch.Tensor):
        values = values.detach().cpu().numpy()
    v = np.asarray(values, dtype=np.float32).astype(np.float64).ravel()
    if v.size == 0:
        return np.zeros(0, np.uint8), 0.0, 0.0
    if not np.isfinite(v).all():
        raise ValueError("non-finite OMP values")
    lo, hi = float(v.min()), float(v.max())
    offset = float(np.float32(lo))  # exact: lo is a float32 value
    if hi == lo:
        return np.zeros(v.size, np.uint8), 0.0, offset
    raw = (hi - offset) / 255
    step = np.float32(raw)
    if float(step) < raw:
        step = np.nextafter(step, np.float32(np.inf))
    step = float(step)
    base = np.clip(np.floor((v - offset) / step), 0, 255)
    up = np.clip(base + 1, 0, 255)
    err_base = np.abs(v - (offset + base * step))
    err_up = np.abs(v - (offset + up * step))
    codes = np.where(err_up < err_base, up, base).astype(np.uint8)
    return codes, step, offset


def dequantize_omps(codes, quant_step: float, offset: float) -> np.ndarray:
    """``offset + code * step`` in float64 (exact for float32 step and offset)."""
    return float(offset) + np.asarray(codes, dtype=np.float64) * float(quant_step)


def quantized_omp_set(omps: OMPSet) -> OMPSet:
    """Replace an OMPSet's values by their 8-bit reconstruction."""
    codes, step, offset = quantize_omps(omps.values)
    values = torch.from_numpy(dequantize_omps(codes, step, offset)).to(torch.float32)
    return OMPSet(omps.placement, values, step, offset, codes)


def omp_chunk(omps: OMPSet) -> OmpChunk:
    codes = omps.codes if omps.codes is not None else quantize_omps(omps.values)[0]
    return OmpChunk(codes, omps.quant_step, omps.offset)


def omp_bits(omps: OMPSet) -> int:
    """Side-channel cost of signaling ``omps`` in the container."""
    return 8 * omp_chunk(omps).nbytes


@torch.no_grad()
def video_intra_loss(model: IntraModel, latents: list[QuantizedLatent], frames: list[torch.Tensor], lam: float,
                     scales: int = 4, omps: OMPSet | None = None, extra_bits: float = 0.0) -> float:
    """Mean RD loss over intra frames; ``extra_bits`` is charged to the video's rate."""
    dtype = next(model.parameters()).dtype
    pixels = sum(f.shape[-1] * f.shape[-2] for f in frames)
    distortion = 0.0
    bits = float(extra_bits)
    for latent, frame in zip(latents, frames):
        symbols = latent.symbols.to(dtype)
        x_hat = model.synthesis(symbols, omps, (latent.height, latent.width))
        distortion += float(frame_distortion(frame, x_hat, scales))
        bits += float(model.prob.rate_bits(symbols).sum())
    return distortion / len(frames) + lam * bits / pixels


def gate_omps(model: IntraModel, latents: list[QuantizedLatent], frames: list[torch.Tensor], omps: OMPSet,
              omp_bit_cost: float, lam: float, scales: int = 4) -> GateDecision:
    """Signal the quantized OMPs only if they strictly lower the video loss,
    their own side-channel bits included."""
    without = video_intra_loss(model, latents, frames, lam, scales)
    if not omps.placement:
        return GateDecision(False, without, without)
    with_omps = video_intra_loss(model, latents, frames, lam, scales, omps, omp_bit_cost)
    return GateDecision(with_omps < without, with_omps, without)


def quantize_scalars(values) -> tuple[int, int, int, int]:
    return tuple(encode_scalar(float(v)) for v in values)


def dequantize_scalars(codes) -> torch.Tensor:
    return torch.tensor([decode_scalar(c) for c in codes], dtype=torch.float64)


def _scalar_ste(s: torch.Tensor) -> torch.Tensor:
    codes = quantize_scalars(s.detach().tolist())
    snapped = dequantize_scalars(codes).to(s.dtype)
    return s + (snapped - s).detach()


def scalar_objective(terms: dict, target: torch.Tensor, scalars: torch.Tensor, scales: int = 4) -> torch.Tensor:
    x_hat = combine_terms(terms["x_tilde"], terms["f_bwd"], terms["f_fwd"], terms["e_t"], scalars)
    return frame_distortion(target, x_hat, scales)


def overfit_combiner_scalars(terms: dict, target: torch.Tensor, defaults, cfg: OverfitConfig) -> OverfitResult:
    """Adapt the four Combiner scalars to one inter frame.

    ``terms`` are the precomputed Combiner inputs (``x_tilde``, ``f_bwd``,
    ``f_fwd``, ``e_t``). The returned ``value`` is a tuple of four 16-bit codes;
    its distortion is no worse than that of the quantized trained defaults.
    """
    if isinstance(defaults, CombinerScalars):
        defaults = defaults.as_tensor(torch.float64)
    dtype = terms["x_tilde"].dtype
    init_codes = quantize_scalars(defaults.tolist())
    init = dequantize_scalars(init_codes).to(dtype)
    with torch.no_grad():
        init_loss = float(scalar_objective(terms, target, init, cfg.scales))
    best_codes, best_loss, history = init_codes, init_loss, [init_loss]
    if cfg.steps == 0:
        return OverfitResult(best_codes, init_loss, init_loss, history=history)
    s = init.clone().requires_grad_(True)
    opt = torch.optim.Adam([s], lr=cfg.lr)
    for step in range(cfg.steps + 1):
        final = step == cfg.steps
        s_q = _scalar_ste(s)
        with torch.set_grad_enabled(not final):
            loss = scalar_objective(terms, target, s_q, cfg.scales)
        value = float(loss.detach())
        if not math.isfinite(value):
            break
        if step > 0:
            history.append(value)
            if value < best_loss:
                best_codes, best_loss = quantize_scalars(s_q.detach().tolist()), value
        if final:
            break
        opt.zero_grad()
        loss.backward()
        opt.step()
    return OverfitResult(best_codes, init_loss, best_loss, history=history)
