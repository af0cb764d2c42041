"""Training stages: standalone intra, inter pretraining on uncompressed
references, and in-loop inter finetuning on hierarchical GOPs."""
from __future__ import annotations

import json
import logging
import random
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .adaptation import frozen
from .gop import build_gop_schedule
from .inter import InterConfig, InterModel, combine_terms
from .intra import IntraConfig, IntraModel, finalize
from .metrics import min_size_for_scales, ms_ssim
from .probability import quantize

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lam: float = 0.1
    lr: float = 1e-3
    epochs: int = 1
    batch: int = 8
    patch: int = 64
    scales: int = 3
    d_choices: tuple[int, ...] = (1, 2, 4)
    seed: int = 0
    finetune_lr: float | None = None
    steps_per_epoch: int | None = None
    gop: int = 8
    # over the first warmup_steps, lambda ramps up from 0 while an MSE term
    # weighted by mse_weight fades out (MS-SSIM alone has flat regions far from
    # a good reconstruction)
    warmup_steps: int = 0
    mse_weight: float = 0.0
    log_path: str | None = None

    def __post_init__(self) -> None:
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        if self.patch < min_size_for_scales(self.scales):
            raise ValueError(f"patch {self.patch} too small for {self.scales}-scale MS-SSIM")
        if self.epochs < 0 or self.batch < 1:
            raise ValueError("epochs must be >= 0 and batch >= 1")
        self.d_choices = tuple(int(d) for d in self.d_choices)
        if not self.d_choices or any(d < 1 for d in self.d_choices):
            raise ValueError("d_choices must be positive distances")

    def to_dict(self) -> dict:
        return asdict(self)


PROFILES = {
    "toy": TrainConfig(),
    "desk": TrainConfig(lr=1e-4, patch=128, scales=4, batch=8, epochs=10),
    "full": TrainConfig(lr=5e-5, finetune_lr=2e-5, patch=256, scales=5, batch=60, epochs=60),
}


def profile(name: str, **overrides) -> TrainConfig:
    if name not in PROFILES:
        raise ValueError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    return replace(PROFILES[name], **overrides)


@dataclass
class TrainResult:
    model: torch.nn.Module
    history: list[dict] = field(default_factory=list)
    audit: dict[str, int] = field(default_factory=dict)


class JsonlLog:
    """Line-delimited training records, optionally mirrored to a file."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, **record) -> None:
        self.records.append(record)
        log.info("%s", record)
        if self.path:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record) + "\n")


def seed_everything(seed: int) -> torch.Generator:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    return torch.Generator().manual_seed(seed)


def sample_distance(gen: torch.Generator, choices=(1, 2, 4)) -> int:
    """Reference distance drawn uniformly from ``choices``."""
    return int(choices[int(torch.randint(len(choices), (1,), generator=gen))])


def _crop(frames: torch.Tensor, size: int, gen: torch.Generator) -> torch.Tensor:
    """Same random ``size``-square crop and flips of every frame in ``(..., H, W)``."""
    h, w = frames.shape[-2:]
    size_h, size_w = min(size, h), min(size, w)
    top = int(torch.randint(h - size_h + 1, (1,), generator=gen))
    left = int(torch.randint(w - size_w + 1, (1,), generator=gen))
    out = frames[..., top : top + size_h, left : left + size_w]
    flips = torch.randint(2, (2,), generator=gen).tolist()
    dims = [d for d, f in zip((-1, -2), flips) if f]
    return out.flip(dims) if dims else out


def _rd_terms(x, x_hat, bits, scales):
    """Batch MS-SSIM and bits per pixel."""
    n, _, h, w = x.shape
    quality = ms_ssim(x, x_hat, scales)
    bpp = bits.sum() / (n * h * w)
    return quality, bpp


def _pick_clips(dataset: list[torch.Tensor], count: int, gen: torch.Generator) -> list[torch.Tensor]:
    """``count`` random clips sharing the frame size of the first draw, so a
    batch carries a single source resolution."""
    first = dataset[int(torch.randint(len(dataset), (1,), generator=gen))]
    group = [c for c in dataset if c.shape[-2:] == first.shape[-2:]]
    rest = [group[int(torch.randint(len(group), (1,), generator=gen))] for _ in range(count - 1)]
    return [first] + rest


def training_loss(cfg: TrainConfig, step: int, x, x_hat, bits):
    """RD loss with the warm-up schedule; returns ``(loss, ms_ssim, bpp)``."""
    quality, bpp = _rd_terms(x, x_hat, bits, cfg.scales)
    frac = min(1.0, (step + 1) / cfg.warmup_steps) if cfg.warmup_steps > 0 else 1.0
    loss = -quality + frac * cfg.lam * bpp
    if frac < 1.0 and cfg.mse_weight > 0:
        loss = loss + (1.0 - frac) * cfg.mse_weight * torch.mean((x - x_hat) ** 2)
    return loss, quality, bpp


def _epoch_steps(cfg: TrainConfig, available: int) -> int:
    return cfg.steps_per_epoch or max(1, available // cfg.batch)


def train_intra(dataset: list[torch.Tensor], cfg: TrainConfig, model: IntraModel | None = None,
                model_cfg: IntraConfig | None = None) -> TrainResult:
    """Train the intra codec on every frame of every clip."""
    gen = seed_everything(cfg.seed)
    model = model or IntraModel(model_cfg)
    model.train()
    frames = [clip[i] for clip in dataset for i in range(len(clip))]
    if not frames:
        raise ValueError("empty dataset")
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    logger = JsonlLog(cfg.log_path)
    global_step = 0
    for epoch in range(cfg.epochs):
        order = torch.randperm(len(frames), generator=gen).tolist()
        totals = np.zeros(3)
        steps = _epoch_steps(cfg, len(frames))
        for step in range(steps):
            idx = [order[(step * cfg.batch + k) % len(order)] for k in range(cfg.batch)]
            x = torch.stack([_crop(frames[i], cfg.patch, gen) for i in idx])
            out = model(x)
            loss, quality, bpp = training_loss(cfg, global_step, x, out["x_hat"], out["bits"])
            global_step += 1
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite intra loss at epoch {epoch} step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            totals += [loss.item(), bpp.item(), quality.item()]
        totals /= steps
        logger.write(stage="intra", epoch=epoch, loss=float(totals[0]), bpp=float(totals[1]), ms_ssim=float(totals[2]))
    model.eval()
    return TrainResult(model, logger.records)


def _pretrain_sample(clip: torch.Tensor, d: int, gop: int, gen: torch.Generator):
    """Frame indices ``(t - d, t, t + d, intra_prev, intra_next)`` at a
    hierarchical position with distance ``d``."""
    sched = build_gop_schedule(len(clip), gop)
    steps = [s for s in sched.steps if s.distance == d]
    if not steps:
        raise ValueError(f"clip of {len(clip)} frames has no position with reference distance {d}")
    s = steps[int(torch.randint(len(steps), (1,), generator=gen))]
    return s.ref_prev, s.target, s.ref_next, s.intra_prev, s.intra_next


def pretrain_inter(dataset: list[torch.Tensor], cfg: TrainConfig, model: InterModel | None = None,
                   model_cfg: InterConfig | None = None) -> TrainResult:
    """Train the inter codec on ``(x_{t-d}, x_t, x_{t+d})`` with uncompressed references."""
    gen = seed_everything(cfg.seed)
    model = model or InterModel(model_cfg)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    logger = JsonlLog(cfg.log_path)
    global_step = 0
    for epoch in range(cfg.epochs):
        totals = np.zeros(3)
        steps = _epoch_steps(cfg, sum(len(c) for c in dataset))
        for step in range(steps):
            batch = []
            clips = _pick_clips(dataset, cfg.batch, gen)
            for clip in clips:
                d = sample_distance(gen, cfg.d_choices)
                idx = _pretrain_sample(clip, d, cfg.gop, gen)
                batch.append(_crop(clip[list(idx)], cfg.patch, gen))
            b = torch.stack(batch)  # (N, 5, 3, P, P)
            x_t = b[:, 1]
            resolution = tuple(clips[0].shape[-2:])
            out = model(x_t, b[:, 0], b[:, 2], b[:, 3], b[:, 4], resolution=resolution)
            loss, quality, bpp = training_loss(cfg, global_step, x_t, out["x_hat"], out["bits"])
            global_step += 1
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite inter loss at epoch {epoch} step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            totals += [loss.item(), bpp.item(), quality.item()]
        totals /= steps
        logger.write(stage="pretrain_inter", epoch=epoch, loss=float(totals[0]), bpp=float(totals[1]), ms_ssim=float(totals[2]))
    model.eval()
    return TrainResult(model, logger.records)


@torch.no_grad()
def intra_reconstruct(intra: IntraModel, x: torch.Tensor) -> torch.Tensor:
    """Frozen intra codec without overfitting: round the latent, decode, snap to 8 bits."""
    y = quantize(intra.analysis(x))
    return finalize(intra.synthesis(y, size=x.shape[-2:]))


def gop_losses(intra: IntraModel, inter: InterModel, gop_frames: torch.Tensor, lam: float, scales: int,
               provenance: dict | None = None, training: bool = True, resolution=None):
    """Code a batch of GOPs ``(N, G + 1, 3, H, W)`` in hierarchical order.

    Endpoints come from the frozen intra codec; every inter frame is predicted
    from reconstructions only. Returns per-frame ``(loss, bpp, ms_ssim)``
    tensors in coding order.
    """
    g = gop_frames.shape[1] - 1
    sched = build_gop_schedule(g + 1, g)
    recon = {}
    source = {}
    for i in sched.intra_indices:
        recon[i] = intra_reconstruct(intra, gop_frames[:, i])
        source[i] = "intra"
    losses = []
    for step in sched.steps:
        refs = (step.ref_prev, step.ref_next, step.intra_prev, step.intra_next)
        if provenance is not None:
            for r in refs:
                kind = source.get(r, "ground_truth")
                provenance[kind] = provenance.get(kind, 0) + 1
        x_t = gop_frames[:, step.target]
        if training:
            out = inter(x_t, *(recon[r] for r in refs), resolution=resolution)
            x_hat, bits = out["x_hat"], out["bits"]
        else:
            with torch.no_grad():
                y = quantize(inter.encode_latent(x_t, recon[step.ref_prev], recon[step.ref_next]))
                h, w = x_t.shape[-2:]
                terms = inter.prediction_terms(y, *(recon[r] for r in refs), h, w, resolution=resolution)
                x_hat = finalize(combine_terms(terms["x_tilde"], terms["f_bwd"], terms["f_fwd"], terms["e_t"],
                                               inter.scalars))
                bits = inter.prob.rate_bits(y, None, inter.entropy_context(recon[step.ref_prev], recon[step.ref_next]))
        quality, bpp = _rd_terms(x_t, x_hat, bits, scales)
        losses.append((-quality + lam * bpp, bpp, quality))
        recon[step.target] = finalize(x_hat.detach())
        source[step.target] = "inter"
    return losses


def finetune_inter(intra: IntraModel, inter: InterModel, dataset: list[torch.Tensor], cfg: TrainConfig) -> TrainResult:
    """Finetune the inter codec in the loop on ``cfg.gop``-frame GOPs with the
    intra codec frozen; the frame losses of each GOP set are accumulated."""
    gen = seed_everything(cfg.seed)
    clips = [c for c in dataset if len(c) > cfg.gop]
    if not clips:
        raise ValueError(f"finetuning needs clips longer than {cfg.gop} frames")
    intra.eval()
    inter.train()
    opt = torch.optim.Adam(inter.parameters(), lr=cfg.finetune_lr or cfg.lr)
    logger = JsonlLog(cfg.log_path)
    provenance: dict[str, int] = {}
    with frozen(intra):
        for epoch in range(cfg.epochs):
            totals = np.zeros(3)
            steps = _epoch_steps(cfg, len(clips))
            for step in range(steps):
                sets = []
                chosen = _pick_clips(clips, cfg.batch, gen)
                for clip in chosen:
                    start = int(torch.randint(len(clip) - cfg.gop, (1,), generator=gen))
                    sets.append(_crop(clip[start : start + cfg.gop + 1], cfg.patch, gen))
                gop = torch.stack(sets)
                losses = gop_losses(intra, inter, gop, cfg.lam, cfg.scales, provenance,
                                    resolution=tuple(chosen[0].shape[-2:]))
                loss = torch.stack([l[0] for l in losses]).sum()
                if not torch.isfinite(loss):
                    raise FloatingPointError(f"non-finite finetune loss at epoch {epoch} step {step}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                k = len(losses)
                totals += [loss.item() / k, sum(l[1].item() for l in losses) / k, sum(l[2].item() for l in losses) / k]
            totals /= steps
            logger.write(stage="finetune_inter", epoch=epoch, loss=float(totals[0]), bpp=float(totals[1]), ms_ssim=float(totals[2]))
    inter.eval()
    if provenance.get("ground_truth", 0):
        raise AssertionError("ground-truth frames used as references during finetuning")
    return TrainResult(inter, logger.records, provenance)


@torch.no_grad()
def evaluate_intra(model: IntraModel, frames: torch.Tensor, lam: float, scales: int = 3) -> dict:
    """Loss, bpp and MS-SSIM with hard rounding and 8-bit output on ``(N, 3, H, W)`` frames."""
    model.eval()
    y = quantize(model.analysis(frames))
    x_hat = finalize(model.synthesis(y, size=frames.shape[-2:]))
    quality, bpp = _rd_terms(frames, x_hat, model.prob.rate_bits(y), scales)
    return {"loss": float(-quality + lam * bpp), "bpp": float(bpp), "ms_ssim": float(quality)}


@torch.no_grad()
def evaluate_gops(intra: IntraModel, inter: InterModel, clips: list[torch.Tensor], lam: float, scales: int = 3,
                  gop: int = 8) -> dict:
    """Mean inter-frame loss with compressed references over the first GOP of each clip."""
    inter.eval()
    rows = []
    for clip in clips:
        losses = gop_losses(intra, inter, clip[None, : gop + 1], lam, scales, training=False)
        rows.extend((float(l), float(b), float(q)) for l, b, q in losses)
    loss, bpp, quality = np.mean(rows, axis=0)
    return {"loss": float(loss), "bpp": float(bpp), "ms_ssim": float(quality), "score": float(-loss)}
