"""Per-video and aggregate quality/rate reports."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .bitstream import bpp as bits_per_pixel
from .bitstream import combined_size
from .metrics import fit_scales, ms_ssim, score
from .video_io import plane_psnr, rgb_to_yuv420, yuv_psnr


@dataclass
class VideoMetrics:
    name: str
    frames: int
    width: int
    height: int
    bitstream_bytes: int
    bpp: float
    ms_ssim: float
    psnr: float
    psnr_yuv: float
    score: float
    combined_size: float


@dataclass
class MetricsReport:
    lam: float
    videos: list[VideoMetrics] = field(default_factory=list)

    @property
    def aggregate(self) -> dict:
        """Arithmetic mean over videos; combined size sums the bitstreams over one decoder."""
        if not self.videos:
            return {}
        keys = ("bpp", "ms_ssim", "psnr", "psnr_yuv", "score")
        out = {k: float(np.mean([getattr(v, k) for v in self.videos])) for k in keys}
        decoder = self.videos[0].combined_size - combined_size(0, self.videos[0].bitstream_bytes)
        out["combined_size"] = decoder + combined_size(0, sum(v.bitstream_bytes for v in self.videos))
        return out

    def to_dict(self) -> dict:
        return {"lambda": self.lam, "videos": [asdict(v) for v in self.videos], "aggregate": self.aggregate}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def records(self) -> list[str]:
        """One ``key=value`` line per video plus the aggregate."""
        lines = [" ".join(f"{k}={v}" for k, v in asdict(v).items()) for v in self.videos]
        lines.append("aggregate " + " ".join(f"{k}={v:.6f}" for k, v in self.aggregate.items()))
        return lines


def _as_uint8(frames) -> np.ndarray:
    """``(F, H, W, 3)`` uint8 from uint8 arrays or ``(F, 3, H, W)`` tensors in [0, 1]."""
    if isinstance(frames, torch.Tensor):
        return np.round(frames.detach().clamp(0, 1).permute(0, 2, 3, 1).double().numpy() * 255).astype(np.uint8)
    return np.asarray(frames, dtype=np.uint8)


def video_ms_ssim(original, reconstruction, scales: int = 4) -> float:
    """Mean per-frame MS-SSIM on 8-bit RGB frames."""
    a = torch.from_numpy(_as_uint8(original)).permute(0, 3, 1, 2).double() / 255
    b = torch.from_numpy(_as_uint8(reconstruction)).permute(0, 3, 1, 2).double() / 255
    s = fit_scales(*a.shape[-2:], scales)
    return float(ms_ssim(a, b, s, reduction="none").mean())


def video_metrics(original, reconstruction, bitstream_bytes: int, lam: float, decoder_bytes: int = 0,
                  name: str = "video", scales: int = 4) -> VideoMetrics:
    a, b = _as_uint8(original), _as_uint8(reconstruction)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    n, h, w, _ = a.shape
    quality = video_ms_ssim(a, b, scales)
    rate = bits_per_pixel(bitstream_bytes, w, h, n)
    return VideoMetrics(
        name=name, frames=n, width=w, height=h, bitstream_bytes=bitstream_bytes, bpp=rate, ms_ssim=quality,
        psnr=plane_psnr(a, b), psnr_yuv=yuv_psnr(rgb_to_yuv420(a), rgb_to_yuv420(b)),
        score=score(quality, rate, lam), combined_size=combined_size(decoder_bytes, bitstream_bytes),
    )
