"""Synthetic clips and dataset loading for training and tests."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from scipy import ndimage


def _texture(rng: np.random.Generator, height: int, width: int, zoom: float) -> np.ndarray:
    """Smooth multi-scale colour texture with a few hard-edged shapes, in [0, 1]."""
    h, w = int(np.ceil(height / zoom)) + 2, int(np.ceil(width / zoom)) + 2
    img = np.zeros((h, w, 3))
    for sigma, amp in ((8.0, 0.6), (3.0, 0.3), (1.0, 0.15)):
        noise = rng.standard_normal((h, w, 3))
        layer = ndimage.gaussian_filter(noise, (sigma, sigma, 0))
        img += amp * layer / (layer.std() + 1e-8)
    yy, xx = np.mgrid[:h, :w]
    for _ in range(max(2, h * w // 400)):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(2, max(3, min(h, w) / 5))
        colour = rng.uniform(-1, 1, 3)
        if rng.random() < 0.5:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r**2
        else:
            mask = (abs(yy - cy) < r) & (abs(xx - cx) < r * rng.uniform(0.5, 1.5))
        img[mask] = 0.5 * img[mask] + colour
    img = (img - img.min()) / (img.max() - img.min() + 1e-8)
    if zoom != 1.0:
        img = ndimage.zoom(img, (zoom, zoom, 1), order=1)
    return img


def synthetic_video(
    num_frames: int,
    height: int,
    width: int,
    velocity: tuple[float, float] = (1.0, 0.0),
    seed: int = 0,
    zoom: float = 1.0,
) -> np.ndarray:
    """Globally translating texture as ``(F, H, W, 3)`` uint8.

    ``velocity`` is ``(vx, vy)`` in pixels per frame; frame ``t`` shows the
    texture shifted so that content moves by ``t * velocity``.
    """
    rng = np.random.default_rng(seed)
    vx, vy = velocity
    margin = int(np.ceil(max(abs(vx), abs(vy)) * num_frames)) + 2
    tex = _texture(rng, height + 2 * margin, width + 2 * margin, zoom)
    yy, xx = np.mgrid[:height, :width].astype(np.float64)
    frames = []
    for t in range(num_frames):
        coords_y = yy + margin - vy * t
        coords_x = xx + margin - vx * t
        frame = np.stack(
            [ndimage.map_coordinates(tex[..., c], [coords_y, coords_x], order=1, mode="nearest") for c in range(3)],
            -1,
        )
        frames.append(frame)
    return np.round(np.clip(np.stack(frames), 0, 1) * 255).astype(np.uint8)


def to_tensor(frames: np.ndarray) -> torch.Tensor:
    """``(F, H, W, 3)`` uint8 -> ``(F, 3, H, W)`` float32 in [0, 1]."""
    return torch.from_numpy(np.ascontiguousarray(frames)).permute(0, 3, 1, 2).float() / 255.0


def to_uint8(frames: torch.Tensor) -> np.ndarray:
    return np.round(frames.detach().clamp(0, 1).permute(0, 2, 3, 1).double().numpy() * 255).astype(np.uint8)


def toy_dataset(num_clips: int, num_frames: int = 9, sizes=((64, 64),), seed: int = 0,
                speed: float = 1.5, scale_motion_with_size: bool = True) -> list[torch.Tensor]:
    """Clips with random direction and speed; larger frames get proportionally
    faster motion and coarser texture, as if the same scenes were filmed at a
    higher resolution."""
    rng = np.random.default_rng(seed)
    base = min(h for h, _ in sizes)
    clips = []
    for i in range(num_clips):
        h, w = sizes[i % len(sizes)]
        factor = h / base if scale_motion_with_size else 1.0
        angle = rng.uniform(0, 2 * np.pi)
        mag = rng.uniform(0.25, 1.0) * speed * factor
        v = (mag * np.cos(angle), mag * np.sin(angle))
        clips.append(to_tensor(synthetic_video(num_frames, h, w, v, seed=int(rng.integers(1 << 31)), zoom=factor)))
    return clips


def load_dataset(root: str | Path, fmt: str | None = None) -> list[torch.Tensor]:
    """Every video below ``root``: subdirectories of numbered frames, or raw files with sidecars."""
    from .video_io import read_video, to_rgb_frames

    root = Path(root)
    clips = []
    for entry in sorted(root.iterdir()):
        if entry.is_dir() or entry.suffix in (".yuv", ".rgb"):
            seq = read_video(entry, fmt)
            clips.append(to_tensor(to_rgb_frames(seq)))
    if not clips:
        raise FileNotFoundError(f"no videos found under {root}")
    return clips
