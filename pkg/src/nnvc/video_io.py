"""Raw video ingestion and emission.

Supported layouts:

* ``yuv420``: planar 8-bit 4:2:0 file; dimensions from a ``<file>.meta``
  sidecar holding ``"width height frame_count"`` or a ``_WxH`` filename suffix.
* ``rgb24``: interleaved 8-bit RGB file, same sidecar rules.
* ``png``: a directory of numbered frame images.

Colour conversion is BT.601 full range with 2x2-averaged chroma; it is lossy.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FORMATS = ("yuv420", "rgb24", "png")


class VideoFormatError(ValueError):
    pass


@dataclass
class VideoSequence:
    """Frames in their native layout.

    ``rgb24``/``png``: ``frames`` is ``(F, H, W, 3)`` uint8. ``yuv420``: ``frames``
    is a ``(Y, U, V)`` tuple of ``(F, H, W)``, ``(F, ceil(H/2), ceil(W/2))`` arrays.
    """

    frames: object
    width: int
    height: int
    format: str

    @property
    def frame_count(self) -> int:
        return len(self.frames[0]) if self.format == "yuv420" else len(self.frames)


def chroma_size(height: int, width: int) -> tuple[int, int]:
    return (height + 1) // 2, (width + 1) // 2


def yuv420_frame_bytes(height: int, width: int) -> int:
    ch, cw = chroma_size(height, width)
    return height * width + 2 * ch * cw


def sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta")


def _dims_for(path: Path, fmt: str) -> tuple[int, int, int | None]:
    meta = sidecar_path(path)
    if meta.exists():
        fields = meta.read_text().split()
        if len(fields) != 3:
            raise VideoFormatError(f"sidecar {meta} must hold 'width height frame_count'")
        w, h, n = (int(v) for v in fields)
        return w, h, n
    m = re.search(r"_(\d+)x(\d+)", path.stem)
    if m:
        return int(m.group(1)), int(m.group(2)), None
    raise VideoFormatError(f"no sidecar or _WxH suffix for {path}")


def _guess_format(path: Path) -> str:
    if path.is_dir():
        return "png"
    if path.suffix == ".rgb":
        return "rgb24"
    return "yuv420"


def read_video(path, fmt: str | None = None) -> VideoSequence:
    path = Path(path)
    fmt = fmt or _guess_format(path)
    if fmt not in FORMATS:
        raise VideoFormatError(f"unknown format {fmt!r}")
    if fmt == "png":
        from PIL import Image

        files = sorted(p for p in path.iterdir() if p.suffix.lower() in (".png", ".bmp", ".ppm", ".jpg"))
        if not files:
            raise VideoFormatError(f"no frame images in {path}")
        frames = np.stack([np.asarray(Image.open(p).convert("RGB")) for p in files])
        return VideoSequence(frames, frames.shape[2], frames.shape[1], "png")
    w, h, n = _dims_for(path, fmt)
    raw = np.fromfile(path, dtype=np.uint8)
    per_frame = yuv420_frame_bytes(h, w) if fmt == "yuv420" else h * w * 3
    if n is None:
        n = len(raw) // per_frame
    if len(raw) < n * per_frame or n == 0:
        raise VideoFormatError(f"{path} truncated: {len(raw)} bytes for {n} frames of {per_frame}")
    if len(raw) != n * per_frame:
        raise VideoFormatError(f"{path}: size {len(raw)} does not match {n} frames of {w}x{h}")
    if fmt == "rgb24":
        return VideoSequence(raw.reshape(n, h, w, 3), w, h, fmt)
    ch, cw = chroma_size(h, w)
    frames = raw.reshape(n, per_frame)
    y = frames[:, : h * w].reshape(n, h, w)
    u = frames[:, h * w : h * w + ch * cw].reshape(n, ch, cw)
    v = frames[:, h * w + ch * cw :].reshape(n, ch, cw)
    return VideoSequence((y, u, v), w, h, fmt)


def write_video(seq: VideoSequence, path, fmt: str | None = None) -> None:
    path = Path(path)
    fmt = fmt or seq.format
    if fmt != seq.format:
        seq = convert(seq, fmt)
    if fmt == "png":
        from PIL import Image

        path.mkdir(parents=True, exist_ok=True)
        for i, frame in enumerate(seq.frames):
            Image.fromarray(frame).save(path / f"{i:05d}.png")
        return
    if fmt == "rgb24":
        data = np.ascontiguousarray(seq.frames, dtype=np.uint8).tobytes()
    else:
        y, u, v = seq.frames
        n = len(y)
        data = np.concatenate([y.reshape(n, -1), u.reshape(n, -1), v.reshape(n, -1)], 1).tobytes()
    path.write_bytes(data)
    sidecar_path(path).write_text(f"{seq.width} {seq.height} {seq.frame_count}\n")


def rgb_to_yuv420(frames: np.ndarray):
    """``(F, H, W, 3)`` uint8 RGB -> ``(Y, U, V)`` uint8 planes (BT.601 full range)."""
    rgb = frames.astype(np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    u = 128 - 0.168736 * r - 0.331264 * g + 0.5 * b
    v = 128 + 0.5 * r - 0.418688 * g - 0.081312 * b

    def down(c):
        h, w = c.shape[1:]
        c = np.pad(c, ((0, 0), (0, h % 2), (0, w % 2)), mode="edge")
        return (c[:, 0::2, 0::2] + c[:, 1::2, 0::2] + c[:, 0::2, 1::2] + c[:, 1::2, 1::2]) / 4

    to8 = lambda c: np.clip(np.round(c), 0, 255).astype(np.uint8)
    return to8(y), to8(down(u)), to8(down(v))


def yuv420_to_rgb(y: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    h, w = y.shape[1:]
    up = lambda c: c.repeat(2, axis=1).repeat(2, axis=2)[:, :h, :w].astype(np.float64) - 128
    yf, cb, cr = y.astype(np.float64), up(u), up(v)
    r = yf + 1.402 * cr
    g = yf - 0.344136 * cb - 0.714136 * cr
    b = yf + 1.772 * cb
    return np.clip(np.round(np.stack([r, g, b], -1)), 0, 255).astype(np.uint8)


def to_rgb_frames(seq: VideoSequence) -> np.ndarray:
    if seq.format == "yuv420":
        return yuv420_to_rgb(*seq.frames)
    return np.asarray(seq.frames)


def convert(seq: VideoSequence, fmt: str) -> VideoSequence:
    if fmt == seq.format:
        return seq
    rgb = to_rgb_frames(seq)
    if fmt == "yuv420":
        return VideoSequence(rgb_to_yuv420(rgb), seq.width, seq.height, fmt)
    return VideoSequence(rgb, seq.width, seq.height, fmt)


def from_rgb(frames: np.ndarray, fmt: str = "rgb24") -> VideoSequence:
    seq = VideoSequence(np.asarray(frames, dtype=np.uint8), frames.shape[2], frames.shape[1], "rgb24")
    return convert(seq, fmt) if fmt != "rgb24" else seq


def plane_psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2)
    return 99.0 if mse == 0 else min(99.0, 10 * np.log10(255.0**2 / mse))


def yuv_psnr(a: tuple, b: tuple) -> float:
    """Per-plane PSNR combined with 6:1:1 weights (Y:U:V)."""
    return (6 * plane_psnr(a[0], b[0]) + plane_psnr(a[1], b[1]) + plane_psnr(a[2], b[2])) / 8
