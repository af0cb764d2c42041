"""Bitstream container.

Layout (all integers little-endian)::

    header   "NNVC" | version u8 | width u16 | height u16 | frame_count u32
             | intra_period u8 | flags u8
    omp      count u16 | quant_step f32 | offset f32 | codes u8[count]
             (present iff flags bit 0)
    frames   frame_index u32 | type u8 (0 intra, 1 inter) | payload_len u32
             | scalars 4 x u16 (inter only) | payload
             repeated frame_count times, in coding order

Flags bit 1 marks per-frame OMP side data at the start of each intra payload
(same layout as the OMP chunk), bit 2 disables motion scaling and bits 3-7
carry a 5-bit model fingerprint.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"NNVC"
VERSION = 1
INTRA, INTER = 0, 1
FLAG_OMP = 0x01
FLAG_FRAME_OMP = 0x02
FLAG_NO_MOTION_SCALING = 0x04
MODEL_TAG_SHIFT = 3
MODEL_TAG_MASK = 0x1F

_HEADER = struct.Struct("<4sBHHIBB")
_OMP_HEAD = struct.Struct("<Hff")
_FRAME_HEAD = struct.Struct("<IBI")
_SCALARS = struct.Struct("<4H")

SCALAR_MIN, SCALAR_MAX = -4.0, 4.0
SCALAR_STEP = (SCALAR_MAX - SCALAR_MIN) / 65536
MB = 1_000_000


class BitstreamError(ValueError):
    pass


@dataclass
class Header:
    width: int
    height: int
    frame_count: int
    intra_period: int
    flags: int = 0
    version: int = VERSION

    @property
    def has_omp(self) -> bool:
        return bool(self.flags & FLAG_OMP)

    @property
    def per_frame_omp(self) -> bool:
        return bool(self.flags & FLAG_FRAME_OMP)

    @property
    def motion_scaling(self) -> bool:
        return not self.flags & FLAG_NO_MOTION_SCALING

    @property
    def model_tag(self) -> int:
        return (self.flags >> MODEL_TAG_SHIFT) & MODEL_TAG_MASK

    @staticmethod
    def make_flags(has_omp: bool, per_frame_omp: bool = False, motion_scaling: bool = True,
                   model_tag: int = 0) -> int:
        flags = (FLAG_OMP if has_omp else 0) | (FLAG_FRAME_OMP if per_frame_omp else 0)
        flags |= 0 if motion_scaling else FLAG_NO_MOTION_SCALING
        return flags | (model_tag & MODEL_TAG_MASK) << MODEL_TAG_SHIFT


@dataclass
class OmpChunk:
    codes: np.ndarray
    quant_step: float
    offset: float

    def __post_init__(self) -> None:
        self.codes = np.asarray(self.codes, dtype=np.uint8).ravel()
        # stored as f32 on the wire
        self.quant_step = float(np.float32(self.quant_step))
        self.offset = float(np.float32(self.offset))

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, OmpChunk)
            and np.array_equal(self.codes, other.codes)
            and self.quant_step == other.quant_step
            and self.offset == other.offset
        )

    @property
    def nbytes(self) -> int:
        return _OMP_HEAD.size + len(self.codes)

    def values(self) -> np.ndarray:
        """Reconstructed float32 values, identical on encoder and decoder."""
        return (np.float32(self.offset) + self.codes.astype(np.float32) * np.float32(self.quant_step)).astype(np.float32)

    def pack(self) -> bytes:
        if len(self.codes) > 0xFFFF:
            raise BitstreamError("too many OMP codes")
        return _OMP_HEAD.pack(len(self.codes), self.quant_step, self.offset) + self.codes.tobytes()

    @classmethod
    def unpack(cls, data: bytes, pos: int = 0) -> tuple["OmpChunk", int]:
        if len(data) - pos < _OMP_HEAD.size:
            raise BitstreamError("truncated OMP chunk header")
        count, step, offset = _OMP_HEAD.unpack_from(data, pos)
        pos += _OMP_HEAD.size
        if len(data) - pos < count:
            raise BitstreamError("truncated OMP codes")
        if not (np.isfinite(step) and np.isfinite(offset)) or step < 0:
            raise BitstreamError("invalid OMP quantization parameters")
        codes = np.frombuffer(data, dtype=np.uint8, count=count, offset=pos).copy()
        return cls(codes, step, offset), pos + count


@dataclass
class FrameChunk:
    frame_index: int
    frame_type: int
    payload: bytes
    scalars: tuple[int, int, int, int] | None = None

    @property
    def nbytes(self) -> int:
        return _FRAME_HEAD.size + (_SCALARS.size if self.frame_type == INTER else 0) + len(self.payload)


@dataclass
class Bitstream:
    header: Header
    frames: list[FrameChunk] = field(default_factory=list)
    omp: OmpChunk | None = None


def encode_scalar(value: float) -> int:
    return int(min(65535, max(0, round((value - SCALAR_MIN) / SCALAR_STEP))))


def decode_scalar(code: int) -> float:
    return code * SCALAR_STEP + SCALAR_MIN


def serialize(stream: Bitstream) -> bytes:
    h = stream.header
    if (stream.omp is not None) != h.has_omp:
        raise BitstreamError("OMP chunk presence disagrees with header flags")
    try:
        out = [_HEADER.pack(MAGIC, h.version, h.width, h.height, h.frame_count, h.intra_period, h.flags)]
    except struct.error as exc:
        raise BitstreamError(f"header field out of range: {exc}") from exc
    if stream.omp is not None:
        out.append(stream.omp.pack())
    for f in stream.frames:
        out.append(_FRAME_HEAD.pack(f.frame_index, f.frame_type, len(f.payload)))
        if f.frame_type == INTER:
            if f.scalars is None:
                raise BitstreamError(f"inter frame {f.frame_index} lacks Combiner scalars")
            out.append(_SCALARS.pack(*f.scalars))
        out.append(f.payload)
    return b"".join(out)


def parse(data: bytes) -> Bitstream:
    if len(data) < _HEADER.size:
        raise BitstreamError("truncated header")
    magic, version, width, height, count, period, flags = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise BitstreamError(f"bad magic {magic!r}")
    if version != VERSION:
        raise BitstreamError(f"unsupported version {version}")
    header = Header(width, height, count, period, flags, version)
    pos = _HEADER.size
    omp = None
    if header.has_omp:
        omp, pos = OmpChunk.unpack(data, pos)
    frames = []
    seen = set()
    while pos < len(data):
        if len(data) - pos < _FRAME_HEAD.size:
            raise BitstreamError("truncated frame header")
        index, ftype, length = _FRAME_HEAD.unpack_from(data, pos)
        pos += _FRAME_HEAD.size
        if ftype not in (INTRA, INTER):
            raise BitstreamError(f"unknown frame type {ftype}")
        if index >= count or index in seen:
            raise BitstreamError(f"invalid frame index {index}")
        seen.add(index)
        scalars = None
        if ftype == INTER:
            if len(data) - pos < _SCALARS.size:
                raise BitstreamError("truncated Combiner scalars")
            scalars = _SCALARS.unpack_from(data, pos)
            pos += _SCALARS.size
        if len(data) - pos < length:
            raise BitstreamError(f"frame {index}: payload length {length} exceeds remaining {len(data) - pos} bytes")
        frames.append(FrameChunk(index, ftype, bytes(data[pos : pos + length]), scalars))
        pos += length
    if len(frames) != count:
        raise BitstreamError(f"header announces {count} frames, found {len(frames)}")
    return Bitstream(header, frames, omp)


def header_size() -> int:
    return _HEADER.size


def bpp(bitstream_bytes: int, width: int, height: int, frame_count: int) -> float:
    if width <= 0 or height <= 0 or frame_count <= 0:
        raise ValueError("dimensions must be positive")
    return 8.0 * bitstream_bytes / (width * height * frame_count)


def combined_size(decoder_bytes: float, bitstream_bytes: float) -> float:
    """Decoder size plus bitstream size / 0.019, in megabytes."""
    if decoder_bytes < 0 or bitstream_bytes < 0:
        raise ValueError("sizes must be nonnegative")
    return decoder_bytes / MB + (bitstream_bytes / MB) / 0.019
