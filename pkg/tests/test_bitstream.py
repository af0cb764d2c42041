import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nnvc.bitstream import (
    INTER,
    INTRA,
    SCALAR_STEP,
    Bitstream,
    BitstreamError,
    FrameChunk,
    Header,
    OmpChunk,
    bpp,
    combined_size,
    decode_scalar,
    encode_scalar,
    header_size,
    parse,
    serialize,
)


def random_stream(rng: np.random.Generator) -> Bitstream:
    n = int(rng.integers(0, 12))
    has_omp = bool(rng.integers(0, 2))
    flags = Header.make_flags(has_omp, bool(rng.integers(0, 2)), bool(rng.integers(0, 2)), int(rng.integers(0, 32)))
    header = Header(int(rng.integers(1, 4000)), int(rng.integers(1, 4000)), n, int(rng.choice([1, 2, 4, 8])), flags)
    frames = []
    for i in rng.permutation(n).tolist():
        ftype = int(rng.integers(0, 2))
        payload = rng.integers(0, 256, int(rng.integers(0, 60)), dtype=np.uint8).tobytes()
        scalars = tuple(int(v) for v in rng.integers(0, 65536, 4)) if ftype == INTER else None
        frames.append(FrameChunk(i, ftype, payload, scalars))
    omp = None
    if has_omp:
        omp = OmpChunk(rng.integers(0, 256, int(rng.integers(0, 80))), float(rng.uniform(0, 0.1)), float(rng.normal()))
    return Bitstream(header, frames, omp)


def test_empty_video_round_trips():
    stream = Bitstream(Header(64, 48, 0, 8))
    data = serialize(stream)
    assert len(data) == header_size() == 15
    assert parse(data) == stream


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_round_trip_is_exact(seed):
    stream = random_stream(np.random.default_rng(seed))
    data = serialize(stream)
    assert parse(data) == stream
    expected = header_size() + sum(f.nbytes for f in stream.frames) + (stream.omp.nbytes if stream.omp else 0)
    assert len(data) == expected


def test_layout_is_little_endian():
    stream = Bitstream(Header(0x0102, 0x0304, 1, 8, 0), [FrameChunk(0, INTRA, b"\xaa\xbb")])
    data = serialize(stream)
    assert data[:4] == b"NNVC" and data[4] == 1
    assert data[5:7] == b"\x02\x01" and data[7:9] == b"\x04\x03"
    assert data[9:13] == b"\x01\x00\x00\x00" and data[13] == 8 and data[14] == 0
    assert data[15:19] == b"\x00\x00\x00\x00" and data[19] == INTRA
    assert data[20:24] == b"\x02\x00\x00\x00" and data[24:] == b"\xaa\xbb"


def test_flags():
    h = Header(1, 1, 0, 8, Header.make_flags(False))
    assert not h.has_omp and h.motion_scaling and h.model_tag == 0
    h = Header(1, 1, 0, 8, Header.make_flags(True, True, False, 21))
    assert h.has_omp and h.per_frame_omp and not h.motion_scaling and h.model_tag == 21
    assert h.flags & 1


def test_no_omp_flag_means_no_omp_chunk():
    stream = Bitstream(Header(8, 8, 1, 8, 0), [FrameChunk(0, INTRA, b"\x01\x02\x03")])
    assert parse(serialize(stream)).omp is None
    with pytest.raises(BitstreamError):
        serialize(Bitstream(Header(8, 8, 0, 8, 0), [], OmpChunk([1], 0.1, 0.0)))


def test_rejections():
    good = serialize(Bitstream(Header(8, 8, 1, 8), [FrameChunk(0, INTER, b"abc", (1, 2, 3, 4))]))
    with pytest.raises(BitstreamError, match="magic"):
        parse(b"XXXX" + good[4:])
    with pytest.raises(BitstreamError, match="version"):
        parse(good[:4] + b"\x02" + good[5:])
    with pytest.raises(BitstreamError):
        parse(good[:10])
    with pytest.raises(BitstreamError):
        parse(good[:-1])
    with pytest.raises(BitstreamError):
        parse(good + b"\x00")
    with pytest.raises(BitstreamError):
        serialize(Bitstream(Header(8, 8, 1, 8), [FrameChunk(0, INTER, b"abc")]))
    with pytest.raises(BitstreamError):
        serialize(Bitstream(Header(70000, 8, 0, 8)))


def test_parser_is_total_under_fuzzing():
    rng = np.random.default_rng(2024)
    outcomes = {"parsed": 0, "error": 0}
    for i in range(1000):
        data = bytearray(serialize(random_stream(rng)))
        mode = i % 4
        if mode == 0:
            data = bytearray(rng.integers(0, 256, int(rng.integers(0, 80)), dtype=np.uint8).tobytes())
        elif mode == 1 and data:
            for _ in range(int(rng.integers(1, 4))):
                data[int(rng.integers(0, len(data)))] = int(rng.integers(0, 256))
        elif mode == 2:
            data = data[: int(rng.integers(0, len(data) + 1))]
        else:
            pos = int(rng.integers(0, len(data) + 1))
            data[pos:pos] = rng.integers(0, 256, int(rng.integers(1, 8)), dtype=np.uint8).tobytes()
        try:
            parse(bytes(data))
            outcomes["parsed"] += 1
        except BitstreamError:
            outcomes["error"] += 1
    assert sum(outcomes.values()) == 1000 and outcomes["error"] > 0


def test_invalid_omp_parameters_are_rejected():
    head = struct.pack("<4sBHHIBB", b"NNVC", 1, 8, 8, 0, 8, 1)
    with pytest.raises(BitstreamError):
        parse(head + struct.pack("<Hff", 1, float("nan"), 0.0) + b"\x00")
    with pytest.raises(BitstreamError):
        parse(head + struct.pack("<Hff", 1, -1.0, 0.0) + b"\x00")


def test_scalar_fixed_point():
    assert SCALAR_STEP == 8 / 65536
    assert decode_scalar(0) == -4.0 and decode_scalar(65535) == 4.0 - SCALAR_STEP
    assert encode_scalar(1.0) == 40960 and decode_scalar(40960) == 1.0
    assert encode_scalar(-10.0) == 0 and encode_scalar(10.0) == 65535
    for v in np.random.default_rng(0).uniform(-4, 4 - SCALAR_STEP, 1000):
        assert abs(decode_scalar(encode_scalar(v)) - v) <= SCALAR_STEP / 2


def test_combined_size():
    assert combined_size(0, 0) == 0
    assert combined_size(50e6, 1e6) == pytest.approx(102.63, abs=0.01)
    with pytest.raises(ValueError):
        combined_size(-1, 0)


def test_bpp():
    assert bpp(0, 10, 10, 1) == 0
    assert bpp(1000, 100, 10, 8) == 1.0
    with pytest.raises(ValueError):
        bpp(10, 0, 10, 1)
