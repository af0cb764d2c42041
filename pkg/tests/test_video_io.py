import numpy as np
import pytest
from scipy import ndimage

from nnvc.video_io import (
    VideoFormatError,
    VideoSequence,
    from_rgb,
    read_video,
    rgb_to_yuv420,
    sidecar_path,
    write_video,
    yuv420_frame_bytes,
    yuv420_to_rgb,
    yuv_psnr,
)


def smooth_rgb(seed, n=3, h=64, w=64, sigma=2.0):
    """Random frames low-pass filtered so they look like camera content."""
    noise = np.random.default_rng(seed).uniform(0, 255, (n, h, w, 3))
    smooth = ndimage.gaussian_filter(noise, (0, sigma, sigma, 0))
    lo, hi = smooth.min(), smooth.max()
    return np.round((smooth - lo) / (hi - lo) * 255).astype(np.uint8)


def test_raw_yuv_round_trip_is_byte_identical(tmp_path):
    h, w, n = 18, 22, 3
    raw = np.random.default_rng(0).integers(0, 256, n * yuv420_frame_bytes(h, w), dtype=np.uint8).tobytes()
    src = tmp_path / "clip.yuv"
    src.write_bytes(raw)
    sidecar_path(src).write_text(f"{w} {h} {n}\n")
    seq = read_video(src)
    assert (seq.width, seq.height, seq.frame_count) == (w, h, n)
    dst = tmp_path / "out.yuv"
    write_video(seq, dst)
    assert dst.read_bytes() == raw


def test_rgb_round_trip_is_byte_identical(tmp_path):
    raw = np.random.default_rng(1).integers(0, 256, 2 * 10 * 12 * 3, dtype=np.uint8).tobytes()
    src = tmp_path / "clip_12x10.rgb"
    src.write_bytes(raw)
    seq = read_video(src)
    assert (seq.width, seq.height, seq.frame_count) == (12, 10, 2)
    write_video(seq, tmp_path / "out.rgb")
    assert (tmp_path / "out.rgb").read_bytes() == raw


def test_png_directory_round_trip(tmp_path):
    frames = smooth_rgb(2, n=2, h=16, w=24)
    write_video(VideoSequence(frames, 24, 16, "png"), tmp_path / "frames")
    seq = read_video(tmp_path / "frames")
    assert np.array_equal(seq.frames, frames)


def test_two_frame_16x16_sequence_reads_with_correct_dims(tmp_path):
    path = tmp_path / "tiny_16x16.yuv"
    path.write_bytes(bytes(2 * yuv420_frame_bytes(16, 16)))
    seq = read_video(path)
    assert (seq.width, seq.height, seq.frame_count) == (16, 16, 2)
    y, u, v = seq.frames
    assert y.shape == (2, 16, 16) and u.shape == v.shape == (2, 8, 8)


def test_yuv_rgb_yuv_conversion_psnr_above_49_db():
    # lightly correlated noise; losses come from RGB clipping and rounding
    for seed in range(3):
        y, u, v = rgb_to_yuv420(smooth_rgb(seed, sigma=0.5))
        back = rgb_to_yuv420(yuv420_to_rgb(y, u, v))
        assert yuv_psnr((y, u, v), back) > 49


def test_conversion_is_lossy_but_close_for_rgb():
    rgb = smooth_rgb(4)
    back = yuv420_to_rgb(*rgb_to_yuv420(rgb))
    assert not np.array_equal(rgb, back)
    assert np.abs(rgb.astype(int) - back.astype(int)).mean() < 8


def test_format_conversion_preserves_dims():
    seq = from_rgb(smooth_rgb(5, n=2, h=15, w=9), "yuv420")
    assert (seq.width, seq.height, seq.frame_count) == (9, 15, 2)
    assert seq.frames[1].shape == (2, 8, 5)


def test_truncated_file_is_rejected(tmp_path):
    path = tmp_path / "clip.yuv"
    path.write_bytes(bytes(yuv420_frame_bytes(16, 16) * 2 - 5))
    sidecar_path(path).write_text("16 16 2\n")
    with pytest.raises(VideoFormatError, match="truncated"):
        read_video(path)


def test_dimension_mismatch_is_rejected(tmp_path):
    path = tmp_path / "clip.yuv"
    path.write_bytes(bytes(yuv420_frame_bytes(16, 16) * 2 + 7))
    sidecar_path(path).write_text("16 16 2\n")
    with pytest.raises(VideoFormatError, match="does not match"):
        read_video(path)
    odd = tmp_path / "odd_16x16.yuv"
    odd.write_bytes(bytes(yuv420_frame_bytes(16, 16) + 3))
    with pytest.raises(VideoFormatError):
        read_video(odd)


def test_missing_dimensions_are_rejected(tmp_path):
    path = tmp_path / "clip.yuv"
    path.write_bytes(bytes(100))
    with pytest.raises(VideoFormatError):
        read_video(path)
    sidecar_path(path).write_text("16 16\n")
    with pytest.raises(VideoFormatError):
        read_video(path)
    with pytest.raises(VideoFormatError):
        read_video(path, "hevc")


def test_sidecar_written_with_raw_output(tmp_path):
    seq = from_rgb(smooth_rgb(6, n=2, h=8, w=10))
    write_video(seq, tmp_path / "a.rgb")
    assert sidecar_path(tmp_path / "a.rgb").read_text().split() == ["10", "8", "2"]
