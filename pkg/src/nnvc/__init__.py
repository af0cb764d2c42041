"""Learned bidirectional video codec with inference-time content adaptation."""
from .bitstream import BitstreamError, bpp, combined_size
from .codec import EncodeOptions, VideoCodec
from .gop import build_gop_schedule
from .inter import InterConfig, InterModel
from .intra import IntraConfig, IntraModel
from .metrics import ms_ssim, rd_loss, score

__all__ = [
    "BitstreamError",
    "EncodeOptions",
    "InterConfig",
    "InterModel",
    "IntraConfig",
    "IntraModel",
    "VideoCodec",
    "bpp",
    "build_gop_schedule",
    "combined_size",
    "ms_ssim",
    "rd_loss",
    "score",
]
