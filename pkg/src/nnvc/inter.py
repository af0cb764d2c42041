"""Bidirectional inter-frame codec.

The encoder aggregates multi-scale features of the target and both references
into one latent. The decoder turns that latent into multi-scale motion features
and a residual, estimates forward/backward flow coarse to fine, rescales the
flow from an embedding of the frame resolution, warps both references and lets
the Combiner blend the predictions:

    x_hat = s_tmp * x_tilde + s_bwd * f_bwd + s_fwd * f_fwd + s_e * e_t
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .blocks import ResBlock, act, conv, upconv
from .intra import LATENT_GAIN, SCALE_FACTOR, pad_to_multiple
from .probability import SYMBOL_MAX, SYMBOL_MIN, ProbabilityModel, quantize, quantize_train_proxy

RESOLUTION_NORM = 1000.0
DEFAULT_SCALARS = (0.5, 0.25, 0.25, 1.0)
PYRAMID_SCALES = 3


@dataclass
class InterConfig:
    channels: int = 64
    latent_channels: int = 32
    num_levels: int = 3
    prob_hidden: int = 64
    entropy_channels: int = 32
    embed_dim: int = 32
    motion_scaling: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CombinerScalars:
    s_tmp: float
    s_bwd: float
    s_fwd: float
    s_e: float

    def as_tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.tensor([self.s_tmp, self.s_bwd, self.s_fwd, self.s_e], dtype=dtype)

    @classmethod
    def from_tensor(cls, t: torch.Tensor) -> "CombinerScalars":
        return cls(*(float(v) for v in t.detach().flatten().tolist()))


class InterError(ValueError):
    pass


def _check_dims(*frames: torch.Tensor) -> None:
    shapes = {tuple(f.shape[-2:]) for f in frames}
    if len(shapes) != 1:
        raise InterError(f"frame dimensions differ: {sorted(shapes)}")


def warp(ref: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Bilinear backward warp: ``out[y, x] = ref[y + flow_y, x + flow_x]``.

    ``flow`` is ``(N, 2, H, W)`` in pixels (x first). Samples outside the frame
    are clamped to the border.
    """
    n, c, h, w = ref.shape
    if flow.shape[-2:] != (h, w):
        raise InterError("flow and reference sizes differ")
    ys = torch.arange(h, dtype=ref.dtype).view(1, h, 1)
    xs = torch.arange(w, dtype=ref.dtype).view(1, 1, w)
    px = (xs + flow[:, 0]).clamp(0, w - 1)
    py = (ys + flow[:, 1]).clamp(0, h - 1)
    x0 = px.detach().floor()
    y0 = py.detach().floor()
    wx = px - x0
    wy = py - y0
    x0i, y0i = x0.long(), y0.long()
    x1i = (x0i + 1).clamp(max=w - 1)
    y1i = (y0i + 1).clamp(max=h - 1)
    flat = ref.reshape(n, c, h * w)

    def gather(yi, xi):
        idx = (yi * w + xi).view(n, 1, h * w).expand(n, c, h * w)
        return flat.gather(2, idx).view(n, c, h, w)

    wx, wy = wx.unsqueeze(1), wy.unsqueeze(1)
    top = gather(y0i, x0i) * (1 - wx) + gather(y0i, x1i) * wx
    bottom = gather(y1i, x0i) * (1 - wx) + gather(y1i, x1i) * wx
    return top * (1 - wy) + bottom * wy


class FeaturePyramid(nn.Module):
    """Features at 1/1, 1/2 and 1/4 of the frame resolution."""

    def __init__(self, channels: int):
        super().__init__()
        c = channels
        self.stages = nn.ModuleList([
            nn.Sequential(conv(3, c), nn.LeakyReLU(0.2), conv(c, c), nn.LeakyReLU(0.2)),
            nn.Sequential(conv(c, c, stride=2), nn.LeakyReLU(0.2), conv(c, c), nn.LeakyReLU(0.2)),
            nn.Sequential(conv(c, c, stride=2), nn.LeakyReLU(0.2), conv(c, c), nn.LeakyReLU(0.2)),
        ])

    def forward(self, x):
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class FeatureEncoder(nn.Module):
    def __init__(self, channels: int, latent_channels: int):
        super().__init__()
        c = channels
        self.s1 = conv(3 * c, c, stride=2)
        self.s2 = conv(4 * c, c, stride=2)
        self.s4 = conv(4 * c, c, stride=2)
        self.res = ResBlock(c)
        self.out = conv(c, latent_channels, stride=2)

    def forward(self, fx, fp, fn):
        h = act(self.s1(torch.cat([fx[0], fp[0], fn[0]], 1)))
        h = act(self.s2(torch.cat([h, fx[1], fp[1], fn[1]], 1)))
        h = act(self.s4(torch.cat([h, fx[2], fp[2], fn[2]], 1)))
        return self.out(self.res(h)) * LATENT_GAIN


class FeatureDecoder(nn.Module):
    """Latent -> motion features at 1/4, 1/2, 1/1 and a 3-channel residual."""

    def __init__(self, channels: int, latent_channels: int):
        super().__init__()
        c = channels
        self.up16 = upconv(latent_channels, c)
        self.res = ResBlock(c)
        self.up8 = upconv(c, c)
        self.up4 = upconv(c, c)
        self.up2 = upconv(c, c)
        self.residual = conv(c, 3)

    def forward(self, y):
        h = self.res(act(self.up16(y / LATENT_GAIN)))
        m4 = act(self.up8(h))
        m2 = act(self.up4(m4))
        m1 = act(self.up2(m2))
        return [m1, m2, m4], self.residual(m1)


class EntropyFeaturePyramid(nn.Module):
    """Reference features at the latent resolution, used as probability-model context."""

    def __init__(self, channels: int, out_channels: int):
        super().__init__()
        c = channels
        self.body = nn.Sequential(
            conv(6, c, stride=2), nn.LeakyReLU(0.2),
            conv(c, c, stride=2), nn.LeakyReLU(0.2),
            conv(c, c, stride=2), nn.LeakyReLU(0.2),
            conv(c, out_channels, stride=2),
        )

    def forward(self, ref_prev, ref_next):
        return self.body(torch.cat([ref_prev, ref_next], 1))


class MotionEstimator(nn.Module):
    """Coarse-to-fine bidirectional flow; each scale predicts the full flow."""

    def __init__(self, channels: int):
        super().__init__()
        c = channels
        self.coarse = nn.Sequential(conv(3 * c, c), nn.LeakyReLU(0.2), conv(c, c), nn.LeakyReLU(0.2))
        self.refine = nn.ModuleList(
            nn.Sequential(conv(3 * c + 4, c), nn.LeakyReLU(0.2), conv(c, c), nn.LeakyReLU(0.2)) for _ in range(2)
        )
        self.heads = nn.ModuleList(conv(c, 4) for _ in range(3))

    @property
    def final_head(self) -> nn.Conv2d:
        return self.heads[-1]

    def forward(self, motion_feats, prev_feats, next_feats):
        """Pyramids are ordered fine to coarse. Returns ``(fwd, bwd)`` flows in pixels."""
        if not len(motion_feats) == len(prev_feats) == len(next_feats) == PYRAMID_SCALES:
            raise InterError("pyramid depth mismatch")
        m, p, q = motion_feats[::-1], prev_feats[::-1], next_feats[::-1]
        flow = self.heads[0](self.coarse(torch.cat([m[0], p[0], q[0]], 1)))
        for i in (1, 2):
            size = m[i].shape[-2:]
            up = F.interpolate(flow, size=size, mode="bilinear", align_corners=False) * 2
            wp = warp(p[i], up[:, :2])
            wq = warp(q[i], up[:, 2:])
            flow = self.heads[i](self.refine[i - 1](torch.cat([m[i], wp, wq, up], 1)))
        return flow[:, :2], flow[:, 2:]


class ResolutionEmbedding(nn.Module):
    """Two dense layers followed by a leaky ReLU, fed with ``(h, w) / 1000``."""

    def __init__(self, dim: int):
        super().__init__()
        self.fc1 = nn.Linear(2, dim)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, h: int, w: int) -> torch.Tensor:
        dtype = self.fc1.weight.dtype
        x = torch.tensor([[h / RESOLUTION_NORM, w / RESOLUTION_NORM]], dtype=dtype)
        return act(self.fc2(self.fc1(x)))


class MotionScaleHead(nn.Module):
    """One scale factor per flow direction; starts out exactly neutral."""

    def __init__(self, dim: int):
        super().__init__()
        self.fc = nn.Linear(dim, 2)
        nn.init.zeros_(self.fc.weight)
        nn.init.ones_(self.fc.bias)

    def forward(self, emb: torch.Tensor) -> torch.Tensor:
        return self.fc(emb)


def scale_motion(fwd: torch.Tensor, bwd: torch.Tensor, scale: torch.Tensor):
    """Multiply each direction's flow by its scale factor (``scale`` shape ``(1, 2)``)."""
    return fwd * scale[:, 0].view(-1, 1, 1, 1), bwd * scale[:, 1].view(-1, 1, 1, 1)


class Combiner(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        c = channels
        self.inp = conv(12, c)
        self.res1 = ResBlock(c)
        self.res2 = ResBlock(c)
        self.out = conv(c, 3)

    def temporary(self, f_fwd, f_bwd, intra1, intra2):
        _check_dims(f_fwd, f_bwd, intra1, intra2)
        h = act(self.inp(torch.cat([f_fwd, f_bwd, intra1, intra2], 1)))
        return self.out(self.res2(self.res1(h)))


def combine_terms(x_tilde, f_bwd, f_fwd, e_t, scalars: torch.Tensor, clamp: bool = True) -> torch.Tensor:
    """The Combiner's linear combination; ``scalars`` is ``(s_tmp, s_bwd, s_fwd, s_e)``."""
    s = scalars.to(x_tilde.dtype)
    out = s[0] * x_tilde + s[1] * f_bwd + s[2] * f_fwd + s[3] * e_t
    return out.clamp(0, 1) if clamp else out


def combine(f_fwd, f_bwd, intra1, intra2, e_t, scalars, combiner: Combiner, clamp: bool = True):
    if isinstance(scalars, CombinerScalars):
        scalars = scalars.as_tensor(f_fwd.dtype)
    x_tilde = combiner.temporary(f_fwd, f_bwd, intra1, intra2)
    return combine_terms(x_tilde, f_bwd, f_fwd, e_t, scalars, clamp)


class InterModel(nn.Module):
    def __init__(self, cfg: InterConfig | None = None):
        super().__init__()
        self.cfg = cfg or InterConfig()
        c = self.cfg.channels
        self.pyramid = FeaturePyramid(c)
        self.feature_encoder = FeatureEncoder(c, self.cfg.latent_channels)
        self.entropy_pyramid = EntropyFeaturePyramid(c, self.cfg.entropy_channels)
        self.prob = ProbabilityModel(
            self.cfg.latent_channels, self.cfg.num_levels, self.cfg.prob_hidden, self.cfg.entropy_channels
        )
        self.feature_decoder = FeatureDecoder(c, self.cfg.latent_channels)
        self.motion = MotionEstimator(c)
        self.resolution = ResolutionEmbedding(self.cfg.embed_dim)
        self.scale_head = MotionScaleHead(self.cfg.embed_dim)
        self.combiner = Combiner(c)
        self.scalars = nn.Parameter(torch.tensor(DEFAULT_SCALARS))

    def default_scalars(self) -> CombinerScalars:
        return CombinerScalars.from_tensor(self.scalars)

    def embed_resolution(self, h: int, w: int) -> torch.Tensor:
        return self.resolution(h, w)

    def motion_scale(self, h: int, w: int) -> torch.Tensor:
        return self.scale_head(self.embed_resolution(h, w))

    def entropy_context(self, ref_prev, ref_next):
        return self.entropy_pyramid(pad_to_multiple(ref_prev), pad_to_multiple(ref_next))

    def encode_latent(self, x_t, ref_prev, ref_next) -> torch.Tensor:
        _check_dims(x_t, ref_prev, ref_next)
        fx = self.pyramid(pad_to_multiple(x_t))
        fp = self.pyramid(pad_to_multiple(ref_prev))
        fn = self.pyramid(pad_to_multiple(ref_next))
        return self.feature_encoder(fx, fp, fn)

    def prediction_terms(self, y_hat, ref_prev, ref_next, intra1, intra2, h: int, w: int,
                         motion_scaling: bool | None = None, resolution: tuple[int, int] | None = None) -> dict:
        """Everything the Combiner's linear combination needs, cropped to ``(h, w)``.

        ``resolution`` is the source video's frame size fed to the motion
        scaling; it defaults to ``(h, w)`` and differs only for training crops.
        """
        _check_dims(ref_prev, ref_next, intra1, intra2)
        if motion_scaling is None:
            motion_scaling = self.cfg.motion_scaling
        motion_feats, e_t = self.feature_decoder(y_hat)
        rp, rn = pad_to_multiple(ref_prev), pad_to_multiple(ref_next)
        fwd, bwd = self.motion(motion_feats, self.pyramid(rp), self.pyramid(rn))
        if motion_scaling:
            fwd, bwd = scale_motion(fwd, bwd, self.motion_scale(*(resolution or (h, w))))
        f_fwd = warp(rp, fwd)[..., :h, :w]
        f_bwd = warp(rn, bwd)[..., :h, :w]
        e_t = e_t[..., :h, :w]
        x_tilde = self.combiner.temporary(f_fwd, f_bwd, intra1, intra2)
        return {"x_tilde": x_tilde, "f_fwd": f_fwd, "f_bwd": f_bwd, "e_t": e_t, "flow_fwd": fwd, "flow_bwd": bwd}

    def forward(self, x_t, ref_prev, ref_next, intra1, intra2, scalars=None, resolution=None) -> dict:
        """Training pass with the noise proxy; ``scalars`` defaults to the trained ones."""
        h, w = x_t.shape[-2:]
        y = self.encode_latent(x_t, ref_prev, ref_next)
        y_tilde = quantize_train_proxy(y)
        terms = self.prediction_terms(y_tilde, ref_prev, ref_next, intra1, intra2, h, w, resolution=resolution)
        s = self.scalars if scalars is None else scalars
        x_hat = combine_terms(terms["x_tilde"], terms["f_bwd"], terms["f_fwd"], terms["e_t"], s)
        ctx = self.entropy_context(ref_prev, ref_next)
        bits = self.prob.rate_bits(y_tilde, y + (quantize(y) - y).detach(), ctx)
        return {"x_hat": x_hat, "bits": bits, **terms}


def inter_encode(x_t, ref_prev, ref_next, model: InterModel) -> torch.Tensor:
    """Integer latent ``(1, C, h, w)`` for ``x_t`` given reconstructed references."""
    with torch.no_grad():
        y = model.encode_latent(x_t, ref_prev, ref_next)
    return quantize(y).clamp(SYMBOL_MIN, SYMBOL_MAX).to(torch.int64)


def inter_decode(latent, ref_prev, ref_next, intra1, intra2, h, w, scalars, model: InterModel,
                 motion_scaling: bool | None = None) -> torch.Tensor:
    dtype = next(model.parameters()).dtype
    if isinstance(scalars, CombinerScalars):
        scalars = scalars.as_tensor(dtype)
    with torch.no_grad():
        terms = model.prediction_terms(latent.to(dtype), ref_prev, ref_next, intra1, intra2, h, w, motion_scaling)
        return combine_terms(terms["x_tilde"], terms["f_bwd"], terms["f_fwd"], terms["e_t"], scalars)


def latent_shape(h: int, w: int, channels: int) -> tuple[int, int, int]:
    return channels, -(-h // SCALE_FACTOR), -(-w // SCALE_FACTOR)
