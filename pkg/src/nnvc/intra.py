"""Intra-frame autoencoder with DSA blocks and decoder-side OMPs."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .blocks import AddressingError, DSABlock, DsaConfig, OMPSet, act, conv, upconv
from .probability import SYMBOL_MAX, SYMBOL_MIN, ProbabilityModel, quantize, quantize_train_proxy

SCALE_FACTOR = 16
# fixed gain on the latent head (and its inverse at the decoder input) so
# latents start a few quantization steps wide instead of drowning in rounding
LATENT_GAIN = 16.0
LAST_DSA = "dec.dsa1"
# first conv of the block, first conv of ResBlock 1, second conv of ResBlocks 2 and 4
SELECTED_OMP_LAYERS = ("head", "res0.conv0", "res1.conv1", "res3.conv1")


@dataclass
class IntraConfig:
    channels: int = 64
    latent_channels: int = 32
    resblock_convs: int = 2
    num_resblocks: int = 4
    num_levels: int = 3
    prob_hidden: int = 64

    def dsa(self) -> DsaConfig:
        return DsaConfig(self.channels, self.resblock_convs, self.num_resblocks)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class QuantizedLatent:
    symbols: torch.Tensor  # int64, (1, C, h, w)
    height: int
    width: int
    scale_factor: int = SCALE_FACTOR
    symbol_range: tuple[int, int] = (SYMBOL_MIN, SYMBOL_MAX)


def pad_to_multiple(x: torch.Tensor, multiple: int = SCALE_FACTOR) -> torch.Tensor:
    h, w = x.shape[-2:]
    ph, pw = -h % multiple, -w % multiple
    if not ph and not pw:
        return x
    mode = "reflect" if ph < h and pw < w else "replicate"
    return F.pad(x, (0, pw, 0, ph), mode=mode)


def finalize(x_hat: torch.Tensor) -> torch.Tensor:
    """Clamp to [0, 1] and snap to the 8-bit grid, as a decoder would output."""
    return torch.round(x_hat.clamp(0, 1) * 255) / 255


class IntraEncoder(nn.Module):
    def __init__(self, cfg: IntraConfig):
        super().__init__()
        c = cfg.channels
        self.down1 = conv(3, c, 5, stride=2)
        self.down2 = conv(c, c, 5, stride=2)
        self.dsa0 = DSABlock(cfg.dsa())
        self.down3 = conv(c, c, 5, stride=2)
        self.down4 = conv(c, c, 5, stride=2)
        self.dsa1 = DSABlock(cfg.dsa())
        self.out = conv(c, cfg.latent_channels)

    def forward(self, x):
        h = act(self.down2(act(self.down1(x))))
        h = self.dsa0(h)
        h = act(self.down4(act(self.down3(h))))
        return self.out(self.dsa1(h)) * LATENT_GAIN


class IntraDecoder(nn.Module):
    """Mirror of :class:`IntraEncoder`; block ids are ``dec.dsa0``, ``dec.dsa1`` and ``dec``."""

    def __init__(self, cfg: IntraConfig):
        super().__init__()
        c = cfg.channels
        self.inp = conv(cfg.latent_channels, c)
        self.dsa0 = DSABlock(cfg.dsa())
        self.up1 = upconv(c, c)
        self.up2 = upconv(c, c)
        self.dsa1 = DSABlock(cfg.dsa())
        self.up3 = upconv(c, c)
        self.out = upconv(c, 3)

    def layer_channels(self) -> dict[tuple[str, str], int]:
        out = {("dec.dsa0", k): v for k, v in self.dsa0.layer_channels().items()}
        out.update({("dec.dsa1", k): v for k, v in self.dsa1.layer_channels().items()})
        out[("dec", "out")] = 3
        return out

    def forward(self, y, omps: dict[str, dict[str, torch.Tensor]] | None = None, trace: dict | None = None):
        omps = omps or {}
        unknown = set(omps) - {"dec.dsa0", "dec.dsa1", "dec"}
        if unknown:
            raise AddressingError(f"unknown OMP blocks {sorted(unknown)}")
        h = self.dsa0(act(self.inp(y / LATENT_GAIN)), omps.get("dec.dsa0"))
        h = act(self.up2(act(self.up1(h))))
        h = self.dsa1(h, omps.get("dec.dsa1"), trace)
        out = self.out(act(self.up3(h)))
        mult = omps.get("dec", {}).get("out")
        if mult is not None:
            out = out * mult.view(-1, 1, 1)
        return out


class IntraModel(nn.Module):
    def __init__(self, cfg: IntraConfig | None = None):
        super().__init__()
        self.cfg = cfg or IntraConfig()
        self.encoder = IntraEncoder(self.cfg)
        self.decoder = IntraDecoder(self.cfg)
        self.prob = ProbabilityModel(self.cfg.latent_channels, self.cfg.num_levels, self.cfg.prob_hidden)

    def omp_placement(self, strategy: str = "c1") -> list[tuple[str, str, int]]:
        """OMP addresses: ``c1`` the four selected layers (those whose ResBlock
        exists when the model has fewer than four), ``c2`` every layer of the
        last DSA block plus the decoder's output layer."""
        channels = self.decoder.layer_channels()
        if strategy == "c1":
            layers = [(LAST_DSA, name) for name in SELECTED_OMP_LAYERS if (LAST_DSA, name) in channels]
        elif strategy == "c2":
            layers = [key for key in channels if key[0] == LAST_DSA] + [("dec", "out")]
        else:
            return []
        return [(b, l, k) for b, l in layers for k in range(channels[(b, l)])]

    def omp_multipliers(self, omps: OMPSet | None):
        if omps is None:
            return None
        return omps.multipliers(self.decoder.layer_channels())

    def analysis(self, x: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(x).all():
            raise ValueError("non-finite input frame")
        return self.encoder(pad_to_multiple(x))

    def synthesis(self, y_hat: torch.Tensor, omps: OMPSet | None = None, size=None) -> torch.Tensor:
        out = self.decoder(y_hat, self.omp_multipliers(omps))
        if size is not None:
            out = out[..., : size[0], : size[1]]
        return out

    def forward(self, x: torch.Tensor) -> dict:
        """Training pass with the additive-noise quantization proxy."""
        y = self.analysis(x)
        y_tilde = quantize_train_proxy(y)
        x_hat = self.synthesis(y_tilde, size=x.shape[-2:])
        bits = self.prob.rate_bits(y_tilde, y + (quantize(y) - y).detach())
        return {"x_hat": x_hat, "bits": bits, "y": y}


def intra_encode(frame: torch.Tensor, model: IntraModel) -> QuantizedLatent:
    """Encode a ``(1, 3, H, W)`` frame in [0, 1] to an integer latent."""
    with torch.no_grad():
        y = model.analysis(frame)
    symbols = quantize(y).clamp(SYMBOL_MIN, SYMBOL_MAX).to(torch.int64)
    return QuantizedLatent(symbols, frame.shape[-2], frame.shape[-1])


def intra_decode(latent: QuantizedLatent, model: IntraModel, omps: OMPSet | None = None) -> torch.Tensor:
    """Reconstruct a frame, cropped to the original size and clamped to [0, 1]."""
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        out = model.synthesis(latent.symbols.to(dtype), omps, (latent.height, latent.width))
    return out.clamp(0, 1)
