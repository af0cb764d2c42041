"""End-to-end video encoder and decoder.

The encoder reconstructs every frame with the same functions the decoder uses,
so references and the reported reconstruction match the decoder bit for bit.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch

from . import adaptation as adapt
from .bitstream import (
    INTER,
    INTRA,
    Bitstream,
    BitstreamError,
    FrameChunk,
    Header,
    OmpChunk,
    parse,
    serialize,
)
from .blocks import OMPSet
from .entropy import EntropyCodingError
from .gop import build_gop_schedule
from .inter import InterModel, combine_terms, inter_encode, latent_shape
from .intra import IntraModel, QuantizedLatent, finalize, intra_decode, intra_encode


class DecodeError(BitstreamError):
    pass


@dataclass
class EncodeOptions:
    lam: float = 0.1
    intra_period: int = 8
    overfit_latent: bool = True
    omp_strategy: str = "c1"
    motion_scaling: bool = True
    overfit_combiner: bool = True
    latent_steps: int = 100
    omp_steps: int = 200
    scalar_steps: int = 50
    scales: int = 4

    def __post_init__(self) -> None:
        if self.omp_strategy not in adapt.STRATEGIES:
            raise ValueError(f"unknown OMP strategy {self.omp_strategy!r}")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")


@dataclass
class EncodeResult:
    data: bytes
    reconstruction: torch.Tensor  # (F, 3, H, W) on the 8-bit grid
    frame_bytes: dict[int, int] = field(default_factory=dict)
    omp_decisions: list[adapt.GateDecision] = field(default_factory=list)
    omp_bytes: int = 0

    @property
    def num_bytes(self) -> int:
        return len(self.data)


def model_fingerprint(*models: torch.nn.Module | None) -> str:
    """Content hash over the models' weights."""
    digest = hashlib.sha256()
    for model in models:
        if model is None:
            digest.update(b"none")
            continue
        for name, tensor in sorted(model.state_dict().items()):
            digest.update(name.encode())
            digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def model_tag(fingerprint: str) -> int:
    return int(fingerprint[:2], 16) & 0x1F


def decoder_size_bytes(intra: IntraModel, inter: InterModel | None = None) -> int:
    """Float32 size of every weight the decoder needs."""
    modules = [intra.decoder, intra.prob]
    if inter is not None:
        modules += [m for name, m in inter.named_children() if name != "feature_encoder"]
    count = sum(p.numel() for m in modules for p in m.parameters())
    if inter is not None:
        count += inter.scalars.numel()
    return 4 * count


def _omp_set_from_chunk(chunk: OmpChunk, placement) -> OMPSet | None:
    if len(chunk.codes) == 0:
        return None
    if len(chunk.codes) != len(placement):
        raise DecodeError(f"{len(chunk.codes)} OMP codes for {len(placement)} addresses")
    values = torch.from_numpy(adapt.dequantize_omps(chunk.codes, chunk.quant_step, chunk.offset)).float()
    return OMPSet(list(placement), values, chunk.quant_step, chunk.offset, chunk.codes)


class VideoCodec:
    def __init__(self, intra: IntraModel, inter: InterModel | None = None, fingerprint: str | None = None):
        self.intra = intra.eval()
        self.inter = inter.eval() if inter is not None else None
        self.fingerprint = fingerprint or model_fingerprint(intra, inter)
        self.tag = model_tag(self.fingerprint)
        self.inter_calls = 0

    @property
    def dtype(self) -> torch.dtype:
        return next(self.intra.parameters()).dtype

    # -- shared reconstruction paths ------------------------------------
    def _intra_recon(self, symbols: torch.Tensor, h: int, w: int, omps: OMPSet | None) -> torch.Tensor:
        return finalize(intra_decode(QuantizedLatent(symbols, h, w), self.intra, omps))

    def _inter_terms(self, symbols, recon, step, h, w, motion_scaling):
        self.inter_calls += 1
        with torch.no_grad():
            return self.inter.prediction_terms(
                symbols.to(self.dtype), recon[step.ref_prev], recon[step.ref_next],
                recon[step.intra_prev], recon[step.intra_next], h, w, motion_scaling,
            )

    def _inter_recon(self, terms: dict, codes) -> torch.Tensor:
        scalars = adapt.dequantize_scalars(codes).to(self.dtype)
        with torch.no_grad():
            x_hat = combine_terms(terms["x_tilde"], terms["f_bwd"], terms["f_fwd"], terms["e_t"], scalars)
        return finalize(x_hat)

    def _entropy_ctx(self, recon, step):
        with torch.no_grad():
            return self.inter.entropy_context(recon[step.ref_prev], recon[step.ref_next])

    # -- encoder -----------------------------------------------------------
    def encode(self, frames: torch.Tensor, opts: EncodeOptions | None = None) -> EncodeResult:
        """Encode ``(F, 3, H, W)`` frames in [0, 1]."""
        opts = opts or EncodeOptions()
        if frames.dim() != 4 or frames.shape[1] != 3:
            raise ValueError("frames must be (F, 3, H, W)")
        frames = frames.to(self.dtype)
        n, _, h, w = frames.shape
        if n == 0:
            header = Header(w, h, 0, opts.intra_period, Header.make_flags(False, False, opts.motion_scaling, self.tag))
            return EncodeResult(serialize(Bitstream(header)), frames.clone())
        sched = build_gop_schedule(n, opts.intra_period)
        if sched.steps and self.inter is None:
            raise ValueError("an inter model is required for sequences with inter frames")
        lat_cfg = adapt.latent_config(opts.lam, opts.latent_steps, opts.scales)
        omp_cfg = adapt.omp_config(opts.lam, opts.omp_strategy, opts.omp_steps, opts.scales)
        scal_cfg = adapt.scalar_config(opts.lam, opts.scalar_steps, opts.scales)

        intra_idx = sched.intra_indices
        latents: dict[int, QuantizedLatent] = {}
        for i in intra_idx:
            latent = intra_encode(frames[i : i + 1], self.intra)
            if opts.overfit_latent:
                latent = adapt.overfit_latent(latent, self.intra, frames[i : i + 1], lat_cfg).value
            latents[i] = latent

        # OMPs: c1 shared and gated over all intra frames, c2 per frame
        frame_omps: dict[int, OMPSet | None] = {i: None for i in intra_idx}
        frame_omp_chunks: dict[int, OmpChunk] = {}
        shared_chunk = None
        decisions = []
        if opts.omp_strategy == "c1":
            first = intra_idx[0]
            fit = adapt.overfit_omps(self.intra, frames[first : first + 1], latents[first], omp_cfg)
            q = adapt.quantized_omp_set(fit.value)
            decision = adapt.gate_omps(
                self.intra, [latents[i] for i in intra_idx], [frames[i : i + 1] for i in intra_idx],
                q, adapt.omp_bits(q), opts.lam, opts.scales,
            )
            decisions.append(decision)
            if decision.included:
                shared_chunk = adapt.omp_chunk(q)
                frame_omps = {i: q for i in intra_idx}
        elif opts.omp_strategy == "c2":
            for i in intra_idx:
                fit = adapt.overfit_omps(self.intra, frames[i : i + 1], latents[i], omp_cfg)
                q = adapt.quantized_omp_set(fit.value)
                decision = adapt.gate_omps(
                    self.intra, [latents[i]], [frames[i : i + 1]], q, adapt.omp_bits(q), opts.lam, opts.scales,
                )
                decisions.append(decision)
                if decision.included:
                    frame_omps[i] = q
                    frame_omp_chunks[i] = adapt.omp_chunk(q)
                else:
                    frame_omp_chunks[i] = OmpChunk(np.zeros(0, np.uint8), 0.0, 0.0)

        recon: dict[int, torch.Tensor] = {}
        chunks = []
        for index, kind in sched.coding_order:
            if kind == "intra":
                latent = latents[index]
                payload = self.intra.prob.compress(latent.symbols)
                if opts.omp_strategy == "c2":
                    payload = frame_omp_chunks[index].pack() + payload
                recon[index] = self._intra_recon(latent.symbols, h, w, frame_omps[index])
                chunks.append(FrameChunk(index, INTRA, payload))
                continue
            step = sched.step_for(index)
            x_t = frames[index : index + 1]
            symbols = inter_encode(x_t, recon[step.ref_prev], recon[step.ref_next], self.inter)
            payload = self.inter.prob.compress(symbols, self._entropy_ctx(recon, step))
            terms = self._inter_terms(symbols, recon, step, h, w, opts.motion_scaling)
            defaults = self.inter.scalars.detach().double()
            if opts.overfit_combiner:
                codes = adapt.overfit_combiner_scalars(terms, x_t, defaults, scal_cfg).value
            else:
                codes = adapt.quantize_scalars(defaults.tolist())
            recon[index] = self._inter_recon(terms, codes)
            chunks.append(FrameChunk(index, INTER, payload, tuple(codes)))

        flags = Header.make_flags(shared_chunk is not None, opts.omp_strategy == "c2", opts.motion_scaling, self.tag)
        header = Header(w, h, n, opts.intra_period, flags)
        data = serialize(Bitstream(header, chunks, shared_chunk))
        reconstruction = torch.cat([recon[i] for i in range(n)])
        return EncodeResult(
            data, reconstruction, {c.frame_index: c.nbytes for c in chunks}, decisions,
            shared_chunk.nbytes if shared_chunk is not None else sum(c.nbytes for c in frame_omp_chunks.values()),
        )

    # -- decoder -----------------------------------------------------------
    def decode(self, data: bytes) -> torch.Tensor:
        """Reconstruct ``(F, 3, H, W)`` frames; raises :class:`BitstreamError` on bad input."""
        stream = parse(data)
        header = stream.header
        if header.model_tag != self.tag:
            raise DecodeError(f"bitstream made for model tag {header.model_tag}, decoder has {self.tag}")
        try:
            sched = build_gop_schedule(max(header.frame_count, 1), header.intra_period)
        except ValueError as exc:
            raise DecodeError(str(exc)) from exc
        if header.frame_count == 0:
            if stream.frames:
                raise DecodeError("frames present in an empty video")
            return torch.zeros(0, 3, header.height, header.width, dtype=self.dtype)
        expected = [(i, INTRA if k == "intra" else INTER) for i, k in sched.coding_order]
        found = [(c.frame_index, c.frame_type) for c in stream.frames]
        if found != expected:
            raise DecodeError("frame chunks do not follow the coding order")
        if sched.steps and self.inter is None:
            raise DecodeError("stream has inter frames but no inter model is loaded")
        h, w = header.height, header.width
        if h == 0 or w == 0:
            raise DecodeError("zero frame dimensions")
        shared = None
        if stream.omp is not None:
            shared = _omp_set_from_chunk(stream.omp, self.intra.omp_placement("c1"))
        c2_placement = self.intra.omp_placement("c2") if header.per_frame_omp else None
        recon: dict[int, torch.Tensor] = {}
        try:
            for chunk in stream.frames:
                if chunk.frame_type == INTRA:
                    payload, omps = chunk.payload, shared
                    if c2_placement is not None:
                        sub, pos = OmpChunk.unpack(payload, 0)
                        omps = _omp_set_from_chunk(sub, c2_placement)
                        payload = payload[pos:]
                    shape = latent_shape(h, w, self.intra.cfg.latent_channels)
                    symbols = self.intra.prob.decompress(payload, shape)
                    recon[chunk.frame_index] = self._intra_recon(symbols, h, w, omps)
                else:
                    step = sched.step_for(chunk.frame_index)
                    shape = latent_shape(h, w, self.inter.cfg.latent_channels)
                    symbols = self.inter.prob.decompress(chunk.payload, shape, self._entropy_ctx(recon, step))
                    terms = self._inter_terms(symbols, recon, step, h, w, header.motion_scaling)
                    recon[chunk.frame_index] = self._inter_recon(terms, chunk.scalars)
        except EntropyCodingError as exc:
            raise DecodeError(f"corrupt latent payload: {exc}") from exc
        return torch.cat([recon[i] for i in range(header.frame_count)])
