"""Command-line entry points: train-intra, pretrain-inter, finetune-inter,
encode, decode, eval and ablate."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import typing
from dataclasses import fields, replace
from pathlib import Path

import torch

from .bitstream import BitstreamError
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .codec import EncodeOptions, VideoCodec, decoder_size_bytes
from .data import load_dataset, to_tensor, to_uint8, toy_dataset
from .evaluation import MetricsReport, video_metrics
from .inter import InterConfig
from .intra import IntraConfig
from .training import PROFILES, TrainConfig, finetune_inter, pretrain_inter, profile, train_intra
from .video_io import FORMATS, VideoFormatError, from_rgb, read_video, to_rgb_frames, write_video

# ablation id -> (encode options, intra only)
ABLATIONS = {
    "c1": (dict(omp_strategy="c1"), True),
    "c2": (dict(omp_strategy="c2"), True),
    "c3": (dict(omp_strategy="c3"), True),
    "c4": (dict(omp_strategy="c3", overfit_combiner=False, motion_scaling=False), False),
    "c5": (dict(omp_strategy="c3", overfit_combiner=False, motion_scaling=True), False),
    "c6": (dict(omp_strategy="c3", overfit_combiner=True, motion_scaling=False), False),
}


class CliError(Exception):
    pass


def parse_config_file(path) -> dict[str, str]:
    """``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


def _coerce(value: str, hint):
    """Parse ``value`` as the annotated field type ``hint``."""
    options = [a for a in typing.get_args(hint) if a is not type(None)] if typing.get_origin(hint) is not tuple else []
    if options:
        if value.lower() in ("none", ""):
            return None
        hint = options[0]
    if hint is bool:
        return value.lower() in ("1", "true", "yes", "on")
    if typing.get_origin(hint) is tuple or hint is tuple:
        return tuple(int(v) for v in value.replace(",", " ").split())
    if hint in (int, float):
        try:
            return hint(value)
        except ValueError as exc:
            raise CliError(f"expected {hint.__name__}, got {value!r}") from exc
    return value


def apply_overrides(obj, items: dict[str, str]):
    """Set dataclass fields from strings, coercing to each field's annotated type."""
    hints = typing.get_type_hints(type(obj))
    names = {f.name for f in fields(obj)}
    kwargs = {}
    for key, value in items.items():
        if key not in names:
            raise CliError(f"unknown setting {key!r} for {type(obj).__name__}")
        kwargs[key] = _coerce(value, hints[key])
    return replace(obj, **kwargs)


def _split_settings(args) -> tuple[dict, dict]:
    """Training and ``model.``-prefixed settings from ``--config`` and ``--set``."""
    items = parse_config_file(args.config) if args.config else {}
    for entry in args.set or []:
        if "=" not in entry:
            raise CliError(f"--set expects key=value, got {entry!r}")
        k, v = entry.split("=", 1)
        items[k.strip()] = v.strip()
    train = {k: v for k, v in items.items() if not k.startswith("model.")}
    model = {k[len("model."):]: v for k, v in items.items() if k.startswith("model.")}
    return train, model


def _train_config(args) -> tuple[TrainConfig, dict]:
    train, model = _split_settings(args)
    cfg = apply_overrides(profile(args.profile), train)
    if args.log:
        cfg = apply_overrides(cfg, {"log_path": args.log})
    return cfg, model


def _dataset(args):
    if args.data:
        return load_dataset(args.data)
    return toy_dataset(args.toy_clips, num_frames=9, sizes=((64, 64), (96, 96)), seed=args.seed)


def _load_frames(path: str, fmt: str | None) -> torch.Tensor:
    return to_tensor(to_rgb_frames(read_video(path, fmt)))


def cmd_train_intra(args) -> int:
    cfg, model = _train_config(args)
    model_cfg = apply_overrides(IntraConfig(), model)
    result = train_intra(_dataset(args), cfg, model_cfg=model_cfg)
    fp = save_checkpoint(args.out, intra=result.model, train=cfg.to_dict())
    print(f"saved {args.out} fingerprint={fp[:16]}")
    return 0


def cmd_pretrain_inter(args) -> int:
    cfg, model = _train_config(args)
    model_cfg = apply_overrides(InterConfig(), model)
    result = pretrain_inter(_dataset(args), cfg, model_cfg=model_cfg)
    fp = save_checkpoint(args.out, inter=result.model, train=cfg.to_dict())
    print(f"saved {args.out} fingerprint={fp[:16]}")
    return 0


def cmd_finetune_inter(args) -> int:
    cfg, _ = _train_config(args)
    intra = load_checkpoint(args.intra).intra
    inter = load_checkpoint(args.inter).inter
    if intra is None or inter is None:
        raise CliError("--intra and --inter must hold an intra and an inter model")
    result = finetune_inter(intra, inter, _dataset(args), cfg)
    fp = save_checkpoint(args.out, intra=intra, inter=result.model, train=cfg.to_dict(), audit=result.audit)
    print(f"saved {args.out} fingerprint={fp[:16]} reference_sources={result.audit}")
    return 0


def _codec(model_path) -> VideoCodec:
    ckpt = load_checkpoint(model_path)
    if ckpt.intra is None:
        raise CliError(f"{model_path} has no intra model")
    return VideoCodec(ckpt.intra, ckpt.inter, ckpt.fingerprint)


def _encode_options(args, **overrides) -> EncodeOptions:
    opts = dict(
        lam=args.lam, intra_period=args.intra_period, overfit_latent=not args.no_overfit_latent,
        omp_strategy=args.omp_strategy, motion_scaling=not args.no_motion_scaling,
        overfit_combiner=not args.no_combiner_overfit, scales=args.scales,
    )
    if args.overfit_config:
        opts.update(parse_config_file(args.overfit_config))
    opts.update(overrides)
    return apply_overrides(EncodeOptions(), {k: str(v) for k, v in opts.items()})


def _emit_report(report: MetricsReport, path: str | None) -> None:
    for line in report.records():
        print(line)
    if path:
        Path(path).write_text(report.to_json())


def cmd_encode(args) -> int:
    torch.manual_seed(args.seed)
    codec = _codec(args.model)
    frames = _load_frames(args.input, args.format)
    result = codec.encode(frames, _encode_options(args))
    Path(args.output).write_bytes(result.data)
    if args.reconstruction:
        write_video(from_rgb(to_uint8(result.reconstruction), _raw_format(args.reconstruction)), args.reconstruction)
    report = MetricsReport(args.lam, [video_metrics(
        frames, result.reconstruction, len(result.data), args.lam,
        decoder_size_bytes(codec.intra, codec.inter), Path(args.input).name, args.scales,
    )])
    _emit_report(report, args.report)
    return 0


def _raw_format(path: str) -> str:
    p = Path(path)
    if p.suffix == ".rgb":
        return "rgb24"
    if p.suffix == ".yuv":
        return "yuv420"
    return "png"


def cmd_decode(args) -> int:
    codec = _codec(args.model)
    frames = codec.decode(Path(args.input).read_bytes())
    fmt = args.format or _raw_format(args.output)
    write_video(from_rgb(to_uint8(frames), fmt), args.output)
    print(f"decoded {frames.shape[0]} frames {frames.shape[-1]}x{frames.shape[-2]} -> {args.output}")
    return 0


def cmd_eval(args) -> int:
    original = to_rgb_frames(read_video(args.original, args.format))
    recon = to_rgb_frames(read_video(args.reconstruction, args.format))
    size = Path(args.bitstream).stat().st_size if args.bitstream else 0
    decoder = 0
    if args.model:
        ckpt = load_checkpoint(args.model)
        decoder = decoder_size_bytes(ckpt.intra, ckpt.inter)
    report = MetricsReport(args.lam, [video_metrics(original, recon, size, args.lam, decoder,
                                                    Path(args.original).name, args.scales)])
    _emit_report(report, args.report)
    return 0


def run_ablation(codec: VideoCodec, videos: dict[str, torch.Tensor], ids, base: EncodeOptions) -> dict[str, MetricsReport]:
    reports = {}
    decoder = decoder_size_bytes(codec.intra, codec.inter)
    for ablation_id in ids:
        overrides, intra_only = ABLATIONS[ablation_id]
        opts = replace(base, **overrides, intra_period=1 if intra_only else base.intra_period)
        report = MetricsReport(base.lam)
        for name, frames in videos.items():
            result = codec.encode(frames, opts)
            report.videos.append(video_metrics(frames, result.reconstruction, len(result.data), base.lam,
                                               decoder, name, base.scales))
        reports[ablation_id] = report
    return reports


def cmd_ablate(args) -> int:
    codec = _codec(args.model)
    videos = {Path(p).name: _load_frames(p, args.format) for p in args.input}
    reports = run_ablation(codec, videos, args.ids, _encode_options(args))
    for ablation_id, report in reports.items():
        agg = report.aggregate
        print(f"{ablation_id} bpp={agg['bpp']:.5f} ms_ssim={agg['ms_ssim']:.5f} score={agg['score']:.5f}")
    if args.report:
        Path(args.report).write_text(json.dumps({k: r.to_dict() for k, r in reports.items()}, indent=2))
    return 0


def _add_train_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="directory of videos (frame folders or raw files with sidecars)")
    p.add_argument("--toy-clips", type=int, default=16, help="synthetic clips when --data is absent")
    p.add_argument("--profile", choices=sorted(PROFILES), default="toy")
    p.add_argument("--config", help="key=value file; model.* keys configure the network")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--log", help="append JSON-lines training records here")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)


def _add_encode_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", required=True)
    p.add_argument("--format", choices=FORMATS)
    p.add_argument("--lambda", dest="lam", type=float, default=0.1)
    p.add_argument("--intra-period", type=int, default=8)
    p.add_argument("--no-overfit-latent", action="store_true")
    p.add_argument("--omp-strategy", choices=("c1", "c2", "c3"), default="c1")
    p.add_argument("--no-motion-scaling", action="store_true")
    p.add_argument("--no-combiner-overfit", action="store_true")
    p.add_argument("--scales", type=int, default=4, help="MS-SSIM scales (reduced to fit small frames)")
    p.add_argument("--overfit-config", help="key=value file of encoder options")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", help="write the JSON metrics report here")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nnvc", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-intra", help="train the intra codec")
    _add_train_args(p)
    p.set_defaults(func=cmd_train_intra)

    p = sub.add_parser("pretrain-inter", help="pretrain the inter codec on uncompressed references")
    _add_train_args(p)
    p.set_defaults(func=cmd_pretrain_inter)

    p = sub.add_parser("finetune-inter", help="finetune the inter codec on intra-coded GOPs")
    _add_train_args(p)
    p.add_argument("--intra", required=True)
    p.add_argument("--inter", required=True)
    p.set_defaults(func=cmd_finetune_inter)

    p = sub.add_parser("encode", help="encode a video")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--reconstruction", help="also write the encoder-side reconstruction")
    _add_encode_args(p)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="decode a bitstream")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--model", required=True)
    p.add_argument("--format", choices=FORMATS)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="compare a reconstruction against its original")
    p.add_argument("original")
    p.add_argument("reconstruction")
    p.add_argument("--bitstream")
    p.add_argument("--model", help="checkpoint, for the decoder size")
    p.add_argument("--format", choices=FORMATS)
    p.add_argument("--lambda", dest="lam", type=float, default=0.1)
    p.add_argument("--scales", type=int, default=4)
    p.add_argument("--report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run ablation configurations c1-c6")
    p.add_argument("input", nargs="+")
    p.add_argument("--ids", nargs="+", choices=sorted(ABLATIONS), default=sorted(ABLATIONS))
    _add_encode_args(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (CliError, CheckpointError, BitstreamError, VideoFormatError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
