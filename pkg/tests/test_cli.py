import json

import numpy as np
import pytest
import torch

from nnvc.checkpoint import load_checkpoint, save_checkpoint
from nnvc.cli import ABLATIONS, CliError, apply_overrides, main, parse_config_file
from nnvc.codec import EncodeOptions
from nnvc.data import synthetic_video, to_tensor
from nnvc.evaluation import MetricsReport, video_metrics, video_ms_ssim
from nnvc.metrics import ms_ssim
from nnvc.video_io import from_rgb, read_video, to_rgb_frames, write_video

TINY_MODEL = ["--set", "model.channels=8", "--set", "model.latent_channels=8", "--set", "model.prob_hidden=8"]
FAST_TRAIN = ["--set", "epochs=1", "--set", "steps_per_epoch=1", "--set", "batch=1", "--toy-clips", "2"]


@pytest.fixture
def workspace(tmp_path, intra_model, inter_model):
    model = tmp_path / "model.pt"
    save_checkpoint(model, intra=intra_model, inter=inter_model)
    video = tmp_path / "clip.rgb"
    write_video(from_rgb(synthetic_video(3, 64, 64, (1.0, 0.5), seed=4)), video)
    return tmp_path, model, video


def _overfit_file(tmp_path):
    path = tmp_path / "overfit.cfg"
    path.write_text("latent_steps = 2  # few steps\nomp_steps=3\nscalar_steps=2\n")
    return str(path)


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "a.cfg"
    path.write_text("# comment\nlam = 0.3\n\nd_choices = 1, 2\noverfit_latent = false\n")
    items = parse_config_file(path)
    assert items == {"lam": "0.3", "d_choices": "1, 2", "overfit_latent": "false"}
    opts = apply_overrides(EncodeOptions(), {"lam": "0.3", "overfit_latent": "false"})
    assert opts.lam == 0.3 and opts.overfit_latent is False
    with pytest.raises(CliError):
        apply_overrides(EncodeOptions(), {"nope": "1"})
    path.write_text("junk\n")
    with pytest.raises(CliError):
        parse_config_file(path)


def test_training_verbs_write_checkpoints(tmp_path):
    intra, inter, both = tmp_path / "i.pt", tmp_path / "p.pt", tmp_path / "f.pt"
    log = tmp_path / "log.jsonl"
    assert main(["train-intra", "--out", str(intra), "--log", str(log), *FAST_TRAIN, *TINY_MODEL]) == 0
    assert json.loads(log.read_text().splitlines()[0])["stage"] == "intra"
    inter_model = ["--set", "model.channels=8", "--set", "model.latent_channels=8", "--set", "model.prob_hidden=8",
                   "--set", "model.entropy_channels=4", "--set", "model.embed_dim=4"]
    assert main(["pretrain-inter", "--out", str(inter), *FAST_TRAIN, *inter_model]) == 0
    assert main(["finetune-inter", "--out", str(both), "--intra", str(intra), "--inter", str(inter), *FAST_TRAIN]) == 0
    ckpt = load_checkpoint(both)
    assert ckpt.intra is not None and ckpt.inter is not None
    assert ckpt.meta["audit"].get("ground_truth", 0) == 0


def test_encode_decode_eval_round_trip(workspace, capsys):
    tmp, model, video = workspace
    stream, recon, decoded, report = tmp / "s.bin", tmp / "enc.rgb", tmp / "dec.rgb", tmp / "r.json"
    args = ["--model", str(model), "--scales", "3", "--overfit-config", _overfit_file(tmp)]
    assert main(["encode", str(video), str(stream), "--reconstruction", str(recon), "--report", str(report), *args]) == 0
    assert main(["decode", str(stream), str(decoded), "--model", str(model)]) == 0
    assert decoded.read_bytes() == recon.read_bytes()
    encoded = json.loads(report.read_text())
    assert encoded["aggregate"]["bpp"] == pytest.approx(8 * stream.stat().st_size / (64 * 64 * 3))

    eval_report = tmp / "e.json"
    assert main(["eval", str(video), str(decoded), "--bitstream", str(stream), "--model", str(model),
                 "--scales", "3", "--report", str(eval_report)]) == 0
    evaluated = json.loads(eval_report.read_text())["videos"][0]
    reported = encoded["videos"][0]
    for key in ("bpp", "ms_ssim", "psnr", "score", "combined_size"):
        assert evaluated[key] == pytest.approx(reported[key], abs=1e-9), key
    out = capsys.readouterr().out
    assert "aggregate bpp=" in out and "score=" in out


def test_encode_is_deterministic(workspace):
    tmp, model, video = workspace
    args = ["--model", str(model), "--scales", "3", "--overfit-config", _overfit_file(tmp)]
    assert main(["encode", str(video), str(tmp / "a.bin"), *args]) == 0
    assert main(["encode", str(video), str(tmp / "b.bin"), *args]) == 0
    assert (tmp / "a.bin").read_bytes() == (tmp / "b.bin").read_bytes()


def test_baseline_flags_match_c4(workspace):
    tmp, model, video = workspace
    args = ["--model", str(model), "--scales", "3", "--overfit-config", _overfit_file(tmp)]
    assert main(["encode", str(video), str(tmp / "flags.bin"), "--omp-strategy", "c3", "--no-combiner-overfit",
                 "--no-motion-scaling", *args]) == 0
    assert main(["ablate", str(video), "--ids", "c4", "--report", str(tmp / "ab.json"), *args]) == 0
    flags = json.loads((tmp / "ab.json").read_text())["c4"]["videos"][0]
    assert flags["bitstream_bytes"] == (tmp / "flags.bin").stat().st_size


def test_ablate_runs_every_configuration(workspace, capsys):
    tmp, model, video = workspace
    assert main(["ablate", str(video), "--model", str(model), "--scales", "3",
                 "--overfit-config", _overfit_file(tmp)]) == 0
    lines = [l for l in capsys.readouterr().out.splitlines() if l.startswith("c")]
    assert [l.split()[0] for l in lines] == sorted(ABLATIONS)


def test_typed_errors_exit_with_status_two(workspace, capsys):
    tmp, model, video = workspace
    assert main(["decode", str(video), str(tmp / "x.rgb"), "--model", str(model)]) == 2
    assert main(["encode", str(tmp / "missing.rgb"), str(tmp / "x.bin"), "--model", str(model)]) == 2
    assert main(["encode", str(video), str(tmp / "x.bin"), "--model", str(video)]) == 2
    write_video(from_rgb(synthetic_video(2, 32, 32, seed=1)), tmp / "small.rgb")
    assert main(["eval", str(video), str(tmp / "small.rgb")]) == 2
    assert "error:" in capsys.readouterr().err


def test_identical_videos_report_perfect_quality():
    frames = synthetic_video(2, 64, 64, seed=2)
    m = video_metrics(frames, frames, 1000, 0.1)
    assert m.ms_ssim == 1.0 and m.psnr == 99.0 and m.psnr_yuv == 99.0
    assert m.score == pytest.approx(1.0 - 0.1 * m.bpp)


def test_report_aggregate_is_mean_over_videos():
    a = video_metrics(synthetic_video(2, 64, 64, seed=2), synthetic_video(2, 64, 64, seed=3), 500, 0.1, 10**6)
    b = video_metrics(synthetic_video(3, 64, 64, seed=4), synthetic_video(3, 64, 64, seed=4), 900, 0.1, 10**6)
    agg = MetricsReport(0.1, [a, b]).aggregate
    assert agg["bpp"] == pytest.approx((a.bpp + b.bpp) / 2)
    assert agg["score"] == pytest.approx((a.score + b.score) / 2)
    assert agg["combined_size"] == pytest.approx(1.0 + 1400 / 1e6 / 0.019)


def test_eval_ms_ssim_matches_training_metric():
    a, b = synthetic_video(3, 64, 64, seed=5), synthetic_video(3, 64, 64, seed=6)
    ta = to_tensor(a).double()
    tb = to_tensor(b).double()
    assert video_ms_ssim(a, b, 3) == pytest.approx(ms_ssim(ta, tb, 3).item(), abs=1e-6)
