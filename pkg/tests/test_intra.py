import pytest
import torch

from nnvc.blocks import AddressingError, OMPSet
from nnvc.data import toy_dataset
from nnvc.intra import (
    LAST_DSA,
    SCALE_FACTOR,
    IntraConfig,
    IntraModel,
    finalize,
    intra_decode,
    intra_encode,
)
from nnvc.metrics import ms_ssim
from nnvc.probability import SYMBOL_MAX, SYMBOL_MIN


def _frame(seed=0, h=64, w=64):
    return toy_dataset(1, 1, sizes=((h, w),), seed=seed)[0]


def test_latent_shape():
    torch.manual_seed(0)
    model = IntraModel(IntraConfig(channels=8, latent_channels=32)).eval()
    latent = intra_encode(_frame(), model)
    assert SCALE_FACTOR == 16
    assert latent.symbols.shape == (1, 32, 4, 4)


def test_constant_frame_encodes_deterministically(intra_model):
    gray = torch.full((1, 3, 64, 64), 0.5)
    a, b = intra_encode(gray, intra_model), intra_encode(gray, intra_model)
    assert torch.equal(a.symbols, b.symbols)
    assert torch.equal(intra_decode(a, intra_model), intra_decode(b, intra_model))


def test_latent_is_integer_and_in_range(intra_model):
    latent = intra_encode(_frame(1) * 1.0, intra_model)
    assert latent.symbols.dtype == torch.int64
    assert latent.symbols.min() >= SYMBOL_MIN and latent.symbols.max() <= SYMBOL_MAX
    assert latent.symbol_range == (SYMBOL_MIN, SYMBOL_MAX)


def test_odd_sizes_are_padded_and_cropped(intra_model):
    frame = _frame(2, 40, 56)
    latent = intra_encode(frame, intra_model)
    assert latent.symbols.shape[-2:] == (3, 4)
    out = intra_decode(latent, intra_model)
    assert out.shape == frame.shape
    assert out.min() >= 0 and out.max() <= 1


def test_non_finite_input_is_rejected(intra_model):
    frame = _frame()
    frame[0, 0, 0, 0] = float("nan")
    with pytest.raises(ValueError):
        intra_encode(frame, intra_model)


def test_decode_is_bit_deterministic(intra_model):
    latent = intra_encode(_frame(3), intra_model)
    assert torch.equal(intra_decode(latent, intra_model), intra_decode(latent, intra_model))


def test_all_one_omps_match_no_omps(intra_model):
    latent = intra_encode(_frame(4), intra_model)
    for strategy in ("c1", "c2"):
        omps = OMPSet.ones(intra_model.omp_placement(strategy))
        diff = (intra_decode(latent, intra_model, omps) - intra_decode(latent, intra_model)).abs().max()
        assert diff <= 1e-6


def test_omp_placement(intra_model):
    c = intra_model.cfg.channels
    c1 = intra_model.omp_placement("c1")
    assert {(b, l) for b, l, _ in c1} == {(LAST_DSA, n) for n in ("head", "res0.conv0", "res1.conv1", "res3.conv1")}
    assert len(c1) == 4 * c
    c2 = intra_model.omp_placement("c2")
    assert set(c1) < set(c2)
    assert ("dec", "out", 0) in c2
    assert intra_model.omp_placement("c3") == []


def test_omp_placement_with_fewer_resblocks():
    model = IntraModel(IntraConfig(channels=8, latent_channels=8, num_resblocks=2, prob_hidden=8))
    layers = {l for _, l, _ in model.omp_placement("c1")}
    assert layers == {"head", "res0.conv0", "res1.conv1"}


def test_mismatched_omp_address_is_rejected(intra_model):
    latent = intra_encode(_frame(), intra_model)
    with pytest.raises(AddressingError):
        intra_decode(latent, intra_model, OMPSet.ones([(LAST_DSA, "res9.conv0", 0)]))
    with pytest.raises(AddressingError):
        intra_decode(latent, intra_model, OMPSet.ones([("dec.dsa0", "head", 99)]))


def test_finalize_snaps_to_eight_bits():
    x = torch.tensor([-0.2, 0.0, 0.5, 0.7012, 1.3])
    out = finalize(x)
    assert torch.equal(out * 255, torch.round(out * 255))
    assert out.min() == 0 and out.max() == 1


def test_training_beats_untrained_model(trained_intra):
    frames = [_frame(seed) for seed in range(123, 127)]
    torch.manual_seed(0)
    untrained = IntraModel(trained_intra.cfg).eval()

    def quality(model):
        with torch.no_grad():
            recons = [intra_decode(intra_encode(f, model), model) for f in frames]
        msssim = sum(float(ms_ssim(f, r, 3)) for f, r in zip(frames, recons)) / len(frames)
        mse = sum(float(((f - r) ** 2).mean()) for f, r in zip(frames, recons)) / len(frames)
        return msssim, mse

    trained_q, untrained_q = quality(trained_intra), quality(untrained)
    assert trained_q[0] > untrained_q[0]
    assert trained_q[1] < untrained_q[1]
