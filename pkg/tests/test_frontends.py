import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from feadapter.features import FeatureKind, FeatureMatrix, TooShortError, WaveformClip
from feadapter.frontends import (
    FbankFrontEnd,
    FbankFrontEndConfig,
    LengthMismatchError,
    WaveFrontEnd,
    WaveFrontEndConfig,
    align_batch_lengths,
    align_lengths,
    downsample_frames,
    downsample_tensor,
    fbank_frontend_forward,
    wave_frontend_forward,
)

from oracles import assert_grad_matches

TINY_WAVE = [(3, 10, 5), (3, 3, 2), (3, 3, 2), (3, 3, 2), (3, 3, 2), (3, 2, 2), (3, 2, 2)]


def conv_length_by_hand(n, layers):
    for _, k, s in layers:
        n = (n - k) // s + 1
    return n


def test_default_stack_golden_frame_count():
    cfg = WaveFrontEndConfig()
    assert conv_length_by_hand(16000, cfg.conv_layers) == 49
    assert cfg.output_length(16000) == 49
    assert cfg.min_samples == 400


def test_wave_forward_frame_count_and_stride():
    torch.manual_seed(0)
    fe = WaveFrontEnd(WaveFrontEndConfig(conv_layers=TINY_WAVE, output_dim=5))
    out = wave_frontend_forward(WaveformClip(np.random.default_rng(0).normal(size=16000) * 0.1), fe)
    assert out.data.shape == (49, 5)
    assert out.stride_ms == 20.0
    assert out.kind is FeatureKind.FRONTEND_OUTPUT


@settings(max_examples=40, deadline=None)
@given(k=st.integers(2, 60))
def test_doubling_length_doubles_frames(k):
    cfg = WaveFrontEndConfig()
    n = 320 * k
    assert abs(cfg.output_length(2 * n) - 2 * cfg.output_length(n)) <= 1


def test_wave_too_short_names_minimum():
    fe = WaveFrontEnd(WaveFrontEndConfig(conv_layers=TINY_WAVE, output_dim=4))
    with pytest.raises(TooShortError) as info:
        fe(torch.zeros(1, 399))
    assert info.value.minimum == 400
    assert "400" in str(info.value)


def test_zero_clip_first_layer_zero_without_bias():
    fe = WaveFrontEnd(WaveFrontEndConfig(conv_layers=TINY_WAVE, output_dim=4))
    with torch.no_grad():
        fe.convs[0].bias.zero_()
    assert torch.count_nonzero(fe.first_layer(torch.zeros(1, 800))) == 0


def test_stride_product_is_validated():
    with pytest.raises(ValueError):
        WaveFrontEndConfig(conv_layers=[(4, 10, 5), (4, 3, 2)])


def test_wave_padded_batch_matches_single_pass():
    torch.manual_seed(1)
    fe = WaveFrontEnd(WaveFrontEndConfig(conv_layers=TINY_WAVE, output_dim=4)).double()
    short = torch.randn(1, 1000, dtype=torch.float64)
    batch = torch.zeros(2, 1600, dtype=torch.float64)
    batch[0, :1000] = short[0]
    batch[1] = torch.randn(1600, dtype=torch.float64)
    out, lengths = fe(batch, torch.tensor([1000, 1600]))
    single, _ = fe(short)
    assert int(lengths[0]) == single.shape[1]
    torch.testing.assert_close(out[0, :single.shape[1]], single[0], rtol=0, atol=1e-12)


def fbank_fm(t, d=40, seed=0):
    return FeatureMatrix(np.random.default_rng(seed).normal(size=(t, d)), 10.0, FeatureKind.FBANK)


@pytest.mark.parametrize("factor, expected, stride", [(2, 49, 20.0), (4, 24, 40.0)])
def test_fbank_frontend_output_length(factor, expected, stride):
    fe = FbankFrontEnd(FbankFrontEndConfig(n_mels=40, subsample_factor=factor, hidden_dim=4, output_dim=6))
    out = fbank_frontend_forward(fbank_fm(98), fe)
    assert out.data.shape == (expected, 6)
    assert out.stride_ms == stride
    assert fe.cfg.output_length(98) == 98 // factor


@settings(max_examples=25, deadline=None)
@given(t=st.integers(4, 60), factor=st.sampled_from([2, 4]))
def test_fbank_frontend_length_is_floor(t, factor):
    fe = FbankFrontEnd(FbankFrontEndConfig(n_mels=12, subsample_factor=factor, hidden_dim=2, output_dim=3))
    out, lengths = fe(torch.zeros(1, t, 12))
    assert out.shape[1] == t // factor == int(lengths[0])


def test_fbank_frontend_rejects_wrong_kind_and_short_input():
    fe = FbankFrontEnd(FbankFrontEndConfig(n_mels=40, subsample_factor=4, hidden_dim=2, output_dim=3))
    with pytest.raises(ValueError):
        fbank_frontend_forward(FeatureMatrix(np.zeros((20, 40)), 10.0, FeatureKind.MFCC), fe)
    with pytest.raises(TooShortError):
        fbank_frontend_forward(fbank_fm(3), fe)
    with pytest.raises(ValueError):
        FbankFrontEndConfig(subsample_factor=3)


def test_constant_input_gives_constant_rows_with_identity_head():
    # Constant input: rows whose receptive field avoids the zero padding see identical
    # inputs, so they agree exactly; the two conv layers pad two rows at each edge.
    torch.manual_seed(0)
    fe = FbankFrontEnd(FbankFrontEndConfig(n_mels=8, subsample_factor=2, hidden_dim=2, output_dim=4)).double()
    with torch.no_grad():
        fe.proj.weight.zero_()
        fe.proj.weight[:, :4] = torch.eye(4, dtype=torch.float64)
        fe.proj.bias.zero_()
    out, _ = fe(torch.ones(1, 20, 8, dtype=torch.float64))
    interior = out[0, 2:-2]
    torch.testing.assert_close(interior, interior[:1].expand_as(interior), rtol=0, atol=1e-12)


def test_fbank_padded_batch_matches_single_pass():
    torch.manual_seed(2)
    fe = FbankFrontEnd(FbankFrontEndConfig(n_mels=12, subsample_factor=4, hidden_dim=3, output_dim=5)).double()
    a = torch.randn(1, 22, 12, dtype=torch.float64)
    batch = torch.randn(2, 40, 12, dtype=torch.float64)
    batch[0, :22] = a[0]
    out, lengths = fe(batch, torch.tensor([22, 40]))
    single, _ = fe(a)
    assert int(lengths[0]) == single.shape[1] == 5
    torch.testing.assert_close(out[0, :5], single[0], rtol=0, atol=1e-12)


def test_downsample_examples():
    frames = FeatureMatrix(np.arange(10.0).reshape(5, 2), 20.0, FeatureKind.FRONTEND_OUTPUT)
    picked = downsample_frames(frames, 2)
    np.testing.assert_array_equal(picked.data, frames.data[[0, 2, 4]])
    assert picked.stride_ms == 40.0
    assert downsample_frames(frames, 1).data is frames.data
    hundred = FeatureMatrix(np.zeros((100, 3)), 20.0, FeatureKind.FRONTEND_OUTPUT)
    assert downsample_frames(hundred, 2).num_frames == 50
    with pytest.raises(ValueError):
        downsample_frames(frames, 0)


def test_downsample_mean_mode():
    x = torch.arange(10.0).reshape(1, 5, 2)
    out = downsample_tensor(x, 2, mode="mean")
    torch.testing.assert_close(out[0], torch.tensor([[1.0, 2.0], [5.0, 6.0], [8.0, 9.0]]))


def fo(t, stride=20.0):
    return FeatureMatrix(np.zeros((t, 3)), stride, FeatureKind.FRONTEND_OUTPUT)


def test_align_examples():
    a, b = align_lengths(fo(49), fo(49))
    assert a.num_frames == b.num_frames == 49
    a, b = align_lengths(fo(50), fo(49))
    assert a.num_frames == b.num_frames == 49
    with pytest.raises(LengthMismatchError):
        align_lengths(fo(49), fo(24))
    with pytest.raises(LengthMismatchError):
        align_lengths(fo(49, 20.0), fo(49, 40.0))


def test_align_batch():
    got = align_batch_lengths(torch.tensor([50, 30]), torch.tensor([49, 31]))
    assert got.tolist() == [49, 30]
    with pytest.raises(LengthMismatchError):
        align_batch_lengths(torch.tensor([50]), torch.tensor([40]))


def test_wave_frontend_gradient_matches_finite_differences():
    torch.manual_seed(3)
    fe = WaveFrontEnd(WaveFrontEndConfig(conv_layers=TINY_WAVE, output_dim=3)).double()
    wav = torch.randn(1, 720, dtype=torch.float64)
    target = torch.randn(1, fe.cfg.output_length(720), 3, dtype=torch.float64)

    def fn():
        return ((fe(wav)[0] - target) ** 2).sum()

    assert_grad_matches(fn, list(fe.parameters()), n_per_param=2)


def test_fbank_frontend_gradient_matches_finite_differences():
    torch.manual_seed(4)
    fe = FbankFrontEnd(FbankFrontEndConfig(n_mels=8, subsample_factor=2, hidden_dim=2, output_dim=3)).double()
    feats = torch.randn(2, 10, 8, dtype=torch.float64)
    lengths = torch.tensor([10, 7])
    target = torch.randn(2, 5, 3, dtype=torch.float64)

    def fn():
        out, _ = fe(feats, lengths)
        return ((out - target) ** 2).sum()

    assert_grad_matches(fn, list(fe.parameters()), n_per_param=3)
