import numpy as np
import pytest

from melgen import dsp


def test_frame_count_matches_centered_stft():
    x = np.random.default_rng(0).normal(size=16380)
    spec = dsp.stft(x, 1024, 256)
    assert spec.shape == (513, dsp.num_frames(16380, 256))
    assert spec.shape == (513, 64)


def test_stft_istft_round_trip():
    rng = np.random.default_rng(1)
    x = rng.normal(size=16380)
    win = dsp.make_window("hann", 1024)
    spec = dsp.stft(x, 1024, 256, win)
    y = dsp.istft(spec, 256, win, length=len(x))
    assert y.shape == x.shape
    # interior reconstruction is near-exact; edges carry padding artifacts
    assert np.allclose(x[1024:-1024], y[1024:-1024], atol=1e-8)


def test_istft_length_trims_and_pads():
    x = np.random.default_rng(2).normal(size=8192)
    spec = dsp.stft(x, 1024, 256)
    assert len(dsp.istft(spec, 256, length=5000)) == 5000
    assert len(dsp.istft(spec, 256, length=9000)) == 9000


def test_stft_rejects_short_and_non_mono_input():
    with pytest.raises(ValueError):
        dsp.stft(np.zeros(10), 1024, 256)
    with pytest.raises(ValueError):
        dsp.stft(np.zeros((4, 100)), 1024, 256)


def test_window_requires_known_name():
    with pytest.raises(ValueError):
        dsp.make_window("blackman-ish", 64)


def test_mel_filterbank_rows_nonnegative_and_contiguous():
    fb = dsp.mel_filterbank(44100, 1024, 64, 0.0, 22050.0)
    assert fb.shape == (64, 513)
    assert (fb >= 0).all()
    for row in fb:
        support = np.flatnonzero(row > 0)
        assert support.size > 0
        assert np.array_equal(support, np.arange(support[0], support[-1] + 1))


def test_mel_filterbank_validates_band():
    with pytest.raises(ValueError):
        dsp.mel_filterbank(44100, 1024, 64, 100.0, 50.0)
    with pytest.raises(ValueError):
        dsp.mel_filterbank(44100, 1024, 64, 0.0, 30000.0)


def test_mel_scale_round_trip():
    f = np.array([0.0, 440.0, 1000.0, 22050.0])
    assert np.allclose(dsp.mel_to_hz(dsp.hz_to_mel(f)), f)


def test_phase_vocoder_rate_one_preserves_frames():
    x = np.sin(2 * np.pi * 440 * np.arange(16384) / 44100)
    spec = dsp.stft(x, 2048, 512)
    out = dsp.phase_vocoder(spec, 1.0, 512)
    assert out.shape == spec.shape
    assert np.allclose(np.abs(out), np.abs(spec), atol=1e-9)


def test_phase_vocoder_changes_frame_count():
    x = np.random.default_rng(3).normal(size=16384)
    spec = dsp.stft(x, 2048, 512)
    faster = dsp.phase_vocoder(spec, 2.0, 512)
    slower = dsp.phase_vocoder(spec, 0.5, 512)
    assert faster.shape[1] == int(np.ceil(spec.shape[1] / 2.0))
    assert slower.shape[1] == int(np.ceil(spec.shape[1] / 0.5))
