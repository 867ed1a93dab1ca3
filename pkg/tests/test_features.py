import numpy as np
import pytest

from melgen import dsp, features
from melgen.dataset import AudioClip
from melgen.features import (
    FeatureError,
    MelConfig,
    NormStats,
    SpectrogramCorpus,
    apply_norm,
    build_corpus,
    extract_windows,
    fit_norm,
    invert_norm,
    log_mel,
    normalize_corpus,
)
from conftest import make_sine_clip

CFG = MelConfig()


def _clip(n_samples: int, value: float = 0.01) -> AudioClip:
    return AudioClip("c", np.full(n_samples, value, dtype=np.float32), 44100, 0)


class TestExtractWindows:
    def test_exact_multiple(self):
        assert len(extract_windows(_clip(2 * 16380), CFG)) == 2

    def test_below_threshold(self):
        assert extract_windows(_clip(16379), CFG) == []

    def test_remainder_discarded(self):
        windows = extract_windows(_clip(16380 * 3 + 500), CFG)
        assert len(windows) == 3
        assert all(len(w) == 16380 for w in windows)


class TestLogMel:
    def test_silence_hits_log_floor(self):
        spec = log_mel(np.zeros(16380), CFG)
        assert spec.values.shape == (64, 64)
        assert np.allclose(spec.values, np.log(CFG.log_floor), atol=1e-5)

    def test_shape_is_64x64(self):
        spec = log_mel(np.random.default_rng(0).normal(size=16380), CFG)
        assert spec.values.shape == (64, 64)
        assert np.isfinite(spec.values).all()

    def test_deterministic(self):
        w = np.random.default_rng(1).normal(size=16380)
        a = log_mel(w, CFG).values
        b = log_mel(w, CFG).values
        assert np.array_equal(a, b)

    def test_wrong_length_rejected(self):
        with pytest.raises(FeatureError):
            log_mel(np.zeros(100), CFG)

    def test_sine_lands_in_derived_mel_bin(self):
        # independent derivation of the expected bin: triangular filter
        # responses at 1 kHz from the analytic mel formula
        freq = 1000.0
        mel = lambda f: 2595.0 * np.log10(1.0 + f / 700.0)
        inv = lambda m: 700.0 * (10.0 ** (m / 2595.0) - 1.0)
        points = inv(np.linspace(mel(CFG.fmin), mel(CFG.fmax), CFG.n_mels + 2))
        responses = []
        for m in range(CFG.n_mels):
            lo, center, hi = points[m], points[m + 1], points[m + 2]
            tri = max(0.0, min((freq - lo) / (center - lo), (hi - freq) / (hi - center)))
            responses.append(tri * 2.0 / (hi - lo))
        expected_bin = int(np.argmax(responses))

        clip = make_sine_clip(freq, duration=16380 / 44100 + 0.01)
        spec = log_mel(clip.samples[:16380], CFG)
        mean_power = np.exp(spec.values.astype(np.float64)).mean(axis=1)
        assert int(np.argmax(mean_power)) == expected_bin

    def test_noise_flatter_than_sine(self):
        rng = np.random.default_rng(2)
        noise_spec = log_mel(rng.normal(0, 0.1, 16380), CFG)
        sine_spec = log_mel(make_sine_clip(1500.0).samples[:16380], CFG)

        def flatness(spec):
            p = np.exp(spec.values.astype(np.float64)).mean(axis=1)
            return np.exp(np.mean(np.log(p + 1e-30))) / np.mean(p)

        assert flatness(noise_spec) > flatness(sine_spec)


class TestNormalization:
    def test_constant_corpus_rejected(self):
        corpus = SpectrogramCorpus(
            values=np.full((1, 64, 64), 3.0, dtype=np.float32),
            labels=np.array([0]),
            clip_ids=["a"],
            window_indices=np.array([0]),
            normalized=False,
            mel_config=CFG,
        )
        with pytest.raises(FeatureError, match="sigma"):
            fit_norm(corpus)

    def test_two_point_distribution(self):
        corpus = SpectrogramCorpus(
            values=np.stack([np.ones((64, 64)), np.full((64, 64), 3.0)]).astype(np.float32),
            labels=np.array([0, 1]),
            clip_ids=["a", "b"],
            window_indices=np.array([0, 0]),
            normalized=False,
            mel_config=CFG,
        )
        stats = fit_norm(corpus)
        assert stats.mu == pytest.approx(2.0)
        assert stats.sigma == pytest.approx(1.0)

    def test_zero_mean_unit_std_after_normalization(self, small_toy_corpus):
        stats = fit_norm(small_toy_corpus)
        normed = normalize_corpus(small_toy_corpus, stats)
        assert abs(float(normed.values.mean())) < 1e-5
        assert abs(float(normed.values.std()) - 1.0) < 1e-5

    def test_round_trip_identity(self):
        rng = np.random.default_rng(3)
        spec = features.Spectrogram(rng.normal(size=(64, 64)).astype(np.float32), 0, "x", 0, False)
        stats = NormStats(mu=1.7, sigma=2.3)
        back = invert_norm(apply_norm(spec, stats), stats)
        assert np.allclose(back.values, spec.values, atol=1e-6)

    def test_identity_stats_are_noop(self):
        spec = features.Spectrogram(np.ones((64, 64), dtype=np.float32), 0, "x", 0, False)
        out = apply_norm(spec, NormStats(0.0, 1.0))
        assert np.array_equal(out.values, spec.values)

    def test_pointwise_arithmetic(self):
        spec = features.Spectrogram(np.full((64, 64), 5.0, dtype=np.float32), 0, "x", 0, False)
        out = apply_norm(spec, NormStats(mu=2.0, sigma=1.5))
        assert np.allclose(out.values, 2.0)

    def test_double_normalization_rejected(self):
        spec = features.Spectrogram(np.zeros((64, 64), dtype=np.float32), 0, "x", 0, False)
        stats = NormStats(1.0, 2.0)
        normed = apply_norm(spec, stats)
        with pytest.raises(FeatureError, match="already normalized"):
            apply_norm(normed, stats)
        with pytest.raises(FeatureError, match="not normalized"):
            invert_norm(spec, stats)

    def test_sigma_must_be_positive(self):
        with pytest.raises(FeatureError):
            NormStats(0.0, 0.0)


class TestCorpus:
    def test_build_corpus_window_accounting(self, small_toy_manifest, small_toy_corpus):
        expected = sum(
            len(extract_windows(small_toy_manifest.load_clip(r.clip_id), CFG))
            for r in small_toy_manifest.clips
        )
        assert len(small_toy_corpus) == expected
        assert small_toy_corpus.values.shape[1:] == (64, 64)

    def test_build_corpus_sorted_by_clip_then_window(self, small_toy_corpus):
        keys = list(zip(small_toy_corpus.clip_ids, small_toy_corpus.window_indices))
        assert keys == sorted(keys)

    def test_save_load_round_trip(self, small_toy_corpus, tmp_path):
        stats = fit_norm(small_toy_corpus)
        normed = normalize_corpus(small_toy_corpus, stats)
        normed.provenance = {"strategy": "none", "seed": 1}
        base = tmp_path / "corpus"
        bin_path, idx_path = normed.save(base)
        assert bin_path.exists() and idx_path.exists()
        loaded = SpectrogramCorpus.load(base)
        assert np.array_equal(loaded.values, normed.values)
        assert np.array_equal(loaded.labels, normed.labels)
        assert loaded.clip_ids == normed.clip_ids
        assert loaded.normalized is True
        assert loaded.mel_config == normed.mel_config
        assert loaded.norm_stats == stats
        assert loaded.provenance == normed.provenance

    def test_binary_layout_is_mel_major_float32_le(self, small_toy_corpus, tmp_path):
        base = tmp_path / "corpus"
        bin_path, idx_path = small_toy_corpus.save(base)
        import json

        index = json.loads(idx_path.read_text())
        raw = np.fromfile(bin_path, dtype="<f4")
        assert raw.size == len(small_toy_corpus) * 64 * 64
        rec = index["records"][3]
        assert rec["offset"] == 3 * 64 * 64 * 4
        start = rec["offset"] // 4
        assert np.array_equal(raw[start : start + 4096].reshape(64, 64), small_toy_corpus.values[3])

    def test_truncated_binary_rejected(self, small_toy_corpus, tmp_path):
        base = tmp_path / "corpus"
        bin_path, _ = small_toy_corpus.save(base)
        data = bin_path.read_bytes()
        bin_path.write_bytes(data[: len(data) // 2])
        with pytest.raises(FeatureError, match="size mismatch"):
            SpectrogramCorpus.load(base)

    def test_restrict_to_clips(self, small_toy_corpus):
        wanted = {small_toy_corpus.clip_ids[0]}
        sub = small_toy_corpus.restrict_to_clips(wanted)
        assert set(sub.clip_ids) == wanted
        assert len(sub) == small_toy_corpus.clip_ids.count(small_toy_corpus.clip_ids[0])

    def test_merge_requires_same_normalization(self, small_toy_corpus):
        stats = fit_norm(small_toy_corpus)
        normed = normalize_corpus(small_toy_corpus, stats)
        with pytest.raises(FeatureError):
            small_toy_corpus.extend(normed)


def test_mel_config_validation():
    with pytest.raises(FeatureError):
        MelConfig(hop=0)
    with pytest.raises(FeatureError):
        MelConfig(fmin=3000.0, fmax=1000.0)
    with pytest.raises(FeatureError):
        MelConfig(log_floor=0.0)


def test_mel_config_json_round_trip():
    cfg = MelConfig(n_fft=2048, fmax=16000.0)
    assert MelConfig.from_json(cfg.to_json()) == cfg
