"""Baseline augmentations: additive noise, pitch shift, time stretch, SpecAugment.

The waveform transforms operate on raw clips and are re-windowed through the
features pipeline; SpecAugment operates on normalized spectrograms directly.
`augment_corpus` pairs every original spectrogram with exactly one augmented
sample of the same label, so each strategy doubles per-class counts exactly.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import resample

from . import dsp, features
from .dataset import AudioClip
from .features import Spectrogram, SpectrogramCorpus

STRATEGIES = ("noise", "pitch", "stretch", "specaugment")

_PV_NFFT = 2048
_PV_HOP = 512


class AugmentError(Exception):
    pass


@dataclass(frozen=True)
class SpecAugmentConfig:
    n_freq_masks: int = 1
    freq_mask_max: int = 10  # F
    n_time_masks: int = 1
    time_mask_max: int = 10  # T
    time_warp_max: int = 5  # W
    mask_value: float = 0.0  # corpus mean after z-normalization

    def __post_init__(self):
        if max(self.freq_mask_max, self.time_mask_max, self.time_warp_max) >= 64:
            raise AugmentError("mask widths and warp must be < 64")
        if min(self.n_freq_masks, self.n_time_masks) < 0:
            raise AugmentError("mask counts must be >= 0")


@dataclass(frozen=True)
class ClassicAugmentConfig:
    noise_mu: float = 0.0
    noise_sigma: float = 0.01
    pitch_semitones: float = 3.0
    stretch_factor: float = 1.5
    specaug: SpecAugmentConfig = field(default_factory=SpecAugmentConfig)

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise AugmentError("noise sigma must be >= 0")
        if self.stretch_factor <= 0:
            raise AugmentError("stretch factor must be positive")


def add_noise(clip: AudioClip, sigma: float, seed: int = 0) -> AudioClip:
    """Add i.i.d. zero-mean Gaussian noise per sample."""
    if sigma < 0:
        raise AugmentError("sigma must be >= 0")
    if sigma == 0:
        return AudioClip(clip.clip_id, clip.samples.copy(), clip.sample_rate, clip.label)
    rng = np.random.default_rng(seed)
    noisy = clip.samples + rng.normal(0.0, sigma, size=len(clip.samples))
    return AudioClip(clip.clip_id, noisy.astype(np.float32), clip.sample_rate, clip.label)


def time_stretch(clip: AudioClip, factor: float) -> AudioClip:
    """Phase-vocoder time stretch: output duration = input / factor, pitch kept."""
    if factor <= 0:
        raise AugmentError("stretch factor must be positive")
    if factor == 1.0:
        return AudioClip(clip.clip_id, clip.samples.copy(), clip.sample_rate, clip.label)
    x = np.asarray(clip.samples, dtype=np.float64)
    if len(x) < _PV_NFFT:
        raise AugmentError(
            f"clip {clip.clip_id!r} too short for the phase vocoder "
            f"({len(x)} < {_PV_NFFT} samples)"
        )
    out_len = int(round(len(x) / factor))
    if out_len < _PV_NFFT:
        raise AugmentError(f"stretch factor {factor} leaves less than one STFT frame")
    window = dsp.make_window("hann", _PV_NFFT)
    spec = dsp.stft(x, _PV_NFFT, _PV_HOP, window)
    stretched = dsp.phase_vocoder(spec, factor, _PV_HOP)
    y = dsp.istft(stretched, _PV_HOP, window, length=out_len)
    return AudioClip(clip.clip_id, y.astype(np.float32), clip.sample_rate, clip.label)


def pitch_shift(clip: AudioClip, semitones: float) -> AudioClip:
    """Shift pitch by a number of semitones at constant duration.

    Implemented as a phase-vocoder stretch by 1/2^(s/12) followed by
    resampling back to the original length.
    """
    if abs(semitones) > 12:
        raise AugmentError("pitch shift limited to +/-12 semitones")
    if semitones == 0:
        return AudioClip(clip.clip_id, clip.samples.copy(), clip.sample_rate, clip.label)
    factor = 2.0 ** (semitones / 12.0)
    stretched = time_stretch(clip, 1.0 / factor)  # duration * factor
    y = resample(np.asarray(stretched.samples, dtype=np.float64), len(clip.samples))
    return AudioClip(clip.clip_id, y.astype(np.float32), clip.sample_rate, clip.label)


def spec_augment(
    spec: Spectrogram,
    cfg: SpecAugmentConfig,
    seed: int | np.random.SeedSequence = 0,
) -> Spectrogram:
    """Random time warp plus frequency and time masking on one spectrogram."""
    if not spec.normalized:
        raise AugmentError("spec_augment expects a normalized spectrogram")
    rng = np.random.default_rng(seed)
    values = spec.values.copy()
    n_mels, n_frames = values.shape

    if cfg.time_warp_max > 0:
        values = _time_warp(values, cfg.time_warp_max, rng)
    for _ in range(cfg.n_freq_masks):
        f = int(rng.integers(0, cfg.freq_mask_max + 1))
        if f > 0:
            f0 = int(rng.integers(0, n_mels - f + 1))
            values[f0 : f0 + f, :] = cfg.mask_value
    for _ in range(cfg.n_time_masks):
        t = int(rng.integers(0, cfg.time_mask_max + 1))
        if t > 0:
            t0 = int(rng.integers(0, n_frames - t + 1))
            values[:, t0 : t0 + t] = cfg.mask_value
    out = Spectrogram(
        values=values.astype(np.float32),
        label=spec.label,
        clip_id=spec.clip_id,
        window_index=spec.window_index,
        normalized=True,
    )
    return out


def _time_warp(values: np.ndarray, warp_max: int, rng: np.random.Generator) -> np.ndarray:
    """Displace one interior column anchor by up to warp_max frames."""
    n_frames = values.shape[1]
    last = n_frames - 1
    lo, hi = max(1, warp_max), min(last - 1, last - warp_max)
    if hi < lo:
        return values
    anchor = int(rng.integers(lo, hi + 1))
    shift = int(rng.integers(-warp_max, warp_max + 1))
    shift = int(np.clip(shift, 1 - anchor, last - 1 - anchor))
    if shift == 0:
        return values
    target = anchor + shift
    # piecewise-linear source position for every output column
    cols = np.arange(n_frames, dtype=np.float64)
    src = np.where(
        cols <= target,
        cols * (anchor / target),
        anchor + (cols - target) * ((last - anchor) / (last - target)),
    )
    left = np.clip(np.floor(src).astype(int), 0, last)
    right = np.clip(left + 1, 0, last)
    frac = src - left
    return values[:, left] * (1.0 - frac) + values[:, right] * frac


def _derived_seed(seed: int, clip_id: str, window_index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, zlib.crc32(clip_id.encode()), window_index])


def augment_corpus(
    corpus: SpectrogramCorpus,
    strategy: str,
    seed: int,
    cfg: ClassicAugmentConfig | None = None,
    clips: dict[str, AudioClip] | None = None,
) -> SpectrogramCorpus:
    """Add one augmented spectrogram per original (doubles every class count).

    Waveform strategies need the source clips; each clip is transformed once
    and re-windowed, and original windows are paired with transformed windows
    by index (cycling when the stretch yields fewer windows). SpecAugment
    draws a per-record seed derived from (seed, clip_id, window_index).
    """
    if strategy not in STRATEGIES:
        raise AugmentError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    cfg = cfg or ClassicAugmentConfig()
    if not corpus.normalized or corpus.norm_stats is None:
        raise AugmentError("augment_corpus expects a normalized corpus with stats attached")

    if strategy == "specaugment":
        augmented = [
            spec_augment(s, cfg.specaug, seed=_derived_seed(seed, s.clip_id, s.window_index))
            for s in corpus
        ]
    else:
        if clips is None:
            raise AugmentError(f"strategy {strategy!r} needs the source clips")
        augmented = _augment_waveform_level(corpus, strategy, seed, cfg, clips)

    extra = SpectrogramCorpus.from_spectrograms(
        augmented,
        corpus.mel_config,
        norm_stats=corpus.norm_stats,
        provenance={"strategy": strategy, "seed": seed},
    )
    out = corpus.extend(extra)
    out.provenance = {"strategy": strategy, "seed": seed}
    return out


def _augment_waveform_level(
    corpus: SpectrogramCorpus,
    strategy: str,
    seed: int,
    cfg: ClassicAugmentConfig,
    clips: dict[str, AudioClip],
) -> list[Spectrogram]:
    mel_cfg = corpus.mel_config
    stats = corpus.norm_stats
    by_clip: dict[str, list[int]] = {}
    for i, cid in enumerate(corpus.clip_ids):
        by_clip.setdefault(cid, []).append(i)

    out: list[Spectrogram] = []
    for cid in sorted(by_clip):
        if cid not in clips:
            raise AugmentError(f"clip {cid!r} referenced by the corpus is not available")
        clip = clips[cid]
        clip_seed = int(_derived_seed(seed, cid, 0).generate_state(1)[0])
        try:
            if strategy == "noise":
                transformed = add_noise(clip, cfg.noise_sigma, seed=clip_seed)
            elif strategy == "pitch":
                transformed = pitch_shift(clip, cfg.pitch_semitones)
            else:
                transformed = time_stretch(clip, cfg.stretch_factor)
        except AugmentError as exc:
            raise AugmentError(f"clip {cid!r}: {exc}") from exc

        samples = transformed.samples
        if len(samples) < mel_cfg.window_len:
            # a strong stretch can leave less than one window; zero-pad so the
            # one-augmented-sample-per-original contract still holds
            samples = np.pad(samples, (0, mel_cfg.window_len - len(samples)))
            transformed = AudioClip(cid, samples, clip.sample_rate, clip.label)
        windows = features.extract_windows(transformed, mel_cfg)
        for i in by_clip[cid]:
            src = corpus.window_indices[i] % len(windows)
            spec = features.log_mel(
                windows[src],
                mel_cfg,
                label=int(corpus.labels[i]),
                clip_id=cid,
                window_index=int(corpus.window_indices[i]),
            )
            if not np.isfinite(spec.values).all():
                raise AugmentError(f"augmentation produced non-finite values for clip {cid!r}")
            out.append(features.apply_norm(spec, stats))
    return out
