"""Waveform reconstruction from log-mel spectrograms for listening checks.

Mel inversion (pseudo-inverse or per-frame NNLS) recovers a linear-frequency
magnitude, Griffin-Lim recovers phase. Artifacts are expected; the output is
peak-normalized before writing.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.optimize import nnls

from . import dsp, features, gan
from .dataset import AudioClip, label_name, write_wav
from .features import MelConfig, Spectrogram


class VocoderError(Exception):
    pass


@dataclass(frozen=True)
class GriffinLimConfig:
    n_iters: int = 60
    momentum: float = 0.99  # 0 disables acceleration (classic, monotone variant)
    inversion: str = "pinv"  # or "nnls"
    mel: MelConfig = MelConfig()

    def __post_init__(self):
        if self.n_iters < 1:
            raise VocoderError("n_iters must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise VocoderError("momentum must be in [0, 1)")
        if self.inversion not in ("pinv", "nnls"):
            raise VocoderError(f"inversion must be 'pinv' or 'nnls', got {self.inversion!r}")


class MelInversion(NamedTuple):
    magnitude: np.ndarray  # (n_fft//2 + 1, n_frames), non-negative
    clamp_fraction: float  # fraction of entries clamped to zero (pinv mode)


def mel_power_from_spectrogram(spec: Spectrogram, cfg: MelConfig) -> np.ndarray:
    """Undo the log compression of an unnormalized spectrogram."""
    if spec.normalized:
        raise VocoderError("denormalize the spectrogram before inverting the log")
    return np.maximum(np.exp(spec.values.astype(np.float64)) - cfg.log_floor, 0.0)


def mel_to_linear(mel_power: np.ndarray, cfg: GriffinLimConfig) -> MelInversion:
    """Invert the mel projection of a power spectrogram to a linear magnitude."""
    mel_power = np.asarray(mel_power, dtype=np.float64)
    mel_cfg = cfg.mel
    if mel_power.shape[0] != mel_cfg.n_mels:
        raise VocoderError(f"expected {mel_cfg.n_mels} mel rows, got {mel_power.shape[0]}")
    fb = dsp.mel_filterbank(
        mel_cfg.sample_rate, mel_cfg.n_fft, mel_cfg.n_mels, mel_cfg.fmin, mel_cfg.fmax
    )
    if cfg.inversion == "pinv":
        power = np.linalg.pinv(fb) @ mel_power
        clamped = power < 0
        power[clamped] = 0.0
        clamp_fraction = float(clamped.mean())
    else:
        power = np.zeros((fb.shape[1], mel_power.shape[1]))
        for t in range(mel_power.shape[1]):
            power[:, t], _ = nnls(fb, mel_power[:, t])
        clamp_fraction = 0.0
    return MelInversion(magnitude=np.sqrt(power), clamp_fraction=clamp_fraction)


def griffin_lim(
    magnitude: np.ndarray,
    cfg: GriffinLimConfig,
    length: int | None = None,
    sample_rate: int | None = None,
) -> AudioClip:
    """Iterative phase recovery from an STFT magnitude.

    With momentum 0 this is the classic alternating projection whose spectral
    convergence error is non-increasing; the default momentum accelerates it.
    """
    magnitude = np.asarray(magnitude, dtype=np.float64)
    if (magnitude < 0).any():
        raise VocoderError("magnitude must be non-negative")
    mel_cfg = cfg.mel
    if length is None:
        length = mel_cfg.window_len
    sr = sample_rate or mel_cfg.sample_rate
    window = dsp.make_window(mel_cfg.window, mel_cfg.n_fft)
    hop = mel_cfg.hop

    angles = np.ones_like(magnitude, dtype=np.complex128)
    rebuilt = np.zeros_like(angles)
    x = dsp.istft(magnitude * angles, hop, window, length=length)
    for _ in range(cfg.n_iters):
        tprev = rebuilt
        rebuilt = dsp.stft(x, mel_cfg.n_fft, hop, window)
        if rebuilt.shape != magnitude.shape:
            rebuilt = rebuilt[:, : magnitude.shape[1]]
        angles = rebuilt - (cfg.momentum / (1.0 + cfg.momentum)) * tprev
        mags = np.abs(angles)
        angles = np.where(mags > 1e-16, angles / np.maximum(mags, 1e-16), 1.0 + 0j)
        x = dsp.istft(magnitude * angles, hop, window, length=length)
    if not np.isfinite(x).all():
        raise VocoderError("Griffin-Lim produced non-finite samples")
    return AudioClip(clip_id="griffin_lim", samples=x.astype(np.float32), sample_rate=sr, label=0)


def spectral_convergence(x: np.ndarray, magnitude: np.ndarray, cfg: GriffinLimConfig) -> float:
    """||  |STFT(x)| - magnitude ||_F / ||magnitude||_F."""
    window = dsp.make_window(cfg.mel.window, cfg.mel.n_fft)
    rebuilt = np.abs(dsp.stft(np.asarray(x, dtype=np.float64), cfg.mel.n_fft, cfg.mel.hop, window))
    rebuilt = rebuilt[:, : magnitude.shape[1]]
    denom = np.linalg.norm(magnitude)
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(rebuilt - magnitude) / denom)


def spectrogram_to_waveform(
    spec: Spectrogram,
    stats: features.NormStats,
    cfg: GriffinLimConfig,
) -> AudioClip:
    """Full inversion of one normalized spectrogram back to audio."""
    denorm = features.invert_norm(spec, stats) if spec.normalized else spec
    mel_power = mel_power_from_spectrogram(denorm, cfg.mel)
    inversion = mel_to_linear(mel_power, cfg)
    clip = griffin_lim(inversion.magnitude, cfg)
    peak = float(np.max(np.abs(clip.samples)))
    if peak > 0:
        clip.samples = (clip.samples / peak).astype(np.float32)
    return AudioClip(spec.clip_id, clip.samples, clip.sample_rate, spec.label)


def render_samples(
    checkpoint: gan.GanCheckpoint,
    class_id: int,
    n: int,
    out_dir: Path,
    cfg: GriffinLimConfig | None = None,
    seed: int = 0,
) -> list[Path]:
    """Generate n spectrograms for one class and write them as WAV files."""
    if checkpoint.norm_stats is None or checkpoint.mel_config is None:
        raise VocoderError("checkpoint lacks normalization context; cannot render audio")
    cfg = cfg or GriffinLimConfig(mel=checkpoint.mel_config)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise VocoderError(f"cannot create output directory {out}: {exc}") from exc
    specs = gan.sample(checkpoint, class_id, n, seed=seed)
    paths = []
    for i, spec in enumerate(specs):
        clip = spectrogram_to_waveform(spec, checkpoint.norm_stats, cfg)
        path = out / f"{label_name(class_id)}_{i}.wav"
        write_wav(path, clip.samples, clip.sample_rate)
        paths.append(path)
    return paths
