"""Shared signal transforms: STFT/ISTFT, mel filterbank, phase vocoder.

All transforms here are pure functions on numpy arrays. The same STFT
conventions (centered frames, reflect padding, periodic Hann) are used by
feature extraction, the waveform augmentations and the Griffin-Lim vocoder,
so spectrograms and reconstructions stay mutually consistent.
"""

from __future__ import annotations

import numpy as np

_WINDOWS = ("hann",)


def make_window(name: str, n_fft: int) -> np.ndarray:
    """Periodic analysis window of length n_fft."""
    if name != "hann":
        raise ValueError(f"unsupported window {name!r}; choose one of {_WINDOWS}")
    k = np.arange(n_fft)
    return (0.5 - 0.5 * np.cos(2.0 * np.pi * k / n_fft)).astype(np.float64)


def num_frames(n_samples: int, hop: int) -> int:
    """Frame count of a centered STFT: 1 + floor(n/hop)."""
    return 1 + n_samples // hop


def stft(
    x: np.ndarray,
    n_fft: int,
    hop: int,
    window: np.ndarray | None = None,
    center: bool = True,
) -> np.ndarray:
    """Complex STFT, shape (n_fft//2 + 1, n_frames).

    With center=True the signal is reflect-padded by n_fft//2 on both sides,
    giving 1 + floor(len(x)/hop) frames.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("stft expects a mono 1-D signal")
    if window is None:
        window = make_window("hann", n_fft)
    if center:
        pad = n_fft // 2
        if len(x) < pad + 1:
            raise ValueError(f"signal too short for centered stft: {len(x)} < {pad + 1}")
        x = np.pad(x, pad, mode="reflect")
    if len(x) < n_fft:
        raise ValueError(f"signal too short for one frame: {len(x)} < {n_fft}")
    n = 1 + (len(x) - n_fft) // hop
    frames = np.lib.stride_tricks.sliding_window_view(x, n_fft)[:: hop][:n]
    return np.fft.rfft(frames * window, axis=1).T


def istft(
    spec: np.ndarray,
    hop: int,
    window: np.ndarray | None = None,
    center: bool = True,
    length: int | None = None,
) -> np.ndarray:
    """Inverse STFT by windowed overlap-add with squared-window normalization."""
    spec = np.asarray(spec)
    n_fft = 2 * (spec.shape[0] - 1)
    if window is None:
        window = make_window("hann", n_fft)
    frames = np.fft.irfft(spec.T, n=n_fft, axis=1)
    n_frames = frames.shape[0]
    total = (n_frames - 1) * hop + n_fft
    y = np.zeros(total)
    wsq = np.zeros(total)
    for t in range(n_frames):
        start = t * hop
        y[start : start + n_fft] += frames[t] * window
        wsq[start : start + n_fft] += window**2
    nonzero = wsq > 1e-12
    y[nonzero] /= wsq[nonzero]
    if center:
        y = y[n_fft // 2 :]
    if length is not None:
        if len(y) < length:
            y = np.pad(y, (0, length - len(y)))
        else:
            y = y[:length]
    return y


def hz_to_mel(f: np.ndarray | float) -> np.ndarray | float:
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m: np.ndarray | float) -> np.ndarray | float:
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    """Center frequencies (Hz) of the triangular mel filters."""
    mels = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    return np.asarray(mel_to_hz(mels[1:-1]))


def mel_filterbank(
    sample_rate: int,
    n_fft: int,
    n_mels: int,
    fmin: float,
    fmax: float,
) -> np.ndarray:
    """Triangular mel filterbank, shape (n_mels, n_fft//2 + 1).

    Filters are placed uniformly on the mel scale between fmin and fmax and
    area-normalized (each row scaled by 2 / bandwidth), so rows are
    non-negative and each covers one contiguous frequency band.
    """
    if not 0 <= fmin < fmax <= sample_rate / 2:
        raise ValueError(f"need 0 <= fmin < fmax <= Nyquist, got {fmin}, {fmax}")
    n_bins = n_fft // 2 + 1
    fft_freqs = np.linspace(0.0, sample_rate / 2.0, n_bins)
    mels = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    hz = np.asarray(mel_to_hz(mels))

    fb = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        lo, center, hi = hz[m], hz[m + 1], hz[m + 2]
        up = (fft_freqs - lo) / max(center - lo, 1e-12)
        down = (hi - fft_freqs) / max(hi - center, 1e-12)
        fb[m] = np.maximum(0.0, np.minimum(up, down)) * (2.0 / (hi - lo))
    return fb


def phase_vocoder(spec: np.ndarray, rate: float, hop: int) -> np.ndarray:
    """Stretch an STFT in time by `rate` (>1 shortens) with phase accumulation."""
    n_bins, n_frames = spec.shape
    n_fft = 2 * (n_bins - 1)
    omega = 2.0 * np.pi * hop * np.arange(n_bins) / n_fft

    steps = np.arange(0.0, n_frames, rate)
    padded = np.concatenate([spec, np.zeros((n_bins, 2), dtype=spec.dtype)], axis=1)
    out = np.zeros((n_bins, len(steps)), dtype=np.complex128)
    phase = np.angle(spec[:, 0])
    for i, step in enumerate(steps):
        t = int(step)
        frac = step - t
        a, b = padded[:, t], padded[:, t + 1]
        mag = (1.0 - frac) * np.abs(a) + frac * np.abs(b)
        out[:, i] = mag * np.exp(1j * phase)
        dphi = np.angle(b) - np.angle(a) - omega
        dphi -= 2.0 * np.pi * np.round(dphi / (2.0 * np.pi))
        phase = phase + omega + dphi
    return out
