import numpy as np
import pytest
import torch

from melgen import dataset, features

ACCEPTANCE_LINES: list[str] = []


def record_acceptance(criterion: str, passed: bool, detail: str) -> None:
    line = f"ACCEPTANCE {criterion}: {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_toy_manifest(tmp_path_factory) -> dataset.DatasetManifest:
    """6 clips per class; enough for fold planning and corpus tests."""
    out = tmp_path_factory.mktemp("toy_small")
    return dataset.make_toy_corpus(out, n_per_class=6, seed=42)


@pytest.fixture(scope="session")
def small_toy_corpus(small_toy_manifest) -> features.SpectrogramCorpus:
    return features.build_corpus(small_toy_manifest, features.MelConfig())


def make_synthetic_corpus(
    n_per_class: int = 8,
    seed: int = 0,
    normalized: bool = True,
    separation: float = 2.0,
) -> features.SpectrogramCorpus:
    """Directly constructed spectrogram corpus with one bright band per class."""
    rng = np.random.default_rng(seed)
    values, labels, ids = [], [], []
    for c in range(6):
        for i in range(n_per_class):
            v = rng.normal(0.0, 0.1, (64, 64)).astype(np.float32)
            v[c * 10 : c * 10 + 8, :] += separation
            values.append(v)
            labels.append(c)
            ids.append(f"clip{c}_{i}")
    return features.SpectrogramCorpus(
        values=np.stack(values),
        labels=np.array(labels, dtype=np.int64),
        clip_ids=ids,
        window_indices=np.zeros(6 * n_per_class, dtype=np.int64),
        normalized=normalized,
        mel_config=features.MelConfig(),
        norm_stats=features.NormStats(0.0, 1.0) if normalized else None,
    )


def make_sine_clip(freq: float, duration: float = 1.0, sr: int = 44100, label: int = 0) -> dataset.AudioClip:
    t = np.arange(int(duration * sr)) / sr
    return dataset.AudioClip(
        clip_id=f"sine{freq:g}",
        samples=np.sin(2 * np.pi * freq * t).astype(np.float32),
        sample_rate=sr,
        label=label,
    )


def fft_peak_hz(samples: np.ndarray, sr: int) -> tuple[float, float]:
    """Dominant frequency of a signal and the full-signal FFT bin width."""
    spec = np.abs(np.fft.rfft(np.asarray(samples, dtype=np.float64)))
    freqs = np.fft.rfftfreq(len(samples), 1.0 / sr)
    return float(freqs[np.argmax(spec)]), float(freqs[1])


@pytest.fixture(autouse=True)
def _fixed_torch_state():
    torch.manual_seed(0)
    yield
