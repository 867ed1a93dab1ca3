"""Waveform-to-spectrogram pipeline and the spectrogram corpus container.

Clips are cut into non-overlapping windows of L samples; each window becomes
one 64x64 log-mel spectrogram (n_mels x frames, natural log of the mel power
spectrum). Corpus-wide scalar z-normalization is fit separately so the
training folds can own their own statistics.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from . import dsp
from .dataset import CLASS_NAMES, AudioClip, DatasetManifest


class FeatureError(Exception):
    pass


@dataclass(frozen=True)
class MelConfig:
    window_len: int = 16380  # samples per spectrogram window (L)
    hop: int = 256  # STFT hop (H)
    n_mels: int = 64
    n_fft: int = 1024
    sample_rate: int = 44100
    fmin: float = 0.0
    fmax: float = 22050.0
    log_floor: float = 1e-10
    window: str = "hann"

    def __post_init__(self):
        if min(self.window_len, self.hop, self.n_fft, self.n_mels) <= 0:
            raise FeatureError("window_len, hop, n_fft and n_mels must be positive")
        if not 0 <= self.fmin < self.fmax <= self.sample_rate / 2:
            raise FeatureError(f"need 0 <= fmin < fmax <= Nyquist, got {self.fmin}, {self.fmax}")
        if self.log_floor <= 0:
            raise FeatureError("log_floor must be positive")

    @property
    def n_frames(self) -> int:
        return dsp.num_frames(self.window_len, self.hop)

    def to_json(self) -> dict:
        return {
            "window_len": self.window_len,
            "hop": self.hop,
            "n_mels": self.n_mels,
            "n_fft": self.n_fft,
            "sample_rate": self.sample_rate,
            "fmin": self.fmin,
            "fmax": self.fmax,
            "log_floor": self.log_floor,
            "window": self.window,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "MelConfig":
        return cls(**doc)


@dataclass(frozen=True)
class NormStats:
    mu: float
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise FeatureError(f"sigma must be positive, got {self.sigma}")

    def to_json(self) -> dict:
        return {"mu": self.mu, "sigma": self.sigma}

    @classmethod
    def from_json(cls, doc: dict) -> "NormStats":
        return cls(mu=float(doc["mu"]), sigma=float(doc["sigma"]))


@dataclass
class Spectrogram:
    values: np.ndarray  # (n_mels, n_frames) float32
    label: int
    clip_id: str
    window_index: int
    normalized: bool = False


def extract_windows(clip: AudioClip, cfg: MelConfig) -> list[np.ndarray]:
    """Non-overlapping windows of exactly L samples; the remainder is dropped.

    A clip shorter than L yields an empty list.
    """
    L = cfg.window_len
    n = len(clip.samples) // L
    return [np.asarray(clip.samples[i * L : (i + 1) * L], dtype=np.float64) for i in range(n)]


def log_mel(
    window: np.ndarray,
    cfg: MelConfig,
    label: int = 0,
    clip_id: str = "",
    window_index: int = 0,
) -> Spectrogram:
    """One unnormalized log-mel spectrogram from one raw window."""
    window = np.asarray(window, dtype=np.float64)
    if window.shape != (cfg.window_len,):
        raise FeatureError(f"window length {window.shape} != ({cfg.window_len},)")
    spec = dsp.stft(window, cfg.n_fft, cfg.hop, dsp.make_window(cfg.window, cfg.n_fft))
    power = np.abs(spec) ** 2
    fb = _filterbank(cfg)
    mel = fb @ power
    values = np.log(mel + cfg.log_floor).astype(np.float32)
    if not np.isfinite(values).all():
        raise FeatureError(f"non-finite log-mel output for clip {clip_id!r}")
    if values.shape != (cfg.n_mels, cfg.n_frames):
        raise FeatureError(f"unexpected spectrogram shape {values.shape}")
    return Spectrogram(
        values=values, label=label, clip_id=clip_id, window_index=window_index, normalized=False
    )


_FB_CACHE: dict[tuple, np.ndarray] = {}


def _filterbank(cfg: MelConfig) -> np.ndarray:
    key = (cfg.sample_rate, cfg.n_fft, cfg.n_mels, cfg.fmin, cfg.fmax)
    if key not in _FB_CACHE:
        _FB_CACHE[key] = dsp.mel_filterbank(*key)
    return _FB_CACHE[key]


def apply_norm(spec: Spectrogram, stats: NormStats) -> Spectrogram:
    if spec.normalized:
        raise FeatureError(f"spectrogram {spec.clip_id!r}[{spec.window_index}] is already normalized")
    values = ((spec.values - stats.mu) / stats.sigma).astype(np.float32)
    return replace(spec, values=values, normalized=True)


def invert_norm(spec: Spectrogram, stats: NormStats) -> Spectrogram:
    if not spec.normalized:
        raise FeatureError(f"spectrogram {spec.clip_id!r}[{spec.window_index}] is not normalized")
    values = (spec.values * stats.sigma + stats.mu).astype(np.float32)
    return replace(spec, values=values, normalized=False)


@dataclass
class SpectrogramCorpus:
    """Parallel-array container for a set of equally shaped spectrograms."""

    values: np.ndarray  # (n, n_mels, n_frames) float32
    labels: np.ndarray  # (n,) int64
    clip_ids: list[str]
    window_indices: np.ndarray  # (n,) int64
    normalized: bool
    mel_config: MelConfig
    norm_stats: NormStats | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.values)
        if not (len(self.labels) == len(self.clip_ids) == len(self.window_indices) == n):
            raise FeatureError("corpus arrays have mismatched lengths")

    def __len__(self) -> int:
        return len(self.values)

    def __iter__(self) -> Iterator[Spectrogram]:
        for i in range(len(self)):
            yield Spectrogram(
                values=self.values[i],
                label=int(self.labels[i]),
                clip_id=self.clip_ids[i],
                window_index=int(self.window_indices[i]),
                normalized=self.normalized,
            )

    def per_class_counts(self) -> dict[str, int]:
        counts = {name: 0 for name in CLASS_NAMES}
        for lid in self.labels:
            counts[CLASS_NAMES[int(lid)]] += 1
        return counts

    def class_present(self) -> set[int]:
        return set(int(v) for v in np.unique(self.labels))

    def subset(self, mask: np.ndarray) -> "SpectrogramCorpus":
        idx = np.flatnonzero(mask) if mask.dtype == bool else np.asarray(mask)
        return SpectrogramCorpus(
            values=self.values[idx].copy(),
            labels=self.labels[idx].copy(),
            clip_ids=[self.clip_ids[i] for i in idx],
            window_indices=self.window_indices[idx].copy(),
            normalized=self.normalized,
            mel_config=self.mel_config,
            norm_stats=self.norm_stats,
            provenance=dict(self.provenance),
        )

    def restrict_to_clips(self, clip_ids: set[str]) -> "SpectrogramCorpus":
        mask = np.array([cid in clip_ids for cid in self.clip_ids])
        return self.subset(mask)

    def extend(self, other: "SpectrogramCorpus") -> "SpectrogramCorpus":
        if other.normalized != self.normalized:
            raise FeatureError("cannot merge corpora with different normalization states")
        return SpectrogramCorpus(
            values=np.concatenate([self.values, other.values]),
            labels=np.concatenate([self.labels, other.labels]),
            clip_ids=self.clip_ids + other.clip_ids,
            window_indices=np.concatenate([self.window_indices, other.window_indices]),
            normalized=self.normalized,
            mel_config=self.mel_config,
            norm_stats=self.norm_stats,
            provenance=dict(self.provenance),
        )

    @classmethod
    def from_spectrograms(
        cls,
        specs: list[Spectrogram],
        mel_config: MelConfig,
        norm_stats: NormStats | None = None,
        provenance: dict | None = None,
    ) -> "SpectrogramCorpus":
        if not specs:
            raise FeatureError("empty spectrogram list")
        states = {s.normalized for s in specs}
        if len(states) != 1:
            raise FeatureError("mixed normalization states in spectrogram list")
        return cls(
            values=np.stack([s.values for s in specs]).astype(np.float32),
            labels=np.array([s.label for s in specs], dtype=np.int64),
            clip_ids=[s.clip_id for s in specs],
            window_indices=np.array([s.window_index for s in specs], dtype=np.int64),
            normalized=states.pop(),
            mel_config=mel_config,
            norm_stats=norm_stats,
            provenance=provenance or {},
        )

    # persistence: <base>.f32 holds little-endian float32 records (one
    # spectrogram each, mel-major); <base>.json is the index.
    def save(self, base_path: Path) -> tuple[Path, Path]:
        base = Path(base_path)
        base.parent.mkdir(parents=True, exist_ok=True)
        bin_path = base.with_suffix(".f32")
        idx_path = base.with_suffix(".json")
        flat = np.ascontiguousarray(self.values, dtype="<f4")
        flat.tofile(bin_path)
        record_bytes = int(np.prod(self.values.shape[1:])) * 4
        index = {
            "format": "melspec-corpus-v1",
            "shape": list(self.values.shape[1:]),
            "normalized": self.normalized,
            "mel_config": self.mel_config.to_json(),
            "norm_stats": self.norm_stats.to_json() if self.norm_stats else None,
            "provenance": self.provenance,
            "records": [
                {
                    "clip_id": self.clip_ids[i],
                    "window_index": int(self.window_indices[i]),
                    "label": CLASS_NAMES[int(self.labels[i])],
                    "offset": i * record_bytes,
                }
                for i in range(len(self))
            ],
        }
        idx_path.write_text(json.dumps(index))
        return bin_path, idx_path

    @classmethod
    def load(cls, base_path: Path) -> "SpectrogramCorpus":
        base = Path(base_path)
        idx_path = base.with_suffix(".json")
        bin_path = base.with_suffix(".f32")
        if not idx_path.exists():
            raise FeatureError(f"missing corpus index {idx_path}")
        if not bin_path.exists():
            raise FeatureError(f"missing corpus data {bin_path}")
        index = json.loads(idx_path.read_text())
        shape = tuple(index["shape"])
        records = index["records"]
        raw = np.fromfile(bin_path, dtype="<f4")
        expected = len(records) * int(np.prod(shape))
        if raw.size != expected:
            raise FeatureError(
                f"corpus data size mismatch: {raw.size} floats, index implies {expected}"
            )
        values = raw.reshape(len(records), *shape)
        return cls(
            values=values,
            labels=np.array([CLASS_NAMES.index(r["label"]) for r in records], dtype=np.int64),
            clip_ids=[r["clip_id"] for r in records],
            window_indices=np.array([r["window_index"] for r in records], dtype=np.int64),
            normalized=index["normalized"],
            mel_config=MelConfig.from_json(index["mel_config"]),
            norm_stats=NormStats.from_json(index["norm_stats"]) if index["norm_stats"] else None,
            provenance=index.get("provenance", {}),
        )


def build_corpus(
    manifest: DatasetManifest,
    cfg: MelConfig,
    clips: dict[str, AudioClip] | None = None,
) -> SpectrogramCorpus:
    """Extract the full unnormalized spectrogram corpus from a manifest.

    Records are ordered by (clip_id, window_index) so the result does not
    depend on manifest order. Clips shorter than one window contribute
    nothing.
    """
    specs: list[Spectrogram] = []
    for ref in sorted(manifest.clips, key=lambda r: r.clip_id):
        clip = clips[ref.clip_id] if clips else manifest.load_clip(ref.clip_id)
        for w, window in enumerate(extract_windows(clip, cfg)):
            specs.append(log_mel(window, cfg, label=clip.label, clip_id=clip.clip_id, window_index=w))
    if not specs:
        raise FeatureError("no clip in the manifest is long enough for one window")
    return SpectrogramCorpus.from_spectrograms(specs, cfg)


def fit_norm(corpus: SpectrogramCorpus) -> NormStats:
    """Scalar mean/std over every entry of every spectrogram in the corpus."""
    if len(corpus) == 0:
        raise FeatureError("cannot fit normalization on an empty corpus")
    if corpus.normalized:
        raise FeatureError("corpus is already normalized")
    mu = float(np.mean(corpus.values))
    sigma = float(np.std(corpus.values))
    if sigma <= 0 or not np.isfinite(sigma):
        raise FeatureError(f"degenerate corpus: sigma = {sigma}")
    return NormStats(mu=mu, sigma=sigma)


def normalize_corpus(corpus: SpectrogramCorpus, stats: NormStats) -> SpectrogramCorpus:
    if corpus.normalized:
        raise FeatureError("corpus is already normalized")
    return SpectrogramCorpus(
        values=((corpus.values - stats.mu) / stats.sigma).astype(np.float32),
        labels=corpus.labels.copy(),
        clip_ids=list(corpus.clip_ids),
        window_indices=corpus.window_indices.copy(),
        normalized=True,
        mel_config=corpus.mel_config,
        norm_stats=stats,
        provenance=dict(corpus.provenance),
    )


def denormalize_corpus(corpus: SpectrogramCorpus, stats: NormStats | None = None) -> SpectrogramCorpus:
    if not corpus.normalized:
        raise FeatureError("corpus is not normalized")
    stats = stats or corpus.norm_stats
    if stats is None:
        raise FeatureError("no normalization stats available to invert")
    return SpectrogramCorpus(
        values=(corpus.values * stats.sigma + stats.mu).astype(np.float32),
        labels=corpus.labels.copy(),
        clip_ids=list(corpus.clip_ids),
        window_indices=corpus.window_indices.copy(),
        normalized=False,
        mel_config=corpus.mel_config,
        norm_stats=stats,
        provenance=dict(corpus.provenance),
    )
