"""Corpus ingestion, 5-fold planning and the synthetic toy corpus.

A dataset is a directory of mono 44.1 kHz WAV clips plus a sidecar CSV
(`path,label` per row) mapping each file to one of the six class names.
Folds are planned at the clip (raw waveform) level, stratified by class.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

CLASS_NAMES = ("Adjustment", "Coagulation", "Insertion", "Reaming", "Sawing", "Suction")
N_CLASSES = len(CLASS_NAMES)
DEFAULT_SAMPLE_RATE = 44100


class DatasetError(Exception):
    """Raised for corpus validation failures (bad files, bad labels, bad splits)."""


def label_id(name: str) -> int:
    try:
        return CLASS_NAMES.index(name)
    except ValueError:
        raise DatasetError(f"unknown class name {name!r}; expected one of {CLASS_NAMES}") from None


def label_name(lid: int) -> str:
    if not 0 <= lid < N_CLASSES:
        raise DatasetError(f"class id {lid} out of range 0..{N_CLASSES - 1}")
    return CLASS_NAMES[lid]


@dataclass
class AudioClip:
    clip_id: str
    samples: np.ndarray  # float32, mono, range [-1, 1]
    sample_rate: int
    label: int

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class ClipRef:
    clip_id: str
    path: Path
    label: int
    duration: float
    n_samples: int


@dataclass
class DatasetManifest:
    root: Path
    clips: list[ClipRef] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.clips)

    def per_class_counts(self) -> dict[str, int]:
        counts = {name: 0 for name in CLASS_NAMES}
        for ref in self.clips:
            counts[label_name(ref.label)] += 1
        return counts

    def clip_ids(self) -> list[str]:
        return [ref.clip_id for ref in self.clips]

    def load_clip(self, clip_id: str) -> AudioClip:
        ref = next((c for c in self.clips if c.clip_id == clip_id), None)
        if ref is None:
            raise DatasetError(f"clip {clip_id!r} not in manifest")
        samples, sr = read_wav(ref.path)
        return AudioClip(clip_id=clip_id, samples=samples, sample_rate=sr, label=ref.label)

    def load_all(self) -> dict[str, AudioClip]:
        return {ref.clip_id: self.load_clip(ref.clip_id) for ref in self.clips}

    def to_json(self) -> dict:
        return {
            "root": str(self.root),
            "clips": [
                {
                    "id": ref.clip_id,
                    "path": str(ref.path.relative_to(self.root)),
                    "label": label_name(ref.label),
                    "duration": ref.duration,
                }
                for ref in self.clips
            ],
            "counts": self.per_class_counts(),
        }

    def save(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def from_json(cls, doc: dict, sample_rate: int = DEFAULT_SAMPLE_RATE) -> "DatasetManifest":
        root = Path(doc["root"])
        clips = [
            ClipRef(
                clip_id=c["id"],
                path=root / c["path"],
                label=label_id(c["label"]),
                duration=c["duration"],
                n_samples=int(round(c["duration"] * sample_rate)),
            )
            for c in doc["clips"]
        ]
        return cls(root=root, clips=clips)


def read_wav(path: Path, allow_downmix: bool = False) -> tuple[np.ndarray, int]:
    """Read a PCM-16 or float-32 WAV as float32 in [-1, 1].

    Stereo input is rejected unless allow_downmix is set, in which case the
    channel mean is taken.
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"missing file: {path}")
    try:
        sr, data = wavfile.read(str(path))
    except Exception as exc:
        raise DatasetError(f"undecodable WAV {path}: {exc}") from exc
    if data.ndim == 2:
        if not allow_downmix:
            raise DatasetError(
                f"non-mono audio in {path} ({data.shape[1]} channels); "
                "pass allow_downmix=True to average channels"
            )
        data = data.mean(axis=1)
    if data.dtype == np.int16:
        samples = data.astype(np.float32) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float32)
    elif data.dtype == np.float64:
        samples = data.astype(np.float32)
    else:
        raise DatasetError(f"unsupported WAV sample format {data.dtype} in {path} (want PCM16 or float32)")
    if not np.isfinite(samples).all():
        raise DatasetError(f"non-finite samples in {path}")
    return samples, int(sr)


def write_wav(path: Path, samples: np.ndarray, sample_rate: int) -> None:
    """Write mono float samples as 16-bit PCM."""
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    wavfile.write(str(path), sample_rate, (x * 32767.0).astype(np.int16))


def load_manifest(
    root_path: Path,
    labels_file: Path,
    expected_rate: int = DEFAULT_SAMPLE_RATE,
    allow_downmix: bool = False,
) -> DatasetManifest:
    """Build and validate a manifest from a clip directory and a labels CSV.

    The CSV needs a `path,label` header; paths are relative to root_path.
    Every referenced file is decoded once so bad files fail here, not later.
    """
    root = Path(root_path)
    labels_file = Path(labels_file)
    if not labels_file.exists():
        raise DatasetError(f"labels file not found: {labels_file}")
    rows: list[tuple[str, str]] = []
    with open(labels_file, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"path", "label"} <= set(reader.fieldnames):
            raise DatasetError(f"labels file {labels_file} needs a 'path,label' header")
        for row in reader:
            rows.append((row["path"], row["label"]))
    if not rows:
        raise DatasetError(f"no clips found in {labels_file}")

    clips = []
    for rel_path, class_name in rows:
        lid = label_id(class_name)
        path = root / rel_path
        samples, sr = read_wav(path, allow_downmix=allow_downmix)
        if sr != expected_rate:
            raise DatasetError(f"{path}: sample rate {sr} != expected {expected_rate}")
        clip_id = Path(rel_path).as_posix()
        if len(samples) == 0:
            raise DatasetError(f"{path}: empty waveform")
        clips.append(
            ClipRef(
                clip_id=clip_id,
                path=path,
                label=lid,
                duration=len(samples) / sr,
                n_samples=len(samples),
            )
        )
    ids = [c.clip_id for c in clips]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise DatasetError(f"duplicate clip ids: {dupes[:5]}")
    clips.sort(key=lambda c: c.clip_id)
    return DatasetManifest(root=root, clips=clips)


@dataclass
class FoldPlan:
    seed: int
    k: int
    assignment: dict[str, int]  # clip_id -> fold index

    def fold_clip_ids(self, fold: int, held_out: bool) -> list[str]:
        """Test clips of `fold` when held_out, else its training clips."""
        return sorted(
            cid for cid, f in self.assignment.items() if (f == fold) == held_out
        )

    def to_json(self) -> dict:
        return {"seed": self.seed, "k": self.k, "assignment": self.assignment}

    def save(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def from_json(cls, doc: dict) -> "FoldPlan":
        return cls(seed=doc["seed"], k=doc["k"], assignment=dict(doc["assignment"]))


def plan_folds(manifest: DatasetManifest, k: int = 5, seed: int = 0) -> FoldPlan:
    """Stratified k-fold split at the clip level.

    Per class the clips are shuffled and dealt into k chunks whose sizes
    differ by at most one; chunk-to-fold assignment is rotated per class so
    the odd clips do not all land in fold 0.
    """
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[str]] = {}
    for ref in manifest.clips:
        by_class.setdefault(ref.label, []).append(ref.clip_id)

    assignment: dict[str, int] = {}
    for lid in sorted(by_class):
        ids = sorted(by_class[lid])
        if len(ids) < k:
            raise DatasetError(
                f"class {label_name(lid)} has {len(ids)} clips, fewer than k={k}"
            )
        order = rng.permutation(len(ids))
        offset = int(rng.integers(k))
        chunks = np.array_split(order, k)
        for j, chunk in enumerate(chunks):
            fold = (j + offset) % k
            for idx in chunk:
                assignment[ids[idx]] = fold
    return FoldPlan(seed=seed, k=k, assignment=assignment)


# --- synthetic toy corpus ----------------------------------------------------
#
# Six acoustically distinct signatures, one per class name. Insertion is an
# impulse train and Suction band-limited noise so that impulsiveness
# (frame-energy kurtosis) separates them the way hammering and suction do.

TOY_IMPULSE_PERIOD = 5120  # samples; 20 STFT hops at hop=256


def _toy_signal(lid: int, n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / sr
    name = CLASS_NAMES[lid]
    if name == "Adjustment":  # amplitude-modulated tone
        f0 = rng.uniform(600.0, 900.0)
        fm = rng.uniform(4.0, 8.0)
        x = np.sin(2 * np.pi * f0 * t) * (0.55 + 0.45 * np.sin(2 * np.pi * fm * t))
    elif name == "Coagulation":  # upward linear chirp
        f0 = rng.uniform(200.0, 400.0)
        f1 = rng.uniform(3000.0, 6000.0)
        x = np.sin(2 * np.pi * (f0 * t + (f1 - f0) / (2 * t[-1]) * t**2))
    elif name == "Insertion":  # decaying impulse train (hammer-like)
        x = np.zeros(n)
        start = int(rng.integers(0, TOY_IMPULSE_PERIOD // 4))
        decay = rng.uniform(100.0, 300.0)
        for onset in range(start, n, TOY_IMPULSE_PERIOD):
            seg = min(2048, n - onset)
            burst = np.exp(-np.arange(seg) / decay)
            burst *= rng.uniform(0.7, 1.0) * np.sign(rng.standard_normal(seg))
            x[onset : onset + seg] += burst
    elif name == "Reaming":  # low square wave, rich odd harmonics
        f0 = rng.uniform(150.0, 300.0)
        x = np.sign(np.sin(2 * np.pi * f0 * t))
    elif name == "Sawing":  # pure tone
        f0 = rng.uniform(1000.0, 2000.0)
        x = np.sin(2 * np.pi * f0 * t + rng.uniform(0, 2 * np.pi))
    elif name == "Suction":  # band-limited noise, 2-6 kHz
        spec = np.fft.rfft(rng.standard_normal(n))
        freqs = np.fft.rfftfreq(n, 1.0 / sr)
        spec[(freqs < 2000.0) | (freqs > 6000.0)] = 0.0
        x = np.fft.irfft(spec, n=n)
        x /= np.max(np.abs(x)) + 1e-12
    else:  # pragma: no cover
        raise DatasetError(f"no toy signature for class {name}")
    x = 0.5 * x + 0.002 * rng.standard_normal(n)
    peak = np.max(np.abs(x))
    if peak > 1.0:
        x /= peak
    return x


def make_toy_corpus(
    out_dir: Path,
    n_per_class: int,
    seed: int = 0,
    sample_rate: int = DEFAULT_SAMPLE_RATE,
    duration_range: tuple[float, float] = (1.0, 1.3),
) -> DatasetManifest:
    """Generate a labeled 6-class synthetic corpus for desk-scale runs.

    Deterministic for a fixed seed: the same call produces byte-identical
    WAV files. Returns the validated manifest of the written corpus.
    """
    if n_per_class < 5:
        raise DatasetError(f"n_per_class must be >= 5, got {n_per_class}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        wav_dir = out / "wavs"
        wav_dir.mkdir(exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create toy corpus directory {out}: {exc}") from exc

    rows = []
    for lid in range(N_CLASSES):
        for i in range(n_per_class):
            rng = np.random.default_rng(np.random.SeedSequence([seed, lid, i]))
            dur = rng.uniform(*duration_range)
            n = int(round(dur * sample_rate))
            x = _toy_signal(lid, n, sample_rate, rng)
            rel = f"wavs/{CLASS_NAMES[lid]}_{i:03d}.wav"
            write_wav(out / rel, x, sample_rate)
            rows.append((rel, CLASS_NAMES[lid]))

    labels_path = out / "labels.csv"
    with open(labels_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "label"])
        writer.writerows(rows)
    return load_manifest(out, labels_path, expected_rate=sample_rate)
