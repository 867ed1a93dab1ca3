import csv
import hashlib
from pathlib import Path

import numpy as np
import pytest
from scipy.io import wavfile

from melgen import dataset
from melgen.dataset import (
    CLASS_NAMES,
    ClipRef,
    DatasetError,
    DatasetManifest,
    load_manifest,
    make_toy_corpus,
    plan_folds,
)


def _write_corpus(root: Path, entries: list[tuple[str, str, np.ndarray]], sr: int = 44100) -> Path:
    """entries: (relative path, class name, samples)"""
    labels = root / "labels.csv"
    with open(labels, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "label"])
        for rel, name, samples in entries:
            path = root / rel
            path.parent.mkdir(parents=True, exist_ok=True)
            dataset.write_wav(path, samples, sr)
            writer.writerow([rel, name])
    return labels


def test_singleton_manifest(tmp_path):
    samples = np.sin(2 * np.pi * 440 * np.arange(2 * 44100) / 44100) * 0.5
    labels = _write_corpus(tmp_path, [("a.wav", "Sawing", samples)])
    man = load_manifest(tmp_path, labels)
    assert len(man) == 1
    assert man.per_class_counts() == {
        "Adjustment": 0, "Coagulation": 0, "Insertion": 0, "Reaming": 0, "Sawing": 1, "Suction": 0,
    }
    clip = man.load_clip("a.wav")
    assert clip.sample_rate == 44100
    assert abs(clip.duration - 2.0) < 1e-6


def test_empty_labels_file_errors(tmp_path):
    labels = tmp_path / "labels.csv"
    labels.write_text("path,label\n")
    with pytest.raises(DatasetError, match="no clips found"):
        load_manifest(tmp_path, labels)


def test_unknown_class_name_errors(tmp_path):
    labels = _write_corpus(tmp_path, [("a.wav", "Sawing", np.zeros(44100) + 0.01)])
    labels.write_text("path,label\na.wav,Drilling\n")
    with pytest.raises(DatasetError, match="Drilling"):
        load_manifest(tmp_path, labels)


def test_missing_file_errors(tmp_path):
    labels = tmp_path / "labels.csv"
    labels.write_text("path,label\nghost.wav,Sawing\n")
    with pytest.raises(DatasetError, match="missing file"):
        load_manifest(tmp_path, labels)


def test_stereo_rejected_without_downmix_flag(tmp_path):
    stereo = (np.random.default_rng(0).normal(0, 0.1, (44100, 2)) * 32767).astype(np.int16)
    wavfile.write(str(tmp_path / "s.wav"), 44100, stereo)
    labels = tmp_path / "labels.csv"
    labels.write_text("path,label\ns.wav,Suction\n")
    with pytest.raises(DatasetError, match="non-mono"):
        load_manifest(tmp_path, labels)
    man = load_manifest(tmp_path, labels, allow_downmix=True)
    assert len(man) == 1


def test_wrong_sample_rate_errors(tmp_path):
    labels = _write_corpus(tmp_path, [("a.wav", "Sawing", np.zeros(16000) + 0.01)], sr=16000)
    with pytest.raises(DatasetError, match="sample rate"):
        load_manifest(tmp_path, labels)
    assert len(load_manifest(tmp_path, labels, expected_rate=16000)) == 1


def test_manifest_order_independent(tmp_path):
    entries = [
        ("b.wav", "Sawing", np.zeros(44100) + 0.01),
        ("a.wav", "Suction", np.zeros(44100) + 0.01),
        ("c.wav", "Sawing", np.zeros(44100) + 0.01),
    ]
    labels = _write_corpus(tmp_path, entries)
    man1 = load_manifest(tmp_path, labels)
    # rewrite rows in reverse order; resulting manifest must be identical
    labels.write_text("path,label\nc.wav,Sawing\na.wav,Suction\nb.wav,Sawing\n")
    man2 = load_manifest(tmp_path, labels)
    assert man1.clip_ids() == man2.clip_ids() == ["a.wav", "b.wav", "c.wav"]


def test_manifest_json_round_trip(tmp_path):
    labels = _write_corpus(tmp_path, [("a.wav", "Reaming", np.zeros(44100) + 0.01)])
    man = load_manifest(tmp_path, labels)
    path = tmp_path / "manifest.json"
    man.save(path)
    import json

    loaded = DatasetManifest.from_json(json.loads(path.read_text()))
    assert loaded.clip_ids() == man.clip_ids()
    assert loaded.per_class_counts() == man.per_class_counts()


def _synthetic_manifest(counts: dict[str, int]) -> DatasetManifest:
    clips = []
    for name, n in counts.items():
        lid = CLASS_NAMES.index(name)
        for i in range(n):
            clips.append(ClipRef(f"{name}_{i}", Path(f"/nowhere/{name}_{i}.wav"), lid, 2.0, 88200))
    return DatasetManifest(root=Path("/nowhere"), clips=clips)


def test_plan_folds_divisible_case():
    man = _synthetic_manifest({name: 10 for name in CLASS_NAMES})
    plan = plan_folds(man, k=5, seed=3)
    for name in CLASS_NAMES:
        per_fold = [0] * 5
        for ref in man.clips:
            if ref.clip_id.startswith(name):
                per_fold[plan.assignment[ref.clip_id]] += 1
        assert per_fold == [2, 2, 2, 2, 2]


def test_plan_folds_deterministic():
    man = _synthetic_manifest({name: 7 for name in CLASS_NAMES})
    assert plan_folds(man, k=5, seed=9).assignment == plan_folds(man, k=5, seed=9).assignment


def test_plan_folds_rare_class_sizes():
    # 21 clips in 5 folds must split as {4,4,4,4,5}, enumerated over seeds
    man = _synthetic_manifest({"Sawing": 21})
    for seed in range(10):
        plan = plan_folds(man, k=5, seed=seed)
        sizes = sorted(
            sum(1 for f in plan.assignment.values() if f == fold) for fold in range(5)
        )
        assert sizes == [4, 4, 4, 4, 5]


def test_plan_folds_is_partition_and_stratified():
    rng = np.random.default_rng(0)
    counts = {name: int(rng.integers(5, 40)) for name in CLASS_NAMES}
    man = _synthetic_manifest(counts)
    plan = plan_folds(man, k=5, seed=1)
    assert set(plan.assignment) == set(man.clip_ids())
    for name in CLASS_NAMES:
        per_fold = [0] * 5
        for cid, fold in plan.assignment.items():
            if cid.startswith(name):
                per_fold[fold] += 1
        assert max(per_fold) - min(per_fold) <= 1


def test_plan_folds_rejects_class_below_k():
    man = _synthetic_manifest({"Sawing": 4, "Suction": 10})
    with pytest.raises(DatasetError, match="Sawing"):
        plan_folds(man, k=5, seed=0)


def test_fold_plan_json_round_trip(tmp_path):
    man = _synthetic_manifest({name: 6 for name in CLASS_NAMES})
    plan = plan_folds(man, k=5, seed=4)
    path = tmp_path / "folds.json"
    plan.save(path)
    import json

    loaded = dataset.FoldPlan.from_json(json.loads(path.read_text()))
    assert loaded.assignment == plan.assignment
    assert loaded.seed == plan.seed and loaded.k == plan.k


def test_toy_corpus_counts_and_validation(tmp_path):
    man = make_toy_corpus(tmp_path / "toy", n_per_class=10, seed=1)
    assert len(man) == 60
    assert all(v == 10 for v in man.per_class_counts().values())
    for ref in man.clips:
        assert ref.duration >= 1.0


def test_toy_corpus_deterministic(tmp_path):
    man1 = make_toy_corpus(tmp_path / "t1", n_per_class=5, seed=9)
    man2 = make_toy_corpus(tmp_path / "t2", n_per_class=5, seed=9)

    def digest(man):
        h = hashlib.sha256()
        for ref in man.clips:
            h.update(ref.path.read_bytes())
        return h.hexdigest()

    assert digest(man1) == digest(man2)
    man3 = make_toy_corpus(tmp_path / "t3", n_per_class=5, seed=10)
    assert digest(man1) != digest(man3)


def test_toy_corpus_rejects_tiny_request(tmp_path):
    with pytest.raises(DatasetError, match="n_per_class"):
        make_toy_corpus(tmp_path / "t", n_per_class=2, seed=0)


def test_impulse_train_class_has_periodic_frame_energy(tmp_path):
    # oracle: autocorrelation of per-hop frame energies peaks at the impulse
    # period expressed in hops
    man = make_toy_corpus(tmp_path / "toy", n_per_class=5, seed=3)
    hop = 256
    expected_lag = dataset.TOY_IMPULSE_PERIOD // hop
    insertion = [r for r in man.clips if CLASS_NAMES[r.label] == "Insertion"]
    clip = man.load_clip(insertion[0].clip_id)
    x = clip.samples.astype(np.float64)
    n_frames = len(x) // hop
    energies = (x[: n_frames * hop].reshape(n_frames, hop) ** 2).sum(axis=1)
    energies = energies - energies.mean()
    ac = np.correlate(energies, energies, mode="full")[n_frames - 1 :]
    search = np.arange(5, min(40, n_frames))
    peak_lag = search[np.argmax(ac[search])]
    assert abs(int(peak_lag) - expected_lag) <= 1
