"""Classifier training, macro-F1 and the 5-fold augmentation comparison.

The classifier is a ResNet-18 adapted to single-channel 64x64 input (3x3
stem, no initial max-pool). Cross-validation fits normalization on the
training folds, applies one augmentation strategy to the training corpus
only, and always scores on real held-out spectrograms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import classic_augment, features, fid, gan
from .dataset import CLASS_NAMES, N_CLASSES, AudioClip, DatasetManifest, FoldPlan
from .features import NormStats, SpectrogramCorpus

ALL_STRATEGIES = ("none", "noise", "pitch", "stretch", "specaugment", "cwgan_doubled", "cwgan_balanced")
GAN_STRATEGIES = ("cwgan_doubled", "cwgan_balanced")

STRATEGY_DISPLAY = {
    "none": "No Augmentation",
    "noise": "Add Noise",
    "pitch": "Pitch Shift",
    "stretch": "Time Stretch",
    "specaugment": "SpecAugment",
    "cwgan_balanced": "cWGAN-GP (balanced)",
    "cwgan_doubled": "cWGAN-GP (doubled)",
}


class EvalError(Exception):
    pass


class LeakageError(EvalError):
    """A training artifact references clips from the held-out fold."""


@dataclass(frozen=True)
class ClassifierConfig:
    epochs: int = 20
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 32
    base_width: int = 64  # 64 reproduces ResNet-18; smaller widths for desk-scale runs
    seed: int = 0

    def __post_init__(self):
        if min(self.epochs, self.batch_size, self.base_width) <= 0 or self.lr <= 0:
            raise EvalError("classifier hyperparameters must be positive")


class _BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.down: nn.Module | None = None
        if stride != 1 or cin != cout:
            self.down = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout)
            )

    def forward(self, x):
        identity = x if self.down is None else self.down(x)
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + identity)


class SpectrogramResNet(nn.Module):
    """ResNet-18 (two basic blocks per stage) for 1x64x64 spectrograms.

    `features` exposes the globally average-pooled output of the last
    convolutional stage (dimension 8 * base_width; 512 at full width), which
    the FID computation uses.
    """

    def __init__(self, n_classes: int = N_CLASSES, base_width: int = 64):
        super().__init__()
        w = base_width
        self.stem = nn.Sequential(nn.Conv2d(1, w, 3, 1, 1, bias=False), nn.BatchNorm2d(w), nn.ReLU())
        stages = []
        for cin, cout, stride in (
            (w, w, 1), (w, w, 1),
            (w, 2 * w, 2), (2 * w, 2 * w, 1),
            (2 * w, 4 * w, 2), (4 * w, 4 * w, 1),
            (4 * w, 8 * w, 2), (8 * w, 8 * w, 1),
        ):
            stages.append(_BasicBlock(cin, cout, stride))
        self.stages = nn.Sequential(*stages)
        self.fc = nn.Linear(8 * w, n_classes)
        self.feature_dim = 8 * w

    def features(self, x: torch.Tensor) -> torch.Tensor:
        h = self.stages(self.stem(x))
        return F.adaptive_avg_pool2d(h, 1).flatten(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(self.features(x))


@dataclass
class TrainedClassifier:
    model: SpectrogramResNet
    config: ClassifierConfig
    loss_history: list[float]  # mean cross-entropy per epoch
    norm_stats: NormStats | None


def train_classifier(
    corpus: SpectrogramCorpus,
    cfg: ClassifierConfig,
    log: Callable[[dict], None] | None = None,
) -> TrainedClassifier:
    """Train from scratch with cross-entropy; deterministic for a fixed seed."""
    if not corpus.normalized:
        raise EvalError("classifier training expects a normalized corpus")
    missing = set(range(N_CLASSES)) - corpus.class_present()
    if missing:
        raise EvalError(f"training corpus is missing classes {[CLASS_NAMES[m] for m in sorted(missing)]}")

    torch.manual_seed(cfg.seed)
    model = SpectrogramResNet(base_width=cfg.base_width)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    loss_fn = nn.CrossEntropyLoss()
    rng = np.random.default_rng(cfg.seed)

    x_all = torch.from_numpy(np.ascontiguousarray(corpus.values, dtype=np.float32)).unsqueeze(1)
    y_all = torch.from_numpy(corpus.labels.astype(np.int64))
    n = len(corpus)
    history = []
    model.train()
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(n)
        losses = []
        for i in range(0, n, cfg.batch_size):
            idx = torch.from_numpy(perm[i : i + cfg.batch_size].astype(np.int64))
            opt.zero_grad()
            loss = loss_fn(model(x_all[idx]), y_all[idx])
            if not torch.isfinite(loss):
                raise EvalError(f"non-finite training loss at epoch {epoch}")
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        history.append(float(np.mean(losses)))
        if log:
            log({"event": "classifier_epoch", "epoch": epoch, "loss": history[-1]})
    return TrainedClassifier(model=model, config=cfg, loss_history=history, norm_stats=corpus.norm_stats)


def predict(model: SpectrogramResNet, corpus: SpectrogramCorpus, batch_size: int = 128) -> np.ndarray:
    model.eval()
    preds = []
    with torch.no_grad():
        for i in range(0, len(corpus), batch_size):
            x = torch.from_numpy(
                np.ascontiguousarray(corpus.values[i : i + batch_size], dtype=np.float32)
            ).unsqueeze(1)
            preds.append(model(x).argmax(dim=1).numpy())
    return np.concatenate(preds)


def macro_f1(y_true: np.ndarray, y_pred: np.ndarray, n_classes: int = N_CLASSES) -> float:
    """Unweighted mean of per-class F1; a class with no true and no predicted
    positives contributes 0."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.size == 0:
        raise EvalError("empty label arrays")
    if y_true.shape != y_pred.shape:
        raise EvalError(f"length mismatch: {y_true.shape} vs {y_pred.shape}")
    if (y_true < 0).any() or (y_true >= n_classes).any() or (y_pred < 0).any() or (y_pred >= n_classes).any():
        raise EvalError(f"labels out of range 0..{n_classes - 1}")
    f1s = []
    for c in range(n_classes):
        tp = int(np.sum((y_pred == c) & (y_true == c)))
        fp = int(np.sum((y_pred == c) & (y_true != c)))
        fn = int(np.sum((y_pred != c) & (y_true == c)))
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom > 0 else 0.0)
    return float(np.mean(f1s))


@dataclass
class ExperimentReport:
    strategy: str
    fold_scores: list[float]  # macro-F1 per fold, as fractions
    mean: float | None = None
    std: float | None = None
    improvement_pp: float | None = None  # percentage points vs the no-augmentation mean
    error: str | None = None
    details: dict = field(default_factory=dict)

    def finalize(self) -> "ExperimentReport":
        if self.fold_scores and self.error is None:
            self.mean = float(np.mean(self.fold_scores))
            self.std = float(np.std(self.fold_scores, ddof=1)) if len(self.fold_scores) > 1 else 0.0
        return self

    def to_json(self) -> dict:
        return {
            "strategy": self.strategy,
            "fold_scores": self.fold_scores,
            "mean": self.mean,
            "std": self.std,
            "improvement_pp": self.improvement_pp,
            "error": self.error,
            "details": self.details,
        }


def render_report_table(reports: list[ExperimentReport]) -> str:
    """Text table: strategy, mean +/- std in percent, improvement in points."""
    lines = [
        f"{'Augmentation Technique':<26} {'Mean Macro F1-Score':<22} {'Relative Improvement'}",
        "-" * 70,
    ]
    for rep in reports:
        name = STRATEGY_DISPLAY.get(rep.strategy, rep.strategy)
        if rep.error is not None:
            lines.append(f"{name:<26} FAILED ({rep.error})")
            continue
        score = f"{100 * rep.mean:.2f} +/- {100 * rep.std:.2f} %"
        imp = "" if rep.improvement_pp is None else f"{rep.improvement_pp:+.2f} %"
        lines.append(f"{name:<26} {score:<22} {imp}")
    return "\n".join(lines)


def assert_no_leakage(
    train_corpus: SpectrogramCorpus,
    test_clip_ids: set[str],
    gan_train_clip_ids: list[str] | None = None,
) -> None:
    """Fail if any training sample (or the GAN behind generated samples) is
    sourced from a held-out clip. Generated records (clip ids 'gen:...') are
    covered through the checkpoint's recorded training clips."""
    train_sources = {cid for cid in train_corpus.clip_ids if not cid.startswith("gen:")}
    overlap = train_sources & test_clip_ids
    if overlap:
        raise LeakageError(f"training corpus references held-out clips: {sorted(overlap)[:5]}")
    if gan_train_clip_ids is not None:
        overlap = set(gan_train_clip_ids) & test_clip_ids
        if overlap:
            raise LeakageError(f"GAN was trained on held-out clips: {sorted(overlap)[:5]}")


@dataclass
class CvConfig:
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    gan: gan.GanConfig = field(default_factory=gan.GanConfig)
    classic: classic_augment.ClassicAugmentConfig = field(
        default_factory=classic_augment.ClassicAugmentConfig
    )
    fid_classifier: ClassifierConfig | None = None  # defaults to `classifier`
    norm_scope: str = "train"  # "train" fits stats per fold; "global" on everything
    seed: int = 0

    def __post_init__(self):
        if self.norm_scope not in ("train", "global"):
            raise EvalError(f"norm_scope must be 'train' or 'global', got {self.norm_scope!r}")


def _fold_seed(base: int, fold: int, tag: str) -> int:
    import zlib

    return int(np.random.SeedSequence([base, fold, zlib.crc32(tag.encode())]).generate_state(1)[0])


def run_cv(
    manifest: DatasetManifest,
    fold_plan: FoldPlan,
    strategies: list[str],
    cfg: CvConfig,
    gan_checkpoints: dict[int, gan.GanCheckpoint] | None = None,
    clips: dict[str, AudioClip] | None = None,
    full_corpus: SpectrogramCorpus | None = None,
    mel_config: features.MelConfig | None = None,
    log: Callable[[dict], None] | None = None,
    trained_gans_out: dict[int, gan.GanCheckpoint] | None = None,
) -> list[ExperimentReport]:
    """Stratified k-fold comparison of augmentation strategies.

    Per fold: fit normalization on the training clips, build the augmented
    training corpus for each strategy, train a classifier, and score macro-F1
    on the held-out real spectrograms. GAN strategies use per-fold
    checkpoints: supplied ones are validated against the fold split, missing
    ones are trained in place on that fold's training corpus. A failing fold
    aborts its strategy and records the partial result.
    """
    unknown = [s for s in strategies if s not in ALL_STRATEGIES]
    if unknown:
        raise EvalError(f"unknown strategies {unknown}; choose from {ALL_STRATEGIES}")
    mel_cfg = mel_config or features.MelConfig()
    if clips is None:
        clips = manifest.load_all()
    if full_corpus is None:
        full_corpus = features.build_corpus(manifest, mel_cfg, clips=clips)

    k = fold_plan.k
    global_stats = features.fit_norm(full_corpus) if cfg.norm_scope == "global" else None
    fold_data = []
    for fold in range(k):
        test_ids = set(fold_plan.fold_clip_ids(fold, held_out=True))
        train_ids = set(fold_plan.fold_clip_ids(fold, held_out=False))
        if test_ids & train_ids:
            raise LeakageError(f"fold {fold}: fold plan assigns clips to both sides")
        train_u = full_corpus.restrict_to_clips(train_ids)
        test_u = full_corpus.restrict_to_clips(test_ids)
        stats = global_stats or features.fit_norm(train_u)
        fold_data.append(
            {
                "fold": fold,
                "test_ids": test_ids,
                "train": features.normalize_corpus(train_u, stats),
                "test": features.normalize_corpus(test_u, stats),
                "stats": stats,
            }
        )

    trained_gans: dict[int, gan.GanCheckpoint]
    trained_gans = trained_gans_out if trained_gans_out is not None else {}
    trained_gans.update(gan_checkpoints or {})

    def fold_checkpoint(fd: dict) -> gan.GanCheckpoint:
        fold = fd["fold"]
        if fold not in trained_gans:
            fid_cfg = cfg.fid_classifier or cfg.classifier
            fid_cfg = replace(fid_cfg, seed=_fold_seed(cfg.seed, fold, "fid_clf"))
            if log:
                log({"event": "fid_classifier", "fold": fold})
            clf = train_classifier(fd["train"], fid_cfg)
            scorer = fid.FidEvaluator(clf.model, fd["train"].values)
            gan_cfg = replace(cfg.gan, seed=_fold_seed(cfg.seed, fold, "gan"))
            if log:
                log({"event": "gan_train", "fold": fold})
            result = gan.train(fd["train"], gan_cfg, scorer, log=log)
            trained_gans[fold] = result.best
        ckpt = trained_gans[fold]
        if ckpt.train_clip_ids:
            assert_no_leakage(fd["train"], fd["test_ids"], ckpt.train_clip_ids)
        return ckpt

    reports = []
    baseline_mean: float | None = None
    for strategy in strategies:
        report = ExperimentReport(strategy=strategy, fold_scores=[])
        for fd in fold_data:
            fold = fd["fold"]
            try:
                seed = _fold_seed(cfg.seed, fold, strategy)
                if strategy == "none":
                    train_corpus = fd["train"]
                    gan_ids = None
                elif strategy in GAN_STRATEGIES:
                    ckpt = fold_checkpoint(fd)
                    train_corpus = gan.synthesize_augmentation(
                        ckpt, fd["train"], strategy.removeprefix("cwgan_"), seed=seed
                    )
                    gan_ids = ckpt.train_clip_ids
                    report.details.setdefault("fid_history", {})[str(fold)] = ckpt.fid_history
                else:
                    train_corpus = classic_augment.augment_corpus(
                        fd["train"], strategy, seed, cfg.classic, clips=clips
                    )
                    gan_ids = None
                assert_no_leakage(train_corpus, fd["test_ids"], gan_ids)
                clf_cfg = replace(cfg.classifier, seed=_fold_seed(cfg.seed, fold, f"clf:{strategy}"))
                clf = train_classifier(train_corpus, clf_cfg)
                y_pred = predict(clf.model, fd["test"])
                score = macro_f1(fd["test"].labels, y_pred)
                report.fold_scores.append(score)
                if log:
                    log({"event": "fold_score", "strategy": strategy, "fold": fold, "macro_f1": score})
            except Exception as exc:  # record partial result, move to next strategy
                report.error = f"fold {fold}: {exc}"
                if log:
                    log({"event": "strategy_failed", "strategy": strategy, "fold": fold, "error": str(exc)})
                break
        report.finalize()
        if strategy == "none" and report.mean is not None:
            baseline_mean = report.mean
        reports.append(report)

    if baseline_mean is not None:
        for report in reports:
            if report.strategy != "none" and report.mean is not None:
                report.improvement_pp = 100.0 * (report.mean - baseline_mean)
    return reports


def reports_to_json(reports: list[ExperimentReport]) -> str:
    return json.dumps([r.to_json() for r in reports], indent=2)
