"""Command-line pipeline: prepare -> train-gan -> generate -> evaluate -> render.

Every command reads one YAML config, writes its artifacts under the work
directory, stamps them with the config hash, and appends JSON-line events to
<work_dir>/logs.jsonl. Exit codes: 0 success, 1 runtime failure, 2 config
error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, dataset, evaluate, features, fid, gan, vocoder
from .config import ConfigError, RunConfig, config_hash, load_config


class MissingArtifact(Exception):
    pass


class _Runtime:
    """Shared handles derived from one loaded config."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.hash = config_hash(cfg)
        self.work = Path(cfg.work_dir)
        self.work.mkdir(parents=True, exist_ok=True)
        self._log_fh = open(self.work / "logs.jsonl", "a")

    def log(self, event: dict) -> None:
        record = {"ts": round(time.time(), 3), "config_hash": self.hash, **event}
        self._log_fh.write(json.dumps(record) + "\n")
        self._log_fh.flush()

    def say(self, message: str) -> None:
        print(message)
        self.log({"event": "message", "message": message})

    # artifact paths
    @property
    def manifest_path(self) -> Path:
        return self.work / "manifest.json"

    @property
    def folds_path(self) -> Path:
        return self.work / "folds.json"

    @property
    def corpus_base(self) -> Path:
        return self.work / "corpus"

    @property
    def norm_path(self) -> Path:
        return self.work / "norm_stats.json"

    def gan_dir(self, fold: int, which: str = "best") -> Path:
        return self.work / "gan" / f"fold{fold}" / which

    def require(self, path: Path, producer: str) -> Path:
        if not path.exists():
            raise MissingArtifact(f"missing artifact {path}; run `melgen {producer}` first")
        return path

    def load_manifest(self) -> dataset.DatasetManifest:
        self.require(self.manifest_path, "prepare")
        return dataset.DatasetManifest.from_json(json.loads(self.manifest_path.read_text()))

    def load_folds(self) -> dataset.FoldPlan:
        self.require(self.folds_path, "prepare")
        return dataset.FoldPlan.from_json(json.loads(self.folds_path.read_text()))

    def load_corpus(self) -> features.SpectrogramCorpus:
        self.require(self.corpus_base.with_suffix(".json"), "prepare")
        return features.SpectrogramCorpus.load(self.corpus_base)

    def load_norm(self) -> dict:
        self.require(self.norm_path, "prepare")
        return json.loads(self.norm_path.read_text())

    def fold_train_corpus(self, fold: int) -> features.SpectrogramCorpus:
        corpus = self.load_corpus()
        folds = self.load_folds()
        norm = self.load_norm()
        train_ids = set(folds.fold_clip_ids(fold, held_out=False))
        stats = features.NormStats.from_json(norm["per_fold"][str(fold)])
        return features.normalize_corpus(corpus.restrict_to_clips(train_ids), stats)


def _provenance(rt: _Runtime, extra: dict | None = None) -> dict:
    import torch

    record = {
        "config_hash": rt.hash,
        "seed": rt.cfg.seed,
        "fold_seed": rt.cfg.fold_seed,
        "versions": {"melgen": __version__, "numpy": np.__version__, "torch": torch.__version__},
    }
    if extra:
        record.update(extra)
    return record


def cmd_prepare(rt: _Runtime) -> None:
    cfg = rt.cfg
    manifest = dataset.load_manifest(Path(cfg.data_root), Path(cfg.labels_file))
    manifest.save(rt.manifest_path)
    counts = manifest.per_class_counts()
    rt.say(f"loaded {len(manifest)} clips: " + ", ".join(f"{k}={v}" for k, v in counts.items()))

    folds = dataset.plan_folds(manifest, k=cfg.n_folds, seed=cfg.fold_seed)
    folds.save(rt.folds_path)

    corpus = features.build_corpus(manifest, cfg.mel)
    corpus.provenance = _provenance(rt)
    corpus.save(rt.corpus_base)
    spec_counts = corpus.per_class_counts()
    rt.say(
        f"extracted {len(corpus)} spectrograms: "
        + ", ".join(f"{k}={v}" for k, v in spec_counts.items())
    )

    norm = {"config_hash": rt.hash, "per_fold": {}, "global": features.fit_norm(corpus).to_json()}
    for fold in range(cfg.n_folds):
        train_ids = set(folds.fold_clip_ids(fold, held_out=False))
        stats = features.fit_norm(corpus.restrict_to_clips(train_ids))
        norm["per_fold"][str(fold)] = stats.to_json()
    rt.norm_path.write_text(json.dumps(norm, indent=2))
    rt.say(f"wrote fold plan, corpus and normalization stats under {rt.work}")


def cmd_train_gan(rt: _Runtime, fold: int) -> None:
    cfg = rt.cfg
    train_corpus = rt.fold_train_corpus(fold)
    fid_cfg = cfg.fid_classifier or cfg.classifier
    rt.say(f"fold {fold}: training FID feature classifier on {len(train_corpus)} spectrograms")
    clf = evaluate.train_classifier(
        train_corpus, replace(fid_cfg, seed=cfg.seed), log=rt.log
    )
    scorer = fid.FidEvaluator(clf.model, train_corpus.values)
    rt.say(f"fold {fold}: training cWGAN-GP for {cfg.gan.max_epochs} epochs")
    result = gan.train(train_corpus, replace(cfg.gan, seed=cfg.seed + fold), scorer, log=rt.log)
    best_dir = result.best.save(rt.gan_dir(fold, "best"))
    result.last.save(rt.gan_dir(fold, "last"))
    (rt.gan_dir(fold, "best") / "provenance.json").write_text(
        json.dumps(_provenance(rt, {"fold": fold, "best_epoch": result.best.epoch}))
    )
    rt.say(
        f"fold {fold}: best FID {result.best.best_fid():.3f} at epoch {result.best.epoch}; "
        f"checkpoint saved to {best_dir}"
    )


def cmd_generate(rt: _Runtime, fold: int, strategy: str) -> None:
    if strategy not in ("doubled", "balanced"):
        raise ConfigError(f"strategy: must be 'doubled' or 'balanced', got {strategy!r}")
    ckpt_dir = rt.gan_dir(fold, "best")
    rt.require(ckpt_dir / "manifest.json", f"train-gan --fold {fold}")
    checkpoint = gan.GanCheckpoint.load(ckpt_dir)
    train_corpus = rt.fold_train_corpus(fold)
    out = gan.synthesize_augmentation(checkpoint, train_corpus, strategy, seed=rt.cfg.seed)
    out.provenance.update(_provenance(rt, {"fold": fold}))
    base = rt.work / "generated" / f"fold{fold}_{strategy}"
    out.save(base)
    counts = out.per_class_counts()
    rt.say(
        f"fold {fold}: {strategy} corpus has {len(out)} spectrograms "
        f"({', '.join(f'{k}={v}' for k, v in counts.items())}) -> {base}.f32"
    )


def cmd_evaluate(rt: _Runtime, strategies: list[str] | None) -> None:
    cfg = rt.cfg
    strategies = strategies or cfg.strategies
    manifest = rt.load_manifest()
    folds = rt.load_folds()
    corpus = rt.load_corpus()

    checkpoints: dict[int, gan.GanCheckpoint] = {}
    if any(s in evaluate.GAN_STRATEGIES for s in strategies):
        for fold in range(folds.k):
            ckpt_dir = rt.gan_dir(fold, "best")
            rt.require(ckpt_dir / "manifest.json", f"train-gan --fold {fold}")
            checkpoints[fold] = gan.GanCheckpoint.load(ckpt_dir)

    cv_cfg = evaluate.CvConfig(
        classifier=cfg.classifier,
        gan=cfg.gan,
        classic=cfg.classic,
        fid_classifier=cfg.fid_classifier,
        norm_scope=cfg.norm_scope,
        seed=cfg.seed,
    )
    reports = evaluate.run_cv(
        manifest,
        folds,
        strategies,
        cv_cfg,
        gan_checkpoints=checkpoints or None,
        full_corpus=corpus,
        mel_config=cfg.mel,
        log=rt.log,
    )
    report_doc = {"config_hash": rt.hash, "reports": [r.to_json() for r in reports]}
    (rt.work / "report.json").write_text(json.dumps(report_doc, indent=2))
    table = evaluate.render_report_table(reports)
    (rt.work / "report.txt").write_text(table + "\n")
    print(table)
    failed = [r for r in reports if r.error]
    if failed:
        raise RuntimeError(f"{len(failed)} strategy run(s) failed; see report.json")


def cmd_render(rt: _Runtime, class_name: str, n: int, fold: int) -> None:
    class_id = dataset.label_id(class_name)
    ckpt_dir = rt.gan_dir(fold, "best")
    rt.require(ckpt_dir / "manifest.json", f"train-gan --fold {fold}")
    checkpoint = gan.GanCheckpoint.load(ckpt_dir)
    out_dir = rt.work / "rendered"
    paths = vocoder.render_samples(
        checkpoint, class_id, n, out_dir, cfg=replace(rt.cfg.griffin_lim, mel=rt.cfg.mel), seed=rt.cfg.seed
    )
    (out_dir / "provenance.json").write_text(
        json.dumps(_provenance(rt, {"class": class_name, "n": n, "fold": fold}))
    )
    rt.say(f"wrote {len(paths)} WAV file(s): " + ", ".join(p.name for p in paths))


def cmd_toy_corpus(rt: _Runtime, n_per_class: int) -> None:
    manifest = dataset.make_toy_corpus(Path(rt.cfg.data_root), n_per_class, seed=rt.cfg.seed)
    counts = manifest.per_class_counts()
    rt.say(
        f"toy corpus with {len(manifest)} clips at {rt.cfg.data_root}: "
        + ", ".join(f"{k}={v}" for k, v in counts.items())
    )
    rt.say(f"labels file: {Path(rt.cfg.data_root) / 'labels.csv'}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="melgen",
        description="Augment small audio datasets with a class-conditional WGAN-GP "
        "over log-mel spectrograms and benchmark against classical augmentations.",
    )
    parser.add_argument("--config", "-c", default="melgen.yaml", help="YAML run configuration")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("prepare", help="validate the corpus, extract spectrograms, plan folds")
    p = sub.add_parser("train-gan", help="train the cWGAN-GP on one fold's training data")
    p.add_argument("--fold", type=int, required=True)
    p = sub.add_parser("generate", help="synthesize an augmented corpus from a trained checkpoint")
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--strategy", required=True, choices=["doubled", "balanced"])
    p = sub.add_parser("evaluate", help="run the cross-validated strategy comparison")
    p.add_argument("--strategies", help="comma-separated list, defaults to the config's list")
    p = sub.add_parser("render", help="reconstruct WAV files from generated spectrograms")
    p.add_argument("--class", dest="class_name", required=True, choices=list(dataset.CLASS_NAMES))
    p.add_argument("--n", type=int, default=3)
    p.add_argument("--fold", type=int, default=0)
    p = sub.add_parser("toy-corpus", help="write a synthetic 6-class corpus to data_root")
    p.add_argument("--n-per-class", type=int, default=50)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(Path(args.config))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    rt = _Runtime(cfg)
    rt.log({"event": "command", "command": args.command, "argv": argv or sys.argv[1:]})
    try:
        if args.command == "prepare":
            cmd_prepare(rt)
        elif args.command == "train-gan":
            cmd_train_gan(rt, args.fold)
        elif args.command == "generate":
            cmd_generate(rt, args.fold, args.strategy)
        elif args.command == "evaluate":
            strategies = args.strategies.split(",") if args.strategies else None
            cmd_evaluate(rt, strategies)
        elif args.command == "render":
            cmd_render(rt, args.class_name, args.n, args.fold)
        elif args.command == "toy-corpus":
            cmd_toy_corpus(rt, args.n_per_class)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        rt.log({"event": "error", "kind": "config", "error": str(exc)})
        return 2
    except (MissingArtifact, Exception) as exc:
        kind = "missing_artifact" if isinstance(exc, MissingArtifact) else type(exc).__name__
        print(f"error: {exc}", file=sys.stderr)
        rt.log({"event": "error", "kind": kind, "error": str(exc)})
        return 1


if __name__ == "__main__":
    sys.exit(main())
