"""Class-conditional WGAN-GP over normalized 64x64 log-mel spectrograms.

The critic scores (spectrogram, class) pairs and is regularized towards
unit-norm input gradients on samples interpolated between real and generated
batches. Training runs five critic updates per generator update and keeps the
checkpoint with the lowest monitored FID.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Protocol

import numpy as np
import torch
import torch.nn as nn

from .dataset import CLASS_NAMES, N_CLASSES
from .features import MelConfig, NormStats, Spectrogram, SpectrogramCorpus


class GanError(Exception):
    pass


class TrainingDiverged(GanError):
    """Critic loss exceeded the divergence guard repeatedly."""


@dataclass(frozen=True)
class GanConfig:
    latent_dim: int = 128
    n_classes: int = N_CLASSES
    gp_weight: float = 10.0
    n_critic: int = 5
    batch_size: int = 64
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.9
    max_epochs: int = 600
    fid_interval: int = 10
    fid_samples: int = 1024
    seed: int = 0
    embed_dim: int = 6
    gen_channels: tuple[int, ...] = (256, 128, 64, 32)
    critic_channels: tuple[int, ...] = (64, 128, 256, 512)
    divergence_guard: float = 1e4

    def __post_init__(self):
        if self.n_critic < 1:
            raise GanError("n_critic must be >= 1")
        if min(self.latent_dim, self.batch_size, self.max_epochs, self.fid_interval) <= 0:
            raise GanError("latent_dim, batch_size, max_epochs and fid_interval must be positive")
        if len(self.gen_channels) != 4 or len(self.critic_channels) != 4:
            raise GanError("gen_channels and critic_channels must have 4 stages")

    def to_json(self) -> dict:
        return {
            "latent_dim": self.latent_dim,
            "n_classes": self.n_classes,
            "gp_weight": self.gp_weight,
            "n_critic": self.n_critic,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "max_epochs": self.max_epochs,
            "fid_interval": self.fid_interval,
            "fid_samples": self.fid_samples,
            "seed": self.seed,
            "embed_dim": self.embed_dim,
            "gen_channels": list(self.gen_channels),
            "critic_channels": list(self.critic_channels),
            "divergence_guard": self.divergence_guard,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "GanConfig":
        doc = dict(doc)
        doc["gen_channels"] = tuple(doc["gen_channels"])
        doc["critic_channels"] = tuple(doc["critic_channels"])
        return cls(**doc)


class Generator(nn.Module):
    """Maps (z, class id) to an unbounded 64x64 spectrogram.

    A learned class embedding is concatenated to the noise vector and mapped
    by a dense layer to a 4x4 feature stack, followed by four stride-2
    transposed convolutions. The last layer has no activation because
    normalized spectrograms are not range-limited.
    """

    def __init__(self, cfg: GanConfig):
        super().__init__()
        c0, c1, c2, c3 = cfg.gen_channels
        self.c0 = c0
        self.embed = nn.Embedding(cfg.n_classes, cfg.embed_dim)
        self.fc = nn.Linear(cfg.latent_dim + cfg.embed_dim, 4 * 4 * c0)
        self.head = nn.Sequential(nn.BatchNorm2d(c0), nn.LeakyReLU(0.2))
        self.stages = nn.Sequential(
            nn.ConvTranspose2d(c0, c1, 5, 2, 2, output_padding=1),
            nn.BatchNorm2d(c1),
            nn.LeakyReLU(0.2),
            nn.ConvTranspose2d(c1, c2, 5, 2, 2, output_padding=1),
            nn.BatchNorm2d(c2),
            nn.LeakyReLU(0.2),
            nn.ConvTranspose2d(c2, c3, 5, 2, 2, output_padding=1),
            nn.BatchNorm2d(c3),
            nn.LeakyReLU(0.2),
            nn.ConvTranspose2d(c3, 1, 5, 2, 2, output_padding=1),
        )

    def forward(self, z: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        h = torch.cat([z, self.embed(y)], dim=1)
        h = self.fc(h).reshape(-1, self.c0, 4, 4)
        return self.stages(self.head(h))


class Critic(nn.Module):
    """Scores (spectrogram, class id) pairs with an unbounded scalar.

    The class id is one-hot encoded and repeated into per-class 64x64 planes
    stacked under the spectrogram channel. No normalization layers, per the
    gradient-penalty training recipe.
    """

    def __init__(self, cfg: GanConfig):
        super().__init__()
        c1, c2, c3, c4 = cfg.critic_channels
        self.n_classes = cfg.n_classes
        self.net = nn.Sequential(
            nn.Conv2d(1 + cfg.n_classes, c1, 5, 2, 2),
            nn.LeakyReLU(0.2),
            nn.Conv2d(c1, c2, 5, 2, 2),
            nn.LeakyReLU(0.2),
            nn.Conv2d(c2, c3, 5, 2, 2),
            nn.LeakyReLU(0.2),
            nn.Conv2d(c3, c4, 5, 2, 2),
            nn.LeakyReLU(0.2),
            nn.Flatten(),
            nn.Linear(c4 * 4 * 4, 1),
        )

    def forward(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        planes = nn.functional.one_hot(y, self.n_classes).float()
        planes = planes.reshape(-1, self.n_classes, 1, 1).expand(-1, -1, x.shape[2], x.shape[3])
        return self.net(torch.cat([x, planes], dim=1)).squeeze(1)


def parameter_counts(cfg: GanConfig | None = None) -> dict[str, int]:
    cfg = cfg or GanConfig()
    return {
        "generator": sum(p.numel() for p in Generator(cfg).parameters()),
        "critic": sum(p.numel() for p in Critic(cfg).parameters()),
    }


def architecture_report(cfg: GanConfig | None = None) -> str:
    """Human-readable comparison of parameter counts against the published model."""
    counts = parameter_counts(cfg)
    reference = {"generator": 1_526_084, "critic": 4_321_153}
    lines = ["network      parameters   reference    deviation"]
    for name in ("generator", "critic"):
        ours, ref = counts[name], reference[name]
        dev = 100.0 * (ours - ref) / ref
        lines.append(f"{name:<12} {ours:>10,}   {ref:>9,}   {dev:+.2f}%")
    return "\n".join(lines)


def interpolate(x_real: torch.Tensor, x_fake: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Per-sample straight-line interpolation eps*x_real + (1-eps)*x_fake."""
    if x_real.shape != x_fake.shape:
        raise GanError(f"shape mismatch: {tuple(x_real.shape)} vs {tuple(x_fake.shape)}")
    eps = eps.reshape(-1, *([1] * (x_real.dim() - 1)))
    if eps.shape[0] != x_real.shape[0]:
        raise GanError(f"need one epsilon per sample, got {eps.shape[0]} for batch {x_real.shape[0]}")
    return eps * x_real + (1.0 - eps) * x_fake


def gradient_penalty(
    critic: nn.Module, x_hat: torch.Tensor, y: torch.Tensor, gp_weight: float
) -> torch.Tensor:
    """gp_weight * E[(||grad_x critic(x, y)||_2 - 1)^2] over the batch."""
    x_hat = x_hat.detach().requires_grad_(True)
    scores = critic(x_hat, y)
    grads = torch.autograd.grad(
        outputs=scores,
        inputs=x_hat,
        grad_outputs=torch.ones_like(scores),
        create_graph=True,
    )[0]
    if not torch.isfinite(grads).all():
        raise GanError("non-finite critic input gradients in the gradient penalty")
    norms = grads.reshape(grads.shape[0], -1).norm(2, dim=1)
    return gp_weight * ((norms - 1.0) ** 2).mean()


def critic_loss(d_real: torch.Tensor, d_fake: torch.Tensor, gp: torch.Tensor | float) -> torch.Tensor:
    if d_real.numel() == 0 or d_fake.numel() == 0:
        raise GanError("empty score batch")
    return d_fake.mean() - d_real.mean() + gp


def generator_loss(d_fake: torch.Tensor) -> torch.Tensor:
    if d_fake.numel() == 0:
        raise GanError("empty score batch")
    return -d_fake.mean()


@dataclass
class GanCheckpoint:
    epoch: int
    generator_state: dict
    critic_state: dict
    gen_opt_state: dict
    critic_opt_state: dict
    config: GanConfig
    fid_history: list[tuple[int, float]] = field(default_factory=list)
    torch_rng_state: torch.Tensor | None = None
    numpy_rng_state: dict | None = None
    mel_config: MelConfig | None = None
    norm_stats: NormStats | None = None
    train_clip_ids: list[str] = field(default_factory=list)

    def best_fid(self) -> float:
        if not self.fid_history:
            raise GanError("checkpoint has no FID history")
        return min(f for _, f in self.fid_history)

    def build_generator(self) -> Generator:
        gen = Generator(self.config)
        gen.load_state_dict(self.generator_state)
        gen.eval()
        return gen

    def save(self, out_dir: Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        torch.save(
            {
                "generator": self.generator_state,
                "critic": self.critic_state,
                "gen_opt": self.gen_opt_state,
                "critic_opt": self.critic_opt_state,
                "torch_rng": self.torch_rng_state,
            },
            out / "state.pt",
        )
        manifest = {
            "epoch": self.epoch,
            "fid_history": self.fid_history,
            "config": self.config.to_json(),
            "numpy_rng_state": _jsonify_rng(self.numpy_rng_state),
            "mel_config": self.mel_config.to_json() if self.mel_config else None,
            "norm_stats": self.norm_stats.to_json() if self.norm_stats else None,
            "train_clip_ids": self.train_clip_ids,
        }
        (out / "manifest.json").write_text(json.dumps(manifest))
        return out

    @classmethod
    def load(cls, in_dir: Path) -> "GanCheckpoint":
        path = Path(in_dir)
        manifest_path = path / "manifest.json"
        state_path = path / "state.pt"
        if not manifest_path.exists():
            raise GanError(f"missing checkpoint manifest {manifest_path}")
        if not state_path.exists():
            raise GanError(f"missing checkpoint state {state_path}")
        manifest = json.loads(manifest_path.read_text())
        state = torch.load(state_path, weights_only=False)
        return cls(
            epoch=manifest["epoch"],
            generator_state=state["generator"],
            critic_state=state["critic"],
            gen_opt_state=state["gen_opt"],
            critic_opt_state=state["critic_opt"],
            config=GanConfig.from_json(manifest["config"]),
            fid_history=[tuple(e) for e in manifest["fid_history"]],
            torch_rng_state=state["torch_rng"],
            numpy_rng_state=_dejsonify_rng(manifest["numpy_rng_state"]),
            mel_config=MelConfig.from_json(manifest["mel_config"]) if manifest["mel_config"] else None,
            norm_stats=NormStats.from_json(manifest["norm_stats"]) if manifest["norm_stats"] else None,
            train_clip_ids=list(manifest.get("train_clip_ids", [])),
        )


def _jsonify_rng(state: dict | None):
    """numpy bit-generator state as JSON-safe values (PCG64 uses plain ints)."""
    if state is None:
        return None

    def convert(obj):
        if isinstance(obj, dict):
            return {k: convert(v) for k, v in obj.items()}
        if isinstance(obj, np.ndarray):
            return {"__ndarray__": obj.tolist(), "dtype": str(obj.dtype)}
        if isinstance(obj, np.integer):
            return int(obj)
        return obj

    return convert(copy.deepcopy(state))


def _dejsonify_rng(state: dict | None):
    if state is None:
        return None

    def convert(obj):
        if isinstance(obj, dict):
            if "__ndarray__" in obj:
                return np.array(obj["__ndarray__"], dtype=obj["dtype"])
            return {k: convert(v) for k, v in obj.items()}
        return obj

    return convert(state)


class FidScorer(Protocol):
    def __call__(self, values: np.ndarray, labels: np.ndarray) -> float: ...


@dataclass
class TrainResult:
    best: GanCheckpoint
    last: GanCheckpoint
    critic_losses: list[float]  # one mean per epoch
    generator_losses: list[float]


def train(
    corpus: SpectrogramCorpus,
    cfg: GanConfig,
    fid_scorer: FidScorer,
    resume_from: GanCheckpoint | None = None,
    log: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Adversarial training with FID-monitored model selection.

    Per generator step the critic is updated n_critic times, each on a fresh
    real batch with fresh noise and fresh interpolation draws. Every
    fid_interval epochs (and at epoch 1) the FID of generated samples against
    the scorer's reference is recorded; the minimum-FID checkpoint is kept.
    """
    if not corpus.normalized:
        raise GanError("GAN training expects a normalized corpus")
    present = corpus.class_present()
    if present != set(range(cfg.n_classes)):
        missing = sorted(set(range(cfg.n_classes)) - present)
        raise GanError(f"training corpus is missing classes {[CLASS_NAMES[m] for m in missing]}")

    torch.manual_seed(cfg.seed)
    gen = Generator(cfg)
    critic = Critic(cfg)
    gen_opt = torch.optim.Adam(gen.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    critic_opt = torch.optim.Adam(critic.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    rng = np.random.default_rng(cfg.seed)
    draw = torch.Generator().manual_seed(cfg.seed)

    start_epoch = 1
    fid_history: list[tuple[int, float]] = []
    if resume_from is not None:
        gen.load_state_dict(resume_from.generator_state)
        critic.load_state_dict(resume_from.critic_state)
        gen_opt.load_state_dict(resume_from.gen_opt_state)
        critic_opt.load_state_dict(resume_from.critic_opt_state)
        if resume_from.torch_rng_state is not None:
            draw.set_state(resume_from.torch_rng_state)
        if resume_from.numpy_rng_state is not None:
            rng.bit_generator.state = resume_from.numpy_rng_state
        fid_history = list(resume_from.fid_history)
        start_epoch = resume_from.epoch + 1

    x_all = torch.from_numpy(np.ascontiguousarray(corpus.values, dtype=np.float32)).unsqueeze(1)
    y_all = torch.from_numpy(corpus.labels.astype(np.int64))
    n = len(corpus)
    if n < cfg.batch_size:
        raise GanError(f"corpus of {n} spectrograms is smaller than one batch ({cfg.batch_size})")
    class_probs = np.bincount(corpus.labels, minlength=cfg.n_classes) / n
    train_clip_ids = sorted(set(corpus.clip_ids))

    def snapshot(epoch: int) -> GanCheckpoint:
        return GanCheckpoint(
            epoch=epoch,
            generator_state=copy.deepcopy(gen.state_dict()),
            critic_state=copy.deepcopy(critic.state_dict()),
            gen_opt_state=copy.deepcopy(gen_opt.state_dict()),
            critic_opt_state=copy.deepcopy(critic_opt.state_dict()),
            config=cfg,
            fid_history=list(fid_history),
            torch_rng_state=draw.get_state(),
            numpy_rng_state=copy.deepcopy(rng.bit_generator.state),
            mel_config=corpus.mel_config,
            norm_stats=corpus.norm_stats,
            train_clip_ids=train_clip_ids,
        )

    best: GanCheckpoint | None = None
    best_fid = resume_from.best_fid() if resume_from is not None and resume_from.fid_history else np.inf
    if resume_from is not None:
        best = resume_from
    critic_epoch_losses: list[float] = []
    gen_epoch_losses: list[float] = []
    guard_strikes = 0

    for epoch in range(start_epoch, cfg.max_epochs + 1):
        perm = rng.permutation(n)
        batches = [perm[i : i + cfg.batch_size] for i in range(0, n - cfg.batch_size + 1, cfg.batch_size)]
        c_losses: list[float] = []
        g_losses: list[float] = []
        gen.train()
        critic.train()
        for group_start in range(0, len(batches) - cfg.n_critic + 1, cfg.n_critic):
            for b in batches[group_start : group_start + cfg.n_critic]:
                idx = torch.from_numpy(b.astype(np.int64))
                x_real, y = x_all[idx], y_all[idx]
                z = torch.randn(len(b), cfg.latent_dim, generator=draw)
                with torch.no_grad():
                    x_fake = gen(z, y)
                eps = torch.rand(len(b), generator=draw)
                x_hat = interpolate(x_real, x_fake, eps)
                gp = gradient_penalty(critic, x_hat, y, cfg.gp_weight)
                loss_c = critic_loss(critic(x_real, y), critic(x_fake, y), gp)
                critic_opt.zero_grad()
                loss_c.backward()
                critic_opt.step()
                c_losses.append(float(loss_c.detach()))
                if abs(c_losses[-1]) > cfg.divergence_guard:
                    guard_strikes += 1
                    if guard_strikes >= 3:
                        raise TrainingDiverged(
                            f"critic loss beyond {cfg.divergence_guard:g} for 3 consecutive "
                            f"steps at epoch {epoch}; recent losses: {c_losses[-3:]}"
                        )
                else:
                    guard_strikes = 0
            y_g = torch.from_numpy(rng.choice(cfg.n_classes, size=cfg.batch_size, p=class_probs))
            z = torch.randn(cfg.batch_size, cfg.latent_dim, generator=draw)
            loss_g = generator_loss(critic(gen(z, y_g), y_g))
            gen_opt.zero_grad()
            loss_g.backward()
            gen_opt.step()
            g_losses.append(float(loss_g.detach()))

        critic_epoch_losses.append(float(np.mean(c_losses)) if c_losses else np.nan)
        gen_epoch_losses.append(float(np.mean(g_losses)) if g_losses else np.nan)

        if epoch == 1 or epoch % cfg.fid_interval == 0 or epoch == cfg.max_epochs:
            # dedicated generator so evaluation cadence never perturbs the
            # training draw stream (keeps resumed runs on the same trajectory)
            eval_draw = torch.Generator().manual_seed(
                int(np.random.SeedSequence([cfg.seed, epoch, 0xF1D]).generate_state(1)[0])
            )
            values, labels = _generate(gen, cfg, class_probs, cfg.fid_samples, eval_draw)
            fid_value = float(fid_scorer(values, labels))
            if not np.isfinite(fid_value):
                raise GanError(f"non-finite FID at epoch {epoch}")
            fid_history.append((epoch, fid_value))
            if fid_value < best_fid:
                best_fid = fid_value
                best = snapshot(epoch)
            if log:
                log({"event": "fid", "epoch": epoch, "fid": fid_value})
        if log:
            log(
                {
                    "event": "epoch",
                    "epoch": epoch,
                    "critic_loss": critic_epoch_losses[-1],
                    "generator_loss": gen_epoch_losses[-1],
                }
            )

    last = snapshot(cfg.max_epochs)
    if best is None:
        best = last
    else:
        best = replace(best, fid_history=list(fid_history))
    return TrainResult(
        best=best, last=last, critic_losses=critic_epoch_losses, generator_losses=gen_epoch_losses
    )


def _generate(
    gen: Generator,
    cfg: GanConfig,
    class_probs: np.ndarray,
    n_samples: int,
    draw: torch.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Generate class-proportional samples; returns (values, labels)."""
    counts = np.floor(class_probs * n_samples).astype(int)
    while counts.sum() < n_samples:
        counts[int(np.argmax(class_probs * n_samples - counts))] += 1
    labels = np.repeat(np.arange(cfg.n_classes), counts)
    gen.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(labels), 256):
            y = torch.from_numpy(labels[i : i + 256].astype(np.int64))
            z = torch.randn(len(y), cfg.latent_dim, generator=draw)
            out.append(gen(z, y).squeeze(1).numpy())
    return np.concatenate(out).astype(np.float32), labels


def sample(
    checkpoint: GanCheckpoint, class_id: int, n: int, seed: int = 0
) -> list[Spectrogram]:
    """Draw n normalized spectrograms conditioned on one class."""
    if n < 1:
        raise GanError("n must be >= 1")
    if not 0 <= class_id < checkpoint.config.n_classes:
        raise GanError(f"class id {class_id} out of range")
    gen = checkpoint.build_generator()
    draw = torch.Generator().manual_seed(seed)
    specs = []
    with torch.no_grad():
        for start in range(0, n, 256):
            count = min(256, n - start)
            z = torch.randn(count, checkpoint.config.latent_dim, generator=draw)
            y = torch.full((count,), class_id, dtype=torch.int64)
            values = gen(z, y).squeeze(1).numpy().astype(np.float32)
            if not np.isfinite(values).all():
                raise GanError("generator produced non-finite values")
            for j in range(count):
                specs.append(
                    Spectrogram(
                        values=values[j],
                        label=class_id,
                        clip_id=f"gen:{CLASS_NAMES[class_id]}:{seed}:{start + j}",
                        window_index=0,
                        normalized=True,
                    )
                )
    return specs


def synthesize_augmentation(
    checkpoint: GanCheckpoint,
    corpus: SpectrogramCorpus,
    strategy: str,
    seed: int = 0,
) -> SpectrogramCorpus:
    """Grow a corpus with generated samples.

    "doubled" adds count(c) generated samples per class c; "balanced" tops
    every class up to the maximum class count. Originals are preserved.
    """
    if strategy not in ("doubled", "balanced"):
        raise GanError(f"unknown synthesis strategy {strategy!r}; expected 'doubled' or 'balanced'")
    if not corpus.normalized:
        raise GanError("synthesis expects a normalized corpus")
    counts = np.bincount(corpus.labels, minlength=checkpoint.config.n_classes)
    if strategy == "doubled":
        extra = counts.copy()
    else:
        extra = counts.max() - counts
    provenance = {"strategy": f"cwgan_{strategy}", "seed": seed, "checkpoint_epoch": checkpoint.epoch}
    generated: list[Spectrogram] = []
    for class_id, count in enumerate(extra):
        if count > 0:
            generated.extend(sample(checkpoint, class_id, int(count), seed=seed + class_id))
    if not generated:
        out = corpus.subset(np.arange(len(corpus)))
    else:
        gen_corpus = SpectrogramCorpus.from_spectrograms(
            generated, corpus.mel_config, norm_stats=corpus.norm_stats, provenance=provenance
        )
        out = corpus.extend(gen_corpus)
    out.provenance = provenance
    return out
