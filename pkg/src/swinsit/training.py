"""End-to-end optimization and evaluation sweeps.

Training minimizes the batch-mean pixel MSE between input and
reconstruction, with a fresh (SNR, fading, noise) triple drawn per batch
item so the model sees the whole channel distribution. Evaluation sweeps a
fixed SNR grid with seeded channel streams, producing one result row per
(snr, seed) pair.
"""

import copy
import math
import os
from dataclasses import dataclass, field, asdict

import torch

from .channel import seeded_generator, snr_to_noise_var
from .codec import StageConfig, rate_to_channels
from .metrics import ms_ssim_tensor, ms_ssim_config, ms_ssim_db, code_rate
from .system import SwinSIT, VARIANTS
from .ceac import DnCNN

__all__ = [
    "TrainConfig",
    "ResultRow",
    "sample_snr",
    "build_variant",
    "train",
    "evaluate",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass
class TrainConfig:
    variant: str = "full"
    image_size: tuple = (32, 32)
    rate: float = 0.3
    snr_low_db: float = 1.0
    snr_high_db: float = 13.0
    batch_size: int = 128
    epochs: int = 30
    lr: float = 1e-4
    seed: int = 0
    val_fraction: float = 0.1
    pilot_len: int = 64
    loss: str = "mse"
    depths: list = field(default_factory=lambda: [2, 4])
    channels: list = field(default_factory=lambda: [128, 256])
    num_heads: list = field(default_factory=lambda: [4, 8])
    window_size: int = 4
    output_channels: int = None  # derived from rate when None
    checkpoint_every: int = 0  # epochs; 0 disables periodic saves

    def __post_init__(self):
        if self.snr_low_db > self.snr_high_db:
            raise ValueError("snr_low_db must not exceed snr_high_db")
        if not (0.0 < self.rate <= 1.0):
            raise ValueError("rate must lie in (0, 1]")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.loss not in ("mse", "ms_ssim"):
            raise ValueError("loss must be 'mse' or 'ms_ssim'")
        self.image_size = tuple(self.image_size)

    def stage_config(self):
        c = self.output_channels
        if c is None:
            c = rate_to_channels(self.rate, self.image_size, len(self.depths))
        return StageConfig(
            depths=list(self.depths),
            channels=list(self.channels),
            num_heads=list(self.num_heads),
            window_size=self.window_size,
            output_channels=c,
        )

    def to_dict(self):
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class ResultRow:
    """One evaluation grid point; the CSV schema shared by all commands."""

    snr_db: float
    rate: float
    psnr_db: float
    ms_ssim: float
    ms_ssim_db: float
    mse: float
    variant: str
    seed: int
    sparsity: float = None
    bits: int = None


def sample_snr(cfg: TrainConfig, generator=None, batch=1):
    """Uniform SNR draw on [low, high] dB, one value per batch item."""
    span = cfg.snr_high_db - cfg.snr_low_db
    u = torch.rand(batch, generator=generator)
    return cfg.snr_low_db + span * u


def build_variant(cfg: TrainConfig, refiner=None):
    """Instantiate the system model for the configured ablation variant."""
    torch.manual_seed(cfg.seed)
    mid = 0.5 * (cfg.snr_low_db + cfg.snr_high_db)
    half = max(0.5 * (cfg.snr_high_db - cfg.snr_low_db), 1.0)
    return SwinSIT(
        cfg.stage_config(),
        image_size=cfg.image_size,
        variant=cfg.variant,
        refiner=refiner if cfg.variant == "full" else None,
        pilot_len=cfg.pilot_len,
        snr_midpoint=mid,
        snr_halfwidth=half,
    )


def _batch_loss(cfg, model, images, generator):
    snr = sample_snr(cfg, generator, batch=images.shape[0])
    recon, _ = model(images, snr, generator=generator)
    if cfg.loss == "ms_ssim":
        return (1.0 - ms_ssim_tensor(images, recon)).mean()
    return torch.mean((images - recon) ** 2)


def train(cfg: TrainConfig, images, refiner=None, out_dir=None, log=None):
    """Train a variant on an in-memory [N, H, W, 3] image array.

    Splits off a validation fraction, draws per-item (SNR, h, w) each step,
    tracks the epoch-mean training loss and the validation loss, and keeps
    the best-validation state. Returns (model, history dict).
    """
    images = torch.as_tensor(images, dtype=torch.float32)
    if images.numel() == 0:
        raise ValueError("dataset is empty")
    model = build_variant(cfg, refiner=refiner)
    g = seeded_generator(cfg.seed)
    n_val = int(len(images) * cfg.val_fraction)
    val = images[:n_val]
    trainset = images[n_val:]
    if len(trainset) == 0:
        raise ValueError("no training images left after the validation split")
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)

    history = {"train_loss": [], "val_loss": []}
    best_state, best_val = None, float("inf")
    for epoch in range(cfg.epochs):
        model.train()
        perm = torch.randperm(len(trainset), generator=g)
        epoch_loss, steps = 0.0, 0
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            opt.zero_grad()
            loss = _batch_loss(cfg, model, trainset[idx], g)
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"training diverged: loss={float(loss)} at epoch {epoch}, "
                    f"step {steps} (lr={cfg.lr}, seed={cfg.seed})"
                )
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach())
            steps += 1
        history["train_loss"].append(epoch_loss / max(steps, 1))

        val_loss = history["train_loss"][-1]
        if len(val) > 0:
            model.eval()
            vg = seeded_generator(cfg.seed + 1)
            with torch.no_grad():
                val_loss = float(_batch_loss(cfg, model, val, vg))
        history["val_loss"].append(val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best_state = copy.deepcopy(model.state_dict())
        if log is not None:
            log(
                f"epoch {epoch + 1}/{cfg.epochs} "
                f"train={history['train_loss'][-1]:.5f} val={val_loss:.5f}"
            )
        if out_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(os.path.join(out_dir, "last.pt"), model, cfg)

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    if out_dir:
        save_checkpoint(os.path.join(out_dir, "best.pt"), model, cfg)
    return model, history


def finetune(cfg: TrainConfig, model, images, steps, lr=None, seed_offset=101):
    """A bounded number of extra optimization steps on an existing model.

    Used by the compression pipeline for post-pruning and STE fine-tuning.
    """
    images = torch.as_tensor(images, dtype=torch.float32)
    g = seeded_generator(cfg.seed + seed_offset)
    opt = torch.optim.Adam(
        [p for p in model.parameters() if p.requires_grad], lr=lr or cfg.lr
    )
    model.train()
    done = 0
    while done < steps:
        perm = torch.randperm(len(images), generator=g)
        for start in range(0, len(perm), cfg.batch_size):
            if done >= steps:
                break
            idx = perm[start : start + cfg.batch_size]
            opt.zero_grad()
            loss = _batch_loss(cfg, model, images[idx], g)
            if not torch.isfinite(loss):
                raise RuntimeError(f"fine-tuning diverged: loss={float(loss)}")
            loss.backward()
            opt.step()
            done += 1
    model.eval()
    return model


def evaluate(
    model,
    images,
    snr_grid,
    seeds=(0,),
    batch_size=256,
    variant=None,
    rate=None,
    compute_ms_ssim=True,
    sigma2_override=None,
):
    """Average metrics over the test set for each (snr, channel-seed) pair.

    The channel stream is seeded per (seed, snr) so runs are reproducible;
    rows come back sorted by (snr_db, seed). PSNR is averaged per image.
    """
    images = torch.as_tensor(images, dtype=torch.float32)
    model.eval()
    variant = variant or getattr(model, "variant", "full")
    n = images.shape[1] * images.shape[2] * images.shape[3]
    k = model.num_symbols
    r = rate if rate is not None else code_rate(n, k)
    rows = []
    for seed in seeds:
        for snr_db in snr_grid:
            g = seeded_generator((int(seed) << 20) ^ int(round(float(snr_db) * 1000)))
            psnr_sum, mse_sum, count = 0.0, 0.0, 0
            msssim_sum = 0.0
            with torch.no_grad():
                for start in range(0, len(images), batch_size):
                    x = images[start : start + batch_size]
                    recon, _ = model(
                        x, float(snr_db), generator=g, sigma2=sigma2_override
                    )
                    per_mse = ((x - recon) ** 2).mean(dim=(1, 2, 3))
                    per_psnr = torch.where(
                        per_mse < 1e-10,
                        torch.full_like(per_mse, 100.0),
                        -10.0 * torch.log10(per_mse.clamp(min=1e-20)),
                    )
                    psnr_sum += float(per_psnr.sum())
                    mse_sum += float(per_mse.sum())
                    count += len(x)
                    if compute_ms_ssim:
                        msssim_sum += float(
                            ms_ssim_tensor(x, recon).clamp(0.0, 1.0).sum()
                        )
            v = min(msssim_sum / count, 1.0) if compute_ms_ssim else 0.0
            rows.append(
                ResultRow(
                    snr_db=float(snr_db),
                    rate=r,
                    psnr_db=psnr_sum / count,
                    ms_ssim=v,
                    ms_ssim_db=ms_ssim_db(v) if compute_ms_ssim else 0.0,
                    mse=mse_sum / count,
                    variant=variant,
                    seed=int(seed),
                )
            )
    rows.sort(key=lambda row: (row.snr_db, row.seed))
    return rows


# ---------------------------------------------------------------------------
# checkpointing


CHECKPOINT_FORMAT = "swinsit-checkpoint-v1"


def save_checkpoint(path, model, cfg: TrainConfig):
    """Single-archive checkpoint: hierarchical parameter arrays + JSON config."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "stage_config": model.cfg.to_dict(),
        "train_config": cfg.to_dict(),
        "variant": model.variant,
        "image_size": list(model.image_size),
        "model_state": model.state_dict(),
        "refiner_state": model.refiner.state_dict() if model.refiner else None,
    }
    torch.save(payload, path)


def load_checkpoint(path):
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} archive")
    cfg = TrainConfig.from_dict(payload["train_config"])
    refiner = None
    if payload["refiner_state"] is not None:
        refiner = DnCNN()
        refiner.load_state_dict(payload["refiner_state"])
    model = build_variant(cfg, refiner=refiner)
    model.load_state_dict(payload["model_state"])
    model.eval()
    return model, cfg
