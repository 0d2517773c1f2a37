"""Losses, augmentation, and the two-phase training loop.

Phase 1 trains from scratch on synthetic clips; phase 2 resumes from the
phase-1 best checkpoint on weakly labeled clips with weight decay switched
off. Model selection is by validation Dice after every epoch. Augmentation
applies photometric jitter to reference frames only, then one shared spatial
transform (small rotation, random square crop, resize) to references, query
frame, and query mask alike.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import cv2
import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import data, metrics
from .diffusion import patch_diffuse_batch
from .model import DiffUNet, NetworkConfig, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

@dataclass
class LossBundle:
    recon_mse: float
    recon_ssim: float
    seg_bce: float
    seg_dice: float
    weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)

    @property
    def total(self) -> float:
        w = self.weights
        return (w[0] * self.recon_mse + w[1] * self.recon_ssim
                + w[2] * self.seg_bce + w[3] * self.seg_dice)

    def to_dict(self) -> dict:
        return {"mse": self.recon_mse, "ssim": self.recon_ssim,
                "bce": self.seg_bce, "dice": self.seg_dice, "total": self.total}


def dice_loss(logits: torch.Tensor, mask: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """Soft Dice loss, per sample then averaged over the batch."""
    probs = torch.sigmoid(logits)
    p = probs.reshape(probs.shape[0], -1)
    g = mask.reshape(mask.shape[0], -1)
    inter = (p * g).sum(dim=1)
    dice = (2.0 * inter + smooth) / (p.sum(dim=1) + g.sum(dim=1) + smooth)
    return 1.0 - dice.mean()


def seg_loss(logits: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """(BCE-with-logits, soft Dice loss). Mask must be strictly binary."""
    if logits.shape != mask.shape:
        raise ValueError(f"shape mismatch: {tuple(logits.shape)} vs {tuple(mask.shape)}")
    if not torch.all((mask == 0) | (mask == 1)):
        raise ValueError("mask must contain only 0 and 1")
    bce = F.binary_cross_entropy_with_logits(logits, mask.to(logits.dtype))
    return bce, dice_loss(logits, mask.to(logits.dtype))


def _gaussian_window(size: int, sigma: float, channels: int,
                     dtype: torch.dtype) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    g = torch.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    g = g / g.sum()
    win = torch.outer(g, g)
    return win.expand(channels, 1, size, size).contiguous()


def ssim(x: torch.Tensor, y: torch.Tensor, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> torch.Tensor:
    """Mean structural similarity with a Gaussian window and valid padding.

    Local moments are Gaussian-weighted (population covariance, no sample
    correction), so a value of 1 means x == y everywhere.
    """
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.ndim != 4:
        raise ValueError("expected (b, c, h, w) tensors")
    if min(x.shape[2], x.shape[3]) < window:
        raise ValueError(f"inputs must be at least {window}x{window}")
    c = x.shape[1]
    win = _gaussian_window(window, sigma, c, x.dtype).to(x.device)

    def blur(t: torch.Tensor) -> torch.Tensor:
        return F.conv2d(t, win, groups=c)

    mu_x, mu_y = blur(x), blur(y)
    sxx = blur(x * x) - mu_x * mu_x
    syy = blur(y * y) - mu_y * mu_y
    sxy = blur(x * y) - mu_x * mu_y
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return (num / den).mean()


def recon_loss(pred: torch.Tensor, target: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """(MSE, 1 - SSIM). Target values must lie in [0, 1]."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if target.min() < -1e-6 or target.max() > 1.0 + 1e-6:
        raise ValueError("target values must lie in [0, 1]")
    return F.mse_loss(pred, target), 1.0 - ssim(pred, target)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

@dataclass
class AugmentConfig:
    rotation_deg: float = 10.0
    crop_range: tuple[int, int] = (400, 750)
    out_size: int = 256
    color_gain: float = 0.1      # per-channel multiplicative jitter
    brightness: float = 0.05     # additive jitter
    blur_p: float = 0.3
    blur_sigma_max: float = 1.5

    def __post_init__(self) -> None:
        if self.crop_range[0] > self.crop_range[1]:
            raise ValueError("crop_range must be (low, high) with low <= high")
        if self.out_size > self.crop_range[0]:
            raise ValueError("out_size must not exceed the smallest crop")


@dataclass
class AugmentParams:
    """One drawn augmentation: photometric per reference, spatial shared."""

    angle: float                 # degrees
    crop_size: int
    crop_u: float                # fractional crop origin in [0, 1)
    crop_v: float
    gains: np.ndarray            # tau x 3
    offsets: np.ndarray          # tau
    blur_sigmas: np.ndarray      # tau; 0 disables blur for that frame


def draw_params(rng: np.random.Generator, cfg: AugmentConfig, tau: int) -> AugmentParams:
    blur = rng.random(tau) < cfg.blur_p
    sigmas = rng.uniform(0.1, cfg.blur_sigma_max, size=tau) * blur
    return AugmentParams(
        angle=float(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)),
        crop_size=int(rng.integers(cfg.crop_range[0], cfg.crop_range[1] + 1)),
        crop_u=float(rng.random()),
        crop_v=float(rng.random()),
        gains=1.0 + rng.uniform(-cfg.color_gain, cfg.color_gain, size=(tau, 3)),
        offsets=rng.uniform(-cfg.brightness, cfg.brightness, size=tau),
        blur_sigmas=sigmas,
    )


def apply_color_stage(references: Sequence[np.ndarray], params: AugmentParams) -> list[np.ndarray]:
    out = []
    for i, ref in enumerate(references):
        f = np.clip(ref * params.gains[i].astype(np.float32)
                    + np.float32(params.offsets[i]), 0.0, 1.0)
        if params.blur_sigmas[i] > 0:
            f = cv2.GaussianBlur(f, (0, 0), sigmaX=float(params.blur_sigmas[i]))
            f = np.clip(f, 0.0, 1.0)
        out.append(f.astype(np.float32))
    return out


def _warp(img: np.ndarray, angle: float, nearest: bool) -> np.ndarray:
    if angle == 0.0:
        return img
    h, w = img.shape[:2]
    M = cv2.getRotationMatrix2D((w / 2.0, h / 2.0), angle, 1.0)
    flags = cv2.INTER_NEAREST if nearest else cv2.INTER_LINEAR
    return cv2.warpAffine(img, M, (w, h), flags=flags, borderMode=cv2.BORDER_REFLECT_101)


def _resize(img: np.ndarray, size: int, nearest: bool) -> np.ndarray:
    if img.shape[0] == size and img.shape[1] == size:
        return img
    if nearest:
        interp = cv2.INTER_NEAREST
    else:
        interp = cv2.INTER_AREA if img.shape[0] > size else cv2.INTER_LINEAR
    return cv2.resize(img, (size, size), interpolation=interp)


def apply_spatial_stage(images: Sequence[np.ndarray], mask: Optional[np.ndarray],
                        params: AugmentParams, cfg: AugmentConfig):
    """Shared rotate/crop/resize. Mask resampling is nearest-neighbor and the
    result is re-binarized, so masks stay in {0, 1}."""
    h, w = images[0].shape[:2]
    if min(h, w) < cfg.crop_range[0]:
        raise ValueError(f"frames {h}x{w} smaller than minimum crop {cfg.crop_range[0]}")
    s = min(params.crop_size, h, w)
    y0 = int(round(params.crop_u * (h - s)))
    x0 = int(round(params.crop_v * (w - s)))

    def spatial(img: np.ndarray, nearest: bool) -> np.ndarray:
        img = _warp(img, params.angle, nearest)
        img = img[y0:y0 + s, x0:x0 + s]
        return _resize(img, cfg.out_size, nearest)

    out_images = [spatial(im, nearest=False).astype(np.float32) for im in images]
    out_mask = None
    if mask is not None:
        out_mask = (spatial(mask.astype(np.uint8), nearest=True) > 0).astype(np.uint8)
    return out_images, out_mask


def augment_sample(sample: data.Sample, rng: np.random.Generator,
                   cfg: AugmentConfig) -> data.Sample:
    params = draw_params(rng, cfg, sample.tau)
    refs = apply_color_stage(sample.references, params)
    frames, mask = apply_spatial_stage(refs + [sample.query_frame], sample.query_mask,
                                       params, cfg)
    return data.Sample(
        references=frames[:-1],
        query_frame=frames[-1],
        query_mask=mask,
        clip_id=sample.clip_id,
        query_index=sample.query_index,
    )


# ---------------------------------------------------------------------------
# Dataset and batching
# ---------------------------------------------------------------------------

class SampleDataset:
    """Flat index over all (clip, query index) windows of a manifest list."""

    def __init__(self, manifests: Sequence[data.ClipManifest], tau: int,
                 stride: int = 1, require_masks: bool = True, preload: bool = False):
        self.manifests = list(manifests)
        self.tau = tau
        self.index: list[tuple[int, int]] = []
        for ci, m in enumerate(self.manifests):
            if require_masks and not m.has_masks:
                raise ValueError(f"clip {m.clip_id!r} has no masks")
            for t in data.window_query_indices(m.num_frames, tau, stride):
                self.index.append((ci, t))
        self._cache: dict[int, data.ClipManifest] = {}
        self._frames: Optional[list[tuple[list[np.ndarray], list[np.ndarray]]]] = None
        if preload:
            self._frames = []
            for m in self.manifests:
                frames = [data.load_frame(p) for p in m.frame_paths]
                masks = [data.load_mask(p) for p in m.mask_paths] if m.has_masks else []
                self._frames.append((frames, masks))

    def __len__(self) -> int:
        return len(self.index)

    def __getitem__(self, i: int) -> data.Sample:
        ci, t = self.index[i]
        m = self.manifests[ci]
        if self._frames is not None:
            frames, masks = self._frames[ci]
            return data.Sample(
                references=[frames[j] for j in range(t - self.tau, t)],
                query_frame=frames[t],
                query_mask=masks[t] if masks else None,
                clip_id=m.clip_id,
                query_index=t,
            )
        return data.load_sample(m, t, self.tau)

    def sample_id(self, i: int) -> str:
        ci, t = self.index[i]
        return f"{self.manifests[ci].clip_id}:{t}"


def collate(samples: Sequence[data.Sample]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Stack samples into (references, query, mask) float32 tensors."""
    refs = torch.stack([
        torch.stack([torch.from_numpy(r).permute(2, 0, 1) for r in s.references])
        for s in samples
    ])
    query = torch.stack([torch.from_numpy(s.query_frame).permute(2, 0, 1) for s in samples])
    mask = torch.stack([
        torch.from_numpy(s.query_mask.astype(np.float32))[None] for s in samples
    ])
    return refs, query, mask


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    phase: str = "synthetic"       # "synthetic" (phase 1) or "weak" (phase 2)
    epochs: int = 15
    lr: float = 1e-4
    weight_decay: float = 1e-5     # 0 for phase 2
    batch_size: int = 8
    grad_clip: Optional[float] = 1.0
    p_d: float = 0.5               # per-reference-frame input diffusion rate
    loss_weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    seed: int = 0
    stride: int = 1
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    eval_crop: int = 512           # at the 1024 reference scale; scaled for small frames
    save_every_epoch: bool = True

    def __post_init__(self) -> None:
        if self.phase not in ("synthetic", "weak"):
            raise ValueError("phase must be 'synthetic' or 'weak'")
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        self.loss_weights = tuple(float(w) for w in self.loss_weights)


def compute_losses(model: DiffUNet, refs: torch.Tensor, query: torch.Tensor,
                   mask: torch.Tensor, weights) -> tuple[torch.Tensor, LossBundle]:
    out = model(refs)
    mse, ssim_l = recon_loss(out.recon, query)
    bce, dce = seg_loss(out.seg_logits, mask)
    w = weights
    total = w[0] * mse + w[1] * ssim_l + w[2] * bce + w[3] * dce
    bundle = LossBundle(mse.item(), ssim_l.item(), bce.item(), dce.item(), tuple(w))
    return total, bundle


def train_epoch(model: DiffUNet, dataset: SampleDataset, optimizer: torch.optim.Optimizer,
                cfg: TrainConfig, epoch: int) -> dict:
    """One pass over the dataset. Returns running-mean loss components.

    Every sample's augmentation stream is seeded from (seed, epoch, index),
    so the epoch is reproducible regardless of loader order. A non-finite
    loss aborts with the offending batch's sample ids.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    model.train()
    order_rng = np.random.default_rng((cfg.seed, epoch, 1))
    order = order_rng.permutation(len(dataset))
    pd_rng = np.random.default_rng((cfg.seed, epoch, 2))
    model.seed_diffusion((cfg.seed, epoch, 3))
    torch.manual_seed((cfg.seed * 100003 + epoch) % (2 ** 31))

    sums = {"mse": 0.0, "ssim": 0.0, "bce": 0.0, "dice": 0.0, "total": 0.0}
    n_batches = 0
    for b0 in range(0, len(order), cfg.batch_size):
        idxs = order[b0:b0 + cfg.batch_size]
        samples = []
        for i in idxs:
            rng = np.random.default_rng((cfg.seed, epoch, int(i)))
            samples.append(augment_sample(dataset[int(i)], rng, cfg.augment))
        refs, query, mask = collate(samples)
        refs = patch_diffuse_batch(refs, cfg.p_d, model.schedule, pd_rng)

        total, bundle = compute_losses(model, refs, query, mask, cfg.loss_weights)
        if not math.isfinite(bundle.total):
            ids = [dataset.sample_id(int(i)) for i in idxs]
            raise RuntimeError(f"non-finite loss {bundle.total} on batch {ids}")
        optimizer.zero_grad()
        total.backward()
        if cfg.grad_clip is not None:
            nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        optimizer.step()

        for k, v in bundle.to_dict().items():
            sums[k] += v
        n_batches += 1
    return {k: v / n_batches for k, v in sums.items()}


def validate(model: DiffUNet, dataset: SampleDataset, eval_crop: int = 512) -> dict:
    """Mean Dice/IoU over the dataset under the deterministic eval protocol."""
    records = metrics.eval_samples(model, dataset, eval_crop=eval_crop)
    return {
        "dice": float(np.mean([r.dice for r in records])),
        "iou": float(np.mean([r.iou for r in records])),
        "recon_mse": float(np.mean([r.recon_mse for r in records])),
    }


def fit_phase(model: DiffUNet, train_ds: SampleDataset, val_ds: SampleDataset,
              cfg: TrainConfig, out_dir: str | Path, phase_num: int) -> Path:
    """Train one phase, checkpointing every epoch and tracking best val Dice.

    Returns the path of the best checkpoint (phase{N}_best.ckpt).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "metrics.jsonl"
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr,
                                  weight_decay=cfg.weight_decay)
    best_dice = -1.0
    best_path = out_dir / f"phase{phase_num}_best.ckpt"
    for epoch in range(1, cfg.epochs + 1):
        stats = train_epoch(model, train_ds, optimizer, cfg, epoch)
        val = validate(model, val_ds, cfg.eval_crop)
        row = {"phase": phase_num, "epoch": epoch,
               **{f"loss_{k}": v for k, v in stats.items()},
               "val_dice": val["dice"], "val_iou": val["iou"]}
        with open(log_path, "a") as fh:
            fh.write(json.dumps(row) + "\n")
        logger.info("phase %d epoch %d: loss %.4f val dice %.4f",
                    phase_num, epoch, stats["total"], val["dice"])
        extra = {"phase": phase_num, "epoch": epoch, "val_dice": val["dice"],
                 "val_iou": val["iou"], "train_config": asdict(cfg)}
        if cfg.save_every_epoch:
            save_checkpoint(model, out_dir / f"phase{phase_num}_epoch{epoch}.ckpt", extra)
        if val["dice"] > best_dice:
            best_dice = val["dice"]
            save_checkpoint(model, best_path, extra)
    if not best_path.exists():
        raise RuntimeError(f"phase {phase_num} produced no checkpoint")
    return best_path


def fit_two_phase(net_config: NetworkConfig, synthetic_ds: SampleDataset,
                  weak_ds: SampleDataset, val_ds: SampleDataset,
                  cfg1: TrainConfig, cfg2: TrainConfig,
                  out_dir: str | Path) -> tuple[Path, Path]:
    """Phase 1 from random init on synthetic data, phase 2 fine-tunes the
    phase-1 best on weak labels with weight decay 0."""
    if cfg2.weight_decay != 0.0:
        raise ValueError("phase 2 must run with weight_decay=0")
    model = DiffUNet(net_config)
    best1 = fit_phase(model, synthetic_ds, val_ds, cfg1, out_dir, phase_num=1)
    model, _ = load_checkpoint(best1)
    best2 = fit_phase(model, weak_ds, val_ds, cfg2, out_dir, phase_num=2)
    return best1, best2
