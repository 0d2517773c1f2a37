"""Segmentation metrics, evaluation protocol, and report formatting.

Evaluation is deterministic: every sample gets a single center crop whose
size is 512 at the 1024 reference scale and shrinks proportionally for
smaller frames, resized to the network input. Dice and IoU are computed per
sample at the network resolution and averaged at dataset or per-video scope.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np
import torch

from . import data
from .model import DiffUNet

PINK = (255, 105, 180)


def _to_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(x, -60.0, 60.0)))


def dice_iou(pred_logits, gt_mask, threshold: float = 0.5) -> tuple[float, float]:
    """Hard Dice and IoU of sigmoid(logits) > threshold against a binary mask.

    Both empty -> (1.0, 1.0); exactly one empty -> (0.0, 0.0).
    """
    logits = _to_numpy(pred_logits)
    gt = _to_numpy(gt_mask)
    if logits.shape != gt.shape:
        raise ValueError(f"shape mismatch: {logits.shape} vs {gt.shape}")
    if not np.all((gt == 0) | (gt == 1)):
        raise ValueError("gt mask must be binary")
    p = _sigmoid(logits) > threshold
    g = gt.astype(bool)
    np_, ng = int(p.sum()), int(g.sum())
    if np_ == 0 and ng == 0:
        return 1.0, 1.0
    inter = int((p & g).sum())
    dice = 2.0 * inter / (np_ + ng)
    iou = inter / (np_ + ng - inter)
    return float(dice), float(iou)


def dice_from_iou(iou: float) -> float:
    """The per-sample identity 2*iou/(1+iou); does not hold for averaged rows."""
    return 2.0 * iou / (1.0 + iou)


# ---------------------------------------------------------------------------
# Evaluation protocol
# ---------------------------------------------------------------------------

def protocol_crop_size(frame_hw: tuple[int, int], eval_crop: int = 512,
                       reference: int = 1024) -> int:
    """Center-crop size: ``eval_crop`` at the reference scale, proportionally
    smaller when the frame's short side is below the reference."""
    short = min(frame_hw)
    return int(round(eval_crop * min(short, reference) / reference))


def _resize(img: np.ndarray, size: int, nearest: bool) -> np.ndarray:
    if img.shape[0] == size and img.shape[1] == size:
        return img
    if nearest:
        interp = cv2.INTER_NEAREST
    else:
        interp = cv2.INTER_AREA if img.shape[0] > size else cv2.INTER_LINEAR
    return cv2.resize(img, (size, size), interpolation=interp)


def prepare_eval_sample(sample: data.Sample, input_size: int,
                        eval_crop: int = 512) -> data.Sample:
    """Center-crop all frames (and mask) at the protocol size, then resize to
    the network input. Masks go nearest-neighbor and stay binary."""
    crop = protocol_crop_size(sample.query_frame.shape[:2], eval_crop)
    frames = [
        _resize(data.center_crop(f, crop), input_size, nearest=False).astype(np.float32)
        for f in list(sample.references) + [sample.query_frame]
    ]
    mask = None
    if sample.query_mask is not None:
        mask = data.center_crop(sample.query_mask, crop)
        mask = (_resize(mask, input_size, nearest=True) > 0).astype(np.uint8)
    return data.Sample(frames[:-1], frames[-1], mask, sample.clip_id, sample.query_index)


@dataclass
class EvalRecord:
    clip_id: str
    query_index: int
    dice: float
    iou: float
    recon_mse: float
    baseline_mse: float  # copy-last-reference-frame predictor
    gt_empty: bool


def eval_samples(model: DiffUNet, dataset, eval_crop: int = 512,
                 threshold: float = 0.5) -> list[EvalRecord]:
    """Deterministic per-sample evaluation over anything indexable that
    yields samples with masks."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    size = model.config.input_size
    was_training = model.training
    model.eval()
    records = []
    with torch.no_grad():
        for i in range(len(dataset)):
            sample = dataset[i]
            if sample.query_mask is None:
                raise ValueError(f"sample {sample.clip_id}:{sample.query_index} has no mask")
            prep = prepare_eval_sample(sample, size, eval_crop)
            refs = torch.stack([
                torch.from_numpy(r).permute(2, 0, 1) for r in prep.references
            ])[None]
            out = model(refs)
            d, j = dice_iou(out.seg_logits[0, 0].numpy(), prep.query_mask, threshold)
            recon = out.recon[0].permute(1, 2, 0).numpy()
            mse = float(np.mean((recon - prep.query_frame) ** 2))
            base = float(np.mean((prep.references[-1] - prep.query_frame) ** 2))
            records.append(EvalRecord(
                clip_id=prep.clip_id, query_index=prep.query_index,
                dice=d, iou=j, recon_mse=mse, baseline_mse=base,
                gt_empty=not bool(prep.query_mask.any()),
            ))
    if was_training:
        model.train()
    return records


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class MetricRow:
    name: str
    n_samples: int
    mean_iou: float
    mean_dice: float


@dataclass
class MetricReport:
    scope: str  # "dataset" or "per_video"
    rows: list[MetricRow]
    threshold: float

    def to_dict(self) -> dict:
        return {
            "scope": self.scope,
            "threshold": self.threshold,
            "rows": [vars(r) for r in self.rows],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def format_table(self) -> str:
        name_w = max([len(r.name) for r in self.rows] + [len("name")])
        lines = [f"{'name':<{name_w}}  {'n':>6}  {'iou':>7}  {'dice':>7}"]
        for r in self.rows:
            lines.append(
                f"{r.name:<{name_w}}  {r.n_samples:>6}  {r.mean_iou:>7.4f}  {r.mean_dice:>7.4f}"
            )
        return "\n".join(lines)


def make_report(records: Sequence[EvalRecord], scope: str = "dataset",
                threshold: float = 0.5, skip_empty: bool = False) -> MetricReport:
    """Aggregate per-sample records. ``skip_empty`` drops samples whose ground
    truth mask is empty (they score 1.0 when the prediction is also empty)."""
    if scope not in ("dataset", "per_video"):
        raise ValueError(f"unknown scope {scope!r}")
    kept = [r for r in records if not (skip_empty and r.gt_empty)]
    rows = []
    if scope == "dataset":
        groups = {"all": kept} if kept else {}
    else:
        groups = {}
        for r in kept:
            groups.setdefault(r.clip_id, []).append(r)
    for name in sorted(groups):
        rs = groups[name]
        rows.append(MetricRow(
            name=name, n_samples=len(rs),
            mean_iou=float(np.mean([r.iou for r in rs])),
            mean_dice=float(np.mean([r.dice for r in rs])),
        ))
    return MetricReport(scope=scope, rows=rows, threshold=threshold)


def evaluate(model: DiffUNet, dataset, eval_crop: int = 512, threshold: float = 0.5,
             scope: str = "dataset", skip_empty: bool = False) -> MetricReport:
    records = eval_samples(model, dataset, eval_crop, threshold)
    return make_report(records, scope, threshold, skip_empty)


# ---------------------------------------------------------------------------
# Prediction emission
# ---------------------------------------------------------------------------

def overlay_mask(frame: np.ndarray, mask: np.ndarray, alpha: float = 0.5,
                 color: tuple[int, int, int] = PINK) -> np.ndarray:
    """Blend ``color`` over the frame where mask==1; elsewhere unchanged."""
    data.check_frame(frame)
    data.check_mask(mask)
    tint = np.array(color, dtype=np.float32) / 255.0
    out = frame.copy()
    sel = mask.astype(bool)
    out[sel] = (1.0 - alpha) * out[sel] + alpha * tint
    return out


def predict_and_overlay(model: DiffUNet, sample: data.Sample, out_dir: str | Path,
                        threshold: float = 0.5, eval_crop: int = 512) -> dict[str, Path]:
    """Run one sample through the eval protocol and write mask, predicted
    frame, and pink-overlay images. Returns the written paths."""
    if sample.tau != model.config.tau:
        raise ValueError(f"sample has {sample.tau} references, model expects {model.config.tau}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    prep = prepare_eval_sample(sample, model.config.input_size, eval_crop)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        refs = torch.stack([
            torch.from_numpy(r).permute(2, 0, 1) for r in prep.references
        ])[None]
        out = model(refs)
    if was_training:
        model.train()
    pred = (_sigmoid(out.seg_logits[0, 0].numpy()) > threshold).astype(np.uint8)
    recon = np.clip(out.recon[0].permute(1, 2, 0).numpy(), 0.0, 1.0)
    paths = {
        "mask": out_dir / "mask.png",
        "recon": out_dir / "recon.png",
        "overlay": out_dir / "overlay.png",
    }
    data.save_mask(paths["mask"], pred)
    data.save_frame(paths["recon"], recon)
    data.save_frame(paths["overlay"], overlay_mask(prep.query_frame, pred))
    return paths
