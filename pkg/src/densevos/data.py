"""Dataset model: frames, masks, samples, clip manifests, windowing and splits.

Frames are float32 H x W x 3 arrays in [0, 1]; masks are uint8 H x W arrays
in {0, 1}. Both are stored on disk as 8-bit PNG. A dataset is a directory with
one ``manifest.json`` plus ``clips/<clip_id>/frames/frame_%06d.png`` (and
``.../masks/frame_%06d.png`` when the clip is annotated).
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterator, Optional, Sequence

import cv2
import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

LABEL_KINDS = ("manual", "weak", "synthetic", "none")

FRAME_PATTERN = "frame_%06d.png"


# ---------------------------------------------------------------------------
# Frame / mask I/O
# ---------------------------------------------------------------------------

def load_frame(path: str | Path) -> np.ndarray:
    """Load an RGB image file as float32 in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def save_frame(path: str | Path, frame: np.ndarray) -> None:
    """Save a float [0, 1] H x W x 3 frame as an 8-bit PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.clip(np.rint(frame * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_mask(path: str | Path) -> np.ndarray:
    """Load a mask file, binarizing stored values > 127 to 1."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr > 127).astype(np.uint8)


def save_mask(path: str | Path, mask: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = (np.asarray(mask) > 0).astype(np.uint8) * 255
    Image.fromarray(arr, mode="L").save(path)


def check_frame(frame: np.ndarray) -> None:
    """Validate the frame convention (H x W x 3 float32 in [0, 1])."""
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise ValueError(f"frame must be HxWx3, got shape {frame.shape}")
    if frame.dtype != np.float32:
        raise ValueError(f"frame dtype must be float32, got {frame.dtype}")
    if frame.min() < 0.0 or frame.max() > 1.0:
        raise ValueError("frame values must lie in [0, 1]")


def check_mask(mask: np.ndarray) -> None:
    if mask.ndim != 2:
        raise ValueError(f"mask must be HxW, got shape {mask.shape}")
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("mask values must be binary {0, 1}")


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass
class Sample:
    """One training/evaluation unit: ordered reference frames plus a query.

    ``references`` holds the context window of consecutive frames that
    immediately precede the query frame (oldest first). ``query_mask`` is
    None for unlabeled inference samples.
    """

    references: list[np.ndarray]
    query_frame: np.ndarray
    query_mask: Optional[np.ndarray] = None
    clip_id: str = ""
    query_index: int = -1

    @property
    def tau(self) -> int:
        return len(self.references)

    def validate(self) -> None:
        if len(self.references) < 1:
            raise ValueError("sample needs at least one reference frame")
        shape = self.query_frame.shape
        for ref in self.references:
            if ref.shape != shape:
                raise ValueError("reference/query frame shapes differ")
        if self.query_mask is not None and self.query_mask.shape != shape[:2]:
            raise ValueError("query mask shape does not match query frame")


@dataclass
class ClipManifest:
    """On-disk description of one video clip and its labels."""

    clip_id: str
    frame_paths: list[str]
    mask_paths: list[str] = field(default_factory=list)
    source_group: str = ""
    label_kind: str = "none"

    def __post_init__(self) -> None:
        if self.label_kind not in LABEL_KINDS:
            raise ValueError(f"label_kind must be one of {LABEL_KINDS}, got {self.label_kind!r}")
        if self.mask_paths and len(self.mask_paths) != len(self.frame_paths):
            raise ValueError(
                f"clip {self.clip_id!r}: mask count {len(self.mask_paths)} must be 0 "
                f"or match frame count {len(self.frame_paths)}"
            )

    @property
    def num_frames(self) -> int:
        return len(self.frame_paths)

    @property
    def has_masks(self) -> bool:
        return bool(self.mask_paths)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ClipManifest":
        return cls(
            clip_id=d["clip_id"],
            frame_paths=list(d["frame_paths"]),
            mask_paths=list(d.get("mask_paths") or []),
            source_group=d.get("source_group", ""),
            label_kind=d.get("label_kind", "none"),
        )


# ---------------------------------------------------------------------------
# Manifest I/O
# ---------------------------------------------------------------------------

def save_manifest(path: str | Path, clips: Sequence[ClipManifest]) -> None:
    """Write a dataset manifest. Paths are stored relative to the manifest's
    directory so the dataset stays relocatable."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ids = [c.clip_id for c in clips]
    if len(set(ids)) != len(ids):
        raise ValueError("clip_id values must be unique within a manifest")
    base = path.parent.resolve()

    def rel(p: str) -> str:
        return os.path.relpath(Path(p).resolve(), base)

    payload = {"clips": []}
    for c in clips:
        d = c.to_dict()
        d["frame_paths"] = [rel(p) for p in c.frame_paths]
        d["mask_paths"] = [rel(p) for p in c.mask_paths]
        payload["clips"].append(d)
    path.write_text(json.dumps(payload, indent=2))


def load_manifest(path: str | Path) -> list[ClipManifest]:
    """Read a dataset manifest, resolving relative paths against its directory."""
    path = Path(path)
    payload = json.loads(path.read_text())
    root = path.parent
    clips = []
    for d in payload["clips"]:
        clip = ClipManifest.from_dict(d)
        clip.frame_paths = [_resolve(root, p) for p in clip.frame_paths]
        clip.mask_paths = [_resolve(root, p) for p in clip.mask_paths]
        clips.append(clip)
    ids = [c.clip_id for c in clips]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate clip_id in manifest {path}")
    return clips


def _resolve(root: Path, p: str) -> str:
    q = Path(p)
    return str(q if q.is_absolute() else root / q)


def write_clip(
    root: str | Path,
    clip_id: str,
    frames: Sequence[np.ndarray],
    masks: Optional[Sequence[np.ndarray]] = None,
    source_group: str = "",
    label_kind: str = "none",
) -> ClipManifest:
    """Write frames (and optional masks) under the standard dataset layout.

    Returns a manifest entry whose paths resolve as written; saving it with
    :func:`save_manifest` relativizes them against the manifest location.
    """
    root = Path(root)
    if masks is not None and len(masks) != len(frames):
        raise ValueError("number of masks must match number of frames")
    frame_paths, mask_paths = [], []
    for i, frame in enumerate(frames):
        p = root / f"clips/{clip_id}/frames/{FRAME_PATTERN % i}"
        save_frame(p, frame)
        frame_paths.append(str(p))
    if masks is not None:
        for i, mask in enumerate(masks):
            p = root / f"clips/{clip_id}/masks/{FRAME_PATTERN % i}"
            save_mask(p, mask)
            mask_paths.append(str(p))
    return ClipManifest(
        clip_id=clip_id,
        frame_paths=frame_paths,
        mask_paths=mask_paths,
        source_group=source_group or clip_id,
        label_kind=label_kind,
    )


# ---------------------------------------------------------------------------
# Windowing
# ---------------------------------------------------------------------------

def window_query_indices(num_frames: int, tau: int, stride: int = 1) -> list[int]:
    """Query indices for sliding windows: t in [tau, T-1] stepping by stride.

    For T >= tau+1 the count is floor((T - tau - 1)/stride) + 1.
    """
    if tau < 1:
        raise ValueError("tau must be >= 1")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    return list(range(tau, num_frames, stride))


def load_sample(clip: ClipManifest, t: int, tau: int) -> Sample:
    """Load the sample whose query frame is ``clip`` frame index ``t``."""
    if t < tau or t >= clip.num_frames:
        raise ValueError(f"query index {t} out of range for tau={tau}, T={clip.num_frames}")
    refs = [load_frame(clip.frame_paths[r]) for r in range(t - tau, t)]
    query = load_frame(clip.frame_paths[t])
    mask = load_mask(clip.mask_paths[t]) if clip.has_masks else None
    return Sample(references=refs, query_frame=query, query_mask=mask,
                  clip_id=clip.clip_id, query_index=t)


def window_samples(clip: ClipManifest, tau: int, stride: int = 1) -> Iterator[Sample]:
    """Lazily yield samples from a clip via a sliding context window.

    A clip shorter than tau+1 frames yields nothing and logs a warning
    instead of raising.
    """
    indices = window_query_indices(clip.num_frames, tau, stride)
    if not indices:
        logger.warning(
            "clip %r has %d frames, fewer than tau+1=%d; no samples",
            clip.clip_id, clip.num_frames, tau + 1,
        )
        return
    for t in indices:
        yield load_sample(clip, t, tau)


# ---------------------------------------------------------------------------
# Group-wise split
# ---------------------------------------------------------------------------

def group_split(
    manifests: Sequence[ClipManifest],
    fractions: Sequence[float],
    seed: int,
) -> tuple[list[ClipManifest], list[ClipManifest], list[ClipManifest]]:
    """Split clips into (train, valid, test) without breaking source groups.

    All clips sharing a ``source_group`` land in the same partition.
    Partition sizes approximate ``fractions`` by clip count; the assignment
    is deterministic given ``seed``.
    """
    if len(fractions) != 3:
        raise ValueError("fractions must have exactly 3 entries")
    if any(f <= 0 for f in fractions):
        raise ValueError("fractions must be positive")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")

    groups: dict[str, list[ClipManifest]] = {}
    for m in manifests:
        groups.setdefault(m.source_group, []).append(m)
    if len(groups) < 3:
        raise ValueError(
            f"group-wise split needs at least 3 distinct source groups, got {len(groups)}"
        )

    total = len(manifests)
    targets = _largest_remainder([f * total for f in fractions], total)

    rng = np.random.default_rng(seed)
    names = sorted(groups)
    order = rng.permutation(len(names))

    parts: tuple[list[ClipManifest], ...] = ([], [], [])
    assigned = [0, 0, 0]
    for gi in order:
        clips = groups[names[gi]]
        # place the group where the remaining deficit is largest
        deficits = [targets[k] - assigned[k] for k in range(3)]
        k = int(np.argmax(deficits))
        parts[k].extend(clips)
        assigned[k] += len(clips)
    return parts


def _largest_remainder(raw: Sequence[float], total: int) -> list[int]:
    floors = [int(np.floor(x)) for x in raw]
    remainder = total - sum(floors)
    order = np.argsort([-(x - f) for x, f in zip(raw, floors)])
    for i in range(remainder):
        floors[order[i]] += 1
    return floors


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------

def resize_then_center_crop(frame: np.ndarray, target_height: int, crop: int) -> np.ndarray:
    """Scale the frame so its height equals ``target_height`` (aspect ratio
    preserved, width rounded to nearest int), then take a centered crop x crop
    window. Off-by-one centering ties break toward the top-left."""
    h, w = frame.shape[:2]
    if crop > target_height:
        raise ValueError(f"crop {crop} exceeds target_height {target_height}")
    scaled_w = int(round(w * target_height / h))
    if scaled_w < crop:
        raise ValueError(f"scaled width {scaled_w} smaller than crop {crop}")
    if (target_height, scaled_w) != (h, w):
        interp = cv2.INTER_AREA if target_height < h else cv2.INTER_LINEAR
        frame = cv2.resize(frame, (scaled_w, target_height), interpolation=interp)
    y0 = (target_height - crop) // 2
    x0 = (scaled_w - crop) // 2
    return frame[y0:y0 + crop, x0:x0 + crop]


def center_crop(img: np.ndarray, crop: int) -> np.ndarray:
    """Centered square crop, ties toward top-left."""
    h, w = img.shape[:2]
    if crop > h or crop > w:
        raise ValueError(f"crop {crop} exceeds image size {h}x{w}")
    y0 = (h - crop) // 2
    x0 = (w - crop) // 2
    return img[y0:y0 + crop, x0:x0 + crop]
