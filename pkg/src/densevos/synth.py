"""Procedural synthesis of computationally annotated video clips.

Real object cutouts (and look-alike "fake" cutouts stamped from background
regions with the same silhouettes) are overlaid on windows of background
video, then moved frame to frame with per-object motion plus a global
wind-like sway. Masks are co-generated: they are exactly the union of the
real objects' rendered silhouettes, and fake objects never touch the mask.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import cv2
import numpy as np
from PIL import Image

from . import data

logger = logging.getLogger(__name__)


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# Cutouts
# ---------------------------------------------------------------------------

@dataclass
class Cutout:
    """A color patch plus binary alpha silhouette, trimmed to a tight bbox."""

    rgba: np.ndarray  # h x w x 4 float32; rgb in [0,1], alpha in {0,1}
    kind: str = "real"  # "real" or "fake"
    source_id: str = ""

    def __post_init__(self) -> None:
        if self.kind not in ("real", "fake"):
            raise ValueError(f"cutout kind must be 'real' or 'fake', got {self.kind!r}")
        if self.rgba.ndim != 3 or self.rgba.shape[2] != 4:
            raise ValueError(f"rgba must be h x w x 4, got shape {self.rgba.shape}")

    @property
    def alpha(self) -> np.ndarray:
        return self.rgba[..., 3]

    @property
    def size(self) -> tuple[int, int]:
        return self.rgba.shape[0], self.rgba.shape[1]


def extract_cutouts(frame: np.ndarray, mask: np.ndarray) -> list[Cutout]:
    """One cutout per 8-connected component of the mask.

    Components touching the image border are kept. An empty mask yields [].
    """
    data.check_frame(frame)
    data.check_mask(mask)
    if mask.shape != frame.shape[:2]:
        raise ValueError("mask and frame shapes differ")
    n, labels, stats, _ = cv2.connectedComponentsWithStats(
        mask.astype(np.uint8), connectivity=8
    )
    cutouts = []
    for i in range(1, n):
        x, y, w, h = stats[i, cv2.CC_STAT_LEFT], stats[i, cv2.CC_STAT_TOP], \
            stats[i, cv2.CC_STAT_WIDTH], stats[i, cv2.CC_STAT_HEIGHT]
        comp = (labels[y:y + h, x:x + w] == i).astype(np.float32)
        rgba = np.dstack([frame[y:y + h, x:x + w].astype(np.float32), comp])
        cutouts.append(Cutout(rgba=rgba, kind="real", source_id=f"cc{i:03d}"))
    return cutouts


def extract_fake_cutouts(
    frame: np.ndarray,
    mask: Optional[np.ndarray],
    shapes: Sequence[Cutout],
    seed,
    max_trials: int = 100,
) -> list[Cutout]:
    """Stamp each shape's silhouette at a random location that avoids every
    real-object pixel, copying the frame's pixels under the silhouette.

    Shapes with no valid placement after ``max_trials`` rejection draws are
    skipped with a warning.
    """
    data.check_frame(frame)
    H, W = frame.shape[:2]
    if mask is None:
        mask = np.zeros((H, W), dtype=np.uint8)
    data.check_mask(mask)
    rng = _as_rng(seed)
    fakes = []
    for si, shape in enumerate(shapes):
        h, w = shape.size
        if h > H or w > W:
            raise ValueError(f"shape {si} ({h}x{w}) larger than frame ({H}x{W})")
        alpha = shape.alpha > 0.5
        placed = False
        for _ in range(max_trials):
            y = int(rng.integers(0, H - h + 1))
            x = int(rng.integers(0, W - w + 1))
            if not (mask[y:y + h, x:x + w].astype(bool) & alpha).any():
                rgba = np.dstack([
                    frame[y:y + h, x:x + w].astype(np.float32),
                    alpha.astype(np.float32),
                ])
                fakes.append(Cutout(rgba=rgba, kind="fake",
                                    source_id=f"{shape.source_id}@{x},{y}"))
                placed = True
                break
        if not placed:
            logger.warning(
                "no mask-free placement for shape %d (%dx%d) after %d trials; skipped",
                si, h, w, max_trials,
            )
    return fakes


@dataclass
class CutoutBank:
    """Pools of real and fake cutouts the synthesizer samples from."""

    real: list[Cutout] = field(default_factory=list)
    fake: list[Cutout] = field(default_factory=list)

    def max_dim(self) -> int:
        dims = [max(c.size) for c in self.real + self.fake]
        return max(dims) if dims else 0

    def save(self, bank_dir: str | Path) -> None:
        bank_dir = Path(bank_dir)
        for kind in ("real", "fake"):
            sub = bank_dir / kind
            sub.mkdir(parents=True, exist_ok=True)
            for i, c in enumerate(getattr(self, kind)):
                arr = np.clip(np.rint(c.rgba * 255.0), 0, 255).astype(np.uint8)
                Image.fromarray(arr, mode="RGBA").save(sub / f"cutout_{i:04d}.png")

    @classmethod
    def load(cls, bank_dir: str | Path) -> "CutoutBank":
        bank_dir = Path(bank_dir)
        bank = cls()
        for kind in ("real", "fake"):
            sub = bank_dir / kind
            if not sub.is_dir():
                continue
            for p in sorted(sub.glob("*.png")):
                with Image.open(p) as im:
                    arr = np.asarray(im.convert("RGBA"), dtype=np.float32) / 255.0
                rgba = arr.copy()
                rgba[..., 3] = (arr[..., 3] > 0.5).astype(np.float32)
                getattr(bank, kind).append(Cutout(rgba=rgba, kind=kind, source_id=p.stem))
        return bank


def build_bank(
    annotated: Sequence[tuple[np.ndarray, np.ndarray]],
    seed,
    fake_trials: int = 100,
) -> CutoutBank:
    """Extract real cutouts from (frame, mask) pairs, then reuse each frame's
    silhouettes as cookie-cutters for fake cutouts from the same frame."""
    rng = _as_rng(seed)
    bank = CutoutBank()
    for frame, mask in annotated:
        reals = extract_cutouts(frame, mask)
        bank.real.extend(reals)
        bank.fake.extend(extract_fake_cutouts(frame, mask, reals, rng, fake_trials))
    return bank


# ---------------------------------------------------------------------------
# Scene state
# ---------------------------------------------------------------------------

@dataclass
class ObjectState:
    """Motion/appearance state of one overlaid object."""

    cutout: Cutout
    position: tuple[float, float]  # (x, y) center, real pixels
    velocity: tuple[float, float]  # px/frame
    orientation: float             # degrees
    angular_rate: float            # degrees/frame
    scale: float
    color_jitter_seed: int


@dataclass
class SceneState:
    """All objects plus the frame-level motion state of one clip.

    Composition order is the object list order (fakes first, reals after,
    so reals composite on top) and is fixed for the clip's lifetime.
    """

    objects: list[ObjectState]
    global_velocity: tuple[float, float]  # sway amplitude vector, px/frame
    global_period: float                   # frames per sway cycle
    global_phase: float                    # current oscillation phase
    frame_index: int
    rng: np.random.Generator
    bank: CutoutBank = field(default_factory=CutoutBank)  # respawn source


@dataclass
class SynthConfig:
    clip_length: int = 60
    canvas: int = 1024
    n_real: tuple[int, int] = (60, 140)
    n_fake: tuple[int, int] = (20, 60)
    speed: tuple[float, float] = (0.0, 2.0)            # px/frame
    direction_jitter_deg: float = 5.0                  # per-step sigma
    angular_rate: tuple[float, float] = (-2.0, 2.0)    # deg/frame
    scale: tuple[float, float] = (0.5, 1.5)
    global_amplitude: tuple[float, float] = (0.0, 3.0)  # px/frame
    global_period: tuple[float, float] = (30.0, 90.0)   # frames
    color_jitter: float = 0.1
    fake_placement_trials: int = 100
    seed: Optional[int] = None

    def __post_init__(self) -> None:
        if self.clip_length < 2:
            raise ValueError("clip_length must be >= 2")
        if self.canvas < 1:
            raise ValueError("canvas must be positive")

    @classmethod
    def default_for_canvas(cls, canvas: int, **overrides) -> "SynthConfig":
        """Defaults with object counts scaled by (canvas/1024)^2."""
        s = (canvas / 1024.0) ** 2
        cfg = dict(
            canvas=canvas,
            n_real=(max(1, round(60 * s)), max(1, round(140 * s))),
            n_fake=(max(0, round(20 * s)), max(1, round(60 * s))),
        )
        cfg.update(overrides)
        return cls(**cfg)


def _color_gains(seed: int, strength: float) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return (1.0 + rng.uniform(-strength, strength, size=3)).astype(np.float32)


def _random_object(
    rng: np.random.Generator, config: SynthConfig, cutout: Cutout
) -> ObjectState:
    pos = (float(rng.uniform(0, config.canvas)), float(rng.uniform(0, config.canvas)))
    speed = float(rng.uniform(*config.speed))
    theta = float(rng.uniform(0, 2 * math.pi))
    return ObjectState(
        cutout=cutout,
        position=pos,
        velocity=(speed * math.cos(theta), speed * math.sin(theta)),
        orientation=float(rng.uniform(0, 360.0)),
        angular_rate=float(rng.uniform(*config.angular_rate)),
        scale=float(rng.uniform(*config.scale)),
        color_jitter_seed=int(rng.integers(0, 2**31 - 1)),
    )


def init_scene(config: SynthConfig, bank: CutoutBank, seed) -> SceneState:
    """Draw object counts, placements, motions, and the global sway state."""
    rng = _as_rng(seed)
    n_real = int(rng.integers(config.n_real[0], config.n_real[1] + 1))
    n_fake = int(rng.integers(config.n_fake[0], config.n_fake[1] + 1))
    if n_real > 0 and not bank.real:
        raise ValueError("real cutout bank is empty but n_real > 0")
    if n_fake > 0 and not bank.fake:
        raise ValueError("fake cutout bank is empty but n_fake > 0")
    if bank.max_dim() >= config.canvas:
        raise ValueError(
            f"canvas {config.canvas} must exceed largest cutout dimension {bank.max_dim()}"
        )

    objects = []
    for _ in range(n_fake):  # fakes first: reals composite on top
        objects.append(_random_object(rng, config, bank.fake[rng.integers(len(bank.fake))]))
    for _ in range(n_real):
        objects.append(_random_object(rng, config, bank.real[rng.integers(len(bank.real))]))

    amp = float(rng.uniform(*config.global_amplitude))
    theta = float(rng.uniform(0, 2 * math.pi))
    return SceneState(
        objects=objects,
        global_velocity=(amp * math.cos(theta), amp * math.sin(theta)),
        global_period=float(rng.uniform(*config.global_period)),
        global_phase=float(rng.uniform(0, 2 * math.pi)),
        frame_index=0,
        rng=rng,
        bank=bank,
    )


def _half_extents(obj: ObjectState) -> tuple[float, float]:
    """Axis-aligned half extents of the rotated, scaled cutout."""
    h, w = obj.cutout.size
    rad = math.radians(obj.orientation)
    c, s = abs(math.cos(rad)), abs(math.sin(rad))
    return obj.scale * (w * c + h * s) / 2.0, obj.scale * (h * c + w * s) / 2.0


def _fully_outside(obj: ObjectState, canvas: int) -> bool:
    hx, hy = _half_extents(obj)
    x, y = obj.position
    return x + hx < 0 or x - hx > canvas or y + hy < 0 or y - hy > canvas


def step_scene(state: SceneState, config: SynthConfig) -> SceneState:
    """Advance the scene one frame.

    Each object moves by its own velocity plus the shared sway displacement;
    velocity direction receives a small Gaussian jitter and orientation
    advances by the angular rate. Objects whose silhouette has fully left
    the canvas are replaced in place by freshly sampled real cutouts, so the
    object count never changes.
    """
    rng = state.rng
    phase = state.global_phase + 2 * math.pi / state.global_period
    sway = math.sin(phase)
    gdx = state.global_velocity[0] * sway
    gdy = state.global_velocity[1] * sway

    sigma = math.radians(config.direction_jitter_deg)
    new_objects = []
    for obj in state.objects:
        jitter = float(rng.normal(0.0, sigma)) if sigma > 0 else 0.0
        cj, sj = math.cos(jitter), math.sin(jitter)
        vx, vy = obj.velocity
        vx, vy = vx * cj - vy * sj, vx * sj + vy * cj
        moved = replace(
            obj,
            position=(obj.position[0] + vx + gdx, obj.position[1] + vy + gdy),
            velocity=(vx, vy),
            orientation=obj.orientation + obj.angular_rate,
        )
        if _fully_outside(moved, config.canvas):
            pool = state.bank.real if state.bank.real else state.bank.fake
            if pool:  # keep the object count constant
                moved = _random_object(rng, config, pool[rng.integers(len(pool))])
        new_objects.append(moved)

    return SceneState(
        objects=new_objects,
        global_velocity=state.global_velocity,
        global_period=state.global_period,
        global_phase=phase,
        frame_index=state.frame_index + 1,
        rng=rng,
        bank=state.bank,
    )


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def render_object(obj: ObjectState, color_strength: float) -> tuple[np.ndarray, np.ndarray]:
    """Rotate/scale/color-jitter one cutout.

    Returns (rgb, alpha): color resampled bilinearly, alpha nearest-neighbor
    and re-binarized so masks stay strictly binary.
    """
    rgb = obj.cutout.rgba[..., :3] * _color_gains(obj.color_jitter_seed, color_strength)
    np.clip(rgb, 0.0, 1.0, out=rgb)
    alpha = obj.cutout.rgba[..., 3]
    h, w = alpha.shape

    if obj.orientation % 360.0 == 0.0 and obj.scale == 1.0:
        return rgb, alpha > 0.5

    rad = math.radians(obj.orientation)
    c, s = abs(math.cos(rad)), abs(math.sin(rad))
    out_w = max(1, math.ceil(obj.scale * (w * c + h * s)))
    out_h = max(1, math.ceil(obj.scale * (h * c + w * s)))
    M = cv2.getRotationMatrix2D((w / 2.0, h / 2.0), obj.orientation, obj.scale)
    M[0, 2] += out_w / 2.0 - w / 2.0
    M[1, 2] += out_h / 2.0 - h / 2.0
    rgb_t = cv2.warpAffine(rgb, M, (out_w, out_h), flags=cv2.INTER_LINEAR,
                           borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    alpha_t = cv2.warpAffine(alpha, M, (out_w, out_h), flags=cv2.INTER_NEAREST,
                             borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    return rgb_t, alpha_t > 0.5


def paste_window(position: tuple[float, float], size: tuple[int, int],
                 canvas_hw: tuple[int, int]):
    """Destination/source slices for pasting a patch centered at ``position``
    (rounded to integer pixels), clipped to the canvas. None if invisible."""
    ph, pw = size
    H, W = canvas_hw
    top = int(round(position[1])) - ph // 2
    left = int(round(position[0])) - pw // 2
    y0, y1 = max(top, 0), min(top + ph, H)
    x0, x1 = max(left, 0), min(left + pw, W)
    if y0 >= y1 or x0 >= x1:
        return None
    dst = (slice(y0, y1), slice(x0, x1))
    src = (slice(y0 - top, y1 - top), slice(x0 - left, x1 - left))
    return dst, src


def object_silhouette(obj: ObjectState, canvas_hw: tuple[int, int],
                      color_strength: float = 0.0) -> np.ndarray:
    """The object's rendered alpha on a blank canvas (uint8 {0,1})."""
    _, alpha = render_object(obj, color_strength)
    out = np.zeros(canvas_hw, dtype=np.uint8)
    win = paste_window(obj.position, alpha.shape, canvas_hw)
    if win is not None:
        dst, src = win
        out[dst][alpha[src]] = 1
    return out


def composite(background: np.ndarray, state: SceneState,
              color_strength: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Render the scene onto a background frame.

    Objects are pasted in list order with hard (binary) alpha, so pixels
    outside every silhouette stay bit-identical to the background. The mask
    is the union of REAL silhouettes only; fakes are ignored.
    """
    if background.shape[0] != background.shape[1]:
        raise ValueError(f"background must be square, got {background.shape[:2]}")
    frame = background.astype(np.float32, copy=True)
    canvas_hw = frame.shape[:2]
    mask = np.zeros(canvas_hw, dtype=np.uint8)
    for obj in state.objects:
        rgb, alpha = render_object(obj, color_strength)
        win = paste_window(obj.position, alpha.shape, canvas_hw)
        if win is None:
            continue
        dst, src = win
        region = frame[dst]
        a = alpha[src]
        region[a] = rgb[src][a]
        frame[dst] = region
        if obj.cutout.kind == "real":
            m = mask[dst]
            m[a] = 1
            mask[dst] = m
    return frame, mask


# ---------------------------------------------------------------------------
# Clip synthesis
# ---------------------------------------------------------------------------

def synthesize_frames(
    backgrounds: Sequence[np.ndarray],
    bank: CutoutBank,
    config: SynthConfig,
    seed,
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Simulate a full clip: frame i composites scene state i onto
    backgrounds[i], with the state advanced between frames."""
    if len(backgrounds) != config.clip_length:
        raise ValueError(
            f"got {len(backgrounds)} backgrounds for clip_length {config.clip_length}"
        )
    state = init_scene(config, bank, seed)
    frames, masks = [], []
    for i in range(config.clip_length):
        if i > 0:
            state = step_scene(state, config)
        f, m = composite(backgrounds[i], state, config.color_jitter)
        frames.append(f)
        masks.append(m)
    return frames, masks


def synthesize_clip(
    backgrounds: Sequence[np.ndarray],
    bank: CutoutBank,
    config: SynthConfig,
    seed,
    out_dir: str | Path,
    clip_id: str,
    source_group: str = "",
) -> data.ClipManifest:
    """Synthesize one clip and write it under the standard dataset layout."""
    frames, masks = synthesize_frames(backgrounds, bank, config, seed)
    return data.write_clip(out_dir, clip_id, frames, masks,
                           source_group=source_group or clip_id,
                           label_kind="synthetic")


def extract_background_windows(
    clip: data.ClipManifest,
    tau_clip: int,
    canvas: int,
    n_windows: int,
    seed,
) -> list[list[np.ndarray]]:
    """Cut ``n_windows`` sequences of ``tau_clip`` consecutive canvas-sized
    crops out of a background clip. Each window shares one crop origin and
    one start index, both drawn from the seed."""
    if clip.num_frames < tau_clip:
        raise ValueError(
            f"clip {clip.clip_id!r} has {clip.num_frames} frames, needs >= {tau_clip}"
        )
    rng = _as_rng(seed)
    first = data.load_frame(clip.frame_paths[0])
    H, W = first.shape[:2]
    if H < canvas or W < canvas:
        raise ValueError(f"background frames {H}x{W} smaller than canvas {canvas}")

    windows = []
    for _ in range(n_windows):
        start = int(rng.integers(0, clip.num_frames - tau_clip + 1))
        y = int(rng.integers(0, H - canvas + 1))
        x = int(rng.integers(0, W - canvas + 1))
        seq = []
        for t in range(start, start + tau_clip):
            frame = data.load_frame(clip.frame_paths[t])
            if frame.shape[:2] != (H, W):
                raise ValueError(f"clip {clip.clip_id!r} frames change size")
            seq.append(frame[y:y + canvas, x:x + canvas])
        windows.append(seq)
    return windows
