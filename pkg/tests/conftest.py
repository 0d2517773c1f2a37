from __future__ import annotations

import numpy as np
import pytest

from densevos import data, synth


def make_frame(h: int, w: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.random((h, w, 3)).astype(np.float32)


def make_mask(h: int, w: int, boxes) -> np.ndarray:
    m = np.zeros((h, w), dtype=np.uint8)
    for y0, x0, y1, x1 in boxes:
        m[y0:y1, x0:x1] = 1
    return m


@pytest.fixture
def tiny_bank() -> synth.CutoutBank:
    frame = make_frame(32, 32, seed=3)
    mask = make_mask(32, 32, [(4, 4, 9, 9), (18, 14, 22, 24)])
    reals = synth.extract_cutouts(frame, mask)
    fakes = synth.extract_fake_cutouts(frame, mask, reals, seed=5)
    return synth.CutoutBank(real=reals, fake=fakes)


def write_toy_dataset(root, n_clips: int = 3, n_frames: int = 7, size: int = 32,
                      seed: int = 0) -> list[data.ClipManifest]:
    """Clips with a moving square object so masks are nonempty and coherent."""
    rng = np.random.default_rng(seed)
    manifests = []
    for c in range(n_clips):
        base = rng.random((size, size, 3)).astype(np.float32) * 0.5
        frames, masks = [], []
        x0 = int(rng.integers(2, size // 2))
        for t in range(n_frames):
            f = base.copy()
            m = np.zeros((size, size), np.uint8)
            x = min(x0 + t, size - 6)
            f[4:10, x:x + 5] = 0.95
            m[4:10, x:x + 5] = 1
            frames.append(f)
            masks.append(m)
        manifests.append(data.write_clip(root, f"clip{c}", frames, masks,
                                         source_group=f"group{c}",
                                         label_kind="synthetic"))
    return manifests
