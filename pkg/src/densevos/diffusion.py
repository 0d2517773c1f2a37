"""Forward diffusion kernel, variance schedule, and the per-skip-level
beta-distribution time-step scheduler.

Only the corruption direction is implemented: features/frames are noised as
x_t = sqrt(abar_t) * x_0 + sqrt(1 - abar_t) * eps. There is no reverse
(denoising) sampler and no noise-prediction objective anywhere in this
package; the noise is a regularizer, not a generative model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class VarianceSchedule:
    """Per-step noise variances beta_1..beta_T and the cumulative
    signal-retention products abar_t = prod_{i<=t} (1 - beta_i).

    ``alpha_bar(0)`` is 1 by convention: t=0 means "no corruption".
    """

    betas: np.ndarray       # shape (T,), betas[i] = beta_{i+1}
    alpha_bars: np.ndarray  # shape (T,), alpha_bars[i] = abar_{i+1}

    @property
    def T(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t: int) -> float:
        if t < 0 or t > self.T:
            raise ValueError(f"t={t} outside [0, {self.T}]")
        if t == 0:
            return 1.0
        return float(self.alpha_bars[t - 1])


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> VarianceSchedule:
    """Linear variance schedule from beta_start to beta_end over T steps."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bars = np.cumprod(1.0 - betas)
    return VarianceSchedule(betas=betas, alpha_bars=alpha_bars)


def forward_diffuse(x0, t: int, eps, schedule: VarianceSchedule):
    """Corrupt x0 at time step t: sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps.

    Works on numpy arrays and torch tensors alike; t=0 returns x0 unchanged.
    """
    if tuple(eps.shape) != tuple(x0.shape):
        raise ValueError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    ab = schedule.alpha_bar(t)
    if t == 0:
        return x0
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


# ---------------------------------------------------------------------------
# Beta distribution utilities
# ---------------------------------------------------------------------------

def _check_shape(a: float, b: float) -> None:
    if a <= 0 or b <= 0:
        raise ValueError(f"beta shape parameters must be positive, got ({a}, {b})")


def beta_pdf(x, a: float, b: float):
    """Density of Beta(a, b) at x in [0, 1]. Accepts scalars or arrays."""
    _check_shape(a, b)
    x = np.asarray(x, dtype=np.float64)
    if (x < 0).any() or (x > 1).any():
        raise ValueError("x must lie in [0, 1]")
    log_norm = math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)
    with np.errstate(divide="ignore", invalid="ignore"):
        logpdf = (a - 1) * np.log(x) + (b - 1) * np.log1p(-x) - log_norm
        out = np.exp(logpdf)
    # interval endpoints: x**0 == 1 even where log(x) is -inf
    at_zero = math.exp(-log_norm) if a == 1 else (np.inf if a < 1 else 0.0)
    at_one = math.exp(-log_norm) if b == 1 else (np.inf if b < 1 else 0.0)
    out = np.where(x == 0.0, at_zero, out)
    out = np.where(x == 1.0, at_one, out)
    return float(out) if out.ndim == 0 else out


def beta_mean(a: float, b: float) -> float:
    _check_shape(a, b)
    return a / (a + b)


def beta_var(a: float, b: float) -> float:
    _check_shape(a, b)
    s = a + b
    return a * b / (s * s * (s + 1.0))


# ---------------------------------------------------------------------------
# Level scheduler
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LevelScheduler:
    """Beta-distribution parameters per skip level.

    Level l draws diffusion time fractions from Beta(alpha0 + l,
    beta0 - beta_c * l). l=0 is the deepest skip (adjacent to the latent,
    least noise); l = n_levels-1 is the highest-resolution skip (most noise).
    """

    alpha0: float = 1.0
    beta0: float = 13.0
    beta_c: float = 2.0
    n_levels: int = 6

    def __post_init__(self) -> None:
        if self.alpha0 <= 0:
            raise ValueError("alpha0 must be positive")
        if self.n_levels < 1:
            raise ValueError("n_levels must be >= 1")
        if self.beta0 - self.beta_c * (self.n_levels - 1) <= 0:
            raise ValueError(
                "beta0 - beta_c*(n_levels-1) must stay positive: "
                f"{self.beta0} - {self.beta_c}*{self.n_levels - 1} <= 0"
            )


def level_params(sched: LevelScheduler, l: int) -> tuple[float, float]:
    """Beta shape parameters (alpha0 + l, beta0 - beta_c * l) for level l."""
    if l < 0 or l >= sched.n_levels:
        raise ValueError(f"level {l} outside [0, {sched.n_levels})")
    return sched.alpha0 + l, sched.beta0 - sched.beta_c * l


def sample_level_timestep(
    sched: LevelScheduler, l: int, schedule_T: int, rng: np.random.Generator
) -> int:
    """Draw u ~ Beta(level params) and map to an integer time step
    floor(u * T), clamped to [0, T-1]."""
    a, b = level_params(sched, l)
    u = rng.beta(a, b)
    return min(int(u * schedule_T), schedule_T - 1)


# ---------------------------------------------------------------------------
# Input patch diffusion
# ---------------------------------------------------------------------------

def patch_diffuse_batch(
    references,
    p_d: float,
    schedule: VarianceSchedule,
    rng: np.random.Generator,
):
    """Independently replace each reference frame, with probability p_d, by
    its diffused version at a time step drawn uniformly from [0, T).

    ``references`` is an array/tensor whose last three axes are one frame
    (channels, height, width); all leading axes are treated as a flat batch
    of frames. Returns an object of the same type; untouched frames are
    passed through unchanged.
    """
    if not 0.0 <= p_d <= 1.0:
        raise ValueError(f"p_d must be in [0, 1], got {p_d}")
    if references.ndim < 3:
        raise ValueError("references must have at least 3 dims (C, H, W)")

    is_torch = hasattr(references, "detach") and not isinstance(references, np.ndarray)
    frame_shape = tuple(references.shape[-3:])
    flat = references.reshape((-1,) + frame_shape)
    n = flat.shape[0]

    out = flat.clone() if is_torch else flat.copy()
    for i in range(n):
        if rng.random() >= p_d:
            continue
        t = int(rng.integers(0, schedule.T))
        eps = rng.standard_normal(frame_shape).astype(np.float32)
        if is_torch:
            import torch

            eps = torch.from_numpy(eps).to(out[i].dtype)
        out[i] = forward_diffuse(out[i], t, eps, schedule)
    return out.reshape(references.shape)
