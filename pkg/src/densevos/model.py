"""Multi-task UNet over stacks of reference frames.

The encoder runs on each of the tau reference frames independently. At every
skip level the per-frame feature maps are fused: channel-concatenated,
reweighted by a spatiotemporal attention gate, averaged over the frame axis,
then (in training mode, skip levels only) perturbed by forward diffusion at a
depth-dependent noise level and channel dropout. Two heads decode the fused
pyramid into a reconstruction of the unseen query frame and its mask logits.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .diffusion import (
    LevelScheduler,
    VarianceSchedule,
    forward_diffuse,
    make_schedule,
    sample_level_timestep,
)


@dataclass
class NetworkConfig:
    tau: int = 4
    input_size: int = 256
    channels: tuple[int, ...] = (32, 64, 128, 256, 512, 512)
    gn_groups: int = 8
    dropout_p: float = 0.1
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    level_alpha0: float = 1.0
    level_beta0: float = 13.0
    level_beta_c: float = 2.0

    def __post_init__(self) -> None:
        self.channels = tuple(int(c) for c in self.channels)
        if self.tau < 1:
            raise ValueError("tau must be >= 1")
        if len(self.channels) < 2:
            raise ValueError("need at least 2 channel levels")
        if self.input_size % (2 ** self.levels) != 0:
            raise ValueError(
                f"input_size {self.input_size} must be divisible by 2^levels = {2 ** self.levels}"
            )
        for c in self.channels:
            if c % self.gn_groups != 0:
                raise ValueError(f"channel width {c} not divisible by gn_groups {self.gn_groups}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")
        # raises if the per-level beta parameters go non-positive
        LevelScheduler(self.level_alpha0, self.level_beta0, self.level_beta_c, self.levels)

    @property
    def levels(self) -> int:
        return len(self.channels)


@dataclass
class NetworkOutput:
    recon: torch.Tensor       # b x 3 x H x W, reconstruction of the query frame
    seg_logits: torch.Tensor  # b x 1 x H x W, mask logits (no activation)


class ResidualBlock(nn.Module):
    """(GroupNorm -> SiLU -> 3x3 conv) twice, plus identity or 1x1 shortcut."""

    def __init__(self, in_ch: int, out_ch: int, gn_groups: int = 8):
        super().__init__()
        self.norm1 = nn.GroupNorm(gn_groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm2 = nn.GroupNorm(gn_groups, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Identity() if in_ch == out_ch else nn.Conv2d(in_ch, out_ch, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class ContractBlock(nn.Module):
    """Two residual blocks (the skip tap) then a stride-2 conv to the next width."""

    def __init__(self, ch: int, next_ch: int, gn_groups: int = 8):
        super().__init__()
        self.res1 = ResidualBlock(ch, ch, gn_groups)
        self.res2 = ResidualBlock(ch, ch, gn_groups)
        self.down = nn.Conv2d(ch, next_ch, 3, stride=2, padding=1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        skip = self.res2(self.res1(x))
        return skip, self.down(skip)


class DecoderBlock(nn.Module):
    """Nearest 2x upsample, 3x3 conv to the skip width, concat, two residual blocks."""

    def __init__(self, lower_ch: int, skip_ch: int, gn_groups: int = 8):
        super().__init__()
        self.conv = nn.Conv2d(lower_ch, skip_ch, 3, padding=1)
        self.res1 = ResidualBlock(2 * skip_ch, skip_ch, gn_groups)
        self.res2 = ResidualBlock(skip_ch, skip_ch, gn_groups)

    def forward(self, lower: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(lower, scale_factor=2, mode="nearest")
        x = self.conv(x)
        x = torch.cat([x, skip], dim=1)
        return self.res2(self.res1(x))


class SpatialGateBlock(nn.Module):
    """Depthwise-separable dilated conv, group norm, SiLU."""

    def __init__(self, channels: int, gn_groups: int, dilation: int):
        super().__init__()
        self.depthwise = nn.Conv2d(channels, channels, 3, padding=dilation,
                                   dilation=dilation, groups=channels)
        self.pointwise = nn.Conv2d(channels, channels, 1)
        self.norm = nn.GroupNorm(gn_groups, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.silu(self.norm(self.pointwise(self.depthwise(x))))


class SpatiotemporalAttention(nn.Module):
    """Joint spatial/channel gate over concatenated per-frame features.

    A spatial sigmoid map S comes from two dilated depthwise-separable conv
    blocks (dilation 1 then 2); a channel gate T squeezes S through a
    bottleneck MLP on its spatial average. The input is scaled by T*S, so
    output shape always equals input shape.
    """

    def __init__(self, channels: int, gn_groups: int = 8, reduction: int = 4):
        super().__init__()
        self.block1 = SpatialGateBlock(channels, gn_groups, dilation=1)
        self.block2 = SpatialGateBlock(channels, gn_groups, dilation=2)
        hidden = max(channels // reduction, 1)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        s = torch.sigmoid(self.block2(self.block1(x)))
        t = torch.sigmoid(self.fc2(F.silu(self.fc1(s.mean(dim=(2, 3))))))
        return x * s * t[:, :, None, None]


class SkipFuse(nn.Module):
    """Merge tau per-frame feature maps into one, optionally noised.

    Input is (b, tau*F, h, w). Attention runs on the concatenated stack, the
    result is averaged over the frame axis, and, when ``diffuse`` is set and
    the module is in training mode, each sample is pushed through the forward
    diffusion kernel at its own timestep followed by channel dropout. The
    bottleneck connection uses diffuse=False and is never perturbed.
    """

    def __init__(self, tau: int, channels: int, gn_groups: int = 8,
                 dropout_p: float = 0.1, diffuse: bool = True):
        super().__init__()
        self.tau = tau
        self.channels = channels
        self.diffuse = diffuse
        self.attention = SpatiotemporalAttention(tau * channels, gn_groups)
        self.dropout = nn.Dropout2d(dropout_p) if diffuse else nn.Identity()

    def forward(
        self,
        stacked: torch.Tensor,
        timesteps: Optional[list[int]] = None,
        schedule: Optional[VarianceSchedule] = None,
    ) -> torch.Tensor:
        b, c, h, w = stacked.shape
        if c != self.tau * self.channels:
            raise ValueError(f"expected {self.tau * self.channels} channels, got {c}")
        fused = self.attention(stacked)
        fused = fused.reshape(b, self.tau, self.channels, h, w).mean(dim=1)
        if self.diffuse and self.training:
            if timesteps is None or schedule is None:
                raise ValueError("training-mode skip fusion needs timesteps and a schedule")
            if len(timesteps) != b:
                raise ValueError(f"need {b} timesteps, got {len(timesteps)}")
            noised = [
                forward_diffuse(fused[i], int(timesteps[i]), torch.randn_like(fused[i]), schedule)
                for i in range(b)
            ]
            fused = self.dropout(torch.stack(noised, dim=0))
        return fused


class Head(nn.Module):
    """Three residual blocks then a 3x3 conv; no output activation."""

    def __init__(self, ch: int, out_ch: int, gn_groups: int = 8):
        super().__init__()
        self.blocks = nn.Sequential(*[ResidualBlock(ch, ch, gn_groups) for _ in range(3)])
        self.out = nn.Conv2d(ch, out_ch, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.out(self.blocks(x))


class DiffUNet(nn.Module):
    """Reference frames in, (query reconstruction, query mask logits) out.

    Skip level l counts from the deepest fused skip (l=0, barely noised) to
    the shallowest (l=levels-1, most heavily noised); per-sample timesteps
    are drawn from the level scheduler using a numpy generator owned by the
    module, reseedable via :meth:`seed_diffusion`.
    """

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        ch = config.channels
        g = config.gn_groups
        L = config.levels

        self.stem = nn.Conv2d(3, ch[0], 3, padding=1)
        self.encoder = nn.ModuleList(
            ContractBlock(ch[i], ch[min(i + 1, L - 1)], g) for i in range(L)
        )
        self.latent_res1 = ResidualBlock(ch[-1], ch[-1], g)
        self.latent_res2 = ResidualBlock(ch[-1], ch[-1], g)

        self.skip_fuse = nn.ModuleList(
            SkipFuse(config.tau, ch[i], g, config.dropout_p, diffuse=True) for i in range(L)
        )
        self.latent_fuse = SkipFuse(config.tau, ch[-1], g, 0.0, diffuse=False)

        # decoder runs deepest-first: lower width is the previous decoder output
        self.decoder = nn.ModuleList()
        lower = ch[-1]
        for i in reversed(range(L)):
            self.decoder.append(DecoderBlock(lower, ch[i], g))
            lower = ch[i]
        self.recon_head = Head(ch[0], 3, g)
        self.seg_head = Head(ch[0], 1, g)

        self.level_scheduler = LevelScheduler(
            config.level_alpha0, config.level_beta0, config.level_beta_c, L
        )
        self.schedule = make_schedule(config.timesteps, config.beta_start, config.beta_end)
        self._rng = np.random.default_rng()
        self.last_timesteps: dict[int, list[int]] = {}

    def seed_diffusion(self, seed) -> None:
        """Reseed the generator behind the per-level timestep draws."""
        self._rng = np.random.default_rng(seed)

    def _stack(self, per_frame: torch.Tensor, b: int) -> torch.Tensor:
        bt, f, h, w = per_frame.shape
        return per_frame.reshape(b, self.config.tau * f, h, w)

    def forward(self, references: torch.Tensor) -> NetworkOutput:
        cfg = self.config
        if references.ndim != 5:
            raise ValueError(f"references must be (b, tau, 3, H, W), got {tuple(references.shape)}")
        b, tau, c, h, w = references.shape
        if tau != cfg.tau or c != 3 or h != cfg.input_size or w != cfg.input_size:
            raise ValueError(
                f"expected (b, {cfg.tau}, 3, {cfg.input_size}, {cfg.input_size}), "
                f"got {tuple(references.shape)}"
            )

        x = self.stem(references.reshape(b * tau, c, h, w))
        skips = []
        for block in self.encoder:
            skip, x = block(x)
            skips.append(skip)
        latent = self.latent_res2(self.latent_res1(x))

        self.last_timesteps = {}
        fused_latent = self.latent_fuse(self._stack(latent, b))
        fused_skips = []
        L = cfg.levels
        for i, skip in enumerate(skips):
            level = (L - 1) - i  # deepest skip gets level 0
            ts = None
            if self.training:
                ts = [
                    sample_level_timestep(self.level_scheduler, level, self.schedule.T, self._rng)
                    for _ in range(b)
                ]
                self.last_timesteps[level] = ts
            fused_skips.append(self.skip_fuse[i](self._stack(skip, b), ts, self.schedule))

        x = fused_latent
        for j, block in enumerate(self.decoder):
            x = block(x, fused_skips[L - 1 - j])
        return NetworkOutput(recon=self.recon_head(x), seg_logits=self.seg_head(x))


def save_checkpoint(model: DiffUNet, path: str | Path, extra: Optional[dict] = None) -> None:
    payload = {
        "config": asdict(model.config),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> tuple[DiffUNet, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    for key in ("config", "state_dict"):
        if key not in payload:
            raise ValueError(f"checkpoint {path} missing {key!r}")
    config = NetworkConfig(**payload["config"])
    model = DiffUNet(config)
    model.load_state_dict(payload["state_dict"])
    return model, payload.get("extra", {})
