from __future__ import annotations

import numpy as np
import pytest
import torch
from torch import nn

from densevos import model


def small_config(**overrides) -> model.NetworkConfig:
    base = dict(tau=2, input_size=32, channels=(8, 16), gn_groups=8, timesteps=50,
                dropout_p=0.1)
    base.update(overrides)
    return model.NetworkConfig(**base)


# ---------------------------------------------------------------------------
# Config validation
# ---------------------------------------------------------------------------

def test_config_rejects_bad_input_size():
    with pytest.raises(ValueError):
        small_config(input_size=30)  # not divisible by 2^2


def test_config_rejects_channel_group_mismatch():
    with pytest.raises(ValueError):
        small_config(channels=(8, 12))


def test_config_rejects_bad_dropout_and_tau():
    with pytest.raises(ValueError):
        small_config(dropout_p=1.0)
    with pytest.raises(ValueError):
        small_config(tau=0)


def test_config_rejects_level_scheduler_overflow():
    # 8 levels with beta0=13, beta_c=2 drives the last beta to -1
    with pytest.raises(ValueError):
        model.NetworkConfig(tau=2, input_size=256,
                            channels=(8, 8, 8, 8, 8, 8, 8, 8), gn_groups=8)


# ---------------------------------------------------------------------------
# Blocks
# ---------------------------------------------------------------------------

def test_residual_block_skip_selection():
    same = model.ResidualBlock(16, 16, gn_groups=8)
    proj = model.ResidualBlock(16, 32, gn_groups=8)
    assert isinstance(same.skip, nn.Identity)
    assert isinstance(proj.skip, nn.Conv2d) and proj.skip.kernel_size == (1, 1)
    x = torch.randn(2, 16, 12, 12)
    assert same(x).shape == (2, 16, 12, 12)
    assert proj(x).shape == (2, 32, 12, 12)


def test_attention_preserves_shape_and_is_contractive():
    for b, c, h, w in [(2, 16, 8, 8), (1, 32, 16, 12), (3, 8, 11, 11)]:
        att = model.SpatiotemporalAttention(c, gn_groups=8)
        x = torch.randn(b, c, h, w)
        y = att(x)
        assert y.shape == x.shape
        assert torch.all(y.abs() <= x.abs() + 1e-6)  # both gates are sigmoids


def test_attention_identity_override():
    att = model.SpatiotemporalAttention(16, gn_groups=8)
    with torch.no_grad():
        att.block2.norm.weight.zero_()
        att.block2.norm.bias.fill_(50.0)   # S = sigmoid(silu(50)) = 1
        att.fc2.weight.zero_()
        att.fc2.bias.fill_(50.0)           # T = sigmoid(50) = 1
    x = torch.randn(4, 16, 10, 10)
    assert torch.equal(att(x), x)


def test_skip_fuse_eval_mode_is_mean_after_attention():
    fuse = model.SkipFuse(tau=3, channels=8, gn_groups=8, dropout_p=0.5, diffuse=True)
    with torch.no_grad():
        fuse.attention.block2.norm.weight.zero_()
        fuse.attention.block2.norm.bias.fill_(50.0)
        fuse.attention.fc2.weight.zero_()
        fuse.attention.fc2.bias.fill_(50.0)
    fuse.eval()
    frame = torch.randn(2, 8, 6, 6)
    stacked = torch.cat([frame, frame, frame], dim=1)
    out = fuse(stacked)
    assert torch.allclose(out, frame, atol=1e-6)  # mean of identical frames


def test_skip_fuse_train_mode_requires_timesteps():
    fuse = model.SkipFuse(tau=2, channels=8, gn_groups=8)
    fuse.train()
    sched = model.make_schedule(50)
    x = torch.randn(2, 16, 6, 6)
    with pytest.raises(ValueError):
        fuse(x)
    with pytest.raises(ValueError):
        fuse(x, timesteps=[5], schedule=sched)
    out = fuse(x, timesteps=[5, 9], schedule=sched)
    assert out.shape == (2, 8, 6, 6)


def test_skip_fuse_channel_mismatch_rejected():
    fuse = model.SkipFuse(tau=2, channels=8, gn_groups=8)
    with pytest.raises(ValueError):
        fuse.eval()(torch.randn(1, 24, 6, 6))


def test_latent_fuse_is_deterministic_in_train_mode():
    fuse = model.SkipFuse(tau=2, channels=8, gn_groups=8, dropout_p=0.0, diffuse=False)
    fuse.train()
    x = torch.randn(2, 16, 6, 6)
    assert torch.equal(fuse(x), fuse(x))


# ---------------------------------------------------------------------------
# Full network
# ---------------------------------------------------------------------------

def test_forward_shapes_and_strict_input_contract():
    net = model.DiffUNet(small_config())
    net.eval()
    out = net(torch.rand(3, 2, 3, 32, 32))
    assert out.recon.shape == (3, 3, 32, 32)
    assert out.seg_logits.shape == (3, 1, 32, 32)
    with pytest.raises(ValueError):
        net(torch.rand(3, 3, 3, 32, 32))   # wrong tau
    with pytest.raises(ValueError):
        net(torch.rand(3, 2, 3, 64, 64))   # wrong size
    with pytest.raises(ValueError):
        net(torch.rand(2, 3, 32, 32))      # missing frame axis


def test_eval_forward_deterministic_train_forward_stochastic():
    net = model.DiffUNet(small_config())
    x = torch.rand(2, 2, 3, 32, 32)
    net.eval()
    a = net(x)
    b = net(x)
    assert torch.equal(a.recon, b.recon) and torch.equal(a.seg_logits, b.seg_logits)
    net.train()
    net.seed_diffusion(0)
    c = net(x)
    d = net(x)
    assert not torch.equal(c.seg_logits, d.seg_logits)


def test_train_mode_draws_timesteps_per_level_and_sample():
    cfg = small_config(channels=(8, 16, 16), input_size=32)
    net = model.DiffUNet(cfg)
    net.train()
    net.seed_diffusion(7)
    net(torch.rand(4, 2, 3, 32, 32))
    assert sorted(net.last_timesteps) == [0, 1, 2]
    for level, ts in net.last_timesteps.items():
        assert len(ts) == 4
        assert all(0 <= t <= cfg.timesteps - 1 for t in ts)
    net.eval()
    net(torch.rand(1, 2, 3, 32, 32))
    assert net.last_timesteps == {}


def test_deep_levels_get_smaller_timesteps_on_average():
    cfg = small_config(channels=(8, 8, 8, 8), timesteps=1000)
    net = model.DiffUNet(cfg)
    net.train()
    net.seed_diffusion(0)
    deep, shallow = [], []
    for _ in range(40):
        net(torch.rand(2, 2, 3, 32, 32))
        deep += net.last_timesteps[0]
        shallow += net.last_timesteps[3]
    assert np.mean(deep) < np.mean(shallow)


def test_all_parameters_receive_gradients():
    net = model.DiffUNet(small_config(dropout_p=0.0))
    net.train()
    net.seed_diffusion(1)
    out = net(torch.rand(2, 2, 3, 32, 32))
    loss = out.recon.square().mean() + out.seg_logits.square().mean()
    loss.backward()
    for name, p in net.named_parameters():
        assert p.grad is not None, name
        assert float(p.grad.abs().sum()) > 0.0, name


def test_residual_block_gradcheck():
    block = model.ResidualBlock(4, 8, gn_groups=4).double()
    x = torch.randn(1, 4, 6, 6, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(block, (x,), eps=1e-6, atol=1e-4)


def test_attention_gradcheck():
    att = model.SpatiotemporalAttention(8, gn_groups=4).double()
    x = torch.randn(1, 8, 7, 7, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(att, (x,), eps=1e-6, atol=1e-4)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    net = model.DiffUNet(small_config())
    p = tmp_path / "m.ckpt"
    model.save_checkpoint(net, p, extra={"epoch": 3, "val_dice": 0.5})
    back, extra = model.load_checkpoint(p)
    assert back.config == net.config
    assert extra["epoch"] == 3
    for (ka, va), (kb, vb) in zip(net.state_dict().items(), back.state_dict().items()):
        assert ka == kb
        assert torch.equal(va, vb)


def test_checkpoint_missing_keys_rejected(tmp_path):
    p = tmp_path / "bad.ckpt"
    torch.save({"state_dict": {}}, p)
    with pytest.raises(ValueError):
        model.load_checkpoint(p)
