from __future__ import annotations

import json
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from densevos import data, metrics, model, train

from conftest import make_mask


# ---------------------------------------------------------------------------
# dice / iou
# ---------------------------------------------------------------------------

def _logits(mask: np.ndarray) -> np.ndarray:
    return np.where(mask > 0, 40.0, -40.0)


def test_dice_iou_perfect_match():
    g = make_mask(8, 8, [(1, 1, 5, 5)])
    assert metrics.dice_iou(_logits(g), g) == (1.0, 1.0)


def test_dice_iou_disjoint():
    g = make_mask(8, 8, [(0, 0, 2, 2)])
    p = make_mask(8, 8, [(5, 5, 8, 8)])
    assert metrics.dice_iou(_logits(p), g) == (0.0, 0.0)


def test_dice_iou_half_subset():
    g = make_mask(8, 8, [(0, 0, 4, 4)])   # 16 px
    p = make_mask(8, 8, [(0, 0, 2, 4)])   # 8 px subset
    d, j = metrics.dice_iou(_logits(p), g)
    assert d == pytest.approx(2.0 / 3.0)
    assert j == pytest.approx(0.5)


def test_dice_iou_empty_conventions():
    empty = np.zeros((6, 6), np.uint8)
    some = make_mask(6, 6, [(2, 2, 4, 4)])
    assert metrics.dice_iou(_logits(empty), empty) == (1.0, 1.0)
    assert metrics.dice_iou(_logits(empty), some) == (0.0, 0.0)
    assert metrics.dice_iou(_logits(some), empty) == (0.0, 0.0)


def test_dice_iou_threshold_is_strict():
    g = make_mask(4, 4, [(0, 0, 4, 4)])
    zero_logits = np.zeros((4, 4))  # sigmoid = 0.5, not > 0.5
    d, j = metrics.dice_iou(zero_logits, g, threshold=0.5)
    assert (d, j) == (0.0, 0.0)


def test_dice_iou_identity_on_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        g = (rng.random((8, 8)) > 0.5).astype(np.uint8)
        p = (rng.random((8, 8)) > 0.5).astype(np.uint8)
        d, j = metrics.dice_iou(_logits(p), g)
        assert abs(d - metrics.dice_from_iou(j)) < 1e-9


def test_dice_iou_validation():
    with pytest.raises(ValueError):
        metrics.dice_iou(np.zeros((4, 4)), np.zeros((4, 5), np.uint8))
    with pytest.raises(ValueError):
        metrics.dice_iou(np.zeros((4, 4)), np.full((4, 4), 2, np.uint8))


def test_dice_iou_ordering_invariant():
    rng = np.random.default_rng(1)
    for _ in range(200):
        g = (rng.random((6, 6)) > 0.4).astype(np.uint8)
        p = (rng.random((6, 6)) > 0.6).astype(np.uint8)
        d, j = metrics.dice_iou(_logits(p), g)
        assert 0.0 <= j <= d <= 1.0


# ---------------------------------------------------------------------------
# Eval protocol
# ---------------------------------------------------------------------------

def test_protocol_crop_size_scaling():
    assert metrics.protocol_crop_size((2160, 3840)) == 512
    assert metrics.protocol_crop_size((1024, 1024)) == 512
    assert metrics.protocol_crop_size((64, 64)) == 32
    assert metrics.protocol_crop_size((100, 300)) == 50


def _toy_eval_sample(size=64, square=(20, 28)):
    """References carry a bright square; the mask marks it in the query."""
    lo, hi = square
    f = np.full((size, size, 3), 0.2, np.float32)
    f[lo:hi, lo:hi] = 1.0
    mask = np.zeros((size, size), np.uint8)
    mask[lo:hi, lo:hi] = 1
    return data.Sample(references=[f.copy(), f.copy()], query_frame=f.copy(),
                       query_mask=mask, clip_id="v0", query_index=2)


def test_prepare_eval_sample_identity_when_crop_equals_input():
    s = _toy_eval_sample()
    prep = metrics.prepare_eval_sample(s, input_size=32)
    assert prep.query_frame.shape == (32, 32, 3)
    assert np.array_equal(prep.query_frame, data.center_crop(s.query_frame, 32))
    assert np.array_equal(prep.query_mask, data.center_crop(s.query_mask, 32))


def test_prepare_eval_sample_resizes_to_input():
    s = _toy_eval_sample(size=128, square=(40, 56))
    prep = metrics.prepare_eval_sample(s, input_size=32)
    assert prep.query_frame.shape == (32, 32, 3)
    assert prep.query_mask.shape == (32, 32)
    assert set(np.unique(prep.query_mask)) <= {0, 1}


class _StubModel:
    """Mimics the network interface; predicts the bright square of the last
    reference and reconstructs that reference."""

    def __init__(self, tau=2, input_size=32, mode="oracle"):
        self.config = SimpleNamespace(tau=tau, input_size=input_size)
        self.training = False
        self.mode = mode

    def eval(self):
        self.training = False
        return self

    def train(self, flag=True):
        self.training = flag
        return self

    def __call__(self, refs: torch.Tensor) -> model.NetworkOutput:
        last = refs[:, -1]
        if self.mode == "oracle":
            logits = torch.where(last[:, :1] > 0.9, 40.0, -40.0)
        elif self.mode == "zeros":
            logits = torch.full_like(last[:, :1], -40.0)
        else:  # "ones"
            logits = torch.full_like(last[:, :1], 40.0)
        return model.NetworkOutput(recon=last.clone(), seg_logits=logits)


class _ListDataset(list):
    pass


def test_eval_samples_oracle_stub_scores_one():
    ds = _ListDataset([_toy_eval_sample()])
    records = metrics.eval_samples(_StubModel(), ds)
    assert len(records) == 1
    assert records[0].dice == 1.0 and records[0].iou == 1.0
    assert records[0].recon_mse == pytest.approx(0.0, abs=1e-12)


def test_eval_samples_deterministic(tmp_path):
    from conftest import write_toy_dataset
    manifests = write_toy_dataset(tmp_path / "ds", n_clips=2, n_frames=6)
    ds = train.SampleDataset(manifests, tau=2)
    net = model.DiffUNet(model.NetworkConfig(tau=2, input_size=16, channels=(8, 16),
                                             gn_groups=8, timesteps=50))
    r1 = metrics.eval_samples(net, ds)
    r2 = metrics.eval_samples(net, ds)
    assert [(r.dice, r.iou, r.recon_mse) for r in r1] == \
        [(r.dice, r.iou, r.recon_mse) for r in r2]


def test_eval_samples_requires_masks():
    s = _toy_eval_sample()
    s.query_mask = None
    with pytest.raises(ValueError):
        metrics.eval_samples(_StubModel(), _ListDataset([s]))
    with pytest.raises(ValueError):
        metrics.eval_samples(_StubModel(), _ListDataset([]))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def _records():
    out = []
    rng = np.random.default_rng(2)
    for vid, n in (("a", 3), ("b", 5), ("c", 2)):
        for i in range(n):
            iou = float(rng.uniform(0.2, 0.9))
            out.append(metrics.EvalRecord(
                clip_id=vid, query_index=i, dice=metrics.dice_from_iou(iou),
                iou=iou, recon_mse=0.01, baseline_mse=0.02,
                gt_empty=(vid == "c" and i == 0),
            ))
    return out


def test_report_weighted_per_video_mean_equals_dataset_mean():
    records = _records()
    ds_rep = metrics.make_report(records, "dataset")
    pv_rep = metrics.make_report(records, "per_video")
    total_n = sum(r.n_samples for r in pv_rep.rows)
    w_dice = sum(r.mean_dice * r.n_samples for r in pv_rep.rows) / total_n
    w_iou = sum(r.mean_iou * r.n_samples for r in pv_rep.rows) / total_n
    assert ds_rep.rows[0].mean_dice == pytest.approx(w_dice, abs=1e-9)
    assert ds_rep.rows[0].mean_iou == pytest.approx(w_iou, abs=1e-9)
    assert ds_rep.rows[0].n_samples == total_n


def test_report_skip_empty_and_scope_validation():
    records = _records()
    kept = metrics.make_report(records, "dataset", skip_empty=True)
    assert kept.rows[0].n_samples == len(records) - 1
    with pytest.raises(ValueError):
        metrics.make_report(records, "per_frame")


def test_report_json_and_table():
    rep = metrics.make_report(_records(), "per_video", threshold=0.5)
    payload = json.loads(rep.to_json())
    assert payload["scope"] == "per_video"
    assert [r["name"] for r in payload["rows"]] == ["a", "b", "c"]
    table = rep.format_table()
    assert table.splitlines()[0].split() == ["name", "n", "iou", "dice"]
    assert len(table.splitlines()) == 4


def test_evaluate_end_to_end_with_stub():
    ds = _ListDataset([_toy_eval_sample() for _ in range(3)])
    rep = metrics.evaluate(_StubModel(), ds)
    assert rep.scope == "dataset"
    assert rep.rows[0].mean_dice == 1.0 and rep.rows[0].mean_iou == 1.0


# ---------------------------------------------------------------------------
# Prediction emission
# ---------------------------------------------------------------------------

def test_overlay_mask_blend_values():
    frame = np.full((4, 4, 3), 0.4, np.float32)
    mask = make_mask(4, 4, [(0, 0, 2, 2)])
    out = metrics.overlay_mask(frame, mask)
    pink = np.array([255, 105, 180], np.float32) / 255.0
    expected = 0.5 * 0.4 + 0.5 * pink
    assert np.allclose(out[0, 0], expected)
    assert np.allclose(out[3, 3], 0.4)


def test_predict_and_overlay_zero_logits_keeps_query(tmp_path):
    s = _toy_eval_sample()
    paths = metrics.predict_and_overlay(_StubModel(mode="zeros"), s, tmp_path)
    overlay = data.load_frame(paths["overlay"])
    prep = metrics.prepare_eval_sample(s, 32)
    assert np.abs(overlay - prep.query_frame).max() <= 1.0 / 255.0
    assert data.load_mask(paths["mask"]).sum() == 0


def test_predict_and_overlay_full_mask_blend(tmp_path):
    s = _toy_eval_sample()
    paths = metrics.predict_and_overlay(_StubModel(mode="ones"), s, tmp_path)
    overlay = data.load_frame(paths["overlay"])
    prep = metrics.prepare_eval_sample(s, 32)
    pink = np.array([255, 105, 180], np.float32) / 255.0
    expected = 0.5 * prep.query_frame + 0.5 * pink
    assert np.abs(overlay - expected).max() <= 1.0 / 255.0
    assert data.load_mask(paths["mask"]).min() == 1


def test_predict_mask_file_roundtrips_exactly(tmp_path):
    s = _toy_eval_sample()
    paths = metrics.predict_and_overlay(_StubModel(mode="oracle"), s, tmp_path)
    prep = metrics.prepare_eval_sample(s, 32)
    expected = (prep.references[-1][..., 0] > 0.9).astype(np.uint8)
    assert np.array_equal(data.load_mask(paths["mask"]), expected)


def test_predict_rejects_wrong_tau(tmp_path):
    s = _toy_eval_sample()
    with pytest.raises(ValueError):
        metrics.predict_and_overlay(_StubModel(tau=4), s, tmp_path)
