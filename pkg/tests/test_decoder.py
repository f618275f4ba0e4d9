from __future__ import annotations

import numpy as np
import pytest
import torch

import oracles
from vpseg.backbone import BackboneConfig, FeatureMap
from vpseg.decoder import (
    MaskDecoder,
    PredictionMask,
    ShapeMismatchError,
    StrideMismatchError,
    bce_loss,
    decode,
)
from vpseg.network import VideoSegNet, predict_case


def high_low(t=5, c_high=32, c_low=16, h=16, w=28):
    high = FeatureMap(torch.rand(t, c_high, h, w), level="high", stream="local",
                      stride=16)
    low = FeatureMap(torch.rand(t, c_low, 2 * h, 2 * w), level="low",
                     stream="local", stride=8)
    return high, low


class TestDecode:
    def test_output_shape_full_scale(self):
        torch.manual_seed(0)
        decoder = MaskDecoder(32, 16, hidden=8)
        high, low = high_low()
        pred = decode(decoder, high, low, (256, 448))
        assert pred.probs.shape == (5, 256, 448)
        assert pred.logit_available

    def test_zero_head_gives_half(self):
        decoder = MaskDecoder(8, 4, hidden=8)
        with torch.no_grad():
            decoder.head.weight.zero_()
            decoder.head.bias.zero_()
        high, low = high_low(t=2, c_high=8, c_low=4, h=4, w=6)
        pred = decode(decoder, high, low, (64, 96))
        assert torch.allclose(pred.probs, torch.full_like(pred.probs, 0.5))

    def test_probs_in_unit_interval(self):
        for seed in range(10):
            torch.manual_seed(seed)
            decoder = MaskDecoder(8, 4, hidden=8)
            high, low = high_low(t=2, c_high=8, c_low=4, h=4, w=6)
            pred = decode(decoder, high, low, (64, 96))
            assert pred.probs.min() >= 0.0 and pred.probs.max() <= 1.0

    def test_stride_contract(self):
        decoder = MaskDecoder(8, 4, hidden=8)
        high, low = high_low(t=2, c_high=8, c_low=4, h=4, w=6)
        bad_low = FeatureMap(low.data, level="low", stream="local", stride=16)
        with pytest.raises(StrideMismatchError):
            decode(decoder, high, bad_low, (64, 96))

    def test_spatial_mismatch(self):
        decoder = MaskDecoder(8, 4, hidden=8)
        high = FeatureMap(torch.rand(2, 8, 4, 6), level="high", stream="local",
                          stride=16)
        low = FeatureMap(torch.rand(2, 4, 9, 13), level="low", stream="local",
                         stride=8)
        with pytest.raises(StrideMismatchError):
            decode(decoder, high, low, (64, 96))


class TestBceLoss:
    def test_perfect_prediction(self):
        g = torch.zeros(2, 8, 8)
        g[:, 2:5, 3:6] = 1.0
        pred = g.clamp(1e-7, 1 - 1e-7)
        assert bce_loss(pred, g).item() <= 1e-6

    def test_uniform_half(self):
        g = (torch.rand(3, 6, 6) > 0.5).float()
        p = torch.full_like(g, 0.5)
        assert bce_loss(p, g).item() == pytest.approx(np.log(2.0), abs=1e-6)

    def test_matches_pixel_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            p = rng.uniform(0.01, 0.99, size=(4, 4))
            g = (rng.random((4, 4)) > 0.5).astype(np.float64)
            mine = bce_loss(torch.from_numpy(p), torch.from_numpy(g)).item()
            assert mine == pytest.approx(oracles.pixel_bce(p, g), abs=1e-9)

    def test_logits_path_matches_probs_path(self):
        torch.manual_seed(1)
        logits = torch.randn(2, 5, 5) * 3
        target = (torch.rand(2, 5, 5) > 0.5).float()
        pm = PredictionMask(probs=torch.sigmoid(logits), logits=logits)
        a = bce_loss(pm, target).item()
        b = bce_loss(torch.sigmoid(logits), target).item()
        assert a == pytest.approx(b, rel=1e-5, abs=1e-7)

    def test_nonnegative(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            p = torch.from_numpy(rng.uniform(0, 1, size=(3, 3)))
            g = torch.from_numpy((rng.random((3, 3)) > 0.5).astype(np.float64))
            assert bce_loss(p, g).item() >= 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            bce_loss(torch.rand(2, 4, 4), torch.zeros(2, 4, 5))

    def test_decoder_end_to_end_gradcheck(self):
        from vpseg.training import grad_check

        torch.manual_seed(3)
        decoder = MaskDecoder(4, 4, hidden=4)
        high = torch.rand(1, 4, 2, 3, dtype=torch.float64)
        low = torch.rand(1, 4, 4, 6, dtype=torch.float64)
        target = (torch.rand(1, 8, 12) > 0.5).double()

        def loss_fn(model):
            logits = model(high, low, (8, 12))
            return torch.nn.functional.binary_cross_entropy_with_logits(
                logits, target)

        report = grad_check(decoder, loss_fn, max_params=120,
                            rng=np.random.default_rng(1))
        assert report.max_rel_err < 1e-3


class TestNetworkForward:
    def _model(self, **kw):
        torch.manual_seed(4)
        defaults = dict(
            backbone=BackboneConfig(kind="toy", reduced_channels=8,
                                    toy_widths=(8, 8, 16, 16)),
            branching=True, n_blocks=3, groups=2, kernel_k=1,
            dilations_pair=(1, 2), dilations_refine=(1, 2),
            embed_dim=16, jigsaw_grid=2, decoder_hidden=8)
        defaults.update(kw)
        return VideoSegNet(**defaults)

    def test_forward_shapes(self):
        model = self._model()
        out = model(torch.rand(1, 3, 32, 48), torch.rand(4, 3, 32, 48))
        assert out.anchor.probs.shape == (1, 32, 48)
        assert out.locals.probs.shape == (4, 32, 48)
        assert out.all_probs().shape == (5, 32, 48)
        assert out.fused.channels == 8

    def test_predict_case_counts_and_determinism(self):
        model = self._model()
        frames = torch.rand(6, 3, 32, 48)
        a = predict_case(model, frames, delta=5)
        b = predict_case(model, frames, delta=5)
        assert a.shape == (6, 32, 48)
        assert torch.equal(a, b)

    def test_predict_case_longer_sequence(self):
        model = self._model()
        frames = torch.rand(14, 3, 32, 48)
        probs = predict_case(model, frames, delta=3)
        assert probs.shape == (14, 32, 48)
        assert probs.min() >= 0 and probs.max() <= 1

    def test_predict_case_too_short(self):
        model = self._model()
        with pytest.raises(ValueError):
            predict_case(model, torch.rand(3, 3, 32, 48), delta=5)
