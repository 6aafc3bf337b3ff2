from dataclasses import replace

import numpy as np
import pytest

from dynmotion import tensor as tn
from dynmotion.formats import BadMagicError, FormatError, TruncatedError
from dynmotion.losses import LossConfig
from dynmotion.model import (BUFFER_SECTIONS, NetworkConfig, batch_losses, calibrate,
                             cast_params, clip_losses, encode, feature_statistics, forward,
                             forward_batch, init_params, load_model, param_shapes, save_model,
                             trainable_sections)
from dynmotion.tensor import CHECK_DTYPE, no_grad

TINY = NetworkConfig(T=4, H=8, W=8, s=3, dmr_dim=6, ar_dim=3, trunk_channels=(2, 3),
                     num_classes=3, seed=1)


def clip_for(cfg, seed=0, frames=None):
    n = cfg.T if frames is None else frames
    return np.random.default_rng(seed).uniform(size=(n, cfg.H, cfg.W))


class TestInit:
    def test_same_seed_bitwise(self):
        a, b = init_params(TINY), init_params(TINY)
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_seeds_differ(self):
        a, b = init_params(TINY), init_params(replace(TINY, seed=2))
        assert any(not np.array_equal(a[k], b[k]) for k in a if k.endswith(".w"))

    def test_biases_zero(self):
        p = init_params(TINY)
        for k in p:
            if k.endswith(".b"):
                assert not p[k].any(), k

    def test_buffers_identity(self):
        p = init_params(TINY)
        assert not p["filter.norm.mean"].any()
        np.testing.assert_array_equal(p["filter.norm.var"], 1)
        assert not set(BUFFER_SECTIONS) & set(trainable_sections(p))

    def test_shapes(self):
        p = init_params(TINY)
        for k, shape in param_shapes(TINY).items():
            assert p[k].shape == shape and p[k].dtype == np.float32

    def test_config_validation(self):
        with pytest.raises(ValueError):
            NetworkConfig(s=4)
        with pytest.raises(ValueError):
            NetworkConfig(trunk_channels=())


class TestForward:
    def test_default_shapes(self):
        cfg = NetworkConfig()
        out = forward(init_params(cfg), clip_for(cfg), cfg)
        assert out.filter_logits.shape == (16, 25)
        assert out.predicted.shape == (16, 32, 32)
        assert out.dmr.shape == (512,)
        assert out.ar.shape == (64,)
        assert out.class_logits.shape == (4,)

    def test_zero_clip_predicts_zero(self):
        p = init_params(TINY)
        p = {k: v + 0.3 for k, v in p.items()}  # arbitrary params, nonzero biases
        out = forward(p, np.zeros((4, 8, 8)), TINY)
        np.testing.assert_array_equal(out.predicted.data, 0)

    def test_deterministic(self):
        p, c = init_params(TINY), clip_for(TINY)
        a, b = forward(p, c, TINY), forward(p, c, TINY)
        np.testing.assert_array_equal(a.predicted.data, b.predicted.data)
        np.testing.assert_array_equal(a.class_logits.data, b.class_logits.data)

    def test_filters_sample_conditioned(self):
        p = calibrate(init_params(TINY), [clip_for(TINY, s) for s in range(4)], TINY)
        a = forward(p, clip_for(TINY, 0), TINY).bank.filters.data
        b = forward(p, clip_for(TINY, 1), TINY).bank.filters.data
        assert not np.array_equal(a, b)

    def test_clip_shape_checked(self):
        with pytest.raises(ValueError):
            forward(init_params(TINY), np.zeros((5, 8, 8)), TINY)

    def test_predicted_within_input_range(self):
        p = init_params(TINY)
        c = clip_for(TINY, 3)
        pred = forward(p, c, TINY).predicted.data
        assert pred.min() >= c.min() - 1e-6 and pred.max() <= c.max() + 1e-6

    def test_argmax_invariant_to_monotone_rescale(self):
        p = init_params(TINY)
        p["cls.b"] = np.array([0.1, -0.2, 0.3], dtype=np.float32)
        z = forward(p, clip_for(TINY, 4), TINY).class_logits.data
        for f in (lambda v: 3 * v + 1, np.exp, lambda v: v ** 3):
            assert np.argmax(f(z)) == np.argmax(z)

    def test_batch_mode_uses_batch_statistics(self):
        p = init_params(TINY)
        clips = [clip_for(TINY, s) for s in range(3)]
        with no_grad():
            encs = [encode(p, c, TINY).frame_features.data for c in clips]
            outs = forward_batch(p, clips, TINY)
        feats = np.concatenate(encs).astype(np.float64)
        mu, var = feats.mean(axis=0), feats.var(axis=0)
        normed = (feats[:4] - mu) / np.sqrt(var + 1e-5)
        w, b = p["filter.fc.w"].astype(np.float64), p["filter.fc.b"].astype(np.float64)
        np.testing.assert_allclose(outs[0].filter_logits.data, normed @ w + b, atol=1e-5)


class TestCalibration:
    def test_statistics_match_numpy(self):
        p = cast_params(init_params(TINY), CHECK_DTYPE)
        clips = [clip_for(TINY, s) for s in range(5)]
        m, v = feature_statistics(p, clips, TINY)
        feats = np.concatenate([encode(p, c, TINY).frame_features.data for c in clips])
        np.testing.assert_allclose(m, feats.mean(axis=0), atol=1e-12)
        np.testing.assert_allclose(v, feats.var(axis=0), atol=1e-12)

    def test_calibrated_inference_matches_batch_mode_on_same_clips(self):
        p = cast_params(init_params(TINY), CHECK_DTYPE)
        clips = [clip_for(TINY, s) for s in range(3)]
        q = calibrate(p, clips, TINY)
        with no_grad():
            batch = forward_batch(p, clips, TINY)
            single = [forward(q, c, TINY) for c in clips]
        for a, b in zip(batch, single):
            np.testing.assert_allclose(a.filter_logits.data, b.filter_logits.data, atol=1e-10)

    def test_calibrate_copies(self):
        p = init_params(TINY)
        q = calibrate(p, [clip_for(TINY)], TINY)
        assert not p["filter.norm.mean"].any()
        assert q["filter.norm.mean"].dtype == np.float32


class TestEndToEndGradient:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_every_section(self, seed):
        """Per-section errors, judged against the scale of the whole gradient.

        The last filter-head bias is almost cancelled by the batch
        standardisation, so its own scale is round-off sized.
        """
        cfg = replace(TINY, seed=seed)
        p = cast_params(init_params(cfg), CHECK_DTYPE)
        rng = np.random.default_rng(seed)
        for k in p:
            if k.endswith(".b"):
                p[k] = rng.uniform(0.05, 0.2, size=p[k].shape) * rng.choice([-1, 1], size=p[k].shape)
        frames = [clip_for(cfg, seed, cfg.T + 1), clip_for(cfg, seed + 50, cfg.T + 1)]
        loss_cfg = LossConfig(huber_mode="per-pixel")
        names = trainable_sections(p)

        def loss(q):
            return batch_losses(q, frames, [0, 2], cfg, loss_cfg)[1].item()

        leaves = {k: tn.Tensor(v, requires_grad=k in names) for k, v in p.items()}
        with tn.Graph():
            tn.backward(batch_losses(leaves, frames, [0, 2], cfg, loss_cfg)[1])
        eps, diffs, scale = 1e-6, {}, 0.0
        with no_grad():
            for name in names:
                num = np.empty(p[name].size)
                for i in range(p[name].size):
                    hi, lo = p[name].copy(), p[name].copy()
                    hi.flat[i] += eps
                    lo.flat[i] -= eps
                    num[i] = (loss({**p, name: hi}) - loss({**p, name: lo})) / (2 * eps)
                ana = leaves[name].grad.ravel()
                diffs[name] = float(np.abs(ana - num).max())
                scale = max(scale, float(np.abs(ana).max()), float(np.abs(num).max()))
        for name, d in diffs.items():
            assert d / scale < 1e-5, name

    def test_clip_losses_targets_are_shifted_frames(self):
        p = init_params(TINY)
        frames = clip_for(TINY, 5, TINY.T + 1)
        out = forward(p, frames[:TINY.T], TINY)
        losses = clip_losses(p, frames, 1, TINY, LossConfig())
        r = np.abs(out.predicted.data.astype(np.float64) - frames[1:])
        expected = np.where(r < 0.01, 0.5 * r * r, 0.01 * r - 0.5e-4).mean()
        assert losses.fp.item() == pytest.approx(expected, rel=1e-5)


class TestModelFile:
    def test_round_trip(self, tmp_path):
        p = calibrate(init_params(TINY), [clip_for(TINY)], TINY)
        path = tmp_path / "m.dynm"
        save_model(p, TINY, path)
        q, cfg = load_model(path)
        assert cfg == TINY
        for k in p:
            assert np.array_equal(p[k], q[k]) and q[k].dtype == np.float32
        save_model(q, cfg, tmp_path / "again.dynm")
        assert (tmp_path / "again.dynm").read_bytes() == path.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.dynm"
        save_model(init_params(TINY), TINY, path)
        raw = bytearray(path.read_bytes())
        raw[0:4] = b"NOPE"
        path.write_bytes(bytes(raw))
        with pytest.raises(BadMagicError, match="bad magic"):
            load_model(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "m.dynm"
        save_model(init_params(TINY), TINY, path)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(TruncatedError, match="truncated"):
            load_model(path)

    def test_trailing(self, tmp_path):
        path = tmp_path / "m.dynm"
        save_model(init_params(TINY), TINY, path)
        path.write_bytes(path.read_bytes() + b"x")
        with pytest.raises(FormatError):
            load_model(path)

    def test_wrong_shape_rejected(self, tmp_path):
        p = init_params(TINY)
        p["cls.b"] = np.zeros(7, dtype=np.float32)
        with pytest.raises(ValueError):
            save_model(p, TINY, tmp_path / "m.dynm")
