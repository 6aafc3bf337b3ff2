import json

import numpy as np
import pytest

from dynmotion.data import Dataset, SyntheticSpec, gen_synthetic
from dynmotion.model import NetworkConfig, batch_losses, init_params, is_classifier_section
from dynmotion.tensor import no_grad
from dynmotion.trainer import (TrainConfig, batch_gradients, fit, lr_schedule, pretrain,
                               sgd_step, train_joint)

from oracles import nesterov_loop

NET = NetworkConfig(T=4, H=16, W=16, s=3, dmr_dim=16, ar_dim=8, trunk_channels=(4, 6), seed=3)


@pytest.fixture(scope="module")
def data():
    return gen_synthetic(SyntheticSpec(num_clips=32, T=4, H=16, W=16), seed=11)


def scalar_step(w, g, lr, mu, wd, v=None):
    params, vel = {"w": np.array([w])}, {} if v is None else {"w": np.array([v])}
    sgd_step(params, {"w": np.array([g])}, vel, lr, mu, wd)
    return params["w"][0], vel["w"][0]


class TestSgdStep:
    def test_fixed_point(self):
        assert scalar_step(1.0, 0.0, 0.1, 0.9, 0.0, v=0.0) == (1.0, 0.0)

    def test_plain_step(self):
        w, _ = scalar_step(1.0, 0.5, 0.1, 0.0, 0.0)
        assert w == pytest.approx(0.95, abs=1e-15)

    def test_nesterov_step(self):
        w, v = scalar_step(1.0, 0.5, 0.1, 0.9, 0.0, v=0.0)
        assert v == 0.5
        assert w == pytest.approx(0.905, abs=1e-15)

    def test_matches_loop_oracle_over_steps(self):
        rng = np.random.default_rng(0)
        w = rng.normal(size=5)
        params, vel = {"w": w.copy()}, {}
        ref_w, ref_v = w.copy(), np.zeros(5)
        for _ in range(6):
            g = rng.normal(size=5)
            sgd_step(params, {"w": g}, vel, 0.05, 0.9, 1e-3)
            for i in range(5):
                ref_w[i], ref_v[i] = nesterov_loop(ref_w[i], g[i], ref_v[i], 0.05, 0.9, 1e-3)
        np.testing.assert_allclose(params["w"], ref_w, rtol=0, atol=1e-15)

    def test_zero_lr_changes_nothing(self):
        w = np.array([0.3, -2.0])
        params = {"w": w.copy()}
        sgd_step(params, {"w": np.array([1.0, 5.0])}, {}, 0.0, 0.9, 1e-4)
        np.testing.assert_array_equal(params["w"], w)

    def test_weight_decay_contracts(self):
        params, vel = {"w": np.array([2.0, -3.0])}, {}
        prev = np.abs(params["w"])
        for _ in range(10):
            sgd_step(params, {"w": np.zeros(2)}, vel, 0.1, 0.9, 0.05)
            cur = np.abs(params["w"])
            assert (cur < prev).all()
            prev = cur

    def test_non_finite_gradient(self):
        with pytest.raises(FloatingPointError):
            sgd_step({"w": np.ones(2)}, {"w": np.array([1.0, np.nan])}, {}, 0.1)


class TestLrSchedule:
    def test_start(self):
        assert lr_schedule(0, 0.1, 100) == 0.1

    def test_first_milestone(self):
        assert lr_schedule(50, 0.1, 100) == pytest.approx(0.01)
        assert lr_schedule(49, 0.1, 100) == 0.1

    def test_second_milestone(self):
        assert lr_schedule(75, 0.1, 100) == pytest.approx(0.001)

    def test_absolute_milestones(self):
        assert lr_schedule(3, 1.0, None, milestones=(2, 5)) == pytest.approx(0.1)

    def test_negative_epoch(self):
        with pytest.raises(ValueError):
            lr_schedule(-1, 0.1)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(lr=0), dict(momentum=1.0), dict(weight_decay=-1),
                                    dict(batch_size=0), dict(mode="semi")])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_mode_weights(self):
        assert TrainConfig(mode="cls-only", alpha=0.1).loss_config().alpha == 0
        assert TrainConfig(mode="pretrain").loss_config().beta == 0


class TestPretrain:
    def test_classifier_untouched(self, data):
        init = init_params(NET)
        res = pretrain(data, NET, TrainConfig(lr=1.0, epochs=1, huber_mode="frame-norm"), params=init)
        for k in init:
            if is_classifier_section(k):
                assert np.array_equal(res.params[k], init[k]), k
        assert not np.array_equal(res.params["filter.fc.w"], init["filter.fc.w"])

    def test_fp_loss_strictly_decreases(self, data):
        res = pretrain(data, NET, TrainConfig(lr=3.0, epochs=5, huber_mode="frame-norm",
                                              milestones=(), seed=2))
        fp = [row["loss_fp"] for row in res.trace]
        assert len(fp) == 5
        assert all(b < a for a, b in zip(fp, fp[1:])), fp

    def test_zero_epochs_is_identity(self, data):
        init = init_params(NET)
        res = pretrain(data, NET, TrainConfig(epochs=0), params=init)
        assert all(np.array_equal(res.params[k], init[k]) for k in init)
        assert res.trace == []

    def test_empty_dataset(self):
        empty = Dataset(np.zeros((0, 5, 16, 16), np.float32), np.zeros(0, np.uint32), 4)
        with pytest.raises(ValueError, match="empty"):
            pretrain(empty, NET, TrainConfig(epochs=1))


class TestJoint:
    def test_cls_only_ignores_prediction_loss(self, data):
        """Changing a frame that is only ever a prediction target leaves cls-only gradients alone."""
        params = init_params(NET)
        altered = Dataset(data.frames.copy(), data.labels, data.num_classes)
        altered.frames[:, -1] = 1.0 - altered.frames[:, -1]
        cfg = TrainConfig(mode="cls-only").loss_config()
        idx = list(range(8))
        sections = [k for k in params if not k.startswith("filter.norm")]
        g1, r1 = batch_gradients(params, data, idx, NET, cfg, sections)
        g2, r2 = batch_gradients(params, altered, idx, NET, cfg, sections)
        assert any(a.loss_fp != b.loss_fp for a, b in zip(r1, r2))
        for k in g1:
            assert np.array_equal(g1[k], g2[k]), k

    def test_one_small_step_lowers_loss(self, data):
        params = init_params(NET)
        idx = np.arange(16)
        frames, labels = [data.frames[i] for i in idx], [int(data.labels[i]) for i in idx]
        cfg = TrainConfig(lr=1e-3, batch_size=16, epochs=1, milestones=(), seed=0)
        with no_grad():
            before = batch_losses(params, frames, labels, NET, cfg.loss_config())[1].item()
        res = fit(params, data.subset(idx), NET, cfg)
        with no_grad():
            after = batch_losses(res.params, frames, labels, NET, cfg.loss_config())[1].item()
        assert after < before

    def test_deterministic(self, data):
        cfg = TrainConfig(lr=0.05, epochs=2, seed=4)
        a = train_joint(data, NET, cfg).params
        b = train_joint(data, NET, cfg).params
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_threads_do_not_change_bytes(self, data):
        a = train_joint(data, NET, TrainConfig(lr=0.05, epochs=1, seed=4)).params
        b = train_joint(data, NET, TrainConfig(lr=0.05, epochs=1, seed=4, threads=3)).params
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)

    def test_class_count_mismatch(self, data):
        with pytest.raises(ValueError, match="classes"):
            train_joint(data, NetworkConfig(T=4, H=16, W=16, num_classes=3), TrainConfig(epochs=1))

    def test_pretrain_mode_rejected(self, data):
        with pytest.raises(ValueError):
            train_joint(data, NET, TrainConfig(mode="pretrain"))

    def test_buffers_not_trainable(self, data):
        with pytest.raises(ValueError, match="buffers"):
            fit(init_params(NET), data, NET, TrainConfig(epochs=1), sections=["filter.norm.mean"])

    def test_trace_file(self, data, tmp_path):
        path = tmp_path / "trace.jsonl"
        res = train_joint(data, NET, TrainConfig(lr=0.05, epochs=2), trace_path=path)
        rows = [json.loads(line) for line in path.read_text().splitlines()]
        assert rows == res.trace
        assert set(rows[0]) == {"epoch", "lr", "loss_fp", "loss_cls", "loss_total", "train_acc"}

    def test_alpha_only_reweights(self, data):
        """alpha=0 and alpha=0.1 see the same first-batch classification loss."""
        params = init_params(NET)
        idx = list(range(16))
        sections = [k for k in params if not k.startswith("filter.norm")]
        _, r0 = batch_gradients(params, data, idx, NET, TrainConfig(alpha=0.0).loss_config(), sections)
        _, r1 = batch_gradients(params, data, idx, NET, TrainConfig(alpha=0.1).loss_config(), sections)
        assert [r.loss_cls for r in r0] == [r.loss_cls for r in r1]
