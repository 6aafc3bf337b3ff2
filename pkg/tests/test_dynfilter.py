import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dynmotion import tensor as tn
from dynmotion.dynfilter import DynamicFilterBank, apply_filters, flatten_dmr_input, make_filters
from dynmotion.losses import LossConfig, huber_fp
from dynmotion.tensor import CHECK_DTYPE, Tensor, grad_check

from oracles import apply_filters_loop, neighborhood_bounds


def t64(x, grad=False):
    return Tensor(np.asarray(x, dtype=CHECK_DTYPE), requires_grad=grad)


def bank(f):
    return DynamicFilterBank(t64(f))


def random_bank(rng, T, s):
    return make_filters(t64(rng.normal(scale=2.0, size=(T, s * s))))


class TestMakeFilters:
    def test_uniform(self):
        b = make_filters(t64(np.zeros((3, 25))))
        assert b.filters.shape == (3, 5, 5)
        np.testing.assert_array_equal(b.filters.data, 0.04)

    def test_non_square_tap_count_rejected(self):
        with pytest.raises(ValueError, match="perfect square"):
            make_filters(t64([[0.0, np.log(2)]]))

    def test_saturated_is_one_hot_shift(self):
        z = np.zeros((1, 25))
        z[0, 2 * 5 + 3] = 50.0  # row 2 (centre), column 3: one pixel to the right
        b = make_filters(t64(z))
        assert b.filters.data[0, 2, 3] > 1 - 1e-12
        clip = np.random.default_rng(0).uniform(size=(1, 6, 7))
        out = apply_filters(t64(clip), b).data
        expected = clip[:, :, np.minimum(np.arange(7) + 1, 6)]
        np.testing.assert_allclose(out, expected, atol=1e-12)

    @given(st.integers(1, 4), st.sampled_from([1, 3, 5, 7]), st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_bank_invariants(self, T, s, seed):
        f = random_bank(np.random.default_rng(seed), T, s).filters.data
        assert (f >= 0).all()
        np.testing.assert_allclose(f.sum(axis=(1, 2)), 1, atol=1e-12)


class TestApplyFilters:
    def test_identity_filter(self):
        clip = np.random.default_rng(1).uniform(size=(3, 5, 6))
        f = np.zeros((3, 3, 3))
        f[:, 1, 1] = 1
        np.testing.assert_array_equal(apply_filters(t64(clip), bank(f)).data, clip)

    def test_uniform_on_constant(self):
        clip = np.full((2, 4, 4), 0.37)
        out = apply_filters(t64(clip), bank(np.full((2, 5, 5), 1 / 25))).data
        np.testing.assert_allclose(out, 0.37, atol=1e-15)

    def test_row_shift_clamps_edge(self):
        f = np.zeros((1, 3, 3))
        f[0, 1, 2] = 1  # horizontal offset +1
        out = apply_filters(t64([[[1.0, 2.0, 3.0, 4.0]]]), bank(f)).data
        np.testing.assert_array_equal(out, [[[2, 3, 4, 4]]])

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        worst = 0.0
        for _ in range(100):
            T, H, W = rng.integers(1, 4), rng.integers(1, 9), rng.integers(1, 9)
            s = int(rng.choice([1, 3, 5]))
            clip = rng.uniform(size=(T, H, W))
            b = random_bank(rng, T, s)
            got = apply_filters(t64(clip), b).data
            worst = max(worst, float(np.abs(got - apply_filters_loop(clip, b.filters.data)).max()))
        assert worst <= 1e-12

    def test_convexity(self):
        rng = np.random.default_rng(3)
        violations = 0
        for _ in range(200):
            s = int(rng.choice([3, 5]))
            clip = rng.uniform(size=(2, 6, 6))
            out = apply_filters(t64(clip), random_bank(rng, 2, s)).data
            lo, hi = neighborhood_bounds(clip, s)
            violations += int(((out < lo - 1e-15) | (out > hi + 1e-15)).sum())
        assert violations == 0

    def test_translation_equivariance_interior(self):
        rng = np.random.default_rng(4)
        s, shift = 5, 2
        clip = rng.uniform(size=(2, 20, 20))
        b = random_bank(rng, 2, s)
        moved = np.roll(clip, shift, axis=2)
        a = apply_filters(t64(clip), b).data
        m = apply_filters(t64(moved), b).data
        inner = slice(s + shift, 20 - s - shift)
        np.testing.assert_allclose(m[:, inner, inner], np.roll(a, shift, axis=2)[:, inner, inner],
                                   atol=1e-14)

    def test_frame_count_mismatch(self):
        with pytest.raises(ValueError):
            apply_filters(t64(np.zeros((3, 4, 4))), bank(np.full((2, 3, 3), 1 / 9)))

    def test_even_filter_rejected(self):
        with pytest.raises(ValueError):
            apply_filters(t64(np.zeros((1, 4, 4))), bank(np.full((1, 2, 2), 0.25)))

    def test_gradient_wrt_clip(self):
        rng = np.random.default_rng(5)
        clip, f = rng.uniform(size=(2, 4, 5)), random_bank(rng, 2, 3).filters.data
        w = t64(rng.normal(size=(2, 4, 5)))
        err = grad_check(lambda c: tn.sum_all(tn.mul(apply_filters(c, bank(f)), w)), clip)
        assert err < 1e-6

    def test_huber_chain_gradient_wrt_logits(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            clip, target = rng.uniform(size=(3, 6, 6)), rng.uniform(size=(3, 6, 6))
            cfg = LossConfig(huber_mode="per-pixel")
            f = lambda z: huber_fp(apply_filters(t64(clip), make_filters(z)), t64(target), cfg)
            assert grad_check(f, rng.normal(size=(3, 9))) < 1e-6


class TestFlatten:
    def test_layout(self):
        f = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        np.testing.assert_array_equal(flatten_dmr_input(bank(f)).data, [1, 2, 3, 4])

    def test_length(self):
        assert flatten_dmr_input(make_filters(t64(np.zeros((16, 25))))).shape == (400,)

    def test_uniform_entries(self):
        v = flatten_dmr_input(make_filters(t64(np.zeros((4, 25))))).data
        np.testing.assert_array_equal(v, 1 / 25)
