import pytest

from dynmotion.gradcheck import CHECKS, TOLERANCE, all_pass, run_checks

REQUIRED = {"elementwise", "matmul", "conv3d", "softmax", "make_filters", "apply_filters",
            "huber_fp[per-pixel]", "huber_fp[frame-norm]", "cross_entropy", "composite"}


class TestSuite:
    def test_covers_every_op(self):
        assert REQUIRED <= set(CHECKS)

    @pytest.mark.parametrize("name", sorted(set(CHECKS) - {"composite"}))
    def test_op_below_tolerance(self, name):
        errors = run_checks(seeds=(0, 1), names=[name])
        assert errors[name] < TOLERANCE

    def test_composite_one_seed(self):
        assert run_checks(seeds=(5,), names=["composite"])["composite"] < TOLERANCE

    def test_unknown_name(self):
        with pytest.raises(ValueError):
            run_checks(names=["fft"])

    def test_all_pass(self):
        assert all_pass({"a": 1e-9, "b": 5e-7})
        assert not all_pass({"a": 1e-9, "b": 2e-6})
