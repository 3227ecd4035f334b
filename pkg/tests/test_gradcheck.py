import numpy as np
import pytest

from wdrop import tensor as T
from wdrop.gradcheck import SUITE_OPS, NondeterministicModelError, finite_diff_check, run_suite
from wdrop.tensor import Tensor


def test_linear_layer_error_tiny(rng):
    x = Tensor(rng.standard_normal((4, 6)))
    w = Tensor(rng.standard_normal((3, 6)))
    b = Tensor(rng.standard_normal(3))
    probe = rng.standard_normal((4, 3))

    def fn():
        return T.sum_all(T.mul(T.linear(x, w, b), Tensor(probe)))

    assert finite_diff_check(fn, [w, b], coords_per_param=10, rng=rng) < 1e-6


def test_conv_relu_chain_with_kink_exclusion(rng):
    x = Tensor(rng.standard_normal((2, 2, 6, 6)))
    w = Tensor(rng.standard_normal((3, 2, 3, 3)))
    probe = rng.standard_normal((2, 3, 6, 6))

    def fn():
        pre = T.conv2d(x, w, padding=1)
        return T.sum_all(T.mul(T.relu(pre), Tensor(probe))), pre.data

    assert finite_diff_check(fn, [x, w], coords_per_param=20, rng=rng) < 1e-4


def test_doubled_gradient_reports_half(rng, monkeypatch):
    monkeypatch.setenv("WDROP_SABOTAGE_OPS", "linear")
    x = Tensor(rng.standard_normal((2, 5)))
    w = Tensor(rng.standard_normal((4, 5)))

    def fn():
        return T.sum_all(T.linear(x, w))

    assert finite_diff_check(fn, [w], rng=rng) == pytest.approx(0.5, abs=1e-6)


def test_nondeterministic_model_rejected(rng):
    w = Tensor(rng.standard_normal(3))
    noise = np.random.default_rng(0)

    def fn():
        return T.sum_all(T.mul(w, Tensor(noise.random(3))))

    with pytest.raises(NondeterministicModelError):
        finite_diff_check(fn, [w])


def test_kink_coordinates_are_skipped():
    # pre-activation exactly at the kink for every coordinate
    w = Tensor(np.zeros(4))

    def fn():
        return T.sum_all(T.relu(w)), w.data.copy()

    err, checked, skipped = finite_diff_check(fn, [w], coords_per_param=4, return_details=True)
    assert (checked, skipped) == (0, 4)


@pytest.mark.parametrize("op", [o for o in SUITE_OPS if o != "conv4"])
def test_suite_op_passes(op):
    (res,) = run_suite([op])
    assert res.checked > 0
    assert res.passed(1e-4), f"{op}: {res.max_rel_error:.3e}"


def test_suite_flags_sabotaged_conv(monkeypatch):
    monkeypatch.setenv("WDROP_SABOTAGE_OPS", "conv2d")
    (res,) = run_suite(["conv2d"])
    assert not res.passed(1e-4)
