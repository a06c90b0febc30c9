import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fovtrack.geometry import fit_profile
from fovtrack.losses import (
    LossConfig,
    batch_errors,
    error_angle,
    mse_grad,
    mse_loss,
    multires_grad,
    multires_loss,
    objective,
    performance_aware_grad,
    performance_aware_loss,
    smooth_max,
    smooth_max_grad,
)

TWO_KNOT = fit_profile([(5, 4.0), (20, 8.0)])


def perf_cfg(**kw):
    return LossConfig(kind="performance_aware", profile=TWO_KNOT, theta_i=5.0, **kw)


def test_mse_example():
    x = batch_errors([[0.1, 0.0], [0.0, 0.2]], [[0, 0], [0, 0]])
    assert x.tolist() == pytest.approx([0.01, 0.04])
    assert mse_loss(x) == pytest.approx(0.025)
    assert mse_grad(x).tolist() == [0.5, 0.5]


def test_smooth_max_reference_value():
    # (1/100) ln(e^1 + e^4), computed with mpmath at 30 digits
    assert smooth_max([0.01, 0.04], 100) == pytest.approx(0.0404858735157374, rel=1e-13)


def test_smooth_max_survives_huge_products():
    # naive exp(N x) overflows here
    assert smooth_max([10.0, 9.0], 100) == pytest.approx(10.0 + math.log1p(math.exp(-100)) / 100)


def test_lse_sandwich_random_batches():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        b = int(rng.integers(1, 129))
        x = rng.exponential(0.02, size=b)
        for N in (10, 50, 100):
            s = smooth_max(x, N)
            assert x.max() <= s <= x.max() + math.log(b) / N


@given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.randoms())
def test_smooth_max_permutation_invariant(xs, rnd):
    ys = list(xs)
    rnd.shuffle(ys)
    assert smooth_max(xs, 50) == pytest.approx(smooth_max(ys, 50), rel=1e-12, abs=1e-15)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.integers(0, 29), st.floats(0, 1))
def test_smooth_max_monotone(xs, i, bump):
    i %= len(xs)
    ys = list(xs)
    ys[i] += bump
    assert smooth_max(ys, 50) >= smooth_max(xs, 50)


def test_smooth_max_grad_is_softmax_and_matches_fd():
    rng = np.random.default_rng(1)
    x = rng.exponential(0.02, size=16)
    g = smooth_max_grad(x, 100)
    assert g.sum() == pytest.approx(1.0)
    h = 1e-7
    for i in range(x.size):
        a, b = x.copy(), x.copy()
        a[i] += h
        b[i] -= h
        fd = (smooth_max(a, 100) - smooth_max(b, 100)) / (2 * h)
        assert abs(fd - g[i]) <= 1e-6 * max(abs(g[i]), 1e-12) + 1e-9


def test_worst_sample_weight_grows_with_n():
    x = np.array([0.001, 0.002, 0.0015, 0.03])
    w = [smooth_max_grad(x, N)[3] for N in (10, 50, 100)]
    assert w[0] < w[1] < w[2]


def test_error_angle():
    assert error_angle(math.radians(5) ** 2) == pytest.approx(5.0)


def test_perf_zero_error_is_profile_at_theta_i():
    assert performance_aware_loss([0.0], perf_cfg()) == 4.0


def test_perf_zero_error_batch_carries_lse_offset():
    # smooth_max of B zeros is ln(B)/N, not 0
    angle = math.degrees(math.sqrt(math.log(2) / 100))
    assert performance_aware_loss([0.0, 0.0], perf_cfg()) == pytest.approx(4.0 + 4.0 * angle / 15)


def test_perf_five_degree_example():
    # one sample, so smooth_max equals the error itself: 5 deg -> latency at 10 deg
    x = [math.radians(5) ** 2]
    assert performance_aware_loss(x, perf_cfg(N=100)) == pytest.approx(4.0 + 4.0 * 5 / 15, rel=1e-12)


def test_perf_monotone_in_added_outlier():
    rng = np.random.default_rng(2)
    cfg = perf_cfg()
    for _ in range(100):
        x = rng.exponential(0.002, size=8)
        worse = np.append(x, x.max() + rng.exponential(0.01))
        assert performance_aware_loss(worse, cfg) >= performance_aware_loss(x, cfg)


def test_perf_grad_matches_fd():
    rng = np.random.default_rng(3)
    profile = fit_profile([(5, 4.0), (10, 5.0), (20, 8.0), (30, 14.0)])
    cfg = LossConfig(kind="performance_aware", profile=profile, theta_i=5.0, N=50)
    x = rng.exponential(0.01, size=12)
    g = performance_aware_grad(x, cfg)
    h = 1e-8
    for i in range(x.size):
        a, b = x.copy(), x.copy()
        a[i] += h
        b[i] -= h
        fd = (performance_aware_loss(a, cfg) - performance_aware_loss(b, cfg)) / (2 * h)
        assert fd == pytest.approx(g[i], rel=1e-5)


def test_perf_grad_finite_on_perfect_batch():
    g = performance_aware_grad([0.0, 0.0], perf_cfg())
    assert np.all(np.isfinite(g))


def test_config_validation():
    with pytest.raises(ValueError):
        LossConfig(kind="huber")
    with pytest.raises(ValueError):
        LossConfig(kind="performance_aware")
    with pytest.raises(ValueError):
        LossConfig(N=0)


def test_batch_errors_rejects_bad_input():
    with pytest.raises(ValueError):
        mse_loss([])
    with pytest.raises(ValueError):
        smooth_max([0.1, float("nan")], 10)


def test_multires_sums_exits():
    cfg = LossConfig(kind="multires", profile=TWO_KNOT, exit_weights={3: 0.5})
    per_exit = {3: np.array([0.0]), 4: np.array([math.radians(5) ** 2])}
    want = 0.5 * 4.0 + (4.0 + 4.0 / 3)
    assert multires_loss(per_exit, cfg) == pytest.approx(want)
    grads = multires_grad(per_exit, cfg)
    assert set(grads) == {3, 4}
    with pytest.raises(KeyError):
        multires_loss(per_exit, cfg, exits=[3, 5])


def test_single_exit_multires_equals_perf():
    x = np.array([0.001, 0.004, 0.0005])
    cfg = LossConfig(kind="multires", profile=TWO_KNOT)
    assert multires_loss({8: x}, cfg) == performance_aware_loss(x, perf_cfg())


@pytest.mark.parametrize("kind", ["mse", "smooth_max", "performance_aware", "multires"])
def test_objective_prediction_gradient_matches_fd(kind):
    rng = np.random.default_rng(4)
    profile = fit_profile([(5, 4.0), (10, 5.0), (20, 8.0), (30, 14.0)])
    cfg = LossConfig(kind=kind, profile=profile, N=50)
    truth = rng.normal(0, 0.1, size=(6, 2))
    preds = {2: truth + rng.normal(0, 0.05, size=(6, 2)), 3: truth + rng.normal(0, 0.05, size=(6, 2))}
    value, dpreds = objective(preds, truth, cfg)
    assert set(dpreds) == ({2, 3} if kind == "multires" else {3})
    h = 1e-7
    for l, d in dpreds.items():
        for idx in np.ndindex(d.shape):
            plus = {k: v.copy() for k, v in preds.items()}
            minus = {k: v.copy() for k, v in preds.items()}
            plus[l][idx] += h
            minus[l][idx] -= h
            fd = (objective(plus, truth, cfg)[0] - objective(minus, truth, cfg)[0]) / (2 * h)
            assert fd == pytest.approx(d[idx], rel=1e-5, abs=1e-9)
