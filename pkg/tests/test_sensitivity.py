import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from prcl import autodiff as ad
from prcl.autodiff import Tensor
from prcl.data import Dataset, generate_dataset
from prcl.fixtures import fixture_data, load_fixture
from prcl.layout import PAPER_LEVELS, QuantLevelSet, plan_gradient, plan_hessian_baseline
from prcl.network import build_network, dense, relu, train
from prcl.sensitivity import (SensitivityProfile, full_profile, hessian_trace_profile, hutchinson_trace,
                              input_gradient_profile, param_gradient_profile)


def scalar_net(w=2.0):
    net = build_network([dense(1, 1, bias=False)], "mse", 0)
    net.params[0][0] = np.array([[w]])
    return net


@pytest.fixture(scope="module")
def mlp():
    return load_fixture("mlp"), fixture_data("mlp")["calib"]


def test_loss_input_norm_hand_example():
    prof = input_gradient_profile(scalar_net(), Dataset([[1.0], [1.0]], [[0.0], [0.0]]))
    assert prof.records[-1].input_grad_norm == 4.0
    assert prof.sample_count == 2


def test_opposite_residuals_cancel():
    data = Dataset([[1.0], [1.0]], [[0.0], [4.0]])  # residuals +2 and -2
    assert input_gradient_profile(scalar_net(), data).records[-1].input_grad_norm == 0.0
    ablation = input_gradient_profile(scalar_net(), data, aggregate="sum-of-norms")
    assert ablation.records[-1].input_grad_norm == 4.0


def test_empty_or_bad_aggregate():
    with pytest.raises(ValueError):
        input_gradient_profile(scalar_net(), Dataset([[1.0]], [[0.0]]), aggregate="max")


def test_input_profile_matches_directional_oracle(mlp):
    net, calib = mlp
    prof = input_gradient_profile(net, calib)
    step = 1e-5
    for i, shape in enumerate(net.site_shapes()):
        # shifting every sample's site tensor by s*e_k differentiates the summed loss
        # along e_k, which recovers coordinate k of the gradient sum
        n = int(np.prod(shape))
        col = np.empty(n)
        for k in range(n):
            shift = np.zeros(shape)
            shift.flat[k] = 1.0

            def f(s):
                pert = lambda j, h: ad.add(h, Tensor(s * shift)) if j == i else h  # noqa: E731
                return net.run(calib.inputs, calib.labels, perturb=pert, reduction="sum")[1]

            col[k] = (f(step) - f(-step)) / (2 * step)
        ref = np.linalg.norm(col)
        assert abs(prof.records[i].input_grad_norm - ref) <= 1e-4 * ref


def test_param_profile_matches_finite_differences(mlp):
    net, calib = mlp
    prof = param_gradient_profile(net, calib)
    for i in net.param_layers:
        w0 = net.flat_params(i)
        fd = ad.finite_diff_grad(
            lambda w: net.run(calib.inputs, calib.labels, net.unflatten(w, i), reduction="sum")[1], w0)
        ref = np.linalg.norm(fd)
        assert abs(prof.records[i].param_grad_norm - ref) <= 1e-5 * ref
    assert prof.records[1].param_grad_norm is None  # relu
    assert prof.records[-1].param_grad_norm is None  # loss


def test_well_trained_quadratic_has_zero_param_norm():
    prof = param_gradient_profile(scalar_net(1.0), Dataset([[1.0]], [[1.0]]))
    assert prof.records[0].param_grad_norm <= 1e-10


def test_untrained_net_has_positive_param_norms():
    net = build_network([dense(2, 8), relu(), dense(8, 2)], "softmax_cross_entropy", 4)
    prof = param_gradient_profile(net, generate_dataset("two_moons", 64, 1))
    assert all(prof.records[i].param_grad_norm > 0 for i in net.param_layers)


def test_trained_param_norms_bounded_by_target():
    data = generate_dataset("two_moons", 128, 5)
    net = build_network([dense(2, 8), relu(), dense(8, 2)], "softmax_cross_entropy", 0)
    t = train(net, data, "momentum", 0.1, 500, 1e-3).meta["grad_norm_target"]
    prof = param_gradient_profile(net, data)
    # the profile sums over samples; the target bounds the mean gradient
    for i in net.param_layers:
        assert prof.records[i].param_grad_norm / data.m <= t * net.param_count


# -- Hutchinson -------------------------------------------------------------

def test_identity_hessian_trace_is_exact():
    mean, se, samples = hutchinson_trace(lambda v: v, 7, 5, seed=3)
    assert mean == 7.0 and np.all(samples == 7.0)


def test_diag_trace_converges_to_six():
    d = np.array([1.0, 2.0, 3.0])
    mean, _, _ = hutchinson_trace(lambda v: ad.hvp(
        lambda w: ad.mul(Tensor(0.5), ad.total(ad.mul(Tensor(d), ad.mul(w, w)))), np.zeros(3), v), 3, 1000, 0)
    assert abs(mean - 6.0) <= 0.05 * 6.0


def test_hutchinson_unbiased_across_seeds():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((6, 6))
    A = a + a.T
    est = np.array([hutchinson_trace(lambda v: A @ v, 6, 20, seed)[0] for seed in range(30)])
    se = est.std(ddof=1) / math.sqrt(est.size)
    assert abs(est.mean() - np.trace(A)) <= 3 * se


def test_hutchinson_workers_do_not_change_result():
    rng = np.random.default_rng(1)
    A = rng.standard_normal((5, 5))
    one = hutchinson_trace(lambda v: A @ v, 5, 40, 2)
    many = hutchinson_trace(lambda v: A @ v, 5, 40, 2, workers=3)
    assert one[0] == many[0] and np.array_equal(one[2], many[2])


def test_trace_profile_absent_for_param_free_units(mlp):
    net, calib = mlp
    prof = hessian_trace_profile(net, calib.subset(range(32)), probes=2, seed=0)
    for r in prof.records:
        assert (r.hessian_trace is None) == (not r.has_params)
    with pytest.raises(ValueError):
        hessian_trace_profile(net, calib, probes=0)


# -- properties -------------------------------------------------------------

@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_input_profile_permutation_invariant(seed):
    net = load_fixture("mlp")
    calib = fixture_data("mlp")["calib"]
    perm = np.random.default_rng(seed).permutation(calib.m)
    assert input_gradient_profile(net, calib).input_norms == input_gradient_profile(net, calib.subset(perm)).input_norms


@settings(max_examples=10, deadline=None)
@given(st.sampled_from([0.5, 2.0, 4.0, 0.125]))
def test_loss_scaling_scales_statistics_and_keeps_plans(c):
    base_net = load_fixture("mlp")
    calib = fixture_data("mlp")["calib"].subset(range(64))
    scaled_net = base_net.copy()
    scaled_net.loss_scale = c
    a = full_profile(base_net, calib, probes=4)
    b = full_profile(scaled_net, calib, probes=4)
    # powers of two scale exactly
    assert b.input_norms == [c * v for v in a.input_norms]
    assert [v and v * c for v in a.param_norms] == b.param_norms
    for ta, tb in zip(a.traces, b.traces):
        assert (ta is None and tb is None) or tb == pytest.approx(c * ta, rel=1e-12)
    levels = QuantLevelSet.partition(PAPER_LEVELS, len(a))
    assert plan_gradient(a, levels).ids() == plan_gradient(b, levels).ids()
    hl = QuantLevelSet.partition(PAPER_LEVELS, len(base_net.param_layers))
    assert plan_hessian_baseline(a, hl).ids() == plan_hessian_baseline(b, hl).ids()


def test_profile_json_round_trip(mlp):
    net, calib = mlp
    prof = full_profile(net, calib.subset(range(16)), probes=2)
    back = SensitivityProfile.from_dict(prof.to_dict())
    assert back.to_json() == prof.to_json()
    assert all(v >= 0 and math.isfinite(v) for v in back.input_norms)
