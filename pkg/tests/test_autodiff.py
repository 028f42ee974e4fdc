import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gsreg import autodiff as ad
from gsreg.autodiff import AutodiffError, BatchNormState, ParamGroup, Tape
from gsreg.gradcheck import TOL, gradcheck, primitive_checks, unet_check


@pytest.fixture(scope="module")
def checks():
    return primitive_checks(seed=3)


def test_every_primitive_matches_finite_differences(checks):
    bad = {f"{n}[{k}]": e for n, errs in checks.items() for k, e in errs.items() if not e < TOL}
    assert not bad


@pytest.mark.parametrize("sim", ["mse", "lncc"])
def test_tiny_unet_end_to_end(sim):
    errs = unet_check(seed=1, similarity=sim)
    assert sorted(errs) == ["dec0.conv0", "dec0.conv1", "enc0.conv0", "enc0.conv1",
                            "enc1.conv0", "enc1.conv1", "head"]
    assert max(errs.values()) < TOL


def test_identity_kernel_conv_is_identity():
    x = np.random.default_rng(0).normal(size=(2, 3, 5, 5))
    w = np.zeros((3, 3, 3, 3))
    for c in range(3):
        w[c, c, 1, 1] = 1.0
    t = Tape()
    y = ad.conv2d(t.constant(x), t.constant(w), t.constant(np.zeros(3)))
    assert np.array_equal(y.value, x)


def test_leaky_relu_values():
    t = Tape()
    y = ad.leaky_relu(t.constant(np.array([-1.0, 2.0])), 0.01)
    np.testing.assert_array_equal(y.value, [-0.01, 2.0])


def test_conv_shape_error_names_primitive():
    t = Tape()
    with pytest.raises(Exception, match="conv2d"):
        ad.conv2d(t.constant(np.zeros((1, 3, 4, 4))), t.constant(np.zeros((2, 4, 3, 3))))


def test_sum_of_one_param_gives_ones_and_zeros_elsewhere():
    a = ParamGroup("a", [np.arange(6.0).reshape(2, 3)])
    b = ParamGroup("b", [np.ones(4)])
    t = Tape()
    pa, _ = t.param(a, 0), t.param(b, 0)
    g = t.backward(ad.sum_all(pa), [a, b])
    assert np.array_equal(g["a"], np.ones(6))
    assert np.array_equal(g["b"], np.zeros(4))


def test_zero_times_anything_gives_zero_gradients():
    a = ParamGroup("a", [np.random.default_rng(1).normal(size=(3, 3))])
    t = Tape()
    loss = ad.mul(ad.sum_all(ad.square(t.param(a, 0))), 0.0)
    assert not t.backward(loss, [a])["a"].any()


def test_non_scalar_loss_rejected():
    a = ParamGroup("a", [np.ones(3)])
    t = Tape()
    with pytest.raises(AutodiffError):
        t.backward(ad.square(t.param(a, 0)), [a])


def _graph(groups, rng_seed):
    rng = np.random.default_rng(rng_seed)
    c = rng.normal(size=(2, 3))
    t = Tape()
    x, y = t.param(groups[0], 0), t.param(groups[1], 0)
    h = ad.leaky_relu(ad.mul(x, y) + c, 0.1)
    l1 = ad.mean(ad.square(h))
    l2 = ad.sum_all(ad.div(x, ad.square(y) + 1.0))
    return t, l1, l2


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_two_backward_passes_match_separate_tapes(seed):
    rng = np.random.default_rng(seed)
    groups = [ParamGroup("x", [rng.normal(size=(2, 3))]), ParamGroup("y", [rng.normal(size=(2, 3))])]
    t, l1, l2 = _graph(groups, seed)
    g1, g2 = t.backward(l1, groups), t.backward(l2, groups)
    t1, l1b, _ = _graph(groups, seed)
    t2, _, l2b = _graph(groups, seed)
    for k in ("x", "y"):
        assert np.array_equal(g1[k], t1.backward(l1b, groups)[k])
        assert np.array_equal(g2[k], t2.backward(l2b, groups)[k])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 3))
def test_backward_is_linear(seed, lam):
    rng = np.random.default_rng(seed)
    groups = [ParamGroup("x", [rng.normal(size=(2, 3))]), ParamGroup("y", [rng.normal(size=(2, 3))])]
    t, l1, l2 = _graph(groups, seed)
    g1, g2 = t.backward(l1, groups), t.backward(l2, groups)
    t, l1, l2 = _graph(groups, seed)
    g = t.backward(ad.add(l1, ad.mul(l2, lam)), groups)
    for k in g:
        np.testing.assert_allclose(g[k], g1[k] + lam * g2[k], rtol=1e-12, atol=1e-12)


def test_batch_norm_running_stats_update():
    rng = np.random.default_rng(0)
    x = rng.normal(2.0, 3.0, size=(4, 2, 3, 3))
    st_ = BatchNormState(2)
    t = Tape()
    ad.batch_norm(t.constant(x), t.constant(np.ones(2)), t.constant(np.zeros(2)), "train", st_)
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3), ddof=1)
    np.testing.assert_allclose(st_.mean, 0.1 * mean, rtol=1e-12)
    np.testing.assert_allclose(st_.var, 0.9 + 0.1 * var, rtol=1e-12)


def test_batch_norm_eval_uses_running_stats():
    st_ = BatchNormState(1)
    st_.mean[:] = 2.0
    st_.var[:] = 4.0 - 1e-5
    t = Tape()
    y = ad.batch_norm(t.constant(np.full((1, 1, 2, 2), 6.0)), t.constant(np.ones(1)),
                      t.constant(np.zeros(1)), "eval", st_)
    np.testing.assert_allclose(y.value, 2.0, rtol=1e-12)


def test_gradcheck_flags_a_wrong_gradient():
    # a deliberately wrong vjp must be caught
    def bad_square(x):
        return ad._node(x.value ** 2, (x,), lambda g: (g * x.value,))

    errs = gradcheck(lambda t, v: ad.sum_all(bad_square(v["x"])), {"x": np.linspace(0.5, 2, 6)})
    assert errs["x"] > 0.1


def test_deterministic_forward_and_gradients():
    def run():
        rng = np.random.default_rng(11)
        g = ParamGroup("w", [rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)])
        x = rng.normal(size=(2, 2, 6, 6))
        t = Tape()
        w, b = t.params(g)
        y = ad.maxpool2(ad.leaky_relu(ad.conv2d(t.constant(x), w, b), 0.2))
        loss = ad.mean(ad.square(ad.upsample_nearest2(y)))
        return y.value, t.backward(loss, [g])["w"]

    (a, ga), (b, gb) = run(), run()
    assert np.array_equal(a, b) and np.array_equal(ga, gb)
