import gc
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gsreg import autodiff as ad
from gsreg import objective
from gsreg.autodiff import ParamGroup, Tape
from gsreg.network import DirectField, UNetConfig, build_unet
from gsreg.selftest import projection_violations, random_pair
from gsreg.surgery import (AdamState, AgrRandom, GlobalProject, LayerwiseProject, SimilarityOnly,
                           WeightedSum, adam_step, apply_strategy, compute_gradients,
                           parse_strategy, project_if_conflict, regroup, strategy_label,
                           train_step, ungroup)

vec = lambda *v: np.array(v, dtype=float)


# ---------------------------------------------------------------- projection

def test_non_conflicting_pass_through():
    g = vec(1, 0)
    assert project_if_conflict(g, vec(1, 0)) is g


def test_hand_projection():
    out = project_if_conflict(vec(1, -1), vec(0, 1))
    np.testing.assert_array_equal(out, [1, 0])
    assert out @ vec(0, 1) == 0


def test_zero_similarity_and_zero_regularizer():
    np.testing.assert_array_equal(project_if_conflict(vec(0, 0), vec(2, -7)), [0, 0])
    np.testing.assert_array_equal(project_if_conflict(vec(3, 4), vec(0, 0)), [3, 4])


def test_length_mismatch():
    with pytest.raises(ValueError):
        project_if_conflict(vec(1, 2), vec(1, 2, 3))


def test_matches_textbook_formula_on_generic_inputs():
    rng = np.random.default_rng(0)
    for _ in range(200):
        gs, gr = rng.normal(size=50), rng.normal(size=50)
        if gs @ gr > 0:
            continue
        ref = gs - (gs @ gr) / (gr @ gr) * gr
        np.testing.assert_allclose(project_if_conflict(gs, gr), ref, rtol=1e-12, atol=1e-12)


@settings(max_examples=300)
@given(st.integers(0, 2**32 - 1))
def test_projection_invariants_random(seed):
    gs, gr = random_pair(np.random.default_rng(seed))
    assert projection_violations(gs, gr) == []


@given(arrays(np.float64, 3, elements=st.floats(-1e3, 1e3)),
       arrays(np.float64, 3, elements=st.floats(-1e3, 1e3)))
def test_projection_invariants_small_vectors(gs, gr):
    assert projection_violations(gs, gr) == []


def test_regularizer_below_guard_passes_through():
    g = vec(1, 1, 1)
    np.testing.assert_array_equal(project_if_conflict(g, vec(-1e-73, -1e-73, -1e-73)), g)
    np.testing.assert_array_equal(project_if_conflict(g, np.full(3, -1e-13)), g)


def test_exact_antiparallel_collapses_to_zero():
    g = vec(0.1, 0.2, 0.3)
    assert not project_if_conflict(g, -3 * g).any()


# ---------------------------------------------------------------- strategies

def two_groups():
    g_sim = {"a": vec(1, -1), "b": vec(2, 1)}
    g_reg = {"a": vec(0, 1), "b": vec(1, 1)}
    return g_sim, g_reg


def test_layerwise_projects_only_conflicting_group():
    g_sim, g_reg = two_groups()
    out = apply_strategy(LayerwiseProject(), g_sim, g_reg)
    assert abs(out["a"] @ g_reg["a"]) <= 1e-10 * np.linalg.norm(g_sim["a"]) * np.linalg.norm(g_reg["a"])
    assert out["b"] is g_sim["b"]


def test_single_group_layerwise_equals_global():
    rng = np.random.default_rng(1)
    for _ in range(50):
        g_sim, g_reg = {"x": rng.normal(size=20)}, {"x": rng.normal(size=20)}
        a = apply_strategy(LayerwiseProject(), g_sim, g_reg)
        b = apply_strategy(GlobalProject(), g_sim, g_reg)
        assert np.array_equal(a["x"], b["x"])


def test_global_uses_sorted_concatenation():
    g_sim = {"z": vec(1, -1), "a": vec(0.5)}
    g_reg = {"z": vec(0, 1), "a": vec(-1.0)}
    out = apply_strategy(GlobalProject(), g_sim, g_reg)
    flat = project_if_conflict(vec(0.5, 1, -1), vec(-1, 0, 1))
    np.testing.assert_array_equal(np.concatenate([out["a"], out["z"]]), flat)
    assert list(out) == ["z", "a"]


def test_weighted_sum_and_similarity_only():
    g_sim, g_reg = two_groups()
    out = apply_strategy(WeightedSum(0.0), g_sim, g_reg)
    assert all(np.array_equal(out[k], g_sim[k]) for k in g_sim)
    out = apply_strategy(WeightedSum(0.5), g_sim, g_reg)
    np.testing.assert_array_equal(out["a"], [1, -0.5])
    out = apply_strategy(SimilarityOnly(), g_sim, g_reg)
    assert all(out[k] is g_sim[k] for k in g_sim)


def test_agr_random_keeps_agreeing_coordinates():
    g_sim = {"a": vec(1, -2, 3, 0)}
    g_reg = {"a": vec(5, 1, 2, -1)}
    out = apply_strategy(AgrRandom(0.5), g_sim, g_reg, np.random.default_rng(0))["a"]
    assert out[0] == 1 and out[2] == 3 and out[3] == 0
    expected = np.random.default_rng(0).normal(0, 0.5, size=4)[1]
    assert out[1] == expected


def test_agr_random_needs_rng_and_positive_sigma():
    g_sim, g_reg = two_groups()
    with pytest.raises(ValueError):
        apply_strategy(AgrRandom(), g_sim, g_reg)
    with pytest.raises(ValueError):
        AgrRandom(0.0)
    with pytest.raises(ValueError):
        WeightedSum(-1.0)


def test_key_mismatch_lists_ids():
    with pytest.raises(KeyError, match="'b'"):
        apply_strategy(SimilarityOnly(), {"a": vec(1)}, {"a": vec(1), "b": vec(2)})


def test_parse_strategy_names():
    assert parse_strategy("WeightedSum(0.1)") == WeightedSum(0.1)
    assert parse_strategy("weighted_sum", lam=0.001) == WeightedSum(0.001)
    assert parse_strategy("LayerwiseProject") == LayerwiseProject()
    assert strategy_label(parse_strategy("WeightedSum(0.01)")) == "WeightedSum(0.01)"
    with pytest.raises(ValueError):
        parse_strategy("Nope")


def test_regroup_round_trip():
    m = build_unet(UNetConfig((2, 4), 0.2, "t"))
    rng = np.random.default_rng(2)
    grads = {g.layer_id: rng.normal(size=g.size) for g in m.groups}
    for gran in ("per-tensor", "per-layer", "global"):
        back = ungroup(regroup(grads, m.groups, gran), m.groups, gran)
        assert all(np.array_equal(back[k], grads[k]) for k in grads)


# ---------------------------------------------------------------- Adam

def test_adam_first_step_moves_by_lr():
    g = ParamGroup("p", [np.array([2.0])])
    adam_step([g], {"p": vec(1.0)}, st_ := AdamState(), 0.1)
    # bias-corrected m/sqrt(v) is exactly 1; only eps separates the step from lr
    assert g.tensors[0][0] == 2.0 - 0.1 * 1.0 / (1.0 + 1e-8)
    assert abs(2.0 - g.tensors[0][0] - 0.1) < 1e-8
    assert st_.step == 1


def test_adam_zero_gradient_keeps_params():
    g = ParamGroup("p", [np.array([2.0, -1.0])])
    st_ = AdamState()
    adam_step([g], {"p": vec(0, 0)}, st_, 0.1)
    np.testing.assert_array_equal(g.tensors[0], [2.0, -1.0])
    assert st_.step == 1


def test_adam_two_steps_hand_recursion():
    g = ParamGroup("p", [np.array([0.0])])
    st_ = AdamState()
    lr, grad = 0.01, 0.3
    adam_step([g], {"p": vec(grad)}, st_, lr)
    adam_step([g], {"p": vec(grad)}, st_, lr)
    m1, v1 = 0.1 * grad, 0.001 * grad**2
    m2, v2 = 0.9 * m1 + 0.1 * grad, 0.999 * v1 + 0.001 * grad**2
    x1 = -lr * (m1 / 0.1) / (np.sqrt(v1 / 0.001) + 1e-8)
    x2 = x1 - lr * (m2 / (1 - 0.9**2)) / (np.sqrt(v2 / (1 - 0.999**2)) + 1e-8)
    assert abs(st_.m["p"][0] - m2) < 1e-12 and abs(st_.v["p"][0] - v2) < 1e-12
    assert abs(g.tensors[0][0] - x2) < 1e-12


def test_adam_shape_mismatch():
    g = ParamGroup("p", [np.zeros(3)])
    with pytest.raises(ValueError):
        adam_step([g], {"p": np.zeros(2)}, AdamState(), 0.1)


# ---------------------------------------------------------------- training step

def small_batch(seed=0, n=16):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:n, 0:n].astype(float)
    f = 0.5 + 0.4 * np.sin(xx / 3 + rng.uniform()) * np.cos(yy / 4)
    m = 0.5 + 0.4 * np.sin((xx + 1.3) / 3 + rng.uniform()) * np.cos((yy - 0.7) / 4)
    return np.stack([f, f[::-1]]), np.stack([m, m[::-1]])


@pytest.mark.parametrize("lam", [0.1, 0.01, 0.001])
def test_weighted_sum_equals_combined_backward(lam):
    f, m = small_batch()
    net = build_unet(UNetConfig((2, 4), 0.2, "t"), 3)
    net.head.group.tensors[0][...] = np.random.default_rng(4).normal(0, 0.1, net.head.group.tensors[0].shape)
    _, _, g_sim, g_reg = compute_gradients(net, f, m)
    applied = apply_strategy(WeightedSum(lam), g_sim, g_reg)
    # train-mode batch norm uses batch statistics, so a second forward is identical
    t = Tape()
    u = net.forward(t, f, m)
    warped = ad.warp(t.constant(m[:, None]), u)
    loss = ad.add(objective.mse_loss(warped, f[:, None]), ad.mul(objective.smoothness_loss(u), lam))
    combined = t.backward(loss, net.groups)
    for k in combined:
        assert np.max(np.abs(applied[k] - combined[k])) <= 1e-10 * max(1.0, np.max(np.abs(combined[k])))


def test_direct_field_identical_pair_barely_moves():
    f, _ = small_batch()
    model = DirectField(16, 16)
    rep = train_step(model, f, f, LayerwiseProject(), AdamState(), 5e-3)
    assert rep.sim_norm == 0.0
    assert not model.group.tensors[0].any()


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000), st.sampled_from([LayerwiseProject(), GlobalProject(), AgrRandom(),
                                              WeightedSum(0.01), SimilarityOnly()]))
def test_conflicted_count_bounded(seed, strategy):
    f, m = small_batch(seed)
    net = build_unet(UNetConfig((2, 4), 0.2, "t"), seed)
    adam = AdamState()
    for _ in range(2):
        rep = train_step(net, f, m, strategy, adam, 5e-3, rng=np.random.default_rng(seed))
        assert 0 <= rep.conflicted <= rep.n_groups == 7


def test_post_surgery_orthogonality_in_training():
    f, m = small_batch(5)
    net = build_unet(UNetConfig((2, 4), 0.2, "t"), 5)
    adam = AdamState()
    train_step(net, f, m, SimilarityOnly(), adam, 5e-2)
    _, _, g_sim, g_reg = compute_gradients(net, f, m)
    out = apply_strategy(LayerwiseProject(), g_sim, g_reg)
    for k in g_sim:
        tol = 1e-10 * np.linalg.norm(out[k]) * np.linalg.norm(g_reg[k])
        if g_sim[k] @ g_reg[k] > 0:
            assert out[k] is g_sim[k]
        else:
            assert abs(out[k] @ g_reg[k]) <= tol
        assert np.linalg.norm(out[k]) <= np.linalg.norm(g_sim[k])


def test_train_step_frees_its_tape_without_gc():
    model = build_unet(UNetConfig((2, 4)), seed=0)
    rng = np.random.default_rng(0)
    f, m = rng.random((2, 1, 8, 8)), rng.random((2, 1, 8, 8))
    gc.collect()
    gc.disable()
    try:
        for _ in range(3):
            train_step(model, f, m, LayerwiseProject(), AdamState(), 1e-3)
        model.predict(f, m)
        live = sum(isinstance(o, ad.Tensor) for o in gc.get_objects())
    finally:
        gc.enable()
    assert live == 0
