import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hal import nn
from tests.helpers import fd_gradients, max_rel_error, random_tiny_spec


def test_identity_dense_passes_input_through():
    spec = nn.ModelSpec((3,), (nn.dense(3, 3),), embedding=0)
    params = [np.eye(3), np.zeros(3)]
    v = np.array([[0.5, -2.0, 7.0]])
    out, emb, _ = nn.forward(spec, params, v)
    np.testing.assert_array_equal(out, v)
    np.testing.assert_array_equal(emb, v)


def test_dropout_zero_in_mc_mode_equals_eval():
    spec = nn.mlp(20, n_classes=4, hidden=8, p_drop=0.0)
    params = nn.init_params(spec, 1)
    x = np.random.default_rng(0).random((5, 20))
    a, _, _ = nn.forward(spec, params, x, mode="eval")
    b, _, _ = nn.forward(spec, params, x, mode="mc", seed=99)
    np.testing.assert_array_equal(a, b)


def test_two_layer_net_matches_hand_affine_chain():
    spec = nn.ModelSpec((2,), (nn.dense(2, 3), nn.relu(), nn.dense(3, 2)), embedding=0)
    W1 = np.array([[1.0, -1.0, 0.5], [2.0, 0.0, -1.0]])
    b1 = np.array([0.0, 1.0, -0.5])
    W2 = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    b2 = np.array([0.25, -0.25])
    x = np.array([[1.0, 2.0]])
    # hidden pre-activation: [1+4, -1+0+1, 0.5-2-0.5] = [5, 0, -2] -> relu [5, 0, 0]
    # output: [5+0+0+0.25, 0+0+0-0.25]
    out, _, _ = nn.forward(spec, [W1, b1, W2, b2], x)
    np.testing.assert_allclose(out, [[5.25, -0.25]], atol=0, rtol=0)


def test_shape_mismatch_and_nonfinite_rejected():
    spec = nn.mlp(4, n_classes=2, hidden=3)
    params = nn.init_params(spec, 0)
    with pytest.raises(ValueError):
        nn.forward(spec, params, np.zeros((1, 5)))
    params[0][0, 0] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        nn.forward(spec, params, np.zeros((1, 4)))


def test_spec_rejects_incompatible_layers():
    with pytest.raises(ValueError):
        nn.ModelSpec((4,), (nn.dense(5, 2),), embedding=0)
    with pytest.raises(ValueError):
        nn.ModelSpec((1, 8, 8), (nn.conv2d(1, 2, 3), nn.relu()), embedding=0)


def test_zero_loss_grad_gives_zero_gradients():
    spec = nn.lenet_lite(n_classes=3, image_size=14)
    params = nn.init_params(spec, 0)
    x = np.random.default_rng(1).random((2, 1, 14, 14))
    out, _, cache = nn.forward(spec, params, x, mode="train", seed=5)
    grads = nn.backward(spec, params, cache, np.zeros_like(out))
    assert all(np.all(g == 0) for g in grads)


def test_dense_weight_gradient_is_outer_product():
    spec = nn.ModelSpec((3,), (nn.dense(3, 2),), embedding=0)
    params = nn.init_params(spec, 4)
    x = np.array([[1.0, -2.0, 0.5]])
    g = np.array([[0.3, -1.1]])
    _, _, cache = nn.forward(spec, params, x, mode="train")
    grads = nn.backward(spec, params, cache, g)
    np.testing.assert_allclose(grads[0], np.outer(x[0], g[0]), rtol=1e-15)
    np.testing.assert_allclose(grads[1], g[0], rtol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_backward_matches_finite_differences(seed):
    spec, params, x, w = random_tiny_spec(seed)
    out, _, cache = nn.forward(spec, params, x, mode="train", seed=seed)
    grads = nn.backward(spec, params, cache, w)

    def f(ps):
        o, _, _ = nn.forward(spec, ps, x, mode="train", seed=seed)
        return float(np.sum(o * w))

    assert max_rel_error(grads, fd_gradients(f, params)) < 1e-4


def test_lenet_lite_gradient_check():
    spec = nn.lenet_lite(n_classes=3, image_size=8, p_drop=0.3)
    params = nn.init_params(spec, 2)
    x = np.random.default_rng(3).random((2, 1, 8, 8))
    w = np.random.default_rng(4).normal(size=(2, 3))
    _, _, cache = nn.forward(spec, params, x, mode="train", seed=11)
    grads = nn.backward(spec, params, cache, w)

    def f(ps):
        o, _, _ = nn.forward(spec, ps, x, mode="train", seed=11)
        return float(np.sum(o * w))

    assert max_rel_error(grads, fd_gradients(f, params)) < 1e-4


def test_dropout_masks_are_bernoulli_with_inverted_scaling():
    mask = nn.dropout_mask(0.3, seed=7, layer_index=2, row_keys=np.arange(200), n_units=500)
    kept = mask > 0
    assert abs(kept.mean() - 0.7) < 0.01
    np.testing.assert_allclose(mask[kept], 1 / 0.7)


def test_mc_masks_depend_only_on_row_key():
    spec = nn.mlp(6, n_classes=3, hidden=5, p_drop=0.5)
    params = nn.init_params(spec, 0)
    x = np.random.default_rng(0).random((4, 6))
    full, _, _ = nn.forward(spec, params, x, mode="mc", seed=3, row_keys=[10, 11, 12, 13])
    one, _, _ = nn.forward(spec, params, x[2:3], mode="mc", seed=3, row_keys=[12])
    np.testing.assert_array_equal(full[2:3], one)


def test_eval_forward_is_pure():
    spec = nn.mlp(6, n_classes=3, hidden=5)
    params = nn.init_params(spec, 0)
    x = np.random.default_rng(0).random((4, 6))
    a, _, _ = nn.forward(spec, params, x)
    b, _, _ = nn.forward(spec, params, x)
    np.testing.assert_array_equal(a, b)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 8), st.integers(2, 6))
def test_softmax_rows_are_distributions(seed, n, k):
    spec = nn.mlp(5, n_classes=k, hidden=4)
    params = [p * 20 for p in nn.init_params(spec, seed)]
    x = np.random.default_rng(seed).normal(size=(n, 5)) * 10
    out, _, _ = nn.forward(spec, params, x)
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)


def test_adam_zero_grads_leave_params_unchanged():
    params = [np.array([1.0, -2.0])]
    state = nn.AdamState.zeros_like(params)
    new, st2 = nn.adam_step(params, [np.zeros(2)], state, 0.001)
    np.testing.assert_array_equal(new[0], params[0])
    assert st2.t == 1 and state.t == 0


def test_adam_first_step_closed_form():
    # m_hat = g, v_hat = g^2 after one step, so the update is lr * g / (|g| + eps)
    params = [np.array([0.0])]
    new, _ = nn.adam_step(params, [np.array([1.0])], nn.AdamState.zeros_like(params), 0.001)
    expected = -0.001 * 1.0 / (1.0 + 1e-8)
    assert new[0][0] == pytest.approx(expected, rel=1e-12)
    assert abs(new[0][0] + 0.001) < 1e-10


def test_adam_is_reproducible_and_rejects_nonfinite():
    params = [np.array([0.3, 0.1])]
    g = [np.array([0.5, -0.2])]
    s = nn.AdamState.zeros_like(params)
    a1, s1 = nn.adam_step(params, g, s, 0.01)
    a2, s2 = nn.adam_step(a1, g, s1, 0.01)
    b1, t1 = nn.adam_step(params, g, s, 0.01)
    b2, t2 = nn.adam_step(b1, g, t1, 0.01)
    assert a2[0].tobytes() == b2[0].tobytes() and s2.t == t2.t == 2
    with pytest.raises(ValueError):
        nn.adam_step(params, [np.array([np.inf, 0.0])], s, 0.01)


def test_checkpoint_round_trip(tmp_path):
    spec = nn.lenet_lite(n_classes=4, image_size=14)
    params = nn.init_params(spec, 9)
    path = tmp_path / "m.ckpt"
    nn.save_checkpoint(path, spec, params, meta={"kind": "classifier"})
    spec2, params2, meta = nn.load_checkpoint(path)
    assert spec2 == spec and meta == {"kind": "classifier"}
    for a, b in zip(params, params2):
        assert a.tobytes() == b.tobytes()


def test_derive_seed_is_stable_and_separates_keys():
    assert nn.derive_seed(1, "a", 2) == nn.derive_seed(1, "a", 2)
    assert nn.derive_seed(1, "a", 2) != nn.derive_seed(1, "a", 3)
    assert nn.derive_seed(1, "a") != nn.derive_seed(2, "a")
