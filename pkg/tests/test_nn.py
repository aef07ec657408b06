import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vog import nn

from conftest import assert_close_fd, central_diff


def linear_params(w, b):
    w = np.asarray(w, dtype=np.float64)
    spec = nn.ModelSpec((nn.FLATTEN, nn.dense(w.shape[1], w.shape[0])), (1, 1, w.shape[1]), w.shape[0])
    return nn.Params(spec, (w, np.asarray(b, dtype=np.float64)))


def logits_params(z):
    """A linear net with zero weights whose scores are exactly ``z``."""
    z = np.asarray(z, dtype=np.float64)
    return linear_params(np.zeros((z.size, 1)), z)


def loop_forward(params, x):
    """Straight-line reimplementation of an MLP forward pass (flatten, dense, act, dense)."""
    h = list(np.asarray(x, dtype=np.float64).ravel())
    it = iter(params.tensors)
    for layer in params.spec.layers:
        if layer.kind == "dense":
            w, b = next(it), next(it)
            h = [sum(w[o, i] * h[i] for i in range(len(h))) + b[o] for o in range(w.shape[0])]
        elif layer.kind == "relu":
            h = [v if v > 0 else 0.0 for v in h]
        elif layer.kind == "tanh":
            h = [math.tanh(v) for v in h]
    return np.array(h)


class TestForward:
    def test_identity_dense(self):
        p = linear_params(np.eye(2), [0, 0])
        np.testing.assert_array_equal(nn.forward(p, np.array([[[0.3, 0.7]]])), [0.3, 0.7])

    def test_zero_input_linear_net(self, rng):
        p = linear_params(rng.normal(size=(3, 4)), np.zeros(3))
        np.testing.assert_array_equal(nn.forward(p, np.zeros((1, 1, 4))), np.zeros(3))

    @pytest.mark.parametrize("act", ["relu", "tanh"])
    def test_matches_loop_oracle(self, act):
        spec = nn.mlp((1, 2, 3), [4], 3, activation=act)
        params = nn.init_params(spec, 0)
        x = np.random.default_rng(5).normal(size=(1, 2, 3))
        np.testing.assert_allclose(nn.forward(params, x), loop_forward(params, x), rtol=1e-13, atol=1e-14)

    def test_conv_matches_direct_correlation(self, rng):
        spec = nn.ModelSpec((nn.conv(2, 3, 2), nn.FLATTEN, nn.dense(3 * 2 * 2, 2)), (2, 3, 3), 2)
        params = nn.init_params(spec, 3)
        x = rng.normal(size=(2, 3, 3))
        w, b = params.tensors[0], params.tensors[1]
        out = np.zeros((3, 2, 2))
        for o in range(3):
            for i in range(2):
                for j in range(2):
                    out[o, i, j] = np.sum(x[:, i:i + 2, j:j + 2] * w[o]) + b[o]
        want = params.tensors[2] @ out.ravel() + params.tensors[3]
        np.testing.assert_allclose(nn.forward(params, x), want, rtol=1e-12)

    def test_pure(self, small_mlp, rng):
        x = rng.normal(size=(1, 2, 3))
        assert nn.forward(small_mlp, x).tobytes() == nn.forward(small_mlp, x).tobytes()

    def test_batch_agrees_with_single(self, small_mlp, rng):
        x = rng.normal(size=(4, 1, 2, 3))
        batch = nn.forward_batch(small_mlp, x)
        for i in range(4):
            np.testing.assert_allclose(batch[i], nn.forward(small_mlp, x[i]), rtol=1e-14)

    def test_shape_error(self, small_mlp):
        with pytest.raises(nn.ShapeError, match=r"expected input of shape \(1, 2, 3\), got \(1, 3, 2\)"):
            nn.forward(small_mlp, np.zeros((1, 3, 2)))


class TestSpec:
    def test_layers_must_compose(self):
        with pytest.raises(nn.ShapeError):
            nn.ModelSpec((nn.FLATTEN, nn.dense(5, 3)), (1, 2, 2), 3)

    def test_final_width_is_num_classes(self):
        with pytest.raises(nn.ShapeError):
            nn.ModelSpec((nn.FLATTEN, nn.dense(4, 3)), (1, 2, 2), 2)

    def test_dict_round_trip(self):
        spec = nn.convnet((1, 8, 8), [2], 3, [4], 5)
        assert nn.ModelSpec.from_dict(spec.to_dict()) == spec

    def test_init_is_deterministic(self):
        spec = nn.mlp((1, 4, 4), [6], 3)
        assert nn.init_params(spec, 11).equal(nn.init_params(spec, 11))
        assert not nn.init_params(spec, 11).equal(nn.init_params(spec, 12))

    def test_params_shape_checked(self):
        spec = nn.mlp((1, 2, 2), [3], 2)
        with pytest.raises(nn.ShapeError):
            nn.Params(spec, (np.zeros((3, 4)), np.zeros(3), np.zeros((2, 2)), np.zeros(2)))


class TestLoss:
    def test_uniform_softmax_is_ln2(self):
        loss, _ = nn.softmax_xent_grad(logits_params([0.0, 0.0]), np.zeros((1, 1, 1)), 1)
        assert loss == pytest.approx(math.log(2), abs=1e-15)

    def test_confident_limit(self):
        loss, _ = nn.softmax_xent_grad(logits_params([60.0, 0.0]), np.zeros((1, 1, 1)), 0)
        assert 0 <= loss < 1e-25

    def test_label_out_of_range(self, small_mlp):
        with pytest.raises(IndexError):
            nn.softmax_xent_grad(small_mlp, np.zeros((1, 2, 3)), 3)

    @pytest.mark.parametrize("act", ["relu", "tanh"])
    def test_param_grads_match_finite_differences(self, act):
        spec = nn.mlp((1, 2, 3), [4], 3, activation=act)
        params = nn.init_params(spec, 2)
        x = np.random.default_rng(8).normal(size=(1, 2, 3))
        _, grads = nn.softmax_xent_grad(params, x, 2)
        for k, t in enumerate(params.tensors):
            def f(v, k=k):
                ts = list(params.tensors)
                ts[k] = v
                return nn.softmax_xent_grad(nn.Params(spec, tuple(ts)), x, 2)[0]
            assert_close_fd(grads.tensors[k], central_diff(f, t))

    def test_batch_loss_is_mean(self, small_mlp, rng):
        x = rng.normal(size=(3, 1, 2, 3))
        y = np.array([0, 2, 1])
        loss, grads = nn.loss_and_grads_batch(small_mlp, x, y)
        singles = [nn.softmax_xent_grad(small_mlp, x[i], int(y[i])) for i in range(3)]
        assert loss == pytest.approx(np.mean([s[0] for s in singles]), rel=1e-14)
        for k in range(len(grads.tensors)):
            np.testing.assert_allclose(grads.tensors[k], np.mean([s[1].tensors[k] for s in singles], axis=0),
                                       rtol=1e-12, atol=1e-15)


class TestInputGradient:
    def test_linear_row(self, rng):
        w = rng.normal(size=(3, 4))
        p = linear_params(w, rng.normal(size=3))
        for c in range(3):
            np.testing.assert_array_equal(nn.input_gradient(p, rng.normal(size=(1, 1, 4)), c).ravel(), w[c])

    def test_linear_independent_of_x(self, rng):
        p = linear_params(rng.normal(size=(2, 5)), np.zeros(2))
        a = nn.input_gradient(p, rng.normal(size=(1, 1, 5)), 1)
        b = nn.input_gradient(p, rng.normal(size=(1, 1, 5)), 1)
        np.testing.assert_array_equal(a, b)

    def test_dead_relu_unit_contributes_nothing(self):
        w1 = np.array([[1.0, 1.0], [-1.0, -1.0]])  # unit 1 is negative for positive inputs
        w2 = np.array([[2.0, 5.0]])
        spec = nn.ModelSpec((nn.FLATTEN, nn.dense(2, 2), nn.RELU, nn.dense(2, 1)), (1, 1, 2), 1)
        p = nn.Params(spec, (w1, np.zeros(2), w2, np.zeros(1)))
        g = nn.input_gradient(p, np.array([[[0.5, 0.25]]]), 0)
        np.testing.assert_array_equal(g.ravel(), [2.0, 2.0])

    def test_is_not_the_loss_gradient(self, small_mlp, rng):
        x = rng.normal(size=(1, 2, 3))
        g = nn.input_gradient(small_mlp, x, 1)
        want = central_diff(lambda v: nn.forward(small_mlp, v)[1], x)
        assert_close_fd(g, want)

    def test_class_out_of_range(self, small_mlp):
        with pytest.raises(IndexError):
            nn.input_gradient(small_mlp, np.zeros((1, 2, 3)), -1)

    def test_conv_matches_finite_differences(self):
        spec = nn.convnet((2, 5, 5), [3], 3, [4], 3)
        params = nn.init_params(spec, 4)
        x = np.random.default_rng(9).normal(size=(2, 5, 5))
        for c in range(3):
            assert_close_fd(nn.input_gradient(params, x, c), central_diff(lambda v: nn.forward(params, v)[c], x))


class TestPredict:
    def test_argmax(self):
        assert nn.predict(logits_params([2.0, 5.0, 1.0]), np.zeros((1, 1, 1)))[0] == 1

    def test_tie_goes_to_lowest_index(self):
        assert nn.predict(logits_params([3.0, 3.0]), np.zeros((1, 1, 1)))[0] == 0

    def test_uniform_probabilities(self):
        _, probs = nn.predict(logits_params([0.0, 0.0, 0.0]), np.zeros((1, 1, 1)))
        np.testing.assert_allclose(probs, [1 / 3] * 3, rtol=1e-15)

    def test_batch_matches_single(self, small_mlp, rng):
        x = rng.normal(size=(5, 1, 2, 3))
        cls, probs = nn.predict_batch(small_mlp, x)
        for i in range(5):
            c, pr = nn.predict(small_mlp, x[i])
            assert c == cls[i]
            np.testing.assert_allclose(pr, probs[i], rtol=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8), st.floats(-100, 100))
def test_softmax_shift_invariant(z, c):
    z = np.array(z)
    a, b = nn.softmax(z), nn.softmax(z + c)
    np.testing.assert_allclose(a, b, atol=1e-12, rtol=0)
    assert abs(a.sum() - 1.0) < 1e-9
