"""NN core: gradients vs finite differences, losses, SGD, checkpoint format."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vidimit.nets import (
    IDENTITY,
    RELU,
    DenseNet,
    Layer,
    NetFormatError,
    SgdConfig,
    backward,
    batched_cross_entropy,
    flatten_grads,
    flatten_params,
    forward,
    forward_jvp,
    load_net,
    make_dense_net,
    param_count,
    save_net,
    set_params,
    sgd_step,
    softmax,
    softmax_cross_entropy,
    unflatten_like,
    zeros_like_grads,
)


def fd_gradient(net, x, out_grad, eps=1e-5):
    """Central finite differences of sum(out * out_grad) w.r.t. params."""
    theta = flatten_params(net)
    g = np.zeros_like(theta)
    for i in range(theta.size):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += eps
        tm[i] -= eps
        op, _ = forward(set_params(net, tp), x)
        om, _ = forward(set_params(net, tm), x)
        g[i] = (np.sum(op * out_grad) - np.sum(om * out_grad)) / (2 * eps)
    return g


class TestForward:
    def test_identity_layer_passthrough(self):
        net = DenseNet([Layer(np.eye(3), np.zeros(3), IDENTITY)])
        x = np.array([1.0, -2.0, 3.0])
        out, _ = forward(net, x)
        assert np.array_equal(out, x)

    def test_relu_all_negative(self):
        net = DenseNet([Layer(-np.eye(4), np.zeros(4), RELU)])
        out, _ = forward(net, np.ones(4))
        assert np.array_equal(out, np.zeros(4))

    def test_zero_weight_net_outputs_bias(self):
        b = np.array([0.5, -1.5])
        net = DenseNet([Layer(np.zeros((3, 2)), b, IDENTITY)])
        out, _ = forward(net, np.array([9.0, 9.0, 9.0]))
        assert np.array_equal(out, b)

    def test_dim_mismatch(self):
        net = make_dense_net([4, 3], [RELU], seed=0)
        with pytest.raises(ValueError):
            forward(net, np.zeros(5))

    def test_batched_matches_single(self):
        net = make_dense_net([5, 8, 2], [RELU, IDENTITY], seed=1)
        xs = np.random.default_rng(0).normal(size=(6, 5))
        batch_out, _ = forward(net, xs)
        for i in range(6):
            single, _ = forward(net, xs[i])
            assert np.allclose(batch_out[i], single, atol=0, rtol=0)

    def test_init_deterministic(self):
        a = make_dense_net([10, 64, 5], [RELU, IDENTITY], seed=42)
        b = make_dense_net([10, 64, 5], [RELU, IDENTITY], seed=42)
        assert np.array_equal(flatten_params(a), flatten_params(b))
        c = make_dense_net([10, 64, 5], [RELU, IDENTITY], seed=43)
        assert not np.array_equal(flatten_params(a), flatten_params(c))

    def test_identity_output_layer_zero_init(self):
        net = make_dense_net([8, 64, 2], [RELU, IDENTITY], seed=5)
        out, _ = forward(net, np.random.default_rng(1).normal(size=8))
        assert np.array_equal(out, np.zeros(2))


class TestBackward:
    @pytest.mark.parametrize(
        "dims,acts",
        [
            ([6, 4], [RELU]),
            ([5, 8, 3], [RELU, IDENTITY]),
            ([4, 7, 7, 2], [RELU, RELU, IDENTITY]),
        ],
    )
    def test_matches_finite_differences(self, dims, acts):
        net = make_dense_net(dims, acts, seed=3)
        # perturb zero-initialized identity layers so gradients flow everywhere
        rng = np.random.default_rng(9)
        vec = flatten_params(net) + 0.1 * rng.normal(size=param_count(net))
        net = set_params(net, vec)
        x = rng.normal(size=dims[0])
        og = rng.normal(size=dims[-1])
        _, caches = forward(net, x)
        analytic = flatten_grads(backward(net, caches, og))
        numeric = fd_gradient(net, x, og)
        denom = np.maximum(np.abs(numeric), 1e-8)
        assert (np.abs(analytic - numeric) / denom).max() < 1e-4

    def test_zero_output_grad(self):
        net = make_dense_net([4, 6, 2], [RELU, IDENTITY], seed=0)
        x = np.ones(4)
        _, caches = forward(net, x)
        g = backward(net, caches, np.zeros(2))
        assert np.allclose(flatten_grads(g), 0.0, atol=0)

    def test_final_bias_grad_equals_upstream(self):
        net = make_dense_net([3, 5, 2], [RELU, IDENTITY], seed=2)
        x = np.random.default_rng(0).normal(size=3)
        og = np.array([0.7, -1.3])
        _, caches = forward(net, x)
        grads = backward(net, caches, og)
        assert np.allclose(grads.layers[-1][1], og, atol=0)

    def test_batch_grads_sum_over_samples(self):
        net = make_dense_net([4, 3], [IDENTITY], seed=0)
        rng = np.random.default_rng(4)
        xs = rng.normal(size=(5, 4))
        ogs = rng.normal(size=(5, 3))
        _, caches = forward(net, xs)
        batch = flatten_grads(backward(net, caches, ogs))
        total = np.zeros_like(batch)
        for i in range(5):
            _, c1 = forward(net, xs[i])
            total += flatten_grads(backward(net, c1, ogs[i]))
        assert np.allclose(batch, total, atol=1e-12)

    def test_input_grad(self):
        net = make_dense_net([4, 6, 2], [RELU, IDENTITY], seed=7)
        vec = flatten_params(net) + 0.05 * np.random.default_rng(0).normal(size=param_count(net))
        net = set_params(net, vec)
        x = np.random.default_rng(1).normal(size=4)
        og = np.array([1.0, -0.5])
        _, caches = forward(net, x)
        _, din = backward(net, caches, og, with_input_grad=True)
        eps = 1e-6
        fd = np.zeros(4)
        for i in range(4):
            xp, xm = x.copy(), x.copy()
            xp[i] += eps
            xm[i] -= eps
            fd[i] = (np.sum(forward(net, xp)[0] * og) - np.sum(forward(net, xm)[0] * og)) / (2 * eps)
        assert np.allclose(din, fd, atol=1e-6)


class TestJvp:
    def test_matches_directional_fd(self):
        net = make_dense_net([5, 7, 3], [RELU, IDENTITY], seed=11)
        vec = flatten_params(net) + 0.1 * np.random.default_rng(2).normal(size=param_count(net))
        net = set_params(net, vec)
        rng = np.random.default_rng(3)
        x = rng.normal(size=5)
        v = rng.normal(size=param_count(net))
        tangent = unflatten_like(net, v)
        out, dout = forward_jvp(net, x, tangent)
        base, _ = forward(net, x)
        assert np.allclose(out, base, atol=0)
        eps = 1e-6
        op, _ = forward(set_params(net, vec + eps * v), x)
        om, _ = forward(set_params(net, vec - eps * v), x)
        fd = (op - om) / (2 * eps)
        assert np.allclose(dout, fd, atol=1e-5)

    def test_zero_tangent(self):
        net = make_dense_net([4, 4, 2], [RELU, IDENTITY], seed=0)
        _, dout = forward_jvp(net, np.ones(4), zeros_like_grads(net))
        assert np.array_equal(dout, np.zeros(2))


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        loss, grad = softmax_cross_entropy(np.zeros(5), label=3, weight=1.0)
        assert loss == pytest.approx(np.log(5.0), abs=1e-12)
        expected = np.full(5, 0.2)
        expected[2] -= 1.0
        assert np.allclose(grad, expected, atol=1e-12)

    def test_saturated_true_class(self):
        logits = np.zeros(5)
        logits[1] = 30.0
        loss, _ = softmax_cross_entropy(logits, label=2)
        assert loss < 1e-9

    def test_weight_linearity(self):
        logits = np.array([0.3, -1.0, 2.0, 0.1, -0.4])
        l1, g1 = softmax_cross_entropy(logits, 4, weight=1.0)
        l2, g2 = softmax_cross_entropy(logits, 4, weight=2.0)
        assert l2 == pytest.approx(2 * l1, rel=1e-12)
        assert np.allclose(g2, 2 * g1, atol=1e-12)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            softmax_cross_entropy(np.zeros(5), 0)
        with pytest.raises(ValueError):
            softmax_cross_entropy(np.zeros(5), 6)

    def test_large_logits_stable(self):
        loss, grad = softmax_cross_entropy(np.array([1000.0, 0, 0, 0, 0]), 1)
        assert np.isfinite(loss) and np.all(np.isfinite(grad))

    def test_gradient_matches_fd(self):
        logits = np.array([0.5, -0.2, 1.1, 0.0, -0.9])
        _, grad = softmax_cross_entropy(logits, 2, weight=1.7)
        eps = 1e-6
        for i in range(5):
            lp, lm = logits.copy(), logits.copy()
            lp[i] += eps
            lm[i] -= eps
            fd = (softmax_cross_entropy(lp, 2, 1.7)[0] - softmax_cross_entropy(lm, 2, 1.7)[0]) / (2 * eps)
            assert grad[i] == pytest.approx(fd, abs=1e-8)

    def test_batched_matches_single(self):
        rng = np.random.default_rng(5)
        logits = rng.normal(size=(7, 5))
        labels = rng.integers(1, 6, size=7)
        weights = rng.uniform(0.5, 2.0, size=7)
        losses, grads = batched_cross_entropy(logits, labels, weights)
        for i in range(7):
            l, g = softmax_cross_entropy(logits[i], int(labels[i]), float(weights[i]))
            assert losses[i] == pytest.approx(l, rel=1e-12)
            assert np.allclose(grads[i], g, atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10**6))
    def test_softmax_is_distribution(self, seed):
        logits = np.random.default_rng(seed).normal(scale=5.0, size=5)
        p = softmax(logits)
        assert abs(p.sum() - 1.0) < 1e-12
        assert np.all(p >= 0) and np.all(p <= 1)


class TestSgd:
    def test_lr_epsilon_no_change_with_zero_grads(self):
        net = make_dense_net([3, 2], [IDENTITY], seed=0)
        out = sgd_step(net, zeros_like_grads(net), SgdConfig(learning_rate=1.0))
        assert np.array_equal(flatten_params(out), flatten_params(net))

    def test_scalar_example(self):
        net = DenseNet([Layer(np.array([[1.0]]), np.zeros(1), IDENTITY)])
        grads = unflatten_like(net, np.array([2.0, 0.0]))
        out = sgd_step(net, grads, SgdConfig(learning_rate=0.1))
        assert out.layers[0].W[0, 0] == pytest.approx(0.8, abs=1e-15)

    def test_two_steps_equal_summed_update(self):
        net = DenseNet([Layer(np.array([[1.0, 2.0]]), np.array([0.5, -0.5]), IDENTITY)])
        g1 = unflatten_like(net, np.array([0.25, 0.5, -0.25, 1.0]))
        g2 = unflatten_like(net, np.array([0.5, -1.5, 0.75, 0.25]))
        cfg = SgdConfig(learning_rate=0.125)
        stepped = sgd_step(sgd_step(net, g1, cfg), g2, cfg)
        summed = sgd_step(net, unflatten_like(net, flatten_grads(g1) + flatten_grads(g2)), cfg)
        assert np.array_equal(flatten_params(stepped), flatten_params(summed))

    def test_nonfinite_grads_rejected(self):
        net = make_dense_net([2, 2], [IDENTITY], seed=0)
        bad = unflatten_like(net, np.array([np.nan, 0, 0, 0, 0, 0.0]))
        with pytest.raises(ValueError):
            sgd_step(net, bad, SgdConfig())

    def test_bad_config(self):
        with pytest.raises(ValueError):
            SgdConfig(learning_rate=0.0)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        net = make_dense_net([10, 64, 64, 2], [RELU, RELU, IDENTITY], seed=9)
        vec = flatten_params(net) + np.random.default_rng(0).normal(size=param_count(net))
        net = set_params(net, vec)
        path = str(tmp_path / "net.vnn")
        save_net(net, path)
        loaded = load_net(path)
        assert np.array_equal(flatten_params(loaded), flatten_params(net))
        assert [l.activation for l in loaded.layers] == [l.activation for l in net.layers]

    def test_file_bytes_stable(self, tmp_path):
        net = make_dense_net([4, 3], [RELU], seed=1)
        p1, p2 = str(tmp_path / "a.vnn"), str(tmp_path / "b.vnn")
        save_net(net, p1)
        save_net(load_net(p1), p2)
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_bad_magic(self, tmp_path):
        path = str(tmp_path / "bad.vnn")
        with open(path, "wb") as fh:
            fh.write(b"XXXX" + b"\0" * 16)
        with pytest.raises(NetFormatError, match="magic"):
            load_net(path)

    def test_truncated(self, tmp_path):
        net = make_dense_net([4, 3], [RELU], seed=1)
        path = str(tmp_path / "t.vnn")
        save_net(net, path)
        data = open(path, "rb").read()
        with open(path, "wb") as fh:
            fh.write(data[:-4])
        with pytest.raises(NetFormatError, match="truncated"):
            load_net(path)

    def test_unknown_activation_code(self, tmp_path):
        net = DenseNet([Layer(np.zeros((1, 1)), np.zeros(1), IDENTITY)])
        path = str(tmp_path / "c.vnn")
        save_net(net, path)
        data = bytearray(open(path, "rb").read())
        data[16] = 9  # activation code field of layer 0
        with open(path, "wb") as fh:
            fh.write(bytes(data))
        with pytest.raises(NetFormatError, match="activation"):
            load_net(path)


def test_unflatten_rejects_wrong_length():
    net = make_dense_net([3, 2], [IDENTITY], seed=0)
    with pytest.raises(ValueError):
        unflatten_like(net, np.zeros(5))
