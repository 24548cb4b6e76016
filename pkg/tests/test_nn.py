"""Network core: forward/backward hand cases, finite differences, Adam, init."""

import math

import numpy as np
import pytest

from cepc import nn
from cepc.errors import ConfigError, InputError, ShapeError
from cepc.rng import RngStream


def fd_grads(loss_fn, params, h=1e-4):
    """Independent central-difference oracle. loss_fn(params) -> scalar."""
    out = []
    for k, p in enumerate(params):
        g = np.zeros_like(p, dtype=np.float64)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            hi = loss_fn(params)
            flat[j] = orig - h
            lo = loss_fn(params)
            flat[j] = orig
            gflat[j] = (hi - lo) / (2.0 * h)
        out.append(g)
    return out


def make_net(dims, rng_label, final_activation="linear", head="none"):
    return nn.init_params(
        dims,
        RngStream(7, rng_label),
        final_activation=final_activation,
        head=head,
    )


class TestForward:
    def test_hand_tanh_chain(self):
        # x=[1,2] -> pre=[0.0, 0.7] -> tanh -> linear combine with [1,-1]+0.25
        net = nn.Mlp(
            weights=[
                np.array([[0.5, 0.1], [-0.25, 0.3]], dtype=np.float32),
                np.array([[1.0], [-1.0]], dtype=np.float32),
            ],
            biases=[np.zeros(2, dtype=np.float32), np.array([0.25], dtype=np.float32)],
            activations=["tanh", "linear"],
            head="none",
        )
        x = np.array([[1.0, 2.0]], dtype=np.float32)
        trace = nn.mlp_forward(net, x)
        t = math.tanh(0.7)
        np.testing.assert_allclose(trace.pre[0], [[0.0, 0.7]], atol=1e-6)
        np.testing.assert_allclose(trace.outputs, [[0.0 - t + 0.25]], atol=1e-6)
        assert trace.outputs[0, 0] == pytest.approx(-0.3543677771171636, abs=1e-6)

    def test_zero_weights_uniform_softmax(self):
        net = make_net([5, 4, 3], "zero", head="softmax")
        for w in net.weights:
            w[:] = 0.0
        x = np.arange(10, dtype=np.float32).reshape(2, 5)
        trace = nn.mlp_forward(net, x)
        np.testing.assert_allclose(trace.outputs, np.full((2, 3), 1.0 / 3.0), atol=1e-7)

    def test_softmax_rows_sum_to_one(self):
        net = make_net([6, 8, 4], "sum1", head="softmax")
        x = RngStream(3, "x").generator().normal(size=(9, 6)).astype(np.float32)
        trace = nn.mlp_forward(net, x)
        np.testing.assert_allclose(trace.outputs.sum(axis=1), np.ones(9), atol=1e-6)

    def test_dimension_mismatch_raises(self):
        net = make_net([4, 2], "dims")
        with pytest.raises(ShapeError):
            nn.mlp_forward(net, np.zeros((3, 5), dtype=np.float32))

    def test_nonfinite_input_raises(self):
        net = make_net([2, 2], "fin")
        bad = np.array([[1.0, np.nan]], dtype=np.float32)
        with pytest.raises(InputError):
            nn.mlp_forward(net, bad)


class TestBackward:
    def test_single_linear_layer_hand_case(self):
        # y = x @ W + b, upstream g: dW = x^T g, db = colsum g, dx = g W^T
        net = nn.Mlp(
            weights=[np.array([[1.0, 3.0], [2.0, 4.0]], dtype=np.float32)],
            biases=[np.zeros(2, dtype=np.float32)],
            activations=["linear"],
            head="none",
        )
        x = np.array([[1.0, 2.0]], dtype=np.float32)
        trace = nn.mlp_forward(net, x)
        np.testing.assert_allclose(trace.outputs, [[5.0, 11.0]])
        g = np.array([[1.0, 1.0]], dtype=np.float32)
        grads, dx = nn.mlp_backward(net, trace, g)
        np.testing.assert_allclose(grads[0], [[1.0, 1.0], [2.0, 2.0]])
        np.testing.assert_allclose(grads[1], [1.0, 1.0])
        np.testing.assert_allclose(dx, [[4.0, 6.0]])

    def test_detached_zeroes_input_grads_only(self):
        net = make_net([3, 4, 2], "det", head="softmax")
        x = RngStream(5, "xdet").generator().normal(size=(6, 3)).astype(np.float32)
        trace = nn.mlp_forward(net, x)
        # constant upstream would vanish through the softmax jacobian
        up = RngStream(5, "up").generator().normal(size=trace.outputs.shape).astype(np.float32)
        grads_a, dx_a = nn.mlp_backward(net, trace, up)
        grads_b, dx_b = nn.mlp_backward(net, trace, up, detached=True)
        assert np.array_equal(dx_b, np.zeros_like(dx_b))
        assert not np.array_equal(dx_a, np.zeros_like(dx_a))
        for a, b in zip(grads_a, grads_b):
            np.testing.assert_array_equal(a, b)

    def test_full_net_matches_finite_differences(self):
        rng = RngStream(11, "fdnet")
        net = make_net([4, 5, 3], "fd", head="softmax")
        params = [p.astype(np.float64) for p in net.parameters()]
        x = rng.generator().normal(size=(7, 4))
        labels = rng.generator().integers(0, 3, size=7)

        def rebuild(params):
            m = nn.Mlp(
                weights=[params[0], params[2]],
                biases=[params[1], params[3]],
                activations=list(net.activations),
                head="softmax",
            )
            return m

        def loss_only(params):
            trace = nn.mlp_forward(rebuild(params), x)
            value, _ = nn.softmax_nll(trace.logits, labels)
            return value

        def analytic(params):
            m = rebuild(params)
            trace = nn.mlp_forward(m, x)
            value, glog = nn.softmax_nll(trace.logits, labels)
            grads, _ = nn.mlp_backward(m, trace, glog, wrt_logits=True)
            return grads

        got = analytic(params)
        want = fd_grads(loss_only, params)
        for a, f in zip(got, want):
            denom = max(np.linalg.norm(a) + np.linalg.norm(f), 1e-12)
            assert np.linalg.norm(a - f) / denom < 1e-4

    def test_upstream_through_softmax_head(self):
        # grad wrt outputs routed through the softmax jacobian
        rng = RngStream(13, "jac")
        net = make_net([3, 3, 2], "jacnet", head="softmax")
        params = [p.astype(np.float64) for p in net.parameters()]
        x = rng.generator().normal(size=(5, 3))
        coeff = rng.generator().normal(size=(5, 2))

        def rebuild(params):
            return nn.Mlp(
                weights=[params[0], params[2]],
                biases=[params[1], params[3]],
                activations=list(net.activations),
                head="softmax",
            )

        def loss_only(params):
            trace = nn.mlp_forward(rebuild(params), x)
            return float((coeff * trace.outputs).sum())

        def analytic(params):
            m = rebuild(params)
            trace = nn.mlp_forward(m, x)
            grads, _ = nn.mlp_backward(m, trace, coeff)
            return grads

        got = analytic(params)
        want = fd_grads(loss_only, params)
        for a, f in zip(got, want):
            denom = max(np.linalg.norm(a) + np.linalg.norm(f), 1e-12)
            assert np.linalg.norm(a - f) / denom < 1e-4


class TestSoftmaxNll:
    def test_hand_value(self):
        logits = np.array([[1.0, 0.0]], dtype=np.float32)
        value, grad = nn.softmax_nll(logits, np.array([1]))
        assert value == pytest.approx(math.log(1.0 + math.e), abs=1e-4)
        assert value == pytest.approx(1.3132616875182228, abs=1e-6)
        p = math.e / (1.0 + math.e)
        np.testing.assert_allclose(grad, [[p, -p]], atol=1e-6)

    def test_saturated_logits_stay_finite(self):
        logits = np.array([[10.0, -10.0]], dtype=np.float32)
        value, grad = nn.softmax_nll(logits, np.array([0]))
        assert value < 1e-4
        assert np.isfinite(grad).all()

    def test_grad_is_softmax_minus_onehot_over_rows(self):
        logits = np.array([[0.2, -0.1, 0.5], [1.0, 1.0, 1.0]], dtype=np.float32)
        labels = np.array([2, 0])
        _, grad = nn.softmax_nll(logits, labels)
        z = logits.astype(np.float64)
        p = np.exp(z - z.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        onehot = np.eye(3)[labels]
        np.testing.assert_allclose(grad, (p - onehot) / 2.0, atol=1e-6)

    def test_label_out_of_range(self):
        with pytest.raises(InputError):
            nn.softmax_nll(np.zeros((2, 3), dtype=np.float32), np.array([0, 3]))


class TestAdam:
    def test_single_step_hand_case(self):
        p = [np.array([1.0], dtype=np.float64)]
        state = nn.init_adam(p, lr=0.1)
        nn.adam_step(p, [np.array([1.0])], state)
        # mhat = vhat = 1 after bias correction, delta = -lr / (1 + eps)
        assert abs(p[0][0] - 0.9) < 1e-8

    def test_determinism(self):
        rng = RngStream(21, "adam").generator()
        base = [rng.normal(size=(3, 2)).astype(np.float32), rng.normal(size=2).astype(np.float32)]
        grads = [rng.normal(size=(3, 2)).astype(np.float32), rng.normal(size=2).astype(np.float32)]
        pa = [x.copy() for x in base]
        pb = [x.copy() for x in base]
        sa = nn.init_adam(pa)
        sb = nn.init_adam(pb)
        for _ in range(5):
            nn.adam_step(pa, grads, sa)
            nn.adam_step(pb, grads, sb)
        for a, b in zip(pa, pb):
            assert np.array_equal(a, b)

    def test_shape_mismatch(self):
        p = [np.zeros((2, 2), dtype=np.float32)]
        state = nn.init_adam(p)
        with pytest.raises(ShapeError):
            nn.adam_step(p, [np.zeros(3, dtype=np.float32)], state)


class TestInit:
    def test_bound_768(self):
        net = nn.init_params([768, 768], RngStream(1, "b768"))
        bound = math.sqrt(6.0 / (768 + 768))
        assert bound == pytest.approx(0.0625)
        assert np.abs(net.weights[0]).max() <= bound
        assert np.array_equal(net.biases[0], np.zeros(768, dtype=np.float32))

    def test_reproducible(self):
        a = nn.init_params([5, 4, 3], RngStream(9, "rep"))
        b = nn.init_params([5, 4, 3], RngStream(9, "rep"))
        for wa, wb in zip(a.parameters(), b.parameters()):
            assert np.array_equal(wa, wb)
        c = nn.init_params([5, 4, 3], RngStream(9, "rep2"))
        assert not np.array_equal(a.weights[0], c.weights[0])

    def test_zero_width_rejected(self):
        with pytest.raises(ConfigError):
            nn.init_params([4, 0, 2], RngStream(1, "zw"))


class TestGradCheck:
    def test_quadratic_sanity(self):
        params = [np.array([[1.0, -2.0], [0.5, 3.0]])]

        def loss_fn(ps):
            value = float((ps[0].astype(np.float64) ** 2).sum())
            return value, [2.0 * ps[0]]

        report = nn.grad_check(loss_fn, params)
        assert report.passed
        assert report.max_rel_error < 1e-6

    def test_detects_wrong_gradient(self):
        params = [np.array([[1.0, -2.0]])]

        def loss_fn(ps):
            value = float((ps[0] ** 2).sum())
            return value, [3.0 * ps[0]]  # deliberately wrong scale

        report = nn.grad_check(loss_fn, params)
        assert not report.passed
