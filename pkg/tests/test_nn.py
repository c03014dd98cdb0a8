"""Autodiff engine: gradients vs. finite differences, Adam algebra, serialization."""

import math

import numpy as np
import pytest

from seqoed import nn

from helpers import finite_difference_grads, relative_gradient_error


def make_net(rng, sizes, acts):
    return nn.DenseNet.create(sizes, acts, rng)


class TestForward:
    def test_identity_single_layer_is_affine(self):
        net = nn.DenseNet([np.array([[2.0], [1.0]])], [np.array([0.5])], ["identity"])
        out, _ = nn.forward(net, np.array([[1.0, 3.0]]))
        assert out[0, 0] == pytest.approx(2.0 * 1 + 1.0 * 3 + 0.5)

    def test_zero_input_zero_bias_logsoftmax_is_uniform(self):
        rng = np.random.default_rng(0)
        net = make_net(rng, [4, 8, 8, 5], ["relu", "relu", "logsoftmax"])
        out, _ = nn.forward(net, np.zeros(4))
        np.testing.assert_allclose(out, math.log(1.0 / 5.0), atol=1e-15)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        net = make_net(rng, [3, 6, 4], ["relu", "softmax"])
        out, _ = nn.forward(net, rng.normal(size=(10, 3)))
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-14)

    def test_input_dim_mismatch_raises(self):
        rng = np.random.default_rng(2)
        net = make_net(rng, [3, 2], ["identity"])
        with pytest.raises(ValueError):
            nn.forward(net, np.zeros((5, 4)))


class TestBackward:
    @pytest.mark.parametrize("acts,out_mode", [
        (["relu", "relu", "identity"], "sum"),
        (["relu", "sigmoid"], "sum"),
        (["relu", "relu", "softmax"], "weighted"),
        (["relu", "logsoftmax"], "weighted"),
    ])
    def test_param_grads_match_finite_differences(self, acts, out_mode):
        rng = np.random.default_rng(3)
        sizes = [4] + [7] * (len(acts) - 1) + [3]
        net = make_net(rng, sizes, acts)
        x = rng.normal(size=(5, 4))
        wvec = rng.normal(size=(5, 3))

        def objective():
            out, _ = nn.forward(net, x)
            return float((out * wvec).sum()) if out_mode == "weighted" else float(out.sum())

        d_out = wvec if out_mode == "weighted" else np.ones((5, 3))
        out, tape = nn.forward(net, x)
        grads, _ = nn.backward(net, tape, d_out)
        fd = finite_difference_grads(objective, net.params())
        assert relative_gradient_error(grads, fd) < 1e-7

    def test_input_grads_match_finite_differences(self):
        rng = np.random.default_rng(4)
        net = make_net(rng, [3, 8, 8, 2], ["relu", "relu", "identity"])
        x = rng.normal(size=(4, 3))

        def objective():
            out, _ = nn.forward(net, x)
            return float((out ** 1).sum())

        out, tape = nn.forward(net, x)
        _, d_x = nn.backward(net, tape, np.ones((4, 2)))
        fd = finite_difference_grads(objective, [x])
        assert relative_gradient_error([d_x], fd) < 1e-7

    def test_tape_reuse_raises(self):
        rng = np.random.default_rng(5)
        net = make_net(rng, [2, 4, 1], ["relu", "identity"])
        out, tape = nn.forward(net, np.zeros((3, 2)))
        nn.backward(net, tape, np.ones((3, 1)))
        with pytest.raises(RuntimeError):
            nn.backward(net, tape, np.ones((3, 1)))

    def test_batch_grad_is_sum_of_row_grads(self):
        rng = np.random.default_rng(6)
        net = make_net(rng, [3, 5, 2], ["relu", "identity"])
        x = rng.normal(size=(4, 3))
        out, tape = nn.forward(net, x)
        batch_grads, _ = nn.backward(net, tape, np.ones((4, 2)))
        acc = [np.zeros_like(p) for p in net.params()]
        for row in x:
            out_r, tape_r = nn.forward(net, row)
            g_r, _ = nn.backward(net, tape_r, np.ones(2))
            for a, g in zip(acc, g_r):
                a += g
        for got, want in zip(batch_grads, acc):
            np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


class TestAdam:
    def test_first_step_closed_form(self):
        # grad 1.0, lr 1e-3: bias-corrected step is lr/(1+eps) ~ lr.
        p = [np.zeros(1)]
        state = nn.AdamState.for_params(p)
        nn.adam_step(p, [np.ones(1)], state, 1e-3)
        assert p[0][0] == pytest.approx(-1e-3, rel=1e-6)
        assert state.t == 1

    def test_two_steps_match_reference_recurrence(self):
        rng = np.random.default_rng(7)
        p_arr = rng.normal(size=(3, 2))
        grads = [rng.normal(size=(3, 2)) for _ in range(2)]
        p = [p_arr.copy()]
        state = nn.AdamState.for_params(p)
        for g in grads:
            nn.adam_step(p, [g], state, 1e-2)
        # Independent reference
        m = np.zeros((3, 2)); v = np.zeros((3, 2)); ref = p_arr.copy()
        for t, g in enumerate(grads, start=1):
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref -= 1e-2 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(p[0], ref, rtol=1e-13)

    def test_geometric_lr_decay_closed_form(self):
        # The trainer passes lr = base * decay**iteration; after 10000
        # iterations at decay 0.9999 the effective lr is base * 0.9999^10000.
        lr = 1e-3 * 0.9999 ** 10000
        assert lr == pytest.approx(3.67861046e-4, rel=1e-8)

    def test_soft_update_algebra(self):
        t = [np.array([1.0, 2.0])]
        s = [np.array([3.0, 0.0])]
        nn.soft_update(t, s, 0.1)
        np.testing.assert_allclose(t[0], [1.2, 1.8])
        nn.soft_update(t, s, 1.0)
        np.testing.assert_allclose(t[0], [3.0, 0.0])


class TestSerialization:
    def test_round_trip_bitwise(self, tmp_path):
        rng = np.random.default_rng(8)
        net = make_net(rng, [5, 16, 16, 2], ["relu", "relu", "sigmoid"])
        path = tmp_path / "net.bin"
        nn.save_net(path, net, extra={"role": "test"})
        loaded = nn.load_net(path)
        assert loaded.spec() == net.spec()
        for a, b in zip(net.params(), loaded.params()):
            assert np.array_equal(a, b)

    def test_rejects_wrong_kind(self, tmp_path):
        from seqoed.serialization import write_blob
        path = tmp_path / "junk.bin"
        write_blob(path, {"kind": "other"}, [np.zeros(3)])
        with pytest.raises(ValueError):
            nn.load_net(path)

    def test_blob_trailing_bytes_detected(self, tmp_path):
        from seqoed.serialization import write_blob, read_blob
        path = tmp_path / "b.bin"
        write_blob(path, {}, [np.arange(4.0)])
        with open(path, "ab") as fh:
            fh.write(b"\x00")
        with pytest.raises(ValueError):
            read_blob(path)


class TestInit:
    def test_kaiming_bound_for_relu_layers(self):
        rng = np.random.default_rng(9)
        net = make_net(rng, [100, 50], ["relu"])
        bound = math.sqrt(6.0 / 100)
        assert np.abs(net.weights[0]).max() <= bound
        assert np.abs(net.weights[0]).max() > 0.8 * bound

    def test_xavier_bound_for_sigmoid_layers(self):
        rng = np.random.default_rng(10)
        net = make_net(rng, [100, 50], ["sigmoid"])
        bound = math.sqrt(6.0 / 150)
        assert np.abs(net.weights[0]).max() <= bound

    def test_biases_zero(self):
        rng = np.random.default_rng(11)
        net = make_net(rng, [3, 4, 2], ["relu", "identity"])
        for b in net.biases:
            assert np.all(b == 0.0)
