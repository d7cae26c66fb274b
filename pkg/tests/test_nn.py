"""Numeric engine checks: every layer against an independent oracle or
finite differences, plus the cross-entropy arithmetic."""

from __future__ import annotations

import numpy as np
import pytest
from scipy.signal import correlate2d

import ethnipipe.nn as nn


def finite_diff(f, x, eps=1e-6):
    """Central-difference gradient of scalar f with respect to array x."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f()
        flat[i] = orig - eps
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


class TestConv:
    def conv_oracle(self, x, kernel, bias):
        b, h, w, cin = x.shape
        cout = kernel.shape[3]
        out = np.zeros((b, h, w, cout))
        for n in range(b):
            for co in range(cout):
                acc = np.zeros((h, w))
                for ci in range(cin):
                    acc += correlate2d(x[n, :, :, ci], kernel[:, :, ci, co], mode="same")
                out[n, :, :, co] = acc + bias[co]
        return out

    def test_matches_correlation_oracle(self, rng):
        x = rng.standard_normal((2, 7, 6, 3))
        k = rng.standard_normal((3, 3, 3, 4))
        b = rng.standard_normal(4)
        assert np.allclose(nn.conv3x3_forward(x, k, b), self.conv_oracle(x, k, b), atol=1e-12)

    def test_identity_kernel(self, rng):
        x = rng.standard_normal((1, 5, 5, 2))
        k = np.zeros((3, 3, 2, 2))
        k[1, 1, 0, 0] = 1.0
        k[1, 1, 1, 1] = 1.0
        out = nn.conv3x3_forward(x, k, np.zeros(2))
        assert np.allclose(out, x, atol=1e-12)

    def test_backward_against_finite_differences(self, rng):
        x = rng.standard_normal((2, 5, 4, 3))
        k = rng.standard_normal((3, 3, 3, 2))
        b = rng.standard_normal(2)
        probe = rng.standard_normal((2, 5, 4, 2))

        def loss():
            return float((nn.conv3x3_forward(x, k, b) * probe).sum())

        dx, dk, db = nn.conv3x3_backward(x, k, probe)
        assert np.allclose(dx, finite_diff(loss, x), atol=1e-6)
        assert np.allclose(dk, finite_diff(loss, k), atol=1e-6)
        assert np.allclose(db, finite_diff(loss, b), atol=1e-6)

    def test_batch_chunking_is_invisible(self, rng, monkeypatch):
        x = rng.standard_normal((6, 8, 8, 3))
        k = rng.standard_normal((3, 3, 3, 5))
        b = rng.standard_normal(5)
        whole = nn.conv3x3_forward(x, k, b)
        monkeypatch.setattr(nn, "_COL_ELEMENT_CAP", 8 * 8 * 9 * 3 * 2)  # 2 images per chunk
        chunked = nn.conv3x3_forward(x, k, b)
        assert np.array_equal(whole, chunked)


class TestPool:
    def test_hand_example(self):
        x = np.array(
            [[1, 2, 5, 6], [3, 4, 7, 8], [9, 10, 13, 14], [11, 12, 15, 16]], dtype=np.float64
        ).reshape(1, 4, 4, 1)
        out, _ = nn.maxpool2x2_forward(x)
        assert np.array_equal(out.reshape(2, 2), np.array([[4, 8], [12, 16]]))

    def test_odd_edges_are_dropped(self, rng):
        x = rng.standard_normal((1, 5, 5, 2))
        out, _ = nn.maxpool2x2_forward(x)
        assert out.shape == (1, 2, 2, 2)
        trimmed, _ = nn.maxpool2x2_forward(x[:, :4, :4, :])
        assert np.array_equal(out, trimmed)

    def test_tie_routes_gradient_to_first_position(self):
        x = np.full((1, 2, 2, 1), 3.0)
        out, idx = nn.maxpool2x2_forward(x)
        dy = np.ones_like(out)
        dx = nn.maxpool2x2_backward(x.shape, idx, dy)
        assert dx[0, 0, 0, 0] == 1.0
        assert dx.sum() == 1.0

    def test_backward_against_finite_differences(self, rng):
        # Keep values well separated so no finite-difference step crosses
        # an argmax change.
        x = rng.permutation(36).astype(np.float64).reshape(1, 6, 6, 1)
        probe = rng.standard_normal((1, 3, 3, 1))

        def loss():
            out, _ = nn.maxpool2x2_forward(x)
            return float((out * probe).sum())

        _, idx = nn.maxpool2x2_forward(x)
        dx = nn.maxpool2x2_backward(x.shape, idx, probe)
        assert np.allclose(dx, finite_diff(loss, x, eps=1e-3), atol=1e-9)

    def test_odd_edge_gets_zero_gradient(self, rng):
        x = rng.standard_normal((1, 5, 5, 1))
        out, idx = nn.maxpool2x2_forward(x)
        dx = nn.maxpool2x2_backward(x.shape, idx, np.ones_like(out))
        assert np.all(dx[:, 4, :, :] == 0) and np.all(dx[:, :, 4, :] == 0)


class TestDenseRelu:
    def test_dense_is_affine(self, rng):
        x = rng.standard_normal((3, 7))
        w = rng.standard_normal((7, 4))
        b = rng.standard_normal(4)
        assert np.allclose(nn.dense_forward(x, w, b), x @ w + b, atol=1e-12)

    def test_dense_backward(self, rng):
        x = rng.standard_normal((3, 5))
        w = rng.standard_normal((5, 2))
        b = rng.standard_normal(2)
        probe = rng.standard_normal((3, 2))

        def loss():
            return float((nn.dense_forward(x, w, b) * probe).sum())

        dx, dw, db = nn.dense_backward(x, w, probe)
        assert np.allclose(dx, finite_diff(loss, x), atol=1e-6)
        assert np.allclose(dw, finite_diff(loss, w), atol=1e-6)
        assert np.allclose(db, finite_diff(loss, b), atol=1e-6)

    def test_relu(self):
        x = np.array([-2.0, -0.0, 0.0, 3.0])
        assert np.array_equal(nn.relu_forward(x), [0.0, 0.0, 0.0, 3.0])
        dy = np.ones_like(x)
        # The kink at exactly zero passes no gradient.
        assert np.array_equal(nn.relu_backward(x, dy), [0.0, 0.0, 0.0, 1.0])


class TestSoftmax:
    def test_rows_sum_to_one(self, rng):
        z = rng.standard_normal((10, 4)) * 3
        p = nn.softmax_forward(z)
        assert np.allclose(p.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(p >= 0)

    def test_shift_invariance_and_stability(self, rng):
        z = rng.standard_normal((4, 4))
        assert np.allclose(nn.softmax_forward(z), nn.softmax_forward(z + 123.0), atol=1e-12)
        huge = nn.softmax_forward(np.array([[1e4, 0.0, -1e4, 5.0]]))
        assert np.all(np.isfinite(huge))
        assert huge[0, 0] == pytest.approx(1.0)

    def test_backward(self, rng):
        z = rng.standard_normal((3, 4))
        probe = rng.standard_normal((3, 4))

        def loss():
            return float((nn.softmax_forward(z) * probe).sum())

        dz = nn.softmax_backward(nn.softmax_forward(z), probe)
        assert np.allclose(dz, finite_diff(loss, z), atol=1e-6)


class TestCrossEntropy:
    def test_perfect_prediction_is_zero(self):
        probs = np.eye(4)
        labels = np.arange(4)
        assert nn.cross_entropy(probs, labels) == pytest.approx(0.0, abs=1e-12)

    def test_uniform_prediction_is_ln4(self):
        probs = np.full((6, 4), 0.25)
        labels = np.zeros(6, dtype=np.intp)
        assert nn.cross_entropy(probs, labels) == pytest.approx(np.log(4.0), rel=1e-12)

    def test_batch_mean_by_hand(self):
        probs = np.array([[0.5, 0.3, 0.1, 0.1], [0.1, 0.2, 0.6, 0.1]])
        labels = np.array([0, 2])
        expected = -(np.log(0.5) + np.log(0.6)) / 2
        assert nn.cross_entropy(probs, labels) == pytest.approx(expected, rel=1e-12)

    def test_zero_probability_is_floored(self):
        probs = np.array([[0.0, 1.0, 0.0, 0.0]])
        labels = np.array([0])
        loss = nn.cross_entropy(probs, labels)
        assert np.isfinite(loss)
        assert loss == pytest.approx(-np.log(nn.PROB_FLOOR), rel=1e-12)

    def test_label_validation(self):
        probs = np.full((2, 4), 0.25)
        with pytest.raises(ValueError):
            nn.cross_entropy(probs, np.array([0, 4]))
        with pytest.raises(ValueError):
            nn.cross_entropy(probs, np.array([-1, 0]))
        with pytest.raises(ValueError):
            nn.cross_entropy(probs, np.array([0]))

    def test_backward_values(self):
        probs = np.array([[0.5, 0.3, 0.1, 0.1], [0.1, 0.2, 0.6, 0.1]])
        labels = np.array([0, 2])
        dprobs = nn.cross_entropy_backward(probs, labels)
        expected = np.zeros_like(probs)
        expected[0, 0] = -1 / (2 * 0.5)
        expected[1, 2] = -1 / (2 * 0.6)
        assert np.allclose(dprobs, expected, atol=1e-12)

    def test_backward_ignores_floored_entries(self):
        probs = np.array([[0.0, 1.0, 0.0, 0.0]])
        dprobs = nn.cross_entropy_backward(probs, np.array([0]))
        assert np.all(dprobs == 0.0)

    def test_softmax_cross_entropy_logit_identity(self, rng):
        z = rng.standard_normal((8, 4))
        labels = rng.integers(0, 4, size=8)
        probs = nn.softmax_forward(z)
        chained = nn.softmax_backward(probs, nn.cross_entropy_backward(probs, labels))
        onehot = np.eye(4)[labels]
        direct = (probs - onehot) / len(labels)
        assert np.max(np.abs(chained - direct)) < 1e-6
