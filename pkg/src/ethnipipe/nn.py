"""Layer math for the convolutional classifier.

All tensors are channels-last numpy arrays: activations (B, H, W, C) or
(B, F), conv kernels (3, 3, Cin, Cout), dense weights (F_in, F_out).
Forward functions return outputs (plus whatever the matching backward
needs); everything is deterministic given its inputs.
"""

from __future__ import annotations

import numpy as np

PROB_FLOOR = 1e-12

# Cap on im2col scratch elements per GEMM; convolutions chunk the batch
# so large inputs do not materialize multi-GB patch matrices.
_COL_ELEMENT_CAP = 1 << 24


def _conv_chunks(batch: int, h: int, w: int, cin: int) -> int:
    per_image = h * w * 9 * cin
    return max(1, min(batch, _COL_ELEMENT_CAP // max(per_image, 1)))


def _im2col(x: np.ndarray) -> np.ndarray:
    """3x3 pad-1 patches of x (B, H, W, Cin) as a (B*H*W, 9*Cin) matrix."""
    b, h, w, cin = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    view = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    # view: (B, H, W, Cin, 3, 3) -> (B, H, W, 3, 3, Cin)
    cols = view.transpose(0, 1, 2, 4, 5, 3).reshape(b * h * w, 9 * cin)
    return np.ascontiguousarray(cols)


def conv3x3_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    b, h, w, cin = x.shape
    if kernel.shape[:3] != (3, 3, cin):
        raise ValueError(f"kernel shape {kernel.shape} does not match input channels {cin}")
    cout = kernel.shape[3]
    kflat = kernel.reshape(9 * cin, cout)
    out = np.empty((b, h, w, cout), dtype=x.dtype)
    step = _conv_chunks(b, h, w, cin)
    for start in range(0, b, step):
        chunk = x[start : start + step]
        cols = _im2col(chunk)
        out[start : start + step] = (cols @ kflat + bias).reshape(chunk.shape[0], h, w, cout)
    return out


def conv3x3_backward(
    x: np.ndarray, kernel: np.ndarray, dy: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    b, h, w, cin = x.shape
    cout = kernel.shape[3]
    dbias = dy.sum(axis=(0, 1, 2))

    dkernel_flat = np.zeros((9 * cin, cout), dtype=x.dtype)
    step = _conv_chunks(b, h, w, cin)
    for start in range(0, b, step):
        cols = _im2col(x[start : start + step])
        dyflat = dy[start : start + step].reshape(-1, cout)
        dkernel_flat += cols.T @ dyflat
    dkernel = dkernel_flat.reshape(3, 3, cin, cout)

    # Input gradient is a 3x3 pad-1 convolution of dy with the kernel
    # rotated 180 degrees and its channel axes swapped.
    k_rot = kernel[::-1, ::-1].transpose(0, 1, 3, 2)
    dx = conv3x3_forward(dy, np.ascontiguousarray(k_rot), np.zeros(cin, dtype=x.dtype))
    return dx, dkernel, dbias


def maxpool2x2_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 stride-2 max pool, flooring odd sizes. Returns (output, argmax indices)."""
    b, h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    xe = x[:, : h2 * 2, : w2 * 2, :]
    windows = (
        xe.reshape(b, h2, 2, w2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(b, h2, w2, c, 4)
    )
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool2x2_backward(x_shape: tuple, idx: np.ndarray, dy: np.ndarray) -> np.ndarray:
    b, h, w, c = x_shape
    h2, w2 = h // 2, w // 2
    grad_windows = np.zeros((b, h2, w2, c, 4), dtype=dy.dtype)
    np.put_along_axis(grad_windows, idx[..., None], dy[..., None], axis=-1)
    dx = np.zeros(x_shape, dtype=dy.dtype)
    dx[:, : h2 * 2, : w2 * 2, :] = (
        grad_windows.reshape(b, h2, w2, c, 2, 2)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(b, h2 * 2, w2 * 2, c)
    )
    return dx


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return dy * (x > 0)


def dense_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if x.shape[1] != weight.shape[0]:
        raise ValueError(f"dense input width {x.shape[1]} != weight rows {weight.shape[0]}")
    return x @ weight + bias


def dense_backward(
    x: np.ndarray, weight: np.ndarray, dy: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return dy @ weight.T, x.T @ dy, dy.sum(axis=0)


def softmax_forward(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    inner = (dprobs * probs).sum(axis=1, keepdims=True)
    return probs * (dprobs - inner)


def _check_labels(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (probs.shape[0],):
        raise ValueError(f"expected {probs.shape[0]} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= probs.shape[1]:
        raise ValueError(
            f"label out of range 0..{probs.shape[1] - 1}: {labels.min()}..{labels.max()}"
        )
    return labels.astype(np.intp)


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean -ln p[label], with probabilities floored at 1e-12 before the log."""
    labels = _check_labels(probs, labels)
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(picked, PROB_FLOOR))))


def cross_entropy_backward(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of the mean floored cross-entropy with respect to the probabilities."""
    labels = _check_labels(probs, labels)
    b = len(labels)
    dprobs = np.zeros_like(probs)
    picked = probs[np.arange(b), labels]
    live = picked >= PROB_FLOOR
    rows = np.arange(b)[live]
    dprobs[rows, labels[live]] = -1.0 / (b * picked[live])
    return dprobs
