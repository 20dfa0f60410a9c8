"""Differentiable operations on :class:`~coughscreen.nn.tensor.Tensor`.

Every op computes its forward result with numpy and registers a closure that
maps the output gradient to input gradients. Reductions that feed statistics
(batch norm, bias gradients, losses) accumulate in float64 and cast back to
the storage dtype.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, as_tensor, make_result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)), dtype=np.float64).astype(g.dtype)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True, dtype=np.float64).astype(g.dtype)
    return g.reshape(shape)


# --- elementwise / structural ------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.shape))

    return make_result(a.data + b.data, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.shape))

    return make_result(a.data * b.data, (a, b), backward, "mul")


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; `b` may be 1-D or 2-D shared across the batch."""
    a, b = as_tensor(a), as_tensor(b)
    out = a.data @ b.data

    def backward(g):
        if b.data.ndim == 1:
            if a.requires_grad:
                a.accumulate(g[..., None] * b.data)
            if b.requires_grad:
                gb = (a.data * g[..., None]).reshape(-1, b.data.shape[0]).sum(0, dtype=np.float64)
                b.accumulate(gb.astype(b.dtype))
            return
        if a.requires_grad:
            a.accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            if a.data.ndim > 2 and b.data.ndim == 2:
                a2 = a.data.reshape(-1, a.data.shape[-1])
                b.accumulate(a2.T @ g.reshape(-1, g.shape[-1]))
            else:
                b.accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return make_result(out, (a, b), backward, "matmul")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def backward(g):
        x.accumulate(g * (1.0 - y * y))

    return make_result(y, (x,), backward, "tanh")


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0)
    mask = y > 0

    def backward(g):
        x.accumulate(g * mask)

    return make_result(y, (x,), backward, "relu")


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape

    def backward(g):
        x.accumulate(g.reshape(src))

    return make_result(x.data.reshape(shape), (x,), backward, "reshape")


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        x.accumulate(np.transpose(g, inv))

    return make_result(np.transpose(x.data, axes), (x,), backward, "transpose")


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, part in zip(tensors, np.split(g, bounds, axis=axis)):
            if t.requires_grad:
                t.accumulate(np.ascontiguousarray(part))

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return make_result(data, tensors, backward, "concat")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    total = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype)

    def backward(g):
        x.accumulate(np.broadcast_to(g, x.shape).copy())

    return make_result(total, (x,), backward, "sum")


# --- probability ------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        x.accumulate(p * (g - (g * p).sum(axis=axis, keepdims=True)))

    return make_result(p, (x,), backward, "softmax")


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean categorical cross-entropy of softmax(logits) against integer labels.

    Fused for numerical stability: the gradient w.r.t. the logits is
    ``(softmax - onehot) / N``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError("label index out of range")
    logp = log_softmax(logits.data.astype(np.float64), axis=1)
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[np.arange(n), labels] -= 1.0
        logits.accumulate((grad * (float(g) / n)).astype(logits.dtype))

    return make_result(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "softmax_ce")


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Mean of -log p[label] for already-normalised probabilities."""
    labels = np.asarray(labels, dtype=np.int64)
    n = probs.shape[0]
    idx = np.arange(n)
    picked = probs.data[idx, labels].astype(np.float64)
    loss = -np.log(picked).mean()

    def backward(g):
        grad = np.zeros_like(probs.data)
        grad[idx, labels] = (-float(g) / n) / picked
        probs.accumulate(grad)

    return make_result(np.asarray(loss, dtype=probs.dtype), (probs,), backward, "cross_entropy")


# --- layers -----------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with weight laid out ``[in, out]``."""
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear: input dim {x.shape[-1]} != weight rows {weight.shape[0]}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        if x.requires_grad:
            x.accumulate(g @ weight.data.T)
        if weight.requires_grad:
            weight.accumulate(x.data.T @ g)
        if bias is not None and bias.requires_grad:
            bias.accumulate(g.sum(axis=0, dtype=np.float64).astype(bias.dtype))

    return make_result(out, parents, backward, "linear")


def _im2col3(x: np.ndarray) -> np.ndarray:
    """3x3 patches of an NCHW batch as rows ``[N*H*W, 9*C]`` ordered (ky, kx, c).

    Built from nine block copies of a zero-padded NHWC buffer, which is
    noticeably cheaper than materialising a transposed sliding-window view.
    """
    n, c, h, w = x.shape
    xp = np.zeros((n, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1, :] = x.transpose(0, 2, 3, 1)
    cols = np.empty((n, h, w, 9, c), dtype=x.dtype)
    for k in range(9):
        ky, kx = divmod(k, 3)
        cols[:, :, :, k, :] = xp[:, ky:ky + h, kx:kx + w, :]
    return cols.reshape(n * h * w, 9 * c)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 1) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1 (same-size output).

    Forward is im2col + one GEMM. The input gradient is accumulated as nine
    shifted GEMMs instead of a col2im scatter, which keeps peak memory at one
    activation-sized buffer.
    """
    if stride != 1 or padding != 1:
        raise NotImplementedError("conv2d supports stride=1, padding=1 only")
    if x.ndim != 4 or weight.shape[2:] != (3, 3) or weight.shape[1] != x.shape[1]:
        raise ValueError(f"conv2d: incompatible input {x.shape} and weight {weight.shape}")
    n, c, h, w = x.shape
    f = weight.shape[0]
    cols = _im2col3(x.data)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(f, 9 * c)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, h, w, f).transpose(0, 3, 1, 2))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * h * w, f)
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(f, 3, 3, c).transpose(0, 3, 1, 2)
            weight.accumulate(np.ascontiguousarray(gw))
        if bias is not None and bias.requires_grad:
            bias.accumulate(g2.sum(axis=0, dtype=np.float64).astype(bias.dtype))
        if x.requires_grad:
            # contiguous [3, 3, F, C] so every slice hits BLAS
            wk = np.ascontiguousarray(weight.data.transpose(2, 3, 0, 1))
            dxp = np.zeros((n, h + 2, w + 2, c), dtype=x.dtype)
            for ky in range(3):
                for kx in range(3):
                    part = g2 @ wk[ky, kx]  # NHW,C
                    dxp[:, ky:ky + h, kx:kx + w, :] += part.reshape(n, h, w, c)
            x.accumulate(np.ascontiguousarray(dxp[:, 1:-1, 1:-1, :].transpose(0, 3, 1, 2)))

    return make_result(out, parents, backward, "conv2d")


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalisation of an NCHW tensor.

    In training mode the batch statistics normalise the input and the running
    buffers are updated in place (unbiased variance, PyTorch convention). In
    eval mode the running buffers are used and left untouched.
    """
    n, c, h, w = x.shape
    m = n * h * w
    if training:
        if n < 2:
            raise ValueError("batch_norm2d needs a batch of at least 2 in training mode")
        mean = x.data.mean(axis=(0, 2, 3), dtype=np.float64)
        centered = x.data - mean.reshape(1, c, 1, 1).astype(x.dtype)
        var = np.einsum("nchw,nchw->c", centered, centered, dtype=np.float64) / m
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mean = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
        centered = x.data - mean.reshape(1, c, 1, 1).astype(x.dtype)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype).reshape(1, c, 1, 1)
    xhat = centered * inv_std
    out = xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)

    def backward(g):
        if beta.requires_grad:
            beta.accumulate(g.sum(axis=(0, 2, 3), dtype=np.float64).astype(beta.dtype))
        if gamma.requires_grad:
            gamma.accumulate(np.einsum("nchw,nchw->c", g, xhat, dtype=np.float64).astype(gamma.dtype))
        if not x.requires_grad:
            return
        gx = g * gamma.data.reshape(1, c, 1, 1)
        if not training:
            x.accumulate(gx * inv_std)
            return
        s1 = gx.sum(axis=(0, 2, 3), dtype=np.float64) / m
        s2 = np.einsum("nchw,nchw->c", gx, xhat, dtype=np.float64) / m
        dx = (gx - s1.reshape(1, c, 1, 1).astype(x.dtype) - xhat * s2.reshape(1, c, 1, 1).astype(x.dtype)) * inv_std
        x.accumulate(dx)

    return make_result(out, (x, gamma, beta), backward, "batch_norm2d")


def max_pool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2.

    Odd spatial sizes are padded right/bottom with -inf. Ties send the gradient
    to the first maximum in row-major window order.
    """
    n, c, h, w = x.shape
    ph, pw = h % 2, w % 2
    xp = x.data
    if ph or pw:
        xp = np.pad(xp, ((0, 0), (0, 0), (0, ph), (0, pw)), constant_values=-np.inf)
    corners = [xp[:, :, dy::2, dx::2] for dy in (0, 1) for dx in (0, 1)]
    out = np.maximum(np.maximum(corners[0], corners[1]), np.maximum(corners[2], corners[3]))

    def backward(g):
        gx = np.zeros(xp.shape, dtype=g.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        for k, corner in enumerate(corners):
            dy, dx = divmod(k, 2)
            hit = corner == out
            if k < 3:
                hit &= ~taken
                taken |= hit
            else:
                hit = ~taken
            gx[:, :, dy::2, dx::2] = g * hit
        x.accumulate(np.ascontiguousarray(gx[:, :, :h, :w]) if (ph or pw) else gx)

    return make_result(out, (x,), backward, "max_pool2")


def _adaptive_bounds(size: int, out: int) -> list[tuple[int, int]]:
    return [((i * size) // out, ((i + 1) * size) // out) for i in range(out)]


def adaptive_avg_pool2d(x: Tensor, out_hw: tuple[int, int] = (2, 2)) -> Tensor:
    """Average over the region ``[floor(i*H/o), floor((i+1)*H/o))`` per output cell."""
    n, c, h, w = x.shape
    oh, ow = out_hw
    if h < oh or w < ow:
        raise ValueError(f"adaptive_avg_pool2d: input {h}x{w} smaller than output {oh}x{ow}")
    rows, cols = _adaptive_bounds(h, oh), _adaptive_bounds(w, ow)
    out = np.empty((n, c, oh, ow), dtype=x.dtype)
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            out[:, :, i, j] = x.data[:, :, r0:r1, c0:c1].mean(axis=(2, 3), dtype=np.float64)

    def backward(g):
        gx = np.zeros_like(x.data)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                area = (r1 - r0) * (c1 - c0)
                gx[:, :, r0:r1, c0:c1] = (g[:, :, i, j] / area)[:, :, None, None]
        x.accumulate(gx)

    return make_result(out, (x,), backward, "adaptive_avg_pool2d")
