"""Dense float64 kernels shared by the model, optimizers and theory checks.

Tensors are plain ``numpy.ndarray`` objects in C (row-major) order with
dtype float64. Random streams are ``numpy.random.Generator`` instances that
are advanced in place.
"""

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def make_rng(seed):
    return np.random.default_rng(seed)


def _as_batched(signal):
    signal = np.asarray(signal, dtype=np.float64)
    if signal.ndim == 2:
        return signal[None], True
    if signal.ndim == 3:
        return signal, False
    raise ShapeError(f"signal must be (C_in, L) or (N, C_in, L), got {signal.shape}")


def _check_conv(x_shape, kernels, bias, padding):
    if kernels.ndim != 3:
        raise ShapeError(f"kernels must be (C_out, C_in, k), got {kernels.shape}")
    c_out, c_in, k = kernels.shape
    _, length, xc = x_shape
    if xc != c_in:
        raise ShapeError(f"signal has {xc} channels but kernels expect {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"bias must be ({c_out},), got {bias.shape}")
    if padding < 0 or k > length + 2 * padding:
        raise ShapeError(f"kernel size {k} exceeds padded length {length + 2 * padding}")


def im2col_cl(x, k, padding):
    """Channels-last windows: (N, L, C) -> (N, L_out, k * C), offset-major."""
    n, length, c = x.shape
    l_out = length + 2 * padding - k + 1
    cols = np.zeros((n, l_out, k, c))
    for j in range(k):
        lo, hi = max(0, padding - j), min(l_out, length + padding - j)
        if hi > lo:
            cols[:, lo:hi, j, :] = x[:, lo + j - padding:hi + j - padding, :]
    return cols.reshape(n, l_out, k * c)


def _kernel_matrix(kernels):
    c_out, c_in, k = kernels.shape
    return kernels.transpose(0, 2, 1).reshape(c_out, k * c_in)


def conv1d_forward_cl(x, kernels, bias, padding=0, cols=None):
    """Channels-last convolution: (N, L, C_in) -> (N, L_out, C_out).

    Returns ``(output, cols)`` so the window matrix can be reused by the
    backward pass.
    """
    _check_conv(x.shape, kernels, bias, padding)
    k = kernels.shape[2]
    if cols is None:
        cols = im2col_cl(x, k, padding)
    n, l_out, kc = cols.shape
    out = cols.reshape(n * l_out, kc) @ _kernel_matrix(kernels).T + bias
    return out.reshape(n, l_out, -1), cols


def conv1d_backward_cl(upstream_grad, cols, kernels, length, padding=0, need_signal_grad=True):
    """Channels-last gradients given the forward window matrix ``cols``."""
    c_out, c_in, k = kernels.shape
    n, l_out, _ = cols.shape
    up = upstream_grad
    if up.shape != (n, l_out, c_out):
        raise ShapeError(f"upstream_grad must be {(n, l_out, c_out)}, got {up.shape}")
    rows = up.reshape(n * l_out, c_out)
    gw = rows.T @ cols.reshape(n * l_out, k * c_in)
    grad_kernels = gw.reshape(c_out, k, c_in).transpose(0, 2, 1).copy()
    grad_bias = rows.sum(axis=0)
    grad_signal = None
    if need_signal_grad:
        dcols = (rows @ _kernel_matrix(kernels)).reshape(n, l_out, k, c_in)
        grad_signal = np.zeros((n, length, c_in))
        for j in range(k):
            lo, hi = max(0, padding - j), min(l_out, length + padding - j)
            if hi > lo:
                grad_signal[:, lo + j - padding:hi + j - padding, :] += dcols[:, lo:hi, j, :]
    return grad_signal, grad_kernels, grad_bias


def conv1d_forward(signal, kernels, bias, padding=0):
    """Stride-1 1-D cross-correlation with symmetric zero padding.

    ``signal`` is ``(C_in, L)`` or batched ``(N, C_in, L)``; ``kernels`` is
    ``(C_out, C_in, k)``. Output length is ``L + 2*padding - k + 1``.
    """
    x, squeeze = _as_batched(signal)
    kernels = np.asarray(kernels, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    out, _ = conv1d_forward_cl(x.transpose(0, 2, 1), kernels, bias, padding)
    out = np.ascontiguousarray(out.transpose(0, 2, 1))
    return out[0] if squeeze else out


def conv1d_backward(upstream_grad, signal, kernels, padding=0, need_signal_grad=True):
    """Gradients of ``sum(upstream_grad * conv1d_forward(...))``.

    Returns ``(grad_signal, grad_kernels, grad_bias)``; ``grad_signal`` is
    ``None`` when ``need_signal_grad`` is false.
    """
    x, squeeze = _as_batched(signal)
    kernels = np.asarray(kernels, dtype=np.float64)
    up = np.asarray(upstream_grad, dtype=np.float64)
    if squeeze:
        up = up[None]
    x_cl = x.transpose(0, 2, 1)
    _check_conv(x_cl.shape, kernels, None, padding)
    cols = im2col_cl(x_cl, kernels.shape[2], padding)
    gs, gk, gb = conv1d_backward_cl(up.transpose(0, 2, 1), cols, kernels, x.shape[2], padding,
                                    need_signal_grad)
    if gs is not None:
        gs = np.ascontiguousarray(gs.transpose(0, 2, 1))
        if squeeze:
            gs = gs[0]
    return gs, gk, gb


def project_onto(x, g):
    """Orthogonal projection of ``x`` onto the line spanned by ``g``.

    Returns the zero vector when ``g`` is zero.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    g = np.asarray(g, dtype=np.float64).ravel()
    if x.shape != g.shape:
        raise ShapeError(f"length mismatch: {x.size} vs {g.size}")
    gg = float(g @ g)
    if gg == 0.0:
        return np.zeros_like(g)
    return (float(x @ g) / gg) * g


def projection_coefficient(x, g):
    """Signed scalar ``<x, g> / <g, g>`` (0 when ``g`` is zero)."""
    gg = float(g @ g)
    return 0.0 if gg == 0.0 else float(x @ g) / gg


def gaussian_sample(rng, shape, std=1.0):
    """I.i.d. N(0, std^2) draws. The stream advances by the same amount for any ``std``."""
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    draw = rng.standard_normal(shape)
    if std == 0:
        return np.zeros_like(draw)
    return draw * std
