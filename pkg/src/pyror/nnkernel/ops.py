"""Layer kernels on NCHW numpy arrays.

Every ``*_forward`` returns ``(out, cache)`` and the matching ``*_backward``
takes ``(dout, cache)``.
"""

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def _im2col(x, k, stride, padding):
    # rows[(b, oy, ox), (i, j, c)] = xpad[b, c, oy * stride + i, ox * stride + j]
    B, C, H, W = x.shape
    ho = (H + 2 * padding - k) // stride + 1
    wo = (W + 2 * padding - k) // stride + 1
    xt = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
    if padding:
        xt = np.pad(xt, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    rows = np.empty((B, ho, wo, k, k, C), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            rows[:, :, :, i, j] = xt[:, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return rows.reshape(B * ho * wo, k * k * C), ho, wo


def conv_forward(x, w, stride=1, padding=0):
    """2-D cross-correlation without bias, as one GEMM over im2col rows.

    - x: (B, C, H, W)
    - w: (F, C, k, k)
    """
    B = x.shape[0]
    F, _, k, _ = w.shape
    rows, ho, wo = _im2col(x, k, stride, padding)
    wm = w.transpose(0, 2, 3, 1).reshape(F, -1)
    out = (rows @ wm.T).reshape(B, ho, wo, F)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    return out, (x.shape, rows, wm, w.shape, stride, padding)


def conv_backward(dout, cache):
    (B, C, H, W), rows, wm, w_shape, stride, padding = cache
    F, _, k, _ = w_shape
    _, _, ho, wo = dout.shape
    d = np.ascontiguousarray(dout.transpose(0, 2, 3, 1)).reshape(-1, F)
    dw = (d.T @ rows).reshape(F, k, k, C).transpose(0, 3, 1, 2)
    drows = (d @ wm).reshape(B, ho, wo, k, k, C)
    dxt = np.zeros((B, H + 2 * padding, W + 2 * padding, C), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxt[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += drows[:, :, :, i, j]
    if padding:
        dxt = dxt[:, padding:-padding, padding:-padding]
    return np.ascontiguousarray(dxt.transpose(0, 3, 1, 2)), np.ascontiguousarray(dw)


def conv_naive(x, w, stride=1, padding=0):
    """Reference convolution written as plain loops; slow, for testing only."""
    B, C, H, W = x.shape
    F, _, k, _ = w.shape
    ho = (H + 2 * padding - k) // stride + 1
    wo = (W + 2 * padding - k) // stride + 1
    out = np.zeros((B, F, ho, wo), dtype=np.float64)
    for b in range(B):
        for f in range(F):
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0
                    for c in range(C):
                        for ky in range(k):
                            iy = oy * stride + ky - padding
                            if iy < 0 or iy >= H:
                                continue
                            for kx in range(k):
                                ix = ox * stride + kx - padding
                                if 0 <= ix < W:
                                    acc += float(x[b, c, iy, ix]) * float(w[f, c, ky, kx])
                    out[b, f, oy, ox] = acc
    return out


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train,
                      momentum=BN_MOMENTUM, eps=BN_EPS, update_stats=True):
    """Spatial batch norm over (B, H, W) per channel.

    In train mode the running statistics are updated in place (unless
    ``update_stats`` is False) with ``r <- momentum * r + (1 - momentum) * batch``.
    """
    shape = (1, -1, 1, 1)
    if train:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        if update_stats:
            m = x.size // x.shape[1]
            unbiased = var * (m / max(m - 1, 1))
            running_mean *= momentum
            running_mean += (1 - momentum) * mean
            running_var *= momentum
            running_var += (1 - momentum) * unbiased
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape).astype(x.dtype)
    out = xhat * gamma.reshape(shape) + beta.reshape(shape)
    return out.astype(x.dtype, copy=False), (xhat, gamma, inv_std.astype(x.dtype), train)


def batchnorm_backward(dout, cache):
    xhat, gamma, inv_std, train = cache
    shape = (1, -1, 1, 1)
    dbeta = dout.sum(axis=(0, 2, 3))
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dxhat = dout * gamma.reshape(shape)
    if not train:
        return dxhat * inv_std.reshape(shape), dgamma, dbeta
    m = dout.size // dout.shape[1]
    dx = (inv_std.reshape(shape) / m) * (
        m * dxhat
        - dxhat.sum(axis=(0, 2, 3)).reshape(shape)
        - xhat * (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(shape)
    )
    return dx, dgamma, dbeta


def relu_forward(x):
    return np.maximum(x, 0), x > 0


def relu_backward(dout, mask):
    return dout * mask


def avgpool_forward(x, k):
    B, C, H, W = x.shape
    ho, wo = H // k, W // k
    xc = x[:, :, :ho * k, :wo * k]
    out = xc.reshape(B, C, ho, k, wo, k).mean(axis=(3, 5))
    return out, (x.shape, k)


def avgpool_backward(dout, cache):
    (B, C, H, W), k = cache
    ho, wo = dout.shape[2], dout.shape[3]
    dx = np.zeros((B, C, H, W), dtype=dout.dtype)
    spread = np.repeat(np.repeat(dout, k, axis=2), k, axis=3) / (k * k)
    dx[:, :, :ho * k, :wo * k] = spread
    return dx


def global_avgpool_forward(x):
    return x.mean(axis=(2, 3)), x.shape


def global_avgpool_backward(dout, x_shape):
    B, C, H, W = x_shape
    return np.broadcast_to((dout / (H * W))[:, :, None, None], x_shape).copy()


def zeropad_forward(x, extra):
    B, C, H, W = x.shape
    out = np.zeros((B, C + extra, H, W), dtype=x.dtype)
    out[:, :C] = x
    return out, C


def zeropad_backward(dout, channels):
    # gradients for the padded channels go nowhere
    return np.ascontiguousarray(dout[:, :channels])


def linear_forward(x, w, b):
    """x: (B, D), w: (M, D), b: (M,)."""
    return x @ w.T + b, (x, w)


def linear_backward(dout, cache):
    x, w = cache
    return dout @ w, dout.T @ x, dout.sum(axis=0)


def log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy as a scalar of the logits' dtype."""
    log_probs = log_softmax(logits)
    return -log_probs[np.arange(logits.shape[0]), np.asarray(labels)].mean()


def softmax_cross_entropy(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    labels = np.asarray(labels)
    B = logits.shape[0]
    log_probs = log_softmax(logits)
    loss = -log_probs[np.arange(B), labels].mean()
    dlogits = np.exp(log_probs)
    dlogits[np.arange(B), labels] -= 1
    return float(loss), dlogits / B
