"""Pure-numpy reference kernels.

Every function here has a twin with the same signature in ``_kernels.pyx``.
Arrays are float64 and C-contiguous; 2-D inputs are (rows, features).
"""
import numpy as np

GELU_C = 0.7978845608028654  # sqrt(2 / pi)
GELU_A = 0.044715


def layer_norm_fwd(x, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    return xc * rstd, rstd[:, 0].copy()


def layer_norm_bwd(g, y, rstd):
    mg = g.mean(axis=1, keepdims=True)
    mgy = (g * y).mean(axis=1, keepdims=True)
    return (g - mg - y * mgy) * rstd[:, None]


def softmax_fwd(x):
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd(g, y):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def gelu_fwd(x):
    u = GELU_C * (x + GELU_A * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(u))


def gelu_bwd(g, x):
    x2 = x * x
    th = np.tanh(GELU_C * (x + GELU_A * x2 * x))
    du = GELU_C * (1.0 + 3.0 * GELU_A * x2)
    return g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du)


def scatter_add_rows(y, idx, n):
    out = np.zeros((n, y.shape[1]))
    np.add.at(out, idx, y)
    return out


def rope_rotate(x, cos, sin):
    """Rotate consecutive feature pairs of ``x`` (batch, tokens, dim).

    ``cos``/``sin`` are (tokens, dim // 2). Pass ``-sin`` for the inverse.
    """
    out = np.empty_like(x)
    xe = x[..., 0::2]
    xo = x[..., 1::2]
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos
    return out


def box_sum(img, k):
    """Sums over every k x k window of a 2-D array, stride 1, valid region."""
    c = np.zeros((img.shape[0] + 1, img.shape[1] + 1))
    c[1:, 1:] = img.cumsum(axis=0).cumsum(axis=1)
    return c[k:, k:] - c[:-k, k:] - c[k:, :-k] + c[:-k, :-k]
