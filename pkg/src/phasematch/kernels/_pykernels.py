"""Pure-numpy reference versions of the compiled kernels.

Every function here has a twin in ``_ckernels.pyx`` with the same signature
and bit-identical output (same accumulation order).  Arrays are NHWC.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import maximum_filter


def im2col(x, k):
    """(N, H, W, C) -> (N*Ho*Wo, C*k*k) with rows ordered (n, y, x) and columns (c, i, j)."""
    n, h, w, c = x.shape
    ho, wo = h - k + 1, w - k + 1
    win = sliding_window_view(x, (k, k), axis=(1, 2))  # (N, Ho, Wo, C, k, k)
    return np.ascontiguousarray(win).reshape(n * ho * wo, c * k * k)


def col2im(cols, shape, k):
    """Adjoint of :func:`im2col`: scatter-add columns back into an (N, H, W, C) array."""
    n, h, w, c = shape
    ho, wo = h - k + 1, w - k + 1
    cols6 = cols.reshape(n, ho, wo, c, k, k)
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, i:i + ho, j:j + wo, :] += cols6[:, :, :, :, i, j]
    return out


def maxpool2_forward(x):
    """2x2/stride-2 max pooling; odd trailing rows/cols are dropped.

    Returns the pooled array and the winning offset (0..3, row-major, first max wins).
    """
    n, h, w, c = x.shape
    ho, wo = h // 2, w // 2
    blocks = x[:, : 2 * ho, : 2 * wo, :].reshape(n, ho, 2, wo, 2, c)
    blocks = blocks.transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, 4)
    arg = np.argmax(blocks, axis=-1).astype(np.int8)
    out = np.take_along_axis(blocks, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg


def maxpool2_backward(dout, arg, shape):
    n, h, w, c = shape
    ho, wo = dout.shape[1], dout.shape[2]
    dx = np.zeros(shape, dtype=dout.dtype)
    for off in range(4):
        di, dj = divmod(off, 2)
        sel = np.where(arg == off, dout, 0)
        dx[:, di:2 * ho:2, dj:2 * wo:2, :] = sel
    return dx


def nms_strict(values, radius, threshold, border):
    """Mask of pixels that are strictly greater than every other pixel in their
    (2r+1)^2 window (clipped at the image edge), reach ``threshold`` and lie at
    least ``border`` pixels from each edge."""
    values = np.asarray(values, dtype=np.float64)
    h, w = values.shape
    fp = np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
    fp[radius, radius] = False
    neigh = maximum_filter(values, footprint=fp, mode="constant", cval=-np.inf)
    mask = (values > neigh) & (values >= threshold)
    inner = np.zeros_like(mask)
    if h > 2 * border and w > 2 * border:
        inner[border:h - border, border:w - border] = True
    return mask & inner
