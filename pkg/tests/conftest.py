"""Shared fixtures and brute-force reference implementations."""

import numpy as np
import pytest

from icanet import tensor as T


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def wide():
    """Run the test body in 64-bit precision."""
    with T.precision(64):
        yield


@pytest.fixture
def standard():
    with T.precision(32):
        yield


# ---------------------------------------------------------------------------
# reference kernels, written as literal loops
# ---------------------------------------------------------------------------


def conv2d_loop(x, w, b, stride, padding, dilation):
    """Quadruple-loop cross-correlation with zero padding."""
    n, c, h, wd = x.shape
    cout, cin, k, _ = w.shape
    ho = (h + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    wo = (wd + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for i in range(n):
        for o in range(cout):
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0 if b is None else float(b[o])
                    for ci in range(cin):
                        for ky in range(k):
                            for kx in range(k):
                                r = y * stride - padding + ky * dilation
                                q = xx * stride - padding + kx * dilation
                                if 0 <= r < h and 0 <= q < wd:
                                    acc += x[i, ci, r, q] * w[o, ci, ky, kx]
                    out[i, o, y, xx] = acc
    return out


def bilinear_loop(img, out_h, out_w):
    """Align-corners-false bilinear resampling of a 2-D map, pixel by pixel."""
    h, w = img.shape
    out = np.zeros((out_h, out_w))
    for y in range(out_h):
        sy = max((y + 0.5) * h / out_h - 0.5, 0.0)
        y0 = min(int(np.floor(sy)), h - 1)
        y1 = min(y0 + 1, h - 1)
        ly = sy - y0
        for x in range(out_w):
            sx = max((x + 0.5) * w / out_w - 0.5, 0.0)
            x0 = min(int(np.floor(sx)), w - 1)
            x1 = min(x0 + 1, w - 1)
            lx = sx - x0
            top = (1 - lx) * img[y0, x0] + lx * img[y0, x1]
            bot = (1 - lx) * img[y1, x0] + lx * img[y1, x1]
            out[y, x] = (1 - ly) * top + ly * bot
    return out
