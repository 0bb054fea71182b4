"""Independent reference implementations used by the test-suite.

Nothing here imports the package's kernels; each oracle is the slowest,
most literal way to compute its quantity.
"""

import itertools

import numpy as np

STEP = 1e-5


def naive_conv3d(x, kernels, bias, stride=(1, 1, 1), pad=(0, 0, 0)):
    b, c, D, H, W = x.shape
    oc, _, kd, kh, kw = kernels.shape
    od = (D + 2 * pad[0] - kd) // stride[0] + 1
    oh = (H + 2 * pad[1] - kh) // stride[1] + 1
    ow = (W + 2 * pad[2] - kw) // stride[2] + 1
    out = np.zeros((b, oc, od, oh, ow))
    for n, o, z, y, xx in itertools.product(range(b), range(oc), range(od), range(oh), range(ow)):
        acc = bias[o]
        for ci, i, j, k in itertools.product(range(c), range(kd), range(kh), range(kw)):
            d = z * stride[0] + i - pad[0]
            h = y * stride[1] + j - pad[1]
            w = xx * stride[2] + k - pad[2]
            if 0 <= d < D and 0 <= h < H and 0 <= w < W:
                acc += x[n, ci, d, h, w] * kernels[o, ci, i, j, k]
        out[n, o, z, y, xx] = acc
    return out


def naive_maxpool3d(x, window, stride):
    b, c, D, H, W = x.shape
    od = (D - window[0]) // stride[0] + 1
    oh = (H - window[1]) // stride[1] + 1
    ow = (W - window[2]) // stride[2] + 1
    out = np.zeros((b, c, od, oh, ow))
    for n, ch, z, y, xx in itertools.product(range(b), range(c), range(od), range(oh), range(ow)):
        best = -np.inf
        for i, j, k in itertools.product(*(range(w) for w in window)):
            v = x[n, ch, z * stride[0] + i, y * stride[1] + j, xx * stride[2] + k]
            if v > best:
                best = v
        out[n, ch, z, y, xx] = best
    return out


def central_difference(f, x, index, step=STEP):
    """d f / d x[index] by central differences; ``x`` is not modified."""
    xp = x.copy()
    xm = x.copy()
    xp[index] += step
    xm[index] -= step
    return (f(xp) - f(xm)) / (2 * step)


def relative_error(analytic, numeric):
    """Norm-wise relative error between two gradient vectors."""
    a = np.asarray(analytic, dtype=float).ravel()
    n = np.asarray(numeric, dtype=float).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def sample_indices(shape, count, rng):
    size = int(np.prod(shape))
    flat = rng.choice(size, size=min(count, size), replace=False)
    return [np.unravel_index(i, shape) for i in flat]


def fd_check(f, x, analytic_grad, rng, count=25, step=STEP, skip=None):
    """Compare ``analytic_grad`` to central differences of scalar ``f`` at
    ``count`` sampled coordinates of ``x``; returns the relative error.

    ``skip(index)`` may veto a coordinate (kinks, ties).
    """
    idx = [i for i in sample_indices(x.shape, count, rng) if skip is None or not skip(i)]
    numeric = [central_difference(f, x, i, step) for i in idx]
    analytic = [analytic_grad[i] for i in idx]
    return relative_error(analytic, numeric)
