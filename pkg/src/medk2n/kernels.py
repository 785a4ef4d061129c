"""Hot numeric kernels.

Every kernel exists twice: a numba ``@njit`` loop and a vectorised numpy
version. The public names bind to the numba variant unless numba is
unavailable or ``MEDK2N_DISABLE_NUMBA`` is set (see :mod:`medk2n._accel`).
Both variants stay importable under explicit ``*_numba`` / ``*_numpy`` names
so tests can pin them against each other and ``benchmarks/`` can time them.
"""

import numpy as np
from scipy import signal

from ._accel import HAVE_NUMBA, njit

GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))  # 137.50776 degrees


# --------------------------------------------------------------------------
# Fermat spiral sampling


def spiral_samples(H, W, n_samples=None):
    """Rounded grid coordinates of the golden-angle Fermat spiral.

    The spiral is centred on the grid centre and scaled so that the last
    sample lands on the corner distance.
    """
    if n_samples is None:
        n_samples = 4 * H * W
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    n = np.arange(n_samples, dtype=np.float64)
    reach = np.hypot(cy, cx)
    c = reach / np.sqrt(n_samples - 1) if n_samples > 1 else 0.0
    r = c * np.sqrt(n)
    theta = n * GOLDEN_ANGLE
    ys = np.floor(cy + r * np.sin(theta) + 0.5).astype(np.int64)
    xs = np.floor(cx + r * np.cos(theta) + 0.5).astype(np.int64)
    return ys, xs


@njit(cache=True)
def _first_visits_numba(ys, xs, H, W):
    visited = np.zeros(H * W, dtype=np.bool_)
    out = np.empty(H * W, dtype=np.int64)
    count = 0
    for k in range(ys.shape[0]):
        y = ys[k]
        x = xs[k]
        if y < 0 or y >= H or x < 0 or x >= W:
            continue
        idx = y * W + x
        if not visited[idx]:
            visited[idx] = True
            out[count] = idx
            count += 1
            if count == H * W:
                break
    return out[:count]


def _first_visits_numpy(ys, xs, H, W):
    ok = (ys >= 0) & (ys < H) & (xs >= 0) & (xs < W)
    idx = ys[ok] * W + xs[ok]
    uniq, first = np.unique(idx, return_index=True)
    return uniq[np.argsort(first, kind="stable")].astype(np.int64)


def first_visits_numba(ys, xs, H, W):
    return _first_visits_numba(np.ascontiguousarray(ys), np.ascontiguousarray(xs), H, W)


first_visits_numpy = _first_visits_numpy


# --------------------------------------------------------------------------
# Gated linear recurrence  h_t = a * h_{t-1} + (1 - a) * x_t


@njit(cache=True)
def _gated_scan_numba(x, a):
    L, C = x.shape
    h = np.empty_like(x)
    state = np.zeros(C, dtype=x.dtype)
    for t in range(L):
        for c in range(C):
            state[c] = a[c] * state[c] + (1.0 - a[c]) * x[t, c]
            h[t, c] = state[c]
    return h


def gated_scan_numba(x, a):
    """Forward gated scan over axis 0 of an ``(L, C)`` array."""
    return _gated_scan_numba(np.ascontiguousarray(x, dtype=np.float64),
                             np.ascontiguousarray(a, dtype=np.float64))


def gated_scan_numpy(x, a):
    x = np.asarray(x, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    h = np.empty_like(x)
    for c in range(x.shape[1]):
        h[:, c] = signal.lfilter([1.0 - a[c]], [1.0, -a[c]], x[:, c])
    return h


# --------------------------------------------------------------------------
# SSIM statistics (valid-mode separable Gaussian filtering)


def gaussian_window(size=11, sigma=1.5):
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


@njit(cache=True)
def _filter_valid_numba(img, g):
    H, W = img.shape
    k = g.shape[0]
    Ho, Wo = H - k + 1, W - k + 1
    tmp = np.zeros((H, Wo))
    for i in range(H):
        for j in range(Wo):
            s = 0.0
            for t in range(k):
                s += g[t] * img[i, j + t]
            tmp[i, j] = s
    out = np.zeros((Ho, Wo))
    for i in range(Ho):
        for j in range(Wo):
            s = 0.0
            for t in range(k):
                s += g[t] * tmp[i + t, j]
            out[i, j] = s
    return out


def _filter_valid_numpy(img, g):
    k = g.shape[0]
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=1) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=0) @ g


@njit(cache=True)
def _ssim_map_numba(x, y, g, c1, c2):
    mx = _filter_valid_numba(x, g)
    my = _filter_valid_numba(y, g)
    sxx = _filter_valid_numba(x * x, g) - mx * mx
    syy = _filter_valid_numba(y * y, g) - my * my
    sxy = _filter_valid_numba(x * y, g) - mx * my
    num = (2.0 * mx * my + c1) * (2.0 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return num / den


def _ssim_map_numpy(x, y, g, c1, c2):
    f = _filter_valid_numpy
    mx, my = f(x, g), f(y, g)
    sxx = f(x * x, g) - mx * mx
    syy = f(y * y, g) - my * my
    sxy = f(x * y, g) - mx * my
    num = (2.0 * mx * my + c1) * (2.0 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return num / den


def ssim_map_numba(x, y, g, c1, c2):
    return _ssim_map_numba(np.ascontiguousarray(x, dtype=np.float64),
                           np.ascontiguousarray(y, dtype=np.float64), g, c1, c2)


def ssim_map_numpy(x, y, g, c1, c2):
    return _ssim_map_numpy(np.asarray(x, dtype=np.float64),
                           np.asarray(y, dtype=np.float64), g, c1, c2)


# --------------------------------------------------------------------------
# Ellipse painting for phantoms
# params rows: (cy, cx, ry, rx, angle, label); later rows overwrite earlier.


@njit(cache=True)
def _paint_ellipses_numba(H, W, params):
    out = np.zeros((H, W), dtype=np.int64)
    for e in range(params.shape[0]):
        cy, cx, ry, rx = params[e, 0], params[e, 1], params[e, 2], params[e, 3]
        ang, lab = params[e, 4], params[e, 5]
        ca, sa = np.cos(ang), np.sin(ang)
        for i in range(H):
            for j in range(W):
                dy = i - cy
                dx = j - cx
                u = dx * ca + dy * sa
                v = -dx * sa + dy * ca
                if (u / rx) ** 2 + (v / ry) ** 2 <= 1.0:
                    out[i, j] = np.int64(lab)
    return out


def paint_ellipses_numpy(H, W, params):
    out = np.zeros((H, W), dtype=np.int64)
    ii, jj = np.mgrid[0:H, 0:W].astype(np.float64)
    for cy, cx, ry, rx, ang, lab in np.asarray(params, dtype=np.float64):
        dy, dx = ii - cy, jj - cx
        u = dx * np.cos(ang) + dy * np.sin(ang)
        v = -dx * np.sin(ang) + dy * np.cos(ang)
        out[(u / rx) ** 2 + (v / ry) ** 2 <= 1.0] = int(lab)
    return out


def paint_ellipses_numba(H, W, params):
    params = np.ascontiguousarray(params, dtype=np.float64).reshape(-1, 6)
    return _paint_ellipses_numba(H, W, params)


if HAVE_NUMBA:
    first_visits = first_visits_numba
    gated_scan = gated_scan_numba
    ssim_map = ssim_map_numba
    paint_ellipses = paint_ellipses_numba
else:
    first_visits = first_visits_numpy
    gated_scan = gated_scan_numpy
    ssim_map = ssim_map_numpy
    paint_ellipses = paint_ellipses_numpy

BACKEND = "numba" if HAVE_NUMBA else "numpy"
