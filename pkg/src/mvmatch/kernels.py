"""Hot inner loops, compiled with numba when available.

Every kernel exists twice: a pure-numpy implementation (``*_numpy``) and a
numba ``@njit`` version. The active backend is chosen at import time:

* numba is used when it imports cleanly,
* unless the environment variable ``MVMATCH_DISABLE_NUMBA`` is set to a
  non-empty value other than ``"0"``, which forces the numpy path.

Both paths implement identical arithmetic (same traversal order, IEEE
semantics, no fastmath) so results agree bit-for-bit; ``BACKEND`` reports
which one is live. Matrix-multiply heavy code (attention, global matching)
stays in plain numpy throughout the package since BLAS already owns it;
only gather/scatter/stencil loops live here.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLE = os.environ.get("MVMATCH_DISABLE_NUMBA", "0") not in ("", "0")

try:  # pragma: no cover - exercised implicitly by the backend tests
    if _DISABLE:
        raise ImportError("numba disabled by MVMATCH_DISABLE_NUMBA")
    from numba import njit, prange

    HAS_NUMBA = True
except ImportError:  # pragma: no cover
    HAS_NUMBA = False

    def njit(*args, **kwargs):  # type: ignore[misc]
        if args and callable(args[0]):
            return args[0]

        def wrap(f):
            return f

        return wrap

    prange = range


BACKEND = "numba" if HAS_NUMBA else "numpy"


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


# ---------------------------------------------------------------------------
# bilinear gather
# ---------------------------------------------------------------------------

def bilinear_gather_numpy(data: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample ``data`` (H, W, C) at continuous (x, y) positions, border-clamped."""
    h, w = data.shape[:2]
    x = np.clip(xs, 0.0, w - 1.0)
    y = np.clip(ys, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(x), w - 2 if w > 1 else 0).astype(np.int64)
    y0 = np.minimum(np.floor(y), h - 2 if h > 1 else 0).astype(np.int64)
    x0 = np.maximum(x0, 0)
    y0 = np.maximum(y0, 0)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    v00 = data[y0, x0]
    v01 = data[y0, x1]
    v10 = data[y1, x0]
    v11 = data[y1, x1]
    top = v00 * (1.0 - fx) + v01 * fx
    bot = v10 * (1.0 - fx) + v11 * fx
    return top * (1.0 - fy) + bot * fy


@njit(cache=True)
def _bilinear_gather_nb(data, xs, ys, out):
    h, w, c = data.shape
    n = xs.shape[0]
    for i in range(n):
        x = xs[i]
        y = ys[i]
        if x < 0.0:
            x = 0.0
        if x > w - 1.0:
            x = w - 1.0
        if y < 0.0:
            y = 0.0
        if y > h - 1.0:
            y = h - 1.0
        x0 = int(np.floor(x))
        y0 = int(np.floor(y))
        if x0 > w - 2:
            x0 = w - 2
        if x0 < 0:
            x0 = 0
        if y0 > h - 2:
            y0 = h - 2
        if y0 < 0:
            y0 = 0
        x1 = x0 + 1
        y1 = y0 + 1
        if x1 > w - 1:
            x1 = w - 1
        if y1 > h - 1:
            y1 = h - 1
        fx = x - x0
        fy = y - y0
        for k in range(c):
            top = data[y0, x0, k] * (1.0 - fx) + data[y0, x1, k] * fx
            bot = data[y1, x0, k] * (1.0 - fx) + data[y1, x1, k] * fx
            out[i, k] = top * (1.0 - fy) + bot * fy
    return out


def bilinear_gather(data: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    data = _f64(data)
    if not HAS_NUMBA:
        return bilinear_gather_numpy(data, np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64))
    xs = _f64(np.ravel(xs))
    ys = _f64(np.ravel(ys))
    out = np.empty((xs.shape[0], data.shape[2]), dtype=np.float64)
    return _bilinear_gather_nb(data, xs, ys, out)


# ---------------------------------------------------------------------------
# local correlation volume
# ---------------------------------------------------------------------------

def local_corr_numpy(src: np.ndarray, tgt: np.ndarray, targets: np.ndarray, window: int) -> np.ndarray:
    h, w, c = src.shape
    r = (window - 1) // 2
    out = np.empty((h, w, window, window), dtype=np.float64)
    tx = targets[..., 0]
    ty = targets[..., 1]
    inv = 1.0 / np.sqrt(c)
    for j, dy in enumerate(range(-r, r + 1)):
        for i, dx in enumerate(range(-r, r + 1)):
            sampled = bilinear_gather_numpy(tgt, tx + dx, ty + dy)
            out[:, :, j, i] = np.einsum("ywc,ywc->yw", src, sampled) * inv
    return out


@njit(cache=True, parallel=True)
def _local_corr_nb(src, tgt, targets, window, out):
    h, w, c = src.shape
    th, tw = tgt.shape[0], tgt.shape[1]
    r = (window - 1) // 2
    inv = 1.0 / np.sqrt(c)
    for y in prange(h):
        for x in range(w):
            cx = targets[y, x, 0]
            cy = targets[y, x, 1]
            for j in range(window):
                for i in range(window):
                    sx = cx + (i - r)
                    sy = cy + (j - r)
                    if sx < 0.0:
                        sx = 0.0
                    if sx > tw - 1.0:
                        sx = tw - 1.0
                    if sy < 0.0:
                        sy = 0.0
                    if sy > th - 1.0:
                        sy = th - 1.0
                    x0 = int(np.floor(sx))
                    y0 = int(np.floor(sy))
                    if x0 > tw - 2:
                        x0 = tw - 2
                    if x0 < 0:
                        x0 = 0
                    if y0 > th - 2:
                        y0 = th - 2
                    if y0 < 0:
                        y0 = 0
                    x1 = x0 + 1
                    y1 = y0 + 1
                    if x1 > tw - 1:
                        x1 = tw - 1
                    if y1 > th - 1:
                        y1 = th - 1
                    fx = sx - x0
                    fy = sy - y0
                    acc = 0.0
                    for k in range(c):
                        top = tgt[y0, x0, k] * (1.0 - fx) + tgt[y0, x1, k] * fx
                        bot = tgt[y1, x0, k] * (1.0 - fx) + tgt[y1, x1, k] * fx
                        acc += src[y, x, k] * (top * (1.0 - fy) + bot * fy)
                    out[y, x, j, i] = acc * inv
    return out


def local_corr(src: np.ndarray, tgt: np.ndarray, targets: np.ndarray, window: int) -> np.ndarray:
    src = _f64(src)
    tgt = _f64(tgt)
    targets = _f64(targets)
    if not HAS_NUMBA:
        return local_corr_numpy(src, tgt, targets, window)
    out = np.empty((src.shape[0], src.shape[1], window, window), dtype=np.float64)
    return _local_corr_nb(src, tgt, targets, window, out)


# ---------------------------------------------------------------------------
# linear upsampling (integer-aligned, extrapolating past the last sample)
# ---------------------------------------------------------------------------

def upsample_linear_numpy(field: np.ndarray, factor: int) -> np.ndarray:
    h, w, c = field.shape
    oh, ow = h * factor, w * factor

    def axis_taps(size, out_size):
        p = np.arange(out_size, dtype=np.float64) / factor
        if size == 1:
            i0 = np.zeros(out_size, dtype=np.int64)
            return i0, i0, np.zeros(out_size)
        i0 = np.clip(np.floor(p).astype(np.int64), 0, size - 2)
        return i0, i0 + 1, p - i0

    y0, y1, ty = axis_taps(h, oh)
    x0, x1, tx = axis_taps(w, ow)
    rows = field[y0] * (1.0 - ty)[:, None, None] + field[y1] * ty[:, None, None]
    out = rows[:, x0] * (1.0 - tx)[None, :, None] + rows[:, x1] * tx[None, :, None]
    return out


@njit(cache=True)
def _upsample_linear_nb(field, factor, out):
    h, w, c = field.shape
    oh = h * factor
    ow = w * factor
    for oy in range(oh):
        py = oy / factor
        if h == 1:
            y0 = 0
            y1 = 0
            ty = 0.0
        else:
            y0 = int(np.floor(py))
            if y0 > h - 2:
                y0 = h - 2
            if y0 < 0:
                y0 = 0
            y1 = y0 + 1
            ty = py - y0
        for ox in range(ow):
            px = ox / factor
            if w == 1:
                x0 = 0
                x1 = 0
                tx = 0.0
            else:
                x0 = int(np.floor(px))
                if x0 > w - 2:
                    x0 = w - 2
                if x0 < 0:
                    x0 = 0
                x1 = x0 + 1
                tx = px - x0
            for k in range(c):
                top = field[y0, x0, k] * (1.0 - tx) + field[y0, x1, k] * tx
                bot = field[y1, x0, k] * (1.0 - tx) + field[y1, x1, k] * tx
                out[oy, ox, k] = top * (1.0 - ty) + bot * ty
    return out


def upsample_linear(field: np.ndarray, factor: int) -> np.ndarray:
    field = _f64(field)
    if not HAS_NUMBA:
        return upsample_linear_numpy(field, factor)
    out = np.empty((field.shape[0] * factor, field.shape[1] * factor, field.shape[2]), dtype=np.float64)
    return _upsample_linear_nb(field, factor, out)


# ---------------------------------------------------------------------------
# greedy score-map NMS
# ---------------------------------------------------------------------------

def nms_greedy_numpy(scores: np.ndarray, radius: int, max_keypoints: int) -> np.ndarray:
    h, w = scores.shape
    flat = scores.ravel()
    order = np.argsort(-flat, kind="stable")
    suppressed = np.zeros((h, w), dtype=bool)
    picked = []
    for idx in order:
        s = flat[idx]
        if s <= 0.0:
            break
        y, x = divmod(int(idx), w)
        if suppressed[y, x]:
            continue
        picked.append((y, x))
        if len(picked) == max_keypoints:
            break
        suppressed[max(0, y - radius):y + radius + 1, max(0, x - radius):x + radius + 1] = True
    return np.array(picked, dtype=np.int64).reshape(-1, 2)


@njit(cache=True)
def _nms_greedy_nb(scores, radius, max_keypoints):
    h, w = scores.shape
    flat = scores.ravel()
    order = np.argsort(-flat, kind="mergesort")
    suppressed = np.zeros((h, w), dtype=np.bool_)
    picked = np.empty((flat.shape[0], 2), dtype=np.int64)
    count = 0
    for n in range(order.shape[0]):
        idx = order[n]
        if flat[idx] <= 0.0:
            break
        y = idx // w
        x = idx % w
        if suppressed[y, x]:
            continue
        picked[count, 0] = y
        picked[count, 1] = x
        count += 1
        if count == max_keypoints:
            break
        ylo = y - radius
        if ylo < 0:
            ylo = 0
        yhi = y + radius + 1
        if yhi > h:
            yhi = h
        xlo = x - radius
        if xlo < 0:
            xlo = 0
        xhi = x + radius + 1
        if xhi > w:
            xhi = w
        for yy in range(ylo, yhi):
            for xx in range(xlo, xhi):
                suppressed[yy, xx] = True
    return picked[:count]


def nms_greedy(scores: np.ndarray, radius: int, max_keypoints: int = -1) -> np.ndarray:
    """Greedy NMS on a score map. Returns selected (y, x) pixels, score order."""
    scores = _f64(scores)
    cap = max_keypoints if max_keypoints and max_keypoints > 0 else scores.size + 1
    if not HAS_NUMBA:
        return nms_greedy_numpy(scores, int(radius), cap)
    return _nms_greedy_nb(scores, int(radius), cap)


# ---------------------------------------------------------------------------
# z-buffer splatting (minimum depth, ties to the lowest point index)
# ---------------------------------------------------------------------------

def zbuffer_min_numpy(px: np.ndarray, py: np.ndarray, depth: np.ndarray, h: int, w: int):
    zbuf = np.full((h, w), np.inf, dtype=np.float64)
    ibuf = np.full((h, w), -1, dtype=np.int64)
    pix = py * w + px
    order = np.lexsort((np.arange(px.shape[0]), depth, pix))
    pix_sorted = pix[order]
    first = np.ones(pix_sorted.shape[0], dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    sel = order[first]
    zbuf[py[sel], px[sel]] = depth[sel]
    ibuf[py[sel], px[sel]] = sel
    return zbuf, ibuf


@njit(cache=True)
def _zbuffer_min_nb(px, py, depth, h, w):
    zbuf = np.full((h, w), np.inf, dtype=np.float64)
    ibuf = np.full((h, w), -1, dtype=np.int64)
    for i in range(px.shape[0]):
        x = px[i]
        y = py[i]
        d = depth[i]
        if d < zbuf[y, x] or (d == zbuf[y, x] and (ibuf[y, x] < 0 or i < ibuf[y, x])):
            zbuf[y, x] = d
            ibuf[y, x] = i
    return zbuf, ibuf


def zbuffer_min(px: np.ndarray, py: np.ndarray, depth: np.ndarray, h: int, w: int):
    px = np.ascontiguousarray(px, dtype=np.int64)
    py = np.ascontiguousarray(py, dtype=np.int64)
    depth = _f64(depth)
    if not HAS_NUMBA:
        return zbuffer_min_numpy(px, py, depth, h, w)
    return _zbuffer_min_nb(px, py, depth, h, w)


# ---------------------------------------------------------------------------
# nearest-valid hole filling (iterated 4-neighbour dilation, fixed priority)
# ---------------------------------------------------------------------------

def fill_nearest_numpy(values: np.ndarray, valid: np.ndarray) -> np.ndarray:
    out = values.copy()
    filled = valid.copy()
    h, w = filled.shape
    while not filled.all():
        prev_vals = out.copy()
        prev_fill = filled.copy()
        progressed = False
        for y in range(h):
            for x in range(w):
                if prev_fill[y, x]:
                    continue
                # priority: up, down, left, right
                if y > 0 and prev_fill[y - 1, x]:
                    out[y, x] = prev_vals[y - 1, x]
                elif y < h - 1 and prev_fill[y + 1, x]:
                    out[y, x] = prev_vals[y + 1, x]
                elif x > 0 and prev_fill[y, x - 1]:
                    out[y, x] = prev_vals[y, x - 1]
                elif x < w - 1 and prev_fill[y, x + 1]:
                    out[y, x] = prev_vals[y, x + 1]
                else:
                    continue
                filled[y, x] = True
                progressed = True
        if not progressed:
            break
    return out


@njit(cache=True)
def _fill_nearest_nb(values, valid):
    h, w, c = values.shape
    out = values.copy()
    filled = valid.copy()
    done = False
    while not done:
        prev_vals = out.copy()
        prev_fill = filled.copy()
        progressed = False
        remaining = False
        for y in range(h):
            for x in range(w):
                if prev_fill[y, x]:
                    continue
                if y > 0 and prev_fill[y - 1, x]:
                    sy, sx = y - 1, x
                elif y < h - 1 and prev_fill[y + 1, x]:
                    sy, sx = y + 1, x
                elif x > 0 and prev_fill[y, x - 1]:
                    sy, sx = y, x - 1
                elif x < w - 1 and prev_fill[y, x + 1]:
                    sy, sx = y, x + 1
                else:
                    remaining = True
                    continue
                for k in range(c):
                    out[y, x, k] = prev_vals[sy, sx, k]
                filled[y, x] = True
                progressed = True
        done = (not remaining) or (not progressed)
    return out


def fill_nearest(values: np.ndarray, valid: np.ndarray) -> np.ndarray:
    values = _f64(values)
    valid = np.ascontiguousarray(valid, dtype=np.bool_)
    if not HAS_NUMBA:
        return fill_nearest_numpy(values, valid)
    return _fill_nearest_nb(values, valid)


# ---------------------------------------------------------------------------
# small same-size convolutions (zero padding)
# ---------------------------------------------------------------------------

def conv2d_numpy(inp: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    k = weights.shape[0]
    r = (k - 1) // 2
    h, w, cin = inp.shape
    padded = np.zeros((h + 2 * r, w + 2 * r, cin), dtype=np.float64)
    padded[r:r + h, r:r + w] = inp
    win = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(0, 1))
    return np.einsum("yxcij,ijco->yxo", win, weights, optimize=True) + bias


@njit(cache=True, parallel=True)
def _conv2d_nb(inp, weights, bias, out):
    h, w, cin = inp.shape
    k = weights.shape[0]
    cout = weights.shape[3]
    r = (k - 1) // 2
    for y in prange(h):
        for x in range(w):
            for co in range(cout):
                acc = bias[co]
                for ky in range(k):
                    iy = y + ky - r
                    if iy < 0 or iy >= h:
                        continue
                    for kx in range(k):
                        ix = x + kx - r
                        if ix < 0 or ix >= w:
                            continue
                        for ci in range(cin):
                            acc += inp[iy, ix, ci] * weights[ky, kx, ci, co]
                out[y, x, co] = acc
    return out


def conv2d(inp: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Same-size k x k convolution, zero padding. weights: (k, k, Cin, Cout).

    Always dispatches to the einsum path: benchmarks show the optimized
    contraction beats the scalar loop (numba ~0.4x here), so the jitted
    variant exists only for the benchmark comparison.
    """
    return conv2d_numpy(_f64(inp), _f64(weights), _f64(bias))


def conv2d_numba(inp: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if not HAS_NUMBA:
        return conv2d_numpy(_f64(inp), _f64(weights), _f64(bias))
    inp = _f64(inp)
    weights = _f64(weights)
    out = np.empty((inp.shape[0], inp.shape[1], weights.shape[3]), dtype=np.float64)
    return _conv2d_nb(inp, weights, _f64(bias), out)


def depthwise_conv2d_numpy(inp: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    k = weights.shape[0]
    r = (k - 1) // 2
    h, w, c = inp.shape
    padded = np.zeros((h + 2 * r, w + 2 * r, c), dtype=np.float64)
    padded[r:r + h, r:r + w] = inp
    win = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(0, 1))
    return np.einsum("yxcij,ijc->yxc", win, weights, optimize=True) + bias


@njit(cache=True, parallel=True)
def _depthwise_conv2d_nb(inp, weights, bias, out):
    h, w, c = inp.shape
    k = weights.shape[0]
    r = (k - 1) // 2
    for y in prange(h):
        for x in range(w):
            for ch in range(c):
                acc = bias[ch]
                for ky in range(k):
                    iy = y + ky - r
                    if iy < 0 or iy >= h:
                        continue
                    for kx in range(k):
                        ix = x + kx - r
                        if ix < 0 or ix >= w:
                            continue
                        acc += inp[iy, ix, ch] * weights[ky, kx, ch]
                out[y, x, ch] = acc
    return out


def depthwise_conv2d(inp: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Same-size depthwise k x k convolution, zero padding. weights: (k, k, C).

    Dispatches to the einsum path for the same reason as conv2d.
    """
    return depthwise_conv2d_numpy(_f64(inp), _f64(weights), _f64(bias))


def depthwise_conv2d_numba(inp: np.ndarray, weights: np.ndarray,
                           bias: np.ndarray) -> np.ndarray:
    if not HAS_NUMBA:
        return depthwise_conv2d_numpy(_f64(inp), _f64(weights), _f64(bias))
    inp = _f64(inp)
    out = np.empty_like(inp)
    return _depthwise_conv2d_nb(inp, _f64(weights), _f64(bias), out)
