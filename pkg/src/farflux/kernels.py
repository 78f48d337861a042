"""Hot numeric kernels with numba-compiled and pure-numpy implementations.

Everything here is called from inner loops: dense-layer forward/backward
pieces, row softmax, bilinear patch rotation, patch gap-filling, the
analytic plume, and the Adam update. Matrix products go through BLAS
(``np.dot``) on both paths; the numba variants fuse the surrounding
elementwise work into single passes, which is where the time goes for
the skinny activations this model produces.

Backend selection: environment variable ``FARFLUX_NUMBA``:
  - unset or "auto": use numba when importable, else numpy
  - "1": require numba
  - "0": force the pure-numpy fallback
``use_backend()`` permits switching at runtime (used by tests and the
benchmark script). Within one backend all kernels are deterministic;
across backends results agree to float rounding, not bit-exactly,
because reduction orders differ.
"""

from __future__ import annotations

import math
import os

import numpy as np

from .errors import ConfigError

_NUMPY = "numpy"
_NUMBA = "numba"


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------

def _dense_forward_np(x, w_t, b, relu, out):
    np.dot(x, w_t, out=out)
    out += b
    if relu:
        np.maximum(out, 0.0, out=out)
    return out


def _relu_backward_np(da, a):
    da *= a > 0.0
    return da


def _softmax_rows_np(z):
    p = z - z.max(axis=1, keepdims=True)
    np.exp(p, out=p)
    p /= p.sum(axis=1, keepdims=True)
    return p


def _entropy_rows_np(p):
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    return -t.sum(axis=1)


def _softmax_backward_np(p, dp):
    s = (dp * p).sum(axis=1, keepdims=True)
    return p * (dp - s)


def _rotate_bilinear_np(src, angle_deg):
    el, w, _ = src.shape
    cy = (el - 1) / 2.0
    cx = (w - 1) / 2.0
    th = math.radians(angle_deg)
    ct, st = math.cos(th), math.sin(th)
    rr, cc = np.meshgrid(np.arange(el, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    x = cc - cx
    y = cy - rr
    xs = ct * x + st * y
    ys = -st * x + ct * y
    rs = np.clip(cy - ys, 0.0, el - 1.0)
    cs = np.clip(cx + xs, 0.0, w - 1.0)
    r0 = np.floor(rs).astype(np.int64)
    c0 = np.floor(cs).astype(np.int64)
    r1 = np.minimum(r0 + 1, el - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (rs - r0)[..., None]
    fc = (cs - c0)[..., None]
    out = (src[r0, c0] * (1 - fr) * (1 - fc)
           + src[r1, c0] * fr * (1 - fc)
           + src[r0, c1] * (1 - fr) * fc
           + src[r1, c1] * fr * fc)
    return np.ascontiguousarray(out)


def _rotate_batch_np(stack, angles_deg, out):
    for i in range(stack.shape[0]):
        out[i] = _rotate_bilinear_np(stack[i], angles_deg[i])
    return out


def _forward_fill_np(frames, valid):
    t_n, el, w = valid.shape
    never = np.empty((t_n, el, w), dtype=np.bool_)
    seen = np.zeros((el, w), dtype=np.bool_)
    last = np.zeros(frames.shape[1:], dtype=frames.dtype)
    for t in range(t_n):
        v = valid[t]
        last[v] = frames[t][v]
        seen |= v
        fill = (~v) & seen
        frames[t][fill] = last[fill]
        never[t] = ~seen
    return never


def _plume_grid_np(el, w, pixel, tower_r, tower_c, wd_deg, peak, sa, sc):
    wd = math.radians(wd_deg)
    ux, uy = math.sin(wd), math.cos(wd)
    rr, cc = np.meshgrid(np.arange(el, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    dx = (cc - tower_c) * pixel
    dy = (tower_r - rr) * pixel
    s = dx * ux + dy * uy
    q = -dx * uy + dy * ux
    return np.exp(-0.5 * ((s - peak) / sa) ** 2 - 0.5 * (q / sc) ** 2)


def _plume_type_masses_np(wds, peaks, sas, scs, type_map, n_types,
                          pixel, tower_r, tower_c):
    n = wds.shape[0]
    masses = np.zeros((n, n_types), dtype=np.float64)
    el, w = type_map.shape
    flat_types = type_map.ravel()
    for i in range(n):
        g = _plume_grid_np(el, w, pixel, tower_r, tower_c,
                           wds[i], peaks[i], sas[i], scs[i]).ravel()
        tot = g.sum()
        if tot > 0.0:
            np.add.at(masses[i], flat_types, g / tot)
        else:
            masses[i, :] = np.nan
    return masses


def _adam_update_np(p, g, m, v, step, lr, b1, b2, eps):
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * g * g
    mh = m / (1.0 - b1 ** step)
    vh = v / (1.0 - b2 ** step)
    p -= lr * mh / (np.sqrt(vh) + eps)


_NUMPY_IMPLS = {
    "dense_forward": _dense_forward_np,
    "relu_backward": _relu_backward_np,
    "softmax_rows": _softmax_rows_np,
    "entropy_rows": _entropy_rows_np,
    "softmax_backward": _softmax_backward_np,
    "rotate_bilinear": _rotate_bilinear_np,
    "rotate_batch": _rotate_batch_np,
    "forward_fill": _forward_fill_np,
    "plume_grid": _plume_grid_np,
    "plume_type_masses": _plume_type_masses_np,
    "adam_update": _adam_update_np,
}


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

try:
    from numba import njit

    _HAVE_NUMBA = True

    @njit(cache=True)
    def _dense_forward_nb(x, w_t, b, relu, out):
        np.dot(x, w_t, out)
        n, m = out.shape
        for i in range(n):
            for j in range(m):
                val = out[i, j] + b[j]
                if relu and val < 0.0:
                    val = 0.0
                out[i, j] = val
        return out

    @njit(cache=True)
    def _relu_backward_nb(da, a):
        n, m = da.shape
        for i in range(n):
            for j in range(m):
                if a[i, j] <= 0.0:
                    da[i, j] = 0.0
        return da

    @njit(cache=True)
    def _softmax_rows_nb(z):
        n, m = z.shape
        p = np.empty((n, m), dtype=np.float64)
        for i in range(n):
            mx = z[i, 0]
            for j in range(1, m):
                if z[i, j] > mx:
                    mx = z[i, j]
            tot = 0.0
            for j in range(m):
                e = math.exp(z[i, j] - mx)
                p[i, j] = e
                tot += e
            for j in range(m):
                p[i, j] /= tot
        return p

    @njit(cache=True)
    def _entropy_rows_nb(p):
        n, m = p.shape
        h = np.zeros(n, dtype=np.float64)
        for i in range(n):
            acc = 0.0
            for j in range(m):
                v = p[i, j]
                if v > 0.0:
                    acc -= v * math.log(v)
            h[i] = acc
        return h

    @njit(cache=True)
    def _softmax_backward_nb(p, dp):
        n, m = p.shape
        dz = np.empty((n, m), dtype=np.float64)
        for i in range(n):
            s = 0.0
            for j in range(m):
                s += dp[i, j] * p[i, j]
            for j in range(m):
                dz[i, j] = p[i, j] * (dp[i, j] - s)
        return dz

    @njit(cache=True)
    def _rotate_bilinear_nb(src, angle_deg):
        el, w, ch = src.shape
        cy = (el - 1) / 2.0
        cx = (w - 1) / 2.0
        th = math.radians(angle_deg)
        ct, st = math.cos(th), math.sin(th)
        out = np.empty_like(src)
        for r in range(el):
            y = cy - r
            for c in range(w):
                x = c - cx
                xs = ct * x + st * y
                ys = -st * x + ct * y
                rs = cy - ys
                cs = cx + xs
                if rs < 0.0:
                    rs = 0.0
                elif rs > el - 1.0:
                    rs = el - 1.0
                if cs < 0.0:
                    cs = 0.0
                elif cs > w - 1.0:
                    cs = w - 1.0
                r0 = int(math.floor(rs))
                c0 = int(math.floor(cs))
                r1 = min(r0 + 1, el - 1)
                c1 = min(c0 + 1, w - 1)
                fr = rs - r0
                fc = cs - c0
                for k in range(ch):
                    out[r, c, k] = (src[r0, c0, k] * (1 - fr) * (1 - fc)
                                    + src[r1, c0, k] * fr * (1 - fc)
                                    + src[r0, c1, k] * (1 - fr) * fc
                                    + src[r1, c1, k] * fr * fc)
        return out

    @njit(cache=True)
    def _rotate_batch_nb(stack, angles_deg, out):
        for i in range(stack.shape[0]):
            out[i] = _rotate_bilinear_nb(stack[i], angles_deg[i])
        return out

    @njit(cache=True)
    def _forward_fill_nb(frames, valid):
        t_n, el, w = valid.shape
        ch = frames.shape[3]
        never = np.empty((t_n, el, w), dtype=np.bool_)
        seen = np.zeros((el, w), dtype=np.bool_)
        last = np.zeros((el, w, ch), dtype=frames.dtype)
        for t in range(t_n):
            for r in range(el):
                for c in range(w):
                    if valid[t, r, c]:
                        for k in range(ch):
                            last[r, c, k] = frames[t, r, c, k]
                        seen[r, c] = True
                    elif seen[r, c]:
                        for k in range(ch):
                            frames[t, r, c, k] = last[r, c, k]
                    never[t, r, c] = not seen[r, c]
        return never

    @njit(cache=True)
    def _plume_grid_nb(el, w, pixel, tower_r, tower_c, wd_deg, peak, sa, sc):
        wd = math.radians(wd_deg)
        ux, uy = math.sin(wd), math.cos(wd)
        g = np.empty((el, w), dtype=np.float64)
        for r in range(el):
            dy = (tower_r - r) * pixel
            for c in range(w):
                dx = (c - tower_c) * pixel
                s = dx * ux + dy * uy
                q = -dx * uy + dy * ux
                zs = (s - peak) / sa
                zq = q / sc
                g[r, c] = math.exp(-0.5 * zs * zs - 0.5 * zq * zq)
        return g

    @njit(cache=True)
    def _plume_type_masses_nb(wds, peaks, sas, scs, type_map, n_types,
                              pixel, tower_r, tower_c):
        n = wds.shape[0]
        el, w = type_map.shape
        masses = np.zeros((n, n_types), dtype=np.float64)
        for i in range(n):
            wd = math.radians(wds[i])
            ux, uy = math.sin(wd), math.cos(wd)
            peak, sa, sc = peaks[i], sas[i], scs[i]
            tot = 0.0
            for r in range(el):
                dy = (tower_r - r) * pixel
                for c in range(w):
                    dx = (c - tower_c) * pixel
                    s = dx * ux + dy * uy
                    q = -dx * uy + dy * ux
                    zs = (s - peak) / sa
                    zq = q / sc
                    g = math.exp(-0.5 * zs * zs - 0.5 * zq * zq)
                    masses[i, type_map[r, c]] += g
                    tot += g
            if tot > 0.0:
                for k in range(n_types):
                    masses[i, k] /= tot
            else:
                for k in range(n_types):
                    masses[i, k] = np.nan
        return masses

    @njit(cache=True)
    def _adam_update_nb(p, g, m, v, step, lr, b1, b2, eps):
        c1 = 1.0 - b1 ** step
        c2 = 1.0 - b2 ** step
        for i in range(p.shape[0]):
            m[i] = b1 * m[i] + (1.0 - b1) * g[i]
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i]
            p[i] -= lr * (m[i] / c1) / (math.sqrt(v[i] / c2) + eps)

    _NUMBA_IMPLS = {
        "dense_forward": _dense_forward_nb,
        "relu_backward": _relu_backward_nb,
        "softmax_rows": _softmax_rows_nb,
        "entropy_rows": _entropy_rows_nb,
        "softmax_backward": _softmax_backward_nb,
        "rotate_bilinear": _rotate_bilinear_nb,
        "rotate_batch": _rotate_batch_nb,
        "forward_fill": _forward_fill_nb,
        "plume_grid": _plume_grid_nb,
        "plume_type_masses": _plume_type_masses_nb,
        "adam_update": _adam_update_nb,
    }

except ImportError:  # pragma: no cover - exercised only without numba
    _HAVE_NUMBA = False
    _NUMBA_IMPLS = {}


# ---------------------------------------------------------------------------
# backend selection
# ---------------------------------------------------------------------------

_BACKENDS = {_NUMPY: _NUMPY_IMPLS}
if _HAVE_NUMBA:
    _BACKENDS[_NUMBA] = _NUMBA_IMPLS

_active_name = _NUMPY
_active = _NUMPY_IMPLS


def available_backends():
    return tuple(sorted(_BACKENDS))


def active_backend():
    return _active_name


def use_backend(name):
    """Bind all kernels to the named backend ("numpy" or "numba")."""
    global _active_name, _active
    if name not in _BACKENDS:
        raise ConfigError(f"kernel backend {name!r} not available "
                          f"(have: {', '.join(available_backends())})")
    _active_name = name
    _active = _BACKENDS[name]


def _select_from_env():
    flag = os.environ.get("FARFLUX_NUMBA", "auto").strip().lower()
    if flag in ("0", "false", "no", "off"):
        use_backend(_NUMPY)
    elif flag in ("1", "true", "yes", "on"):
        use_backend(_NUMBA)
    elif flag in ("", "auto"):
        use_backend(_NUMBA if _HAVE_NUMBA else _NUMPY)
    else:
        raise ConfigError(f"FARFLUX_NUMBA={flag!r} not understood")


def _limit_blas_threads():
    """Pin BLAS to FARFLUX_BLAS_THREADS threads (default 1).

    numpy and numba bind two separate OpenBLAS pools; letting both
    spin-wait degrades the skinny matmuls this package runs by several
    times on small machines. The activations here are 64 columns wide -
    threading buys nothing. Set FARFLUX_BLAS_THREADS=0 to leave the
    libraries at their own defaults.
    """
    try:
        n = int(os.environ.get("FARFLUX_BLAS_THREADS", "1"))
    except ValueError as exc:
        raise ConfigError("FARFLUX_BLAS_THREADS must be an integer") from exc
    if n <= 0:
        return None
    if _HAVE_NUMBA:
        try:
            import scipy.linalg  # noqa: F401  numba's BLAS; load it so the
        except ImportError:      # limiter below can see and cap its pool
            pass
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return None
    return threadpool_limits(limits=n, user_api="blas")


_BLAS_LIMITER = _limit_blas_threads()  # keep alive for the process


def dense_forward(x, w_t, b, relu, out=None):
    """A = x @ w_t + b, optionally through ReLU. x:[n,k], w_t:[k,m].

    `out` is the [n,m] destination; reuse it across calls to avoid
    large-allocation churn in hot loops.
    """
    if out is None:
        out = np.empty((x.shape[0], w_t.shape[1]))
    return _active["dense_forward"](x, w_t, b, relu, out)


def relu_backward(da, a):
    """In place: zero da where the forward activation a was clipped."""
    return _active["relu_backward"](da, a)


def softmax_rows(z):
    """Row-wise stable softmax of z:[n,m]."""
    return _active["softmax_rows"](z)


def entropy_rows(p):
    """Shannon entropy -sum p ln p per row, with 0 ln 0 = 0."""
    return _active["entropy_rows"](p)


def softmax_backward(p, dp):
    """dz given softmax output p and upstream dp, row-wise."""
    return _active["softmax_backward"](p, dp)


def rotate_bilinear(src, angle_deg):
    """Rotate src:[L,W,C] counterclockwise (map frame) about the array
    center, bilinear resampling, out-of-bounds clamped to the edge."""
    return _active["rotate_bilinear"](src, angle_deg)


def rotate_batch(stack, angles_deg, out=None):
    if out is None:
        out = np.empty_like(stack)
    return _active["rotate_batch"](stack, angles_deg, out)


def forward_fill(frames, valid):
    """In place forward-fill of invalid pixels from the most recent valid
    frame; returns per-frame never-observed masks."""
    return _active["forward_fill"](frames, valid)


def plume_grid(el, w, pixel, tower_r, tower_c, wd_deg, peak, sa, sc):
    """Unnormalized Gaussian plume density at cell centers."""
    return _active["plume_grid"](el, w, pixel, tower_r, tower_c,
                                 wd_deg, peak, sa, sc)


def plume_type_masses(wds, peaks, sas, scs, type_map, n_types,
                      pixel, tower_r, tower_c):
    """Per-sample normalized plume mass per region type; NaN rows mark
    footprints with no mass on the grid."""
    return _active["plume_type_masses"](wds, peaks, sas, scs, type_map,
                                        n_types, pixel, tower_r, tower_c)


def adam_update(p, g, m, v, step, lr, b1, b2, eps):
    """Bias-corrected Adam update, in place on flat f64 views."""
    return _active["adam_update"](p, g, m, v, step, lr, b1, b2, eps)


_select_from_env()
