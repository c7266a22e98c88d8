"""Convolution kernels with two interchangeable backends.

The numba backend runs direct loops compiled with ``@njit``; the numpy
backend vectorizes the same loops over the axes that do not take part in a
reduction. Both accumulate in float64 and add terms in the same order, so
their results agree bit for bit:

* forward:      per output element, taps in (ci, ky, kx) order, bias last
* input grad:   per input element, contributions in (co, ky, kx) order
* weight grad:  per weight element, terms in (n, t, u) order
* bias grad:    per channel, terms in (n, t, u) order

Set ``DILRES_DISABLE_NUMBA=1`` before import to force the numpy backend.
"""
from __future__ import annotations

import os

import numpy as np

def _has_omp():
    try:
        from numba.np.ufunc import omppool  # noqa: F401
        return True
    except ImportError:
        return False


try:
    import numba
    from numba import njit, prange
    if "NUMBA_THREADING_LAYER" not in os.environ:
        # avoid probing TBB, which warns when an old version is installed
        numba.config.THREADING_LAYER = "omp" if _has_omp() else "workqueue"
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("DILRES_DISABLE_NUMBA", "") not in ("1", "true", "yes")

# numpy fallback keeps its (co, ci, positions) temporaries under this many elements
_CHUNK_ELEMS = 1 << 22


def _out_range(size_in, size_out, stride, offset):
    """Output indices t with 0 <= t*stride + offset < size_in, as [lo, hi)."""
    lo = 0
    if offset < 0:
        lo = (-offset + stride - 1) // stride
    hi = (size_in - 1 - offset) // stride + 1 if size_in - 1 - offset >= 0 else 0
    hi = min(hi, size_out)
    return lo, max(lo, hi)


# ---------------------------------------------------------------------------
# numba backend
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True, inline="always")
    def _range_nb(size_in, size_out, stride, offset):
        lo = 0
        if offset < 0:
            lo = (-offset + stride - 1) // stride
        if size_in - 1 - offset >= 0:
            hi = (size_in - 1 - offset) // stride + 1
        else:
            hi = 0
        if hi > size_out:
            hi = size_out
        if hi < lo:
            hi = lo
        return lo, hi

    # Channel axes are moved innermost (NHWC-style scratch layouts) so the
    # innermost loop is a contiguous vector update. The per-element order of
    # additions is unchanged by this.

    @njit(parallel=True, cache=True)
    def _conv_forward_nb(x, wt, b, sh, sw, ph, pw, dil, out):
        # wt: (Ci, KH, KW, Co) float64; out: (N, Ho, Wo, Co) float64 zeros
        n_batch, c_in, h_in, w_in = x.shape
        _, kh, kw, c_out = wt.shape
        h_out, w_out = out.shape[1], out.shape[2]
        for n in prange(n_batch):
            acc = out[n]
            for ci in range(c_in):
                for i in range(kh):
                    t_lo, t_hi = _range_nb(h_in, h_out, sh, i * dil - ph)
                    for j in range(kw):
                        u_lo, u_hi = _range_nb(w_in, w_out, sw, j * dil - pw)
                        wv = wt[ci, i, j]
                        for t in range(t_lo, t_hi):
                            hh = t * sh + i * dil - ph
                            for u in range(u_lo, u_hi):
                                xv = np.float64(x[n, ci, hh, u * sw + j * dil - pw])
                                row = acc[t, u]
                                for co in range(c_out):
                                    row[co] += xv * wv[co]
            if b.shape[0] > 0:
                for t in range(h_out):
                    for u in range(w_out):
                        row = acc[t, u]
                        for co in range(c_out):
                            row[co] += b[co]

    @njit(parallel=True, cache=True)
    def _conv_input_grad_nb(g, wt, sh, sw, ph, pw, dil, gi):
        # wt: (Co, KH, KW, Ci) float64; gi: (N, H, W, Ci) float64 zeros
        n_batch, h_in, w_in, c_in = gi.shape
        c_out, kh, kw, _ = wt.shape
        h_out, w_out = g.shape[2], g.shape[3]
        for n in prange(n_batch):
            acc = gi[n]
            for co in range(c_out):
                for i in range(kh):
                    t_lo, t_hi = _range_nb(h_in, h_out, sh, i * dil - ph)
                    for j in range(kw):
                        u_lo, u_hi = _range_nb(w_in, w_out, sw, j * dil - pw)
                        wv = wt[co, i, j]
                        for t in range(t_lo, t_hi):
                            hh = t * sh + i * dil - ph
                            for u in range(u_lo, u_hi):
                                gv = np.float64(g[n, co, t, u])
                                row = acc[hh, u * sw + j * dil - pw]
                                for ci in range(c_in):
                                    row[ci] += gv * wv[ci]

    @njit(parallel=True, cache=True)
    def _conv_weight_grad_nb(x, gt, sh, sw, ph, pw, dil, gwt, gb):
        # gt: (N, Ho, Wo, Co) float64; gwt: (Ci, KH, KW, Co) float64 zeros
        n_batch, c_in, h_in, w_in = x.shape
        _, h_out, w_out, c_out = gt.shape
        kh, kw = gwt.shape[1], gwt.shape[2]
        for ci in prange(c_in):
            for i in range(kh):
                t_lo, t_hi = _range_nb(h_in, h_out, sh, i * dil - ph)
                for j in range(kw):
                    u_lo, u_hi = _range_nb(w_in, w_out, sw, j * dil - pw)
                    acc = gwt[ci, i, j]
                    for n in range(n_batch):
                        for t in range(t_lo, t_hi):
                            hh = t * sh + i * dil - ph
                            for u in range(u_lo, u_hi):
                                xv = np.float64(x[n, ci, hh, u * sw + j * dil - pw])
                                gv = gt[n, t, u]
                                for co in range(c_out):
                                    acc[co] += gv[co] * xv
        for n in range(n_batch):
            for t in range(h_out):
                for u in range(w_out):
                    gv = gt[n, t, u]
                    for co in range(c_out):
                        gb[co] += gv[co]


# ---------------------------------------------------------------------------
# numpy backend
# ---------------------------------------------------------------------------

def _conv_forward_np(x, w, b, sh, sw, ph, pw, dil, out):
    n_batch, c_in, h_in, w_in = x.shape
    c_out, _, kh, kw = w.shape
    h_out, w_out = out.shape[2], out.shape[3]
    x64 = x.astype(np.float64, copy=False)
    w64 = w.astype(np.float64, copy=False)
    for ci in range(c_in):
        for i in range(kh):
            t_lo, t_hi = _out_range(h_in, h_out, sh, i * dil - ph)
            if t_hi <= t_lo:
                continue
            h0 = t_lo * sh + i * dil - ph
            rows = slice(h0, h0 + (t_hi - t_lo - 1) * sh + 1, sh)
            for j in range(kw):
                u_lo, u_hi = _out_range(w_in, w_out, sw, j * dil - pw)
                if u_hi <= u_lo:
                    continue
                w0 = u_lo * sw + j * dil - pw
                cols = slice(w0, w0 + (u_hi - u_lo - 1) * sw + 1, sw)
                patch = x64[:, ci, rows, cols][:, None]
                out[:, :, t_lo:t_hi, u_lo:u_hi] += patch * w64[:, ci, i, j][None, :, None, None]
    if b.shape[0] > 0:
        out += b.astype(np.float64)[None, :, None, None]


def _conv_input_grad_np(g, w, sh, sw, ph, pw, dil, gi):
    _, c_in, h_in, w_in = gi.shape
    c_out, _, kh, kw = w.shape
    h_out, w_out = g.shape[2], g.shape[3]
    g64 = g.astype(np.float64, copy=False)
    w64 = w.astype(np.float64, copy=False)
    for co in range(c_out):
        for i in range(kh):
            t_lo, t_hi = _out_range(h_in, h_out, sh, i * dil - ph)
            if t_hi <= t_lo:
                continue
            h0 = t_lo * sh + i * dil - ph
            rows = slice(h0, h0 + (t_hi - t_lo - 1) * sh + 1, sh)
            for j in range(kw):
                u_lo, u_hi = _out_range(w_in, w_out, sw, j * dil - pw)
                if u_hi <= u_lo:
                    continue
                w0 = u_lo * sw + j * dil - pw
                cols = slice(w0, w0 + (u_hi - u_lo - 1) * sw + 1, sw)
                gi[:, :, rows, cols] += (g64[:, co, t_lo:t_hi, u_lo:u_hi][:, None]
                                         * w64[co, :, i, j][None, :, None, None])


def _sequential_sum(terms):
    """Left-to-right sum over the last axis (np.sum is pairwise, not sequential)."""
    zero = np.zeros(terms.shape[:-1] + (1,), dtype=np.float64)
    return np.cumsum(np.concatenate([zero, terms], axis=-1), axis=-1)[..., -1]


def _conv_weight_grad_np(x, g, sh, sw, ph, pw, dil, gw, gb):
    n_batch, c_in, h_in, w_in = x.shape
    c_out, _, kh, kw = gw.shape
    h_out, w_out = g.shape[2], g.shape[3]
    x64 = x.astype(np.float64, copy=False)
    g64 = g.astype(np.float64, copy=False)
    for i in range(kh):
        t_lo, t_hi = _out_range(h_in, h_out, sh, i * dil - ph)
        for j in range(kw):
            u_lo, u_hi = _out_range(w_in, w_out, sw, j * dil - pw)
            if t_hi <= t_lo or u_hi <= u_lo:
                gw[:, :, i, j] = 0.0
                continue
            h0 = t_lo * sh + i * dil - ph
            w0 = u_lo * sw + j * dil - pw
            rows = slice(h0, h0 + (t_hi - t_lo - 1) * sh + 1, sh)
            cols = slice(w0, w0 + (u_hi - u_lo - 1) * sw + 1, sw)
            # (ci, n*t*u) and (co, n*t*u), both flattened in (n, t, u) order
            xs = x64[:, :, rows, cols].transpose(1, 0, 2, 3).reshape(c_in, -1)
            gs = g64[:, :, t_lo:t_hi, u_lo:u_hi].transpose(1, 0, 2, 3).reshape(c_out, -1)
            step = max(1, _CHUNK_ELEMS // max(1, c_in * xs.shape[1]))
            for c0 in range(0, c_out, step):
                c1 = min(c_out, c0 + step)
                gw[c0:c1, :, i, j] = _sequential_sum(gs[c0:c1, None, :] * xs[None, :, :])
    gb[:] = _sequential_sum(g64.transpose(1, 0, 2, 3).reshape(c_out, -1))


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def conv_forward(x, w, b, stride, padding, dilation, out_hw, backend=None):
    """Raw forward kernel. Returns a float64 array of shape (N, Co, Ho, Wo)."""
    out = np.zeros((x.shape[0], w.shape[0]) + tuple(out_hw), dtype=np.float64)
    if b is None:
        b = np.zeros(0, dtype=np.float64)
    args = (stride[0], stride[1], padding[0], padding[1], dilation)
    if _pick(backend):
        wt = np.ascontiguousarray(w.transpose(1, 2, 3, 0), dtype=np.float64)
        out_t = np.zeros((x.shape[0],) + tuple(out_hw) + (w.shape[0],), dtype=np.float64)
        _conv_forward_nb(np.ascontiguousarray(x), wt, b.astype(np.float64), *args, out_t)
        out[...] = out_t.transpose(0, 3, 1, 2)
    else:
        _conv_forward_np(x, w, b, *args, out)
    return out


def conv_input_grad(g, w, stride, padding, dilation, in_shape, backend=None):
    gi = np.zeros(in_shape, dtype=np.float64)
    args = (stride[0], stride[1], padding[0], padding[1], dilation)
    if _pick(backend):
        wt = np.ascontiguousarray(w.transpose(0, 2, 3, 1), dtype=np.float64)
        gi_t = np.zeros((in_shape[0], in_shape[2], in_shape[3], in_shape[1]), dtype=np.float64)
        _conv_input_grad_nb(np.ascontiguousarray(g), wt, *args, gi_t)
        gi[...] = gi_t.transpose(0, 3, 1, 2)
    else:
        _conv_input_grad_np(g, w, *args, gi)
    return gi


def conv_weight_grad(x, g, stride, padding, dilation, w_shape, backend=None):
    gw = np.zeros(w_shape, dtype=np.float64)
    gb = np.zeros(w_shape[0], dtype=np.float64)
    args = (stride[0], stride[1], padding[0], padding[1], dilation)
    if _pick(backend):
        gt = np.ascontiguousarray(g.transpose(0, 2, 3, 1), dtype=np.float64)
        gwt = np.zeros((w_shape[1], w_shape[2], w_shape[3], w_shape[0]), dtype=np.float64)
        _conv_weight_grad_nb(np.ascontiguousarray(x), gt, *args, gwt, gb)
        gw[...] = gwt.transpose(3, 0, 1, 2)
    else:
        _conv_weight_grad_np(x, g, *args, gw, gb)
    return gw, gb


def _pick(backend):
    if backend is None:
        return USE_NUMBA
    if backend == "numba":
        if not HAVE_NUMBA:
            raise RuntimeError("numba backend requested but numba is not installed")
        return True
    if backend == "numpy":
        return False
    raise ValueError(f"unknown backend {backend!r}; expected 'numba' or 'numpy'")


def active_backend():
    return "numba" if USE_NUMBA else "numpy"
