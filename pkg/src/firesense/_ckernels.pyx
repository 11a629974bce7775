# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution kernels: C im2col packing + BLAS dgemm (float64).

Hot path for float32 tensors. Accumulation is float64 throughout; results are
rounded to float32 on store. Single-threaded and bitwise deterministic.
"""

import numpy as np

from scipy.linalg.cython_blas cimport dgemm


cdef void _pack_cols(const float[:, :, ::1] x, double[:, ::1] cols,
                     int k, int stride, int pad, int oh, int ow) nogil:
    # cols[(ci*k + ki)*k + kj, oy*ow + ox] = x[ci, oy*stride + ki - pad, ox*stride + kj - pad]
    cdef int cin = x.shape[0], h = x.shape[1], w = x.shape[2]
    cdef int ci, ki, kj, oy, ox, iy, ix, row
    for ci in range(cin):
        for ki in range(k):
            for kj in range(k):
                row = (ci * k + ki) * k + kj
                for oy in range(oh):
                    iy = oy * stride + ki - pad
                    if iy < 0 or iy >= h:
                        for ox in range(ow):
                            cols[row, oy * ow + ox] = 0.0
                        continue
                    for ox in range(ow):
                        ix = ox * stride + kj - pad
                        if ix < 0 or ix >= w:
                            cols[row, oy * ow + ox] = 0.0
                        else:
                            cols[row, oy * ow + ox] = x[ci, iy, ix]


cdef void _matmul(double[:, ::1] a, double[:, ::1] b, double[:, ::1] c,
                  bint ta, bint tb) nogil:
    # c = op(a) @ op(b) on row-major buffers. BLAS is column-major, so compute
    # C^T = op(B)^T @ op(A)^T by swapping operand order.
    cdef int m, n, kk, lda, ldb, ldc
    cdef double alpha = 1.0, beta = 0.0
    cdef char cta, ctb
    cta = 84 if tb else 78   # 'T' / 'N' applied to the b buffer
    ctb = 84 if ta else 78   # 'T' / 'N' applied to the a buffer
    if ta:
        m = a.shape[1]
        kk = a.shape[0]
    else:
        m = a.shape[0]
        kk = a.shape[1]
    if tb:
        n = b.shape[0]
    else:
        n = b.shape[1]
    lda = b.shape[1]
    ldb = a.shape[1]
    ldc = c.shape[1]
    dgemm(&cta, &ctb, &n, &m, &kk, &alpha, &b[0, 0], &lda, &a[0, 0], &ldb,
          &beta, &c[0, 0], &ldc)


def conv2d_forward(x_in, w_in, b_in, int stride, int pad):
    x = np.ascontiguousarray(x_in, dtype=np.float32)
    w = np.ascontiguousarray(w_in, dtype=np.float32)
    cdef int cin = x.shape[0], h = x.shape[1], wd = x.shape[2]
    cdef int cout = w.shape[0], k = w.shape[2]
    cdef int oh = (h + 2 * pad - k) // stride + 1
    cdef int ow = (wd + 2 * pad - k) // stride + 1

    cols_arr = np.empty((cin * k * k, oh * ow), dtype=np.float64)
    cdef double[:, ::1] cols = cols_arr
    cdef const float[:, :, ::1] xv = x
    _pack_cols(xv, cols, k, stride, pad, oh, ow)

    w2d_arr = np.ascontiguousarray(w.reshape(cout, cin * k * k), dtype=np.float64)
    y_arr = np.empty((cout, oh * ow), dtype=np.float64)
    cdef double[:, ::1] w2d = w2d_arr
    cdef double[:, ::1] y = y_arr
    _matmul(w2d, cols, y, False, False)

    b64 = np.ascontiguousarray(b_in, dtype=np.float64)
    cdef double[::1] bv = b64
    cdef int co, i
    for co in range(cout):
        for i in range(oh * ow):
            y[co, i] += bv[co]
    return y_arr.reshape(cout, oh, ow).astype(np.float32)


def conv2d_backward(x_in, w_in, gy_in, int stride, int pad):
    x = np.ascontiguousarray(x_in, dtype=np.float32)
    w = np.ascontiguousarray(w_in, dtype=np.float32)
    cdef int cin = x.shape[0], h = x.shape[1], wd = x.shape[2]
    cdef int cout = w.shape[0], k = w.shape[2]
    gy2d_arr = np.ascontiguousarray(gy_in, dtype=np.float64).reshape(cout, -1)
    cdef int oh = gy_in.shape[1], ow = gy_in.shape[2]

    cols_arr = np.empty((cin * k * k, oh * ow), dtype=np.float64)
    cdef double[:, ::1] cols = cols_arr
    cdef const float[:, :, ::1] xv = x
    _pack_cols(xv, cols, k, stride, pad, oh, ow)

    cdef double[:, ::1] gy2d = gy2d_arr

    gb_arr = np.empty(cout, dtype=np.float64)
    cdef double[::1] gb = gb_arr
    cdef int co, i
    cdef double acc
    for co in range(cout):
        acc = 0.0
        for i in range(oh * ow):
            acc += gy2d[co, i]
        gb[co] = acc

    gw_arr = np.empty((cout, cin * k * k), dtype=np.float64)
    cdef double[:, ::1] gw2d = gw_arr
    _matmul(gy2d, cols, gw2d, False, True)

    w2d_arr = np.ascontiguousarray(w.reshape(cout, cin * k * k), dtype=np.float64)
    gcols_arr = np.empty((cin * k * k, oh * ow), dtype=np.float64)
    cdef double[:, ::1] w2d = w2d_arr
    cdef double[:, ::1] gcols = gcols_arr
    _matmul(w2d, gy2d, gcols, True, False)

    # col2im scatter-add back into the input gradient (padding region discarded)
    gx_arr = np.zeros((cin, h, wd), dtype=np.float64)
    cdef double[:, :, ::1] gx = gx_arr
    cdef int ci, ki, kj, oy, ox, iy, ix, row
    for ci in range(cin):
        for ki in range(k):
            for kj in range(k):
                row = (ci * k + ki) * k + kj
                for oy in range(oh):
                    iy = oy * stride + ki - pad
                    if iy < 0 or iy >= h:
                        continue
                    for ox in range(ow):
                        ix = ox * stride + kj - pad
                        if ix < 0 or ix >= wd:
                            continue
                        gx[ci, iy, ix] += gcols[row, oy * ow + ox]

    return (gx_arr.astype(np.float32),
            gw_arr.reshape(cout, cin, k, k).astype(np.float32),
            gb_arr.astype(np.float32))
