"""Pure-numpy convolution kernels (im2col + float64 GEMM).

Reference implementation and fallback for the compiled extension. All partial
sums are accumulated in float64; results are stored in the input dtype.
Single logical thread, fixed reduction order: repeated calls on the same
inputs are bitwise identical.
"""

import numpy as np


def _out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    # xp: padded input [C, Hp, Wp] -> columns [C*k*k, oh*ow] in float64
    c = xp.shape[0]
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # [C, oh, ow, k, k]
    cols = win.transpose(0, 3, 4, 1, 2).reshape(c * k * k, oh * ow)
    return np.ascontiguousarray(cols, dtype=np.float64)


def conv2d_forward(x, w, b, stride: int, pad: int):
    """Cross-correlation of x[Cin,H,W] with w[Cout,Cin,k,k] plus bias b[Cout]."""
    cout, cin, k, _ = w.shape
    h, wdt = x.shape[1], x.shape[2]
    oh, ow = _out_size(h, k, stride, pad), _out_size(wdt, k, stride, pad)
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    cols = _im2col(xp, k, stride, oh, ow)
    w2d = w.reshape(cout, cin * k * k).astype(np.float64)
    y = w2d @ cols + b.astype(np.float64)[:, None]
    return y.reshape(cout, oh, ow).astype(np.result_type(x, w, b))


def conv2d_backward(x, w, gy, stride: int, pad: int):
    """Gradients (gx, gw, gb) of conv2d_forward w.r.t. input, weight, bias."""
    cout, cin, k, _ = w.shape
    h, wdt = x.shape[1], x.shape[2]
    oh, ow = gy.shape[1], gy.shape[2]
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    cols = _im2col(xp, k, stride, oh, ow)
    gy2d = gy.reshape(cout, oh * ow).astype(np.float64)

    gb = gy2d.sum(axis=1)
    gw = (gy2d @ cols.T).reshape(cout, cin, k, k)

    w2d = w.reshape(cout, cin * k * k).astype(np.float64)
    gcols = (w2d.T @ gy2d).reshape(cin, k, k, oh, ow)
    gxp = np.zeros((cin, h + 2 * pad, wdt + 2 * pad), dtype=np.float64)
    for ki in range(k):
        for kj in range(k):
            gxp[:, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride] += gcols[
                :, ki, kj
            ]
    gx = gxp[:, pad : pad + h, pad : pad + wdt]
    dt = np.result_type(x, w, gy)
    return gx.astype(dt), gw.astype(dt), gb.astype(dt)
