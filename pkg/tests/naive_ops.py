"""Nested-loop reference implementation of the CNN forward pass.

Deliberately written with explicit Python loops and no shared code with the
library's vectorized path; the tests compare the two to 1e-12.
"""

import math

import numpy as np


def naive_forward(params, x):
    """Class probabilities for a batch of (T, N, P) windows, loop by loop."""
    arch = params.arch
    w1 = params.view("conv1_w")
    b1 = params.view("conv1_b")
    w2 = params.view("conv2_w")
    b2 = params.view("conv2_b")
    d1w = params.view("dense1_w")
    d1b = params.view("dense1_b")
    d2w = params.view("dense2_w")
    d2b = params.view("dense2_b")

    out = np.empty((x.shape[0], arch.n_classes))
    for n in range(x.shape[0]):
        img = [[[float(x[n, t, g, p]) for g in range(arch.n_generators)]
                for t in range(arch.window_len)]
               for p in range(arch.n_parameters)]  # channel-major
        c1 = _conv(img, w1, b1)
        c1 = _relu(c1)
        c2 = _conv(c1, w2, b2)
        c2 = _relu(c2)
        pooled = _maxpool(c2, arch.pool_kernel, arch.pool_stride)
        flat = []
        for ch in pooled:
            for row in ch:
                flat.extend(row)
        h1 = _dense(flat, d1w, d1b)
        h1 = [max(v, 0.0) for v in h1]
        logits = _dense(h1, d2w, d2b)
        m = max(logits)
        exps = [math.exp(v - m) for v in logits]
        total = sum(exps)
        out[n] = [v / total for v in exps]
    return out


def _conv(img, w, b):
    n_in = len(img)
    h_in, w_in = len(img[0]), len(img[0][0])
    n_out, _, kh, kw = w.shape
    h_out, w_out = h_in - kh + 1, w_in - kw + 1
    result = []
    for f in range(n_out):
        plane = []
        for y in range(h_out):
            row = []
            for xx in range(w_out):
                acc = float(b[f])
                for c in range(n_in):
                    for dy in range(kh):
                        for dx in range(kw):
                            acc += float(w[f, c, dy, dx]) * img[c][y + dy][xx + dx]
                row.append(acc)
            plane.append(row)
        result.append(plane)
    return result


def _relu(planes):
    return [[[max(v, 0.0) for v in row] for row in plane] for plane in planes]


def _maxpool(planes, kernel, stride):
    kh, kw = kernel
    sh, sw = stride
    h_in, w_in = len(planes[0]), len(planes[0][0])
    h_out = (h_in - kh) // sh + 1
    w_out = (w_in - kw) // sw + 1
    result = []
    for plane in planes:
        grid = []
        for y in range(h_out):
            row = []
            for xx in range(w_out):
                best = -math.inf
                for dy in range(kh):
                    for dx in range(kw):
                        best = max(best, plane[y * sh + dy][xx * sw + dx])
                row.append(best)
            grid.append(row)
        result.append(grid)
    return result


def _dense(vec, w, b):
    n_in, n_out = w.shape
    assert len(vec) == n_in
    return [
        float(b[j]) + sum(vec[i] * float(w[i, j]) for i in range(n_in))
        for j in range(n_out)
    ]
