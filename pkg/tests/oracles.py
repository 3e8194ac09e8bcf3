"""Naive loop implementations used as independent references in the tests."""
import numpy as np


def correlate_loops(m, k, demean=False):
    rows, cols = len(m), len(m[0])
    kr, kc = len(k), len(k[0])
    out = np.zeros((rows - kr + 1, cols - kc + 1))
    for u in range(rows - kr + 1):
        for v in range(cols - kc + 1):
            mean = 0.0
            if demean:
                for a in range(kr):
                    for b in range(kc):
                        mean += m[u + a][v + b]
                mean /= kr * kc
            s = 0.0
            for a in range(kr):
                for b in range(kc):
                    s += (m[u + a][v + b] - mean) * k[a][b]
            out[u, v] = s
    return out


def convolve_loops(m, k):
    """Textbook convolution: sum_ab m[u + a, v + b] * k[kr-1-a, kc-1-b]."""
    kr, kc = len(k), len(k[0])
    flipped = [[k[kr - 1 - a][kc - 1 - b] for b in range(kc)] for a in range(kr)]
    return correlate_loops(m, flipped)


def downsample_loops(m, s):
    rows, cols = len(m), len(m[0])
    out = np.zeros((rows // s, cols // s))
    for i in range(rows // s):
        for j in range(cols // s):
            tot = 0.0
            for a in range(s):
                for b in range(s):
                    tot += m[i * s + a][j * s + b]
            out[i, j] = tot / (s * s)
    return out


def upsample_loops(m, s, gain):
    rows, cols = len(m), len(m[0])
    out = np.zeros((rows * s, cols * s))
    for i in range(rows * s):
        for j in range(cols * s):
            out[i, j] = m[i // s][j // s] * gain
    return out


def patches_loops(m, k, stride):
    rows, cols = len(m), len(m[0])
    out = []
    r = 0
    while r + k <= rows:
        c = 0
        while c + k <= cols:
            out.append((r, c, [m[r + a][c + b] for a in range(k) for b in range(k)]))
            c += stride
        r += stride
    return out


def central_diff(fn, params, h=1e-6):
    """Central finite differences of scalar ``fn()`` w.r.t. every entry of each array in ``params``.

    The arrays are perturbed in place and restored; one gradient array is returned per input.
    """
    grads = []
    for arr in params:
        grad = np.zeros(arr.shape)
        for i in range(arr.size):
            old = arr.flat[i]
            arr.flat[i] = old + h
            up = fn()
            arr.flat[i] = old - h
            down = fn()
            arr.flat[i] = old
            grad.flat[i] = (up - down) / (2 * h)
        grads.append(grad)
    return grads


def rel_err(a, b, floor=1e-7):
    """Largest elementwise relative error, with ``floor`` guarding near-zero entries."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float((np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)).max())
