"""Independent reference implementations used as test oracles.

Everything here is written directly from the mathematical definitions as
slow scalar loops, deliberately sharing no code with the package.
"""

import math

import numpy as np


def conv2d_oracle(x, w, b, padding, pad_values=None):
    """Six-nested-loop stride-1 cross-correlation in float64."""
    bb, ci, h, wd = x.shape
    o, _, k, _ = w.shape
    ho = h - k + 1 + 2 * padding
    wo = wd - k + 1 + 2 * padding
    out = np.zeros((bb, o, ho, wo), np.float64)
    for n in range(bb):
        for oc in range(o):
            for oy in range(ho):
                for ox in range(wo):
                    acc = float(b[oc])
                    for ic in range(ci):
                        for u in range(k):
                            for v in range(k):
                                yy = oy + u - padding
                                xx = ox + v - padding
                                if 0 <= yy < h and 0 <= xx < wd:
                                    val = float(x[n, ic, yy, xx])
                                elif pad_values is not None:
                                    val = float(pad_values[ic])
                                else:
                                    val = 0.0
                                acc += float(w[oc, ic, u, v]) * val
                    out[n, oc, oy, ox] = acc
    return out


def keys_cubic(t, a=-0.5):
    """Keys cubic kernel written from its textbook piecewise definition."""
    t = abs(t)
    if t <= 1.0:
        return (a + 2.0) * t ** 3 - (a + 3.0) * t ** 2 + 1.0
    if t < 2.0:
        return a * t ** 3 - 5.0 * a * t ** 2 + 8.0 * a * t - 4.0 * a
    return 0.0


def bicubic_oracle_2d(img, out_h, out_w):
    """Non-separable 4x4-tap cubic resample of one 2-D plane.

    Half-pixel centers, border taps clamped to the edge pixel.
    """
    h, w = img.shape
    out = np.zeros((out_h, out_w), np.float64)
    for oy in range(out_h):
        sy = (oy + 0.5) * h / out_h - 0.5
        by = math.floor(sy)
        for ox in range(out_w):
            sx = (ox + 0.5) * w / out_w - 0.5
            bx = math.floor(sx)
            acc = 0.0
            for u in range(by - 1, by + 3):
                wy = keys_cubic(sy - u)
                for v in range(bx - 1, bx + 3):
                    wx = keys_cubic(sx - v)
                    acc += wy * wx * float(img[min(max(u, 0), h - 1),
                                               min(max(v, 0), w - 1)])
            out[oy, ox] = acc
    return out


def bicubic_oracle(x, out_h, out_w):
    """Apply the 2-D oracle per batch and channel of a (B,C,H,W) array."""
    b, c, _, _ = x.shape
    out = np.zeros((b, c, out_h, out_w), np.float64)
    for n in range(b):
        for ch in range(c):
            out[n, ch] = bicubic_oracle_2d(np.asarray(x[n, ch], np.float64),
                                           out_h, out_w)
    return out


def ssim_oracle(a, b, window, k1=0.01, k2=0.03, drange=1.0):
    """Direct per-window SSIM from the definition, scalar loops.

    a, b are 2-D float arrays; window is the (n, n) weight mask.
    """
    n = window.shape[0]
    h, w = a.shape
    c1 = (k1 * drange) ** 2
    c2 = (k2 * drange) ** 2
    vals = []
    for y in range(h - n + 1):
        for x in range(w - n + 1):
            pa = a[y:y + n, x:x + n]
            pb = b[y:y + n, x:x + n]
            mu_a = float((window * pa).sum())
            mu_b = float((window * pb).sum())
            var_a = float((window * pa * pa).sum()) - mu_a ** 2
            var_b = float((window * pb * pb).sum()) - mu_b ** 2
            cov = float((window * pa * pb).sum()) - mu_a * mu_b
            vals.append(((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                        / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)))
    return float(np.mean(vals))
