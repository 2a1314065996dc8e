"""Compiled per-pixel kernels for the splat renderer.

Splats arrive sorted front to back. Entries are bucketed by pixel in splat
order, so every pixel composites in depth order.
"""

from __future__ import annotations

import numba
import numpy as np


@numba.njit(cache=True)
def _row_span(a00, a01, a11, dy, qcut, cx, x0, x1):
    """Pixel columns of one row that can lie inside the ellipse q <= qcut (one pixel of slack)."""
    disc = (a01 * dy) ** 2 - a00 * (a11 * dy * dy - qcut)
    if disc < 0.0:
        return x0, x0
    r = np.sqrt(disc) / a00
    c = cx - a01 * dy / a00
    lo = max(x0, np.int64(np.floor(c - r - 0.5)) - 1)
    hi = min(x1, np.int64(np.ceil(c + r - 0.5)) + 2)
    return lo, max(lo, hi)


@numba.njit(cache=True)
def rasterize(mean, inv, opacity, color, background, width, height,
              alpha_min, alpha_max, early_stop):
    m = mean.shape[0]
    npix = width * height
    x0 = np.empty(m, np.int64)
    x1 = np.empty(m, np.int64)
    y0 = np.empty(m, np.int64)
    y1 = np.empty(m, np.int64)
    qmax = np.zeros(m)
    for i in range(m):
        x0[i] = x1[i] = y0[i] = y1[i] = 0
        if opacity[i] < alpha_min:
            continue
        qmax[i] = 2.0 * np.log(255.0 * opacity[i])
        # inverse of the 2x2 conic gives back the covariance diagonal
        det = inv[i, 0, 0] * inv[i, 1, 1] - inv[i, 0, 1] * inv[i, 1, 0]
        ex = np.sqrt(qmax[i] * inv[i, 1, 1] / det)
        ey = np.sqrt(qmax[i] * inv[i, 0, 0] / det)
        x0[i] = min(max(np.floor(mean[i, 0] - ex - 0.5), 0), width)
        x1[i] = min(max(np.ceil(mean[i, 0] + ex - 0.5) + 1, 0), width)
        y0[i] = min(max(np.floor(mean[i, 1] - ey - 0.5), 0), height)
        y1[i] = min(max(np.ceil(mean[i, 1] + ey - 0.5) + 1, 0), height)

    # pass 1: entries per pixel; pass 2 writes each entry straight into its pixel's slot
    counts = np.zeros(npix + 1, np.int64)
    for i in range(m):
        a00 = inv[i, 0, 0]
        a01 = inv[i, 0, 1]
        a11 = inv[i, 1, 1]
        qcut = qmax[i] * (1.0 + 1e-9) + 1e-9
        for py in range(y0[i], y1[i]):
            dy = py + 0.5 - mean[i, 1]
            lo, hi = _row_span(a00, a01, a11, dy, qcut, mean[i, 0], x0[i], x1[i])
            for px in range(lo, hi):
                dx = px + 0.5 - mean[i, 0]
                q = a00 * dx * dx + 2.0 * a01 * dx * dy + a11 * dy * dy
                if q > qcut:
                    continue
                if opacity[i] * np.exp(-0.5 * q) >= alpha_min:
                    counts[py * width + px + 1] += 1
    for p in range(npix):
        counts[p + 1] += counts[p]
    n = counts[npix]
    starts = counts[:npix].copy()
    row = np.empty(n, np.int64)
    dxs = np.empty(n)
    dys = np.empty(n)
    gs = np.empty(n)
    e_a = np.empty(n)
    for i in range(m):
        a00 = inv[i, 0, 0]
        a01 = inv[i, 0, 1]
        a11 = inv[i, 1, 1]
        qcut = qmax[i] * (1.0 + 1e-9) + 1e-9
        for py in range(y0[i], y1[i]):
            dy = py + 0.5 - mean[i, 1]
            lo, hi = _row_span(a00, a01, a11, dy, qcut, mean[i, 0], x0[i], x1[i])
            for px in range(lo, hi):
                dx = px + 0.5 - mean[i, 0]
                q = a00 * dx * dx + 2.0 * a01 * dx * dy + a11 * dy * dy
                if q > qcut:
                    continue
                g = np.exp(-0.5 * q)
                a = opacity[i] * g
                if a >= alpha_min:
                    s = starts[py * width + px]
                    starts[py * width + px] = s + 1
                    row[s] = i
                    dxs[s] = dx
                    dys[s] = dy
                    gs[s] = g
                    e_a[s] = a

    pix = np.empty(n, np.int64)
    alpha = np.empty(n)
    clamped = np.zeros(n, np.bool_)
    trans = np.empty(n)
    keep = np.ones(n, np.bool_)
    final = np.ones(npix)
    image = np.zeros((npix, 3))
    for p in range(npix):
        t = 1.0
        stopped = False
        for s in range(counts[p], counts[p + 1]):
            pix[s] = p
            a = e_a[s]
            if a > alpha_max:
                a = alpha_max
                clamped[s] = True
            alpha[s] = a
            trans[s] = t
            if stopped or (early_stop > 0.0 and t * (1.0 - a) < early_stop):
                stopped = True
                keep[s] = False
                continue
            w = a * t
            for c in range(3):
                image[p, c] += w * color[row[s], c]
            t *= 1.0 - a
        final[p] = t
        for c in range(3):
            image[p, c] += t * background[c]
    return image, pix, row, dxs, dys, gs, alpha, clamped, trans, final, keep


@numba.njit(cache=True)
def composite_backward(grad, pix, row, alpha, clamped, trans, final, gauss, dxs, dys,
                       opacity, inv, color, background, m):
    """Per-splat gradients w.r.t. base opacity, 2D mean, conic (a, b, c) and color.

    Entries are visited back to front within each pixel so the light arriving
    from behind each entry is available as a running sum; accumulation order is
    fixed, which keeps the result bit-reproducible.
    """
    n = pix.shape[0]
    g_opacity = np.zeros(m)
    g_mean = np.zeros((m, 2))
    g_conic = np.zeros((m, 3))
    g_color = np.zeros((m, 3))
    after = np.zeros(3)
    end = n
    while end > 0:
        p = pix[end - 1]
        start = end - 1
        while start > 0 and pix[start - 1] == p:
            start -= 1
        for c in range(3):
            after[c] = final[p] * background[c]
        for s in range(end - 1, start - 1, -1):
            r = row[s]
            a = alpha[s]
            t = trans[s]
            acc = 0.0
            for c in range(3):
                gc = grad[p, c]
                acc += gc * (color[r, c] * t - after[c] / (1.0 - a))
                after[c] += a * t * color[r, c]
                g_color[r, c] += a * t * gc
            if clamped[s]:
                continue
            # alpha = opacity * exp(-q / 2), q = d^T A d, d = pixel center - mean
            g_opacity[r] += acc * gauss[s]
            gq = -0.5 * acc * opacity[r] * gauss[s]
            dx = dxs[s]
            dy = dys[s]
            g_mean[r, 0] -= 2.0 * gq * (inv[r, 0, 0] * dx + inv[r, 0, 1] * dy)
            g_mean[r, 1] -= 2.0 * gq * (inv[r, 0, 1] * dx + inv[r, 1, 1] * dy)
            g_conic[r, 0] += gq * dx * dx
            g_conic[r, 1] += gq * dx * dy
            g_conic[r, 2] += gq * dy * dy
        end = start
    return g_opacity, g_mean, g_conic, g_color
