"""Numba kernels for tile binning, forward blending and backward replay.

Every tile writes only its own pixels and its own slice of the per-entry
gradient buffer, so results do not depend on the thread count.
"""
import math

import numpy as np
from numba import njit, prange


@njit(cache=True)
def bin_tiles(order, mean2d, extent, width, height, tile):
    """CSR lists of splat ids per tile, each list in global ``order``.

    ``extent[i] = (rx, ry)`` is the half-size of the pixel box in which splat
    ``i`` can exceed the alpha cutoff; ``inf`` means the whole image.
    """
    tx = (width + tile - 1) // tile
    ty = (height + tile - 1) // tile
    n_tiles = tx * ty
    counts = np.zeros(n_tiles + 1, dtype=np.int64)
    rects = np.empty((order.shape[0], 4), dtype=np.int64)
    for k in range(order.shape[0]):
        i = order[k]
        rx, ry = extent[i, 0], extent[i, 1]
        if math.isinf(rx) or math.isinf(ry):
            x0, x1, y0, y1 = 0, tx, 0, ty
        else:
            lo_x = mean2d[i, 0] - rx
            hi_x = mean2d[i, 0] + rx
            lo_y = mean2d[i, 1] - ry
            hi_y = mean2d[i, 1] + ry
            if hi_x < 0 or hi_y < 0 or lo_x > width - 1 or lo_y > height - 1:
                rects[k, 0] = 0
                rects[k, 1] = 0
                rects[k, 2] = 0
                rects[k, 3] = 0
                continue
            x0 = max(0, int(math.floor(max(lo_x, 0.0))) // tile)
            x1 = min(tx, int(math.floor(min(hi_x, width - 1.0))) // tile + 1)
            y0 = max(0, int(math.floor(max(lo_y, 0.0))) // tile)
            y1 = min(ty, int(math.floor(min(hi_y, height - 1.0))) // tile + 1)
        rects[k, 0] = x0
        rects[k, 1] = x1
        rects[k, 2] = y0
        rects[k, 3] = y1
        for yy in range(y0, y1):
            for xx in range(x0, x1):
                counts[yy * tx + xx + 1] += 1
    for t in range(n_tiles):
        counts[t + 1] += counts[t]
    ids = np.empty(counts[n_tiles], dtype=np.int64)
    fill = counts[:n_tiles].copy()
    for k in range(order.shape[0]):
        for yy in range(rects[k, 2], rects[k, 3]):
            for xx in range(rects[k, 0], rects[k, 1]):
                t = yy * tx + xx
                ids[fill[t]] = order[k]
                fill[t] += 1
    return counts, ids


@njit(parallel=True, cache=True)
def forward_tiles(offsets, ids, mean2d, conic, opac, color, depth, bg,
                  width, height, tile, alpha_min, t_min):
    tx = (width + tile - 1) // tile
    n_tiles = offsets.shape[0] - 1
    rgb = np.zeros((height, width, 3))
    alpha_out = np.zeros((height, width))
    depth_out = np.zeros((height, width))
    n_contrib = np.zeros((height, width), dtype=np.int64)
    last = np.zeros((height, width), dtype=np.int64)
    for t in prange(n_tiles):
        ox = (t % tx) * tile
        oy = (t // tx) * tile
        start = offsets[t]
        stop = offsets[t + 1]
        for py in range(oy, min(oy + tile, height)):
            for px in range(ox, min(ox + tile, width)):
                T = 1.0
                r = 0.0
                g = 0.0
                b = 0.0
                dsum = 0.0
                used = 0
                end = start
                for e in range(start, stop):
                    i = ids[e]
                    dx = px - mean2d[i, 0]
                    dy = py - mean2d[i, 1]
                    power = -0.5 * (conic[i, 0] * dx * dx + conic[i, 2] * dy * dy) - conic[i, 1] * dx * dy
                    end = e + 1
                    if power > 0.0:
                        continue
                    a = opac[i] * math.exp(power)
                    if a < alpha_min:
                        continue
                    w = a * T
                    r += color[i, 0] * w
                    g += color[i, 1] * w
                    b += color[i, 2] * w
                    dsum += depth[i] * w
                    used += 1
                    T = T * (1.0 - a)
                    if T < t_min:
                        break
                rgb[py, px, 0] = r + T * bg[0]
                rgb[py, px, 1] = g + T * bg[1]
                rgb[py, px, 2] = b + T * bg[2]
                alpha_out[py, px] = 1.0 - T
                depth_out[py, px] = dsum
                n_contrib[py, px] = used
                last[py, px] = end
    return rgb, alpha_out, depth_out, n_contrib, last


@njit(parallel=True, cache=True)
def backward_tiles(offsets, ids, last, mean2d, conic, opac, color, bg, upstream,
                   width, height, tile, alpha_min):
    """Per-entry gradients ``(len(ids), 9)``: mean2d(2), conic(3), opacity, color(3)."""
    tx = (width + tile - 1) // tile
    n_tiles = offsets.shape[0] - 1
    grads = np.zeros((ids.shape[0], 9))
    for t in prange(n_tiles):
        ox = (t % tx) * tile
        oy = (t // tx) * tile
        start = offsets[t]
        cap = offsets[t + 1] - start
        ent = np.empty(cap, dtype=np.int64)
        alphas = np.empty(cap)
        trans = np.empty(cap)
        for py in range(oy, min(oy + tile, height)):
            for px in range(ox, min(ox + tile, width)):
                g0 = upstream[py, px, 0]
                g1 = upstream[py, px, 1]
                g2 = upstream[py, px, 2]
                if g0 == 0.0 and g1 == 0.0 and g2 == 0.0:
                    continue
                # replay the forward decisions to recover per-contributor state
                n = 0
                T = 1.0
                for e in range(start, last[py, px]):
                    i = ids[e]
                    dx = px - mean2d[i, 0]
                    dy = py - mean2d[i, 1]
                    power = -0.5 * (conic[i, 0] * dx * dx + conic[i, 2] * dy * dy) - conic[i, 1] * dx * dy
                    if power > 0.0:
                        continue
                    a = opac[i] * math.exp(power)
                    if a < alpha_min:
                        continue
                    ent[n] = e
                    alphas[n] = a
                    trans[n] = T
                    n += 1
                    T = T * (1.0 - a)
                # back-to-front: s = radiance seen just behind the current splat
                s0 = bg[0]
                s1 = bg[1]
                s2 = bg[2]
                for k in range(n - 1, -1, -1):
                    e = ent[k]
                    i = ids[e]
                    a = alphas[k]
                    Tk = trans[k]
                    c0 = color[i, 0]
                    c1 = color[i, 1]
                    c2 = color[i, 2]
                    w = a * Tk
                    grads[e, 6] += w * g0
                    grads[e, 7] += w * g1
                    grads[e, 8] += w * g2
                    d_alpha = Tk * ((c0 - s0) * g0 + (c1 - s1) * g1 + (c2 - s2) * g2)
                    s0 = c0 * a + (1.0 - a) * s0
                    s1 = c1 * a + (1.0 - a) * s1
                    s2 = c2 * a + (1.0 - a) * s2
                    dx = px - mean2d[i, 0]
                    dy = py - mean2d[i, 1]
                    power = -0.5 * (conic[i, 0] * dx * dx + conic[i, 2] * dy * dy) - conic[i, 1] * dx * dy
                    grads[e, 5] += math.exp(power) * d_alpha
                    d_power = a * d_alpha
                    grads[e, 0] += d_power * (conic[i, 0] * dx + conic[i, 1] * dy)
                    grads[e, 1] += d_power * (conic[i, 1] * dx + conic[i, 2] * dy)
                    grads[e, 2] += -0.5 * d_power * dx * dx
                    grads[e, 3] += -d_power * dx * dy
                    grads[e, 4] += -0.5 * d_power * dy * dy
    return grads
