"""Compiled per-pixel blending loops (forward and reverse).

Per pixel, the tile's depth-sorted Gaussian list is walked front to back.
Feature channels are blended with weights alpha_i * T_i; the reverse pass
walks the same list back to front using the running "behind" accumulator,
so no division by (1 - alpha) is ever needed.
"""
import numba
import numpy as np


@numba.njit(cache=True)
def bin_tiles(means2d, radius, order, nx, ny, tile_size, cull):
    """Depth-ordered per-tile Gaussian lists as (offsets, flat ids)."""
    n_tiles = nx * ny
    g = order.shape[0]
    x0 = np.empty(g, np.int64)
    x1 = np.empty(g, np.int64)
    y0 = np.empty(g, np.int64)
    y1 = np.empty(g, np.int64)
    counts = np.zeros(n_tiles + 1, np.int64)
    for k in range(g):
        i = order[k]
        if cull:
            r = radius[i]
            x0[k] = min(max(int(np.floor((means2d[i, 0] - r) / tile_size)), 0), nx - 1)
            x1[k] = min(max(int(np.floor((means2d[i, 0] + r) / tile_size)), 0), nx - 1)
            y0[k] = min(max(int(np.floor((means2d[i, 1] - r) / tile_size)), 0), ny - 1)
            y1[k] = min(max(int(np.floor((means2d[i, 1] + r) / tile_size)), 0), ny - 1)
        else:
            x0[k], x1[k], y0[k], y1[k] = 0, nx - 1, 0, ny - 1
        for ty in range(y0[k], y1[k] + 1):
            for tx in range(x0[k], x1[k] + 1):
                counts[ty * nx + tx + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    ids = np.empty(offsets[-1], np.int64)
    for k in range(g):
        for ty in range(y0[k], y1[k] + 1):
            for tx in range(x0[k], x1[k] + 1):
                t = ty * nx + tx
                ids[fill[t]] = order[k]
                fill[t] += 1
    return offsets, ids


@numba.njit(cache=True)
def _alpha(i, px, py, means2d, conic, opacity, cutoff_power, alpha_max):
    dx = px - means2d[i, 0]
    dy = py - means2d[i, 1]
    power = -0.5 * (conic[i, 0] * dx * dx + conic[i, 2] * dy * dy) - conic[i, 1] * dx * dy
    if power > 0.0 or power < cutoff_power:
        return 0.0, dx, dy, False, False
    a = opacity[i] * np.exp(power)
    clamped = False
    if alpha_max > 0.0 and a > alpha_max:
        a = alpha_max
        clamped = True
    return a, dx, dy, True, clamped


@numba.njit(cache=True)
def blend_forward(means2d, conic, opacity, feats, offsets, ids, width, height,
                  tile_size, nx, cutoff_power, alpha_max, min_t):
    n_ch = feats.shape[1]
    out = np.zeros((height, width, n_ch), feats.dtype)
    t_final = np.ones((height, width), feats.dtype)
    last = np.zeros((height, width), np.int64)
    n_contrib = np.zeros((height, width), np.int64)
    for py_i in range(height):
        ty = py_i // tile_size
        py = py_i + 0.5
        for px_i in range(width):
            tile = ty * nx + px_i // tile_size
            px = px_i + 0.5
            T = 1.0
            start, end = offsets[tile], offsets[tile + 1]
            stop = start
            cnt = 0
            for k in range(start, end):
                if T < min_t:
                    break
                i = ids[k]
                a, dx, dy, hit, clamped = _alpha(i, px, py, means2d, conic, opacity,
                                                 cutoff_power, alpha_max)
                stop = k + 1
                if not hit or a == 0.0:
                    continue
                w = a * T
                for c in range(n_ch):
                    out[py_i, px_i, c] += w * feats[i, c]
                T *= 1.0 - a
                cnt += 1
            t_final[py_i, px_i] = T
            last[py_i, px_i] = stop
            n_contrib[py_i, px_i] = cnt
    return out, t_final, last, n_contrib


@numba.njit(cache=True)
def blend_backward(means2d, conic, opacity, feats, offsets, ids, last, width, height,
                   tile_size, nx, cutoff_power, alpha_max, g_out, g_tfinal):
    n = means2d.shape[0]
    n_ch = feats.shape[1]
    d_means = np.zeros((n, 2), feats.dtype)
    d_conic = np.zeros((n, 3), feats.dtype)
    d_opac = np.zeros(n, feats.dtype)
    d_feats = np.zeros((n, n_ch), feats.dtype)
    max_len = 0
    for t in range(offsets.shape[0] - 1):
        max_len = max(max_len, offsets[t + 1] - offsets[t])
    alphas = np.empty(max_len, feats.dtype)
    trans = np.empty(max_len, feats.dtype)
    behind = np.zeros(n_ch, feats.dtype)
    for py_i in range(height):
        ty = py_i // tile_size
        py = py_i + 0.5
        for px_i in range(width):
            tile = ty * nx + px_i // tile_size
            px = px_i + 0.5
            start, stop = offsets[tile], last[py_i, px_i]
            # replay the forward walk to recover alpha_i and T_i
            T = 1.0
            for k in range(start, stop):
                a, dx, dy, hit, clamped = _alpha(ids[k], px, py, means2d, conic, opacity,
                                                 cutoff_power, alpha_max)
                alphas[k - start] = a
                trans[k - start] = T
                T *= 1.0 - a
            gt = g_tfinal[py_i, px_i]
            for c in range(n_ch):
                behind[c] = 0.0
            after = 1.0  # product of (1 - alpha) over contributors behind k
            for k in range(stop - 1, start - 1, -1):
                a = alphas[k - start]
                if a == 0.0:
                    continue
                i = ids[k]
                Ti = trans[k - start]
                g_alpha = 0.0
                for c in range(n_ch):
                    g = g_out[py_i, px_i, c]
                    d_feats[i, c] += a * Ti * g
                    g_alpha += (feats[i, c] - behind[c]) * Ti * g
                g_alpha -= Ti * after * gt
                for c in range(n_ch):
                    behind[c] = a * feats[i, c] + (1.0 - a) * behind[c]
                after *= 1.0 - a
                a2, dx, dy, hit, clamped = _alpha(i, px, py, means2d, conic, opacity,
                                                  cutoff_power, alpha_max)
                if clamped:
                    continue
                d_opac[i] += g_alpha * a / opacity[i] if opacity[i] != 0.0 else 0.0
                g_power = g_alpha * a
                d_means[i, 0] += g_power * (conic[i, 0] * dx + conic[i, 1] * dy)
                d_means[i, 1] += g_power * (conic[i, 2] * dy + conic[i, 1] * dx)
                d_conic[i, 0] += -0.5 * g_power * dx * dx
                d_conic[i, 1] += -g_power * dx * dy
                d_conic[i, 2] += -0.5 * g_power * dy * dy
    return d_means, d_conic, d_opac, d_feats
