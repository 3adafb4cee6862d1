"""Numba-jitted compositing kernels. Same contract as numpy_impl."""

from __future__ import annotations

import numpy as np
from numba import njit

ALPHA_CLAMP = 0.999
DEPTH_FLOOR = 1e-8


@njit(cache=True, nogil=True)
def _tile_lists(tx0, tx1, ty0, ty1, ntx, nty):
    k = tx0.shape[0]
    nt = ntx * nty
    counts = np.zeros(nt + 1, np.int64)
    for g in range(k):
        for ty in range(ty0[g], ty1[g]):
            base = ty * ntx
            for tx in range(tx0[g], tx1[g]):
                counts[base + tx + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    order = np.empty(offsets[-1], np.int64)
    for g in range(k):  # input is depth-sorted, so per-tile lists stay sorted
        for ty in range(ty0[g], ty1[g]):
            base = ty * ntx
            for tx in range(tx0[g], tx1[g]):
                t = base + tx
                order[fill[t]] = g
                fill[t] += 1
    return offsets, order


@njit(cache=True, nogil=True)
def forward_tiled(mu2d, conic, color, opacity, depth, tx0, tx1, ty0, ty1, h, w, tile, ntx, nty, stop_t):
    k = mu2d.shape[0]
    img = np.zeros((h, w, 3))
    dnum = np.zeros((h, w))
    asum = np.zeros((h, w))
    contrib = np.zeros(k)
    offsets, order = _tile_lists(tx0, tx1, ty0, ty1, ntx, nty)
    for ty in range(nty):
        y0 = ty * tile
        y1 = min(y0 + tile, h)
        for tx in range(ntx):
            t = ty * ntx + tx
            s, e = offsets[t], offsets[t + 1]
            if s == e:
                continue
            x0 = tx * tile
            x1 = min(x0 + tile, w)
            for py in range(y0, y1):
                fy = float(py)
                for px in range(x0, x1):
                    fx = float(px)
                    trans = 1.0
                    cr = 0.0
                    cg = 0.0
                    cb = 0.0
                    dn = 0.0
                    al = 0.0
                    for i in range(s, e):
                        if stop_t > 0.0 and trans < stop_t:
                            break
                        g = order[i]
                        dx = fx - mu2d[g, 0]
                        dy = fy - mu2d[g, 1]
                        p = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
                        a = opacity[g] * np.exp(p)
                        if a > ALPHA_CLAMP:
                            a = ALPHA_CLAMP
                        wgt = a * trans
                        cr += wgt * color[g, 0]
                        cg += wgt * color[g, 1]
                        cb += wgt * color[g, 2]
                        dn += wgt * depth[g]
                        al += wgt
                        contrib[g] += wgt
                        trans *= 1.0 - a
                    img[py, px, 0] = cr
                    img[py, px, 1] = cg
                    img[py, px, 2] = cb
                    dnum[py, px] = dn
                    asum[py, px] = al
    return img, dnum, asum, contrib


@njit(cache=True, nogil=True)
def forward_naive(mu2d, conic, color, opacity, depth, h, w, stop_t):
    k = mu2d.shape[0]
    img = np.zeros((h, w, 3))
    dnum = np.zeros((h, w))
    asum = np.zeros((h, w))
    contrib = np.zeros(k)
    for py in range(h):
        fy = float(py)
        for px in range(w):
            fx = float(px)
            trans = 1.0
            cr = 0.0
            cg = 0.0
            cb = 0.0
            dn = 0.0
            al = 0.0
            for g in range(k):
                if stop_t > 0.0 and trans < stop_t:
                    break
                dx = fx - mu2d[g, 0]
                dy = fy - mu2d[g, 1]
                p = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
                a = opacity[g] * np.exp(p)
                if a > ALPHA_CLAMP:
                    a = ALPHA_CLAMP
                wgt = a * trans
                cr += wgt * color[g, 0]
                cg += wgt * color[g, 1]
                cb += wgt * color[g, 2]
                dn += wgt * depth[g]
                al += wgt
                contrib[g] += wgt
                trans *= 1.0 - a
            img[py, px, 0] = cr
            img[py, px, 1] = cg
            img[py, px, 2] = cb
            dnum[py, px] = dn
            asum[py, px] = al
    return img, dnum, asum, contrib


@njit(cache=True, nogil=True)
def _backward_pixel(
    mu2d, conic, color, opacity, depth, order, s, e, fy, fx, gr, gg, gb, gd, stop_t, abuf, gbuf,
    d_mu2d, d_conic, d_color, d_opac, d_zc,
):
    # forward sweep: record alphas, find the stop index and the depth totals
    trans = 1.0
    al = 0.0
    dn = 0.0
    last = -1
    for i in range(s, e):
        if stop_t > 0.0 and trans < stop_t:
            break
        g = order[i]
        dx = fx - mu2d[g, 0]
        dy = fy - mu2d[g, 1]
        p = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
        gauss = np.exp(p)
        a = opacity[g] * gauss
        if a > ALPHA_CLAMP:
            a = ALPHA_CLAMP
        abuf[i - s] = a
        gbuf[i - s] = gauss
        wgt = a * trans
        al += wgt
        dn += wgt * depth[g]
        trans *= 1.0 - a
        last = i

    denom = al if al > DEPTH_FLOOR else DEPTH_FLOOR
    gdn = gd / denom
    gas = -gd * dn / (denom * denom) if al > DEPTH_FLOOR else 0.0

    # reverse sweep: recover per-fragment transmittance and suffix sums
    sc0 = 0.0
    sc1 = 0.0
    sc2 = 0.0
    sz = 0.0
    sw = 0.0
    tr = trans
    for i in range(last, s - 1, -1):
        j = i - s
        a = abuf[j]
        g = order[i]
        om = 1.0 - a
        tbefore = tr / om
        wgt = a * tbefore
        da = (
            gr * (tbefore * color[g, 0] - sc0 / om)
            + gg * (tbefore * color[g, 1] - sc1 / om)
            + gb * (tbefore * color[g, 2] - sc2 / om)
            + gdn * (tbefore * depth[g] - sz / om)
            + gas * (tbefore - sw / om)
        )
        d_color[g, 0] += gr * wgt
        d_color[g, 1] += gg * wgt
        d_color[g, 2] += gb * wgt
        d_zc[g] += gdn * wgt
        if a < ALPHA_CLAMP:  # the clamp freezes alpha gradients
            d_opac[g] += da * gbuf[j]
            dp = da * a
            dx = fx - mu2d[g, 0]
            dy = fy - mu2d[g, 1]
            d_mu2d[g, 0] += dp * (conic[g, 0] * dx + conic[g, 1] * dy)
            d_mu2d[g, 1] += dp * (conic[g, 1] * dx + conic[g, 2] * dy)
            d_conic[g, 0] += dp * (-0.5 * dx * dx)
            d_conic[g, 1] += dp * (-dx * dy)
            d_conic[g, 2] += dp * (-0.5 * dy * dy)
        sc0 += wgt * color[g, 0]
        sc1 += wgt * color[g, 1]
        sc2 += wgt * color[g, 2]
        sz += wgt * depth[g]
        sw += wgt
        tr = tbefore


@njit(cache=True, nogil=True)
def backward_tiled(
    mu2d, conic, color, opacity, depth, tx0, tx1, ty0, ty1, pixel_grad, h, w, tile, ntx, nty, stop_t
):
    k = mu2d.shape[0]
    d_mu2d = np.zeros((k, 2))
    d_conic = np.zeros((k, 3))
    d_color = np.zeros((k, 3))
    d_opac = np.zeros(k)
    d_zc = np.zeros(k)
    offsets, order = _tile_lists(tx0, tx1, ty0, ty1, ntx, nty)
    nmax = 0
    for t in range(ntx * nty):
        n = offsets[t + 1] - offsets[t]
        if n > nmax:
            nmax = n
    abuf = np.empty(nmax, np.float64)
    gbuf = np.empty(nmax, np.float64)
    for ty in range(nty):
        y0 = ty * tile
        y1 = min(y0 + tile, h)
        for tx in range(ntx):
            t = ty * ntx + tx
            s, e = offsets[t], offsets[t + 1]
            if s == e:
                continue
            x0 = tx * tile
            x1 = min(x0 + tile, w)
            for py in range(y0, y1):
                for px in range(x0, x1):
                    gr = pixel_grad[py, px, 0]
                    gg = pixel_grad[py, px, 1]
                    gb = pixel_grad[py, px, 2]
                    gd = pixel_grad[py, px, 3]
                    if gr == 0.0 and gg == 0.0 and gb == 0.0 and gd == 0.0:
                        continue
                    _backward_pixel(
                        mu2d, conic, color, opacity, depth, order, s, e,
                        float(py), float(px), gr, gg, gb, gd, stop_t, abuf, gbuf,
                        d_mu2d, d_conic, d_color, d_opac, d_zc,
                    )
    return d_mu2d, d_conic, d_color, d_opac, d_zc


@njit(cache=True, nogil=True)
def backward_naive(mu2d, conic, color, opacity, depth, pixel_grad, h, w, stop_t):
    k = mu2d.shape[0]
    d_mu2d = np.zeros((k, 2))
    d_conic = np.zeros((k, 3))
    d_color = np.zeros((k, 3))
    d_opac = np.zeros(k)
    d_zc = np.zeros(k)
    order = np.arange(k)
    abuf = np.empty(k, np.float64)
    gbuf = np.empty(k, np.float64)
    for py in range(h):
        for px in range(w):
            gr = pixel_grad[py, px, 0]
            gg = pixel_grad[py, px, 1]
            gb = pixel_grad[py, px, 2]
            gd = pixel_grad[py, px, 3]
            if gr == 0.0 and gg == 0.0 and gb == 0.0 and gd == 0.0:
                continue
            _backward_pixel(
                mu2d, conic, color, opacity, depth, order, 0, k,
                float(py), float(px), gr, gg, gb, gd, stop_t, abuf, gbuf,
                d_mu2d, d_conic, d_color, d_opac, d_zc,
            )
    return d_mu2d, d_conic, d_color, d_opac, d_zc
