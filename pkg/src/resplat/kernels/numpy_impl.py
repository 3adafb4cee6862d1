"""Vectorized numpy compositing kernels; the readable reference semantics.

All arrays are float64 and C-contiguous. Gaussian inputs are compact (culled
splats removed) and pre-sorted front to back; outputs are indexed the same way.
"""

from __future__ import annotations

import numpy as np

ALPHA_CLAMP = 0.999
DEPTH_FLOOR = 1e-8


def _tile_rows(y0, y1, x0, x1):
    ys, xs = np.mgrid[y0:y1, x0:x1]
    return ys.ravel().astype(np.float64), xs.ravel().astype(np.float64)


def _fragment_alphas(mu2d, conic, opacity, sel, fy, fx):
    """Alpha matrix (fragments x pixels) for the selected gaussians."""
    dx = fx[None, :] - mu2d[sel, 0][:, None]
    dy = fy[None, :] - mu2d[sel, 1][:, None]
    power = (
        -0.5 * (conic[sel, 0][:, None] * dx * dx + conic[sel, 2][:, None] * dy * dy)
        - conic[sel, 1][:, None] * dx * dy
    )
    g = np.exp(power)
    a = np.minimum(opacity[sel][:, None] * g, ALPHA_CLAMP)
    return a, g, dx, dy


def _prev_transmittance(a, stop_t):
    """Exclusive running product of (1 - alpha) plus the inclusion mask."""
    tprev = np.cumprod(1.0 - a, axis=0)
    tprev = np.vstack([np.ones((1, a.shape[1])), tprev[:-1]])
    if stop_t > 0.0:
        include = tprev >= stop_t
    else:
        include = np.ones_like(tprev, dtype=bool)
    return tprev, include


def _composite(mu2d, conic, color, opacity, depth, sel, fy, fx, stop_t):
    a, _, _, _ = _fragment_alphas(mu2d, conic, opacity, sel, fy, fx)
    tprev, include = _prev_transmittance(a, stop_t)
    w = a * tprev * include
    img = np.einsum("fp,fc->pc", w, color[sel])
    dnum = np.einsum("fp,f->p", w, depth[sel])
    asum = w.sum(axis=0)
    return img, dnum, asum, w.sum(axis=1)


def forward_naive(mu2d, conic, color, opacity, depth, h, w, stop_t):
    """Composite every gaussian at every pixel, row block at a time."""
    k = mu2d.shape[0]
    img = np.zeros((h, w, 3))
    dnum = np.zeros((h, w))
    asum = np.zeros((h, w))
    contrib = np.zeros(k)
    if k == 0:
        return img, dnum, asum, contrib
    sel = np.arange(k)
    for y0 in range(0, h, 16):
        y1 = min(y0 + 16, h)
        fy, fx = _tile_rows(y0, y1, 0, w)
        pimg, pd, pa, pc = _composite(mu2d, conic, color, opacity, depth, sel, fy, fx, stop_t)
        img[y0:y1] = pimg.reshape(y1 - y0, w, 3)
        dnum[y0:y1] = pd.reshape(y1 - y0, w)
        asum[y0:y1] = pa.reshape(y1 - y0, w)
        contrib += pc
    return img, dnum, asum, contrib


def forward_tiled(mu2d, conic, color, opacity, depth, tx0, tx1, ty0, ty1, h, w, tile, ntx, nty, stop_t):
    k = mu2d.shape[0]
    img = np.zeros((h, w, 3))
    dnum = np.zeros((h, w))
    asum = np.zeros((h, w))
    contrib = np.zeros(k)
    if k == 0:
        return img, dnum, asum, contrib
    for ty in range(nty):
        for tx in range(ntx):
            sel = np.where((tx0 <= tx) & (tx < tx1) & (ty0 <= ty) & (ty < ty1))[0]
            if sel.size == 0:
                continue
            y0, y1 = ty * tile, min((ty + 1) * tile, h)
            x0, x1 = tx * tile, min((tx + 1) * tile, w)
            fy, fx = _tile_rows(y0, y1, x0, x1)
            pimg, pd, pa, pc = _composite(mu2d, conic, color, opacity, depth, sel, fy, fx, stop_t)
            img[y0:y1, x0:x1] = pimg.reshape(y1 - y0, x1 - x0, 3)
            dnum[y0:y1, x0:x1] = pd.reshape(y1 - y0, x1 - x0)
            asum[y0:y1, x0:x1] = pa.reshape(y1 - y0, x1 - x0)
            contrib[sel] += pc
    return img, dnum, asum, contrib


def _backward_block(mu2d, conic, color, opacity, depth, sel, fy, fx, pg, stop_t, out):
    """Accumulate screen-space gradients for one pixel block.

    pg is (pixels, 4): color gradient then depth-map gradient. Follows the
    reverse of the compositing recurrence; suffix sums realize the dependence
    of later weights on earlier alphas.
    """
    d_mu2d, d_conic, d_color, d_opac, d_zc = out
    a, g, dx, dy = _fragment_alphas(mu2d, conic, opacity, sel, fy, fx)
    tprev, include = _prev_transmittance(a, stop_t)
    w = a * tprev * include

    asum = w.sum(axis=0)
    dnum = np.einsum("fp,f->p", w, depth[sel])
    denom = np.maximum(asum, DEPTH_FLOOR)
    gC = pg[:, 0:3]
    gdn = pg[:, 3] / denom
    gas = np.where(asum > DEPTH_FLOOR, -pg[:, 3] * dnum / (denom * denom), 0.0)

    wc = w[:, :, None] * color[sel][:, None, :]  # (F, P, 3)
    wz = w * depth[sel][:, None]
    csum = np.cumsum(wc, axis=0)
    zsum = np.cumsum(wz, axis=0)
    wsum = np.cumsum(w, axis=0)
    s_c = csum[-1][None] - csum  # suffix sums, exclusive of the fragment itself
    s_z = zsum[-1][None] - zsum
    s_w = wsum[-1][None] - wsum

    om = 1.0 - a
    da = (
        np.einsum("pc,fpc->fp", gC, tprev[:, :, None] * color[sel][:, None, :] - s_c / om[:, :, None])
        + gdn[None, :] * (tprev * depth[sel][:, None] - s_z / om)
        + gas[None, :] * (tprev - s_w / om)
    )
    live = include & (a < ALPHA_CLAMP)  # the clamp freezes alpha gradients
    da = da * live
    dp = da * a

    d_color[sel] += np.einsum("fp,pc->fc", w, gC)
    d_zc[sel] += w @ gdn
    d_opac[sel] += (da * g).sum(axis=1)
    d_mu2d[sel, 0] += (dp * (conic[sel, 0][:, None] * dx + conic[sel, 1][:, None] * dy)).sum(axis=1)
    d_mu2d[sel, 1] += (dp * (conic[sel, 1][:, None] * dx + conic[sel, 2][:, None] * dy)).sum(axis=1)
    d_conic[sel, 0] += (dp * (-0.5 * dx * dx)).sum(axis=1)
    d_conic[sel, 1] += (dp * (-dx * dy)).sum(axis=1)
    d_conic[sel, 2] += (dp * (-0.5 * dy * dy)).sum(axis=1)


def _zero_grads(k):
    return (np.zeros((k, 2)), np.zeros((k, 3)), np.zeros((k, 3)), np.zeros(k), np.zeros(k))


def backward_naive(mu2d, conic, color, opacity, depth, pixel_grad, h, w, stop_t):
    k = mu2d.shape[0]
    out = _zero_grads(k)
    if k == 0:
        return out
    sel = np.arange(k)
    for y0 in range(0, h, 16):
        y1 = min(y0 + 16, h)
        fy, fx = _tile_rows(y0, y1, 0, w)
        pg = pixel_grad[y0:y1].reshape(-1, 4)
        if not pg.any():
            continue
        _backward_block(mu2d, conic, color, opacity, depth, sel, fy, fx, pg, stop_t, out)
    return out


def backward_tiled(
    mu2d, conic, color, opacity, depth, tx0, tx1, ty0, ty1, pixel_grad, h, w, tile, ntx, nty, stop_t
):
    k = mu2d.shape[0]
    out = _zero_grads(k)
    if k == 0:
        return out
    for ty in range(nty):
        for tx in range(ntx):
            sel = np.where((tx0 <= tx) & (tx < tx1) & (ty0 <= ty) & (ty < ty1))[0]
            if sel.size == 0:
                continue
            y0, y1 = ty * tile, min((ty + 1) * tile, h)
            x0, x1 = tx * tile, min((tx + 1) * tile, w)
            pg = pixel_grad[y0:y1, x0:x1].reshape(-1, 4)
            if not pg.any():
                continue
            fy, fx = _tile_rows(y0, y1, x0, x1)
            _backward_block(mu2d, conic, color, opacity, depth, sel, fy, fx, pg, stop_t, out)
    return out
