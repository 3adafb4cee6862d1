"""Reverse-mode gradients of the splat renderer, plus a finite-difference oracle.

`backward` differentiates the full chain: compositing weights, projected mean
and covariance (including the projection Jacobian's dependence on the camera-
space position), the scale/rotation covariance factorization, and the depth
estimator. Depth-sort order and culling decisions are treated as constants.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import kernels
from .core import (
    LATENT_DIM,
    SL_COLOR,
    SL_LOG_SCALE,
    SL_MU,
    SL_OPACITY,
    SL_QUAT,
    CameraView,
    Gaussians,
    LatentGaussians,
    Scene,
    flatten_at_frame,
    from_latent,
    to_latent,
)
from .geom import quat_normalize, quat_rotation_partials, quat_to_matrix
from .raster import (
    DILATION,
    FRUSTUM_LIMIT,
    NEAR_PLANE,
    STOP_TRANSMITTANCE,
    TILE,
    _sorted_arrays,
    _tile_rects,
    project,
)


@dataclasses.dataclass
class GradientSet:
    """Per-gaussian partials of a scalar loss, aligned with the flattened list.

    Raw-space partials live in mu/scale/rot/opacity/color; `latent` carries the
    same partials chained into latent coordinates (one flat row per gaussian).
    Culled and zero-contribution gaussians hold exact zeros.
    """

    mu: np.ndarray  # (N, 3)
    scale: np.ndarray  # (N, 3)
    rot: np.ndarray  # (N, 4), tangential to the unit quaternion
    opacity: np.ndarray  # (N,)
    color: np.ndarray  # (N, 3)
    latent: np.ndarray  # (N, LATENT_DIM)

    @staticmethod
    def zeros(n: int) -> "GradientSet":
        return GradientSet(
            np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)), np.zeros(n), np.zeros((n, 3)),
            np.zeros((n, LATENT_DIM)),
        )

    def __len__(self) -> int:
        return self.mu.shape[0]

    def add(self, other: "GradientSet") -> "GradientSet":
        """Accumulate another view's gradients in place."""
        if len(other) != len(self):
            raise ValueError("gradient sets differ in length")
        for name in ("mu", "scale", "rot", "opacity", "color", "latent"):
            getattr(self, name).__iadd__(getattr(other, name))
        return self


def _conic_to_cov_chain(cov2d: np.ndarray, d_conic: np.ndarray) -> np.ndarray:
    """Chain gradients through the 2x2 symmetric inverse, packed as (a, b, c)."""
    a, b, c = cov2d[:, 0], cov2d[:, 1], cov2d[:, 2]
    det = a * c - b * b
    i2 = 1.0 / (det * det)
    d0, d1, d2 = d_conic[:, 0], d_conic[:, 1], d_conic[:, 2]
    da = (-c * c * d0 + b * c * d1 - b * b * d2) * i2
    db = (2 * b * c * d0 - (2 * b * b + det) * d1 + 2 * a * b * d2) * i2
    dc = (-b * b * d0 + a * b * d1 - a * a * d2) * i2
    return np.stack([da, db, dc], axis=1)


def backward_gaussians(
    gaussians: Gaussians,
    cam: CameraView,
    pixel_grad: np.ndarray,
    mode: str = "tiled",
    stop_threshold: float = STOP_TRANSMITTANCE,
    tile: int = TILE,
    near: float = NEAR_PLANE,
) -> GradientSet:
    """Gradients of sum(pixel_grad * render_output) for a world-frame list.

    pixel_grad is (H, W, 4): upstream loss gradient of the color channels and
    the depth map. Results add across pixels; call sites accumulate across
    views with GradientSet.add.
    """
    h, w = cam.height, cam.width
    if pixel_grad.shape != (h, w, 4):
        raise ValueError(f"pixel_grad shape {pixel_grad.shape} does not match camera ({h}, {w}, 4)")
    pixel_grad = np.ascontiguousarray(pixel_grad, dtype=np.float64)
    n = len(gaussians)
    out = GradientSet.zeros(n)
    proj = project(gaussians, cam, near=near)
    if len(proj) == 0:
        return out
    order, mu2d, conic, color, opacity, depth = _sorted_arrays(gaussians, proj)
    if mode == "tiled":
        tx0, tx1, ty0, ty1, ntx, nty = _tile_rects(mu2d, proj.radius[order], w, h, tile)
        d_mu2d_s, d_conic_s, d_color_s, d_opac_s, d_zc_s = kernels.backward_tiled(
            mu2d, conic, color, opacity, depth, tx0, tx1, ty0, ty1, pixel_grad,
            h, w, tile, ntx, nty, float(stop_threshold),
        )
    elif mode == "naive":
        d_mu2d_s, d_conic_s, d_color_s, d_opac_s, d_zc_s = kernels.backward_naive(
            mu2d, conic, color, opacity, depth, pixel_grad, h, w, float(stop_threshold)
        )
    else:
        raise ValueError(f"unknown render mode {mode!r}")

    # undo the depth sort: gradients per kept-projection row
    kept = len(proj)
    d_mu2d = np.zeros((kept, 2))
    d_conic = np.zeros((kept, 3))
    d_color = np.zeros((kept, 3))
    d_opac = np.zeros(kept)
    d_zc = np.zeros(kept)
    d_mu2d[order] = d_mu2d_s
    d_conic[order] = d_conic_s
    d_color[order] = d_color_s
    d_opac[order] = d_opac_s
    d_zc[order] = d_zc_s

    src = proj.indices
    g_mu, g_scale, g_rot = _projection_chain(gaussians, cam, src, d_mu2d, d_conic, d_zc)

    out.mu[src] = g_mu
    out.scale[src] = g_scale
    out.rot[src] = g_rot
    out.opacity[src] = d_opac
    out.color[src] = d_color

    # latent-space chain: log-scale, logits, and the (already tangential) quat
    out.latent[src, SL_MU] = g_mu
    out.latent[src, SL_LOG_SCALE] = g_scale * gaussians.scale[src]
    out.latent[src, SL_QUAT] = g_rot
    o = gaussians.opacity[src]
    out.latent[src, SL_OPACITY.start] = d_opac * o * (1.0 - o)
    c = gaussians.color[src]
    out.latent[src, SL_COLOR] = d_color * c * (1.0 - c)
    return out


def _projection_chain(gaussians, cam, src, d_mu2d, d_conic, d_zc):
    """Chain screen-space gradients back to world-space parameters (vectorized)."""
    R_cw, t_cw = cam.camera_from_world()
    mu = gaussians.mu[src]
    t = mu @ R_cw.T + t_cw
    X, Y, Z = t[:, 0], t[:, 1], t[:, 2]
    iz = 1.0 / Z
    iz2 = iz * iz

    q = gaussians.rot[src]
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    qh = q / norm
    R3 = quat_to_matrix(qh)
    scale = gaussians.scale[src]
    M3 = R3 * scale[:, None, :]
    sigma3 = M3 @ np.transpose(M3, (0, 2, 1))

    lim_x = FRUSTUM_LIMIT * 0.5 * cam.width / cam.fx
    lim_y = FRUSTUM_LIMIT * 0.5 * cam.height / cam.fy
    rx = X / Z
    ry = Y / Z
    clamped_x = np.abs(rx) > lim_x
    clamped_y = np.abs(ry) > lim_y
    tx = np.clip(rx, -lim_x, lim_x) * Z
    ty = np.clip(ry, -lim_y, lim_y) * Z

    J = np.zeros((len(src), 2, 3))
    J[:, 0, 0] = cam.fx * iz
    J[:, 0, 2] = -cam.fx * tx * iz2
    J[:, 1, 1] = cam.fy * iz
    J[:, 1, 2] = -cam.fy * ty * iz2
    M = J @ R_cw
    cov = M @ sigma3 @ np.transpose(M, (0, 2, 1))
    cov2d = np.stack([cov[:, 0, 0] + DILATION, cov[:, 0, 1], cov[:, 1, 1] + DILATION], axis=1)

    d_cov = _conic_to_cov_chain(cov2d, d_conic)
    dA, dB, dC = d_cov[:, 0], d_cov[:, 1], d_cov[:, 2]

    m0, m1 = M[:, 0, :], M[:, 1, :]
    g_sigma = (
        dA[:, None, None] * np.einsum("ni,nj->nij", m0, m0)
        + dB[:, None, None] * np.einsum("ni,nj->nij", m0, m1)
        + dC[:, None, None] * np.einsum("ni,nj->nij", m1, m1)
    )
    sm0 = np.einsum("nij,nj->ni", sigma3, m0)
    sm1 = np.einsum("nij,nj->ni", sigma3, m1)
    g_M = np.empty_like(M)
    g_M[:, 0, :] = 2.0 * dA[:, None] * sm0 + dB[:, None] * sm1
    g_M[:, 1, :] = dB[:, None] * sm0 + 2.0 * dC[:, None] * sm1

    g_J = np.einsum("nab,cb->nac", g_M, R_cw)
    fx, fy = cam.fx, cam.fy
    # the mean projection u = fx*X/Z + cx stays unclamped
    g_t = np.zeros((len(src), 3))
    g_t[:, 0] = d_mu2d[:, 0] * fx * iz
    g_t[:, 1] = d_mu2d[:, 1] * fy * iz
    g_t[:, 2] = -(d_mu2d[:, 0] * fx * X + d_mu2d[:, 1] * fy * Y) * iz2
    # the Jacobian is evaluated at the clamped point (tx, ty, Z)
    g_tx = g_J[:, 0, 2] * (-fx * iz2)
    g_ty = g_J[:, 1, 2] * (-fy * iz2)
    g_t[:, 0] += np.where(clamped_x, 0.0, g_tx)
    g_t[:, 1] += np.where(clamped_y, 0.0, g_ty)
    g_t[:, 2] += np.where(clamped_x, g_tx * np.sign(rx) * lim_x, 0.0)
    g_t[:, 2] += np.where(clamped_y, g_ty * np.sign(ry) * lim_y, 0.0)
    g_t[:, 2] += (
        g_J[:, 0, 0] * (-fx * iz2)
        + g_J[:, 0, 2] * (2.0 * fx * tx * iz2 * iz)
        + g_J[:, 1, 1] * (-fy * iz2)
        + g_J[:, 1, 2] * (2.0 * fy * ty * iz2 * iz)
    )
    g_t[:, 2] += d_zc
    g_mu = g_t @ R_cw

    g_M3 = np.einsum("nij,njk->nik", g_sigma + np.transpose(g_sigma, (0, 2, 1)), M3)
    g_scale = np.einsum("nij,nij->nj", g_M3, R3)
    g_R3 = g_M3 * scale[:, None, :]
    P = quat_rotation_partials(qh)
    g_qh = np.einsum("nqij,nij->nq", P, g_R3)
    # chain through normalization: (I - qh qh^T) / |q|
    g_rot = (g_qh - qh * np.einsum("ni,ni->n", qh, g_qh)[:, None]) / norm
    return g_mu, g_scale, g_rot


def backward(
    scene: Scene,
    cam: CameraView,
    pixel_grad: np.ndarray,
    **kwargs,
) -> GradientSet:
    """Scene-level backward: gradients for the flattened world-frame list."""
    return backward_gaussians(flatten_at_frame(scene, cam.frame_index), cam, pixel_grad, **kwargs)


def fd_oracle(
    source,
    cam: CameraView,
    loss_fn,
    epsilon: float = 1e-4,
    max_gaussians: int = 128,
) -> GradientSet:
    """Central-difference gradients in latent coordinates.

    `source` is a Scene (flattened at cam.frame_index) or a Gaussians list;
    loss_fn(gaussians, cam) -> float is evaluated 2 * N * 14 times, so this is
    restricted to small scenes. Raw-space fields are recovered through the
    inverse latent chain (the quaternion entry stays in its tangential form).
    """
    flat = flatten_at_frame(source, cam.frame_index) if isinstance(source, Scene) else source
    n = len(flat)
    if n > max_gaussians:
        raise ValueError(f"finite differences limited to {max_gaussians} gaussians, got {n}")
    base = to_latent(flat)
    grad = np.zeros((n, LATENT_DIM))
    for i in range(n):
        for j in range(LATENT_DIM):
            plus = base.copy()
            plus.data[i, j] += epsilon
            minus = base.copy()
            minus.data[i, j] -= epsilon
            lp = float(loss_fn(from_latent(plus), cam))
            lm = float(loss_fn(from_latent(minus), cam))
            grad[i, j] = (lp - lm) / (2.0 * epsilon)

    out = GradientSet.zeros(n)
    out.latent = grad
    out.mu = grad[:, SL_MU].copy()
    out.scale = grad[:, SL_LOG_SCALE] / flat.scale
    out.rot = grad[:, SL_QUAT].copy()
    o = flat.opacity
    out.opacity = grad[:, SL_OPACITY.start] / np.maximum(o * (1.0 - o), 1e-12)
    c = flat.color
    out.color = grad[:, SL_COLOR] / np.maximum(c * (1.0 - c), 1e-12)
    return out


def squared_error_loss(target: np.ndarray, depth_target: np.ndarray | None = None,
                       depth_mask: np.ndarray | None = None, mode: str = "naive"):
    """Loss factory: sum of squared pixel errors (color, optionally masked depth).

    Smooth everywhere, which makes it the loss of choice for gradient checks.
    Returns (loss_fn, grad_fn); grad_fn yields the (H, W, 4) pixel gradient.
    """
    from .raster import render_gaussians

    def _render(gaussians, cam):
        return render_gaussians(gaussians, cam, mode=mode, stop_threshold=0.0)

    def loss_fn(gaussians, cam):
        r = _render(gaussians, cam)
        val = np.sum((r.color - target) ** 2)
        if depth_target is not None:
            diff = (r.depth - depth_target) * depth_mask
            val += np.sum(diff**2)
        return float(val)

    def grad_fn(gaussians, cam):
        r = _render(gaussians, cam)
        pg = np.zeros(target.shape[:2] + (4,))
        pg[:, :, :3] = 2.0 * (r.color - target)
        if depth_target is not None:
            pg[:, :, 3] = 2.0 * (r.depth - depth_target) * depth_mask
        return pg

    return loss_fn, grad_fn
