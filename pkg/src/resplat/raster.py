"""Forward splat renderer: projection, depth sort, front-to-back compositing.

Per pixel p the renderer evaluates
    alpha_i = opacity_i * exp(-0.5 (p - mu2d_i)^T cov2d_i^{-1} (p - mu2d_i))
over depth-sorted fragments and accumulates color with weights
    w_i = alpha_i * prod_{j<i} (1 - alpha_j).
Accumulated alpha is exactly the sum of weights; the depth map is the
weight-averaged fragment depth. Background is black with a separate alpha
channel; compositing over other backgrounds is a post-step.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import kernels
from .core import CameraView, Gaussians, PointCloud, Scene, flatten_at_frame
from .geom import IDENTITY_QUAT, quat_normalize, quat_to_matrix

NEAR_PLANE = 0.2  # meters
DILATION = 0.3  # px^2 added to the projected covariance diagonal
TILE = 16
CULL_SIGMA = 3.0  # off-screen cull uses the 3-sigma footprint
SUPPORT_SIGMA = 6.0  # tile assignment radius; tails beyond are < 1.6e-8
STOP_TRANSMITTANCE = 1e-4
FRUSTUM_LIMIT = 1.3  # clamp for the covariance Jacobian evaluation point


def _clamped_xy(X, Y, Z, cam):
    """Evaluation point for the projection Jacobian, clamped to the frustum cone.

    Splats far outside the view cone at grazing depth would otherwise produce
    unbounded screen-space covariances. The projected mean itself stays exact.
    """
    lim_x = FRUSTUM_LIMIT * 0.5 * cam.width / cam.fx
    lim_y = FRUSTUM_LIMIT * 0.5 * cam.height / cam.fy
    tx = np.clip(X / Z, -lim_x, lim_x) * Z
    ty = np.clip(Y / Z, -lim_y, lim_y) * Z
    return tx, ty


@dataclasses.dataclass
class ProjectedGaussians:
    """Screen-space footprints of the kept (non-culled) splats, unsorted."""

    indices: np.ndarray  # (K,) source indices into the input list
    mu2d: np.ndarray  # (K, 2) pixel coordinates
    cov2d: np.ndarray  # (K, 3) upper-triangular (a, b, c) after dilation
    conic: np.ndarray  # (K, 3) inverse covariance, same packing
    depth: np.ndarray  # (K,) camera-space z
    radius: np.ndarray  # (K,) 3-sigma screen radius
    count_in: int  # size of the input list

    def __len__(self) -> int:
        return self.indices.shape[0]


@dataclasses.dataclass
class RenderOutput:
    color: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W) expected depth, meters
    alpha: np.ndarray  # (H, W) accumulated opacity
    contrib: np.ndarray  # (N,) total contribution weight per input gaussian


def project(gaussians: Gaussians, cam: CameraView, near: float = NEAR_PLANE) -> ProjectedGaussians:
    """EWA projection of a gaussian list.

    Culls splats behind the near plane and splats whose 3-sigma footprint lies
    entirely off screen; culling is a normal outcome, not an error.
    """
    cam.validate()
    R_cw, t_cw = cam.camera_from_world()
    n = len(gaussians)
    if n == 0:
        return ProjectedGaussians(
            np.zeros(0, np.int64), np.zeros((0, 2)), np.zeros((0, 3)), np.zeros((0, 3)),
            np.zeros(0), np.zeros(0), 0,
        )
    t = gaussians.mu @ R_cw.T + t_cw
    z = t[:, 2]
    keep = z > near
    idx = np.where(keep)[0]
    t = t[idx]
    z = z[idx]
    X, Y = t[:, 0], t[:, 1]

    u = cam.fx * X / z + cam.cx
    v = cam.fy * Y / z + cam.cy
    mu2d = np.stack([u, v], axis=1)

    rot = quat_normalize(gaussians.rot[idx])
    R3 = quat_to_matrix(rot)
    M3 = R3 * gaussians.scale[idx][:, None, :]
    sigma3 = M3 @ np.transpose(M3, (0, 2, 1))

    iz = 1.0 / z
    iz2 = iz * iz
    tx, ty = _clamped_xy(X, Y, z, cam)
    J = np.zeros((len(idx), 2, 3))
    J[:, 0, 0] = cam.fx * iz
    J[:, 0, 2] = -cam.fx * tx * iz2
    J[:, 1, 1] = cam.fy * iz
    J[:, 1, 2] = -cam.fy * ty * iz2
    M = J @ R_cw
    cov = M @ sigma3 @ np.transpose(M, (0, 2, 1))
    a = cov[:, 0, 0] + DILATION
    b = cov[:, 0, 1]
    c = cov[:, 1, 1] + DILATION
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    cov2d = np.stack([a, b, c], axis=1)

    mid = 0.5 * (a + c)
    lmax = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = CULL_SIGMA * np.sqrt(lmax)

    on = (
        (u + radius >= -0.5)
        & (u - radius <= cam.width - 0.5)
        & (v + radius >= -0.5)
        & (v - radius <= cam.height - 0.5)
    )
    sel = np.where(on)[0]
    return ProjectedGaussians(
        idx[sel], mu2d[sel], cov2d[sel], conic[sel], z[sel], radius[sel], n,
    )


def _sorted_arrays(g: Gaussians, proj: ProjectedGaussians):
    order = np.argsort(proj.depth, kind="stable")  # ties break by source index
    src = proj.indices[order]
    return (
        order,
        np.ascontiguousarray(proj.mu2d[order]),
        np.ascontiguousarray(proj.conic[order]),
        np.ascontiguousarray(g.color[src]),
        np.ascontiguousarray(g.opacity[src]),
        np.ascontiguousarray(proj.depth[order]),
    )


def _tile_rects(proj_sorted_mu2d, radius_sorted, width, height, tile):
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    rs = radius_sorted * (SUPPORT_SIGMA / CULL_SIGMA)
    u, v = proj_sorted_mu2d[:, 0], proj_sorted_mu2d[:, 1]
    tx0 = np.clip(np.floor((u - rs) / tile), 0, ntx).astype(np.int64)
    tx1 = np.clip(np.floor((u + rs) / tile) + 1, 0, ntx).astype(np.int64)
    ty0 = np.clip(np.floor((v - rs) / tile), 0, nty).astype(np.int64)
    ty1 = np.clip(np.floor((v + rs) / tile) + 1, 0, nty).astype(np.int64)
    return tx0, tx1, ty0, ty1, ntx, nty


def render_gaussians(
    gaussians: Gaussians,
    cam: CameraView,
    mode: str = "tiled",
    stop_threshold: float = STOP_TRANSMITTANCE,
    tile: int = TILE,
    near: float = NEAR_PLANE,
) -> RenderOutput:
    """Render a world-frame gaussian list; zero splats give a valid black image."""
    if mode not in ("tiled", "naive"):
        raise ValueError(f"unknown render mode {mode!r}")
    h, w = cam.height, cam.width
    proj = project(gaussians, cam, near=near)
    contrib_full = np.zeros(len(gaussians))
    if len(proj) == 0:
        return RenderOutput(np.zeros((h, w, 3)), np.zeros((h, w)), np.zeros((h, w)), contrib_full)
    order, mu2d, conic, color, opacity, depth = _sorted_arrays(gaussians, proj)
    if mode == "tiled":
        tx0, tx1, ty0, ty1, ntx, nty = _tile_rects(mu2d, proj.radius[order], w, h, tile)
        img, dnum, asum, contrib = kernels.forward_tiled(
            mu2d, conic, color, opacity, depth, tx0, tx1, ty0, ty1, h, w, tile, ntx, nty,
            float(stop_threshold),
        )
    else:
        img, dnum, asum, contrib = kernels.forward_naive(
            mu2d, conic, color, opacity, depth, h, w, float(stop_threshold)
        )
    contrib_full[proj.indices[order]] = contrib
    depth_map = dnum / np.maximum(asum, 1e-8)
    return RenderOutput(img, depth_map, asum, contrib_full)


def render(scene: Scene, cam: CameraView, **kwargs) -> RenderOutput:
    """Render a scene at the camera's frame index."""
    return render_gaussians(flatten_at_frame(scene, cam.frame_index), cam, **kwargs)


def render_reference(scene_or_gaussians, cam: CameraView, **kwargs) -> RenderOutput:
    """Naive per-pixel full-sort renderer; the permanent oracle path."""
    kwargs = dict(kwargs, mode="naive")
    if isinstance(scene_or_gaussians, Scene):
        return render(scene_or_gaussians, cam, **kwargs)
    return render_gaussians(scene_or_gaussians, cam, **kwargs)


def points_as_gaussians(points: PointCloud, point_sigma: float) -> Gaussians:
    n = len(points)
    return Gaussians(
        points.positions,
        np.full((n, 3), float(point_sigma)),
        np.tile(IDENTITY_QUAT, (n, 1)),
        np.ones(n),
        points.colors,
    )


def render_points(points: PointCloud, cam: CameraView, point_sigma: float, **kwargs) -> RenderOutput:
    """Splat colored points as opaque isotropic gaussians (the point-map render)."""
    if len(points) == 0:
        h, w = cam.height, cam.width
        return RenderOutput(np.zeros((h, w, 3)), np.zeros((h, w)), np.zeros((h, w)), np.zeros(0))
    return render_gaussians(points_as_gaussians(points, point_sigma), cam, **kwargs)
