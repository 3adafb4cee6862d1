"""Scene containers: Gaussian sets, cameras, actors, and latent coordinates.

Scenes are value-semantic and immutable during rendering and gradient passes;
the enhancer mutates only between iterations, always by rebuilding from latent
coordinates so range invariants cannot be violated.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from scipy.special import expit

from . import geom

QUAT_NORM_TOL = 1e-6
POSE_ORTHO_TOL = 1e-6
BOX_MARGIN = 1.10  # actor gaussians may exceed their box by 10% per axis
LOGIT_CLIP = 1e-7  # saturation guard when mapping opacity/color to logits
LOG_SCALE_MAX = 60.0  # keeps exp() finite for any finite latent input

# Flat latent layout per gaussian:
#   [mu(3) | log_scale(3) | quat(4) | opacity_logit(1) | color_logit(3)]
LATENT_DIM = 14
SL_MU = slice(0, 3)
SL_LOG_SCALE = slice(3, 6)
SL_QUAT = slice(6, 10)
SL_OPACITY = slice(10, 11)
SL_COLOR = slice(11, 14)


class SceneError(ValueError):
    """Invalid scene construction or use."""


class MissingPoseError(SceneError):
    """An actor track does not cover the requested frame."""


def _as_f64(a, shape_tail) -> np.ndarray:
    out = np.ascontiguousarray(np.asarray(a, dtype=np.float64))
    if shape_tail == ():
        return out.reshape(-1)
    return out.reshape((-1,) + shape_tail)


@dataclasses.dataclass
class Gaussians:
    """A set of anisotropic splats (struct of arrays, float64, w-first quaternions)."""

    mu: np.ndarray  # (N, 3) positions, meters
    scale: np.ndarray  # (N, 3) per-axis extents, strictly positive
    rot: np.ndarray  # (N, 4) unit quaternions
    opacity: np.ndarray  # (N,) in [0, 1]
    color: np.ndarray  # (N, 3) rgb in [0, 1]

    def __post_init__(self):
        self.mu = _as_f64(self.mu, (3,))
        self.scale = _as_f64(self.scale, (3,))
        self.rot = _as_f64(self.rot, (4,))
        self.opacity = _as_f64(self.opacity, ())
        self.color = _as_f64(self.color, (3,))
        n = len(self.mu)
        for name in ("scale", "rot", "opacity", "color"):
            if len(getattr(self, name)) != n:
                raise SceneError(f"field '{name}' has {len(getattr(self, name))} rows, expected {n}")

    def __len__(self) -> int:
        return self.mu.shape[0]

    @staticmethod
    def empty() -> "Gaussians":
        return Gaussians(
            np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3))
        )

    @staticmethod
    def concat(parts: list["Gaussians"]) -> "Gaussians":
        parts = [p for p in parts]
        if not parts:
            return Gaussians.empty()
        return Gaussians(
            np.concatenate([p.mu for p in parts]),
            np.concatenate([p.scale for p in parts]),
            np.concatenate([p.rot for p in parts]),
            np.concatenate([p.opacity for p in parts]),
            np.concatenate([p.color for p in parts]),
        )

    def take(self, idx) -> "Gaussians":
        return Gaussians(self.mu[idx], self.scale[idx], self.rot[idx], self.opacity[idx], self.color[idx])

    def copy(self) -> "Gaussians":
        return Gaussians(
            self.mu.copy(), self.scale.copy(), self.rot.copy(), self.opacity.copy(), self.color.copy()
        )

    def allclose(self, other: "Gaussians", tol: float = 0.0) -> bool:
        if len(self) != len(other):
            return False
        for name in ("mu", "scale", "rot", "opacity", "color"):
            a, b = getattr(self, name), getattr(other, name)
            if tol == 0.0:
                if not np.array_equal(a, b):
                    return False
            elif not np.allclose(a, b, rtol=0, atol=tol):
                return False
        return True

    def validate(self, label: str = "gaussians") -> None:
        """Raise SceneError naming the first offending index and field."""
        for name in ("mu", "scale", "rot", "opacity", "color"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)):
                i = int(np.argwhere(~np.isfinite(arr))[0][0])
                raise SceneError(f"{label}: non-finite '{name}' at gaussian index {i}")
        bad = np.abs(np.linalg.norm(self.rot, axis=1) - 1.0) > QUAT_NORM_TOL
        if np.any(bad):
            raise SceneError(f"{label}: quaternion not unit at gaussian index {int(np.argmax(bad))}")
        bad = ~np.all(self.scale > 0.0, axis=1)
        if np.any(bad):
            raise SceneError(f"{label}: non-positive scale at gaussian index {int(np.argmax(bad))}")
        bad = (self.opacity < 0.0) | (self.opacity > 1.0)
        if np.any(bad):
            raise SceneError(f"{label}: opacity outside [0,1] at gaussian index {int(np.argmax(bad))}")
        bad = ~np.all((self.color >= 0.0) & (self.color <= 1.0), axis=1)
        if np.any(bad):
            raise SceneError(f"{label}: color outside [0,1] at gaussian index {int(np.argmax(bad))}")


@dataclasses.dataclass
class PointCloud:
    """Colored points, optionally stamped with the capture frame index."""

    positions: np.ndarray  # (N, 3)
    colors: np.ndarray  # (N, 3) rgb in [0, 1]
    frames: np.ndarray | None = None  # (N,) int64

    def __post_init__(self):
        self.positions = _as_f64(self.positions, (3,))
        self.colors = _as_f64(self.colors, (3,))
        if len(self.colors) != len(self.positions):
            raise SceneError("point colors and positions disagree in length")
        if self.frames is not None:
            self.frames = np.ascontiguousarray(np.asarray(self.frames, dtype=np.int64)).reshape(-1)
            if len(self.frames) != len(self.positions):
                raise SceneError("point frames and positions disagree in length")

    def __len__(self) -> int:
        return self.positions.shape[0]

    def take(self, idx) -> "PointCloud":
        return PointCloud(
            self.positions[idx],
            self.colors[idx],
            None if self.frames is None else self.frames[idx],
        )


@dataclasses.dataclass
class CameraView:
    """Pinhole camera: intrinsics in pixels plus a rigid world-from-camera pose.

    Camera axes follow the usual convention: x right, y down, z forward.
    Pixel (row i, col j) samples the image plane at coordinates (u=j, v=i).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # (3, 3) world-from-camera
    translation: np.ndarray  # (3,) camera center in world coordinates
    frame_index: int = 0

    def __post_init__(self):
        self.rotation = np.ascontiguousarray(np.asarray(self.rotation, dtype=np.float64)).reshape(3, 3)
        self.translation = np.ascontiguousarray(np.asarray(self.translation, dtype=np.float64)).reshape(3)
        self.width = int(self.width)
        self.height = int(self.height)
        self.frame_index = int(self.frame_index)

    def validate(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise SceneError("focal lengths must be positive")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > POSE_ORTHO_TOL:
            raise SceneError(f"camera rotation not orthonormal (max deviation {err:.2e})")

    @property
    def center(self) -> np.ndarray:
        return self.translation

    @property
    def right_axis(self) -> np.ndarray:
        return self.rotation[:, 0]

    @property
    def forward_axis(self) -> np.ndarray:
        return self.rotation[:, 2]

    def camera_from_world(self) -> tuple[np.ndarray, np.ndarray]:
        R_cw = self.rotation.T
        return R_cw, -R_cw @ self.translation

    def with_pose(self, rotation: np.ndarray, translation: np.ndarray, frame_index: int | None = None):
        return dataclasses.replace(
            self,
            rotation=np.asarray(rotation, dtype=np.float64),
            translation=np.asarray(translation, dtype=np.float64),
            frame_index=self.frame_index if frame_index is None else int(frame_index),
        )


@dataclasses.dataclass
class ActorTrack:
    """Box size plus per-frame rigid pose (actor-to-world) of a tracked actor."""

    actor_id: int
    half_extents: np.ndarray  # (3,)
    frame_start: int
    rotations: np.ndarray  # (F, 4) unit quaternions
    translations: np.ndarray  # (F, 3)

    def __post_init__(self):
        self.actor_id = int(self.actor_id)
        self.half_extents = _as_f64(self.half_extents, ()).reshape(3)
        self.frame_start = int(self.frame_start)
        self.rotations = _as_f64(self.rotations, (4,))
        self.translations = _as_f64(self.translations, (3,))
        if len(self.rotations) != len(self.translations):
            raise SceneError(f"actor {self.actor_id}: track rotations/translations disagree")

    @property
    def frame_count(self) -> int:
        return len(self.rotations)

    def covers(self, frame: int) -> bool:
        return self.frame_start <= frame < self.frame_start + self.frame_count

    def pose_at(self, frame: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Quaternion, rotation matrix and translation at a frame index."""
        if not self.covers(frame):
            raise MissingPoseError(
                f"actor {self.actor_id} has no pose at frame {frame} "
                f"(track covers [{self.frame_start}, {self.frame_start + self.frame_count}))"
            )
        i = frame - self.frame_start
        q = geom.quat_normalize(self.rotations[i])
        return q, geom.quat_to_matrix(q), self.translations[i]


@dataclasses.dataclass
class Actor:
    track: ActorTrack
    gaussians: Gaussians  # expressed in the actor frame


@dataclasses.dataclass
class Scene:
    """Partitioned splat scene: static background, tracked actors, distant shell."""

    background: Gaussians
    actors: list[Actor]
    distant: Gaussians

    def __post_init__(self):
        self.actors = sorted(self.actors, key=lambda a: a.track.actor_id)
        ids = [a.track.actor_id for a in self.actors]
        if len(set(ids)) != len(ids):
            raise SceneError("duplicate actor ids")

    def gaussian_count(self) -> int:
        return len(self.background) + sum(len(a.gaussians) for a in self.actors) + len(self.distant)

    def copy(self) -> "Scene":
        return Scene(
            self.background.copy(),
            [Actor(a.track, a.gaussians.copy()) for a in self.actors],
            self.distant.copy(),
        )

    def validate(self) -> None:
        self.background.validate("background")
        self.distant.validate("distant")
        for a in self.actors:
            label = f"actor {a.track.actor_id}"
            a.gaussians.validate(label)
            if len(a.gaussians):
                limit = a.track.half_extents * BOX_MARGIN
                outside = np.any(np.abs(a.gaussians.mu) > limit, axis=1)
                if np.any(outside):
                    raise SceneError(
                        f"{label}: gaussian index {int(np.argmax(outside))} lies outside "
                        f"the actor box (margin {BOX_MARGIN:.2f})"
                    )


def flatten_at_frame(scene: Scene, frame: int) -> Gaussians:
    """World-frame gaussian list at a frame: background, actors by id, distant.

    Pure and deterministic; raises MissingPoseError when the frame falls
    outside any actor's track.
    """
    parts = [scene.background]
    for actor in scene.actors:
        q, R, t = actor.track.pose_at(frame)
        g = actor.gaussians
        if len(g) == 0:
            continue
        parts.append(
            Gaussians(
                g.mu @ R.T + t,
                g.scale,
                geom.quat_normalize(geom.quat_multiply(q[None, :], g.rot)),
                g.opacity,
                g.color,
            )
        )
    parts.append(scene.distant)
    return Gaussians.concat(parts)


def scene_extent(scene: Scene) -> float:
    """Bounding radius of background plus actor centers; ignores the distant shell."""
    pts = [scene.background.mu] if len(scene.background) else []
    for a in scene.actors:
        pts.append(a.track.translations)
    if not pts:
        return 1.0
    all_pts = np.concatenate(pts)
    center = all_pts.mean(axis=0)
    return float(max(np.linalg.norm(all_pts - center, axis=1).max(), 1.0))


def make_distant_shell(
    center: np.ndarray,
    radius: float,
    count: int = 2048,
    color=(0.65, 0.72, 0.8),
    opacity: float = 0.9,
    min_z_frac: float = -0.08,
) -> Gaussians:
    """Fixed-count shell of large splats on a sphere, for sky and far geometry.

    Placement is a deterministic golden-angle spiral over the band
    z/radius in [min_z_frac, 1], so identical inputs give identical shells.
    """
    center = np.asarray(center, dtype=np.float64).reshape(3)
    k = np.arange(count, dtype=np.float64)
    z = min_z_frac + (k + 0.5) / count * (1.0 - min_z_frac)
    phi = k * (np.pi * (3.0 - np.sqrt(5.0)))
    rxy = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    dirs = np.stack([rxy * np.cos(phi), rxy * np.sin(phi), z], axis=1)
    mu = center + radius * dirs
    # size splats to overlap: each covers ~2x its share of the band area
    band_area = 2.0 * np.pi * radius * radius * (1.0 - min_z_frac)
    s = 1.35 * np.sqrt(band_area / count / np.pi)
    scale = np.full((count, 3), s)
    rot = np.tile(geom.IDENTITY_QUAT, (count, 1))
    col = np.broadcast_to(np.asarray(color, dtype=np.float64), (count, 3)).copy()
    return Gaussians(mu, scale, rot, np.full(count, opacity), col)


@dataclasses.dataclass
class LatentGaussians:
    """Unconstrained reparameterization of a gaussian set, one flat row per splat."""

    data: np.ndarray  # (N, LATENT_DIM)

    def __post_init__(self):
        self.data = np.ascontiguousarray(np.asarray(self.data, dtype=np.float64)).reshape(-1, LATENT_DIM)

    def __len__(self) -> int:
        return self.data.shape[0]

    def copy(self) -> "LatentGaussians":
        return LatentGaussians(self.data.copy())

    @property
    def mu(self) -> np.ndarray:
        return self.data[:, SL_MU]

    @property
    def log_scale(self) -> np.ndarray:
        return self.data[:, SL_LOG_SCALE]

    @property
    def quat(self) -> np.ndarray:
        return self.data[:, SL_QUAT]

    @property
    def opacity_logit(self) -> np.ndarray:
        return self.data[:, SL_OPACITY]

    @property
    def color_logit(self) -> np.ndarray:
        return self.data[:, SL_COLOR]


def _logit(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, LOGIT_CLIP, 1.0 - LOGIT_CLIP)
    return np.log(p) - np.log1p(-p)


def to_latent(g: Gaussians) -> LatentGaussians:
    """Map a gaussian set to latent coordinates (exact away from saturation)."""
    data = np.empty((len(g), LATENT_DIM))
    data[:, SL_MU] = g.mu
    data[:, SL_LOG_SCALE] = np.log(g.scale)
    data[:, SL_QUAT] = g.rot
    data[:, SL_OPACITY] = _logit(g.opacity)[:, None]
    data[:, SL_COLOR] = _logit(g.color)
    return LatentGaussians(data)


def from_latent(latent: LatentGaussians) -> Gaussians:
    """Decode latent coordinates; total over finite inputs, rejects non-finite ones."""
    d = latent.data
    if not np.all(np.isfinite(d)):
        raise ValueError("latent gaussian coordinates must be finite")
    return Gaussians(
        d[:, SL_MU].copy(),
        np.exp(np.clip(d[:, SL_LOG_SCALE], -LOG_SCALE_MAX, LOG_SCALE_MAX)),
        geom.quat_normalize(d[:, SL_QUAT]),
        expit(d[:, SL_OPACITY][:, 0]),
        expit(d[:, SL_COLOR]),
    )
