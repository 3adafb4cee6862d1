"""Procedural street-scale scenes with exact ground truth at any viewpoint.

The ground truth is itself a gaussian scene (ground plane, box buildings,
moving box actors, a distant sky shell), so the reference renderer can answer
any camera pose. Point clouds are surface samples colored by the same fields
that color the splats, shadow-tested against the boxes from the per-frame
sensor position, then corrupted by dropout and noise.

Everything derives from a single seeded generator in a fixed order, and all
emitted arrays are rounded to float32, so a spec reproduces its scene, images
and points bit-exactly (and survives a scene-file round trip unchanged).
"""

from __future__ import annotations

import dataclasses
import importlib.resources

import numpy as np

from . import geom
from .core import (
    Actor,
    ActorTrack,
    CameraView,
    Gaussians,
    PointCloud,
    Scene,
    SceneError,
    from_latent,
    make_distant_shell,
    to_latent,
    SL_COLOR,
    SL_MU,
    SL_OPACITY,
)
from .raster import RenderOutput, render_reference

FACE_THICKNESS = 0.02
SPLAT_FILL = 0.7  # splat radius as a fraction of the sampling spacing


@dataclasses.dataclass
class SynthSpec:
    """Generator knobs; the plain-text spec format is `key = value` per line."""

    seed: int = 0
    frames: int = 20
    image_width: int = 128
    image_height: int = 128
    focal_factor: float = 0.6  # fx = fy = focal_factor * image_width
    speed: float = 2.0  # meters per frame
    camera_height: float = 1.6
    road_width: float = 8.0
    lateral_extent: float = 36.0
    margin_back: float = 8.0
    margin_front: float = 16.0
    ground_spacing: float = 0.85
    building_count: int = 6
    building_min: float = 4.0
    building_max: float = 11.0
    building_height_min: float = 4.0
    building_height_max: float = 9.0
    actor_count: int = 2
    point_density: float = 3.5  # points per square meter before dropout
    point_dropout: float = 0.12
    point_noise: float = 0.012
    point_sigma: float = 0.35  # splat radius when re-rendering the cloud
    distant_count: int = 2048

    def validate(self) -> None:
        if self.frames < 1:
            raise SceneError("spec needs at least one frame")
        if self.image_width < 16 or self.image_height < 16:
            raise SceneError("image size too small")
        if self.point_density <= 0 or self.ground_spacing <= 0:
            raise SceneError("densities must be positive")

    def to_text(self) -> str:
        lines = ["# resplat scene spec v1"]
        for f in dataclasses.fields(self):
            lines.append(f"{f.name} = {getattr(self, f.name)!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> "SynthSpec":
        known = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise SceneError(f"spec line {lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in known:
                raise SceneError(f"spec line {lineno}: unknown key {key!r}")
            try:
                kwargs[key] = int(value) if known[key] == "int" else float(value)
            except ValueError as e:
                raise SceneError(f"spec line {lineno}: {e}") from e
        spec = cls(**kwargs)
        spec.validate()
        return spec

    @classmethod
    def from_file(cls, path) -> "SynthSpec":
        with open(path, "r", encoding="ascii") as fh:
            return cls.parse(fh.read())


def _face_frame(normal: str):
    """Orthonormal (u, v, n) for an axis-aligned face name like '+x'."""
    axes = {"x": np.array([1.0, 0, 0]), "y": np.array([0, 1.0, 0]), "z": np.array([0, 0, 1.0])}
    n = axes[normal[1]] * (1.0 if normal[0] == "+" else -1.0)
    u = axes["y"] if normal[1] == "x" else axes["x"]
    v = np.cross(n, u)
    return u, v, n


@dataclasses.dataclass
class _Rect:
    """A rectangular surface patch: center, in-plane axes scaled to half extents."""

    center: np.ndarray
    u: np.ndarray  # unit in-plane axis
    v: np.ndarray
    n: np.ndarray  # unit normal
    half_u: float
    half_v: float
    color_fn: object  # (points (N,3)) -> colors (N,3)

    @property
    def area(self) -> float:
        return 4.0 * self.half_u * self.half_v

    def grid(self, spacing: float, rng: np.random.Generator, jitter: float = 0.3):
        nu = max(int(np.ceil(2 * self.half_u / spacing)), 1)
        nv = max(int(np.ceil(2 * self.half_v / spacing)), 1)
        iu, iv = np.meshgrid(np.arange(nu), np.arange(nv), indexing="ij")
        su, sv = 2 * self.half_u / nu, 2 * self.half_v / nv
        offs = rng.uniform(-jitter, jitter, (nu * nv, 2))
        a = (iu.ravel() + 0.5 + offs[:, 0]) * su - self.half_u
        b = (iv.ravel() + 0.5 + offs[:, 1]) * sv - self.half_v
        pts = self.center + a[:, None] * self.u + b[:, None] * self.v
        return pts, max(su, sv)

    def uniform(self, count: int, rng: np.random.Generator):
        a = rng.uniform(-self.half_u, self.half_u, count)
        b = rng.uniform(-self.half_v, self.half_v, count)
        return self.center + a[:, None] * self.u + b[:, None] * self.v


def _rect_splats(rect: _Rect, spacing: float, rng) -> Gaussians:
    pts, step = rect.grid(spacing, rng)
    n = len(pts)
    R = np.stack([rect.u, rect.v, rect.n], axis=1)
    quat = geom.matrix_to_quat(R)
    s = SPLAT_FILL * step
    return Gaussians(
        pts,
        np.tile([s, s, FACE_THICKNESS], (n, 1)),
        np.tile(quat, (n, 1)),
        np.full(n, 0.93),
        np.clip(rect.color_fn(pts), 0.0, 1.0),
    )


def _box_faces(center, half, color_fn, faces=("+x", "-x", "+y", "-y", "+z")) -> list[_Rect]:
    out = []
    for name in faces:
        u, v, n = _face_frame(name)
        axis = {"x": 0, "y": 1, "z": 2}[name[1]]
        c = np.asarray(center, dtype=np.float64) + n * half[axis]
        hu = half[int(np.argmax(np.abs(u)))]
        hv = half[int(np.argmax(np.abs(v)))]
        out.append(_Rect(c, u, v, n, hu, hv, color_fn))
    return out


def _forward_camera(spec: SynthSpec, frame: int) -> CameraView:
    f = spec.focal_factor * spec.image_width
    R = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
    t = np.array([frame * spec.speed, 0.0, spec.camera_height])
    return CameraView(
        f, f, (spec.image_width - 1) / 2.0, (spec.image_height - 1) / 2.0,
        spec.image_width, spec.image_height, R, t, frame_index=frame,
    )


def _quantize_gaussians(g: Gaussians) -> Gaussians:
    def q(a):
        return a.astype("<f4").astype(np.float64)

    rot = geom.quat_normalize(q(g.rot))
    return Gaussians(q(g.mu), q(g.scale), q(rot), np.clip(q(g.opacity), 0, 1), np.clip(q(g.color), 0, 1))


def _segments_hit_boxes(origins, targets, lo, hi) -> np.ndarray:
    """True where the open segment origin->target crosses any AABB (slab test)."""
    d = targets - origins
    hit = np.zeros(len(origins), dtype=bool)
    eps = 1e-9
    for b in range(len(lo)):
        dn = np.where(np.abs(d) < eps, eps, d)
        t0 = (lo[b] - origins) / dn
        t1 = (hi[b] - origins) / dn
        tmin = np.minimum(t0, t1).max(axis=1)
        tmax = np.maximum(t0, t1).min(axis=1)
        hit |= (tmax >= tmin) & (tmax > 1e-6) & (tmin < 1.0 - 1e-4)
    return hit


@dataclasses.dataclass
class SynthBundle:
    """A generated scene plus the oracles evaluation needs."""

    spec: SynthSpec
    scene: Scene
    cameras: list[CameraView]
    points: PointCloud

    def __post_init__(self):
        self._memo: dict = {}

    def _key(self, cam: CameraView):
        return (
            cam.frame_index, cam.width, cam.height, cam.fx, cam.fy, cam.cx, cam.cy,
            cam.rotation.tobytes(), cam.translation.tobytes(),
        )

    def gt_render(self, cam: CameraView) -> RenderOutput:
        """Ground truth at ANY pose, rendered with the naive oracle path."""
        key = self._key(cam)
        if key not in self._memo:
            self._memo[key] = render_reference(self.scene, cam)
        return self._memo[key]

    def gt_image(self, cam: CameraView) -> np.ndarray:
        return self.gt_render(cam).color


def generate(spec: SynthSpec) -> SynthBundle:
    """Build the ground-truth scene, trajectory cameras and the point cloud."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    cameras = [_forward_camera(spec, i) for i in range(spec.frames)]

    span = spec.frames * spec.speed
    x0, x1 = -spec.margin_back, span + spec.margin_front
    half_lat = spec.lateral_extent / 2.0
    road_half = spec.road_width / 2.0

    # color fields; coefficients drawn once so points and splats agree exactly
    tint = rng.uniform(-0.03, 0.03, 3)
    phase = rng.uniform(0, 2 * np.pi, 4)

    def ground_color(p):
        x, y = p[:, 0], p[:, 1]
        wobble = 0.05 * np.sin(0.13 * x + phase[0]) * np.sin(0.17 * y + phase[1])
        on_road = geom.smoothstep((road_half + 0.4 - np.abs(y)) / 0.8)
        asphalt = np.array([0.24, 0.24, 0.26])
        verge = np.array([0.20, 0.26, 0.19])
        c = verge + on_road[:, None] * (asphalt - verge)
        c = c + wobble[:, None] + tint[None, :]
        lane = 0.14 * np.exp(-((y / 0.5) ** 2))
        return c + lane[:, None]

    rects: list[_Rect] = []
    rects.append(
        _Rect(
            np.array([(x0 + x1) / 2, 0.0, 0.0]), np.array([1.0, 0, 0]), np.array([0, 1.0, 0]),
            np.array([0, 0, 1.0]), (x1 - x0) / 2, half_lat, ground_color,
        )
    )

    boxes_lo, boxes_hi = [], []
    for b in range(spec.building_count):
        sx = rng.uniform(spec.building_min, spec.building_max)
        sy = rng.uniform(spec.building_min, spec.building_max)
        sz = rng.uniform(spec.building_height_min, spec.building_height_max)
        side = 1.0 if rng.uniform() < 0.5 else -1.0
        cx = rng.uniform(2.0, span + 4.0)
        cy = side * (road_half + 2.5 + rng.uniform(0.0, 4.0) + sy / 2.0)
        center = np.array([cx, cy, sz / 2.0])
        half = np.array([sx / 2, sy / 2, sz / 2])
        base = rng.uniform(0.30, 0.62, 3)
        bphase = rng.uniform(0, 2 * np.pi)

        def building_color(p, base=base, sz=sz, bphase=bphase):
            shade = 0.82 + 0.3 * (p[:, 2] / sz)
            band = 0.05 * np.sin(2 * np.pi * p[:, 2] / 2.1 + bphase)
            return base[None, :] * shade[:, None] + band[:, None]

        rects.extend(_box_faces(center, half, building_color, faces=("+x", "-x", "+y", "-y")))
        boxes_lo.append(center - half)
        boxes_hi.append(center + half)

    # actors: axis-aligned car boxes on the two lanes
    actors = []
    actor_halves = []
    actor_centers = []  # (actor, frame, 3)
    actor_color_fns = []
    for a in range(spec.actor_count):
        half = np.array([2.2, 0.9, 0.75]) * rng.uniform(0.9, 1.1)
        lane = road_half / 2.0 * (1.0 if a % 2 == 0 else -1.0)
        x_start = rng.uniform(4.0, span * 0.8)
        vel = rng.uniform(1.0, 2.6) * (1.0 if rng.uniform() < 0.7 else -0.6)
        profile = "lane_change" if rng.uniform() < 0.4 else "constant_velocity"
        tt = np.arange(spec.frames, dtype=np.float64)
        ys = np.full(spec.frames, lane)
        if profile == "lane_change":
            ramp = geom.smoothstep((tt - spec.frames / 3.0) / max(spec.frames / 3.0, 1.0))
            ys = lane - ramp * (2.0 * lane)  # drift to the mirrored lane
        centers = np.stack([x_start + vel * tt, ys, np.full(spec.frames, half[2])], axis=1)
        track = ActorTrack(
            actor_id=a,
            half_extents=half,
            frame_start=0,
            rotations=np.tile(geom.IDENTITY_QUAT, (spec.frames, 1)),
            translations=centers,
        )
        base = rng.uniform(0.25, 0.8, 3)

        def actor_color(p, base=base):
            return base[None, :] + 0.06 * np.sin(3.1 * p[:, 0])[:, None]

        faces = _box_faces(np.zeros(3), half, actor_color, faces=("+x", "-x", "+y", "-y", "+z"))
        parts = [_rect_splats(r, spec.ground_spacing * 0.55, rng) for r in faces]
        actors.append(Actor(track, _quantize_gaussians(Gaussians.concat(parts))))
        actor_halves.append(half)
        actor_centers.append(centers)
        actor_color_fns.append(actor_color)

    background = Gaussians.concat([_rect_splats(r, spec.ground_spacing, rng) for r in rects])

    sky = np.clip(np.array([0.10, 0.115, 0.15]) + rng.uniform(-0.02, 0.03, 3), 0.02, 1.0)
    all_mu = background.mu
    center = all_mu.mean(axis=0)
    radius = float(np.linalg.norm(all_mu - center, axis=1).max())
    distant = make_distant_shell(center, 10.0 * radius, spec.distant_count, color=sky)

    scene = Scene(_quantize_gaussians(background), actors, _quantize_gaussians(distant))

    # point cloud: uniform surface candidates, stamped with a random frame,
    # kept only when the segment from that frame's camera is unobstructed
    cand_pos, cand_col = [], []
    for r in rects:
        cnt = max(int(round(r.area * spec.point_density)), 1)
        p = r.uniform(cnt, rng)
        cand_pos.append(p)
        cand_col.append(r.color_fn(p))
    cand_frames = [rng.integers(0, spec.frames, sum(len(p) for p in cand_pos))]
    # actor candidates are sampled in the actor frame, then placed per frame
    for a, actor in enumerate(actors):
        faces = _box_faces(np.zeros(3), actor_halves[a], actor_color_fns[a],
                           faces=("+x", "-x", "+y", "-y", "+z"))
        area = sum(f.area for f in faces)
        cnt = max(int(round(area * spec.point_density * 1.5)), 1)
        weights = np.array([f.area for f in faces]) / area
        which = rng.choice(len(faces), cnt, p=weights)
        local = np.concatenate([faces[k].uniform(int((which == k).sum()), rng) for k in range(len(faces))])
        frames_a = rng.integers(0, spec.frames, cnt)
        world = actor_centers[a][frames_a] + local
        cand_pos.append(world)
        cand_col.append(actor_color_fns[a](local))
        cand_frames.append(frames_a)

    pos = np.concatenate(cand_pos)
    col = np.clip(np.concatenate(cand_col), 0.0, 1.0)
    frames = np.concatenate(cand_frames)

    cam_centers = np.stack([c.translation for c in cameras])
    origins = cam_centers[frames]
    lo = np.array(boxes_lo) if boxes_lo else np.zeros((0, 3))
    hi = np.array(boxes_hi) if boxes_hi else np.zeros((0, 3))
    occluded = np.zeros(len(pos), dtype=bool)
    for f in range(spec.frames):
        m = frames == f
        if not m.any():
            continue
        flo, fhi = list(lo), list(hi)
        for a in range(spec.actor_count):
            flo.append(actor_centers[a][f] - actor_halves[a] - 1e-3)
            fhi.append(actor_centers[a][f] + actor_halves[a] + 1e-3)
        if flo:
            occluded[m] = _segments_hit_boxes(origins[m], pos[m], np.array(flo), np.array(fhi))
    keep = ~occluded
    keep &= rng.uniform(size=len(pos)) >= spec.point_dropout
    pos = pos[keep] + rng.normal(0.0, spec.point_noise, (int(keep.sum()), 3))
    col = col[keep]
    frames = frames[keep]

    points = PointCloud(
        pos.astype("<f4").astype(np.float64), col.astype("<f4").astype(np.float64), frames
    )
    return SynthBundle(spec, scene, cameras, points)


@dataclasses.dataclass
class DegradeProfile:
    """Seeded corruption for manufacturing deficient scenes."""

    opacity_jitter: float = 0.0
    position_jitter: float = 0.0
    drop_fraction: float = 0.0
    color_jitter: float = 0.0
    seed: int = 0


def degrade(scene: Scene, profile: DegradeProfile) -> Scene:
    """Drop whole gaussians and jitter the rest in latent space.

    Applies to the background and actor partitions; the distant shell is left
    intact so the far field stays represented.
    """
    rng = np.random.default_rng(profile.seed)

    def corrupt(g: Gaussians) -> Gaussians:
        if len(g) == 0:
            return g.copy()
        keep = rng.uniform(size=len(g)) >= profile.drop_fraction
        g = g.take(np.where(keep)[0])
        if len(g) == 0:
            return g
        lat = to_latent(g)
        n = len(g)
        lat.data[:, SL_MU] += rng.normal(0.0, profile.position_jitter, (n, 3)) if profile.position_jitter else 0.0
        lat.data[:, SL_OPACITY] += (
            rng.normal(0.0, profile.opacity_jitter, (n, 1)) if profile.opacity_jitter else 0.0
        )
        lat.data[:, SL_COLOR] += rng.normal(0.0, profile.color_jitter, (n, 3)) if profile.color_jitter else 0.0
        return from_latent(lat)

    background = corrupt(scene.background)
    actors = [Actor(a.track, corrupt(a.gaussians)) for a in scene.actors]
    return Scene(background, actors, scene.distant.copy())


def bundled_suite() -> list[SynthSpec]:
    """The six shipped scene specs (seeds 0-5)."""
    specs = []
    root = importlib.resources.files("resplat") / "suite"
    for i in range(6):
        specs.append(SynthSpec.parse((root / f"scene{i:02d}.txt").read_text(encoding="ascii")))
    return specs
