"""Persistence formats: scene container, point clouds, camera tracks, PNG images.

All binary formats are little-endian with 32-bit float payloads and are
versioned; loaders are total: any byte stream yields either a valid object or
a structured error (never a crash and never silent clamping).

Scene file v1 ("GSCN"):
    magic[4] | u16 version | u16 reserved | u32 n_background | u32 n_distant |
    u32 n_actors | f32 scene_extent | u64 creation_seed
    per actor: u32 actor_id | u32 n_gaussians | f32 half_extents[3] |
               u32 frame_start | u32 n_frames | f32 rot[n_frames,4] |
               f32 trans[n_frames,3]
    gaussian blocks (background, actors by id, distant), each written
    column-major per field: mu(N,3) scale(N,3) rot(N,4) opacity(N) color(N,3)

Pose file: a '# resplat poses v1' header, one intrinsics line
'fx fy cx cy width height', then per frame 'index r00 r01 r02 tx r10 ... tz'
(world-from-camera rows).

Point file: PLY, ascii or binary_little_endian, properties x y z
[red green blue] [frame]; float colors are read as-is, uchar colors as /255.
"""

from __future__ import annotations

import dataclasses
import io
import struct

import numpy as np
from PIL import Image

from .core import Actor, ActorTrack, CameraView, Gaussians, PointCloud, Scene, SceneError

MAGIC = b"GSCN"
VERSION = 1
MAX_REASONABLE_COUNT = 50_000_000  # allocation guard for fuzzed headers


class SceneIOError(Exception):
    """Base for all persistence errors."""


class BadMagicError(SceneIOError):
    pass


class UnsupportedVersionError(SceneIOError):
    pass


class TruncatedFileError(SceneIOError):
    pass


class SceneInvariantError(SceneIOError):
    pass


class ParseError(SceneIOError):
    """Malformed text or PLY input; message carries the line or byte offset."""


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise TruncatedFileError(
                f"truncated while reading {what} at byte {self.pos} (wanted {n} bytes)"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))

    def f32_array(self, count: int, cols: int, what: str) -> np.ndarray:
        """Column-major float32 block, returned as float64 (exact widening)."""
        raw = self.take(4 * count * cols, what)
        arr = np.frombuffer(raw, dtype="<f4").reshape((cols, count)).T
        return np.ascontiguousarray(arr, dtype=np.float64)

    def done(self) -> None:
        if self.pos != len(self.data):
            raise ParseError(f"trailing garbage: {len(self.data) - self.pos} bytes after byte {self.pos}")


def _write_f32_block(buf: io.BytesIO, arr: np.ndarray) -> None:
    a = np.asarray(arr, dtype="<f4").reshape(len(arr), -1)
    buf.write(np.ascontiguousarray(a.T).tobytes())


def _write_gaussians(buf: io.BytesIO, g: Gaussians) -> None:
    _write_f32_block(buf, g.mu)
    _write_f32_block(buf, g.scale)
    _write_f32_block(buf, g.rot)
    _write_f32_block(buf, g.opacity)
    _write_f32_block(buf, g.color)


def _read_gaussians(r: _Reader, n: int, label: str) -> Gaussians:
    return Gaussians(
        r.f32_array(n, 3, f"{label} mu"),
        r.f32_array(n, 3, f"{label} scale"),
        r.f32_array(n, 4, f"{label} rot"),
        r.f32_array(n, 1, f"{label} opacity")[:, 0],
        r.f32_array(n, 3, f"{label} color"),
    )


def save_scene(path, scene: Scene, scene_extent: float = 0.0, creation_seed: int = 0) -> None:
    """Write a scene file; the scene is validated before anything is written."""
    scene.validate()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HH", VERSION, 0))
    buf.write(struct.pack("<III", len(scene.background), len(scene.distant), len(scene.actors)))
    buf.write(struct.pack("<fQ", float(scene_extent), int(creation_seed)))
    for a in scene.actors:
        t = a.track
        buf.write(struct.pack("<II", t.actor_id, len(a.gaussians)))
        buf.write(np.asarray(t.half_extents, "<f4").tobytes())
        buf.write(struct.pack("<II", t.frame_start, t.frame_count))
        buf.write(np.asarray(t.rotations, "<f4").tobytes())
        buf.write(np.asarray(t.translations, "<f4").tobytes())
    _write_gaussians(buf, scene.background)
    for a in scene.actors:
        _write_gaussians(buf, a.gaussians)
    _write_gaussians(buf, scene.distant)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_scene(path) -> tuple[Scene, dict]:
    """Load and validate a scene file; returns (scene, metadata)."""
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise BadMagicError("not a scene file (bad magic)")
    version, _ = r.unpack("<HH", "version")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported scene file version {version}")
    n_bg, n_dist, n_actors = r.unpack("<III", "counts")
    extent, seed = r.unpack("<fQ", "metadata")
    if max(n_bg, n_dist) > MAX_REASONABLE_COUNT or n_actors > 100_000:
        raise ParseError("header counts exceed sanity limits")
    actors_meta = []
    total_actor_gaussians = 0
    for i in range(n_actors):
        actor_id, n_g = r.unpack("<II", f"actor {i} header")
        half = np.frombuffer(r.take(12, f"actor {i} box"), dtype="<f4").astype(np.float64)
        frame_start, n_frames = r.unpack("<II", f"actor {i} track header")
        if n_g > MAX_REASONABLE_COUNT or n_frames > MAX_REASONABLE_COUNT:
            raise ParseError(f"actor {i} counts exceed sanity limits")
        rots = np.frombuffer(r.take(16 * n_frames, f"actor {i} rotations"), dtype="<f4")
        trans = np.frombuffer(r.take(12 * n_frames, f"actor {i} translations"), dtype="<f4")
        actors_meta.append(
            (actor_id, n_g, half, frame_start, rots.reshape(n_frames, 4).astype(np.float64),
             trans.reshape(n_frames, 3).astype(np.float64))
        )
        total_actor_gaussians += n_g
    expected = 14 * 4 * (n_bg + n_dist + total_actor_gaussians)
    if len(data) - r.pos != expected:
        raise TruncatedFileError(
            f"gaussian payload is {len(data) - r.pos} bytes, expected {expected}"
        )
    background = _read_gaussians(r, n_bg, "background")
    actors = []
    for actor_id, n_g, half, frame_start, rots, trans in actors_meta:
        g = _read_gaussians(r, n_g, f"actor {actor_id}")
        try:
            track = ActorTrack(actor_id, half, frame_start, rots, trans)
        except SceneError as e:
            raise SceneInvariantError(str(e)) from e
        actors.append(Actor(track, g))
    distant = _read_gaussians(r, n_dist, "distant")
    r.done()
    try:
        scene = Scene(background, actors, distant)
        scene.validate()
    except SceneError as e:
        raise SceneInvariantError(str(e)) from e
    return scene, {"scene_extent": float(extent), "creation_seed": int(seed)}


# --- point clouds (PLY subset) -------------------------------------------------

_PLY_TYPES = {
    "float": ("<f4", 4),
    "float32": ("<f4", 4),
    "double": ("<f8", 8),
    "float64": ("<f8", 8),
    "uchar": ("u1", 1),
    "uint8": ("u1", 1),
    "char": ("i1", 1),
    "int8": ("i1", 1),
    "short": ("<i2", 2),
    "ushort": ("<u2", 2),
    "int": ("<i4", 4),
    "int32": ("<i4", 4),
    "uint": ("<u4", 4),
    "uint32": ("<u4", 4),
}


def save_points(path, points: PointCloud) -> None:
    """Binary little-endian PLY with float32 positions and colors."""
    n = len(points)
    props = [
        "property float x",
        "property float y",
        "property float z",
        "property float red",
        "property float green",
        "property float blue",
    ]
    ncols = 6
    if points.frames is not None:
        props.append("property int frame")
    header = (
        "ply\nformat binary_little_endian 1.0\ncomment resplat point cloud\n"
        f"element vertex {n}\n" + "\n".join(props) + "\nend_header\n"
    )
    body = np.empty((n, ncols), dtype="<f4")
    body[:, 0:3] = points.positions
    body[:, 3:6] = points.colors
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if points.frames is None:
            fh.write(body.tobytes())
        else:
            rec = np.zeros(n, dtype=[("f", "<f4", (6,)), ("frame", "<i4")])
            rec["f"] = body
            rec["frame"] = points.frames
            fh.write(rec.tobytes())


def load_points(path) -> PointCloud:
    with open(path, "rb") as fh:
        data = fh.read()
    # header is ascii lines up to end_header
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise ParseError("not a ply file (missing 'ply'/'end_header')")
    nl = data.find(b"\n", end)
    if nl < 0:
        raise ParseError("truncated ply header")
    body = data[nl + 1 :]
    try:
        header_lines = data[:end].decode("ascii").splitlines()
    except UnicodeDecodeError as e:
        raise ParseError(f"ply header is not ascii: {e}") from e

    fmt = None
    count = None
    props: list[tuple[str, str]] = []  # (type, name)
    in_vertex = False
    for lineno, line in enumerate(header_lines, start=1):
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            if len(parts) < 2 or parts[1] not in ("ascii", "binary_little_endian"):
                raise ParseError(f"line {lineno}: unsupported ply format {line!r}")
            fmt = parts[1]
        elif parts[0] == "element":
            if len(parts) == 3 and parts[1] == "vertex":
                try:
                    count = int(parts[2])
                except ValueError as e:
                    raise ParseError(f"line {lineno}: bad vertex count {parts[2]!r}") from e
                in_vertex = True
            else:
                in_vertex = False
        elif parts[0] == "property" and in_vertex:
            if len(parts) != 3:
                raise ParseError(f"line {lineno}: unsupported property {line!r}")
            if parts[1] not in _PLY_TYPES:
                raise ParseError(f"line {lineno}: unknown property type {parts[1]!r}")
            props.append((parts[1], parts[2]))
    if fmt is None or count is None:
        raise ParseError("ply header missing format or vertex element")
    if count < 0 or count > MAX_REASONABLE_COUNT:
        raise ParseError(f"vertex count {count} out of range")
    names = [p[1] for p in props]
    for need in ("x", "y", "z"):
        if need not in names:
            raise ParseError(f"ply vertex element lacks property '{need}'")

    if fmt == "binary_little_endian":
        dtype = np.dtype([(name, _PLY_TYPES[t][0]) for t, name in props])
        expected = dtype.itemsize * count
        if len(body) < expected:
            raise TruncatedFileError(f"ply body has {len(body)} bytes, expected {expected}")
        if len(body) > expected:
            raise ParseError(f"ply body has {len(body) - expected} trailing bytes")
        table = np.frombuffer(body[:expected], dtype=dtype)
        col = {name: table[name] for _, name in props}
    else:
        try:
            text = body.decode("ascii")
        except UnicodeDecodeError as e:
            raise ParseError(f"ascii ply body not ascii: {e}") from e
        rows = [ln for ln in text.splitlines() if ln.strip()]
        if len(rows) != count:
            raise ParseError(f"ascii ply has {len(rows)} rows, expected {count}")
        vals = np.empty((count, len(props)))
        for i, ln in enumerate(rows):
            parts = ln.split()
            if len(parts) != len(props):
                raise ParseError(f"vertex row {i + 1}: expected {len(props)} values, got {len(parts)}")
            try:
                vals[i] = [float(p) for p in parts]
            except ValueError as e:
                raise ParseError(f"vertex row {i + 1}: {e}") from e
        col = {name: vals[:, k] for k, (_, name) in enumerate(props)}

    pos = np.stack([col["x"], col["y"], col["z"]], axis=1).astype(np.float64)
    if not np.all(np.isfinite(pos)):
        raise ParseError("non-finite point positions")
    if all(c in names for c in ("red", "green", "blue")):
        cols = np.stack([col["red"], col["green"], col["blue"]], axis=1).astype(np.float64)
        is_byte = props[names.index("red")][0] in ("uchar", "uint8")
        colors = cols / 255.0 if is_byte else cols
        if not np.all(np.isfinite(colors)) or colors.min() < -1e-6 or colors.max() > 1.0 + 1e-6:
            raise ParseError("point colors outside [0,1]")
        colors = np.clip(colors, 0.0, 1.0)
    else:
        colors = np.full((count, 3), 0.5)
    frames = col["frame"].astype(np.int64) if "frame" in names else None
    return PointCloud(pos, colors, frames)


# --- camera tracks -------------------------------------------------------------

POSES_HEADER = "# resplat poses v1"


def save_poses(path, cams: list[CameraView]) -> None:
    if not cams:
        raise SceneIOError("cannot save an empty camera list")
    c0 = cams[0]
    lines = [POSES_HEADER, f"{c0.fx!r} {c0.fy!r} {c0.cx!r} {c0.cy!r} {c0.width} {c0.height}"]
    for cam in cams:
        rt = np.hstack([cam.rotation, cam.translation[:, None]]).reshape(-1)
        lines.append(str(cam.frame_index) + " " + " ".join(repr(float(v)) for v in rt))
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_poses(path) -> list[CameraView]:
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        text = raw.decode("ascii")
    except UnicodeDecodeError as e:
        raise ParseError(f"pose file is not ascii: {e}") from e
    lines = [(i + 1, ln) for i, ln in enumerate(text.splitlines())]
    lines = [(no, ln) for no, ln in lines if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise ParseError("pose file has no content")
    no, intr = lines[0]
    parts = intr.split()
    if len(parts) != 6:
        raise ParseError(f"line {no}: intrinsics need 'fx fy cx cy width height'")
    try:
        fx, fy, cx, cy = (float(p) for p in parts[:4])
        width, height = int(parts[4]), int(parts[5])
    except ValueError as e:
        raise ParseError(f"line {no}: {e}") from e
    cams = []
    for no, ln in lines[1:]:
        parts = ln.split()
        if len(parts) != 13:
            raise ParseError(f"line {no}: expected frame index plus 12 pose values")
        try:
            frame = int(parts[0])
            vals = np.array([float(p) for p in parts[1:]]).reshape(3, 4)
        except ValueError as e:
            raise ParseError(f"line {no}: {e}") from e
        cam = CameraView(fx, fy, cx, cy, width, height, vals[:, :3], vals[:, 3], frame)
        try:
            cam.validate()
        except SceneError as e:
            raise ParseError(f"line {no}: {e}") from e
        cams.append(cam)
    if not cams:
        raise ParseError("pose file lists no frames")
    return cams


# --- images ----------------------------------------------------------------

def save_image(path, image: np.ndarray) -> None:
    """8-bit RGB PNG from a float image in [0, 1]."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise SceneIOError(f"expected (H, W, 3) image, got {arr.shape}")
    q = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(q, mode="RGB").save(path, format="PNG")


def load_image(path) -> np.ndarray:
    try:
        img = Image.open(path)
        img.load()
    except Exception as e:  # Pillow raises a zoo of types; normalize them
        raise ParseError(f"cannot decode image: {e}") from e
    return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
