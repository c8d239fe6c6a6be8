"""3D Gaussian scenes and pinhole cameras.

A scene is a fixed set of anisotropic Gaussians: position, rotation
(unit quaternion), per-axis scale, opacity, color, and a color embedding
used by the stylization stage. Covariance is kept factorized as
R diag(scale^2) R^T, which is symmetric positive definite by construction.

Scenes are immutable after generation/load; stylization returns new scenes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffcore.rng import named_stream
from .errors import FormatError, ShapeError

GSCN_MAGIC = b"GSCN"
GSCN_VERSION = 1

MIN_EMBED_DIM = 8
MAX_EMBED_DIM = 64
DEFAULT_EMBED_DIM = 32

TOY_SCENE_KINDS = ("lattice", "two_clusters", "textured_slab")


# -- quaternion helpers -------------------------------------------------------

def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float32)
    return q / np.linalg.norm(q)


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix of a unit quaternion (w, x, y, z)."""
    w, x, y, z = (float(v) for v in q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ], dtype=np.float32)


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) of a rotation matrix."""
    m = np.asarray(m, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    return quat_normalize(np.array(q))


# -- domain types -------------------------------------------------------------

@dataclass(frozen=True)
class GaussianPrimitive:
    position: np.ndarray      # (3,)
    rotation: np.ndarray      # unit quaternion (4,)
    scale: np.ndarray         # (3,) positive std-devs
    opacity: float            # [0, 1]
    color: np.ndarray         # (3,) linear RGB in [0, 1]
    embedding: np.ndarray     # (D,)

    def covariance(self) -> np.ndarray:
        r = quat_to_matrix(self.rotation)
        return r @ np.diag(self.scale.astype(np.float64) ** 2) @ r.T


class GaussianScene:
    """Array-of-structs Gaussian set; all per-Gaussian data as float32 arrays."""

    def __init__(self, positions, rotations, scales, opacities, colors, embeddings,
                 source_tag: str = "", distilled: bool = False):
        self.positions = np.ascontiguousarray(positions, dtype=np.float32)
        self.rotations = np.ascontiguousarray(rotations, dtype=np.float32)
        self.scales = np.ascontiguousarray(scales, dtype=np.float32)
        self.opacities = np.ascontiguousarray(opacities, dtype=np.float32)
        self.colors = np.ascontiguousarray(colors, dtype=np.float32)
        self.embeddings = np.ascontiguousarray(embeddings, dtype=np.float32)
        self.source_tag = source_tag
        self.distilled = distilled
        self.validate()

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.embeddings.shape[1]

    def validate(self) -> None:
        n = self.positions.shape[0]
        if n < 1:
            raise ShapeError("scene must contain at least one Gaussian")
        shapes = {
            "positions": (n, 3), "rotations": (n, 4), "scales": (n, 3),
            "opacities": (n,), "colors": (n, 3),
        }
        for name, want in shapes.items():
            got = getattr(self, name).shape
            if got != want:
                raise ShapeError(f"scene field {name} has shape {got}, expected {want}")
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != n:
            raise ShapeError(f"embeddings shape {self.embeddings.shape} does not match N={n}")
        norms = np.linalg.norm(self.rotations, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-5):
            raise ShapeError("rotation quaternions must be unit norm")
        if np.any(self.scales <= 0):
            raise ShapeError("scales must be strictly positive")
        if np.any(self.opacities < 0) or np.any(self.opacities > 1):
            raise ShapeError("opacities must lie in [0, 1]")
        if np.any(self.colors < 0) or np.any(self.colors > 1):
            raise ShapeError("colors must lie in [0, 1]")

    def primitive(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            position=self.positions[i].copy(), rotation=self.rotations[i].copy(),
            scale=self.scales[i].copy(), opacity=float(self.opacities[i]),
            color=self.colors[i].copy(), embedding=self.embeddings[i].copy())

    def gaussians(self) -> list[GaussianPrimitive]:
        return [self.primitive(i) for i in range(self.count)]

    def with_colors(self, colors: np.ndarray, source_tag: str | None = None) -> "GaussianScene":
        """New scene sharing geometry byte-for-byte, colors replaced."""
        return GaussianScene(
            self.positions, self.rotations, self.scales, self.opacities,
            colors, self.embeddings,
            source_tag=self.source_tag if source_tag is None else source_tag,
            distilled=self.distilled)

    def with_embeddings(self, embeddings: np.ndarray, distilled: bool) -> "GaussianScene":
        return GaussianScene(
            self.positions, self.rotations, self.scales, self.opacities,
            self.colors, embeddings, source_tag=self.source_tag, distilled=distilled)


@dataclass(frozen=True)
class Camera:
    position: np.ndarray       # (3,)
    orientation: np.ndarray    # unit quaternion (w,x,y,z), camera-to-world
    focal: float               # pixels
    width: int
    height: int
    near: float = 0.05
    far: float = 100.0

    def __post_init__(self):
        if not (0 < self.near < self.far):
            raise ShapeError(f"camera requires 0 < near < far, got {self.near}, {self.far}")
        if self.width < 1 or self.height < 1:
            raise ShapeError("camera resolution must be at least 1x1")

    def rotation_camera_to_world(self) -> np.ndarray:
        return quat_to_matrix(self.orientation)

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        """Map (N,3) world points into camera coordinates (+z forward)."""
        r_wc = self.rotation_camera_to_world().T
        return (np.atleast_2d(points) - self.position) @ r_wc.T

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        r_cw = self.rotation_camera_to_world()
        return np.atleast_2d(points) @ r_cw.T + self.position

    @property
    def cx(self) -> float:
        return self.width / 2.0

    @property
    def cy(self) -> float:
        return self.height / 2.0


def look_at_camera(position, target, focal: float, width: int, height: int,
                   near: float = 0.05, far: float = 100.0, up=(0.0, 0.0, 1.0)) -> Camera:
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward = forward / np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    if abs(np.dot(up, forward)) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(up, forward)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    r_cw = np.stack([right, down, forward], axis=1)  # columns: +x right, +y down, +z forward
    return Camera(position=position.astype(np.float32), orientation=matrix_to_quat(r_cw),
                  focal=float(focal), width=int(width), height=int(height),
                  near=near, far=far)


def camera_ring(center, radius: float, count: int, elevation: float = 0.0,
                focal: float = 70.0, width: int = 64, height: int = 64,
                near: float = 0.05, far: float = 100.0) -> list[Camera]:
    """Cameras on a ring, all at distance `radius` from `center`, looking at it.

    Consecutive cameras are the short-range view pairs; cameras count/2 apart
    are the long-range pairs. `elevation` lifts the ring onto a cone so the
    cameras view a horizontal surface from above (default 0 keeps the ring
    planar through the center).
    """
    if count < 2:
        raise ShapeError(f"camera ring needs at least 2 cameras, got {count}")
    if radius <= 0:
        raise ShapeError("camera ring radius must be positive")
    center = np.asarray(center, dtype=np.float64)
    cams = []
    for i in range(count):
        theta = 2.0 * np.pi * i / count
        offset = radius * np.array([
            np.cos(theta) * np.cos(elevation),
            np.sin(theta) * np.cos(elevation),
            np.sin(elevation),
        ])
        cams.append(look_at_camera(center + offset, center, focal, width, height, near, far))
    return cams


# -- persistence ---------------------------------------------------------------

def save_scene(scene: GaussianScene, path) -> None:
    n, d = scene.count, scene.embed_dim
    rec = np.concatenate([
        scene.positions, scene.rotations, scene.scales,
        scene.opacities[:, None], scene.colors, scene.embeddings], axis=1)
    with open(path, "wb") as fh:
        fh.write(GSCN_MAGIC)
        fh.write(struct.pack("<III", GSCN_VERSION, n, d))
        fh.write(np.ascontiguousarray(rec, dtype="<f4").tobytes())


def load_scene(path) -> GaussianScene:
    raw = Path(path).read_bytes()
    if raw[:4] != GSCN_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r} at byte 0, expected {GSCN_MAGIC!r}")
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header at byte {len(raw)}")
    version, n, d = struct.unpack_from("<III", raw, 4)
    if version != GSCN_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte 4")
    if n < 1:
        raise FormatError(f"{path}: scene record count {n} at byte 8 must be >= 1")
    if not (MIN_EMBED_DIM <= d <= MAX_EMBED_DIM):
        raise FormatError(
            f"{path}: embed dim {d} at byte 12 outside [{MIN_EMBED_DIM}, {MAX_EMBED_DIM}]")
    rec_len = 14 + d
    want = 16 + 4 * rec_len * n
    if len(raw) != want:
        raise FormatError(
            f"{path}: payload ends at byte {len(raw)}, expected {want} "
            f"(N={n}, D={d}, record={4 * rec_len} bytes)")
    rec = np.frombuffer(raw, dtype="<f4", count=rec_len * n, offset=16).reshape(n, rec_len)
    opacities = np.clip(rec[:, 10], 0.0, 1.0)  # compositing needs [0, 1]
    return GaussianScene(
        positions=rec[:, 0:3], rotations=rec[:, 3:7], scales=rec[:, 7:10],
        opacities=opacities, colors=rec[:, 11:14], embeddings=rec[:, 14:],
        source_tag=str(path))


# -- toy scene generation --------------------------------------------------------

def _smooth_colors(positions: np.ndarray) -> np.ndarray:
    """Low-frequency procedural color field with >=0.5 range per channel."""
    x, y, z = positions[:, 0], positions[:, 1], positions[:, 2]
    r = 0.5 + 0.45 * np.sin(3.3 * x + 0.7)
    g = 0.5 + 0.45 * np.sin(3.3 * y - 0.4 + 0.9 * z)
    b = 0.5 + 0.45 * np.sin(3.3 * (x + y) * 0.75 + 2.0 * z + 1.3)
    return np.stack([r, g, b], axis=1).astype(np.float32)


def _random_unit_quats(g: np.random.Generator, n: int) -> np.ndarray:
    q = g.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return q.astype(np.float32)


def generate_toy_scene(spec_kind: str, n: int, seed: int,
                       embed_dim: int = DEFAULT_EMBED_DIM) -> GaussianScene:
    """Deterministic desk-scale content scenes standing in for captured data."""
    if n < 1:
        raise ShapeError(f"toy scene needs n >= 1, got {n}")
    if spec_kind not in TOY_SCENE_KINDS:
        raise ValueError(f"unknown toy scene kind '{spec_kind}', choose from {TOY_SCENE_KINDS}")
    if not (MIN_EMBED_DIM <= embed_dim <= MAX_EMBED_DIM):
        raise ShapeError(f"embed_dim {embed_dim} outside [{MIN_EMBED_DIM}, {MAX_EMBED_DIM}]")
    g = named_stream(seed, f"toy-scene.{spec_kind}")

    if spec_kind == "lattice":
        side = int(np.ceil(n ** (1.0 / 3.0)))
        idx = np.arange(side ** 3)[:n]
        iz, iy, ix = idx // (side * side), (idx // side) % side, idx % side
        grid = np.stack([ix, iy, iz], axis=1).astype(np.float64)
        positions = (grid - (side - 1) / 2.0) * 0.45
        positions += g.uniform(-0.03, 0.03, size=positions.shape)
        scales = np.full((n, 3), 0.16) * g.uniform(0.8, 1.2, size=(n, 3))
        rotations = _random_unit_quats(g, n)
        opacities = g.uniform(0.75, 0.95, size=n)
    elif spec_kind == "two_clusters":
        centers = np.array([[-3.0, 0.0, 0.0], [3.0, 0.0, 0.0]])
        which = (np.arange(n) % 2)
        positions = centers[which] + g.normal(0.0, 0.5, size=(n, 3))
        scales = np.full((n, 3), 0.14) * g.uniform(0.8, 1.2, size=(n, 3))
        rotations = _random_unit_quats(g, n)
        opacities = g.uniform(0.7, 0.95, size=n)
    else:  # textured_slab
        side = int(np.ceil(np.sqrt(n)))
        idx = np.arange(side * side)[:n]
        iy, ix = idx // side, idx % side
        span = 2.0
        step = span / max(side - 1, 1)
        xy = np.stack([ix, iy], axis=1).astype(np.float64) * step - span / 2.0
        positions = np.concatenate([xy, np.zeros((n, 1))], axis=1)
        s_plane = max(step, 0.05) * 0.75
        scales = np.tile(np.array([s_plane, s_plane, 0.02]), (n, 1))
        rotations = np.tile(np.array([1.0, 0.0, 0.0, 0.0], dtype=np.float32), (n, 1))
        opacities = np.full(n, 0.92)

    colors = np.clip(_smooth_colors(positions), 0.0, 1.0)
    embeddings = np.zeros((n, embed_dim), dtype=np.float32)
    return GaussianScene(positions, rotations, scales, opacities, colors, embeddings,
                         source_tag=f"toy:{spec_kind}:n={n}:seed={seed}")
