"""CPU tile-based splatting of Gaussian scenes.

Projection follows the EWA recipe: the 3D covariance is pushed through the
world-to-camera rotation W and the perspective Jacobian J at the Gaussian
center, cov2d = J W Sigma W^T J^T, plus a 0.3 px^2 low-pass diagonal.

Compositing is front-to-back over view depth:

    alpha_i = min(0.99, opacity_i * exp(-0.5 d^T cov2d^{-1} d))
    out     = sum_i alpha_i * attr_i * prod_{j<i} (1 - alpha_j)

A splat contributes only inside its 3-sigma ellipse (d^T cov2d^{-1} d <= 9),
which makes the 16x16-tile bounding-box assignment exact rather than an
approximation, and accumulation stops once transmittance drops under 1e-4.
The same contribution weights composite colors and the D-channel embedding
maps, so rendering any per-Gaussian attribute is linear in that attribute;
`attribute_weights` exposes the weight matrix for gradient-based training.

Depth is the view-space z of the splat that first lifts accumulated opacity
to 0.5 (+inf where never reached).
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import FormatError, ShapeError
from .scene import Camera, GaussianPrimitive, GaussianScene, quat_to_matrix

TILE = 16
ALPHA_CLAMP = 0.99
CUTOFF_MAHALANOBIS_SQ = 9.0      # 3-sigma support
MIN_TRANSMITTANCE = 1e-4
LOWPASS = 0.3                    # px^2 added to cov2d diagonal
DEPTH_ALPHA = 0.5

FMAP_MAGIC = b"FMAP"


@dataclass
class Splat2D:
    mean2d: np.ndarray       # (2,) pixels
    cov2d: np.ndarray        # (2,2) symmetric, positive definite
    view_depth: float
    source_index: int


@dataclass
class RenderOutput:
    rgb: np.ndarray          # (H, W, 3)
    features: np.ndarray     # (H, W, D)
    depth: np.ndarray        # (H, W), +inf where uncovered
    alpha_mask: np.ndarray   # (H, W) accumulated opacity


def _scene_covariances(scene: GaussianScene) -> np.ndarray:
    """(N,3,3) world covariances from the quaternion/scale factorization."""
    q = scene.rotations.astype(np.float64)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    r = np.empty((scene.count, 3, 3))
    r[:, 0, 0] = 1 - 2 * (y * y + z * z)
    r[:, 0, 1] = 2 * (x * y - w * z)
    r[:, 0, 2] = 2 * (x * z + w * y)
    r[:, 1, 0] = 2 * (x * y + w * z)
    r[:, 1, 1] = 1 - 2 * (x * x + z * z)
    r[:, 1, 2] = 2 * (y * z - w * x)
    r[:, 2, 0] = 2 * (x * z - w * y)
    r[:, 2, 1] = 2 * (y * z + w * x)
    r[:, 2, 2] = 1 - 2 * (x * x + y * y)
    s2 = scene.scales.astype(np.float64) ** 2
    return np.einsum("nij,nj,nkj->nik", r, s2, r)


def _project_all(scene: GaussianScene, cam: Camera):
    """Vectorized projection; returns arrays for visible splats, depth-sorted."""
    w_rot = quat_to_matrix(cam.orientation).T.astype(np.float64)  # world -> camera
    p_cam = (scene.positions.astype(np.float64) - cam.position.astype(np.float64)) @ w_rot.T
    z = p_cam[:, 2]
    visible = (z >= cam.near) & (z <= cam.far)
    idx = np.nonzero(visible)[0]
    if idx.size == 0:
        return idx, None, None, None
    p = p_cam[idx]
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    f = cam.focal
    mean2d = np.stack([f * x / z + cam.cx, f * y / z + cam.cy], axis=1)

    jac = np.zeros((idx.size, 2, 3))
    jac[:, 0, 0] = f / z
    jac[:, 0, 2] = -f * x / (z * z)
    jac[:, 1, 1] = f / z
    jac[:, 1, 2] = -f * y / (z * z)
    m = jac @ w_rot
    cov3d = _scene_covariances(scene)[idx]
    cov2d = np.einsum("nij,njk,nlk->nil", m, cov3d, m)
    cov2d[:, 0, 0] += LOWPASS
    cov2d[:, 1, 1] += LOWPASS

    order = np.argsort(z, kind="stable")
    return idx[order], mean2d[order], cov2d[order], z[order]


def project_gaussian(g: GaussianPrimitive, cam: Camera) -> Optional[Splat2D]:
    """EWA projection of one Gaussian; None when outside [near, far]."""
    scene = GaussianScene(
        g.position[None], g.rotation[None], g.scale[None],
        np.array([g.opacity]), g.color[None], g.embedding[None])
    idx, mean2d, cov2d, z = _project_all(scene, cam)
    if idx.size == 0:
        return None
    return Splat2D(mean2d=mean2d[0].astype(np.float32),
                   cov2d=cov2d[0].astype(np.float32),
                   view_depth=float(z[0]), source_index=0)


def _conics_and_radii(cov2d: np.ndarray):
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)  # inverse as (A, B, C)
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = 3.0 * np.sqrt(lam_max)
    return conic, radius


def _composite_tile(px, py, splats, attrs, want_depth):
    """Sequential front-to-back compositing for one tile's pixel block.

    px, py: flat pixel sample coordinates; splats: (mean2d, conic, depth, opacity)
    already depth-sorted; attrs: (S, C) per-splat attribute rows.
    """
    means, conics, depths, opac = splats
    npix = px.size
    out = np.zeros((npix, attrs.shape[1]))
    trans = np.ones(npix)
    alpha_acc = np.zeros(npix)
    depth_map = np.full(npix, np.inf)
    active = trans >= MIN_TRANSMITTANCE
    for s in range(means.shape[0]):
        dx = px - means[s, 0]
        dy = py - means[s, 1]
        power = 0.5 * (conics[s, 0] * dx * dx + 2.0 * conics[s, 1] * dx * dy
                       + conics[s, 2] * dy * dy)
        hit = active & (power <= 0.5 * CUTOFF_MAHALANOBIS_SQ)
        if not hit.any():
            continue
        alpha = np.where(hit, np.minimum(ALPHA_CLAMP, opac[s] * np.exp(-power)), 0.0)
        contrib = alpha * trans
        out += contrib[:, None] * attrs[s]
        if want_depth:
            new_acc = alpha_acc + contrib
            crossed = (alpha_acc < DEPTH_ALPHA) & (new_acc >= DEPTH_ALPHA)
            depth_map[crossed] = depths[s]
            alpha_acc = new_acc
        else:
            alpha_acc += contrib
        trans = trans * (1.0 - alpha)
        active = trans >= MIN_TRANSMITTANCE
        if not active.any():
            break
    return out, alpha_acc, depth_map


def render(scene: GaussianScene, cam: Camera, threads: int = 1) -> RenderOutput:
    """Rasterize colors, embeddings, depth, and coverage for one camera."""
    if scene.count < 1:
        raise ShapeError("render: scene is empty")
    h, w = cam.height, cam.width
    d = scene.embed_dim
    rgb = np.zeros((h, w, 3), dtype=np.float32)
    feats = np.zeros((h, w, d), dtype=np.float32)
    depth = np.full((h, w), np.inf, dtype=np.float32)
    alpha = np.zeros((h, w), dtype=np.float32)

    idx, mean2d, cov2d, z = _project_all(scene, cam)
    if idx.size == 0:
        return RenderOutput(rgb, feats, depth, alpha)
    conic, radius = _conics_and_radii(cov2d)
    opac = scene.opacities[idx].astype(np.float64)
    attrs = np.concatenate([scene.colors[idx], scene.embeddings[idx]], axis=1).astype(np.float64)

    tiles_x = (w + TILE - 1) // TILE
    tiles_y = (h + TILE - 1) // TILE
    tile_lists: list[list[int]] = [[] for _ in range(tiles_x * tiles_y)]
    x0 = np.clip(((mean2d[:, 0] - radius) // TILE).astype(int), 0, tiles_x - 1)
    x1 = np.clip(((mean2d[:, 0] + radius) // TILE).astype(int), 0, tiles_x - 1)
    y0 = np.clip(((mean2d[:, 1] - radius) // TILE).astype(int), 0, tiles_y - 1)
    y1 = np.clip(((mean2d[:, 1] + radius) // TILE).astype(int), 0, tiles_y - 1)
    inside = ((mean2d[:, 0] + radius) >= 0) & ((mean2d[:, 0] - radius) < w) & \
             ((mean2d[:, 1] + radius) >= 0) & ((mean2d[:, 1] - radius) < h)
    for s in np.nonzero(inside)[0]:
        for ty in range(y0[s], y1[s] + 1):
            base = ty * tiles_x
            for tx in range(x0[s], x1[s] + 1):
                tile_lists[base + tx].append(s)

    def run_tile(t):
        sel = tile_lists[t]
        if not sel:
            return
        ty, tx = divmod(t, tiles_x)
        ys = np.arange(ty * TILE, min((ty + 1) * TILE, h))
        xs = np.arange(tx * TILE, min((tx + 1) * TILE, w))
        gy, gx = np.meshgrid(ys, xs, indexing="ij")
        px = gx.ravel() + 0.5
        py = gy.ravel() + 0.5
        sel = np.asarray(sel)
        splats = (mean2d[sel], conic[sel], z[sel], opac[sel])
        out, acc, dep = _composite_tile(px, py, splats, attrs[sel], want_depth=True)
        block = (slice(ys[0], ys[-1] + 1), slice(xs[0], xs[-1] + 1))
        shape2 = (ys.size, xs.size)
        rgb[block] = out[:, :3].reshape(*shape2, 3)
        feats[block] = out[:, 3:].reshape(*shape2, d)
        alpha[block] = acc.reshape(shape2)
        depth[block] = dep.reshape(shape2)

    tile_ids = [t for t in range(tiles_x * tiles_y) if tile_lists[t]]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run_tile, tile_ids))
    else:
        for t in tile_ids:
            run_tile(t)
    return RenderOutput(rgb, feats, depth, alpha)


def attribute_weights(scene: GaussianScene, cam: Camera) -> np.ndarray:
    """(H*W, N) compositing weights: render(attr) == weights @ attr rows.

    Depends only on geometry and opacity, so with those frozen any loss on a
    rendered attribute map is differentiable through a single matmul.
    """
    h, w = cam.height, cam.width
    weights = np.zeros((h * w, scene.count), dtype=np.float32)
    idx, mean2d, cov2d, z = _project_all(scene, cam)
    if idx.size == 0:
        return weights
    conic, radius = _conics_and_radii(cov2d)
    opac = scene.opacities[idx].astype(np.float64)

    gy, gx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    px = gx.ravel() + 0.5
    py = gy.ravel() + 0.5
    trans = np.ones(h * w)
    active = trans >= MIN_TRANSMITTANCE
    for s in range(idx.size):
        dx = px - mean2d[s, 0]
        dy = py - mean2d[s, 1]
        power = 0.5 * (conic[s, 0] * dx * dx + 2.0 * conic[s, 1] * dx * dy
                       + conic[s, 2] * dy * dy)
        hit = active & (power <= 0.5 * CUTOFF_MAHALANOBIS_SQ)
        if not hit.any():
            continue
        alpha = np.where(hit, np.minimum(ALPHA_CLAMP, opac[s] * np.exp(-power)), 0.0)
        weights[:, idx[s]] = (alpha * trans).astype(np.float32)
        trans = trans * (1.0 - alpha)
        active = trans >= MIN_TRANSMITTANCE
        if not active.any():
            break
    return weights


# -- depth reprojection ---------------------------------------------------------

def bilinear_sample(img: np.ndarray, u: np.ndarray, v: np.ndarray,
                    fill: float = 0.0) -> np.ndarray:
    """Sample img (H,W[,C]) at continuous pixel coords; centers at (i+0.5)."""
    h, w = img.shape[:2]
    x = np.asarray(u, dtype=np.float64) - 0.5
    y = np.asarray(v, dtype=np.float64) - 0.5
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    fx = x - x0
    fy = y - y0
    out_shape = x.shape if img.ndim == 2 else (*x.shape, img.shape[2])
    acc = np.zeros(out_shape)
    for dy in (0, 1):
        for dx in (0, 1):
            wgt = (fx if dx else 1 - fx) * (fy if dy else 1 - fy)
            xi = np.clip(x0 + dx, 0, w - 1)
            yi = np.clip(y0 + dy, 0, h - 1)
            val = img[yi, xi]
            if img.ndim == 3:
                wgt = wgt[..., None]
            acc = acc + wgt * val
    oob = (x < -0.5) | (x > w - 0.5) | (y < -0.5) | (y > h - 0.5)
    if img.ndim == 3:
        acc[oob] = fill
    else:
        acc = np.where(oob, fill, acc)
    return acc


def warp_map(src_cam: Camera, dst_cam: Camera, depth_src: np.ndarray,
             depth_dst: Optional[np.ndarray] = None,
             depth_rel_tol: float = 0.02):
    """Pixel correspondences src -> dst through the rendered src depth.

    Each finite-depth src pixel is unprojected at its sample center, moved to
    world space, and reprojected into dst. Pixels are invalid where the src
    depth is +inf, the reprojection leaves the dst frame or frustum, or (when
    depth_dst is given) the reprojected depth disagrees with the dst render
    by more than depth_rel_tol (occlusion).

    Returns ((H, W, 2) dst pixel coords, (H, W) validity mask).
    """
    h, w = depth_src.shape
    if (h, w) != (src_cam.height, src_cam.width):
        raise ShapeError(f"depth map {depth_src.shape} does not match camera "
                         f"({src_cam.height}, {src_cam.width})")
    gy, gx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    u = gx + 0.5
    v = gy + 0.5
    z = depth_src.astype(np.float64)
    finite = np.isfinite(z)
    zs = np.where(finite, z, 1.0)

    f = src_cam.focal
    x_cam = (u - src_cam.cx) * zs / f
    y_cam = (v - src_cam.cy) * zs / f
    pts_cam = np.stack([x_cam, y_cam, zs], axis=-1).reshape(-1, 3)
    pts_world = src_cam.camera_to_world(pts_cam)
    pts_dst = dst_cam.world_to_camera(pts_world).reshape(h, w, 3)

    zd = pts_dst[..., 2]
    in_front = (zd >= dst_cam.near) & (zd <= dst_cam.far)
    zd_safe = np.where(in_front, zd, 1.0)
    ud = dst_cam.focal * pts_dst[..., 0] / zd_safe + dst_cam.cx
    vd = dst_cam.focal * pts_dst[..., 1] / zd_safe + dst_cam.cy
    in_frame = (ud >= 0) & (ud <= dst_cam.width) & (vd >= 0) & (vd <= dst_cam.height)
    valid = finite & in_front & in_frame

    if depth_dst is not None:
        sampled = bilinear_sample(np.where(np.isfinite(depth_dst), depth_dst, -1.0),
                                  ud, vd, fill=-1.0)
        agree = (sampled > 0) & (np.abs(sampled - zd_safe) <= depth_rel_tol * zd_safe)
        valid = valid & agree

    coords = np.stack([ud, vd], axis=-1).astype(np.float32)
    return coords, valid


# -- image / feature-map files -----------------------------------------------------

def write_ppm(path, rgb: np.ndarray) -> None:
    """Binary PPM (P6, maxval 255); values round(255*clamp(x,0,1))."""
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ShapeError(f"write_ppm expects (H,W,3), got {rgb.shape}")
    h, w = rgb.shape[:2]
    quant = np.round(255.0 * np.clip(rgb, 0.0, 1.0)).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(quant.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P6"):
        raise FormatError(f"{path}: not a binary PPM")
    parts = raw.split(b"\n", 3)
    w, h = (int(t) for t in parts[1].split())
    data = np.frombuffer(parts[3], dtype=np.uint8, count=h * w * 3)
    return data.reshape(h, w, 3).astype(np.float32) / 255.0


def write_fmap(path, array: np.ndarray) -> None:
    """Raw float map: magic FMAP, u32 H, u32 W, u32 C, f32 LE data."""
    arr = np.asarray(array, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ShapeError(f"write_fmap expects (H,W) or (H,W,C), got {array.shape}")
    h, w, c = arr.shape
    with open(path, "wb") as fh:
        fh.write(FMAP_MAGIC)
        fh.write(struct.pack("<III", h, w, c))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_fmap(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != FMAP_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {FMAP_MAGIC!r}")
    h, w, c = struct.unpack_from("<III", raw, 4)
    want = 16 + 4 * h * w * c
    if len(raw) != want:
        raise FormatError(f"{path}: expected {want} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", offset=16).reshape(h, w, c).astype(np.float32)
