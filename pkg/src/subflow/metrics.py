"""Evaluation protocol: paired cosine similarity, Frechet distance between
feature sets, and depth-warp masked RMSE for multi-view consistency."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .encoders import FeatureSet
from .errors import NumericsError, ShapeError
from .rasterizer import bilinear_sample, warp_map
from .scene import Camera, GaussianScene


@dataclass
class GaussianFit:
    mean: np.ndarray          # (d,)
    covariance: np.ndarray    # (d, d) symmetric PSD


@dataclass
class ConsistencyReport:
    range: str                 # "short" | "long"
    masked_rmse: float
    valid_pixel_fraction: float

    def __post_init__(self):
        if self.range not in ("short", "long"):
            raise ValueError(f"range must be short/long, got {self.range}")


def cosine_sim(a: FeatureSet, b: FeatureSet) -> float:
    """Mean row-wise cosine between paired sets; zero rows contribute 0."""
    if a.count != b.count:
        raise ShapeError(f"cosine_sim: row counts differ ({a.count} vs {b.count})")
    if a.dim != b.dim:
        raise ShapeError(f"cosine_sim: dims differ ({a.dim} vs {b.dim})")
    x = a.vectors.astype(np.float64)
    y = b.vectors.astype(np.float64)
    nx = np.linalg.norm(x, axis=1)
    ny = np.linalg.norm(y, axis=1)
    ok = (nx > 0) & (ny > 0)
    dots = np.zeros(a.count)
    dots[ok] = (x[ok] * y[ok]).sum(axis=1) / (nx[ok] * ny[ok])
    return float(dots.mean())


def fit_gaussian(fs: FeatureSet) -> GaussianFit:
    """Moment summary with the unbiased covariance, eigen-floored to PSD."""
    x = fs.vectors.astype(np.float64)
    mean = x.mean(axis=0)
    if x.shape[0] < 2:
        cov = np.zeros((x.shape[1], x.shape[1]))
    else:
        cov = np.cov(x, rowvar=False, ddof=1)
        cov = np.atleast_2d(cov)
    cov = (cov + cov.T) / 2.0
    vals, vecs = np.linalg.eigh(cov)
    cov = (vecs * np.maximum(vals, 0.0)) @ vecs.T
    return GaussianFit(mean=mean, covariance=(cov + cov.T) / 2.0)


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    return (vecs * np.sqrt(np.maximum(vals, 0.0))) @ vecs.T


def frechet_distance(a: FeatureSet, b: FeatureSet) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}), all in float64.

    The cross-covariance square root is taken via the symmetric form
    S_a^{1/2} S_b S_a^{1/2}; eigenvalues below -1e-8 are a numerics error,
    small negatives are floored to zero.
    """
    if a.dim != b.dim:
        raise ShapeError(f"frechet_distance: dims differ ({a.dim} vs {b.dim})")
    fa, fb = fit_gaussian(a), fit_gaussian(b)
    mean_term = float(((fa.mean - fb.mean) ** 2).sum())
    ra = _psd_sqrt(fa.covariance)
    inner = ra @ fb.covariance @ ra
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    if np.any(vals < -1e-8):
        raise NumericsError(f"frechet_distance: cross term eigenvalue {vals.min():.3e} < -1e-8")
    cross = np.sqrt(np.maximum(vals, 0.0)).sum()
    trace_term = float(np.trace(fa.covariance) + np.trace(fb.covariance) - 2.0 * cross)
    return mean_term + trace_term


def masked_rmse(img_a: np.ndarray, img_b: np.ndarray, correspondences: np.ndarray,
                valid: np.ndarray, range_tag: str = "short") -> ConsistencyReport:
    """RMSE of |img_a(p) - img_b(warp(p))| over valid pixels, bilinear in img_b."""
    if img_a.shape != img_b.shape:
        raise ShapeError(f"masked_rmse: image shapes differ {img_a.shape} vs {img_b.shape}")
    if valid.sum() == 0:
        raise NumericsError("masked_rmse: no valid correspondences")
    u = correspondences[..., 0]
    v = correspondences[..., 1]
    warped = bilinear_sample(img_b.astype(np.float64), u, v, fill=0.0)
    diff = (img_a.astype(np.float64) - warped)[valid]
    rmse = float(np.sqrt((diff ** 2).mean()))
    fraction = float(valid.mean())
    return ConsistencyReport(range=range_tag, masked_rmse=rmse, valid_pixel_fraction=fraction)


def eval_consistency(scene: GaussianScene, cams: Sequence[Camera],
                     render_fn: Callable) -> list[ConsistencyReport]:
    """Short-range = consecutive ring pairs (cyclic), long-range = half-ring pairs."""
    n = len(cams)
    if n < 4:
        raise ShapeError(f"consistency protocol needs >= 4 ring cameras, got {n}")
    renders = [render_fn(scene, cam) for cam in cams]
    reports = []
    pairs = [("short", i, (i + 1) % n) for i in range(n)]
    pairs += [("long", i, (i + n // 2) % n) for i in range(n // 2)]
    for tag, i, j in pairs:
        coords, valid = warp_map(cams[i], cams[j], renders[i].depth, renders[j].depth)
        reports.append(masked_rmse(renders[i].rgb, renders[j].rgb, coords, valid, tag))
    return reports


def consistency_summary(reports: Sequence[ConsistencyReport]) -> dict[str, float]:
    out = {}
    for tag in ("short", "long"):
        vals = [r.masked_rmse for r in reports if r.range == tag]
        if vals:
            out[tag] = float(np.mean(vals))
    return out


def metrics_csv_rows(entries: Sequence[tuple[str, str, float]]) -> str:
    """CSV export: metric,range_or_round,value (one row per entry)."""
    lines = ["metric,range_or_round,value"]
    for metric, key, value in entries:
        lines.append(f"{metric},{key},{value:.9g}")
    return "\n".join(lines) + "\n"
