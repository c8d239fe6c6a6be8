"""Per-Gaussian color stylization.

The scene carries a frozen color embedding per Gaussian. Styling is a pure
statistics transfer: embeddings are re-normalized channel-wise (AdaIN) to
match the target style statistics and decoded back to RGB by a small shared
net. Geometry, opacity, and the embeddings themselves never change, so any
two views of a stylized scene differ only by rasterization.

Style statistics live in the embedding dimension. A style-domain vector
(twice that length) yields them by the split convention: first half is the
mean, softplus of the second half is the (floored) standard deviation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .diffcore import Adam, DenseNet, DenseNetSpec, Tensor
from .diffcore import tensor as dt
from .diffcore.rng import named_stream
from .encoders import FeatureEncoders, FeatureSet
from .errors import ShapeError, StateError
from .rasterizer import attribute_weights, render
from .scene import Camera, GaussianScene

EPSILON_STD = 1e-6


@dataclass
class StyleStats:
    mu: np.ndarray       # (D,)
    sigma: np.ndarray    # (D,) floored at EPSILON_STD

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float32).reshape(-1)
        self.sigma = np.maximum(np.asarray(self.sigma, dtype=np.float32).reshape(-1),
                                EPSILON_STD)
        if self.mu.shape != self.sigma.shape:
            raise ShapeError(f"style stats mu/sigma shapes differ: "
                             f"{self.mu.shape} vs {self.sigma.shape}")

    @property
    def dim(self) -> int:
        return self.mu.shape[0]


@dataclass
class AdainResult:
    values: np.ndarray            # (N, D)
    degenerate: np.ndarray        # (D,) bool; channels whose content std was ~0


def adain(embeddings: np.ndarray, style: StyleStats) -> AdainResult:
    """Channel-wise renormalization of the embedding population.

    out = sigma_style * (e - mu_content) / sigma_content + mu_style, with the
    content statistics taken over the N rows (population std). Channels with
    zero content spread are flagged and use the epsilon floor instead.
    """
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 2 or e.shape[0] < 2:
        raise ShapeError(f"adain needs (N>=2, D) embeddings, got {e.shape}")
    if e.shape[1] != style.dim:
        raise ShapeError(f"adain: embedding dim {e.shape[1]} != style dim {style.dim}")
    mu_c = e.mean(axis=0)
    sigma_c = e.std(axis=0)
    degenerate = sigma_c < EPSILON_STD
    sigma_c = np.maximum(sigma_c, EPSILON_STD)
    out = style.sigma.astype(np.float64) * (e - mu_c) / sigma_c + style.mu.astype(np.float64)
    return AdainResult(values=out.astype(np.float32), degenerate=degenerate)


def stats_from_feature(x: Union[FeatureSet, np.ndarray]) -> StyleStats:
    """Style statistics from either a feature set or one style-domain vector.

    Sets: per-channel mean and population std over rows. Single vector: split
    into halves, second half through softplus for positivity.
    """
    if isinstance(x, FeatureSet):
        rows = x.vectors.astype(np.float64)
        return StyleStats(rows.mean(axis=0), rows.std(axis=0))
    vec = np.asarray(x, dtype=np.float64).reshape(-1)
    if vec.size % 2:
        raise ShapeError(f"style-domain vector length {vec.size} must be even to split")
    half = vec.size // 2
    sigma = np.logaddexp(0.0, vec[half:])  # softplus
    return StyleStats(vec[:half], sigma)


class DecoderNet:
    """Shared per-Gaussian decoder: embedding rows -> RGB in [0,1] via sigmoid."""

    def __init__(self, embed_dim: int, hidden: tuple[int, ...] = (64,), seed: int = 0):
        self.net = DenseNet(DenseNetSpec((embed_dim, *hidden, 3), "relu", seed),
                            name="decoder")
        self.embed_dim = embed_dim
        self.trained = False

    def parameters(self):
        return self.net.parameters()

    def forward(self, embeddings) -> Tensor:
        return dt.sigmoid(self.net(embeddings))

    def decode(self, embeddings: np.ndarray) -> np.ndarray:
        rows = np.atleast_2d(np.asarray(embeddings, dtype=np.float32))
        if rows.shape[1] != self.embed_dim:
            raise ShapeError(f"decoder expects dim {self.embed_dim}, got {rows.shape[1]}")
        return self.forward(Tensor(rows)).data


@dataclass
class DistillReport:
    reconstruction_mse: float
    projection_mse_first: float
    projection_mse_last: float


def initial_embeddings(colors: np.ndarray, embed_dim: int) -> np.ndarray:
    """Deterministic color-derived init: equal colors give equal embeddings."""
    reps = int(np.ceil(embed_dim / 3))
    tiled = np.tile(np.asarray(colors, dtype=np.float32) - 0.5, (1, reps))
    return np.ascontiguousarray(tiled[:, :embed_dim])


def distill_embeddings(scene: GaussianScene, cams: Sequence[Camera],
                       encoders: FeatureEncoders, steps: int = 800,
                       seed: int = 0, lr: float = 5e-3,
                       projection_weight: float = 0.2,
                       decoder_hidden: tuple[int, ...] = (64,)):
    """Train per-Gaussian embeddings plus the decoder, then freeze embeddings.

    Two objectives: (a) the decoder reproduces each Gaussian's own color from
    its embedding; (b) rendered embedding maps track a fixed projection of
    the first encoder tap of the rendered content image, computed through the
    frozen compositing weights of each camera.
    """
    if len(cams) < 1:
        raise ShapeError("distill_embeddings needs at least one camera")
    d = scene.embed_dim
    embed = Tensor(initial_embeddings(scene.colors, d), requires_grad=True)
    decoder = DecoderNet(d, hidden=decoder_hidden, seed=seed)
    colors_t = Tensor(scene.colors)

    proj = named_stream(seed, "distill.tap_proj").standard_normal(
        (d, encoders.tap_widths[0])).astype(np.float32)
    proj /= np.linalg.norm(proj, axis=1, keepdims=True)

    cam_data = []
    for cam in cams:
        out = render(scene, cam)
        weights = attribute_weights(scene, cam)
        covered = out.alpha_mask.reshape(-1) > 0.6
        if covered.sum() < 16:
            covered = out.alpha_mask.reshape(-1) > 0.0
        if covered.sum() == 0:
            cam_data.append(None)  # camera sees nothing; no projection target
            continue
        tap0 = encoders.tap_features(out.rgb)[0].data          # (C, H, W)
        target = tap0.reshape(tap0.shape[0], -1).T @ proj.T    # (H*W, D)
        scale = max(float(target[covered].std()), 1e-6)
        cam_data.append((Tensor(weights[covered]), Tensor(target[covered] / scale)))

    opt = Adam([embed] + decoder.parameters(), lr=lr)
    g = named_stream(seed, "distill.cams")
    proj_first = proj_last = float("nan")
    for step in range(steps):
        pick = cam_data[int(g.integers(0, len(cam_data)))]
        recon = dt.sub(decoder.forward(embed), colors_t)
        loss = dt.tmean(dt.mul(recon, recon))
        if pick is not None:
            w_cov, target = pick
            pdiff = dt.sub(dt.matmul(w_cov, embed), target)
            loss_b = dt.tmean(dt.mul(pdiff, pdiff))
            loss = dt.add(loss, dt.mul(loss_b, projection_weight))
            if np.isnan(proj_first):
                proj_first = loss_b.item()
            proj_last = loss_b.item()
        loss.backward()
        opt.step()
        opt.zero_grad()

    final_embed = embed.data.copy()
    recon_mse = float(((decoder.decode(final_embed) - scene.colors) ** 2).mean())
    decoder.trained = True
    report = DistillReport(reconstruction_mse=recon_mse,
                           projection_mse_first=proj_first,
                           projection_mse_last=proj_last)
    return scene.with_embeddings(final_embed, distilled=True), decoder, report


def stylize_scene(scene: GaussianScene, style: StyleStats,
                  decoder: DecoderNet) -> GaussianScene:
    """Replace colors by decode(adain(embeddings)); geometry is untouched."""
    if not scene.distilled:
        raise StateError("stylize_scene requires a distilled scene")
    if not decoder.trained:
        raise StateError("stylize_scene requires a trained decoder")
    transferred = adain(scene.embeddings, style)
    colors = decoder.decode(transferred.values)
    return scene.with_colors(colors, source_tag=f"stylized:{scene.source_tag}")
