"""Training objective stack for scene stylization.

Rendered views of the stylized scene are produced through the frozen
compositing weights of each camera, so every loss below is differentiable
with respect to the decoder parameters without touching the rasterizer:

  content      MSE of deepest encoder-tap features vs the content render
  style        sum over taps of squared channel mean/std gaps to the style
  observation  sum over all taps of squared feature gaps to a 2D-stylized
               prior image of the same view
  suppression  adversarial signal from a shared-weight multi-scale
               discriminator separating the prior from the render

The 2D prior generator is the classic AdaIN pipeline in the pseudo encoder's
feature space, with its decoder pre-trained once per encoder seed by image
reconstruction on procedural textures.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .diffcore import Adam, Conv2dLayer, Tensor
from .diffcore import tensor as dt
from .diffcore.rng import named_stream
from .encoders import FeatureEncoders, procedural_texture
from .errors import NumericsError, ShapeError, StateError
from .flowalign import FlowPipeline
from .rasterizer import attribute_weights, render
from .scene import Camera, GaussianScene
from .transfer import DecoderNet, StyleStats, adain, stats_from_feature

LOG_CLAMP = 1e-7
GENERATOR_TAP = 1   # AdaIN space of the 2D prior: second tap (half resolution)


@dataclass(frozen=True)
class LossWeights:
    lambda_style: float = 10.0
    lambda_obs: float = 0.5
    lambda_flow: float = 1.0
    suppression_weight: float = 0.05

    def __post_init__(self):
        vals = (self.lambda_style, self.lambda_obs, self.lambda_flow, self.suppression_weight)
        if any((not np.isfinite(v)) or v < 0 for v in vals):
            raise ShapeError(f"loss weights must be finite and >= 0, got {vals}")


def _chw(image) -> Tensor:
    if isinstance(image, Tensor):
        return image
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected (H, W, 3) image, got {img.shape}")
    return Tensor(np.transpose(img, (2, 0, 1)))


def _spatial_mean_std(tap: Tensor) -> tuple[Tensor, Tensor]:
    c = tap.data.shape[0]
    flat = dt.reshape(tap, (c, -1))
    mu = dt.tmean(flat, axis=1)
    centered = dt.sub(flat, dt.tmean(flat, axis=1, keepdims=True))
    var = dt.tmean(dt.mul(centered, centered), axis=1)
    return mu, dt.sqrt(dt.add(var, 1e-12))


def content_loss(render_stylized, render_content, encoders: FeatureEncoders) -> Tensor:
    """MSE between deepest-tap features of the two views."""
    a, b = _chw(render_stylized), _chw(render_content)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"content_loss: resolutions differ {a.data.shape} vs {b.data.shape}")
    fa = encoders.tap_features(a)[-1]
    fb = encoders.tap_features(b)[-1]
    diff = dt.sub(fa, fb)
    return dt.tmean(dt.mul(diff, diff))


def style_loss(render_stylized, ref_tap_stats: Sequence[tuple[np.ndarray, np.ndarray]],
               encoders: FeatureEncoders) -> Tensor:
    """Sum over taps of squared channel-statistic gaps to the reference."""
    img = _chw(render_stylized)
    taps = encoders.tap_features(img)
    if len(ref_tap_stats) != len(taps):
        raise ShapeError(f"style_loss: reference covers {len(ref_tap_stats)} taps, "
                         f"encoder has {len(taps)}")
    total = None
    for tap, (mu_ref, sigma_ref) in zip(taps, ref_tap_stats):
        mu, sigma = _spatial_mean_std(tap)
        dmu = dt.sub(mu, Tensor(np.asarray(mu_ref, dtype=np.float32)))
        dsig = dt.sub(sigma, Tensor(np.asarray(sigma_ref, dtype=np.float32)))
        term = dt.add(dt.tsum(dt.mul(dmu, dmu)), dt.tsum(dt.mul(dsig, dsig)))
        total = term if total is None else dt.add(total, term)
    return total


def observation_loss(i_g, i_f, encoders: FeatureEncoders) -> Tensor:
    """Sum over all taps of mean squared feature differences."""
    a, b = _chw(i_g), _chw(i_f)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"observation_loss: resolutions differ {a.data.shape} vs {b.data.shape}")
    total = None
    for fa, fb in zip(encoders.tap_features(a), encoders.tap_features(b)):
        diff = dt.sub(fa, fb)
        term = dt.tmean(dt.mul(diff, diff))
        total = term if total is None else dt.add(total, term)
    return total


# -- 2D generator prior -------------------------------------------------------------

class Decoder2D:
    """Upsampling conv decoder from tap-1 feature maps back to an RGB image."""

    def __init__(self, channels: int = 16, seed: int = 0):
        self.conv1 = Conv2dLayer(channels, channels, k=3, stride=1, padding=1,
                                 seed=seed, name="dec2d.c1")
        self.conv2 = Conv2dLayer(channels, 3, k=3, stride=1, padding=1,
                                 seed=seed, name="dec2d.c2")
        self.trained = False

    def parameters(self):
        return self.conv1.parameters() + self.conv2.parameters()

    def forward(self, feats: Tensor) -> Tensor:
        h = dt.upsample2x(feats)
        h = dt.relu(self.conv1(h))
        return dt.sigmoid(self.conv2(h))

    def decode(self, feats: np.ndarray) -> np.ndarray:
        out = self.forward(Tensor(feats)).data
        return np.transpose(out, (1, 2, 0))


def train_decoder2d(encoders: FeatureEncoders, corpus: int = 200, steps: int = 2000,
                    seed: int = 0, lr: float = 2e-3, size: int = 64) -> Decoder2D:
    """Pre-train the 2D decoder by reconstruction on procedural textures."""
    dec = Decoder2D(channels=encoders.tap_widths[GENERATOR_TAP], seed=seed)
    feats = []
    targets = []
    for i in range(corpus):
        img = procedural_texture(seed, i, size=size)
        feats.append(encoders.tap_features(img)[GENERATOR_TAP].data)
        targets.append(np.transpose(img, (2, 0, 1)))
    opt = Adam(dec.parameters(), lr=lr)
    g = named_stream(seed, "decoder2d.batches")
    for _ in range(steps):
        i = int(g.integers(0, corpus))
        out = dec.forward(Tensor(feats[i]))
        diff = dt.sub(out, Tensor(targets[i]))
        loss = dt.tmean(dt.mul(diff, diff))
        loss.backward()
        opt.step()
        opt.zero_grad()
    dec.trained = True
    return dec


def generator_2d(content_img: np.ndarray, style_img: np.ndarray,
                 encoders: FeatureEncoders, decoder2d: Decoder2D) -> np.ndarray:
    """2D AdaIN prior: re-normalize content tap features to the style's
    statistics and decode. Deterministic given the trained decoder."""
    if not decoder2d.trained:
        raise StateError("generator_2d requires a pre-trained 2D decoder")
    f = encoders.tap_features(content_img)[GENERATOR_TAP].data
    mu_s, sigma_s = encoders.tap_stats(style_img)[GENERATOR_TAP]
    c = f.shape[0]
    flat = f.reshape(c, -1).T                       # (HW, C): rows are positions
    moved = adain(flat, StyleStats(mu_s, sigma_s)).values
    f_hat = moved.T.reshape(f.shape)
    return decoder2d.decode(f_hat)


# -- suppression: multi-scale discriminator -----------------------------------------------

class DiscriminatorNet:
    """Shared conv stack scored at several image scales (sigmoid scalars)."""

    def __init__(self, scales: int = 3, width: int = 16, seed: int = 0):
        if scales < 2:
            raise ShapeError(f"discriminator needs >= 2 scales, got {scales}")
        self.scales = scales
        self.layers = [
            Conv2dLayer(3, width, k=3, stride=2, padding=1, seed=seed, name="disc.c0"),
            Conv2dLayer(width, width, k=3, stride=2, padding=1, seed=seed, name="disc.c1"),
            Conv2dLayer(width, 1, k=3, stride=1, padding=1, seed=seed, name="disc.c2"),
        ]

    def parameters(self):
        out = []
        for layer in self.layers:
            out.extend(layer.parameters())
        return out

    def score_scales(self, image) -> list[Tensor]:
        """One sigmoid scalar per scale, strictly inside (0, 1)."""
        h = _chw(image)
        scores = []
        for s in range(self.scales):
            f = h
            for i, layer in enumerate(self.layers):
                f = layer(f)
                if i < len(self.layers) - 1:
                    f = dt.relu(f)
            scores.append(dt.sigmoid(dt.tmean(f)))
            if s < self.scales - 1:
                h = dt.avg_pool2d(h, 2)
        return scores


def suppression_loss(i_g, i_f, disc: DiscriminatorNet) -> tuple[Tensor, Tensor]:
    """(discriminator loss, generator signal) from the prior/render pair.

    disc_loss = -mean_scales[ log eta(I_g) + log(1 - eta(I_f)) ]  (ascent as
    descent; I_f is detached). gen_signal = -mean_scales log eta(I_f), the
    non-saturating form that pushes the decoder toward the prior's verdict.
    """
    scores_g = disc.score_scales(i_g)
    i_f_t = _chw(i_f)
    scores_f_detached = disc.score_scales(Tensor(i_f_t.data))
    scores_f = disc.score_scales(i_f_t)

    def clamped_log(t: Tensor) -> Tensor:
        return dt.log(dt.clamp(t, LOG_CLAMP, 1.0 - LOG_CLAMP))

    terms = []
    for sg, sf in zip(scores_g, scores_f_detached):
        terms.append(dt.add(clamped_log(sg), clamped_log(dt.sub(1.0, sf))))
    stacked = dt.concat([dt.reshape(t, (1,)) for t in terms], axis=0)
    disc_loss = dt.mul(dt.tmean(stacked), -1.0)

    gen_terms = [clamped_log(sf) for sf in scores_f]
    gen_stacked = dt.concat([dt.reshape(t, (1,)) for t in gen_terms], axis=0)
    gen_signal = dt.mul(dt.tmean(gen_stacked), -1.0)
    return disc_loss, gen_signal


def total_stylized_loss(parts: dict[str, float], weights: LossWeights) -> float:
    """Weighted sum: content + l_style*style + l_obs*obs + l_flow*flow."""
    for key in ("content", "style", "obs", "flow"):
        if key not in parts:
            raise ShapeError(f"total_stylized_loss: missing part '{key}'")
        if not np.isfinite(parts[key]):
            raise NumericsError(f"total_stylized_loss: part '{key}' is not finite")
    return float(parts["content"] + weights.lambda_style * parts["style"]
                 + weights.lambda_obs * parts["obs"] + weights.lambda_flow * parts["flow"])


# -- stylization training loop -----------------------------------------------------------------

@dataclass
class StyleTrainLog:
    rows: list = field(default_factory=list)   # per-step dicts

    def csv(self) -> str:
        header = "step,content,style,obs,flow,sup_disc,sup_gen,total"
        lines = [header]
        for r in self.rows:
            lines.append(",".join([str(r["step"])] + [f"{r[k]:.9g}" for k in
                                                      ("content", "style", "obs", "flow",
                                                       "sup_disc", "sup_gen", "total")]))
        return "\n".join(lines) + "\n"


def train_stylization(scene: GaussianScene, cams: Sequence[Camera], style_img: np.ndarray,
                      pipeline: FlowPipeline, decoder: DecoderNet,
                      encoders: FeatureEncoders, weights: LossWeights,
                      steps: int, decoder2d: Optional[Decoder2D] = None,
                      seed: int = 0, lr: float = 1e-3,
                      use_observation: bool = True, use_suppression: bool = True):
    """Alternating decoder/discriminator updates on rendered views.

    Per step, one training camera is drawn; the stylized view is composed
    through that camera's frozen weights from the decoder's current colors.
    The decoder descends content + style (+ observation + suppression
    signal); the discriminator then descends its own separation loss.
    Returns (decoder, discriminator, log).
    """
    if not scene.distilled:
        raise StateError("train_stylization requires a distilled scene")
    if not decoder.trained:
        raise StateError("train_stylization requires the distilled decoder")
    if (use_observation or use_suppression) and decoder2d is None:
        raise StateError("observation/suppression losses need the 2D generator decoder")

    h, w = cams[0].height, cams[0].width
    style_vec = pipeline.align(encoders.encode_clip_like(style_img).vectors[0])
    style_stats = stats_from_feature(style_vec)
    if style_stats.dim != scene.embed_dim:
        raise ShapeError(f"aligned style stats dim {style_stats.dim} != scene embed dim "
                         f"{scene.embed_dim}")
    moved = Tensor(adain(scene.embeddings, style_stats).values)
    ref_tap_stats = encoders.tap_stats(style_img)
    flow_part = float(pipeline.flow_loss) if np.isfinite(pipeline.flow_loss) else 0.0

    cam_data = []
    for cam in cams:
        if (cam.height, cam.width) != (h, w):
            raise ShapeError("training cameras must share one resolution")
        content_rgb = render(scene, cam).rgb
        wmat = Tensor(attribute_weights(scene, cam))
        i_g = generator_2d(content_rgb, style_img, encoders, decoder2d) \
            if (use_observation or use_suppression) else None
        cam_data.append((wmat, content_rgb, i_g))

    disc = DiscriminatorNet(seed=seed) if use_suppression else None
    opt_dec = Adam(decoder.parameters(), lr=lr)
    opt_disc = Adam(disc.parameters(), lr=lr) if disc else None
    g = named_stream(seed, "styletrain.cams")
    log = StyleTrainLog()

    def zero_all():
        opt_dec.zero_grad()
        if opt_disc:
            opt_disc.zero_grad()

    for step in range(steps):
        wmat, content_rgb, i_g = cam_data[int(g.integers(0, len(cam_data)))]
        colors = decoder.forward(moved)                       # (N, 3)
        i_f = dt.reshape(dt.transpose(dt.matmul(wmat, colors)), (3, h, w))

        c_loss = content_loss(i_f, content_rgb, encoders)
        s_loss = style_loss(i_f, ref_tap_stats, encoders)
        parts = {"content": c_loss.item(), "style": s_loss.item(), "flow": flow_part}
        objective = dt.add(c_loss, dt.mul(s_loss, weights.lambda_style))
        if use_observation:
            o_loss = observation_loss(i_g, i_f, encoders)
            parts["obs"] = o_loss.item()
            objective = dt.add(objective, dt.mul(o_loss, weights.lambda_obs))
        else:
            parts["obs"] = 0.0
        sup_disc_val = sup_gen_val = 0.0
        if use_suppression:
            disc_loss, gen_signal = suppression_loss(i_g, i_f, disc)
            sup_disc_val, sup_gen_val = disc_loss.item(), gen_signal.item()
            objective = dt.add(objective, dt.mul(gen_signal, weights.suppression_weight))
        objective.backward()
        opt_dec.step()
        zero_all()

        if use_suppression:
            disc_loss, _ = suppression_loss(i_g, Tensor(i_f.data), disc)
            disc_loss.backward()
            opt_disc.step()
            zero_all()

        log.rows.append({
            "step": step, "content": parts["content"], "style": parts["style"],
            "obs": parts["obs"], "flow": parts["flow"], "sup_disc": sup_disc_val,
            "sup_gen": sup_gen_val, "total": total_stylized_loss(parts, weights),
        })
    return decoder, disc, log
