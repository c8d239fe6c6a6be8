"""Feature domains: style-statistics (VGG-like), image/text embedding
(CLIP-like), synthetic paired distributions, and the FEAT import bridge.

Both pseudo encoders are frozen seeded conv stacks; they stand in for the
heavyweight pretrained networks so the whole pipeline runs in seconds. Real
features computed externally enter through `import_features`.

The CLIP-like encoder is deliberately dominated by a linear functional of an
8x8 block-mean grid plus a small bounded conv refinement. That makes the
image/caption pair generator constructive: given a caption embedding it can
solve for an image whose encoding lands near it, which is what real CLIP's
shared text-image space provides and what alignment tests rely on.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .diffcore import Conv2dLayer, Tensor
from .diffcore import tensor as dt
from .diffcore.rng import named_stream
from .errors import FormatError, NumericsError, ShapeError

FEAT_MAGIC = b"FEAT"
FEAT_VERSION = 1

DOMAINS = ("clip_like", "clip_mapped", "vgg_like")
PROVENANCES = ("pseudo_encoder", "synthetic_pair", "imported")

_DOMAIN_TAGS = {"clip_like": 0, "vgg_like": 1}
_TAG_DOMAINS = {0: "clip_like", 1: "vgg_like"}

DEFAULT_CLIP_DIM = 64
DEFAULT_STYLE_DIM = 64

_VGG_WIDTHS = (8, 16, 32, 64)
_CLIP_GRID = 8          # block-mean grid is _CLIP_GRID x _CLIP_GRID x 3
_CLIP_REFINE_SCALE = 0.5


@dataclass
class FeatureSet:
    domain: str
    vectors: np.ndarray              # (M, dim) float32
    provenance: str = "pseudo_encoder"

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1:
            raise ShapeError(f"feature set needs (M>=1, dim) rows, got {self.vectors.shape}")
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown feature domain '{self.domain}'")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance '{self.provenance}'")
        if not np.all(np.isfinite(self.vectors)):
            raise NumericsError("feature set contains non-finite values")

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def _to_chw(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"encoders expect (H, W, 3) images, got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise NumericsError("image contains non-finite pixels")
    return np.transpose(img, (2, 0, 1))


def procedural_texture(seed: int, index: int, size: int = 64) -> np.ndarray:
    """Colorful deterministic texture: sum of oriented sinusoids per channel."""
    g = named_stream(seed, f"texture.{index}")
    ys, xs = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    img = np.zeros((size, size, 3), dtype=np.float64)
    for c in range(3):
        acc = np.zeros_like(xs)
        for _ in range(3):
            fx, fy = g.uniform(-9, 9, size=2)
            phase = g.uniform(0, 2 * np.pi)
            acc += g.uniform(0.2, 1.0) * np.sin(fx * xs + fy * ys + phase)
        lo, hi = acc.min(), acc.max()
        span = max(hi - lo, 1e-6)
        base, width = g.uniform(0.05, 0.3), g.uniform(0.5, 0.85)
        img[:, :, c] = base + width * (acc - lo) / span
    return np.clip(img, 0.0, 1.0).astype(np.float32)


class FeatureEncoders:
    """Frozen seeded encoders for the three feature domains of the pipeline.

    tap 0 of the style encoder is a 1x1-kernel stride-1 layer, so its pooled
    channel statistics are invariant to pixel permutations; the remaining
    blocks halve resolution with 2x2 valid convolutions, which keeps constant
    images exactly constant at every tap.
    """

    def __init__(self, seed: int = 0, clip_dim: int = DEFAULT_CLIP_DIM,
                 style_dim: int = DEFAULT_STYLE_DIM):
        self.seed = seed
        self.clip_dim = clip_dim
        self.style_dim = style_dim

        widths = _VGG_WIDTHS
        self.vgg_layers = [
            Conv2dLayer(3, widths[0], k=1, stride=1, seed=seed, name="vgg.b0"),
            Conv2dLayer(widths[0], widths[1], k=2, stride=2, seed=seed, name="vgg.b1"),
            Conv2dLayer(widths[1], widths[2], k=2, stride=2, seed=seed, name="vgg.b2"),
            Conv2dLayer(widths[2], widths[3], k=2, stride=2, seed=seed, name="vgg.b3"),
        ]
        self.tap_widths = widths
        stats_dim = 2 * sum(widths)
        g = named_stream(seed, "vgg.pool_proj")
        self._vgg_proj = (g.standard_normal((style_dim, stats_dim)) / np.sqrt(stats_dim)
                          ).astype(np.float32)

        g = named_stream(seed, "clip.block_proj")
        grid_dim = 3 * _CLIP_GRID * _CLIP_GRID
        self._clip_proj = (6.0 * g.standard_normal((clip_dim, grid_dim)) / np.sqrt(grid_dim)
                           ).astype(np.float32)
        self.clip_refine = [
            Conv2dLayer(3, 8, k=2, stride=2, seed=seed, name="clip.r0"),
            Conv2dLayer(8, 16, k=2, stride=2, seed=seed, name="clip.r1"),
        ]
        g = named_stream(seed, "clip.refine_proj")
        rp = g.standard_normal((clip_dim, 16))
        self._clip_refine_proj = (_CLIP_REFINE_SCALE * rp / np.linalg.norm(rp, axis=1, keepdims=True)
                                  ).astype(np.float32)

        for layer in self.vgg_layers + self.clip_refine:
            for p in layer.parameters():
                p.requires_grad = False

        # calibration on a fixed procedural batch: centers both domains and
        # sets the text-embedding norm target
        calib = [procedural_texture(seed, i) for i in range(16)]
        self._clip_center = np.zeros(clip_dim, dtype=np.float32)
        self._vgg_center = np.zeros(style_dim, dtype=np.float32)
        clip_raw = np.stack([self._clip_raw(img) for img in calib])
        vgg_raw = np.stack([self._vgg_raw(img) for img in calib])
        self._clip_center = clip_raw.mean(axis=0).astype(np.float32)
        self._vgg_center = vgg_raw.mean(axis=0).astype(np.float32)
        self.text_norm = float(np.linalg.norm(clip_raw - self._clip_center, axis=1).mean())

    # -- style (VGG-like) domain ------------------------------------------------

    def set_trainable(self, flag: bool) -> None:
        for layer in self.vgg_layers + self.clip_refine:
            for p in layer.parameters():
                p.requires_grad = flag

    def parameters(self):
        out = []
        for layer in self.vgg_layers + self.clip_refine:
            out.extend(layer.parameters())
        return out

    def tap_features(self, image) -> list[Tensor]:
        """All tap feature maps (Tensor path; differentiable w.r.t. the image)."""
        h = image if isinstance(image, Tensor) else Tensor(_to_chw(image))
        taps = []
        for layer in self.vgg_layers:
            h = dt.relu(layer(h))
            taps.append(h)
        return taps

    def tap_stats(self, image) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per-tap channel (mean, population std) over spatial positions."""
        out = []
        for tap in self.tap_features(image):
            flat = tap.data.reshape(tap.data.shape[0], -1).astype(np.float64)
            out.append((flat.mean(axis=1), flat.std(axis=1)))
        return out

    def _vgg_raw(self, image: np.ndarray) -> np.ndarray:
        stats = self.tap_stats(image)
        vec = np.concatenate([np.concatenate([m, s]) for m, s in stats])
        return self._vgg_proj @ vec

    def encode_vgg_like(self, images) -> FeatureSet:
        """Pooled style-statistics vector(s); one row per image."""
        if isinstance(images, np.ndarray) and images.ndim == 3:
            images = [images]
        rows = np.stack([self._vgg_raw(img) - self._vgg_center for img in images])
        return FeatureSet("vgg_like", rows)

    # -- CLIP-like domain ----------------------------------------------------------

    def _block_grid(self, image: np.ndarray) -> np.ndarray:
        img = np.asarray(image, dtype=np.float32)
        h, w = img.shape[:2]
        if h % _CLIP_GRID or w % _CLIP_GRID:
            raise ShapeError(f"image size {h}x{w} must be divisible by {_CLIP_GRID}")
        bh, bw = h // _CLIP_GRID, w // _CLIP_GRID
        return img.reshape(_CLIP_GRID, bh, _CLIP_GRID, bw, 3).mean(axis=(1, 3))

    def _clip_refine_vec(self, image: np.ndarray) -> np.ndarray:
        h = Tensor(_to_chw(image))
        for layer in self.clip_refine:
            h = dt.relu(layer(h))
        pooled = h.data.reshape(h.data.shape[0], -1).mean(axis=1)
        return self._clip_refine_proj @ np.tanh(pooled)

    def _clip_raw(self, image: np.ndarray) -> np.ndarray:
        grid = self._block_grid(image).reshape(-1)
        return self._clip_proj @ grid + self._clip_refine_vec(image)

    def encode_clip_like(self, images) -> FeatureSet:
        if isinstance(images, np.ndarray) and images.ndim == 3:
            images = [images]
        rows = np.stack([self._clip_raw(img) - self._clip_center for img in images])
        return FeatureSet("clip_like", rows)

    # -- text domain ------------------------------------------------------------------

    def token_vector(self, token: str) -> np.ndarray:
        g = named_stream(self.seed, f"text.token.{token}")
        return g.standard_normal(self.clip_dim).astype(np.float32)

    def encode_text(self, tokens: Sequence[str]) -> FeatureSet:
        """Hash-then-embed: mean token vector, renormalized to image-feature scale."""
        if not tokens:
            raise ShapeError("encode_text requires at least one token")
        mean = np.mean([self.token_vector(t) for t in tokens], axis=0)
        norm = np.linalg.norm(mean)
        if norm < 1e-12:
            raise NumericsError("degenerate text embedding")
        row = (mean / norm) * self.text_norm
        return FeatureSet("clip_like", row[None, :])


# -- synthetic (image, caption) concept pairs ------------------------------------------

class ConceptPairGenerator:
    """Emits (image, caption) pairs sharing a latent concept embedding.

    The caption is a single synthetic token; the image is solved from the
    caption's embedding through the encoder's dominant linear path, so
    cosine(encode_text(caption), encode_clip_like(image)) is high by
    construction.
    """

    def __init__(self, encoders: FeatureEncoders, image_size: int = 64):
        self.enc = encoders
        self.size = image_size
        a = encoders._clip_proj.astype(np.float64)
        self._pinv = np.linalg.pinv(a)
        self._a = a

    def pair(self, index: int) -> tuple[np.ndarray, str]:
        caption = f"concept{index:04d}"
        target = self.enc.encode_text([caption]).vectors[0].astype(np.float64)
        base = np.full(3 * _CLIP_GRID * _CLIP_GRID, 0.5)
        grid = base.copy()
        img = self._grid_image(grid)
        for _ in range(2):
            # aim the linear path at the target, correcting for the bounded
            # refinement term measured on the previous iterate
            residual = (target + self.enc._clip_center
                        - self.enc._clip_refine_vec(img) - self._a @ base)
            delta = self._pinv @ residual
            scale = min(1.0, 0.45 / max(np.abs(delta).max(), 1e-9))
            grid = np.clip(base + delta * scale, 0.0, 1.0)
            img = self._grid_image(grid)
        return img, caption

    def _grid_image(self, grid_flat: np.ndarray) -> np.ndarray:
        grid = grid_flat.reshape(_CLIP_GRID, _CLIP_GRID, 3)
        reps = self.size // _CLIP_GRID
        img = np.repeat(np.repeat(grid, reps, axis=0), reps, axis=1)
        return np.clip(img, 0.0, 1.0).astype(np.float32)


# -- paired synthetic distributions -----------------------------------------------------

@dataclass
class MixtureSpec:
    means: np.ndarray          # (K, dim)
    covariances: np.ndarray    # (K, dim, dim) SPD
    weights: np.ndarray        # (K,) sums to 1

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.covariances = np.asarray(self.covariances, dtype=np.float64)
        if self.covariances.ndim == 2:
            self.covariances = self.covariances[None]
        k, dim = self.means.shape
        if self.covariances.shape != (k, dim, dim):
            raise ShapeError(f"covariances shape {self.covariances.shape} != ({k},{dim},{dim})")
        if self.weights.shape != (k,):
            raise ShapeError(f"weights shape {self.weights.shape} != ({k},)")
        if abs(self.weights.sum() - 1.0) > 1e-9 or np.any(self.weights < 0):
            raise ShapeError("mixture weights must be non-negative and sum to 1")
        for c in self.covariances:
            if np.any(np.linalg.eigvalsh((c + c.T) / 2) <= 0):
                raise ShapeError("mixture covariances must be SPD")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @staticmethod
    def isotropic(means, sigma: float, weights=None) -> "MixtureSpec":
        means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        k, dim = means.shape
        covs = np.tile((sigma ** 2) * np.eye(dim), (k, 1, 1))
        w = np.full(k, 1.0 / k) if weights is None else np.asarray(weights, dtype=np.float64)
        return MixtureSpec(means, covs, w)


@dataclass
class PairedDistributionSpec:
    clip_side: MixtureSpec
    vgg_side: MixtureSpec
    pairing: str = "index"          # index: shared latent; nearest: matched draws
    seed: int = 0

    def __post_init__(self):
        if self.pairing not in ("index", "nearest"):
            raise ValueError(f"unknown pairing '{self.pairing}'")
        if self.clip_side.dim != self.vgg_side.dim:
            raise ShapeError("paired sides must share dimension")


def _cholesky_all(spec: MixtureSpec) -> np.ndarray:
    return np.stack([np.linalg.cholesky(c) for c in spec.covariances])


def sample_paired(spec: PairedDistributionSpec, m: int, return_components: bool = False):
    """Draw m paired rows (clip-side, vgg-side).

    Index pairing pushes one shared (component, normal) latent through both
    sides, so identical side specs give identical rows. Nearest pairing draws
    the sides independently and re-pairs each clip row with its closest vgg
    row.
    """
    if m < 1:
        raise ShapeError(f"sample_paired needs m >= 1, got {m}")
    g = named_stream(spec.seed, "paired-sampler")
    kc = spec.clip_side.weights.shape[0]
    comps = g.choice(kc, size=m, p=spec.clip_side.weights)
    z = g.standard_normal((m, spec.clip_side.dim))
    lc = _cholesky_all(spec.clip_side)
    lv = _cholesky_all(spec.vgg_side)
    kv = spec.vgg_side.means.shape[0]

    clip_rows = spec.clip_side.means[comps] + np.einsum("mij,mj->mi", lc[comps], z)
    if spec.pairing == "index":
        vcomp = comps % kv
        vgg_rows = spec.vgg_side.means[vcomp] + np.einsum("mij,mj->mi", lv[vcomp], z)
    else:
        vcomp = g.choice(kv, size=m, p=spec.vgg_side.weights)
        z2 = g.standard_normal((m, spec.vgg_side.dim))
        vgg_pool = spec.vgg_side.means[vcomp] + np.einsum("mij,mj->mi", lv[vcomp], z2)
        order = np.empty(m, dtype=int)
        for i in range(m):
            order[i] = np.argmin(((vgg_pool - clip_rows[i]) ** 2).sum(axis=1))
        vgg_rows = vgg_pool[order]

    clip_fs = FeatureSet("clip_like", clip_rows, provenance="synthetic_pair")
    vgg_fs = FeatureSet("vgg_like", vgg_rows, provenance="synthetic_pair")
    if return_components:
        return clip_fs, vgg_fs, comps
    return clip_fs, vgg_fs


# -- FEAT import/export ----------------------------------------------------------------------

def export_features(path, fs: FeatureSet) -> None:
    if fs.domain not in _DOMAIN_TAGS:
        raise FormatError(f"FEAT files carry clip_like/vgg_like rows, not '{fs.domain}'")
    with open(path, "wb") as fh:
        fh.write(FEAT_MAGIC)
        fh.write(struct.pack("<III", FEAT_VERSION, fs.count, fs.dim))
        fh.write(struct.pack("<B", _DOMAIN_TAGS[fs.domain]))
        fh.write(np.ascontiguousarray(fs.vectors, dtype="<f4").tobytes())


def import_features(path) -> FeatureSet:
    raw = Path(path).read_bytes()
    if raw[:4] != FEAT_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {FEAT_MAGIC!r}")
    if len(raw) < 17:
        raise FormatError(f"{path}: truncated header")
    version, count, dim = struct.unpack_from("<III", raw, 4)
    (tag,) = struct.unpack_from("<B", raw, 16)
    if version != FEAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if count < 1:
        raise FormatError(f"{path}: vector count must be >= 1, got {count}")
    if tag not in _TAG_DOMAINS:
        raise FormatError(f"{path}: unknown domain tag {tag}")
    want = 17 + 4 * count * dim
    if len(raw) != want:
        raise FormatError(
            f"{path}: payload is {len(raw)} bytes, header (M={count}, dim={dim}) implies {want}")
    rows = np.frombuffer(raw, dtype="<f4", offset=17).reshape(count, dim)
    return FeatureSet(_TAG_DOMAINS[tag], rows.astype(np.float32), provenance="imported")
