"""Cross-domain feature alignment.

The baseline is an MSE-trained mapping net from the image/text embedding
domain into the style domain. On top of it, a time-conditioned velocity
field is regressed onto linear interpolants between paired (mapped, style)
rows and integrated with Euler steps, so the endpoints of the learned ODE
land on the style distribution:

    X_t = (1 - t) X_start + t X_target,   target drift = X_target - X_start
    min_v  E_t E_pairs || v(X_t, t) - (X_target - X_start) ||^2
    X_{i+1} = X_i + v(X_i, i/H) / H,      i = 0..H-1

Alignment runs in rounds: each round re-regresses a fresh field using the
previous round's endpoints as the new start, progressively straightening
the transport. Per-round SIM/FID reports track the refinement.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np

from .diffcore import Adam, DenseNet, DenseNetSpec, Tensor
from .diffcore import tensor as dt
from .diffcore.checkpoint import load_params, restore_params, save_params
from .diffcore.rng import named_stream
from .encoders import FeatureSet
from .errors import NumericsError, ShapeError, StateError
from .metrics import cosine_sim, frechet_distance

TIME_FEATURES = 8  # four sin/cos pairs


@dataclass(frozen=True)
class FlowConfig:
    euler_steps: int = 8          # H; step size 1/H
    rounds: int = 3               # alignment rounds, fresh field each
    train_steps: int = 3000       # Adam steps per round
    batch_size: int = 256
    learning_rate: float = 1e-3
    seed: int = 0
    velocity_hidden: tuple[int, ...] = (64, 64)
    mapping_hidden: tuple[int, ...] = (96,)
    mapping_steps: int = 2000

    def __post_init__(self):
        if self.euler_steps < 1:
            raise ShapeError(f"euler_steps must be >= 1, got {self.euler_steps}")
        if self.rounds < 1:
            raise ShapeError(f"rounds must be >= 1, got {self.rounds}")
        if self.batch_size < 1 or self.train_steps < 0 or self.mapping_steps < 0:
            raise ShapeError("invalid flow config sizes")


@dataclass
class FlowRoundReport:
    round_index: int
    sim_before: float
    sim_after: float
    fid_before: float
    fid_after: float
    displacement: float


def time_embedding(t: np.ndarray) -> np.ndarray:
    """Fourier features of t in [0,1]: sin/cos at frequencies pi * 2^k."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    freqs = np.pi * (2.0 ** np.arange(TIME_FEATURES // 2))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def interpolate(x0: np.ndarray, x1: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Linear interpolant rows: exactly x0 at t=0 and exactly x1 at t=1."""
    t = np.asarray(t, dtype=np.float64)[:, None]
    return (1.0 - t) * x0 + t * x1


class MappingNet:
    """Baseline domain map, trained by plain MSE regression."""

    def __init__(self, clip_dim: int, style_dim: int, hidden: tuple[int, ...] = (96,),
                 seed: int = 0):
        widths = (clip_dim, *hidden, style_dim)
        self.net = DenseNet(DenseNetSpec(widths, "relu", seed), name="mapping")
        self.clip_dim = clip_dim
        self.style_dim = style_dim
        self.trained = False

    def parameters(self):
        return self.net.parameters()

    def __call__(self, x) -> Tensor:
        return self.net(x)

    def apply(self, rows: np.ndarray) -> np.ndarray:
        rows = np.atleast_2d(rows)
        if rows.shape[1] != self.clip_dim:
            raise ShapeError(f"mapping expects dim {self.clip_dim}, got {rows.shape[1]}")
        return self.net(Tensor(rows)).data


class VelocityField:
    """Time-conditioned drift v(x, t) over the style domain."""

    def __init__(self, style_dim: int, hidden: tuple[int, ...] = (64, 64), seed: int = 0,
                 name: str = "velocity"):
        widths = (style_dim + TIME_FEATURES, *hidden, style_dim)
        self.net = DenseNet(DenseNetSpec(widths, "tanh", seed), name=name)
        self.style_dim = style_dim
        self.final_loss = float("nan")

    def parameters(self):
        return self.net.parameters()

    def forward(self, x_rows: np.ndarray, t_rows: np.ndarray) -> Tensor:
        inp = np.concatenate([np.atleast_2d(x_rows), time_embedding(t_rows)], axis=1)
        return self.net(Tensor(inp))

    def __call__(self, x_rows: np.ndarray, t: float) -> np.ndarray:
        x_rows = np.atleast_2d(x_rows)
        t_rows = np.full(x_rows.shape[0], float(t))
        return self.forward(x_rows, t_rows).data


def _check_paired(a: FeatureSet, b: FeatureSet, op: str) -> None:
    if a.count != b.count:
        raise ShapeError(f"{op}: paired sets must have equal rows ({a.count} vs {b.count})")
    if a.dim != b.dim and op != "train_mapping":
        raise ShapeError(f"{op}: dims differ ({a.dim} vs {b.dim})")


def train_mapping(clip: FeatureSet, vgg: FeatureSet, cfg: FlowConfig) -> MappingNet:
    """Fit the baseline map by Adam on mean squared error over paired rows."""
    _check_paired(clip, vgg, "train_mapping")
    net = MappingNet(clip.dim, vgg.dim, hidden=cfg.mapping_hidden, seed=cfg.seed)
    opt = Adam(net.parameters(), lr=cfg.learning_rate)
    g = named_stream(cfg.seed, "mapping.batches")
    x_all = clip.vectors.astype(np.float32)
    y_all = vgg.vectors.astype(np.float32)
    m = clip.count
    for _ in range(cfg.mapping_steps):
        idx = g.integers(0, m, size=min(cfg.batch_size, m))
        pred = net(Tensor(x_all[idx]))
        diff = dt.sub(pred, Tensor(y_all[idx]))
        loss = dt.tmean(dt.mul(diff, diff))
        loss.backward()
        opt.step()
        opt.zero_grad()
    net.trained = True
    return net


def train_velocity(start: FeatureSet, target: FeatureSet, cfg: FlowConfig,
                   round_index: int = 1) -> VelocityField:
    """Regress the drift on interpolants of the paired rows (fresh field)."""
    _check_paired(start, target, "train_velocity")
    vf = VelocityField(start.dim, hidden=cfg.velocity_hidden,
                       seed=cfg.seed + round_index, name=f"velocity.r{round_index}")
    opt = Adam(vf.parameters(), lr=cfg.learning_rate)
    g = named_stream(cfg.seed, f"velocity.batches.r{round_index}")
    x0 = start.vectors.astype(np.float64)
    x1 = target.vectors.astype(np.float64)
    drift_all = x1 - x0
    m = start.count
    loss_val = float("nan")
    for _ in range(cfg.train_steps):
        idx = g.integers(0, m, size=min(cfg.batch_size, m))
        t = g.uniform(0.0, 1.0, size=idx.size)
        xt = interpolate(x0[idx], x1[idx], t)
        pred = vf.forward(xt.astype(np.float32), t)
        diff = dt.sub(pred, Tensor(drift_all[idx].astype(np.float32)))
        loss = dt.tmean(dt.mul(diff, diff))
        loss.backward()
        opt.step()
        opt.zero_grad()
        loss_val = loss.item()
    vf.final_loss = loss_val
    return vf


def euler_integrate(v: Union[VelocityField, Callable], x0: np.ndarray, steps: int) -> np.ndarray:
    """Forward Euler trajectory, all intermediate states included.

    Returns (steps+1, ...) stacked states; x0 may be a single vector or a
    batch of rows. Non-finite states name the offending step.
    """
    if steps < 1:
        raise ShapeError(f"euler_integrate needs steps >= 1, got {steps}")
    single = np.asarray(x0).ndim == 1
    x = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    traj = [x.copy()]
    dt_step = 1.0 / steps
    for i in range(steps):
        drift = np.asarray(v(x, i * dt_step), dtype=np.float64)
        x = x + drift * dt_step
        if not np.all(np.isfinite(x)):
            raise NumericsError(f"euler_integrate: non-finite state at step {i + 1}")
        traj.append(x.copy())
    out = np.stack(traj)
    return out[:, 0, :] if single else out


class FlowPipeline:
    """Trained mapping plus one velocity field per round."""

    def __init__(self, mapping: MappingNet, fields: list[VelocityField], cfg: FlowConfig):
        self.mapping = mapping
        self.fields = fields
        self.cfg = cfg

    @property
    def trained(self) -> bool:
        return self.mapping.trained and len(self.fields) >= 1

    @property
    def flow_loss(self) -> float:
        return self.fields[-1].final_loss if self.fields else float("nan")

    def align(self, x: np.ndarray) -> np.ndarray:
        """Map one embedding-domain vector (or batch) into the style domain."""
        if not self.trained:
            raise StateError("alignment pipeline is not trained")
        single = np.asarray(x).ndim == 1
        rows = np.atleast_2d(np.asarray(x, dtype=np.float32))
        if rows.shape[1] != self.mapping.clip_dim:
            raise ShapeError(
                f"align: expected dim {self.mapping.clip_dim}, got {rows.shape[1]}")
        cur = self.mapping.apply(rows)
        for vf in self.fields:
            cur = euler_integrate(vf, cur, self.cfg.euler_steps)[-1]
        return cur[0] if single else cur

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_params(out / "mapping.prms", self.mapping.parameters())
        for i, vf in enumerate(self.fields, start=1):
            save_params(out / f"velocity_{i}.prms", vf.parameters())
        lines = [
            f"clip_dim={self.mapping.clip_dim}",
            f"style_dim={self.mapping.style_dim}",
            f"euler_steps={self.cfg.euler_steps}",
            f"rounds={len(self.fields)}",
            f"train_steps={self.cfg.train_steps}",
            f"batch_size={self.cfg.batch_size}",
            f"learning_rate={self.cfg.learning_rate!r}",
            f"seed={self.cfg.seed}",
            f"velocity_hidden={','.join(str(w) for w in self.cfg.velocity_hidden)}",
            f"mapping_hidden={','.join(str(w) for w in self.cfg.mapping_hidden)}",
            f"mapping_steps={self.cfg.mapping_steps}",
            f"flow_loss={self.flow_loss!r}",
        ]
        (out / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="ascii")

    @staticmethod
    def load(in_dir) -> "FlowPipeline":
        src = Path(in_dir)
        kv = {}
        for line in (src / "manifest.txt").read_text(encoding="ascii").splitlines():
            if line.strip():
                key, _, val = line.partition("=")
                kv[key] = val

        def widths(key):
            return tuple(int(w) for w in kv[key].split(",") if w)

        cfg = FlowConfig(
            euler_steps=int(kv["euler_steps"]), rounds=int(kv["rounds"]),
            train_steps=int(kv["train_steps"]), batch_size=int(kv["batch_size"]),
            learning_rate=float(kv["learning_rate"]), seed=int(kv["seed"]),
            velocity_hidden=widths("velocity_hidden"), mapping_hidden=widths("mapping_hidden"),
            mapping_steps=int(kv["mapping_steps"]))
        mapping = MappingNet(int(kv["clip_dim"]), int(kv["style_dim"]),
                             hidden=cfg.mapping_hidden, seed=cfg.seed)
        restore_params(mapping.parameters(), load_params(src / "mapping.prms"))
        mapping.trained = True
        fields = []
        for i in range(1, int(kv["rounds"]) + 1):
            vf = VelocityField(int(kv["style_dim"]), hidden=cfg.velocity_hidden,
                               seed=cfg.seed + i, name=f"velocity.r{i}")
            restore_params(vf.parameters(), load_params(src / f"velocity_{i}.prms"))
            fields.append(vf)
        pipe = FlowPipeline(mapping, fields, cfg)
        pipe.fields[-1].final_loss = float(kv.get("flow_loss", "nan"))
        return pipe


def run_subdivisive_flow(clip: FeatureSet, vgg: FeatureSet, cfg: FlowConfig,
                         mapping: MappingNet | None = None):
    """Full multi-round alignment on paired sets.

    Returns (aligned endpoints as a FeatureSet, per-round reports, pipeline).
    Round 1 starts from the mapped rows; later rounds restart from the
    previous round's endpoints.
    """
    if mapping is None:
        mapping = train_mapping(clip, vgg, cfg)
    current = mapping.apply(clip.vectors)
    fields: list[VelocityField] = []
    reports: list[FlowRoundReport] = []
    for k in range(1, cfg.rounds + 1):
        cur_fs = FeatureSet("clip_mapped", current, provenance=clip.provenance)
        sim_before = cosine_sim(cur_fs, vgg)
        fid_before = frechet_distance(cur_fs, vgg)
        vf = train_velocity(cur_fs, vgg, cfg, round_index=k)
        endpoints = euler_integrate(vf, current, cfg.euler_steps)[-1]
        end_fs = FeatureSet("clip_mapped", endpoints, provenance=clip.provenance)
        reports.append(FlowRoundReport(
            round_index=k,
            sim_before=sim_before,
            sim_after=cosine_sim(end_fs, vgg),
            fid_before=fid_before,
            fid_after=frechet_distance(end_fs, vgg),
            displacement=float(np.linalg.norm(endpoints - current, axis=1).mean()),
        ))
        fields.append(vf)
        current = endpoints.astype(np.float32)
    aligned = FeatureSet("clip_mapped", current, provenance=clip.provenance)
    return aligned, reports, FlowPipeline(mapping, fields, cfg)


def align_feature(x: np.ndarray, pipeline: FlowPipeline) -> np.ndarray:
    """Inference path: embedding-domain vector -> style-domain vector."""
    return pipeline.align(x)


def reports_to_csv(reports: Sequence[FlowRoundReport], path) -> None:
    with open(path, "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round", "sim_before", "sim_after", "fid_before",
                         "fid_after", "displacement"])
        for r in reports:
            writer.writerow([r.round_index, f"{r.sim_before:.9g}", f"{r.sim_after:.9g}",
                             f"{r.fid_before:.9g}", f"{r.fid_after:.9g}",
                             f"{r.displacement:.9g}"])
