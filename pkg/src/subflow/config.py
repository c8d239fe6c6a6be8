"""Run configuration: a flat key=value schema shared by all CLI commands.

Every key is declared below with its type and default; unknown keys are
rejected. `dump()` emits a canonical text form that parses back to the same
config byte-for-byte.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .errors import FormatError

_SCENE_KINDS = ("lattice", "two_clusters", "textured_slab")

# key -> (type, default); declaration order is the dump order
SCHEMA: dict[str, tuple[type, object]] = {
    "seed": (int, 0),
    "embed_dim": (int, 32),
    "clip_dim": (int, 64),
    "style_dim": (int, 64),
    "out": (str, "runs/default"),
    "threads": (int, 1),
    "scene.kind": (str, "textured_slab"),
    "scene.n": (int, 400),
    "scene.seed": (int, 11),
    "camera.count": (int, 8),
    "camera.radius": (float, 2.6),
    "camera.elevation": (float, 1.2),
    "camera.focal": (float, 90.0),
    "camera.width": (int, 48),
    "camera.height": (int, 48),
    "flow.euler_steps": (int, 8),
    "flow.rounds": (int, 3),
    "flow.train_steps": (int, 3000),
    "flow.batch_size": (int, 256),
    "flow.learning_rate": (float, 1e-3),
    "flow.mapping_steps": (int, 2000),
    "flow.corpus": (int, 48),
    "distill.steps": (int, 600),
    "distill.learning_rate": (float, 5e-3),
    "distill.hidden": (int, 64),
    "style.steps": (int, 250),
    "style.learning_rate": (float, 2e-3),
    "weights.style": (float, 10.0),
    "weights.obs": (float, 0.5),
    "weights.flow": (float, 1.0),
    "weights.suppression": (float, 0.05),
    "gen2d.corpus": (int, 200),
    "gen2d.steps": (int, 2000),
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        merged = {k: default for k, (_, default) in SCHEMA.items()}
        for key, val in self.values.items():
            if key not in SCHEMA:
                raise FormatError(f"unknown config key '{key}'")
            merged[key] = SCHEMA[key][0](val)
        if merged["scene.kind"] not in _SCENE_KINDS:
            raise FormatError(f"scene.kind must be one of {_SCENE_KINDS}, "
                              f"got '{merged['scene.kind']}'")
        self.values = merged

    def __getitem__(self, key: str):
        if key not in SCHEMA:
            raise FormatError(f"unknown config key '{key}'")
        return self.values[key]

    def with_overrides(self, **overrides) -> "RunConfig":
        vals = dict(self.values)
        for key, val in overrides.items():
            if val is not None:
                vals[key] = val
        return RunConfig(vals)

    def dump(self) -> str:
        lines = []
        for key, (typ, _) in SCHEMA.items():
            val = self.values[key]
            text = repr(float(val)) if typ is float else str(val)
            lines.append(f"{key} = {text}")
        return "\n".join(lines) + "\n"


def parse_config(text: str) -> RunConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"config line {lineno}: expected key = value, got '{raw}'")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in SCHEMA:
            raise FormatError(f"config line {lineno}: unknown key '{key}'")
        typ = SCHEMA[key][0]
        try:
            values[key] = typ(val)
        except ValueError as exc:
            raise FormatError(f"config line {lineno}: bad value for '{key}': {val}") from exc
    return RunConfig(values)


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))
