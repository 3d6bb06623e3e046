"""Run configuration in a flat, explicitly typed key-value format.

One entry per line, ``name: type = value`` with type one of int, float, bool,
str. Blank lines and ``#`` comments are ignored. Unlisted keys keep their
defaults; unknown keys are an error.
"""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, fields
from pathlib import Path

from .acm import MERGE_MODES
from .predictor import PREDICTOR_MODES


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    T: int = 6
    N: int = 16
    D: int = 32
    T_plus: int = 10
    ell: int = 1
    kappa: int = 1
    L: int = 2
    K: int = 2
    D_head: int = 64
    lam: float = 50.0
    temp_start: float = 1.0
    temp_end: float = 0.3
    strided_tau: bool = False
    merge_mode: str = "hard"
    predictor_mode: str = "mixer"
    salient_per_frame: int = 2
    n_scenes: int = 200
    epochs: int = 20
    lr: float = 1e-3
    clip_norm: float = 1.0
    teacher_width: int = 128
    teacher_depth: int = 2
    teacher_heads: int = 4
    n_text: int = 8
    focus_gain: float = 3.0
    data_seed: int = 0
    init_seed: int = 0
    gumbel_seed: int = 0
    teacher_seed: int = 0
    dataset_path: str = ""
    checkpoint_dir: str = "checkpoint"
    report_dir: str = "."

    def validate(self):
        for name in ("T", "N", "D", "T_plus", "K", "D_head", "epochs", "n_scenes",
                     "teacher_width", "teacher_depth", "teacher_heads", "ell", "kappa"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.L < 0:
            raise ConfigError("L must be >= 0")
        if not 1 <= self.kappa <= self.ell + 1:
            raise ConfigError(f"kappa must lie in [1, ell+1], got {self.kappa}")
        if not self.K < self.N:
            raise ConfigError(f"K={self.K} must be < N={self.N}")
        if self.merge_mode not in MERGE_MODES:
            raise ConfigError(f"merge_mode must be one of {MERGE_MODES}")
        if self.predictor_mode not in PREDICTOR_MODES:
            raise ConfigError(f"predictor_mode must be one of {PREDICTOR_MODES}")
        if not self.temp_start > 0 or not self.temp_end > 0:
            raise ConfigError("temperatures must be > 0")
        if self.teacher_width % self.teacher_heads:
            raise ConfigError("teacher_width must be divisible by teacher_heads")
        if self.salient_per_frame > self.N:
            raise ConfigError("salient_per_frame must be <= N")
        return self

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


_TYPES = {"int": int, "float": float, "bool": bool, "str": str}
_LINE = re.compile(r"^\s*([A-Za-z_]\w*)\s*:\s*(int|float|bool|str)\s*=\s*(.*?)\s*$")


def _convert(kind, raw, name):
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError(raw)
            return low == "true"
        if kind == "str":
            if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "\"'":
                return raw[1:-1]
            return raw
        return _TYPES[kind](raw)
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot read {raw!r} as {kind}") from exc


def parse_config(text):
    declared = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        m = _LINE.match(stripped)
        if not m:
            raise ConfigError(f"line {lineno}: expected 'name: type = value'")
        name, kind, raw = m.groups()
        if name not in declared:
            raise ConfigError(f"line {lineno}: unknown key {name!r}")
        if declared[name] != kind:
            raise ConfigError(f"line {lineno}: {name} is {declared[name]}, not {kind}")
        values[name] = _convert(kind, raw, name)
    return RunConfig(**values).validate()


def load_config(path):
    return parse_config(Path(path).read_text())


def dump_config(cfg):
    lines = []
    for f in fields(RunConfig):
        value = getattr(cfg, f.name)
        if f.type == "bool":
            raw = "true" if value else "false"
        elif f.type == "float":
            raw = repr(float(value))
        else:
            raw = str(value)
        lines.append(f"{f.name}: {f.type} = {raw}")
    return "\n".join(lines) + "\n"


FULL_SCALE = RunConfig(T=30, N=100, D=256, T_plus=10, ell=1, kappa=2, L=4, K=4, D_head=64, lam=50.0)
