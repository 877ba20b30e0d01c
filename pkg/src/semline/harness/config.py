"""Run configuration stored as ``key=value`` text."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from ..errors import ConfigError
from ..model import ATTENTION_MODES

SELECTION_MODES = ("rm", "nms", "none")
SCENE_MODES = ("heterogeneous", "symmetric")
OPTIMIZERS = ("sgd", "adam")


@dataclass
class TrainConfig:
    seed: int = 0
    # data
    size: int = 64
    n_train: int = 500
    n_test: int = 100
    scene_mode: str = "heterogeneous"
    contrast: float = 0.2
    noise: float = 0.05
    # detector
    cand_step: float = 8.0
    pos_thr: float = 0.85
    sigma: float = 4.0
    pool_thr: float = 3.0
    fc_dim: int = 128
    attention: str = "mirror"
    reg_scale: float = 4.0
    input_scale: float = 4.0
    fc1_gain: float = 8.0
    # stage 1
    epochs: int = 8
    optimizer: str = "adam"
    lr: float = 0.001
    momentum: float = 0.9
    batch_size: int = 1
    lam: float = 0.1
    neg_per_pos: float = 1.0
    near_neg_lo: float = 0.6
    # stage 2
    head_hidden: int = 128
    head_epochs: int = 60
    head_lr: float = 0.001
    head_batch: int = 64
    stage2_scenes: int = 200
    # inference and evaluation
    selection: str = "rm"
    nms_thr: float = 0.85
    match_prob: float = 0.5
    tau_lo: float = 0.5
    tau_hi: float = 1.0
    tau_step: float = 0.005

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type in ("int", "float") and f.name not in ("seed", "momentum") and not v > 0:
                raise ConfigError(f"{f.name} must be positive, got {v}")
        if self.seed < 0:
            raise ConfigError(f"seed must be nonnegative, got {self.seed}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.size < 16 or self.size % 4:
            raise ConfigError(f"image size must be a multiple of 4 and at least 16, got {self.size}")
        if self.attention not in ATTENTION_MODES:
            raise ConfigError(f"attention must be one of {ATTENTION_MODES}, got {self.attention!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.selection not in SELECTION_MODES:
            raise ConfigError(f"selection must be one of {SELECTION_MODES}, got {self.selection!r}")
        if self.scene_mode not in SCENE_MODES:
            raise ConfigError(f"scene_mode must be one of {SCENE_MODES}, got {self.scene_mode!r}")
        if not self.tau_lo < self.tau_hi <= 1:
            raise ConfigError(f"tau range [{self.tau_lo}, {self.tau_hi}] is not increasing within (0, 1]")
        for name in ("pos_thr", "nms_thr", "match_prob", "near_neg_lo"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigError(f"{name} must lie in (0, 1), got {getattr(self, name)}")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)!r}\n".replace("'", "") for f in fields(self))

    @classmethod
    def from_text(cls, text: str, base: "TrainConfig | None" = None) -> "TrainConfig":
        """Parse ``key=value`` lines; ``#`` starts a comment, unknown keys are errors."""
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"config line {lineno}: expected key=value, got {raw!r}")
            key, val = (part.strip() for part in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"config line {lineno}: unknown key {key!r}")
            try:
                values[key] = {"int": int, "float": float, "str": str}[types[key]](val)
            except ValueError:
                raise ConfigError(f"config line {lineno}: bad value for {key}: {val!r}") from None
        base = base or cls()
        return base.replace(**values)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_text(text)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)
