"""Run configuration: defaults, key=value files, validation, fingerprint."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError

TASKS = ("dialogue", "qa-action", "qa-transition", "qa-count", "qa-frame")
POOL_MODES = ("none", "temporal-only", "spatial-only")


@dataclass(frozen=True)
class TrainConfig:
    # model geometry
    d: int = 128
    d_att: int = 128
    n_att: int = 3
    n_dec: int = 3
    h_att: int = 8
    d_pre_vis: int = 64
    d_pre_aud: int = 32
    # modality / direction layout
    use_visual: bool = True
    use_audio: bool = True
    use_caption: bool = True
    use_t2s: bool = True
    use_s2t: bool = True
    pool_mode: str = "none"
    # training
    seed: int = 1
    batch_size: int = 8
    max_epochs: int = 50
    warmup_epochs: int = 5
    label_smoothing: float = 0.1
    min_count: int = 1
    auto_encoder_loss: bool = False
    # decoding / QA
    beam_size: int = 5
    max_len: int = 20
    task: str = "dialogue"
    margin: float = 1.0
    per_candidate_probe: bool = False
    # locations
    data_dir: str = "data"
    run_dir: str = "runs/default"

    def validate(self) -> "TrainConfig":
        if self.d % 2 != 0:
            raise ConfigError(f"d must be even for the positional table, got {self.d}")
        if self.d % self.h_att != 0 or self.d_att % self.h_att != 0:
            raise ConfigError(
                f"d={self.d} and d_att={self.d_att} must be divisible by h_att={self.h_att}"
            )
        if self.n_att < 1 or self.n_dec < 1:
            raise ConfigError("n_att and n_dec must be at least 1")
        if self.pool_mode not in POOL_MODES:
            raise ConfigError(f"pool_mode must be one of {POOL_MODES}, got {self.pool_mode!r}")
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError(f"label_smoothing must lie in [0, 1), got {self.label_smoothing}")
        if self.auto_encoder_loss:
            raise ConfigError("auto_encoder_loss is a placeholder and cannot be enabled")
        if self.margin <= 0:
            raise ConfigError(f"margin must be positive, got {self.margin}")
        directions = (self.use_t2s or self.use_s2t) if self.use_visual else False
        if not (directions or self.use_audio or self.use_caption):
            raise ConfigError("no reasoning component enabled; nothing to fuse")
        if self.pool_mode != "none" and not self.use_visual:
            raise ConfigError("pooling modes only apply when visual features are in use")
        return self

    def fused_components(self) -> int:
        n = 0
        if self.use_visual:
            n += int(self.use_t2s) + int(self.use_s2t)
        if self.use_audio:
            n += 1
        if self.use_caption:
            n += 1
        return n

    def fingerprint(self) -> str:
        """Stable digest of every field that shapes parameters or training.

        Decode-time knobs (beam size, generation cap), the stopping point
        (max_epochs, so a run can be resumed and extended), and filesystem
        locations are excluded so a checkpoint stays usable for evaluation.
        """
        skip = {"beam_size", "max_len", "max_epochs", "data_dir", "run_dir"}
        parts = [
            f"{f.name}={getattr(self, f.name)!r}"
            for f in fields(self)
            if f.name not in skip
        ]
        return hashlib.sha256("\n".join(parts).encode()).hexdigest()

    def to_text(self) -> str:
        lines = [f"{f.name}={_render(getattr(self, f.name))}" for f in fields(self)]
        return "\n".join(lines) + "\n"


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _parse_value(name: str, raw: str, kind: type):
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: expected {kind.__name__}, got {raw!r}") from None
    return raw


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse `key=value` lines; '#' starts a comment; unknown keys refuse."""
    cfg = base or TrainConfig()
    kinds = {f.name: type(getattr(cfg, f.name)) for f in fields(cfg)}
    updates = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in kinds:
            raise ConfigError(f"line {lineno}: unknown configuration key {key!r}")
        updates[key] = _parse_value(key, raw, kinds[key])
    return replace(cfg, **updates).validate()


def load_config(path: str | Path, base: TrainConfig | None = None) -> TrainConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"configuration file not found: {p}")
    return parse_config_text(p.read_text(encoding="utf-8"), base=base)


def apply_overrides(cfg: TrainConfig, overrides: dict[str, str]) -> TrainConfig:
    """Apply `--key value` command-line overrides onto a config."""
    kinds = {f.name: type(getattr(cfg, f.name)) for f in fields(cfg)}
    updates = {}
    for key, raw in overrides.items():
        name = key.replace("-", "_")
        if name not in kinds:
            raise ConfigError(f"unknown configuration key {key!r}")
        updates[name] = _parse_value(name, raw, kinds[name])
    return replace(cfg, **updates).validate()
