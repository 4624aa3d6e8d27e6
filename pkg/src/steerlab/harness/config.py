"""Flat key=value experiment configuration."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, fields

log = logging.getLogger(__name__)

STANDARD_FORGET_RATIOS = (0.05, 0.10, 0.15)
SEED_ENV = "STEERLAB_SEED"


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    n_records: int = 400
    forget_ratio: float = 0.05
    corpus: str = ""
    d: int = 256
    n_layers: int = 6
    recurrent_scale: float = 0.8
    eta: float = 0.8
    tau: float = 0.85
    mode: str = "acs"
    view: str = "hybrid"
    use_rrs: bool = True
    lambda_fixed: float = 1.5
    steering_layers: str = "auto"
    scoring_layer: int = -1
    n_prototypes: int = 8
    plant_steps: int = 800
    plant_lr: float = 2.0
    max_len: int = 16
    templates: str = ""
    out_dir: str = "runs/default"

    def __post_init__(self):
        if not 0.0 < self.forget_ratio < 1.0:
            raise ValueError(f"forget_ratio must lie in (0, 1), got {self.forget_ratio}")
        if self.forget_ratio not in STANDARD_FORGET_RATIOS:
            log.warning("forget_ratio %s is outside the standard set %s", self.forget_ratio, STANDARD_FORGET_RATIOS)

    def layers(self) -> tuple[int, ...]:
        from ..steer import SteeringPolicy

        if self.steering_layers == "auto":
            return SteeringPolicy.default_layers(self.n_layers)
        return tuple(sorted(int(x) for x in self.steering_layers.split(",") if x.strip()))

    def scoring(self) -> int:
        return self.scoring_layer if self.scoring_layer >= 0 else max(self.layers())

    def model_key(self) -> dict:
        """Fields that determine the corpus and the planted model."""
        keep = ("seed", "n_records", "forget_ratio", "corpus", "d", "n_layers", "recurrent_scale", "plant_steps", "plant_lr", "templates")
        return {k: getattr(self, k) for k in keep}

    def artifact_key(self) -> dict:
        keep = ("eta", "view", "n_prototypes", "steering_layers", "scoring_layer")
        return {**self.model_key(), **{k: getattr(self, k) for k in keep}}

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def _coerce(field_type, raw: str):
    t = field_type if isinstance(field_type, str) else field_type.__name__
    if t == "bool":
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if t == "int":
        return int(raw)
    if t == "float":
        return float(raw)
    return raw


def parse_config_text(text: str) -> dict:
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        out[key] = _coerce(types[key], raw)
    return out


def load_config(path: str | None = None, overrides: dict | None = None, env=None) -> ExperimentConfig:
    """File values, then explicit overrides, then the seed environment variable."""
    env = os.environ if env is None else env
    values = {}
    if path:
        with open(path, encoding="utf-8") as f:
            values.update(parse_config_text(f.read()))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    if env.get(SEED_ENV):
        values["seed"] = int(env[SEED_ENV])
    return ExperimentConfig(**values)


def dump_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{k}={v}\n" for k, v in cfg.to_dict().items())
