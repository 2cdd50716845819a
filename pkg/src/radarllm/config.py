"""Run configuration: defaults, plain-text config files, overrides and stage hashes.

Config files hold one ``key = value`` pair per line; ``#`` starts a
comment.  Unknown keys are rejected.  Precedence, lowest to highest:
built-in defaults, profile defaults, config file, ``RLLM_SEED``, command
line ``--set key=value`` flags.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

from .errors import ValidationError

PROFILES = ("desk", "full")

# keys left as None are filled from the profile
PROFILE_DEFAULTS = {
    "desk": {"d_model": 128, "n_heads": 4, "ft_epochs": 30, "head_epochs": 50, "ft_lr": 1e-3, "head_lr": 1e-3},
    "full": {"d_model": 768, "n_heads": 12, "ft_epochs": 500, "head_epochs": 300, "ft_lr": 1e-4, "head_lr": 1e-5},
}


@dataclass
class RunConfig:
    profile: str = "desk"
    seed: int = 0
    dataset_name: str = "synthetic"

    # scene / data
    n_pulses: int = 16384
    prf_hz: float = 1000.0
    clutter_cells: int = 4
    clutter_shape_nu: float = 1.0
    clutter_power: float = 1.0
    scr_db: float | None = -5.0
    target_amplitude: float = 1.0
    target_doppler_hz: float = 60.0
    doppler_jitter_hz: float = 10.0
    doppler_block: int = 512
    texture_coherence: int = 64
    speckle_bandwidth_hz: float = 50.0
    clutter_doppler_hz: float = 30.0
    N: int = 512
    M_target: int = 32
    M_clutter: int = 128
    train_frac: float = 0.20
    val_frac: float = 0.15

    # features
    L: int = 48
    omega: int = 0  # 0 -> N
    stft_window: str = "hamming"
    stft_length: int = 64
    stft_hop: int = 16

    # reference model
    ref_d_model: int = 64
    ref_heads: int = 4
    ref_layers: int = 2
    ref_ffn: int = 128
    ref_epochs: int = 100
    ref_lr: float = 1e-4

    # backbone
    d_model: int | None = None
    n_heads: int | None = None
    n_layers: int = 4
    lora_rank: int = 8
    lora_scale: float = 2.0
    head_hidden: int = 64
    trainable_positions: bool = False

    # stage 3
    alpha: float = 0.9
    loss_mode: str = "preference"
    ft_epochs: int | None = None
    ft_lr: float | None = None
    batch_size: int = 64
    eval_batch_size: int = 400
    class_balanced: bool = False

    # stage 4
    head_epochs: int | None = None
    head_lr: float | None = None

    # detection
    p_fa: float = 0.005

    def resolved(self) -> "RunConfig":
        if self.profile not in PROFILES:
            raise ValidationError(f"profile must be one of {PROFILES}, got {self.profile!r}")
        updates = {k: v for k, v in PROFILE_DEFAULTS[self.profile].items() if getattr(self, k) is None}
        cfg = dataclasses.replace(self, **updates)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        from .training import LOSS_MODES

        if self.loss_mode not in LOSS_MODES:
            raise ValidationError(f"loss_mode must be one of {LOSS_MODES}")
        if not 0 < self.p_fa <= 1:
            raise ValidationError("p_fa must be in (0, 1]")
        if not (self.train_frac > 0 and self.val_frac > 0 and self.train_frac + self.val_frac < 1):
            raise ValidationError("need 0 < train_frac, val_frac and train_frac + val_frac < 1")
        for name in ("N", "M_target", "M_clutter", "L", "n_pulses", "clutter_cells", "batch_size"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.d_model is not None and self.n_heads is not None and self.d_model % self.n_heads:
            raise ValidationError("d_model must be divisible by n_heads")
        if self.d_model is not None and self.d_model % 2:
            raise ValidationError("d_model must be even for the sinusoidal positional encoding")

    def as_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def stage_hash(self, stage: str) -> str:
        """Hash of the keys that influence ``stage`` and everything upstream of it."""
        d = self.resolved().as_dict()
        keys = sorted(k for s in STAGE_ORDER[: STAGE_ORDER.index(stage) + 1] for k in STAGE_KEYS[s])
        payload = json.dumps({k: d[k] for k in keys}, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    @property
    def hash(self) -> str:
        return self.stage_hash(STAGE_ORDER[-1])


STAGE_ORDER = ["data", "features", "reference", "finetune", "head", "eval"]
STAGE_KEYS = {
    "data": [
        "seed", "dataset_name", "n_pulses", "prf_hz", "clutter_cells", "clutter_shape_nu", "clutter_power", "scr_db",
        "target_amplitude", "target_doppler_hz", "doppler_jitter_hz", "doppler_block", "texture_coherence",
        "speckle_bandwidth_hz", "clutter_doppler_hz", "N", "M_target", "M_clutter",
    ],
    "features": ["train_frac", "val_frac", "L", "omega", "stft_window", "stft_length", "stft_hop"],
    "reference": ["ref_d_model", "ref_heads", "ref_layers", "ref_ffn", "ref_epochs", "ref_lr", "batch_size", "class_balanced"],
    "finetune": [
        "profile", "d_model", "n_heads", "n_layers", "lora_rank", "lora_scale", "head_hidden",
        "trainable_positions", "alpha", "loss_mode", "ft_epochs", "ft_lr",
    ],
    "head": ["head_epochs", "head_lr"],
    "eval": ["p_fa", "eval_batch_size"],
}

_missing = {f.name for f in fields(RunConfig)} - {k for ks in STAGE_KEYS.values() for k in ks}
assert _missing == set(), f"config keys without a stage: {_missing}"


def _coerce(field_type: str, raw: str):
    raw = raw.strip()
    optional = "None" in field_type
    if optional and raw.lower() in ("none", "null", ""):
        return None
    if field_type.startswith("bool"):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValidationError(f"not a boolean: {raw!r}")
    if field_type.startswith("int"):
        return int(raw)
    if field_type.startswith("float"):
        return float(raw)
    return raw


_TYPES = {f.name: str(f.type) for f in fields(RunConfig)}


def apply_overrides(cfg: RunConfig, pairs: Mapping[str, Any]) -> RunConfig:
    updates = {}
    for key, value in pairs.items():
        if key not in _TYPES:
            raise ValidationError(f"unknown config key {key!r}")
        try:
            updates[key] = _coerce(_TYPES[key], value) if isinstance(value, str) else value
        except ValueError as exc:
            raise ValidationError(f"bad value for {key}: {value!r} ({exc})") from None
    return dataclasses.replace(cfg, **updates)


def parse_config_text(text: str) -> dict[str, str]:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        pairs[key] = value
    return pairs


def load_config(path: str | Path | None = None, overrides: Mapping[str, str] | None = None, env=None) -> RunConfig:
    env = os.environ if env is None else env
    cfg = RunConfig()
    if path is not None:
        cfg = apply_overrides(cfg, parse_config_text(Path(path).read_text()))
    if env.get("RLLM_SEED"):
        cfg = apply_overrides(cfg, {"seed": env["RLLM_SEED"]})
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg.resolved()


def dump_config(cfg: RunConfig) -> str:
    lines = [f"# run configuration, hash {cfg.hash}"]
    for k, v in cfg.as_dict().items():
        lines.append(f"{k} = {'none' if v is None else v}")
    return "\n".join(lines) + "\n"
