"""Flat `key = value` run configuration.

One file fully determines a run. This module owns the parse, the range
checks, the canonical re-serialization, and the sha256 digest stamped on
outputs for provenance.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields

from . import game as G
from . import model as M
from . import patchmix as PM
from .data import ShiftSpec
from .tensor import ContractError, ShapeError


class ConfigError(ValueError):
    """Unknown key, malformed value, or a combination no run can honor."""


POOLING_MODES = ("cls", "mean")

# name -> (kind, default). seed is the one required key (default None).
_SCHEMA: dict[str, tuple[str, object]] = {
    "seed": ("int", None),
    "image_size": ("int", 32),
    "patch_size": ("int", 8),
    "n_layers": ("int", 2),
    "n_heads": ("int", 4),
    "embed_dim": ("int", 32),
    "mlp_ratio": ("float", 4.0),
    "n_classes": ("int", 4),
    "pooling": ("str", "cls"),
    "attention": ("str", "cls"),
    "mix_mode": ("str", "patchmix"),
    "beta_mode": ("str", "learnable"),
    "use_lf": ("bool", True),
    "use_ll": ("bool", True),
    "tau": ("float", 0.1),
    "lr_encoder": ("float", 1e-3),
    "lr_classifier": ("float", 1e-2),
    "lr_mix": ("float", 1e-2),
    "weight_decay": ("float", 0.05),
    "epochs": ("int", 30),
    "warmup_epochs": ("int", 5),
    "batch_size": ("int", 16),
    "cluster_iterations": ("int", 2),
    "n_per_domain": ("int", 2000),
    "shift_invert": ("bool", True),
    "shift_gradient": ("float", 0.5),
    "shift_noise": ("float", 0.1),
    "shift_rotation": ("float", 0.0),
    "source_path": ("str", ""),
    "target_path": ("str", ""),
    "output_dir": ("str", "runs/default"),
    "deterministic_timing": ("bool", True),
}


@dataclass(frozen=True)
class RunConfig:
    seed: int
    image_size: int
    patch_size: int
    n_layers: int
    n_heads: int
    embed_dim: int
    mlp_ratio: float
    n_classes: int
    pooling: str
    attention: str
    mix_mode: str
    beta_mode: str
    use_lf: bool
    use_ll: bool
    tau: float
    lr_encoder: float
    lr_classifier: float
    lr_mix: float
    weight_decay: float
    epochs: int
    warmup_epochs: int
    batch_size: int
    cluster_iterations: int
    n_per_domain: int
    shift_invert: bool
    shift_gradient: float
    shift_noise: float
    shift_rotation: float
    source_path: str
    target_path: str
    output_dir: str
    deterministic_timing: bool


def parse_pairs(text: str) -> dict[str, str]:
    """Split config text into raw key/value strings.

    Lines are `key = value`; blank lines and `#` comments are skipped.
    Duplicate keys are rejected so a file cannot silently contradict
    itself.
    """
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', "
                              f"got {stripped!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in pairs:
            raise ConfigError(f"line {lineno}: duplicate key '{key}'")
        pairs[key] = value
    return pairs


def _convert(key: str, kind: str, text: str):
    if kind == "int":
        try:
            return int(text, 10)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {text!r}")
    if kind == "float":
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {text!r}")
    if kind == "bool":
        if text == "true":
            return True
        if text == "false":
            return False
        raise ConfigError(f"{key}: expected true or false, got {text!r}")
    return text


def parse_beta_mode(mode: str) -> tuple[float, float, bool]:
    """Translate a beta_mode string into (beta, gamma, learn_mix).

    'learnable' starts at (1, 1) and lets the game move the shapes;
    'fixed:B:G' pins them for the whole run.
    """
    if mode == "learnable":
        return 1.0, 1.0, True
    parts = mode.split(":")
    if len(parts) == 3 and parts[0] == "fixed":
        try:
            b, g = float(parts[1]), float(parts[2])
        except ValueError:
            raise ConfigError(f"beta_mode: bad shape numbers in {mode!r}")
        if b <= PM.POSITIVITY_EPS or g <= PM.POSITIVITY_EPS:
            raise ConfigError(f"beta_mode: shapes must exceed "
                              f"{PM.POSITIVITY_EPS}")
        return b, g, False
    raise ConfigError(f"beta_mode must be 'learnable' or 'fixed:B:G', "
                      f"got {mode!r}")


_RANGE_RULES = {
    "seed": lambda v: v >= 0,
    "image_size": lambda v: v >= 4,
    "patch_size": lambda v: v >= 1,
    "n_layers": lambda v: v >= 1,
    "n_heads": lambda v: v >= 1,
    "embed_dim": lambda v: v >= 1,
    "mlp_ratio": lambda v: v > 0,
    "n_classes": lambda v: v >= 2,
    "tau": lambda v: v > 0,
    "lr_encoder": lambda v: v >= 0,
    "lr_classifier": lambda v: v >= 0,
    "lr_mix": lambda v: v >= 0,
    "weight_decay": lambda v: v >= 0,
    "epochs": lambda v: v >= 0,
    "warmup_epochs": lambda v: v >= 0,
    "batch_size": lambda v: v >= 1,
    "cluster_iterations": lambda v: v >= 1,
    "n_per_domain": lambda v: v >= 1,
    "shift_gradient": lambda v: 0.0 <= v <= 1.0,
    "shift_noise": lambda v: v >= 0,
}


def resolve(pairs: dict[str, str]) -> RunConfig:
    """Apply defaults, convert, range-check, and cross-validate."""
    unknown = sorted(set(pairs) - set(_SCHEMA))
    if unknown:
        raise ConfigError(f"unknown keys: {', '.join(unknown)}")
    values = {}
    for key, (kind, default) in _SCHEMA.items():
        if key in pairs:
            values[key] = _convert(key, kind, pairs[key])
        elif default is None:
            raise ConfigError(f"missing required key '{key}'")
        else:
            values[key] = default
    for key, rule in _RANGE_RULES.items():
        if not rule(values[key]):
            raise ConfigError(f"{key}: value {values[key]} out of range")
    if values["pooling"] not in POOLING_MODES:
        raise ConfigError(f"pooling must be one of {POOLING_MODES}")
    if values["attention"] not in G.ATTENTION_METHODS:
        raise ConfigError(f"attention must be one of {G.ATTENTION_METHODS}")
    if values["mix_mode"] not in G.MIX_MODES:
        raise ConfigError(f"mix_mode must be one of {G.MIX_MODES}")
    parse_beta_mode(values["beta_mode"])
    if values["attention"] == "cls" and values["pooling"] != "cls":
        raise ConfigError("attention = cls needs pooling = cls")
    cfg = RunConfig(**values)
    try:
        # the constructors own the structural rules (divisibility etc.)
        to_fit_settings(cfg)
    except (ContractError, ShapeError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def from_text(text: str) -> RunConfig:
    return resolve(parse_pairs(text))


def from_file(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}")
    return from_text(text)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def resolved_text(cfg: RunConfig) -> str:
    """Canonical serialization: every key, schema order, one per line."""
    lines = [f"{f.name} = {_format_value(getattr(cfg, f.name))}"
             for f in fields(cfg)]
    return "\n".join(lines) + "\n"


def to_pairs(cfg: RunConfig) -> dict[str, str]:
    """Config as raw string pairs, ready for overrides plus re-resolve."""
    return {f.name: _format_value(getattr(cfg, f.name)) for f in fields(cfg)}


def config_digest(cfg: RunConfig) -> str:
    return hashlib.sha256(resolved_text(cfg).encode("utf-8")).hexdigest()


def to_model_config(cfg: RunConfig) -> M.ModelConfig:
    return M.ModelConfig(
        image_size=cfg.image_size,
        patch_size=cfg.patch_size,
        n_layers=cfg.n_layers,
        n_heads=cfg.n_heads,
        embed_dim=cfg.embed_dim,
        mlp_ratio=cfg.mlp_ratio,
        n_classes=cfg.n_classes,
        use_cls_token=(cfg.pooling == "cls"),
    )


def to_shift_spec(cfg: RunConfig) -> ShiftSpec:
    return ShiftSpec(
        intensity_invert=cfg.shift_invert,
        background_gradient_amp=cfg.shift_gradient,
        noise_std=cfg.shift_noise,
        rotation_degrees=cfg.shift_rotation,
    )


def to_fit_settings(cfg: RunConfig) -> G.FitSettings:
    beta, gamma, learn = parse_beta_mode(cfg.beta_mode)
    return G.FitSettings(
        model=to_model_config(cfg),
        epochs=cfg.epochs,
        warmup_epochs=cfg.warmup_epochs,
        batch_size=cfg.batch_size,
        lr_encoder=cfg.lr_encoder,
        lr_classifier=cfg.lr_classifier,
        lr_mix=cfg.lr_mix,
        weight_decay=cfg.weight_decay,
        tau=cfg.tau,
        beta_init=beta,
        gamma_init=gamma,
        mix_mode=cfg.mix_mode,
        attention=cfg.attention,
        cluster_iterations=cfg.cluster_iterations,
        use_lf=cfg.use_lf,
        use_ll=cfg.use_ll,
        learn_mix=learn,
    )
