"""Experiment configuration: defaults, ``key = value`` files, flag overrides, validation."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .data import DriftSpec
from .errors import ConfigError
from .losses import LossWeights
from .prototypes import MixConfig

METHODS = ("fedpall", "fedavg", "local")

# Keys that only make sense for method = fedpall.
FEDPALL_ONLY = frozenset({
    "mu", "delta", "tau", "u_f", "u_r", "beta", "include_positive_in_denominator",
    "enable_kl", "enable_infonce", "enable_global_classifier", "finetune_epochs",
    "server_epochs", "server_batch_size", "server_lr", "amplifier_hidden",
})

_DRIFT_KEYS = {
    "n_clients": int, "n_classes": int, "input_dim": int, "samples_per_class": int,
    "class_separation": float, "noise_scale": float, "rotation": bool,
    "scale_min": float, "scale_max": float, "shift_scale": float,
}


@dataclass(frozen=True)
class ExperimentConfig:
    method: str = "fedpall"
    mu: float = 0.1
    delta: float = 0.1
    tau: float = 0.1
    u_f: float = 0.5
    u_r: float = 1.0
    beta: float = 0.8
    include_positive_in_denominator: bool = False
    enable_kl: bool = True
    enable_infonce: bool = True
    enable_global_classifier: bool = True
    local_epochs: int = 5
    global_rounds: int = 100
    finetune_epochs: int | None = None
    server_epochs: int = 1
    batch_size: int = 32
    server_batch_size: int = 64
    lr: float = 0.01
    server_lr: float = 0.01
    extractor_hidden: tuple[int, ...] = (64,)
    feature_dim: int = 32
    classifier_hidden: tuple[int, ...] = (32,)
    amplifier_hidden: tuple[int, ...] = (32,)
    test_ratio: float = 0.2
    csv_paths: tuple[str, ...] = ()
    seed: int = 0
    precision: int = 64
    run_id: str | None = None
    out_path: str | None = None
    data_seed: int | None = None
    drift: DriftSpec = field(default_factory=DriftSpec)

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.mu if self.enable_kl else 0.0,
                           self.delta if self.enable_infonce else 0.0,
                           self.tau, self.include_positive_in_denominator)

    @property
    def mix(self) -> MixConfig:
        return MixConfig(self.u_f, self.u_r, self.beta)

    @property
    def effective_finetune_epochs(self) -> int:
        return self.local_epochs if self.finetune_epochs is None else self.finetune_epochs

    @property
    def effective_run_id(self) -> str:
        return self.run_id or f"{self.method}-seed{self.seed}"

    def drift_spec(self) -> DriftSpec:
        seed = self.seed if self.data_seed is None else self.data_seed
        return dataclasses.replace(self.drift, seed=seed, test_ratio=self.test_ratio)

    def replace(self, **changes) -> "ExperimentConfig":
        return parse_config(None, {**config_to_dict(self), **changes})


def _parse_bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int_tuple(text) -> tuple[int, ...]:
    if isinstance(text, (tuple, list)):
        return tuple(int(v) for v in text)
    t = str(text).strip()
    return tuple(int(v) for v in t.split(",") if v.strip()) if t else ()


def _parse_str_tuple(text) -> tuple[str, ...]:
    if isinstance(text, (tuple, list)):
        return tuple(str(v) for v in text)
    return tuple(v.strip() for v in str(text).split(",") if v.strip())


def _optional(parser):
    def parse(text):
        if text is None or str(text).strip().lower() in ("", "none"):
            return None
        return parser(text)
    return parse


_TOP_KEYS = {
    "method": str, "mu": float, "delta": float, "tau": float, "u_f": float, "u_r": float,
    "beta": float, "include_positive_in_denominator": _parse_bool, "enable_kl": _parse_bool,
    "enable_infonce": _parse_bool, "enable_global_classifier": _parse_bool,
    "local_epochs": int, "global_rounds": int, "finetune_epochs": _optional(int),
    "server_epochs": int, "batch_size": int, "server_batch_size": int, "lr": float,
    "server_lr": float, "extractor_hidden": _parse_int_tuple, "feature_dim": int,
    "classifier_hidden": _parse_int_tuple, "amplifier_hidden": _parse_int_tuple,
    "test_ratio": float, "csv_paths": _parse_str_tuple, "seed": int, "precision": int,
    "run_id": _optional(str), "out_path": _optional(str), "data_seed": _optional(int),
}


def _coerce(key: str, raw, parser):
    if parser is bool:
        parser = _parse_bool
    if isinstance(raw, bool) and parser is _parse_bool:
        return raw
    if parser is int and isinstance(raw, float) and not raw.is_integer():
        raise ConfigError(f"{key}: expected an integer, got {raw!r}")
    try:
        if parser is int and isinstance(raw, str):
            return int(raw.strip())
        return parser(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} ({exc})") from None


def _read_file(path) -> dict[str, str]:
    text = Path(path).read_text()
    cp = configparser.ConfigParser(strict=False, interpolation=None, delimiters=("=",),
                                   comment_prefixes=("#", ";"), inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string("[experiment]\n" + text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    out: dict[str, str] = {}
    for section in cp.sections():
        for key, value in cp.items(section):
            if section == "experiment":
                out[key] = value
            elif section == "drift":
                out["data_seed" if key == "seed" else f"drift.{key}"] = value
            else:
                raise ConfigError(f"{path}: unknown section [{section}]")
    return out


def parse_config(path=None, overrides: Mapping[str, Any] | None = None) -> ExperimentConfig:
    """Build a validated config from an optional file plus overrides.

    Override keys use the file's names; drift fields are addressed as
    ``drift.<name>`` (e.g. ``drift.n_clients``). ``None`` override values are
    ignored so argparse namespaces can be passed through directly.
    """
    raw: dict[str, Any] = _read_file(path) if path is not None else {}
    for key, value in (overrides or {}).items():
        if value is not None:
            raw[key.replace("-", "_")] = value

    top: dict[str, Any] = {}
    drift: dict[str, Any] = {}
    for key, value in raw.items():
        if key == "drift" and isinstance(value, DriftSpec):
            drift.update({k: getattr(value, k) for k in _DRIFT_KEYS})
        elif key.startswith("drift."):
            name = key[len("drift."):]
            if name not in _DRIFT_KEYS:
                raise ConfigError(f"unknown key: {key}")
            drift[name] = _coerce(key, value, _DRIFT_KEYS[name])
        elif key in _TOP_KEYS:
            top[key] = _coerce(key, value, _TOP_KEYS[key])
        else:
            raise ConfigError(f"unknown key: {key}")

    method = top.get("method", "fedpall")
    if method not in METHODS:
        raise ConfigError(f"method: must be one of {METHODS}, got {method!r}")
    if method != "fedpall":
        for key in sorted(FEDPALL_ONLY & top.keys()):
            raise ConfigError(f"{key}: not meaningful for method={method}")

    for flag, weight in (("enable_kl", "mu"), ("enable_infonce", "delta")):
        if flag in top and weight in top:
            if top[flag] != (top[weight] > 0):
                raise ConfigError(f"{flag}={top[flag]} contradicts {weight}={top[weight]}")
        elif flag in top and not top[flag]:
            top[weight] = 0.0
        elif weight in top and top[weight] == 0:
            top[flag] = False

    try:
        drift_spec = DriftSpec(**drift)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"drift: {exc}") from None
    cfg = ExperimentConfig(**top, drift=drift_spec)
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    def need(cond, key, msg):
        if not cond:
            raise ConfigError(f"{key}: {msg}")

    need(cfg.mu >= 0, "mu", "must be >= 0")
    need(cfg.delta >= 0, "delta", "must be >= 0")
    need(cfg.tau > 0, "tau", "must be > 0")
    need(0 <= cfg.u_f <= cfg.u_r <= 1, "u_f", "need 0 <= u_f <= u_r <= 1")
    need(0 <= cfg.beta <= 1, "beta", "must lie in [0, 1]")
    for key in ("local_epochs", "global_rounds", "server_epochs"):
        need(getattr(cfg, key) >= 0, key, "must be >= 0")
    need(cfg.finetune_epochs is None or cfg.finetune_epochs >= 0, "finetune_epochs", "must be >= 0")
    need(cfg.batch_size >= 1, "batch_size", "must be >= 1")
    need(cfg.server_batch_size >= 1, "server_batch_size", "must be >= 1")
    need(cfg.lr >= 0, "lr", "must be >= 0")
    need(cfg.server_lr >= 0, "server_lr", "must be >= 0")
    need(cfg.feature_dim >= 1, "feature_dim", "must be >= 1")
    need(0 < cfg.test_ratio < 1, "test_ratio", "must lie in (0, 1)")
    need(cfg.precision in (32, 64), "precision", "must be 32 or 64")
    for key in ("extractor_hidden", "classifier_hidden", "amplifier_hidden"):
        need(all(d >= 1 for d in getattr(cfg, key)), key, "entries must be >= 1")
    need(cfg.drift.n_clients >= 2 or cfg.csv_paths, "drift.n_clients", "need at least 2 clients")
    need(not cfg.csv_paths or len(cfg.csv_paths) >= 2, "csv_paths", "need at least 2 client files")


def config_to_dict(cfg: ExperimentConfig) -> dict[str, Any]:
    """Flat override mapping that :func:`parse_config` turns back into ``cfg``."""
    out: dict[str, Any] = {}
    for key in _TOP_KEYS:
        if cfg.method != "fedpall" and key in FEDPALL_ONLY:
            continue
        out[key] = getattr(cfg, key)
    for key in _DRIFT_KEYS:
        out[f"drift.{key}"] = getattr(cfg.drift, key)
    return out


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_config(cfg: ExperimentConfig) -> str:
    """Serialize to the ``key = value`` file format (round-trips through parse_config)."""
    lines = []
    flat = config_to_dict(cfg)
    for key, value in flat.items():
        if key.startswith("drift.") or key == "data_seed":
            continue
        lines.append(f"{key} = {_format_value(value)}")
    lines.append("")
    lines.append("[drift]")
    if cfg.data_seed is not None:
        lines.append(f"seed = {cfg.data_seed}")
    for key in _DRIFT_KEYS:
        lines.append(f"{key} = {_format_value(getattr(cfg.drift, key))}")
    return "\n".join(lines) + "\n"


def config_keys() -> list[str]:
    return list(_TOP_KEYS) + [f"drift.{k}" for k in _DRIFT_KEYS]
