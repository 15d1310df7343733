"""Run configuration: one YAML document with a fixed schema.

Top-level keys::

    seed, out, evaluator, evaluator_timeout, evaluator_max_in_flight,
    threshold_db, train:, geometry:, policy:, surrogate:

Unknown keys are rejected and every error names the offending key.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import yaml

from .evaluator import SurrogateConfig
from .geometry import GeometryConfig
from .policy import PolicyArch
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


DOCS = {
    "seed": "master seed for initialization and sampling",
    "out": "output directory",
    "evaluator": "builtin | exec:<command> | tcp:<host>:<port>",
    "evaluator_timeout": "seconds to wait for an external evaluator response",
    "evaluator_max_in_flight": "outstanding requests per external evaluator connection",
    "threshold_db": "pass-band threshold below the peak, in dB",
    "train.iterations": "training iterations t",
    "train.batch_size": "samples per iteration Z",
    "train.mini_batch": "mini-batch size z (must divide Z)",
    "train.epochs": "epochs E per batch; Z*E/z optimizer steps per iteration",
    "train.learning_rate": "Adam learning rate",
    "train.alpha_r": "running-reward renewal rate",
    "train.alpha_a": "anomalous rate; accepted but unused",
    "train.beta_kl": "KL penalty weight",
    "train.beta_e0": "initial entropy weight",
    "train.beta_min": "entropy weight floor",
    "train.beta_decay": "exponential entropy decay factor",
    "train.entropy_schedule": "exponential | linear",
    "train.n": "number of resonators N",
    "train.checkpoint_every": "write a checkpoint every k iterations",
    "geometry.L": "base length; resonator side ranges over [L, 2L]",
    "geometry.g_min_ratio": "smallest gap as a fraction of the side",
    "geometry.g_max_ratio": "largest gap as a fraction of the side",
    "geometry.n_budget": "resonator budget sizing the boundary (null = N)",
    "geometry.mode": "idf (interdependent placement) | direct (boundary only)",
    "policy.variant": "mlp | attention",
    "policy.d": "size of the constant all-ones input",
    "policy.width": "mlp hidden width",
    "policy.depth": "mlp hidden layers",
    "policy.d_model": "attention embedding size",
    "policy.n_heads": "attention heads",
    "policy.n_layers": "attention blocks",
    "policy.head_scale": "init scale of the output heads",
    "surrogate.f_scale": "Hz * length; resonance of a side-a square is f_scale / (4a)",
    "surrogate.frac_bw": "fractional bandwidth normalizing the coupling matrix",
    "surrogate.k0": "coupling at zero gap",
    "surrogate.decay": "coupling decay length in units of the side",
    "surrogate.q_e": "external quality factor of the port resonators",
    "surrogate.slit_detune": "relative frequency shift per unit slit offset",
    "surrogate.m": "frequency points",
    "surrogate.f_lo": "lowest frequency (Hz)",
    "surrogate.f_hi": "highest frequency (Hz)",
}

_TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig) if f.name != "seed")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    evaluator: str = "builtin"
    evaluator_timeout: float = 30.0
    evaluator_max_in_flight: int = 8
    threshold_db: float = 3.0
    train: TrainConfig = field(default_factory=TrainConfig)
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    policy: PolicyArch = field(default_factory=PolicyArch)
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)

    def with_overrides(self, **kw) -> "RunConfig":
        """Apply CLI overrides; ``None`` values are ignored."""
        cfg = self
        if kw.get("seed") is not None:
            cfg = replace(cfg, seed=kw["seed"], train=replace(cfg.train, seed=kw["seed"]))
        if kw.get("out") is not None:
            cfg = replace(cfg, out=str(kw["out"]))
        if kw.get("evaluator") is not None:
            cfg = replace(cfg, evaluator=kw["evaluator"])
        try:
            if kw.get("n") is not None:
                cfg = replace(cfg, train=replace(cfg.train, n=kw["n"]))
            if kw.get("iterations") is not None:
                cfg = replace(cfg, train=replace(cfg.train, iterations=kw["iterations"]))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return cfg


def _coerce(key: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    return value


def _section(name: str, cls, data, allowed: tuple[str, ...], extra: dict | None = None):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{name}: expected a mapping")
    defaults = cls()
    kwargs = dict(extra or {})
    for key, value in data.items():
        if key not in allowed:
            raise ConfigError(f"unknown config key '{name}.{key}'")
        default = getattr(defaults, key)
        if key == "n_budget":
            if value is not None and (isinstance(value, bool) or not isinstance(value, int)):
                raise ConfigError(f"{name}.{key}: expected an integer or null, got {value!r}")
            kwargs[key] = value
        else:
            kwargs[key] = _coerce(f"{name}.{key}", value, default)
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def config_from_dict(data: dict | None) -> RunConfig:
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    top = {f.name: f for f in fields(RunConfig)}
    for key in data:
        if key not in top:
            raise ConfigError(f"unknown config key '{key}'")
    defaults = RunConfig()
    kw = {}
    for key in ("seed", "out", "evaluator", "evaluator_timeout", "evaluator_max_in_flight",
                "threshold_db"):
        if key in data:
            kw[key] = _coerce(key, data[key], getattr(defaults, key))
    seed = kw.get("seed", defaults.seed)
    kw["train"] = _section("train", TrainConfig, data.get("train"), _TRAIN_KEYS, {"seed": seed})
    kw["geometry"] = _section("geometry", GeometryConfig, data.get("geometry"),
                              tuple(f.name for f in fields(GeometryConfig)))
    kw["policy"] = _section("policy", PolicyArch, data.get("policy"),
                            tuple(f.name for f in fields(PolicyArch)))
    kw["surrogate"] = _section("surrogate", SurrogateConfig, data.get("surrogate"),
                               tuple(f.name for f in fields(SurrogateConfig)))
    cfg = RunConfig(**kw)
    if cfg.geometry.mode not in ("idf", "direct"):
        raise ConfigError(f"geometry.mode: unknown mapping mode {cfg.geometry.mode!r}")
    if cfg.geometry.n_budget is not None and cfg.geometry.n_budget < cfg.train.n:
        raise ConfigError(f"geometry.n_budget: {cfg.geometry.n_budget} is smaller than "
                          f"train.n={cfg.train.n}")
    if cfg.evaluator != "builtin" and not cfg.evaluator.startswith(("exec:", "tcp:")):
        raise ConfigError(f"evaluator: expected builtin, exec:<cmd> or tcp:<host:port>, "
                          f"got {cfg.evaluator!r}")
    if cfg.evaluator_max_in_flight < 1:
        raise ConfigError("evaluator_max_in_flight: must be >= 1")
    return cfg


def config_to_dict(cfg: RunConfig) -> dict:
    out = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        out[f.name] = dataclasses.asdict(v) if dataclasses.is_dataclass(v) else v
    out["train"].pop("seed")
    return out


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    return config_from_dict(data)


def defaults_yaml() -> str:
    """The default config as commented YAML."""
    lines = ["# run configuration defaults"]
    for key, value in config_to_dict(RunConfig()).items():
        if isinstance(value, dict):
            lines.append(f"{key}:")
            for k, v in value.items():
                lines.append(f"  {k}: {_yaml_scalar(v)}".ljust(36) + f"# {DOCS.get(f'{key}.{k}', '')}")
        else:
            lines.append(f"{key}: {_yaml_scalar(value)}".ljust(36) + f"# {DOCS.get(key, '')}")
    return "\n".join(lines) + "\n"


def _yaml_scalar(v) -> str:
    return yaml.safe_dump(v, default_flow_style=True).strip().removesuffix("\n...").strip()
