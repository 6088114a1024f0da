"""Experiment configuration: TOML schema, validation, serialization.

The config file is the single source of truth for a run.  Unknown keys are
rejected; the schema is versioned via the top-level ``schema_version`` key.
"""

from __future__ import annotations

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass, field, fields

SCHEMA_VERSION = 1
SCHEMES = ("baseline", "async", "masked")
GATE_INITS = ("random", "modality_aligned")


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class ModelSection:
    n_layers: int = 1
    n_experts: int = 3
    top_k: int = 1
    d_in: int = 4
    d_hidden: int = 4
    d_out: int = 4
    n_classes: int = 3
    noise_std: float = 0.0


@dataclass(frozen=True)
class DataSection:
    n_clusters: int = 3
    devices_per_cluster: int = 1
    samples_per_device: int = 30
    trial_size: int = 10
    mixing: tuple = ()        # rows: clusters, cols: modalities; empty = identity
    modality_separation: float = 3.0
    modality_noise: float = 0.3


@dataclass(frozen=True)
class SplitSection:
    p_threshold: float = 0.1
    cap: int = 0              # 0 means ceil(n_experts / n_clusters)


@dataclass(frozen=True)
class LinkSection:
    tx_power_dbm: float = 23.0
    ant_gain_dbi: float = 40.0
    bandwidth_hz: float = 5e6
    wavelength_m: float = 0.15
    noise_dbm: float = -97.0
    min_elevation_deg: float = 10.0
    rician_k_db: float = 10.0
    shadow_db: float = 0.0
    rain_phase_rad: float = 0.0
    atmos_coeff_db: float = 0.0
    altitude_m: float = 600e3
    elevation_deg: float = 90.0
    idle_slots_per_cycle: int = 0
    window_seconds: float = 600.0
    enforce_budget: bool = False


@dataclass(frozen=True)
class TrainSection:
    scheme: str = "async"
    eta_expert: float = 0.05
    eta_gate: float = 0.05
    lora_rank: int = 4
    gate_rounds: int = 0
    total_cycles: int = 20
    gate_pretrain_steps: int = 0
    gate_init: str = "random"
    gate_align_scale: float = 4.0
    eval_every_cycle: bool = True
    target_loss: float = 0.0


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    split: SplitSection = field(default_factory=SplitSection)
    link: LinkSection = field(default_factory=LinkSection)
    train: TrainSection = field(default_factory=TrainSection)


_SECTIONS = {"model": ModelSection, "data": DataSection, "split": SplitSection,
             "link": LinkSection, "train": TrainSection}


def _build_section(cls, raw: dict, name: str):
    allowed = {f.name: f.type for f in fields(cls)}
    for key in raw:
        if key not in allowed:
            raise ConfigError(f"unknown key '{name}.{key}'")
    kwargs = {}
    for key, value in raw.items():
        if key == "mixing":
            value = tuple(tuple(float(v) for v in row) for row in value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad section '{name}': {exc}") from None


def parse_config(text: str) -> ExperimentConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from None
    version = raw.pop("schema_version", None)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    seed = raw.pop("seed", None)
    if seed is None:
        raise ConfigError("missing required key 'seed'")
    sections = {}
    for name, cls in _SECTIONS.items():
        sections[name] = _build_section(cls, raw.pop(name, {}), name)
    for key in raw:
        raise ConfigError(f"unknown top-level key '{key}'")
    cfg = ExperimentConfig(seed=int(seed), **sections)
    validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def validate(cfg: ExperimentConfig) -> list[str]:
    """Raise ConfigError on hard violations; return soft warnings."""
    warnings = []
    m, d, s, t = cfg.model, cfg.data, cfg.split, cfg.train
    if t.scheme not in SCHEMES:
        raise ConfigError(f"train.scheme must be one of {SCHEMES}")
    if t.gate_init not in GATE_INITS:
        raise ConfigError(f"train.gate_init must be one of {GATE_INITS}")
    if not 1 <= m.top_k <= m.n_experts:
        raise ConfigError("model.top_k must lie in [1, n_experts]")
    for name, v in (("n_clusters", d.n_clusters),
                    ("devices_per_cluster", d.devices_per_cluster),
                    ("samples_per_device", d.samples_per_device),
                    ("trial_size", d.trial_size),
                    ("total_cycles", t.total_cycles)):
        if v < 1:
            raise ConfigError(f"'{name}' must be >= 1")
    if d.trial_size > d.devices_per_cluster * d.samples_per_device:
        raise ConfigError("data.trial_size exceeds cluster size")
    if not 0 <= s.p_threshold <= 1:
        raise ConfigError("split.p_threshold must lie in [0, 1]")
    if d.mixing:
        if len(d.mixing) != d.n_clusters:
            raise ConfigError("data.mixing must have n_clusters rows")
        widths = {len(r) for r in d.mixing}
        if len(widths) != 1:
            raise ConfigError("data.mixing rows must have equal length")
        for i, row in enumerate(d.mixing):
            if abs(sum(row) - 1.0) > 1e-9:
                raise ConfigError(f"data.mixing row {i} must sum to 1")
            if any(v < 0 or v > 1 for v in row):
                raise ConfigError(f"data.mixing row {i} has entries outside [0, 1]")
    if t.eta_expert < 0 or t.eta_gate < 0:
        raise ConfigError("step-sizes must be nonnegative")
    if t.eta_expert > t.eta_gate:
        warnings.append("train.eta_expert exceeds eta_gate; the step-size rule "
                        "expects eta_expert <= eta_gate / gamma")
    if t.lora_rank < 1:
        raise ConfigError("train.lora_rank must be >= 1")
    return warnings


def mixing_matrix(cfg: ExperimentConfig):
    import numpy as np
    d = cfg.data
    if d.mixing:
        return np.array(d.mixing, dtype=float)
    return np.eye(d.n_clusters)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, int):
        return str(value)
    if isinstance(value, str):
        return f'"{value}"'
    if isinstance(value, tuple):
        return "[" + ", ".join(_fmt(list(v) if isinstance(v, tuple) else v)
                               for v in value) + "]"
    if isinstance(value, list):
        return "[" + ", ".join(_fmt(v) for v in value) + "]"
    raise TypeError(f"cannot serialize {type(value)}")


def serialize_config(cfg: ExperimentConfig) -> str:
    lines = [f"schema_version = {SCHEMA_VERSION}", f"seed = {cfg.seed}"]
    for name in _SECTIONS:
        section = getattr(cfg, name)
        lines.append("")
        lines.append(f"[{name}]")
        for key, value in asdict(section).items():
            if key == "mixing" and not value:
                continue
            lines.append(f"{key} = {_fmt(value)}")
    return "\n".join(lines) + "\n"
