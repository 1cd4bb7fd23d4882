"""Experiment configuration: dataclasses, JSON files, bundled presets.

A config file is one JSON object mirroring ExperimentConfig; unknown keys
are rejected by name and JSON syntax errors are reported with their line
number. Configs round-trip losslessly through to_dict/from_dict. A run
refuses to start without a seed (from the file or the command line) so every
artifact is reproducible.
"""

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from floodsync.baselines import PROTOCOL_IDS
from floodsync.clocks import DRIFT_CONSTANT, DRIFT_RANDOM_WALK

PRESET_DIR = Path(__file__).parent / "presets"

MODE_PROTOCOL = "protocol"
MODE_FLOOD_PATHS = "flood_paths"


class ConfigError(ValueError):
    """Invalid configuration; carries an optional source line number."""

    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


@dataclass(frozen=True)
class TopologyConfig:
    kind: str = "line"
    nodes: int = 25
    rows: int = 5
    cols: int = 5
    area_m: float = 200.0
    range_m: float = 80.0


@dataclass(frozen=True)
class DelayConfig:
    d_fixed_us: float = 3.0
    sigma_us: float = 0.5
    p_unc: float = 0.005
    unc_lo_us: float = 5.0
    unc_hi_us: float = 50.0


@dataclass(frozen=True)
class ClockConfig:
    drift_mode: str = DRIFT_CONSTANT
    rate_bound_ppm: float = 50.0
    walk_step_ppm_per_period: float = 0.0
    power_on_spread_us: int = 30_000_000


@dataclass(frozen=True)
class ExperimentConfig:
    protocol: str = "rdc_rmts"
    mode: str = MODE_PROTOCOL
    topology: TopologyConfig = field(default_factory=TopologyConfig)
    delay: DelayConfig = field(default_factory=DelayConfig)
    clock: ClockConfig = field(default_factory=ClockConfig)
    sync_period_s: float = 30.0
    probe_interval_s: float = 10.0
    n_packets: int = 5
    fifo_pages: int = 2
    window: int = 2
    d_fixed_prior_us: float = 3.0
    plr: float = 0.0
    horizon_s: float = 2700.0
    seed: int | None = None
    trials: int = 1
    measurement_jitter: bool = False
    collision_mode: bool = False
    kill_node: int | None = None
    kill_at_s: float | None = None
    rapid_wait_s: tuple = (0.01, 0.05)
    slow_wait_s: tuple = (0.01, 30.0)
    flood_rounds: int = 10_000
    flood_plr_values: tuple = (0.0, 0.1)
    convergence_factor: float = 2.5
    span_bound_us: int = 12
    spacing_range_us: tuple = (1.0, 3.0)
    neighbor_capacity: int = 32
    ewma_alpha: float = 0.125
    d_ceiling_us: float = 30.0
    phi_band_ppm: float = 1000.0
    silence_rounds: int = 2
    candidate_wait_periods: int = 2
    lr_table_size: int = 8
    lr_reset_threshold_us: float = 2000.0
    outlier_sigma_factor: float = 3.0

    # -- derived ------------------------------------------------------------

    @property
    def period_us(self) -> int:
        return int(round(self.sync_period_s * 1e6))

    @property
    def probe_interval_us(self) -> int:
        return int(round(self.probe_interval_s * 1e6))

    @property
    def horizon_us(self) -> int:
        return int(round(self.horizon_s * 1e6))

    def validate(self) -> None:
        if self.protocol not in PROTOCOL_IDS:
            raise ConfigError(f"unknown protocol {self.protocol!r}; expected "
                              f"one of {', '.join(PROTOCOL_IDS)}")
        if self.mode not in (MODE_PROTOCOL, MODE_FLOOD_PATHS):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.topology.kind not in ("line", "grid", "rgg"):
            raise ConfigError(f"unknown topology kind {self.topology.kind!r}")
        if self.clock.drift_mode not in (DRIFT_CONSTANT, DRIFT_RANDOM_WALK):
            raise ConfigError(f"unknown drift_mode {self.clock.drift_mode!r}")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.horizon_s <= 0 or self.sync_period_s <= 0:
            raise ConfigError("horizon_s and sync_period_s must be positive")
        if not 0.0 <= self.plr <= 1.0:
            raise ConfigError("plr must be a probability")
        if not 2 <= self.window <= self.fifo_pages:
            raise ConfigError("window must satisfy 2 <= window <= fifo_pages")
        if self.n_packets < 1:
            raise ConfigError("n_packets must be >= 1")
        if self.flood_rounds < 1:
            raise ConfigError("flood_rounds must be >= 1")
        if self.kill_node is not None and self.kill_at_s is None:
            raise ConfigError("kill_node requires kill_at_s")


_NESTED = {"topology": TopologyConfig, "delay": DelayConfig,
           "clock": ClockConfig}
_TUPLE_FIELDS = {"rapid_wait_s", "slow_wait_s", "flood_plr_values",
                 "spacing_range_us"}


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config field(s): {', '.join(sorted(unknown))}")
    kwargs = {}
    for key, value in data.items():
        if key in _NESTED:
            cls = _NESTED[key]
            sub_known = {f.name for f in dataclasses.fields(cls)}
            if not isinstance(value, dict):
                raise ConfigError(f"{key} must be an object")
            sub_unknown = set(value) - sub_known
            if sub_unknown:
                raise ConfigError(
                    f"unknown {key} field(s): {', '.join(sorted(sub_unknown))}")
            kwargs[key] = cls(**value)
        elif key in _TUPLE_FIELDS:
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        cfg = ExperimentConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    cfg.validate()
    return cfg


def config_to_dict(cfg: ExperimentConfig) -> dict:
    out = dataclasses.asdict(cfg)
    for key in _TUPLE_FIELDS:
        out[key] = list(out[key])
    return out


def preset_names() -> list:
    return sorted(p.stem for p in PRESET_DIR.glob("*.json"))


def load_config(source: str) -> ExperimentConfig:
    """Load a config from a bundled preset name or a JSON file path."""
    preset = PRESET_DIR / f"{source}.json"
    path = preset if preset.exists() else Path(source)
    if not path.exists():
        raise ConfigError(
            f"{source!r} is neither a bundled preset "
            f"({', '.join(preset_names())}) nor a config file path")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(exc.msg, line=exc.lineno) from None
    return config_from_dict(data)


def config_digest(cfg: ExperimentConfig) -> str:
    import hashlib
    blob = json.dumps(config_to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()
