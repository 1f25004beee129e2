"""YAML experiment configuration.

Sections and keys (every key optional; defaults reproduce the 25-device setup):

``devices``
    ``distances_m`` (list), ``rates`` (list, shards per round), ``m_max``.
``channel``
    ``tx_power_dbm``, ``noise_power_dbm``, ``packet_bits``, ``ber_model``
    (``bpsk_uncoded`` or ``logistic``), ``kappa``, ``snr50_db``.
``fl``
    ``enabled``, ``lambda``, ``beta``, ``eta_d``, ``local_epochs``,
    ``local_batch``, ``eta_sgd``, ``n_max``, ``snapshot_every``.
``task``
    ``num_classes``, ``feature_dim``, ``spacing``, ``noise_std``,
    ``test_set_size``, ``probe_set_size``, ``shard_size``.
``scheduler``
    ``names`` (list) or ``name``, and ``options`` passed to BALSA/BALSA-PO.
``experiment``
    ``W``, ``gamma``, ``rounds``, ``instances``, ``base_seed``,
    ``targets`` (accuracy targets), ``out_dir``.
``oracle``
    ``gain_bins``, ``n_max``, ``m_max``, ``tol``, ``max_iter`` (only read by
    the ``oracle`` command, which uses ``devices`` and ``experiment`` too).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .arrivals import DEFAULT_M_MAX, ArrivalParams
from .channel import ChannelParams, make_ber_model
from .engine import FlHyperParams
from .errors import ConfigError
from .learner import SyntheticTaskParams
from .schedulers import SCHEDULER_NAMES

TABLE_RATES = [1.0] * 15 + [3.0] * 4 + [5.0] * 4 + [10.0, 10.0]
TABLE_DISTANCES_M = [100, 100, 100, 200, 200, 200, 300, 300, 300, 400, 400, 400, 500, 500, 500,
                     300, 350, 400, 450, 300, 350, 400, 450, 400, 450]


@dataclass(frozen=True)
class ChannelConfig:
    tx_power_dbm: float = 23.0
    noise_power_dbm: float = -96.0
    packet_bits: int = 4096
    ber_model: str = "bpsk_uncoded"
    kappa: float = 1.5
    snr50_db: float = 5.0

    def model(self):
        if self.ber_model == "logistic":
            return make_ber_model("logistic", kappa=self.kappa, snr50_db=self.snr50_db)
        return make_ber_model(self.ber_model)


@dataclass(frozen=True)
class OracleConfig:
    gain_bins: int = 2
    n_max: int = 4
    m_max: int = 2
    tol: float = 1e-9
    max_iter: int = 100_000


@dataclass(frozen=True)
class ExperimentConfig:
    distances_m: tuple = tuple(TABLE_DISTANCES_M)
    rates: tuple = tuple(TABLE_RATES)
    m_max: int = DEFAULT_M_MAX
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    fl: FlHyperParams = field(default_factory=FlHyperParams)
    learner_enabled: bool = False
    snapshot_every: int = 5
    task: SyntheticTaskParams = field(default_factory=SyntheticTaskParams)
    shard_size: int = 10
    schedulers: tuple = ("alsa-pi", "balsa", "balsa-po", "rr", "wmax")
    scheduler_options: dict = field(default_factory=dict)
    W: int = 5
    gamma: float = 0.01
    rounds: int = 2000
    instances: int = 20
    base_seed: int = 0
    targets: tuple = ()
    out_dir: str | None = None
    oracle: OracleConfig = field(default_factory=OracleConfig)

    @property
    def U(self):
        return len(self.rates)

    @property
    def distances_km(self):
        return tuple(d / 1000.0 for d in self.distances_m)

    def replace(self, **changes):
        return validate(dataclasses.replace(self, **changes))


_SECTIONS = {
    "devices": {"distances_m", "rates", "m_max"},
    "channel": {f.name for f in dataclasses.fields(ChannelConfig)},
    "fl": {"enabled", "lambda", "beta", "eta_d", "local_epochs", "local_batch", "eta_sgd", "n_max",
           "snapshot_every"},
    "task": {"num_classes", "feature_dim", "spacing", "noise_std", "test_set_size", "probe_set_size",
             "shard_size"},
    "scheduler": {"name", "names", "options"},
    "experiment": {"W", "gamma", "rounds", "instances", "base_seed", "targets", "out_dir"},
    "oracle": {f.name for f in dataclasses.fields(OracleConfig)},
}


def _check_keys(raw):
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping of sections")
    for section, body in raw.items():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section {section!r}; expected one of {', '.join(_SECTIONS)}")
        if body is None:
            continue
        if not isinstance(body, dict):
            raise ConfigError(f"section {section!r} must be a mapping")
        for key in body:
            if key not in _SECTIONS[section]:
                raise ConfigError(f"unknown key {section}.{key}")


def _typed(value, kind, path):
    try:
        if kind is bool:
            if not isinstance(value, bool):
                raise TypeError
            return value
        if kind is int and (isinstance(value, bool) or int(value) != value):
            raise TypeError
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{path} must be {kind.__name__}, got {value!r}") from None


def from_dict(raw: dict | None) -> ExperimentConfig:
    raw = raw or {}
    _check_keys(raw)
    sec = {name: dict(raw.get(name) or {}) for name in _SECTIONS}
    kw = {}

    dev = sec["devices"]
    if "distances_m" in dev:
        kw["distances_m"] = tuple(_typed(x, float, "devices.distances_m") for x in dev["distances_m"])
    if "rates" in dev:
        kw["rates"] = tuple(_typed(x, float, "devices.rates") for x in dev["rates"])
    if "m_max" in dev:
        kw["m_max"] = _typed(dev["m_max"], int, "devices.m_max")

    ch = sec["channel"]
    types = {"packet_bits": int, "ber_model": str}
    kw["channel"] = ChannelConfig(**{k: _typed(v, types.get(k, float), f"channel.{k}") for k, v in ch.items()})

    fl = sec["fl"]
    fl_types = {"local_epochs": int, "local_batch": int, "n_max": int}
    hyper = {("lam" if k == "lambda" else k): _typed(v, fl_types.get(k, float), f"fl.{k}")
             for k, v in fl.items() if k not in ("enabled", "snapshot_every")}
    kw["fl"] = FlHyperParams(**hyper)
    if "enabled" in fl:
        kw["learner_enabled"] = _typed(fl["enabled"], bool, "fl.enabled")
    if "snapshot_every" in fl:
        kw["snapshot_every"] = _typed(fl["snapshot_every"], int, "fl.snapshot_every")

    task = sec["task"]
    if "shard_size" in task:
        kw["shard_size"] = _typed(task.pop("shard_size"), int, "task.shard_size")
    task_types = {"num_classes": int, "feature_dim": int, "test_set_size": int, "probe_set_size": int}
    kw["task"] = SyntheticTaskParams(**{k: _typed(v, task_types.get(k, float), f"task.{k}") for k, v in task.items()})

    sch = sec["scheduler"]
    if "name" in sch and "names" in sch:
        raise ConfigError("give either scheduler.name or scheduler.names, not both")
    if "name" in sch:
        kw["schedulers"] = (str(sch["name"]),)
    elif "names" in sch:
        kw["schedulers"] = tuple(str(x) for x in sch["names"])
    if "options" in sch:
        if not isinstance(sch["options"], dict):
            raise ConfigError("scheduler.options must be a mapping")
        kw["scheduler_options"] = dict(sch["options"])

    ex = sec["experiment"]
    ex_types = {"W": int, "rounds": int, "instances": int, "base_seed": int, "gamma": float, "out_dir": str}
    for k, v in ex.items():
        if k == "targets":
            kw["targets"] = tuple(_typed(x, float, "experiment.targets") for x in v)
        else:
            kw[k] = _typed(v, ex_types[k], f"experiment.{k}")

    orc = sec["oracle"]
    or_types = {"gain_bins": int, "n_max": int, "m_max": int, "max_iter": int, "tol": float}
    kw["oracle"] = OracleConfig(**{k: _typed(v, or_types[k], f"oracle.{k}") for k, v in orc.items()})
    return validate(ExperimentConfig(**kw))


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    if len(cfg.distances_m) != len(cfg.rates):
        raise ConfigError(f"devices.distances_m has {len(cfg.distances_m)} entries but devices.rates has "
                          f"{len(cfg.rates)}")
    if cfg.U == 0:
        raise ConfigError("devices: at least one device is required")
    for d in cfg.distances_km:
        ChannelParams(d, cfg.channel.tx_power_dbm, cfg.channel.noise_power_dbm, cfg.channel.packet_bits)
    for r in cfg.rates:
        ArrivalParams(r, cfg.shard_size, cfg.m_max)
    cfg.channel.model()
    if not 1 <= cfg.W <= cfg.U:
        raise ConfigError(f"experiment.W must lie in [1, {cfg.U}], got {cfg.W}")
    if cfg.gamma < 0:
        raise ConfigError(f"experiment.gamma must be >= 0, got {cfg.gamma}")
    if cfg.rounds < 0:
        raise ConfigError(f"experiment.rounds must be >= 0, got {cfg.rounds}")
    if cfg.instances < 1:
        raise ConfigError(f"experiment.instances must be >= 1, got {cfg.instances}")
    if cfg.snapshot_every < 1:
        raise ConfigError(f"fl.snapshot_every must be >= 1, got {cfg.snapshot_every}")
    for name in cfg.schedulers:
        if name not in SCHEDULER_NAMES:
            raise ConfigError(f"scheduler.names: unknown scheduler {name!r}; choose from {', '.join(SCHEDULER_NAMES)}")
    for t in cfg.targets:
        if not 0 <= t <= 1:
            raise ConfigError(f"experiment.targets must lie in [0, 1], got {t}")
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path} is not valid YAML: {exc}") from exc
    return from_dict(raw)
