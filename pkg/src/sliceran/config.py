"""Run configuration: dataclass schema, strict YAML loading, overrides.

The on-disk format is a single YAML document with one section per
subsystem. Loading is strict: unknown keys raise, so sweep overrides
cannot silently miss. `resolve()` computes the derived quantities
(bandwidth units, action count, demand normalizers, warmup length) that
the run header echoes next to the raw settings.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import yaml

SLICE_NAMES = ("volte", "embb", "urllc")
N_SLICES = 3

ALGORITHMS = ("hard", "dqn", "gat-dqn", "a2c", "gat-a2c")


class ConfigurationError(ValueError):
    """Raised for invalid or inconsistent run configuration."""


# -- distributions (Table-style traffic settings) -----------------------

@dataclass
class UniformDist:
    dist: str = "uniform"
    low_ms: float = 0.0
    high_ms: float = 160.0


@dataclass
class ExponentialDist:
    dist: str = "exponential"
    mean_ms: float = 180.0


@dataclass
class TruncParetoTimeDist:
    dist: str = "trunc_pareto"
    exponent: float = 1.2
    mean_ms: float = 6.0
    max_ms: float = 12.5


@dataclass
class ConstantSize:
    dist: str = "constant"
    bytes: float = 40.0


@dataclass
class TruncParetoSize:
    dist: str = "trunc_pareto"
    exponent: float = 1.2
    mean_bytes: float = 100.0
    max_bytes: float = 250.0


@dataclass
class ChoiceSize:
    dist: str = "choice"
    megabytes: list = field(default_factory=lambda: [0.3, 0.4, 0.5, 0.6, 0.7])


_TIME_DISTS = {"uniform": UniformDist, "exponential": ExponentialDist,
               "trunc_pareto": TruncParetoTimeDist}
_SIZE_DISTS = {"constant": ConstantSize, "trunc_pareto": TruncParetoSize,
               "choice": ChoiceSize}


@dataclass
class SliceTraffic:
    interarrival: object
    size: object
    sla_rate_mbps: float
    sla_latency_ms: float


def _default_volte():
    return SliceTraffic(UniformDist(), ConstantSize(), 0.051, 10.0)


def _default_embb():
    return SliceTraffic(TruncParetoTimeDist(), TruncParetoSize(), 100.0, 10.0)


def _default_urllc():
    return SliceTraffic(ExponentialDist(), ChoiceSize(), 10.0, 3.0)


# -- sections -----------------------------------------------------------

@dataclass
class RunSection:
    seed: int = 0
    periods: int = 1000
    algorithm: str = "gat-dqn"
    out_dir: str = "runs/default"
    checkpoint_interval: int = 0  # periods; 0 = final checkpoint only
    log_interval: int = 50


@dataclass
class ScenarioSection:
    arena: list = field(default_factory=lambda: [160.0, 160.0])
    rings: int = 2
    inter_site_distance: float = 36.0
    neighbor_radius_factor: float = 1.1
    corner_fraction: float = 0.25
    counts: list = field(default_factory=lambda: [333, 667, 1000])
    speeds: list = field(default_factory=lambda: [[1.0, 5.0], [1.0, 3.0], [6.0, 10.0]])


@dataclass
class TrafficSection:
    period: float = 1.0
    volte: SliceTraffic = field(default_factory=_default_volte)
    embb: SliceTraffic = field(default_factory=_default_embb)
    urllc: SliceTraffic = field(default_factory=_default_urllc)
    normalizers: object = "auto"  # "auto" or [bits, bits, bits]

    def slices(self):
        return (self.volte, self.embb, self.urllc)


@dataclass
class RadioSection:
    tx_power_dbm: float = 30.0
    noise_dbm_hz: float = -174.0
    pathloss_intercept_db: float = 74.0
    pathloss_exponent_db: float = 30.0  # dB per decade of distance
    min_distance_m: float = 3.0
    rayleigh: bool = True
    shadowing_sigma_db: float = 0.0  # lognormal shadowing, 0 disables
    slots_per_period: int = 2000
    slot_s: float = 0.0005


@dataclass
class EnvSection:
    bandwidth_mhz: float = 10.0
    delta_mhz: float = 0.54
    alpha: float = 0.01
    beta: list = field(default_factory=lambda: [1.0, 1.0, 1.0])
    c1: float = 6.0
    c2: float = 2.0
    c3: float = 0.9
    gamma: float = 0.9


@dataclass
class LearnerSection:
    embed_dim: int = 32
    gat_proj_dim: int = 32
    gat_head_dim: int = 8
    gat_heads: int = 8
    gat_layers: int = 2
    gat_temperature: float = 1.0
    hidden_dim: int = 128
    lr_q: float = 1e-3
    lr_critic: float = 1e-3
    lr_actor: float = 3e-4
    entropy_weight: float = 0.01
    a2c_center_advantage: bool = True  # batch-center TD errors in the actor
    a2c_critic_warmup: int = 0         # training periods before actor updates
    double: bool = True
    dueling: bool = True
    replay_capacity: int = 10000
    batch_size: int = 32
    target_sync: int = 100
    epsilon_end: float = 0.95
    epsilon_ramp_fraction: float = 0.5  # of post-warmup periods
    share_weights: bool = False  # experiment toggle: one brain for all BSs


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    scenario: ScenarioSection = field(default_factory=ScenarioSection)
    traffic: TrafficSection = field(default_factory=TrafficSection)
    radio: RadioSection = field(default_factory=RadioSection)
    env: EnvSection = field(default_factory=EnvSection)
    learner: LearnerSection = field(default_factory=LearnerSection)

    # -- derived values ------------------------------------------------
    def n_bs(self):
        r = self.scenario.rings
        return 1 + 3 * r * (r + 1)

    def bandwidth_hz(self):
        return self.env.bandwidth_mhz * 1e6

    def delta_hz(self):
        return self.env.delta_mhz * 1e6

    def units(self):
        # tolerate float noise so e.g. W/delta = 50.0 does not floor to 49
        u = int(math.floor(self.bandwidth_hz() / self.delta_hz() + 1e-9))
        if u < N_SLICES:
            raise ConfigurationError(
                f"{u} bandwidth units cannot cover {N_SLICES} slices")
        return u

    def warmup_periods(self):
        return self.run.periods // 5

    def sla_rates(self):
        return [s.sla_rate_mbps * 1e6 for s in self.traffic.slices()]

    def sla_latencies(self):
        return [s.sla_latency_ms * 1e-3 for s in self.traffic.slices()]

    def demand_normalizers(self):
        """Per-slice demand scale in bits.

        Default: SLA rate x period x expected subscribers per BS, which
        keeps demand entries O(1) for loads near the SLA envelope.
        """
        if self.traffic.normalizers != "auto":
            vals = [float(v) for v in self.traffic.normalizers]
            if any(v <= 0 for v in vals):
                raise ConfigurationError("demand normalizers must be positive")
            return vals
        m = self.n_bs()
        return [rate * self.traffic.period * (count / m)
                for rate, count in zip(self.sla_rates(), self.scenario.counts)]

    def validate(self):
        if self.run.algorithm not in ALGORITHMS:
            raise ConfigurationError(
                f"unknown algorithm {self.run.algorithm!r}; pick from {ALGORITHMS}")
        if len(self.scenario.counts) != N_SLICES or len(self.scenario.speeds) != N_SLICES:
            raise ConfigurationError("counts and speeds must list all three slices")
        if len(self.env.beta) != N_SLICES:
            raise ConfigurationError("beta must have one weight per slice")
        if not 0 < self.env.c3 <= 1:
            raise ConfigurationError("c3 must lie in (0, 1]")
        if not 0 < self.env.gamma <= 1:
            raise ConfigurationError("gamma must lie in (0, 1]")
        if self.env.alpha <= 0 or any(b < 0 for b in self.env.beta):
            raise ConfigurationError("alpha must be > 0 and beta >= 0")
        if not 0 <= self.learner.epsilon_end < 1:
            raise ConfigurationError("epsilon_end must lie in [0, 1)")
        self.units()
        self.demand_normalizers()
        return self

    def resolved_dict(self):
        d = to_dict(self)
        d["resolved"] = {
            "n_bs": self.n_bs(),
            "units": self.units(),
            "action_count": math.comb(self.units() - 1, N_SLICES - 1),
            "warmup_periods": self.warmup_periods(),
            "demand_normalizers_bits": [float(v) for v in self.demand_normalizers()],
            "neighbor_radius_m": self.scenario.neighbor_radius_factor
            * self.scenario.inter_site_distance,
        }
        return d


# -- strict dict <-> dataclass plumbing ----------------------------------

def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path or 'config'}: expected a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigurationError(
            f"{path or 'config'}: unknown key(s) {sorted(unknown)}")
    kwargs = {}
    for name, f in known.items():
        if name not in data:
            continue
        value = data[name]
        target = _resolve_field_type(cls, name)
        if target is SliceTraffic:
            kwargs[name] = _build_slice_traffic(value, f"{path}.{name}")
        elif target is not None and dataclasses.is_dataclass(target):
            kwargs[name] = _build(target, value, f"{path}.{name}")
        else:
            kwargs[name] = value
    return cls(**kwargs)


def _resolve_field_type(cls, name):
    # dataclass sub-sections are identified by their default factories
    for f in dataclasses.fields(cls):
        if f.name != name:
            continue
        if f.default_factory is not dataclasses.MISSING:  # type: ignore[misc]
            probe = f.default_factory()
            if dataclasses.is_dataclass(probe):
                return type(probe)
    return None


def _build_slice_traffic(data, path):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: expected a mapping")
    unknown = set(data) - {"interarrival", "size", "sla_rate_mbps", "sla_latency_ms"}
    if unknown:
        raise ConfigurationError(f"{path}: unknown key(s) {sorted(unknown)}")
    out = {}
    if "interarrival" in data:
        out["interarrival"] = _build_dist(data["interarrival"], _TIME_DISTS,
                                          f"{path}.interarrival")
    if "size" in data:
        out["size"] = _build_dist(data["size"], _SIZE_DISTS, f"{path}.size")
    for k in ("sla_rate_mbps", "sla_latency_ms"):
        if k in data:
            out[k] = float(data[k])
    base = {"volte": _default_volte, "embb": _default_embb,
            "urllc": _default_urllc}[path.rsplit(".", 1)[-1]]()
    return dataclasses.replace(base, **out)


def _build_dist(data, table, path):
    if not isinstance(data, dict) or "dist" not in data:
        raise ConfigurationError(f"{path}: expected a mapping with a 'dist' key")
    kind = data["dist"]
    if kind not in table:
        raise ConfigurationError(
            f"{path}: unknown distribution {kind!r}; pick from {sorted(table)}")
    return _build(table[kind], data, path)


def to_dict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name))
                for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    return obj


def from_dict(data):
    cfg = _build(RunConfig, data or {}, "")
    return cfg.validate()


def load_config(path):
    with open(path) as fh:
        data = yaml.safe_load(fh)
    return from_dict(data)


def apply_overrides(cfg, overrides):
    """Apply dotted-path overrides like env.delta_mhz=0.18 (values are YAML)."""
    data = to_dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        node = data
        parts = key.strip().split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigurationError(f"override path {key!r} not found")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigurationError(f"override path {key!r} not found")
        node[parts[-1]] = value
    return from_dict(data)


def dump_config(cfg, path):
    """Echo the resolved configuration; stable key order for diffability."""
    doc = cfg.resolved_dict()
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=True))
