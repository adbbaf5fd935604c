"""YAML experiment configuration.

Layout (schema version 1; every key not listed here is rejected)::

    schema: 1
    scenario: fig3
    defaults:            # merged into every queue block, optional
      buffer: 50
      arrival_rate: 1.0
      energy: {kind: exponential}
      channel: {states: [1, 2], kernel: [[0.7, 0.3], [0.3, 0.7]]}
    queues:
      - {id: q1, holding_cost: 10}
      - {id: q2, holding_cost: 20}
    solver: {tol: 1.0e-10, max_iter: 1000000, bisection_tol: 1.0e-6,
             gamma: 0.01, sweeps: 100000, grid_points: 21}
    simulation: {horizon: 100000, delta: 1.0, seeds: [0, 1],
                 policies: [whittle, maxweight, wfq],
                 arrival_sweep: [0.25, 0.5]}
    output: out

Energy blocks are ``{kind: exponential}``, ``{kind: quadratic, k: 1.0}`` or
``{kind: table, values: [0, 1, 3]}``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigurationError, ValidationError
from .model import ChannelModel, EnergyFn, QueueSpec, validate
from .policies import POLICY_NAMES

SCHEMA_VERSION = 1

_TOP = {"schema", "scenario", "defaults", "queues", "solver", "simulation", "output"}
_QUEUE = {"id", "buffer", "holding_cost", "arrival_rate", "energy", "channel"}
_ENERGY = {"kind", "k", "values"}
_CHANNEL = {"states", "kernel"}


@dataclass(frozen=True)
class SolverSettings:
    tol: float = 1e-10
    max_iter: int = 10**6
    bisection_tol: float = 1e-6
    gamma: float = 0.01
    sweeps: int = 10**5
    grid_points: int = 21


@dataclass(frozen=True)
class SimulationSettings:
    horizon: int = 100_000
    delta: float = 1.0
    seeds: tuple[int, ...] = (0,)
    policies: tuple[str, ...] = POLICY_NAMES
    arrival_sweep: tuple[float, ...] = ()


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str
    queue_ids: tuple[str, ...]
    queues: tuple[QueueSpec, ...]
    solver: SolverSettings = field(default_factory=SolverSettings)
    simulation: SimulationSettings = field(default_factory=SimulationSettings)
    output: str = "out"

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA_VERSION,
            "scenario": self.scenario,
            "queues": [dict(id=i, **queue_to_dict(q)) for i, q in zip(self.queue_ids, self.queues)],
            "solver": asdict(self.solver),
            "simulation": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.simulation).items()},
            "output": self.output,
        }

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def with_arrival_rate(self, rate: float) -> "ExperimentConfig":
        return replace(self, queues=tuple(replace(q, arrival_rate=float(rate)) for q in self.queues))


def queue_to_dict(q: QueueSpec) -> dict:
    e: dict[str, Any] = {"kind": q.energy.kind}
    if q.energy.kind == "quadratic":
        e["k"] = q.energy.k
    if q.energy.kind == "table":
        e["values"] = list(q.energy.values)
    return {
        "buffer": q.buffer,
        "holding_cost": q.holding_cost,
        "arrival_rate": q.arrival_rate,
        "energy": e,
        "channel": {"states": list(q.channel.states), "kernel": [list(r) for r in q.channel.kernel]},
    }


def spec_digest(q: QueueSpec, *extra) -> str:
    """Content hash of a queue's model parameters (plus any solver settings in ``extra``)."""
    payload = json.dumps([queue_to_dict(q), [repr(e) for e in extra]], sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:20]


def _mapping(obj, where: str, allowed: set[str]) -> dict:
    if not isinstance(obj, dict):
        raise ConfigurationError(f"{where}: expected a mapping, got {type(obj).__name__}")
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise ConfigurationError(f"{where}: unknown keys {unknown}")
    return obj


def _number(v, where: str, kind=float):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigurationError(f"{where}: expected a number, got {v!r}")
    if kind is int and (not float(v).is_integer()):
        raise ConfigurationError(f"{where}: expected an integer, got {v!r}")
    return kind(v)


def _energy(d, where) -> EnergyFn:
    d = _mapping(d, where, _ENERGY)
    kind = d.get("kind", "exponential")
    if kind not in ("exponential", "quadratic", "table"):
        raise ConfigurationError(f"{where}: unknown energy kind {kind!r}")
    k = _number(d.get("k", 1.0), f"{where}.k")
    values = tuple(_number(v, f"{where}.values") for v in d.get("values", ()))
    return EnergyFn(kind, k, values)


def _channel(d, where) -> ChannelModel:
    d = _mapping(d, where, _CHANNEL)
    try:
        states = tuple(_number(s, f"{where}.states") for s in d["states"])
        kernel = tuple(tuple(_number(p, f"{where}.kernel") for p in row) for row in d["kernel"])
    except KeyError as exc:
        raise ConfigurationError(f"{where}: missing {exc.args[0]!r}") from None
    except TypeError:
        raise ConfigurationError(f"{where}: states and kernel must be lists") from None
    return ChannelModel(states, kernel)


def _queue(d, defaults, i) -> tuple[str, QueueSpec]:
    where = f"queues[{i}]"
    d = {**defaults, **_mapping(d, where, _QUEUE)}
    for key in ("buffer", "holding_cost", "arrival_rate"):
        if key not in d:
            raise ConfigurationError(f"{where}: missing {key!r}")
    spec = QueueSpec(
        buffer=_number(d["buffer"], f"{where}.buffer", int),
        holding_cost=_number(d["holding_cost"], f"{where}.holding_cost"),
        arrival_rate=_number(d["arrival_rate"], f"{where}.arrival_rate"),
        energy=_energy(d.get("energy", {}), f"{where}.energy"),
        channel=_channel(d["channel"], f"{where}.channel") if "channel" in d else ChannelModel.constant(),
    )
    return str(d.get("id", f"q{i + 1}")), spec


def _settings(cls, d, where):
    allowed = set(cls.__dataclass_fields__)
    d = _mapping(d or {}, where, allowed)
    out = {}
    for k, v in d.items():
        default = getattr(cls(), k)
        if isinstance(default, tuple):
            if not isinstance(v, list):
                raise ConfigurationError(f"{where}.{k}: expected a list")
            if k == "policies":
                bad = [p for p in v if p not in POLICY_NAMES]
                if bad:
                    raise ConfigurationError(f"{where}.policies: unknown {bad}; choose from {list(POLICY_NAMES)}")
                out[k] = tuple(str(p) for p in v)
            elif k == "seeds":
                out[k] = tuple(_number(s, f"{where}.seeds", int) for s in v)
            else:
                out[k] = tuple(_number(s, f"{where}.{k}") for s in v)
        else:
            out[k] = _number(v, f"{where}.{k}", type(default))
    return cls(**out)


def from_dict(raw: Any) -> ExperimentConfig:
    """Parse and validate.

    A channel without stochastic dominance is accepted here; it only breaks
    the structural guarantees, which ``verify --strict`` reports.
    """
    raw = _mapping(raw, "config", _TOP)
    if raw.get("schema") != SCHEMA_VERSION:
        raise ConfigurationError(f"config: schema must be {SCHEMA_VERSION}, got {raw.get('schema')!r}")
    defaults = _mapping(raw.get("defaults", {}), "defaults", _QUEUE - {"id"})
    qs = raw.get("queues")
    if not isinstance(qs, list) or not qs:
        raise ConfigurationError("config: 'queues' must be a non-empty list")
    ids, specs = zip(*(_queue(q, defaults, i) for i, q in enumerate(qs)))
    if len(set(ids)) != len(ids):
        raise ConfigurationError(f"config: duplicate queue ids {list(ids)}")
    problems = []
    for qid, spec in zip(ids, specs):
        rep = validate(spec)
        for v in rep.violations:
            if "dominate" in v:
                continue
            problems.append(f"{qid}: {v}")
    if problems:
        raise ValidationError(problems)
    sim = _settings(SimulationSettings, raw.get("simulation"), "simulation")
    if not sim.seeds:
        raise ConfigurationError("simulation.seeds: at least one seed required")
    return ExperimentConfig(
        scenario=str(raw.get("scenario", "experiment")),
        queue_ids=tuple(ids),
        queues=tuple(specs),
        solver=_settings(SolverSettings, raw.get("solver"), "solver"),
        simulation=sim,
        output=str(raw.get("output", "out")),
    )


def load(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: not valid YAML ({exc})") from None
    return from_dict(raw)


def dump(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
