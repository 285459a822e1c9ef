"""Run configuration: parsing, validation and sweep expansion.

A run config is a JSON object::

    {
      "scenario": {"kind": "synthetic", "load_ratio": 1.0, ...},
      "controllers": [{"policy": "qtf", "v": 1000}, {"policy": "sstf"}],
      "horizon": 1000,
      "seed": 0,
      "output": "out",
      "sweep": [{"param": "controllers.0.v", "values": [1, 1000]}]
    }

Scenario fields are those of :class:`SyntheticConfig` or, with
``"kind": "trace"``, of :class:`TraceConfig` plus ``packet_log`` and
``prices`` file paths (``"bundled"`` selects the files shipped with the
package) and a nested ``packet`` object of :class:`PacketLogConfig` fields.
The scenario seed is not set here: the top-level ``seed`` feeds every
random stream. Sweep parameters are dotted paths into this same object.
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import itertools
import json
import os
from dataclasses import dataclass, field

from .model import DomainError
from .traces import PacketLogConfig, SyntheticConfig, TraceConfig, data_path

POLICIES = ("sstf", "qtf", "bes", "ossi")
BUNDLED = "bundled"
LAMBDA_SOURCES = ("exact", "estimated-from-trace")


class ConfigError(ValueError):
    """Invalid run configuration; ``key`` points at the offending entry."""

    def __init__(self, key: str, msg: str):
        super().__init__(f"{key}: {msg}" if key else msg)
        self.key = key
        self.msg = msg


def _expect(cond, key, msg):
    if not cond:
        raise ConfigError(key, msg)


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _dc_fields(cls) -> dict:
    return {f.name: f for f in dataclasses.fields(cls)}


def _build_dc(cls, data: dict, key: str, skip=()):
    known = set(_dc_fields(cls)) - set(skip)
    for name in data:
        _expect(name in known, f"{key}.{name}", f"unknown field for {cls.__name__}")
    try:
        return cls(**data)
    except (DomainError, TypeError, ValueError) as exc:
        raise ConfigError(key, str(exc)) from None


def _dc_dict(obj, skip=()) -> dict:
    out = {}
    for name in _dc_fields(type(obj)):
        if name in skip:
            continue
        v = getattr(obj, name)
        if dataclasses.is_dataclass(v):
            v = _dc_dict(v)
        elif isinstance(v, tuple):
            v = list(v)
        out[name] = v
    return out


@dataclass(frozen=True)
class ControllerSpec:
    policy: str
    v: float | None = None            # qtf
    beta0: float | str = "auto"       # sstf: step scale, or "auto" for suggest_beta0
    method: str = "qp"                # ossi: "qp" (exact) or "dual"
    lam: str | tuple = "exact"        # sstf: "exact", "estimated-from-trace" or explicit rates
    label: str | None = None

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        if self.policy == "qtf":
            return f"qtf-v{self.v:g}"
        if self.policy == "sstf" and self.beta0 != "auto":
            return f"sstf-b{self.beta0:g}"
        return self.policy

    @classmethod
    def from_dict(cls, d, key: str) -> "ControllerSpec":
        _expect(isinstance(d, dict), key, "expected an object")
        policy = d.get("policy")
        _expect(policy in POLICIES, f"{key}.policy", f"must be one of {', '.join(POLICIES)}")
        allowed = {"policy", "label", *{"qtf": ("v",), "sstf": ("beta0", "lam"),
                                        "ossi": ("method",)}.get(policy, ())}
        for name in d:
            _expect(name in allowed, f"{key}.{name}", f"not a parameter of {policy}")
        label = d.get("label")
        _expect(label is None or (isinstance(label, str) and label and "/" not in label),
                f"{key}.label", "must be a non-empty string without '/'")
        if policy == "qtf":
            v = d.get("v")
            _expect(_is_number(v) and v > 0, f"{key}.v", "QTF needs a positive V")
            return cls(policy, v=float(v), label=label)
        if policy == "sstf":
            b = d.get("beta0", "auto")
            _expect(b == "auto" or (_is_number(b) and b > 0), f"{key}.beta0", "must be positive or \"auto\"")
            lam = d.get("lam", "exact")
            if isinstance(lam, list):
                _expect(lam and all(_is_number(v) and v >= 0 for v in lam), f"{key}.lam",
                        "explicit rates must be nonnegative numbers")
                lam = tuple(float(v) for v in lam)
            else:
                _expect(lam in LAMBDA_SOURCES, f"{key}.lam",
                        f"must be one of {', '.join(LAMBDA_SOURCES)} or a list of rates")
            return cls(policy, beta0=b if b == "auto" else float(b), lam=lam, label=label)
        if policy == "ossi":
            m = d.get("method", "qp")
            _expect(m in ("qp", "dual"), f"{key}.method", "must be \"qp\" or \"dual\"")
            return cls(policy, method=m, label=label)
        return cls(policy, label=label)

    def to_dict(self) -> dict:
        out = {"policy": self.policy}
        if self.policy == "qtf":
            out["v"] = self.v
        elif self.policy == "sstf":
            out["beta0"] = self.beta0
            out["lam"] = list(self.lam) if isinstance(self.lam, tuple) else self.lam
        elif self.policy == "ossi":
            out["method"] = self.method
        if self.label is not None:
            out["label"] = self.label
        return out


@dataclass(frozen=True)
class ScenarioSpec:
    kind: str
    synthetic: SyntheticConfig | None = None
    trace: TraceConfig | None = None
    packet_log: str = BUNDLED
    prices: str = BUNDLED

    @classmethod
    def from_dict(cls, d, key: str = "scenario", base_dir: str | None = None) -> "ScenarioSpec":
        _expect(isinstance(d, dict), key, "expected an object")
        d = dict(d)
        kind = d.pop("kind", "synthetic")
        _expect(kind in ("synthetic", "trace"), f"{key}.kind", "must be \"synthetic\" or \"trace\"")
        _expect("seed" not in d, f"{key}.seed", "the scenario seed comes from the top-level seed")
        if kind == "synthetic":
            return cls(kind, synthetic=_build_dc(SyntheticConfig, d, key, skip=("seed",)))
        paths = {}
        for name in ("packet_log", "prices"):
            p = d.pop(name, BUNDLED)
            _expect(isinstance(p, str) and p, f"{key}.{name}", "must be a path or \"bundled\"")
            if p != BUNDLED and base_dir and not os.path.isabs(p):
                p = os.path.normpath(os.path.join(base_dir, p))
            paths[name] = p
        packet = d.pop("packet", {})
        _expect(isinstance(packet, dict), f"{key}.packet", "expected an object")
        pkt = _build_dc(PacketLogConfig, packet, f"{key}.packet")
        trace = _build_dc(TraceConfig, {**d, "packet": pkt}, key, skip=("seed",))
        return cls(kind, trace=trace, **paths)

    def to_dict(self) -> dict:
        if self.kind == "synthetic":
            return {"kind": "synthetic", **_dc_dict(self.synthetic, skip=("seed",))}
        return {"kind": "trace", "packet_log": self.packet_log, "prices": self.prices,
                **_dc_dict(self.trace, skip=("seed",))}

    def resolve(self, name: str) -> str:
        path = getattr(self, name)
        return data_path("packets.csv.gz" if name == "packet_log" else "prices.csv") if path == BUNDLED else path


@dataclass(frozen=True)
class SweepAxis:
    param: str
    values: tuple


@dataclass(frozen=True)
class RunConfig:
    scenario: ScenarioSpec
    controllers: tuple[ControllerSpec, ...]
    horizon: int | None = None       # None: 100000 for synthetic, one block for traces
    seed: int = 0
    output: str = "out"
    sweep: tuple[SweepAxis, ...] = field(default=())

    @classmethod
    def from_dict(cls, d, base_dir: str | None = None) -> "RunConfig":
        _expect(isinstance(d, dict), "", "config must be a JSON object")
        known = {"scenario", "controllers", "horizon", "seed", "output", "sweep"}
        for name in d:
            _expect(name in known, name, "unknown key")
        _expect("scenario" in d, "scenario", "missing")
        scenario = ScenarioSpec.from_dict(d["scenario"], base_dir=base_dir)
        ctrls = d.get("controllers")
        _expect(isinstance(ctrls, list) and ctrls, "controllers", "need at least one controller")
        specs = tuple(ControllerSpec.from_dict(c, f"controllers.{k}") for k, c in enumerate(ctrls))
        names = [s.name for s in specs]
        _expect(len(set(names)) == len(names), "controllers", f"duplicate controller names {names}; set labels")
        horizon = d.get("horizon")
        _expect(horizon is None or (isinstance(horizon, int) and not isinstance(horizon, bool) and horizon > 0),
                "horizon", "must be a positive integer")
        seed = d.get("seed", 0)
        _expect(isinstance(seed, int) and not isinstance(seed, bool) and seed >= 0, "seed",
                "must be a nonnegative integer")
        output = d.get("output", "out")
        _expect(isinstance(output, str) and output, "output", "must be a directory path")
        if base_dir and not os.path.isabs(output):
            output = os.path.normpath(os.path.join(base_dir, output))
        cfg = cls(scenario, specs, horizon, seed, output, ())
        sweep = d.get("sweep", [])
        _expect(isinstance(sweep, list), "sweep", "expected a list of axes")
        axes = []
        for k, ax in enumerate(sweep):
            key = f"sweep.{k}"
            _expect(isinstance(ax, dict) and set(ax) == {"param", "values"}, key,
                    "each axis is {\"param\": ..., \"values\": [...]}")
            _expect(isinstance(ax["values"], list) and ax["values"], f"{key}.values", "need a non-empty list")
            _expect(ax["param"] not in ("sweep", "output"), f"{key}.param", "cannot sweep this key")
            _lookup(cfg.to_dict(), ax["param"], f"{key}.param")
            axes.append(SweepAxis(ax["param"], tuple(ax["values"])))
        params = [a.param for a in axes]
        _expect(len(set(params)) == len(params), "sweep", "an axis appears twice")
        cfg = dataclasses.replace(cfg, sweep=tuple(axes))
        if axes:
            cfg.points()   # validates every swept value
        return cfg

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except OSError as exc:
            raise ConfigError("", f"cannot read {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError("", f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
        return cls.from_dict(data, base_dir=os.path.dirname(os.path.abspath(path)))

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario.to_dict(),
            "controllers": [c.to_dict() for c in self.controllers],
            "horizon": self.horizon,
            "seed": self.seed,
            "output": self.output,
            "sweep": [{"param": a.param, "values": list(a.values)} for a in self.sweep],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form, output directory excluded."""
        d = self.to_dict()
        d.pop("output")
        return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()

    def points(self) -> list[tuple[dict, "RunConfig"]]:
        """Cartesian product of the sweep axes as (assignment, sweep-free config) pairs, in order."""
        if not self.sweep:
            return [({}, self)]
        base = self.to_dict()
        base["sweep"] = []
        out = []
        for combo in itertools.product(*(a.values for a in self.sweep)):
            d = copy.deepcopy(base)
            assign = {}
            for axis, value in zip(self.sweep, combo):
                _assign(d, axis.param, value)
                assign[axis.param] = value
            try:
                cfg = RunConfig.from_dict(d)
            except ConfigError as exc:
                where = ", ".join(f"{k}={v!r}" for k, v in assign.items())
                raise ConfigError(exc.key, f"{exc.msg} (sweep point {where})") from None
            out.append((assign, cfg))
        return out


def _split(path: str) -> list:
    return [int(p) if p.isdigit() else p for p in path.split(".")]


def _lookup(d, path: str, key: str):
    cur = d
    for part in _split(path):
        ok = (isinstance(cur, dict) and part in cur) or (
            isinstance(cur, list) and isinstance(part, int) and part < len(cur))
        _expect(ok, key, f"{path!r} does not name a configuration parameter")
        cur = cur[part]
    _expect(not isinstance(cur, dict), key, f"{path!r} names a section, not a parameter")
    return cur


def _assign(d, path: str, value) -> None:
    parts = _split(path)
    cur = d
    for part in parts[:-1]:
        cur = cur[part]
    cur[parts[-1]] = value
