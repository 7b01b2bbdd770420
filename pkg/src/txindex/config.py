"""Scenario configuration: topology, buffer policy and timing for one run."""
from __future__ import annotations

import dataclasses
import math
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .flow_model import FlowParams

POLICIES = ("droptail", "red", "index")


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class LinkSpec:
    bandwidth_bps: float
    propagation_delay_s: float

    def __post_init__(self):
        if not self.bandwidth_bps > 0 or not self.propagation_delay_s > 0:
            raise ScenarioError(f"link bandwidth and delay must be positive: {self}")


@dataclass(frozen=True)
class RedParams:
    min_th: float
    max_th: float
    w_q: float = 0.002
    max_p: float = 0.1

    def validate(self, buffer_size: int) -> None:
        if not 0 < self.min_th < self.max_th <= buffer_size:
            raise ScenarioError(
                f"RED thresholds need 0 < min_th < max_th <= B, got {self.min_th}, {self.max_th}, B={buffer_size}")
        if not 0 < self.w_q <= 1 or not 0 < self.max_p <= 1:
            raise ScenarioError("RED w_q and max_p must lie in (0, 1]")

    @classmethod
    def defaults_for(cls, buffer_size: int) -> "RedParams":
        lo = math.ceil(0.25 * buffer_size)
        hi = math.ceil(0.75 * buffer_size)
        if hi <= lo:  # tiny buffers
            hi = min(lo + 1, buffer_size)
        return cls(min_th=lo, max_th=hi)


@dataclass(frozen=True)
class RouterSpec:
    buffer_size: int
    policy: str
    egress: LinkSpec
    red: Optional[RedParams] = None

    def __post_init__(self):
        if int(self.buffer_size) != self.buffer_size or self.buffer_size < 1:
            raise ScenarioError(f"buffer size must be a positive integer, got {self.buffer_size}")
        if self.policy not in POLICIES:
            raise ScenarioError(f"unknown policy {self.policy!r}; expected one of {POLICIES}")
        if self.red is not None:
            self.red.validate(self.buffer_size)

    def red_params(self) -> RedParams:
        return self.red if self.red is not None else RedParams.defaults_for(self.buffer_size)


@dataclass(frozen=True)
class FlowSpec:
    params: FlowParams
    access: LinkSpec
    start_time_s: float = 0.0


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    flows: tuple
    router: RouterSpec
    sim_duration_s: float = 25.0
    warmup_s: float = 5.0
    seed: int = 1
    packet_bytes: int = 576
    sample_interval_s: float = 0.01
    probe_after_rtts: float = 2.0

    def __post_init__(self):
        if not self.flows:
            raise ScenarioError("at least one flow is required")
        if not (math.isfinite(self.sim_duration_s) and self.sim_duration_s > 0):
            raise ScenarioError("sim_duration_s must be finite and positive")
        if not 0 <= self.warmup_s < self.sim_duration_s:
            raise ScenarioError("warmup_s must lie in [0, sim_duration_s)")
        if self.packet_bytes < 1 or not self.sample_interval_s > 0 or not self.probe_after_rtts > 0:
            raise ScenarioError("packet_bytes, sample_interval_s and probe_after_rtts must be positive")
        if self.router.policy == "red":
            self.router.red_params().validate(self.router.buffer_size)

    def with_policy(self, policy: str, seed: Optional[int] = None) -> "ScenarioSpec":
        router = dataclasses.replace(self.router, policy=policy)
        return dataclasses.replace(self, router=router, seed=self.seed if seed is None else seed)

    def replace(self, **changes) -> "ScenarioSpec":
        return dataclasses.replace(self, **changes)


def _link(d: dict, bw_key: str, delay_key: str, where: str) -> LinkSpec:
    try:
        return LinkSpec(float(d[bw_key]), float(d[delay_key]))
    except KeyError as exc:
        raise ScenarioError(f"{where}: missing {exc.args[0]!r}") from None


def scenario_from_dict(doc: dict, policy: Optional[str] = None) -> ScenarioSpec:
    """Build a scenario from parsed TOML; ``policy`` overrides the file's policy."""
    try:
        router_d = doc["router"]
        flows_d = doc["flows"]
    except KeyError as exc:
        raise ScenarioError(f"missing section {exc.args[0]!r}") from None
    idx = doc.get("index", {})
    flows = []
    for k, f in enumerate(flows_d, start=1):
        params = FlowParams(
            max_window=int(f.get("max_window", idx.get("max_window", 70))),
            gamma=float(f["gamma"]),
            alpha=float(f.get("alpha", idx.get("alpha", 1.0))),
            beta=float(f.get("beta", idx.get("beta", 0.9999))),
            initial_window=int(f.get("initial_window", 1)),
        )
        flows.append(FlowSpec(params, _link(f, "access_bandwidth_bps", "access_delay_s", f"flow {k}"),
                              float(f.get("start_time_s", 0.0))))
    red = None
    if "red" in router_d:
        B = int(router_d["buffer_size"])
        base = RedParams.defaults_for(B)
        r = router_d["red"]
        red = RedParams(float(r.get("min_th", base.min_th)), float(r.get("max_th", base.max_th)),
                        float(r.get("w_q", base.w_q)), float(r.get("max_p", base.max_p)))
    router = RouterSpec(
        buffer_size=int(router_d["buffer_size"]),
        policy=policy or router_d.get("policy", "droptail"),
        egress=_link(router_d, "bandwidth_bps", "propagation_delay_s", "router"),
        red=red,
    )
    keys = ("sim_duration_s", "warmup_s", "seed", "packet_bytes", "sample_interval_s", "probe_after_rtts")
    extra = {k: doc[k] for k in keys if k in doc}
    return ScenarioSpec(name=doc.get("name", "scenario"), flows=tuple(flows), router=router, **extra)


def read_scenario_doc(path) -> dict:
    """Parsed TOML for a scenario file; bare names like ``scenario0`` resolve to the bundled files."""
    p = Path(path)
    if not p.exists():
        bundled = resources.files("txindex") / "scenarios" / (p.stem + ".toml")
        if not bundled.is_file():
            raise ScenarioError(f"scenario file not found: {path}")
        data = bundled.read_bytes()
    else:
        data = p.read_bytes()
    try:
        doc = tomllib.loads(data.decode())
    except tomllib.TOMLDecodeError as exc:
        raise ScenarioError(f"{path}: {exc}") from None
    return doc


def apply_override(doc: dict, assignment: str) -> None:
    """Apply ``dotted.key=value`` in place; list entries are addressed by position (``flows.0.gamma``)."""
    key, sep, raw = assignment.partition("=")
    if not sep or not key:
        raise ScenarioError(f"override must look like key=value, got {assignment!r}")
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    parts = key.strip().split(".")
    node = doc
    for part in parts[:-1]:
        if isinstance(node, list):
            try:
                node = node[int(part)]
            except (ValueError, IndexError):
                raise ScenarioError(f"bad list position {part!r} in {key!r}") from None
        else:
            node = node.setdefault(part, {})
    last = parts[-1]
    if isinstance(node, list):
        try:
            node[int(last)] = value
        except (ValueError, IndexError):
            raise ScenarioError(f"bad list position {last!r} in {key!r}") from None
    else:
        node[last] = value


def load_scenario(path, policy: Optional[str] = None, overrides=()) -> ScenarioSpec:
    doc = read_scenario_doc(path)
    for o in overrides:
        apply_override(doc, o)
    return scenario_from_dict(doc, policy)


def bundled_scenarios() -> list:
    d = resources.files("txindex") / "scenarios"
    return sorted(p.name[:-5] for p in d.iterdir() if p.name.endswith(".toml"))
