"""Shared domain types: model, cluster, training config and parallel plans.

Every type is a frozen dataclass that checks its own invariants on
construction and raises :class:`ConfigError` when they do not hold. Plans are
the exception: a :class:`ParallelPlan` is only checked structurally, and the
cross-cutting rules (coverage, device counts, links, batch divisibility) are
reported by :func:`validate_plan` without raising.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence

import yaml

SCHEMA_VERSION = 1

INTRA_NODE = "intra-node"
INTER_NODE = "inter-node-homogeneous"
INTER_GROUP = "inter-group"
LINK_SCOPES = (INTRA_NODE, INTER_NODE, INTER_GROUP)

GPU_DIRECT = "gpu-direct"
CPU_STAGED = "cpu-staged"
PATH_KINDS = (GPU_DIRECT, CPU_STAGED)

SCHEDULES = ("gpipe", "1f1b")

# default wire efficiencies per path kind and the PCIe staging copy rate
DEFAULT_LINK_EFFICIENCY = {GPU_DIRECT: 0.85, CPU_STAGED: 0.76}
DEFAULT_STAGING_BYTES_PER_S = 16e9

# calibration may legitimately push efficiency above 1 (up to its clamp)
MAX_COMPUTE_EFFICIENCY = 1.5


class ConfigError(ValueError):
    """Raised for malformed or inconsistent configuration input."""


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def _build(cls, data: Mapping[str, Any], what: str):
    if not isinstance(data, Mapping):
        raise ConfigError(f"{what}: expected a mapping, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{what}: unknown field(s) {', '.join(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{what}: {exc}") from None


@dataclass(frozen=True)
class ModelSpec:
    num_layers: int
    hidden_size: int
    seq_length: int
    vocab_size: int
    num_heads: int
    bytes_per_element: int = 2
    activation_bytes_per_token_per_hidden: float = 34.0
    # extra cost (in units of one transformer layer) charged to the first and
    # last stage for the embedding and LM head
    embedding_cost_multiplier: float = 0.0

    def __post_init__(self):
        _require(self.num_layers >= 1, "num_layers must be >= 1")
        _require(self.hidden_size >= 1, "hidden_size must be >= 1")
        _require(self.seq_length >= 1, "seq_length must be >= 1")
        _require(self.num_heads >= 1, "num_heads must be >= 1")
        _require(self.hidden_size % self.num_heads == 0,
                 "hidden_size must be divisible by num_heads")
        _require(self.bytes_per_element in (2, 4), "bytes_per_element must be 2 or 4")
        _require(self.activation_bytes_per_token_per_hidden >= 0,
                 "activation_bytes_per_token_per_hidden must be >= 0")
        _require(self.embedding_cost_multiplier >= 0,
                 "embedding_cost_multiplier must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ModelSpec":
        return _build(cls, data, "model")


@dataclass(frozen=True)
class DeviceGroup:
    name: str
    peak_tflops: float
    memory_bytes: float
    node_count: int
    devices_per_node: int
    compute_efficiency: float = 1.0
    bwd_fwd_ratio: float = 2.0

    def __post_init__(self):
        _require(bool(self.name), "device group needs a name")
        _require(self.peak_tflops > 0, f"group {self.name}: peak_tflops must be > 0")
        _require(self.memory_bytes > 0, f"group {self.name}: memory_bytes must be > 0")
        _require(self.node_count >= 1, f"group {self.name}: node_count must be >= 1")
        _require(self.devices_per_node >= 1,
                 f"group {self.name}: devices_per_node must be >= 1")
        _require(0 < self.compute_efficiency <= MAX_COMPUTE_EFFICIENCY,
                 f"group {self.name}: compute_efficiency must be in (0, {MAX_COMPUTE_EFFICIENCY}]")
        _require(self.bwd_fwd_ratio >= 1, f"group {self.name}: bwd_fwd_ratio must be >= 1")

    @property
    def device_count(self) -> int:
        return self.node_count * self.devices_per_node

    @property
    def effective_tflops(self) -> float:
        return self.peak_tflops * self.compute_efficiency

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "DeviceGroup":
        return _build(cls, data, "device group")


@dataclass(frozen=True)
class Endpoints:
    scope: str
    groups: tuple

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(self.groups))
        _require(self.scope in LINK_SCOPES, f"unknown link scope {self.scope!r}")
        want = 2 if self.scope == INTER_GROUP else 1
        _require(len(self.groups) == want,
                 f"{self.scope} link needs exactly {want} group name(s)")
        if self.scope == INTER_GROUP:
            _require(self.groups[0] != self.groups[1], "inter-group link joins a group to itself")

    def to_dict(self) -> dict:
        return {"scope": self.scope, "groups": list(self.groups)}


@dataclass(frozen=True)
class Link:
    endpoints: Endpoints
    bandwidth_bits_per_s: float
    latency_s: float = 0.0
    efficiency: Optional[float] = None
    path_kind: str = GPU_DIRECT
    staging_copy_bytes_per_s: Optional[float] = None

    def __post_init__(self):
        if isinstance(self.endpoints, Mapping):
            object.__setattr__(self, "endpoints", _build(Endpoints, self.endpoints, "link endpoints"))
        _require(self.path_kind in PATH_KINDS, f"unknown path_kind {self.path_kind!r}")
        _require(self.bandwidth_bits_per_s > 0, "bandwidth_bits_per_s must be > 0")
        _require(self.latency_s >= 0, "latency_s must be >= 0")
        if self.efficiency is None:
            object.__setattr__(self, "efficiency", DEFAULT_LINK_EFFICIENCY[self.path_kind])
        _require(0 < self.efficiency <= 1, "link efficiency must be in (0, 1]")
        if self.path_kind == CPU_STAGED and self.staging_copy_bytes_per_s is None:
            object.__setattr__(self, "staging_copy_bytes_per_s", DEFAULT_STAGING_BYTES_PER_S)
        if self.staging_copy_bytes_per_s is not None:
            _require(self.staging_copy_bytes_per_s > 0,
                     "staging_copy_bytes_per_s must be > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["endpoints"] = self.endpoints.to_dict()
        return d

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Link":
        return _build(cls, data, "link")


@dataclass(frozen=True)
class ClusterSpec:
    groups: tuple
    links: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(self.groups))
        object.__setattr__(self, "links", tuple(self.links))
        _require(len(self.groups) >= 1, "cluster needs at least one device group")
        names = [g.name for g in self.groups]
        _require(len(set(names)) == len(names), "device group names must be unique")
        seen = set()
        for link in self.links:
            ep = link.endpoints
            for name in ep.groups:
                _require(name in names, f"{ep.scope} link references unknown group {name!r}")
            key = (ep.scope, frozenset(ep.groups))
            _require(key not in seen,
                     f"duplicate {ep.scope} link for {'/'.join(sorted(ep.groups))}")
            seen.add(key)
        for name in names:
            _require((INTRA_NODE, frozenset([name])) in seen,
                     f"group {name!r} has no intra-node link")
            _require((INTER_NODE, frozenset([name])) in seen,
                     f"group {name!r} has no inter-node-homogeneous link")

    @property
    def total_nodes(self) -> int:
        return sum(g.node_count for g in self.groups)

    def group(self, name: str) -> DeviceGroup:
        for g in self.groups:
            if g.name == name:
                return g
        raise KeyError(name)

    def _find(self, scope: str, groups: Iterable[str]) -> Optional[Link]:
        want = frozenset(groups)
        for link in self.links:
            if link.endpoints.scope == scope and frozenset(link.endpoints.groups) == want:
                return link
        return None

    def intra_node_link(self, name: str) -> Link:
        return self._find(INTRA_NODE, [name])

    def inter_node_link(self, name: str) -> Link:
        return self._find(INTER_NODE, [name])

    def inter_group_link(self, a: str, b: str) -> Optional[Link]:
        return self._find(INTER_GROUP, [a, b])

    def stage_link(self, a: str, b: str) -> Optional[Link]:
        """Link used for a point-to-point hop between stages on groups a and b."""
        return self.inter_node_link(a) if a == b else self.inter_group_link(a, b)

    def replace_group(self, group: DeviceGroup) -> "ClusterSpec":
        return replace(self, groups=tuple(group if g.name == group.name else g for g in self.groups))

    def to_dict(self) -> dict:
        return {"groups": [g.to_dict() for g in self.groups],
                "links": [l.to_dict() for l in self.links]}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ClusterSpec":
        if not isinstance(data, Mapping):
            raise ConfigError("cluster: expected a mapping")
        unknown = sorted(set(data) - {"groups", "links"})
        if unknown:
            raise ConfigError(f"cluster: unknown field(s) {', '.join(unknown)}")
        groups = [DeviceGroup.from_dict(g) for g in data.get("groups") or []]
        links = [Link.from_dict(l) for l in data.get("links") or []]
        return cls(groups=tuple(groups), links=tuple(links))


@dataclass(frozen=True)
class TrainConfig:
    global_batch_size: int
    micro_batch_size: int = 1
    # bytes of weights + grads + optimizer state, as a multiple of weight bytes
    optimizer_state_multiplier: float = 8.0

    def __post_init__(self):
        _require(self.global_batch_size >= 1, "global_batch_size must be >= 1")
        _require(self.micro_batch_size >= 1, "micro_batch_size must be >= 1")
        _require(self.optimizer_state_multiplier >= 1, "optimizer_state_multiplier must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TrainConfig":
        return _build(cls, data, "train config")


@dataclass(frozen=True)
class StageAssignment:
    layer_range: tuple
    group: str
    nodes_used: int
    tp_degree: int
    dp_degree: int

    def __post_init__(self):
        object.__setattr__(self, "layer_range", tuple(self.layer_range))
        _require(len(self.layer_range) == 2, "layer_range must be a [start, end) pair")
        _require(self.nodes_used >= 1, "nodes_used must be >= 1")
        _require(self.tp_degree >= 1, "tp_degree must be >= 1")
        _require(self.dp_degree >= 1, "dp_degree must be >= 1")

    @property
    def num_layers(self) -> int:
        return max(0, self.layer_range[1] - self.layer_range[0])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layer_range"] = list(self.layer_range)
        return d

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "StageAssignment":
        return _build(cls, data, "stage")


@dataclass(frozen=True)
class ParallelPlan:
    stages: tuple
    micro_batches_per_dp_replica: int
    schedule: str = "1f1b"
    # None means "take it from the TrainConfig"
    micro_batch_size: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        _require(len(self.stages) >= 1, "plan needs at least one stage")
        _require(self.micro_batches_per_dp_replica >= 1, "micro_batches_per_dp_replica must be >= 1")
        _require(self.schedule in SCHEDULES, f"unknown schedule {self.schedule!r}")
        _require(self.micro_batch_size is None or self.micro_batch_size >= 1,
                 "micro_batch_size must be >= 1")

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    @property
    def dp_degree(self) -> int:
        return self.stages[0].dp_degree

    def layer_counts(self) -> list:
        return [s.num_layers for s in self.stages]

    def batch_size(self, cfg: TrainConfig) -> int:
        return self.micro_batch_size if self.micro_batch_size is not None else cfg.micro_batch_size

    def devices_used(self, cluster: ClusterSpec) -> int:
        return sum(s.nodes_used * cluster.group(s.group).devices_per_node for s in self.stages)

    def encoding(self) -> tuple:
        """Total order used to break ties between plans of equal cost."""
        return (len(self.stages),
                tuple((s.group, s.num_layers, s.nodes_used, s.tp_degree) for s in self.stages),
                self.micro_batches_per_dp_replica)

    def to_dict(self) -> dict:
        return {
            "stages": [s.to_dict() for s in self.stages],
            "micro_batches_per_dp_replica": self.micro_batches_per_dp_replica,
            "schedule": self.schedule,
            "micro_batch_size": self.micro_batch_size,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ParallelPlan":
        if not isinstance(data, Mapping):
            raise ConfigError("plan: expected a mapping")
        data = dict(data)
        data.pop("schema_version", None)
        data.pop("inputs", None)
        stages = [StageAssignment.from_dict(s) for s in data.pop("stages", None) or []]
        return _build(cls, {**data, "stages": tuple(stages)}, "plan")


def plan_from_layer_counts(counts: Sequence[int], groups: Sequence[str], *,
                           nodes_used: Sequence[int], tp: Sequence[int], dp: int,
                           micro_batches: int, schedule: str = "1f1b",
                           micro_batch_size: Optional[int] = None) -> ParallelPlan:
    stages = []
    start = 0
    for n, g, nodes, t in zip(counts, groups, nodes_used, tp):
        stages.append(StageAssignment((start, start + n), g, nodes, t, dp))
        start += n
    return ParallelPlan(tuple(stages), micro_batches, schedule, micro_batch_size)


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple = field(default_factory=tuple)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def validate_plan(plan: ParallelPlan, model: ModelSpec, cluster: ClusterSpec,
                  cfg: TrainConfig) -> ValidationReport:
    """Check a plan against the model, cluster and batch configuration.

    Never raises; every broken rule is listed in the returned report.
    """
    out = []
    expected = 0
    for idx, st in enumerate(plan.stages):
        start, end = st.layer_range
        if end <= start:
            out.append(f"stage {idx}: empty layer range [{start}, {end})")
            continue
        if start > expected:
            out.append(f"uncovered layers [{expected}, {start}) before stage {idx}")
        elif start < expected:
            out.append(f"stage {idx}: overlapping layer ranges at layer {start}")
        expected = max(expected, end)
    if expected < model.num_layers:
        out.append(f"uncovered layers [{expected}, {model.num_layers})")
    elif expected > model.num_layers:
        out.append(f"layer range exceeds model ({expected} > {model.num_layers})")

    names = {g.name for g in cluster.groups}
    nodes_by_group = {}
    for idx, st in enumerate(plan.stages):
        if st.group not in names:
            out.append(f"stage {idx}: unknown device group {st.group!r}")
            continue
        g = cluster.group(st.group)
        nodes_by_group[st.group] = nodes_by_group.get(st.group, 0) + st.nodes_used
        if st.tp_degree > g.devices_per_node:
            out.append(f"stage {idx}: TP exceeds node ({st.tp_degree} > {g.devices_per_node} devices)")
        elif g.devices_per_node % st.tp_degree:
            out.append(f"stage {idx}: TP degree {st.tp_degree} does not divide {g.devices_per_node} devices per node")
        if st.dp_degree * st.tp_degree != st.nodes_used * g.devices_per_node:
            out.append(f"stage {idx}: dp*tp = {st.dp_degree * st.tp_degree} does not match "
                       f"{st.nodes_used * g.devices_per_node} devices on {st.nodes_used} node(s)")

    if len({st.dp_degree for st in plan.stages}) > 1:
        out.append("stages disagree on dp_degree")
    for name, used in sorted(nodes_by_group.items()):
        have = cluster.group(name).node_count
        if used > have:
            out.append(f"group {name!r}: plan uses {used} nodes, cluster has {have}")
    total = sum(st.nodes_used for st in plan.stages)
    if total > cluster.total_nodes:
        out.append(f"plan uses {total} nodes, cluster has {cluster.total_nodes}")

    for idx in range(len(plan.stages) - 1):
        a, b = plan.stages[idx].group, plan.stages[idx + 1].group
        if a != b and a in names and b in names and cluster.inter_group_link(a, b) is None:
            out.append(f"no heterogeneous link between {a!r} and {b!r} (stages {idx}->{idx + 1})")

    bs = plan.batch_size(cfg)
    per_iter = plan.dp_degree * bs * plan.micro_batches_per_dp_replica
    if per_iter != cfg.global_batch_size:
        out.append(f"global batch mismatch: dp {plan.dp_degree} x micro-batch {bs} x "
                   f"{plan.micro_batches_per_dp_replica} micro-batches = {per_iter}, "
                   f"expected {cfg.global_batch_size}")
    return ValidationReport(tuple(out))


# -- documents ---------------------------------------------------------------

def load_document(path) -> dict:
    """Read one YAML or JSON document (YAML is a superset, so one parser)."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f":{mark.line + 1}" if mark is not None else ""
        raise ConfigError(f"{path}{where}: {getattr(exc, 'problem', exc)}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    return data


def _loader(cls):
    def load(path_or_data):
        data = path_or_data if isinstance(path_or_data, Mapping) else load_document(path_or_data)
        try:
            return cls.from_dict(data)
        except ConfigError as exc:
            if isinstance(path_or_data, Mapping):
                raise
            raise ConfigError(f"{path_or_data}: {exc}") from None
    load.__name__ = f"load_{cls.__name__}"
    return load


load_model = _loader(ModelSpec)
load_cluster = _loader(ClusterSpec)
load_train_config = _loader(TrainConfig)
load_plan = _loader(ParallelPlan)


def render(obj) -> str:
    """Stable JSON text for any core type."""
    return json.dumps(obj.to_dict(), sort_keys=True)


def parse(cls, text: str):
    return cls.from_dict(json.loads(text))


def plan_document(plan: ParallelPlan, inputs: Optional[Mapping[str, str]] = None) -> dict:
    doc = {"schema_version": SCHEMA_VERSION, **plan.to_dict()}
    if inputs:
        doc["inputs"] = dict(inputs)
    return doc
