"""Profiled per-layer timings and calibration of per-group compute efficiency."""

from __future__ import annotations

import json
import statistics
from dataclasses import asdict, dataclass, fields, replace
from typing import Iterable, List, Tuple

from .core import MAX_COMPUTE_EFFICIENCY, ClusterSpec, ConfigError, ModelSpec
from .cost import layer_flops_shape

OP_KINDS = ("transformer_layer", "embedding", "lm_head")


@dataclass(frozen=True)
class ProfileRecord:
    device_type: str
    op_kind: str
    micro_batch: int
    seq_length: int
    hidden: int
    tp_degree: int
    fwd_ms: float
    bwd_ms: float

    def __post_init__(self):
        if self.op_kind not in OP_KINDS:
            raise ConfigError(f"unknown op_kind {self.op_kind!r}")
        if self.fwd_ms <= 0 or self.bwd_ms <= 0:
            raise ConfigError("fwd_ms and bwd_ms must be > 0")
        if min(self.micro_batch, self.seq_length, self.hidden, self.tp_degree) < 1:
            raise ConfigError("micro_batch, seq_length, hidden and tp_degree must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Diagnostic:
    line: int  # 1-based; 0 when not tied to an input line
    message: str

    def __str__(self):
        return f"line {self.line}: {self.message}" if self.line else self.message


_FIELDS = {f.name for f in fields(ProfileRecord)}
_NUMERIC = {"micro_batch", "seq_length", "hidden", "tp_degree", "fwd_ms", "bwd_ms"}


def _record(obj) -> ProfileRecord:
    if not isinstance(obj, dict):
        raise ConfigError("expected a JSON object")
    missing = sorted(_FIELDS - set(obj))
    if missing:
        raise ConfigError(f"missing field(s) {', '.join(missing)}")
    extra = sorted(set(obj) - _FIELDS)
    if extra:
        raise ConfigError(f"unknown field(s) {', '.join(extra)}")
    for name in _NUMERIC:
        if isinstance(obj[name], bool) or not isinstance(obj[name], (int, float)):
            raise ConfigError(f"{name} must be a number")
    return ProfileRecord(**obj)


def parse_profiles(lines: Iterable[str]) -> Tuple[List[ProfileRecord], List[Diagnostic]]:
    """Parse newline-delimited JSON profile records.

    Malformed lines are skipped and reported; blank lines are ignored.
    """
    records, diags = [], []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            records.append(_record(json.loads(line)))
        except (json.JSONDecodeError, ConfigError) as exc:
            msg = exc.msg if isinstance(exc, json.JSONDecodeError) else str(exc)
            diags.append(Diagnostic(lineno, msg))
    return records, diags


def render_profiles(records: Iterable[ProfileRecord]) -> str:
    return "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in records)


def ideal_fwd_ms(record: ProfileRecord, peak_tflops: float) -> float:
    """Analytic forward time of the profiled shape at 100% efficiency."""
    flops = layer_flops_shape(record.micro_batch, record.seq_length, record.hidden, "fwd")
    return 1e3 * flops / (record.tp_degree * peak_tflops * 1e12)


def calibrate(records: Iterable[ProfileRecord], model: ModelSpec,
              cluster: ClusterSpec) -> Tuple[ClusterSpec, List[Diagnostic]]:
    """Fit compute_efficiency and bwd_fwd_ratio per device group.

    Only transformer-layer records are used. Groups without records keep
    their current values. Efficiencies above the clamp are clamped and
    reported, since they usually mean a wrong peak-TFLOPS entry.
    """
    names = {g.name for g in cluster.groups}
    by_group = {}
    diags = []
    for rec in records:
        if rec.device_type not in names:
            diags.append(Diagnostic(0, f"profile for unknown device_type {rec.device_type!r} skipped"))
            continue
        if rec.op_kind != "transformer_layer":
            continue
        by_group.setdefault(rec.device_type, []).append(rec)

    for name in sorted(by_group):
        recs = by_group[name]
        group = cluster.group(name)
        eff = statistics.median(ideal_fwd_ms(r, group.peak_tflops) / r.fwd_ms for r in recs)
        if eff > MAX_COMPUTE_EFFICIENCY:
            diags.append(Diagnostic(0, f"group {name!r}: calibrated efficiency {eff:.3f} clamped to "
                                       f"{MAX_COMPUTE_EFFICIENCY} (check peak_tflops)"))
            eff = MAX_COMPUTE_EFFICIENCY
        ratio = statistics.median(r.bwd_ms / r.fwd_ms for r in recs)
        if ratio < 1:
            diags.append(Diagnostic(0, f"group {name!r}: bwd/fwd ratio {ratio:.3f} raised to 1"))
            ratio = 1.0
        cluster = cluster.replace_group(replace(group, compute_efficiency=eff, bwd_fwd_ratio=ratio))
    return cluster, diags
