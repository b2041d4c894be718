"""Throughput, utilization and comparison metrics, plus report rendering."""

from __future__ import annotations

from dataclasses import dataclass, replace
from decimal import ROUND_HALF_EVEN, Decimal
from typing import Dict, Mapping, Optional, Sequence

from .core import INTER_GROUP, ClusterSpec, ModelSpec, ParallelPlan, TrainConfig
from .cost import layer_flops
from .sim import SimResult


def round2(x: float) -> float:
    """Half-even rounding to 2 decimals, applied to the shortest repr of x."""
    return float(Decimal(repr(float(x))).quantize(Decimal("0.01"), rounding=ROUND_HALF_EVEN))


def tgs(L, G, S, T) -> float:
    """Tokens processed per accelerator per second."""
    if S <= 0 or T <= 0:
        raise ValueError("accelerator count and iteration time must be positive")
    return L * G / (S * T)


def mfu(t_test_tflops, t_peak_tflops) -> float:
    if t_peak_tflops <= 0:
        raise ValueError("peak TFLOPS must be positive")
    return 100.0 * t_test_tflops / t_peak_tflops


def theoretical_upper_bound(values: Sequence[float], counts: Sequence[float]) -> float:
    """Accelerator-count-weighted mean of per-type homogeneous performance."""
    if not values or len(values) != len(counts):
        raise ValueError("need equal-length, non-empty value and count lists")
    if any(c <= 0 for c in counts):
        raise ValueError("counts must be positive")
    return sum(v * c for v, c in zip(values, counts)) / sum(counts)


def improvement_pct(baseline, candidate) -> float:
    if baseline <= 0:
        raise ValueError("baseline must be positive")
    return 100.0 * (baseline - candidate) / baseline


def iteration_flops(model: ModelSpec, cfg: TrainConfig) -> float:
    """Model FLOPs (forward + backward) for one global batch."""
    per_seq = layer_flops(model, 1, "fwd") + layer_flops(model, 1, "bwd")
    return cfg.global_batch_size * model.num_layers * per_seq


def devices_by_group(plan: ParallelPlan, cluster: ClusterSpec) -> Dict[str, int]:
    out: Dict[str, int] = {}
    for st in plan.stages:
        n = st.nodes_used * cluster.group(st.group).devices_per_node
        out[st.group] = out.get(st.group, 0) + n
    return out


@dataclass(frozen=True)
class MetricsReport:
    iteration_time_s: float
    tgs: float
    achieved_tflops: float
    per_group_tflops: Mapping[str, float]
    mfu_pct: float
    theoretical_upper_bound: Optional[float] = None
    pct_of_theoretical: Optional[float] = None
    improvement_pct: Optional[float] = None


def evaluate_metrics(plan: ParallelPlan, result: SimResult, model: ModelSpec,
                     cluster: ClusterSpec, cfg: TrainConfig,
                     reference_tgs: Optional[Mapping[str, float]] = None,
                     baseline_time_s: Optional[float] = None) -> MetricsReport:
    """Metrics for one simulated plan.

    Achieved TFLOPS uses the same FLOPs formula as the cost model, so MFU and
    TGS agree. `reference_tgs` maps group name to that group's homogeneous
    TGS; the count-weighted mean over the plan's devices is the theoretical
    bound.
    """
    T = result.iteration_time_s
    devices = devices_by_group(plan, cluster)
    S = sum(devices.values())
    achieved = iteration_flops(model, cfg) / (S * T) / 1e12

    B = plan.batch_size(cfg)
    M = plan.micro_batches_per_dp_replica
    per_seq = layer_flops(model, 1, "fwd") + layer_flops(model, 1, "bwd")
    group_flops: Dict[str, float] = {}
    for st in plan.stages:
        f = st.num_layers * per_seq * B * M * st.dp_degree
        group_flops[st.group] = group_flops.get(st.group, 0.0) + f
    per_group = {g: group_flops[g] / (devices[g] * T) / 1e12 for g in sorted(devices)}

    names = sorted(devices)
    peak = theoretical_upper_bound([cluster.group(g).peak_tflops for g in names],
                                   [devices[g] for g in names])
    value = tgs(model.seq_length, cfg.global_batch_size, S, T)
    bound = pct = None
    if reference_tgs is not None:
        bound = theoretical_upper_bound([reference_tgs[g] for g in names], [devices[g] for g in names])
        pct = 100.0 * value / bound
    imp = improvement_pct(baseline_time_s, T) if baseline_time_s is not None else None
    return MetricsReport(T, value, achieved, per_group, mfu(achieved, peak), bound, pct, imp)


def homogeneous_cluster(cluster: ClusterSpec, group: str, node_count: int) -> ClusterSpec:
    """A single-group cluster of `node_count` nodes of `group`, keeping its links."""
    g = replace(cluster.group(group), node_count=node_count)
    links = tuple(l for l in cluster.links
                  if l.endpoints.scope != INTER_GROUP and l.endpoints.groups == (group,))
    return ClusterSpec((g,), links)


def homogeneous_reference(plan: ParallelPlan, model: ModelSpec, cluster: ClusterSpec,
                          cfg: TrainConfig, pcfg) -> Dict[str, float]:
    """Best TGS of each plan group on a homogeneous cluster of the same node count.

    Each candidate pp degree (`pcfg.reference_pp_degrees`, falling back to
    `pcfg.pp_degrees`) is searched on its own and the highest TGS kept, since
    plans that leave nodes idle are slower per iteration but not per device.
    """
    from .planner import InfeasibleError, search

    degrees = pcfg.reference_pp_degrees or pcfg.pp_degrees
    nodes = sum(st.nodes_used for st in plan.stages)
    out = {}
    for name in sorted({st.group for st in plan.stages}):
        homo = homogeneous_cluster(cluster, name, nodes)
        best = None
        for pp in sorted(set(degrees)):
            try:
                res = search(model, homo, cfg, replace(pcfg, pp_degrees=(pp,)))
            except InfeasibleError:
                continue
            value = tgs(model.seq_length, cfg.global_batch_size,
                        res.plan.devices_used(homo), res.iteration_time_s)
            best = value if best is None else max(best, value)
        if best is None:
            raise InfeasibleError([f"no feasible homogeneous plan for group {name!r}"])
        out[name] = best
    return out


def _pct(x):
    return None if x is None else round2(x)


def report_document(plan: ParallelPlan, result: SimResult, metrics: MetricsReport,
                    cluster: ClusterSpec, model: ModelSpec, cfg: TrainConfig) -> dict:
    stages = []
    for i, st in enumerate(plan.stages):
        stages.append({
            "stage": i,
            "group": st.group,
            "layers": list(st.layer_range),
            "nodes_used": st.nodes_used,
            "tp_degree": st.tp_degree,
            "dp_degree": st.dp_degree,
            "busy_s": result.per_stage_busy_s[i],
            "bubble_ratio": result.bubble_ratio[i],
            "peak_in_flight": result.peak_in_flight[i],
            "peak_memory_bytes": result.peak_memory_bytes[i],
            "memory_limit_bytes": cluster.group(st.group).memory_bytes,
        })
    return {
        "plan_summary": {
            "pp": plan.num_stages,
            "dp": plan.dp_degree,
            "schedule": plan.schedule,
            "micro_batch_size": plan.batch_size(cfg),
            "micro_batches": plan.micro_batches_per_dp_replica,
            "layer_counts": plan.layer_counts(),
            "devices": plan.devices_used(cluster),
        },
        "iteration_time_s": result.iteration_time_s,
        "tgs": metrics.tgs,
        "achieved_tflops": metrics.achieved_tflops,
        "per_group_tflops": dict(metrics.per_group_tflops),
        "mfu_pct": round2(metrics.mfu_pct),
        "theoretical_upper_bound": metrics.theoretical_upper_bound,
        "pct_of_theoretical": _pct(metrics.pct_of_theoretical),
        "improvement_pct": _pct(metrics.improvement_pct),
        "aggregate_bubble_ratio": result.aggregate_bubble_ratio,
        "per_stage": stages,
    }


def render_table(report: Mapping) -> str:
    """Plain-text rendering of a report document."""
    s = report["plan_summary"]
    lines = [
        f"pp={s['pp']} dp={s['dp']} schedule={s['schedule']} "
        f"micro-batch={s['micro_batch_size']} x {s['micro_batches']} devices={s['devices']}",
        f"iteration time  {report['iteration_time_s'] * 1e3:.2f} ms",
        f"TGS             {report['tgs']:.2f} tokens/accelerator/s",
        f"MFU             {report['mfu_pct']:.2f} %",
    ]
    if report.get("pct_of_theoretical") is not None:
        lines.append(f"of theoretical  {report['pct_of_theoretical']:.2f} %")
    if report.get("improvement_pct") is not None:
        lines.append(f"improvement     {report['improvement_pct']:.2f} %")
    lines.append("")
    lines.append(f"{'stage':>5} {'group':<10} {'layers':>9} {'tp':>3} {'busy s':>10} "
                 f"{'bubble':>7} {'inflt':>5} {'mem GiB':>8}")
    for row in report["per_stage"]:
        a, b = row["layers"]
        lines.append(f"{row['stage']:>5} {row['group']:<10} {f'{a}-{b - 1}':>9} {row['tp_degree']:>3} "
                     f"{row['busy_s']:>10.4f} {row['bubble_ratio']:>7.3f} {row['peak_in_flight']:>5} "
                     f"{row['peak_memory_bytes'] / 2**30:>8.2f}")
    return "\n".join(lines)
