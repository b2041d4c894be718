"""Turn a plan into per-stage costs and run it through the simulator."""

from __future__ import annotations

from typing import List

from .core import (ClusterSpec, ConfigError, ModelSpec, ParallelPlan, TrainConfig,
                   validate_plan)
from .cost import (collective_time, hop_time, layer_activation_bytes, layer_cost,
                   layer_param_bytes, p2p_activation_volume, stage_memory)
from .sim import SimResult, StageTimes, simulate


class PlanError(ValueError):
    """A plan failed validation against its model, cluster and batch config."""

    def __init__(self, violations):
        self.violations = tuple(violations)
        super().__init__("; ".join(self.violations))


def in_flight_bound(plan: ParallelPlan, stage: int) -> int:
    M = plan.micro_batches_per_dp_replica
    if plan.schedule == "gpipe":
        return M
    return min(M, plan.num_stages - stage)


def stage_times(plan: ParallelPlan, model: ModelSpec, cluster: ClusterSpec,
                cfg: TrainConfig) -> List[StageTimes]:
    B = plan.batch_size(cfg)
    P = plan.num_stages
    vol = p2p_activation_volume(B, model.seq_length, model.hidden_size, model.bytes_per_element)
    out = []
    for i, st in enumerate(plan.stages):
        group = cluster.group(st.group)
        lc = layer_cost(model, group, B, st.tp_degree, cluster.intra_node_link(st.group))
        n = st.num_layers
        # embedding / LM head folded into the end stages
        if i == 0:
            n += model.embedding_cost_multiplier
        if i == P - 1:
            n += model.embedding_cost_multiplier

        send_f = send_b = 0.0
        if i < P - 1:
            link = cluster.stage_link(st.group, plan.stages[i + 1].group)
            if link is None:
                raise ConfigError(f"no link between stages {i} and {i + 1}")
            send_f = hop_time(vol, link).time_s
        if i > 0:
            link = cluster.stage_link(st.group, plan.stages[i - 1].group)
            if link is None:
                raise ConfigError(f"no link between stages {i - 1} and {i}")
            send_b = hop_time(vol, link).time_s

        grad_bytes = st.num_layers * layer_param_bytes(model) / st.tp_degree
        sync_link = (cluster.intra_node_link(st.group) if st.nodes_used == 1
                     else cluster.inter_node_link(st.group))
        sync = collective_time(grad_bytes, st.dp_degree, sync_link, "allreduce")

        out.append(StageTimes(
            fwd_s=n * lc.fwd_s,
            bwd_s=n * lc.bwd_s,
            send_fwd_s=send_f,
            send_bwd_s=send_b,
            sync_s=sync,
            static_bytes=stage_memory(st, model, cfg, plan, 0),
            activation_bytes=st.num_layers * layer_activation_bytes(model, B) / st.tp_degree,
        ))
    return out


def predict(plan: ParallelPlan, model: ModelSpec, cluster: ClusterSpec,
            cfg: TrainConfig, check: bool = True) -> SimResult:
    """Simulate one training iteration of `plan`."""
    if check:
        report = validate_plan(plan, model, cluster, cfg)
        if not report.ok:
            raise PlanError(report.violations)
    return simulate(plan, stage_times(plan, model, cluster, cfg))
