"""Analytic compute, communication and memory costs for transformer layers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .core import (CPU_STAGED, ConfigError, DeviceGroup, Link, ModelSpec,
                   ParallelPlan, StageAssignment, TrainConfig)


@dataclass(frozen=True)
class LayerCost:
    fwd_s: float
    bwd_s: float
    activation_bytes_per_microbatch: float
    param_bytes: float


@dataclass(frozen=True)
class CommCost:
    volume_bytes: float
    time_s: float
    hops: tuple  # ((medium, seconds), ...)


def p2p_activation_volume(B, L, H, bytes_per_element=2):
    """Bytes of one activation (or activation-gradient) tensor crossing a stage boundary."""
    return B * L * H * bytes_per_element


def layer_flops(model: ModelSpec, B, direction="fwd"):
    L, H = model.seq_length, model.hidden_size
    return layer_flops_shape(B, L, H, direction)


def layer_flops_shape(B, L, H, direction="fwd"):
    fwd = 24 * B * L * H * H + 4 * B * L * L * H
    if direction == "fwd":
        return fwd
    if direction == "bwd":
        return 2 * fwd
    raise ValueError(f"direction must be 'fwd' or 'bwd', got {direction!r}")


def compute_time(flops, group: DeviceGroup, tp_degree: int = 1) -> float:
    if group.peak_tflops <= 0:
        raise ConfigError(f"group {group.name}: peak_tflops must be > 0")
    if tp_degree < 1:
        raise ValueError("tp_degree must be >= 1")
    return flops / (tp_degree * group.peak_tflops * 1e12 * group.compute_efficiency)


def _wire_s(volume, link: Link) -> float:
    return volume * 8 / (link.bandwidth_bits_per_s * link.efficiency)


def _staging_s(volume, link: Link) -> float:
    if not link.staging_copy_bytes_per_s:
        raise ConfigError("cpu-staged link needs staging_copy_bytes_per_s")
    return volume / link.staging_copy_bytes_per_s


def hop_time(volume, link: Link) -> CommCost:
    """Point-to-point transfer time over one link.

    A cpu-staged hop pays a device->host copy before the wire and a
    host->device copy after it.
    """
    if volume < 0:
        raise ValueError("volume must be >= 0")
    wire = _wire_s(volume, link)
    if link.path_kind == CPU_STAGED:
        copy = _staging_s(volume, link)
        hops = (("d2h", copy), ("wire", wire), ("h2d", copy))
    else:
        hops = (("wire", wire),)
    return CommCost(volume, link.latency_s + sum(t for _, t in hops), hops)


def collective_time(volume_per_rank, ranks: int, link: Link, kind="allreduce") -> float:
    """Ring collective over `ranks` peers; `volume_per_rank` is the full buffer size."""
    if ranks < 1:
        raise ValueError("ranks must be >= 1")
    if ranks == 1:
        return 0.0
    if kind == "allreduce":
        steps = 2 * (ranks - 1)
    elif kind == "allgather":
        steps = ranks - 1
    else:
        raise ValueError(f"unknown collective {kind!r}")
    moved = steps / ranks * volume_per_rank
    t = steps * link.latency_s + _wire_s(moved, link)
    if link.path_kind == CPU_STAGED:
        t += 2 * _staging_s(volume_per_rank, link)
    return t


def layer_param_bytes(model: ModelSpec) -> float:
    return 12 * model.hidden_size ** 2 * model.bytes_per_element


def layer_activation_bytes(model: ModelSpec, B) -> float:
    return B * model.seq_length * model.hidden_size * model.activation_bytes_per_token_per_hidden


def layer_cost(model: ModelSpec, group: DeviceGroup, B, tp_degree=1,
               intra_link: Optional[Link] = None) -> LayerCost:
    """Per-micro-batch cost of one transformer layer on one TP group.

    Tensor parallelism scales compute ideally and adds two allreduces of the
    layer output in each direction.
    """
    fwd = compute_time(layer_flops(model, B, "fwd"), group, tp_degree)
    bwd = fwd * group.bwd_fwd_ratio
    if tp_degree > 1:
        if intra_link is None:
            raise ConfigError(f"group {group.name}: tensor parallelism needs an intra-node link")
        vol = p2p_activation_volume(B, model.seq_length, model.hidden_size, model.bytes_per_element)
        ar = collective_time(vol, tp_degree, intra_link, "allreduce")
        fwd += 2 * ar
        bwd += 2 * ar
    return LayerCost(fwd, bwd, layer_activation_bytes(model, B), layer_param_bytes(model))


def stage_memory(stage: StageAssignment, model: ModelSpec, cfg: TrainConfig,
                 plan: Optional[ParallelPlan], in_flight: int) -> float:
    n = stage.num_layers
    if n == 0:
        return 0.0
    B = plan.batch_size(cfg) if plan is not None else cfg.micro_batch_size
    tp = stage.tp_degree
    states = n * layer_param_bytes(model) / tp * cfg.optimizer_state_multiplier
    acts = in_flight * n * layer_activation_bytes(model, B) / tp
    return states + acts
