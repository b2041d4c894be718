"""Automatic parallel planner.

The search space is a three-level tree: the pipeline level picks a stage
count, distributes stages over device groups, orders the resulting blocks and
splits the layers; the data and tensor levels pick a common data-parallel
degree and a per-group tensor-parallel degree. Leaves are scored by the
simulated iteration time and the cheapest memory-feasible plan wins.
"""

from __future__ import annotations

import math
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from itertools import product
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

from .core import (SCHEDULES, ClusterSpec, ConfigError, DeviceGroup, ModelSpec,
                   ParallelPlan, TrainConfig, _build, plan_from_layer_counts)
from .cost import stage_memory
from .predictor import in_flight_bound, stage_times
from .sim import SimResult, iteration_time, simulate

INF = float("inf")


class InfeasibleError(RuntimeError):
    """No candidate plan satisfied the constraints."""

    def __init__(self, reasons: Sequence[str]):
        self.reasons = tuple(reasons)
        super().__init__("no feasible plan: " + "; ".join(self.reasons))


@dataclass(frozen=True)
class PlannerConfig:
    pp_degrees: tuple = (1, 2, 4, 8)
    micro_batch_sizes: tuple = (1,)
    memory_headroom: float = 0.9
    # cap on block orderings evaluated per stage allocation
    order_beam_width: int = 24
    uniform_only: bool = False
    schedule: str = "1f1b"
    use_all_groups: bool = True
    interleave_groups: bool = False
    local_search: bool = True
    time_bound_pruning: bool = False
    # pp degrees tried for the homogeneous reference runs; empty = pp_degrees
    reference_pp_degrees: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "pp_degrees", tuple(self.pp_degrees))
        object.__setattr__(self, "micro_batch_sizes", tuple(self.micro_batch_sizes))
        object.__setattr__(self, "reference_pp_degrees", tuple(self.reference_pp_degrees))
        if not self.pp_degrees or min(self.pp_degrees) < 1:
            raise ConfigError("pp_degrees must be a non-empty list of positive counts")
        if not self.micro_batch_sizes or min(self.micro_batch_sizes) < 1:
            raise ConfigError("micro_batch_sizes must be a non-empty list of positive counts")
        if not 0 < self.memory_headroom <= 1:
            raise ConfigError("memory_headroom must be in (0, 1]")
        if self.order_beam_width < 1:
            raise ConfigError("order_beam_width must be >= 1")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"unknown schedule {self.schedule!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pp_degrees"] = list(self.pp_degrees)
        d["micro_batch_sizes"] = list(self.micro_batch_sizes)
        d["reference_pp_degrees"] = list(self.reference_pp_degrees)
        return d

    @classmethod
    def from_dict(cls, data) -> "PlannerConfig":
        return _build(cls, data, "planner config")


@dataclass(frozen=True)
class SearchNode:
    level: str  # "pipeline", "data" or "tensor"
    decision: tuple
    bound: float = INF


@dataclass
class SearchResult:
    plan: ParallelPlan
    result: SimResult
    log: list = field(default_factory=list)

    @property
    def iteration_time_s(self) -> float:
        return self.result.iteration_time_s


# -- load balance --------------------------------------------------------------

def split_layers(total_layers: int, weights: Sequence[float]) -> List[int]:
    """Largest-remainder apportionment of layers proportional to `weights`.

    Remainder seats go to the largest fractional parts, ties to the lowest
    index. Stages that end up empty take one layer from the currently largest
    stage.
    """
    n = len(weights)
    if n < 1:
        raise ValueError("need at least one stage")
    if total_layers < n:
        raise InfeasibleError([f"{total_layers} layers cannot fill {n} stages"])
    if any(w <= 0 for w in weights):
        raise ValueError("weights must be positive")
    ws = [Fraction(w) for w in weights]
    wsum = sum(ws)
    quotas = [total_layers * w / wsum for w in ws]
    counts = [math.floor(q) for q in quotas]
    left = total_layers - sum(counts)
    by_rem = sorted(range(n), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in by_rem[:left]:
        counts[i] += 1
    for i in range(n):
        if counts[i] == 0:
            donor = max(range(n), key=lambda j: (counts[j], -j))
            counts[donor] -= 1
            counts[i] = 1
    return counts


def stage_weights(groups_in_pipeline_order, model: Optional[ModelSpec] = None) -> List[float]:
    """Relative layer throughput of each stage, normalized to sum to one.

    `groups_in_pipeline_order` holds (DeviceGroup, stage count) or
    (DeviceGroup, stage count, tp degree) entries. Throughput is effective
    TFLOPS times the TP degree, divided by the fwd+bwd cost of a layer.
    """
    raw = []
    for entry in groups_in_pipeline_order:
        group, count = entry[0], entry[1]
        tp = entry[2] if len(entry) > 2 else 1
        w = group.effective_tflops * tp / (1.0 + group.bwd_fwd_ratio)
        raw.extend([w] * count)
    total = sum(raw)
    return [w / total for w in raw]


# -- stage ordering ----------------------------------------------------------

def _multiset_permutations(items: Sequence) -> Iterator[tuple]:
    """Distinct permutations in lexicographic order."""
    pool = sorted(items)
    n = len(pool)
    if n == 0:
        yield ()
        return
    while True:
        yield tuple(pool)
        k = n - 2
        while k >= 0 and pool[k] >= pool[k + 1]:
            k -= 1
        if k < 0:
            return
        j = n - 1
        while pool[j] <= pool[k]:
            j -= 1
        pool[k], pool[j] = pool[j], pool[k]
        pool[k + 1:] = reversed(pool[k + 1:])


def _block_name(block) -> str:
    g = block[0]
    return g.name if isinstance(g, DeviceGroup) else g


def order_stages(blocks, pp: int, evaluator: Callable[[tuple], float],
                 beam_width: Optional[int] = None) -> tuple:
    """Pick the pipeline order of group blocks with the lowest evaluated time.

    `blocks` holds (group, stage count) pairs; blocks of the same group with
    the same stage count are interchangeable, so only distinct orderings are
    evaluated, in lexicographic order. Ties go to the lexicographically
    smallest ordering.
    """
    keyed = [(_block_name(b), b[1]) for b in blocks]
    if sum(c for _, c in keyed) != pp:
        raise ValueError(f"blocks provide {sum(c for _, c in keyed)} stages, expected {pp}")
    best, best_t = None, INF
    for i, perm in enumerate(_multiset_permutations(keyed)):
        if beam_width is not None and i >= beam_width:
            break
        t = evaluator(perm)
        if best is None or t < best_t:
            best, best_t = perm, t
    return best


# -- search ------------------------------------------------------------------

def _allocations(pp: int, groups: Sequence[DeviceGroup], use_all: bool) -> Iterator[tuple]:
    lo = 1 if use_all else 0
    ranges = [range(lo, min(pp, g.node_count) + 1) for g in groups]
    for combo in product(*ranges):
        if sum(combo) == pp:
            yield combo


def _divisors(n: int) -> List[int]:
    return [d for d in range(1, n + 1) if n % d == 0]


def _parallel_configs(stage_groups: Sequence[str], counts: Dict[str, int],
                      cluster: ClusterSpec) -> List[Tuple[int, Dict[str, Tuple[int, int]]]]:
    """(dp, {group: (nodes per stage, tp)}) choices sharing one dp degree."""
    used = sorted(counts)
    per_group = {}
    for name in used:
        g = cluster.group(name)
        opts = {}
        for nodes in range(1, g.node_count // counts[name] + 1):
            for tp in _divisors(g.devices_per_node):
                dp = nodes * g.devices_per_node // tp
                opts.setdefault(dp, []).append((nodes, tp))
        per_group[name] = opts
    common = set.intersection(*(set(o) for o in per_group.values()))
    out = []
    for dp in sorted(common, reverse=True):
        for choice in product(*(per_group[n][dp] for n in used)):
            out.append((dp, dict(zip(used, choice))))
    return out


def _neighbors(split: Sequence[int], adjacent_only: bool) -> Iterator[tuple]:
    n = len(split)
    for i in range(n):
        if split[i] <= 1:
            continue
        targets = [j for j in (i - 1, i + 1) if 0 <= j < n] if adjacent_only else \
            [j for j in range(n) if j != i]
        for j in targets:
            s = list(split)
            s[i] -= 1
            s[j] += 1
            yield tuple(s)


def candidate_splits(total_layers: int, weights: Sequence[float],
                     evaluate: Callable[[tuple], float], uniform_only=False,
                     local_search=True) -> None:
    """Drive `evaluate` over the layer-split neighbourhood.

    Seeds are the uniform split, the weight-proportional split and its
    single-layer transfers between adjacent stages. With `local_search`, the
    best seed is then improved by single-layer transfers between any two
    stages until no transfer helps.
    """
    P = len(weights)
    uniform = tuple(split_layers(total_layers, [1] * P))
    cache = {}

    def score(split):
        if split not in cache:
            cache[split] = evaluate(split)
        return cache[split]

    score(uniform)
    if uniform_only:
        return
    prop = tuple(split_layers(total_layers, weights))
    for s in [prop, *_neighbors(prop, adjacent_only=True)]:
        score(s)
    if not local_search:
        return
    current = min(cache, key=lambda s: (cache[s], s))
    while True:
        best, best_t = current, cache[current]
        for s in _neighbors(current, adjacent_only=False):
            t = score(s)
            if t < best_t or (best != current and t == best_t and s < best):
                best, best_t = s, t
        if best == current:
            return
        current = best


@dataclass(frozen=True)
class _Subtree:
    pp: int
    alloc: tuple  # ((group name, stage count), ...) for groups in use


class _Search:
    def __init__(self, model, cluster, cfg, pcfg):
        self.model, self.cluster, self.cfg, self.pcfg = model, cluster, cfg, pcfg
        self.log: List[dict] = []
        self.best = None  # (time, encoding, plan, result)
        self.reasons: Counter = Counter()
        self._per_ordering: Dict[tuple, float] = {}

    def _prune(self, entry: dict, reason: str):
        entry["pruned"] = reason
        self.log.append(entry)
        self.reasons[reason] += 1

    def _stage_groups(self, perm) -> List[str]:
        return [name for name, count in perm for _ in range(count)]

    def run(self, sub: _Subtree) -> None:
        counts = dict(sub.alloc)
        if self.pcfg.interleave_groups:
            blocks = [(name, 1) for name, c in sub.alloc for _ in range(c)]
        else:
            blocks = list(sub.alloc)
        order_stages(blocks, sub.pp, lambda perm: self._ordering(sub, perm, counts),
                     self.pcfg.order_beam_width)

    def _ordering(self, sub: _Subtree, perm, counts) -> float:
        groups = self._stage_groups(perm)
        base = {"pp": sub.pp, "ordering": groups}
        for a, b in zip(groups, groups[1:]):
            if a != b and self.cluster.inter_group_link(a, b) is None:
                self._prune(dict(base), f"no heterogeneous link between {a!r} and {b!r}")
                return INF
        configs = _parallel_configs(groups, counts, self.cluster)
        for dp, choice in configs:
            nodes = [choice[g][0] for g in groups]
            tps = [choice[g][1] for g in groups]
            for B in self.pcfg.micro_batch_sizes:
                entry = {**base, "dp": dp, "tp": tps, "nodes_used": nodes, "micro_batch_size": B}
                if self.cfg.global_batch_size % (dp * B):
                    self._prune(entry, "global batch not divisible by dp x micro-batch")
                    continue
                M = self.cfg.global_batch_size // (dp * B)
                if self.model.num_layers < sub.pp:
                    self._prune(entry, "fewer layers than stages")
                    continue
                weights = stage_weights([(self.cluster.group(g), 1, t) for g, t in zip(groups, tps)])

                def evaluate(split, entry=entry, M=M, nodes=nodes, tps=tps, dp=dp, B=B):
                    plan = plan_from_layer_counts(
                        split, groups, nodes_used=nodes, tp=tps, dp=dp, micro_batches=M,
                        schedule=self.pcfg.schedule, micro_batch_size=B)
                    return self._leaf(plan, {**entry, "split": list(split)})

                candidate_splits(self.model.num_layers, weights, evaluate,
                                 self.pcfg.uniform_only, self.pcfg.local_search)
        return self._per_ordering.get((sub.pp, tuple(groups)), INF)

    def _leaf(self, plan: ParallelPlan, entry: dict) -> float:
        model, cluster, cfg = self.model, self.cluster, self.cfg
        for i, st in enumerate(plan.stages):
            g = cluster.group(st.group)
            need = stage_memory(st, model, cfg, plan, in_flight_bound(plan, i))
            if need > g.memory_bytes * self.pcfg.memory_headroom:
                self._prune(entry, f"memory: stage on {g.name!r} needs {need:.4g} B, "
                                   f"limit {g.memory_bytes * self.pcfg.memory_headroom:.4g} B")
                return INF
        times = stage_times(plan, model, cluster, cfg)
        if self.pcfg.time_bound_pruning and self.best is not None:
            M = plan.micro_batches_per_dp_replica
            bound = max(max(M * (t.fwd_s + t.bwd_s) for t in times),
                        sum(t.fwd_s + t.bwd_s for t in times))
            if bound > self.best[0]:
                self._prune(entry, "time bound")
                return bound
        t = iteration_time(times, plan.micro_batches_per_dp_replica, plan.schedule)
        entry["time_s"] = t
        self.log.append(entry)
        key = (plan.num_stages, tuple(entry["ordering"]))
        self._per_ordering[key] = min(self._per_ordering.get(key, INF), t)
        cand = (t, plan.encoding(), plan)
        if self.best is None or cand[:2] < self.best[:2]:
            self.best = cand
        return t


def _subtrees(model, cluster, pcfg, reasons: Counter) -> List[_Subtree]:
    names = [g.name for g in cluster.groups]
    out = []
    for pp in sorted(set(pcfg.pp_degrees)):
        found = False
        for combo in _allocations(pp, cluster.groups, pcfg.use_all_groups):
            found = True
            out.append(_Subtree(pp, tuple((n, c) for n, c in zip(names, combo) if c)))
        if not found:
            reasons[f"pp={pp}: stages cannot be placed on the cluster's nodes"] += 1
    return out


def _run_subtree(args):
    model, cluster, cfg, pcfg, sub = args
    s = _Search(model, cluster, cfg, pcfg)
    s.run(sub)
    return s.best, s.log, s.reasons


def search(model: ModelSpec, cluster: ClusterSpec, cfg: TrainConfig,
           pcfg: PlannerConfig, jobs: int = 1) -> SearchResult:
    """Depth-first search for the plan with the lowest simulated iteration time.

    Raises :class:`InfeasibleError` listing the binding constraints when no
    candidate fits.
    """
    reasons: Counter = Counter()
    subs = _subtrees(model, cluster, pcfg, reasons)
    tasks = [(model, cluster, cfg, pcfg, sub) for sub in subs]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_subtree, tasks))
    else:
        outcomes = [_run_subtree(t) for t in tasks]

    best, log = None, []
    for sub_best, sub_log, sub_reasons in outcomes:
        log.extend(sub_log)
        reasons.update(sub_reasons)
        if sub_best is not None and (best is None or sub_best[:2] < best[:2]):
            best = sub_best
    if best is None:
        raise InfeasibleError([f"{r} ({n} candidate(s))" for r, n in sorted(reasons.items())]
                              or ["no candidates"])
    plan = best[2]
    return SearchResult(plan, simulate(plan, stage_times(plan, model, cluster, cfg)), log)
