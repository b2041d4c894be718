import itertools
import math
from fractions import Fraction

import pytest

from hetplan.core import (CPU_STAGED, INTER_GROUP, INTER_NODE, INTRA_NODE, ClusterSpec,
                          DeviceGroup, Endpoints, Link, ModelSpec, TrainConfig)

GiB = 2 ** 30
# effectively free links, for "zero communication" fixtures
FREE_BW = 1e30


def links_for(names, node_bw=200e9, group_bw=25e9, staged=True, latency=0.0):
    out = []
    for n in names:
        out.append(Link(Endpoints(INTRA_NODE, [n]), 2.4e12, latency_s=latency))
        out.append(Link(Endpoints(INTER_NODE, [n]), node_bw, latency_s=latency))
    for a, b in itertools.combinations(names, 2):
        out.append(Link(Endpoints(INTER_GROUP, [a, b]), group_bw, latency_s=latency,
                        path_kind=CPU_STAGED if staged else "gpu-direct"))
    return out


def two_group_cluster(ratio=2.0, nodes=(1, 1), devices_per_node=1, comm=True,
                      memory=80 * GiB, base_tflops=100.0):
    groups = [DeviceGroup("a", base_tflops * ratio, memory, nodes[0], devices_per_node),
              DeviceGroup("b", base_tflops, memory, nodes[1], devices_per_node)]
    if comm:
        links = links_for(["a", "b"])
    else:
        links = links_for(["a", "b"], node_bw=FREE_BW, group_bw=FREE_BW, staged=False)
    return ClusterSpec(groups, links)


def one_group_cluster(nodes=2, devices_per_node=1, comm=True, memory=80 * GiB):
    groups = [DeviceGroup("a", 100.0, memory, nodes, devices_per_node)]
    bw = 200e9 if comm else FREE_BW
    return ClusterSpec(groups, links_for(["a"], node_bw=bw))


@pytest.fixture
def small_model():
    return ModelSpec(num_layers=4, hidden_size=512, seq_length=256, vocab_size=1000, num_heads=8)


@pytest.fixture
def llama_model():
    return ModelSpec(num_layers=80, hidden_size=8192, seq_length=4096, vocab_size=32000, num_heads=64)


@pytest.fixture
def train8():
    return TrainConfig(global_batch_size=8, micro_batch_size=1)


def compositions(n, k):
    """All ways to write n as an ordered sum of k positive parts."""
    for cuts in itertools.combinations(range(1, n), k - 1):
        b = (0,) + cuts + (n,)
        yield tuple(b[i + 1] - b[i] for i in range(k))


def exhaustive_optimum(model, cluster, cfg, pp_degrees, schedule="1f1b"):
    """Brute-force minimum over stage allocations, block orders, node counts and splits.

    Assumes one device per node (so TP is 1) and ample memory.
    """
    from hetplan.core import plan_from_layer_counts
    from hetplan.predictor import stage_times
    from hetplan.sim import simulate

    groups = cluster.groups
    best = None
    for pp in pp_degrees:
        for counts in itertools.product(range(1, pp + 1), repeat=len(groups)):
            if sum(counts) != pp or any(c > g.node_count for c, g in zip(counts, groups)):
                continue
            blocks = [(g.name, c) for g, c in zip(groups, counts)]
            for perm in set(itertools.permutations(blocks)):
                order = [name for name, c in perm for _ in range(c)]
                n_max = min(g.node_count // c for g, c in zip(groups, counts))
                for n in range(1, n_max + 1):
                    if cfg.global_batch_size % n:
                        continue
                    M = cfg.global_batch_size // n
                    for split in compositions(model.num_layers, pp):
                        plan = plan_from_layer_counts(split, order, nodes_used=[n] * pp,
                                                      tp=[1] * pp, dp=n, micro_batches=M,
                                                      schedule=schedule)
                        t = simulate(plan, stage_times(plan, model, cluster, cfg)).iteration_time_s
                        if best is None or t < best[0]:
                            best = (t, split, tuple(order), n)
    return best


def reference_apportionment(total, weights):
    """Hamilton's method in integer arithmetic, then the empty-stage fix."""
    fr = [Fraction(w) for w in weights]
    den = 1
    for f in fr:
        den = den * f.denominator // math.gcd(den, f.denominator)
    ints = [int(f * den) for f in fr]
    W = sum(ints)
    base = [total * w // W for w in ints]
    rem = [total * w % W for w in ints]
    seats = total - sum(base)
    order = sorted(range(len(ints)), key=lambda i: (-rem[i], i))
    for i in order[:seats]:
        base[i] += 1
    for i, c in enumerate(base):
        if c == 0:
            donor = max(range(len(base)), key=lambda j: (base[j], -j))
            base[donor] -= 1
            base[i] = 1
    return base
