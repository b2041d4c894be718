import json

import pytest
from hypothesis import given, strategies as st

from hetplan.core import (CPU_STAGED, INTER_GROUP, ClusterSpec, ConfigError, DeviceGroup,
                          Endpoints, Link, ModelSpec, ParallelPlan, StageAssignment,
                          TrainConfig, load_cluster, load_model, parse,
                          plan_from_layer_counts, render, validate_plan)

from conftest import GiB, links_for


def het_cluster():
    groups = [DeviceGroup("amd", 187.62, 192 * GiB, 2, 8, 0.5),
              DeviceGroup("gpu_a", 96.16, 192 * GiB, 10, 8, 0.5)]
    return ClusterSpec(groups, links_for(["amd", "gpu_a"]))


FIXTURE_SPLIT = [7, 6, 6, 6, 6, 7, 7, 7, 7, 7, 7, 7]


def fixture_plan(counts=FIXTURE_SPLIT, tp=1, M=32):
    groups = ["amd"] * 2 + ["gpu_a"] * (len(counts) - 2)
    return plan_from_layer_counts(counts, groups, nodes_used=[1] * len(counts),
                                  tp=[tp] * len(counts), dp=8 // tp, micro_batches=M)


def test_twelve_stage_split_validates(llama_model):
    cfg = TrainConfig(256, 1)
    assert sum(FIXTURE_SPLIT) == 80
    report = validate_plan(fixture_plan(), llama_model, het_cluster(), cfg)
    assert report.ok, report.violations


def test_uncovered_layers(llama_model):
    plan = fixture_plan(FIXTURE_SPLIT[:-1] + [6])
    report = validate_plan(plan, llama_model, het_cluster(), TrainConfig(256, 1))
    assert not report.ok
    assert any("uncovered layers" in v for v in report.violations)


def test_tp_exceeds_node(llama_model):
    stages = list(fixture_plan().stages)
    stages[0] = StageAssignment(stages[0].layer_range, "amd", 2, 16, 8)
    plan = ParallelPlan(stages, 32)
    report = validate_plan(plan, llama_model, het_cluster(), TrainConfig(256, 1))
    assert any("TP exceeds node" in v for v in report.violations)


def test_overlap_gap_and_batch_mismatch(llama_model):
    s = [StageAssignment((0, 40), "amd", 1, 1, 8), StageAssignment((39, 80), "gpu_a", 1, 1, 8)]
    r = validate_plan(ParallelPlan(s, 32), llama_model, het_cluster(), TrainConfig(256, 1))
    assert any("overlapping" in v for v in r.violations)
    s = [StageAssignment((0, 40), "amd", 1, 1, 8), StageAssignment((41, 80), "gpu_a", 1, 1, 8)]
    r = validate_plan(ParallelPlan(s, 30), llama_model, het_cluster(), TrainConfig(256, 1))
    assert any("uncovered" in v for v in r.violations)
    assert any("global batch" in v for v in r.violations)


def test_mixed_dp_and_device_mismatch(llama_model):
    s = [StageAssignment((0, 40), "amd", 1, 1, 8), StageAssignment((40, 80), "gpu_a", 1, 2, 8)]
    r = validate_plan(ParallelPlan(s, 32), llama_model, het_cluster(), TrainConfig(256, 1))
    assert any("dp*tp" in v for v in r.violations)
    s = [StageAssignment((0, 40), "amd", 1, 1, 8), StageAssignment((40, 80), "gpu_a", 1, 2, 4)]
    r = validate_plan(ParallelPlan(s, 32), llama_model, het_cluster(), TrainConfig(256, 1))
    assert any("disagree on dp_degree" in v for v in r.violations)


def test_too_many_nodes(llama_model):
    plan = fixture_plan([7] * 3 + [6] * 9 + [5], M=32)  # 13 stages, amd gets 2, gpu_a 11
    r = validate_plan(plan, llama_model, het_cluster(), TrainConfig(256, 1))
    assert any("cluster has 10" in v for v in r.violations)
    assert any("cluster has 12" in v for v in r.violations)


def test_missing_heterogeneous_link(llama_model):
    groups = [DeviceGroup("amd", 100, GiB, 1, 8), DeviceGroup("gpu_a", 100, GiB, 1, 8)]
    links = [l for l in links_for(["amd", "gpu_a"]) if l.endpoints.scope != INTER_GROUP]
    cluster = ClusterSpec(groups, links)
    plan = plan_from_layer_counts([40, 40], ["amd", "gpu_a"], nodes_used=[1, 1], tp=[1, 1],
                                  dp=8, micro_batches=1)
    r = validate_plan(plan, llama_model, cluster, TrainConfig(8, 1))
    assert [v for v in r.violations if "no heterogeneous link" in v]


def test_validate_is_pure(llama_model):
    plan = fixture_plan(FIXTURE_SPLIT[:-1] + [6])
    a = validate_plan(plan, llama_model, het_cluster(), TrainConfig(256, 1))
    b = validate_plan(plan, llama_model, het_cluster(), TrainConfig(256, 1))
    assert a == b


@pytest.mark.parametrize("kwargs, msg", [
    (dict(num_layers=0), "num_layers"),
    (dict(hidden_size=100, num_heads=3), "divisible"),
    (dict(bytes_per_element=3), "bytes_per_element"),
])
def test_model_invariants(kwargs, msg):
    base = dict(num_layers=2, hidden_size=64, seq_length=8, vocab_size=10, num_heads=4)
    with pytest.raises(ConfigError, match=msg):
        ModelSpec(**{**base, **kwargs})


def test_group_and_link_invariants():
    with pytest.raises(ConfigError):
        DeviceGroup("x", 0, GiB, 1, 1)
    with pytest.raises(ConfigError):
        DeviceGroup("x", 10, GiB, 1, 1, compute_efficiency=0)
    with pytest.raises(ConfigError):
        Link(Endpoints("intra-node", ["x"]), 0)
    staged = Link(Endpoints(INTER_GROUP, ["x", "y"]), 25e9, path_kind=CPU_STAGED)
    assert staged.staging_copy_bytes_per_s == 16e9 and staged.efficiency == 0.76
    assert Link(Endpoints("intra-node", ["x"]), 1e9).efficiency == 0.85


def test_cluster_invariants():
    groups = [DeviceGroup("a", 10, GiB, 1, 1)]
    with pytest.raises(ConfigError, match="intra-node"):
        ClusterSpec(groups, [])
    with pytest.raises(ConfigError, match="unknown group"):
        ClusterSpec(groups, links_for(["a"]) + [Link(Endpoints(INTER_GROUP, ["a", "z"]), 1e9)])
    with pytest.raises(ConfigError, match="duplicate"):
        ClusterSpec(groups, links_for(["a"]) * 2)


def test_yaml_loaders(tmp_path):
    p = tmp_path / "m.yaml"
    p.write_text("num_layers: 4\nhidden_size: 64\nseq_length: 8\nvocab_size: 10\nnum_heads: 4\n")
    assert load_model(p).num_layers == 4
    p.write_text("num_layers: 4\nhidden: 64\n")
    with pytest.raises(ConfigError, match="unknown field"):
        load_model(p)
    c = tmp_path / "c.json"
    c.write_text(json.dumps(het_cluster().to_dict()))
    assert load_cluster(c) == het_cluster()


names = st.sampled_from(["a", "b", "amd", "gpu_a"])
pos = st.floats(min_value=1e-3, max_value=1e15, allow_nan=False)


@given(st.builds(ModelSpec, num_layers=st.integers(1, 200), hidden_size=st.just(4096),
                 seq_length=st.integers(1, 8192), vocab_size=st.integers(1, 10 ** 5),
                 num_heads=st.sampled_from([1, 8, 32]), bytes_per_element=st.sampled_from([2, 4])))
def test_model_round_trip(model):
    assert parse(ModelSpec, render(model)) == model


@given(st.builds(DeviceGroup, name=names, peak_tflops=pos, memory_bytes=pos,
                 node_count=st.integers(1, 100), devices_per_node=st.integers(1, 16),
                 compute_efficiency=st.floats(0.01, 1.0)))
def test_group_round_trip(group):
    assert parse(DeviceGroup, render(group)) == group


@given(st.builds(Link, endpoints=st.builds(Endpoints, scope=st.just("intra-node"),
                                           groups=st.tuples(names)),
                 bandwidth_bits_per_s=pos, latency_s=st.floats(0, 1),
                 path_kind=st.sampled_from(["gpu-direct", "cpu-staged"])))
def test_link_round_trip(link):
    assert parse(Link, render(link)) == link


@given(st.lists(st.integers(1, 10), min_size=1, max_size=8), st.integers(1, 64),
       st.sampled_from(["1f1b", "gpipe"]))
def test_plan_round_trip(counts, M, schedule):
    plan = plan_from_layer_counts(counts, ["a"] * len(counts), nodes_used=[1] * len(counts),
                                  tp=[1] * len(counts), dp=1, micro_batches=M, schedule=schedule)
    assert parse(ParallelPlan, render(plan)) == plan


def test_cluster_and_train_round_trip():
    c = het_cluster()
    assert parse(ClusterSpec, render(c)) == c
    t = TrainConfig(512, 2, 6.0)
    assert parse(TrainConfig, render(t)) == t
