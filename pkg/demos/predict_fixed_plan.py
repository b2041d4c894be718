"""Predict one iteration of a hand-written plan on a 1:5 two-group cluster.

Twelve pipeline stages: two on the faster group, ten on the slower one, with
the layer split [7,6,6,6,6,7,7,7,7,7,7,7] over an 80-layer model.
"""
from pathlib import Path

from hetplan import (evaluate_metrics, load_cluster, load_model, load_plan, load_train_config,
                     predict, validate_plan)
from hetplan.predictor import stage_times

CFG = Path(__file__).resolve().parents[1] / "configs"

model = load_model(CFG / "llama2_70b.yaml")
cluster = load_cluster(CFG / "het_12n_1to5.yaml")
train = load_train_config(CFG / "het_train.yaml")
plan = load_plan(CFG / "het12_fixture_plan.json")

# Validation catches coverage gaps, TP/DP shape errors and batch mismatches.
print("valid:", validate_plan(plan, model, cluster, train).ok)

# The cost model turns each stage into fwd/bwd/send/sync durations.
for i, t in enumerate(stage_times(plan, model, cluster, train)):
    st = plan.stages[i]
    print(f"stage {i:2d} {st.group:6s} layers={st.num_layers} fwd={t.fwd_s * 1e3:7.2f} ms "
          f"bwd={t.bwd_s * 1e3:7.2f} ms send={t.send_fwd_s * 1e3:6.2f} ms")

result = predict(plan, model, cluster, train)
m = evaluate_metrics(plan, result, model, cluster, train)
print(f"\niteration {result.iteration_time_s:.3f} s, TGS {m.tgs:.1f}, MFU {m.mfu_pct:.2f} %")
print(f"aggregate bubble {result.aggregate_bubble_ratio:.3f}")
