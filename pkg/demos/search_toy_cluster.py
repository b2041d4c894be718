"""Let the planner pick stage count, ordering and layer split for a toy cluster.

The fast group is three times the slow one, so a balanced split hands it
most of the layers. The model is widened so compute outweighs the Ethernet hop.
"""
from collections import Counter
from dataclasses import replace
from pathlib import Path

from hetplan import PlannerConfig, load_cluster, load_model, load_train_config, search

CFG = Path(__file__).resolve().parents[1] / "configs"

model = replace(load_model(CFG / "toy_model.yaml"), num_layers=16, hidden_size=4096,
                seq_length=2048, num_heads=32)
cluster = load_cluster(CFG / "toy_cluster.yaml")
train = load_train_config(CFG / "toy_train.yaml")

best = search(model, cluster, train, PlannerConfig(pp_degrees=(2,)))
uniform = search(model, cluster, train, PlannerConfig(pp_degrees=(2,), uniform_only=True))

print("best plan  :", [s.group for s in best.plan.stages], best.plan.layer_counts(),
      f"{best.iteration_time_s * 1e3:.3f} ms")
print("uniform    :", [s.group for s in uniform.plan.stages], uniform.plan.layer_counts(),
      f"{uniform.iteration_time_s * 1e3:.3f} ms")

# Every leaf the search touched is logged, either with a time or a prune reason.
kinds = Counter("scored" if "time_s" in e else e["pruned"] for e in best.log)
print("search log :", dict(kinds))
