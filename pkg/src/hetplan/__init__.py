"""Planner and performance predictor for pipeline-parallel training on
heterogeneous accelerator clusters."""

from .core import (ClusterSpec, ConfigError, DeviceGroup, Endpoints, Link, ModelSpec,
                   ParallelPlan, StageAssignment, TrainConfig, ValidationReport,
                   load_cluster, load_model, load_plan, load_train_config,
                   plan_from_layer_counts, validate_plan)
from .cost import (collective_time, compute_time, hop_time, layer_flops,
                   p2p_activation_volume, stage_memory)
from .metrics import (evaluate_metrics, homogeneous_reference, improvement_pct, mfu,
                      theoretical_upper_bound, tgs)
from .planner import (InfeasibleError, PlannerConfig, SearchResult, order_stages,
                      search, split_layers, stage_weights)
from .predictor import PlanError, predict, stage_times
from .profiles import ProfileRecord, calibrate, parse_profiles
from .sim import SimResult, StageTimes, TraceEvent, bubble_ratio, simulate, simulate_pipeline

__version__ = "0.1.0"
