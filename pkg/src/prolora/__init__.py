"""Partially-shared, rotation-enhanced low-rank adapters.

Library surface:

- :mod:`prolora.matrix` — shape-checked dense primitives, splitmix64 stream
- :mod:`prolora.adapter` — adapter configs, init, expansion, exact gradients,
  merge/unmerge, parameter counting for one layer
- :mod:`prolora.planner` — whole-model parameter/memory accounting and
  budget-matched configuration search
- :mod:`prolora.training` — teacher-student recovery runs, gradient checks,
  ablation comparisons
- :mod:`prolora.container` — bit-exact adapter container files
- :mod:`prolora.reference` — independent reference paths and oracles
- :mod:`prolora.cli` — the `prolora` command-line tool
"""

from .adapter import (
    AdapterConfig,
    AdapterState,
    ConfigError,
    GradBundle,
    StateError,
    backward,
    clora_config,
    delta_w,
    expand_a,
    expand_b,
    forward,
    init,
    lora_config,
    merge,
    prolora_config,
    rolora_config,
    trainable_count,
    unmerge,
    validate,
)
from .container import load, save
from .matrix import ShapeError, SplitMix64
from .planner import (
    ModelArch,
    PlanReport,
    count_lora,
    count_prolora,
    count_tied_lora,
    count_vera,
    resolve_arch,
    solve_budget,
)
from .training import TaskSpec, TrainLog, TrainSpec, ablation_suite, gradcheck, lr_sweep, run

__version__ = "0.1.0"

__all__ = [
    "AdapterConfig",
    "AdapterState",
    "ConfigError",
    "GradBundle",
    "ModelArch",
    "PlanReport",
    "ShapeError",
    "SplitMix64",
    "StateError",
    "TaskSpec",
    "TrainLog",
    "TrainSpec",
    "ablation_suite",
    "backward",
    "clora_config",
    "count_lora",
    "count_prolora",
    "count_tied_lora",
    "count_vera",
    "delta_w",
    "expand_a",
    "expand_b",
    "forward",
    "gradcheck",
    "init",
    "load",
    "lora_config",
    "lr_sweep",
    "merge",
    "prolora_config",
    "resolve_arch",
    "rolora_config",
    "run",
    "save",
    "solve_budget",
    "trainable_count",
    "unmerge",
    "validate",
]
