"""Multi-agent dispatching for looped pallet conveyors: simulator, environment,
heuristics, from-scratch PPO and an evaluation harness."""

from .env import ConveyorEnv, EnvConfig
from .harness import (
    EvalConfig,
    ExperimentReport,
    percent_improvement,
    run_eval,
    run_experiment_preset,
    summarize,
)
from .heuristics import HeuristicParams
from .marl import PolicySet, TrainConfig, train
from .topology import Topology, build_default_preset, load_topology

__version__ = "0.1.0"
