"""Decentralized merge-and-train simulation for small neural networks.

Agents train local MLPs on data shards and periodically average parameters
with their topology neighbors, optionally aligning hidden units first via
linear-assignment matching so that averaging happens in a shared basis.
"""

from __future__ import annotations

from .align import (LayerPermutation, activation_match, apply_permutation,
                    fixed_point_fraction, identity_permutation, weight_match)
from .checkpoint import load_model, save_model
from .config import ExperimentConfig, format_config, parse_config
from .linalg import RngStream, solve_lap_max
from .merge import MergePlan, MergeRoundStats, charge_communication, merge_round
from .nn import ModelParams, forward, init_model, loss_and_grad
from .optim import HyperParams, OptimizerState, new_state
from .sim import (Dataset, MetricsRecord, RunResult, make_synthetic, partition,
                  run_experiment, split_train_test)
from .topology import (SpectralReport, Topology, build_mixing, make_topology,
                       mixing_spectrum, verify_permuted_spectrum)

__version__ = "0.1.0"

__all__ = [
    "LayerPermutation", "activation_match", "apply_permutation",
    "fixed_point_fraction", "identity_permutation", "weight_match",
    "load_model", "save_model",
    "ExperimentConfig", "format_config", "parse_config",
    "RngStream", "solve_lap_max",
    "MergePlan", "MergeRoundStats", "charge_communication", "merge_round",
    "ModelParams", "forward", "init_model", "loss_and_grad",
    "HyperParams", "OptimizerState", "new_state",
    "Dataset", "MetricsRecord", "RunResult", "make_synthetic", "partition",
    "run_experiment", "split_train_test",
    "SpectralReport", "Topology", "build_mixing", "make_topology",
    "mixing_spectrum", "verify_permuted_spectrum",
    "__version__",
]
