"""Desk-scale sparse mixture-of-experts toolkit: routing, losses, model, training."""

from stmoe.errors import ConfigError, DivergenceError
from stmoe.losses import LossConfig, load_balance_loss, router_z_loss, total_loss
from stmoe.mesh import HardwareProfile, MeshSpec, comm_cost, plan_mesh, step_time_estimate
from stmoe.model import ModelConfig, Params, build_model, forward_span_corruption, lm_loss
from stmoe.precision import BFLOAT16, FLOAT32, round_to_format, softmax_exact, softmax_in_format
from stmoe.routing import (RouterConfig, RoutingDecision, assign_capacity, combine, compute_gates,
                           dispatch, entropy, expert_capacity, select_top_n)
from stmoe.train import FinetuneConfig, StudyConfig, TrainConfig, finetune, stability_study

__version__ = "0.1.0"

__all__ = [
    "BFLOAT16", "FLOAT32", "ConfigError", "DivergenceError", "FinetuneConfig", "HardwareProfile",
    "LossConfig", "MeshSpec", "ModelConfig", "Params", "RouterConfig", "RoutingDecision",
    "StudyConfig", "TrainConfig", "assign_capacity", "build_model", "combine", "comm_cost",
    "compute_gates", "dispatch", "entropy", "expert_capacity", "finetune",
    "forward_span_corruption", "lm_loss", "load_balance_loss", "plan_mesh", "round_to_format",
    "router_z_loss", "select_top_n", "softmax_exact", "softmax_in_format", "stability_study",
    "step_time_estimate", "total_loss",
]
