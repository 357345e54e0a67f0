"""Stochastic WaveNet: a dilated-convolution sequence model with per-layer
latent variables, its reversed-conv inference network, annealed ELBO
training, and ancestral sampling."""

from .data import SequenceBatch, gen_bimodal_walk, gen_stroke_toy, read_swn, write_swn
from .inference import backward_features, dependency_set, posterior_pass
from .model import (LatentBundle, ModelConfig, ablate, forward_stochastic,
                    generate, init_params, receptive_field)
from .objective import AnnealSchedule, ElboBreakdown, anneal_lambda, elbo, importance_ll_estimate
from .training import TrainConfig, adam_step, evaluate, lr_schedule, train

__all__ = [
    "AnnealSchedule", "ElboBreakdown", "LatentBundle", "ModelConfig",
    "SequenceBatch", "TrainConfig", "ablate", "adam_step", "anneal_lambda",
    "backward_features", "dependency_set", "elbo", "evaluate",
    "forward_stochastic", "gen_bimodal_walk", "gen_stroke_toy", "generate",
    "importance_ll_estimate", "init_params", "lr_schedule", "posterior_pass",
    "read_swn", "receptive_field", "train", "write_swn",
]
