"""Weight-tied iterative latent solvers: training schedules, two-axis
test-time scaling, attractor diagnostics, and puzzle benchmarks."""

from .model import (DivergenceError, FeedforwardSolver, IterativeReasoner,
                    LatentPair, ModelConfig, UnrollOutput, decode)
from .optim import Optimizer, OptimizerConfig
from .rng import RngStream, StreamSet
from .scaling import (RestartResult, ScalingBudget, acc_avg, act_queue_eval,
                      majority_vote, nfe, nle, path_independence, run_breadth,
                      run_dataset, run_depth, top1_converged)
from .tensor import Tensor, backward, detach, no_grad
from .training import TrainConfig, TrainRecord, train_loop

__all__ = [
    "DivergenceError", "FeedforwardSolver", "IterativeReasoner", "LatentPair",
    "ModelConfig", "UnrollOutput", "decode", "Optimizer", "OptimizerConfig",
    "RngStream", "StreamSet", "RestartResult", "ScalingBudget", "acc_avg",
    "act_queue_eval", "majority_vote", "nfe", "nle", "path_independence",
    "run_breadth", "run_dataset", "run_depth", "top1_converged", "Tensor",
    "backward", "detach", "no_grad", "TrainConfig", "TrainRecord",
    "train_loop",
]
