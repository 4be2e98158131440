"""Frozen desk-scale recipes: dataset builders and model/training configs
used by the experiment scripts and the acceptance suite.

The 4x4 sudoku benchmark holds out whole solution grids for evaluation
(4x4 boards have only 288 complete grids, so a clue-pattern split alone
leaks every answer into training). The solver core is kept at two
equivalent layers per outer step so the depth-matched feedforward baseline
gets the same per-step budget while the weight-tied model iterates it.
"""

from __future__ import annotations

import numpy as np

from .model import FeedforwardSolver, IterativeReasoner, ModelConfig
from .optim import Optimizer, OptimizerConfig
from .rng import RngStream, StreamSet
from .tasks import gen_sudoku, split_disjoint_solutions
from .training import TrainConfig, train_loop


def desk_sudoku_config(**overrides) -> ModelConfig:
    base = dict(vocab_size=11, seq_len=16, hidden=64, n_blocks=1,
                mixer="mlp_mixer", h_cycles=1, l_cycles=1, outer_steps=4,
                damping=0.05, noise_scale=0.01, init_scale_h=1.0,
                init_scale_l=1.0)
    base.update(overrides)
    return ModelConfig(**base)


def desk_optimizer_config(**overrides) -> OptimizerConfig:
    # paper-scale constants (lr 1e-4, 2k warmup, wd 1.0) assume ~50k steps;
    # the desk budget is ~2k steps, so the schedule is proportionally faster
    base = dict(lr=1e-3, warmup_steps=50, weight_decay=0.1)
    base.update(overrides)
    return OptimizerConfig(**base)


def desk_train_config(**overrides) -> TrainConfig:
    base = dict(schedule="sot", n_sup=8, ri_enabled=True, ni_enabled=True,
                act="learned", batch_size=64, total_steps=1500)
    base.update(overrides)
    return TrainConfig(**base)


def build_desk_sudoku(train_count: int = 2048, eval_count: int = 384,
                      seed: int = 0):
    """Generate the desk 4x4 sudoku benchmark with a solution-disjoint
    eval split. Returns (train_x, train_y, eval_x, eval_y)."""
    instances = gen_sudoku(box=2, count=train_count + 2 * eval_count,
                           seed=seed)
    train, evals = split_disjoint_solutions(instances, eval_count, seed=seed)
    train = train[:train_count]
    if len(train) < train_count:
        raise ValueError(f"only {len(train)} train instances available")
    pack = lambda insts: (np.stack([i.input_tokens for i in insts]),
                          np.stack([i.target_tokens for i in insts]))
    tx, ty = pack(train)
    ex, ey = pack(evals)
    return tx, ty, ex, ey


def train_desk_model(train_x, train_y, seed: int = 0,
                     model_cfg: ModelConfig | None = None,
                     train_cfg: TrainConfig | None = None,
                     opt_cfg: OptimizerConfig | None = None,
                     on_record=None):
    """Train one desk solver; returns (model, optimizer, records)."""
    cfg = model_cfg or desk_sudoku_config()
    model = IterativeReasoner(cfg, RngStream(seed, "params"))
    opt = Optimizer(model.params, opt_cfg or desk_optimizer_config())
    tc = train_cfg or desk_train_config()
    records = train_loop(model, opt, tc, StreamSet(seed), train_x, train_y,
                         on_record=on_record)
    return model, opt, records


def train_desk_feedforward(train_x, train_y, seed: int = 0,
                           model_cfg: ModelConfig | None = None,
                           opt_cfg: OptimizerConfig | None = None,
                           total_steps: int = 2000, batch_size: int = 64):
    """Depth-matched feedforward baseline under identical optimizer
    settings; depth equals the iterative core's per-outer-step layers."""
    from .training import feedforward_step

    cfg = model_cfg or desk_sudoku_config()
    ff = FeedforwardSolver(cfg, depth=cfg.equivalent_layers,
                           init_stream=RngStream(seed, "params"))
    opt = Optimizer(ff.params, opt_cfg or desk_optimizer_config())
    data = StreamSet(seed).get("data")
    records = []
    for _ in range(total_steps):
        idx = data.integers(0, train_x.shape[0], size=batch_size)
        records.append(feedforward_step(train_x[idx], train_y[idx], ff, opt))
    return ff, opt, records
