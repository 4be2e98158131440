"""Training schedules for the iterative solver.

Three supervision/update schedules over a trajectory of ``n_sup`` segments,
each segment being one truncated unroll of T outer steps with detached
carry:

* ``terminal``: one loss after the last segment, one optimizer step.
* ``trajectory_supervision``: losses at anchored segments, accumulated
  (mean over anchors) into a single optimizer step at the end.
* ``sot``: segmented online training; each segment is supervised and the
  optimizer steps immediately, so the next segment runs under updated
  parameters with a detached carried state.

Optional pieces: randomized latent initialization (ri), step-noise
injection (ni), and halting (``act``): a learned halting head breaks a
sample out of its episode when the halting logit exceeds the threshold, an
oracle variant breaks on exact-match correctness instead. Ground truth in
the oracle variant only gates the break; it never enters the gradient
path. Halted samples are dropped from subsequent segment losses. Early
breaks apply to the sot schedule; the other schedules still train the
halting head through the BCE term but run their full trajectory.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .model import FeedforwardSolver, IterativeReasoner, LatentPair, decode
from .optim import Optimizer
from .rng import StreamSet
from .tensor import (
    NonFiniteError,
    Tensor,
    add,
    backward,
    bce_with_logit,
    no_grad,
    scale,
    softmax_cross_entropy,
)

SCHEDULES = ("terminal", "trajectory_supervision", "sot")
ACT_MODES = ("off", "learned", "oracle")


@dataclass
class TrainConfig:
    schedule: str = "sot"
    n_sup: int = 8                     # max outer supervision segments
    anchor_range: Optional[tuple] = None
    ri_enabled: bool = True
    ni_enabled: bool = True
    act: str = "off"
    halt_threshold: float = 0.0
    batch_size: int = 64
    total_steps: int = 2000
    eval_every: int = 0
    save_every: int = 0
    # optional overrides of the model's dynamics constants
    sigma_h: Optional[float] = None
    sigma_l: Optional[float] = None
    beta: Optional[float] = None
    damping: Optional[float] = None

    def __post_init__(self):
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if self.act not in ACT_MODES:
            raise ValueError(f"act must be one of {ACT_MODES}")
        if self.n_sup < 1:
            raise ValueError("n_sup must be >= 1")
        if self.anchor_range is not None:
            a, b = self.anchor_range
            if not (1 <= a <= b <= self.n_sup):
                raise ValueError(f"anchor_range {self.anchor_range} outside "
                                 f"[1, {self.n_sup}]")
            self.anchor_range = (int(a), int(b))

    def anchors(self) -> list[int]:
        if self.anchor_range is None:
            return list(range(1, self.n_sup + 1))
        a, b = self.anchor_range
        return list(range(a, b + 1))


@dataclass
class TrainRecord:
    step: int
    ce: float
    bce: float
    train_acc: float
    mean_residual: float
    mean_halt_step: float
    nfe: int


RECORD_FIELDS = ("step", "ce", "bce", "train_acc", "mean_residual",
                 "mean_halt_step", "nfe")


def write_records_csv(path, records, append: bool = False) -> None:
    mode = "a" if append else "w"
    with open(path, mode, newline="") as fh:
        w = csv.writer(fh)
        if not append:
            w.writerow(RECORD_FIELDS)
        for r in records:
            w.writerow([getattr(r, f) for f in RECORD_FIELDS])


def exact_match(pred: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-sample indicator: every token correct."""
    return (pred == targets).all(axis=-1)


def make_halting_label(logits, targets) -> np.ndarray:
    """1 iff the greedy decode matches the target at every position."""
    return exact_match(decode(logits), np.asarray(targets)).astype(np.float32)


def _dynamics(cfg: TrainConfig, model: IterativeReasoner):
    """Resolve effective (damping, noise) from the ni switch and overrides."""
    if cfg.ni_enabled:
        lam = model.config.damping if cfg.damping is None else cfg.damping
        beta = model.config.noise_scale if cfg.beta is None else cfg.beta
    else:
        lam, beta = 0.0, 0.0
    return lam, beta


def _segment_loss(out, targets):
    ce = softmax_cross_entropy(out.logits, targets)
    labels = make_halting_label(out.logits, targets)
    bce = bce_with_logit(out.q_logit, labels)
    return add(ce, bce), ce, bce, labels


def _check_loss(loss: Tensor) -> None:
    if not np.isfinite(loss.data):
        raise NonFiniteError("non-finite training loss; episode aborted")


def _slice_pair(pair: LatentPair, keep: np.ndarray) -> LatentPair:
    return LatentPair(Tensor._wrap(pair.z_h.data[keep], False),
                      Tensor._wrap(pair.z_l.data[keep], False))


def sot_episode(inputs, targets, model: IterativeReasoner, opt: Optimizer,
                cfg: TrainConfig, streams: StreamSet,
                max_opt_steps: int | None = None) -> list[TrainRecord]:
    """One segmented-online-training episode over a batch.

    Per segment: unroll, loss, backward, optimizer step; the detached carry
    then continues under the updated parameters. With ``act`` enabled,
    samples whose halting condition fires leave the episode.
    """
    inputs = np.asarray(inputs)
    targets = np.asarray(targets)
    n = inputs.shape[0]
    lam, beta = _dynamics(cfg, model)
    pair = model.init_pair(n, cfg.ri_enabled, streams.get("init"),
                           cfg.sigma_h, cfg.sigma_l)
    noise = streams.get("noise")
    live = np.arange(n)
    halt_seg = np.full(n, cfg.n_sup, dtype=np.float64)
    records: list[TrainRecord] = []

    for k in range(1, cfg.n_sup + 1):
        x_emb = model.embed(inputs[live])
        out = model.truncated_unroll(pair, x_emb, noise_scale=beta,
                                     damping=lam, noise_stream=noise)
        loss, ce, bce, labels = _segment_loss(out, targets[live])
        _check_loss(loss)
        opt.zero_grad()
        backward(loss)
        opt.step()
        carry = out.pair.detach()

        records.append(TrainRecord(
            step=opt.t, ce=ce.item(), bce=bce.item(),
            train_acc=float(labels.mean()),
            mean_residual=float(out.residual_trace[-1].mean()),
            mean_halt_step=float(halt_seg.mean()),
            nfe=int(live.size * model.config.outer_steps)))

        if cfg.act == "learned":
            halted = out.q_logit.data > cfg.halt_threshold
        elif cfg.act == "oracle":
            halted = labels > 0.5
        else:
            halted = np.zeros(live.size, dtype=bool)
        if halted.any():
            halt_seg[live[halted]] = k
            records[-1].mean_halt_step = float(halt_seg.mean())
        keep = ~halted
        if max_opt_steps is not None and opt.t >= max_opt_steps:
            break
        if not keep.any() or k == cfg.n_sup:
            break
        live = live[keep]
        pair = _slice_pair(carry, keep)
    return records


def trajectory_supervision_episode(inputs, targets, model: IterativeReasoner,
                                   opt: Optimizer, cfg: TrainConfig,
                                   streams: StreamSet) -> TrainRecord:
    """Offline deep supervision: anchored losses averaged, one update."""
    inputs = np.asarray(inputs)
    targets = np.asarray(targets)
    lam, beta = _dynamics(cfg, model)
    pair = model.init_pair(inputs.shape[0], cfg.ri_enabled,
                           streams.get("init"), cfg.sigma_h, cfg.sigma_l)
    noise = streams.get("noise")
    anchors = set(cfg.anchors())
    x_emb = model.embed(inputs)

    parts = []
    ce_v = bce_v = acc_v = res_v = 0.0
    for k in range(1, cfg.n_sup + 1):
        if k in anchors:
            out = model.truncated_unroll(pair, x_emb, noise_scale=beta,
                                         damping=lam, noise_stream=noise)
            seg_loss, ce, bce, labels = _segment_loss(out, targets)
            parts.append(seg_loss)
            ce_v, bce_v = ce.item(), bce.item()
            acc_v = float(labels.mean())
            res_v = float(out.residual_trace[-1].mean())
            pair = out.pair.detach()
        else:
            # no loss anchored here: advance the carry without recording
            with no_grad():
                for _ in range(model.config.outer_steps):
                    pair = model.outer_step(pair, x_emb, lam, beta, noise)
            pair = pair.detach()

    total = parts[0]
    for p in parts[1:]:
        total = add(total, p)
    loss = scale(total, 1.0 / len(parts)) if len(parts) > 1 else total
    _check_loss(loss)
    opt.zero_grad()
    backward(loss)
    opt.step()
    return TrainRecord(
        step=opt.t, ce=ce_v, bce=bce_v, train_acc=acc_v, mean_residual=res_v,
        mean_halt_step=float(cfg.n_sup),
        nfe=int(inputs.shape[0] * cfg.n_sup * model.config.outer_steps))


def terminal_episode(inputs, targets, model: IterativeReasoner, opt: Optimizer,
                     cfg: TrainConfig, streams: StreamSet) -> TrainRecord:
    """Loss only after the final segment; one tracked step at the very end."""
    inputs = np.asarray(inputs)
    targets = np.asarray(targets)
    lam, beta = _dynamics(cfg, model)
    pair = model.init_pair(inputs.shape[0], cfg.ri_enabled,
                           streams.get("init"), cfg.sigma_h, cfg.sigma_l)
    x_emb = model.embed(inputs)
    out = model.truncated_unroll(
        pair, x_emb, outer_steps=cfg.n_sup * model.config.outer_steps,
        damping=lam, noise_scale=beta, noise_stream=streams.get("noise"))
    loss, ce, bce, labels = _segment_loss(out, targets)
    _check_loss(loss)
    opt.zero_grad()
    backward(loss)
    opt.step()
    return TrainRecord(
        step=opt.t, ce=ce.item(), bce=bce.item(),
        train_acc=float(labels.mean()),
        mean_residual=float(out.residual_trace[-1].mean()),
        mean_halt_step=float(cfg.n_sup),
        nfe=int(inputs.shape[0] * cfg.n_sup * model.config.outer_steps))


def feedforward_step(inputs, targets, model: FeedforwardSolver,
                     opt: Optimizer) -> TrainRecord:
    """Plain supervised step for the depth-matched feedforward baseline."""
    logits = model.forward(np.asarray(inputs))
    ce = softmax_cross_entropy(logits, np.asarray(targets))
    _check_loss(ce)
    acc = float(exact_match(decode(logits), np.asarray(targets)).mean())
    opt.zero_grad()
    backward(ce)
    opt.step()
    return TrainRecord(step=opt.t, ce=ce.item(), bce=0.0, train_acc=acc,
                       mean_residual=0.0, mean_halt_step=0.0,
                       nfe=int(np.asarray(inputs).shape[0]))


def run_episode(inputs, targets, model, opt, cfg: TrainConfig,
                streams: StreamSet, max_opt_steps=None) -> list[TrainRecord]:
    if cfg.schedule == "sot":
        return sot_episode(inputs, targets, model, opt, cfg, streams,
                           max_opt_steps)
    if cfg.schedule == "trajectory_supervision":
        return [trajectory_supervision_episode(inputs, targets, model, opt,
                                               cfg, streams)]
    return [terminal_episode(inputs, targets, model, opt, cfg, streams)]


def train_loop(model, opt: Optimizer, cfg: TrainConfig, streams: StreamSet,
               inputs: np.ndarray, targets: np.ndarray,
               on_record: Optional[Callable] = None,
               on_step: Optional[Callable] = None) -> list[TrainRecord]:
    """Drive episodes until ``cfg.total_steps`` optimizer steps have run.

    Batches are sampled with replacement from the ``data`` stream, so a
    run that restores stream states resumes the exact batch sequence.
    ``on_record`` fires per optimizer step, ``on_step`` after each episode
    (for eval/checkpoint cadence hooks).
    """
    data = streams.get("data")
    n = inputs.shape[0]
    records: list[TrainRecord] = []
    while opt.t < cfg.total_steps:
        idx = data.integers(0, n, size=cfg.batch_size)
        recs = run_episode(inputs[idx], targets[idx], model, opt, cfg,
                           streams, max_opt_steps=cfg.total_steps)
        records.extend(recs)
        if on_record is not None:
            for r in recs:
                on_record(r)
        if on_step is not None:
            on_step(opt.t)
    return records
