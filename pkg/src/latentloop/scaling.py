"""Two-axis test-time scaling: depth (outer iterations per trajectory) and
breadth (independent restarts), plus the aggregation rules, halting-queue
evaluation, and compute accounting.

Budgets count NFE = depth * breadth outer steps; NLE multiplies by the
equivalent layers per outer step. Restart ``i`` of instance ``tag`` draws
its initialization and step noise from the dedicated stream
``restart.<tag>.<i>``, so restarts are independent and replayable.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .model import IterativeReasoner, LatentPair, ModelConfig, decode
from .rng import RngStream, StreamSet
from .tensor import Tensor, no_grad


@dataclass
class ScalingBudget:
    depth: int                 # D: outer iterations per trajectory
    breadth: int = 1           # B: independent restarts
    window: int = 3            # L: convergence-window length
    beta_eval: float = 0.0
    act_enabled: bool = False
    halt_threshold: float = 0.0

    def __post_init__(self):
        if self.depth < 1 or self.breadth < 1:
            raise ValueError("depth and breadth must be >= 1")
        if not 1 <= self.window <= self.depth:
            raise ValueError(f"window must lie in [1, depth], got {self.window}")


@dataclass
class RestartResult:
    prediction: np.ndarray          # decoded tokens, (seq,)
    window_residual: float          # mean residual over the final window
    halt_step: int                  # tau <= D
    residuals: np.ndarray = field(repr=False, default=None)  # per-step trace
    fp_residual: float = float("nan")
    stream_id: Optional[str] = None


def nfe(depth: int, breadth: int) -> int:
    """Function evaluations: outer steps times restarts."""
    return depth * breadth


def nle(depth: int, breadth: int, config: ModelConfig) -> int:
    """Equivalent layer evaluations: NFE times layers per outer step."""
    return depth * breadth * config.equivalent_layers


class _RowStreams:
    """Per-row stream bundle duck-typing RngStream.normal for batched noise."""

    def __init__(self, streams: Sequence[RngStream]):
        self.streams = list(streams)

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        assert shape[0] == len(self.streams)
        return np.stack([s.normal(shape[1:], scale) for s in self.streams])


def _stack_pairs(model, streams: Sequence[RngStream]) -> LatentPair:
    cfg = model.config
    shape = (cfg.seq_len, cfg.hidden)
    zh, zl = [], []
    for s in streams:
        zh.append(s.normal(shape, scale=cfg.init_scale_h))
        zl.append(s.normal(shape, scale=cfg.init_scale_l))
    return LatentPair(Tensor._wrap(np.stack(zh), False),
                      Tensor._wrap(np.stack(zl), False))


def _rollout(model: IterativeReasoner, tokens: np.ndarray, depth: int,
             beta: float, pairs: LatentPair, noise, window: int,
             stream_ids=None, compute_fp: bool = True) -> list[RestartResult]:
    """Advance a batch of rows ``depth`` outer steps and decode at the end.

    Runs the model's own damped dynamics (its configured damping constant);
    the fixed-point residual probe at the end is always undamped/noiseless.
    """
    lam = model.config.damping
    with no_grad():
        x_emb = model.embed(tokens)
        pair = pairs
        trace = []
        for k in range(depth):
            prev = pair.z_h.data
            pair = model.outer_step(pair, x_emb, lam, beta, noise)
            d = (pair.z_h.data.astype(np.float64) - prev.astype(np.float64))
            trace.append(np.sqrt((d * d).reshape(d.shape[0], -1).sum(axis=1)))
        preds = decode(model.lm_head(pair.z_h))
        fp = None
        if compute_fp:
            nxt = model.outer_step(pair, x_emb, 0.0, 0.0, None)
            d = nxt.z_h.data.astype(np.float64) - pair.z_h.data.astype(np.float64)
            fp = np.sqrt((d * d).reshape(d.shape[0], -1).sum(axis=1))
    trace = np.stack(trace, axis=1)  # (rows, depth)
    w = min(window, depth)
    results = []
    for i in range(tokens.shape[0]):
        results.append(RestartResult(
            prediction=preds[i],
            window_residual=float(trace[i, -w:].mean()),
            halt_step=depth,
            residuals=trace[i],
            fp_residual=float(fp[i]) if fp is not None else float("nan"),
            stream_id=None if stream_ids is None else stream_ids[i]))
    return results


def run_depth(tokens: np.ndarray, model: IterativeReasoner, depth: int,
              beta_eval: float, rng: RngStream,
              init_pair: LatentPair | None = None,
              window: int = 3) -> RestartResult:
    """One trajectory of ``depth`` outer iterations for one instance.

    The initialization is a randomized draw from ``rng`` unless an explicit
    pair is supplied (e.g. zeros for deterministic replay).
    """
    tokens = np.asarray(tokens).reshape(1, -1)
    pair = init_pair if init_pair is not None else _stack_pairs(model, [rng])
    noise = _RowStreams([rng]) if beta_eval > 0 else None
    return _rollout(model, tokens, depth, beta_eval, pair, noise, window,
                    stream_ids=[rng.stream_id])[0]


def run_breadth(tokens: np.ndarray, model: IterativeReasoner,
                budget: ScalingBudget, streams: StreamSet,
                tag) -> list[RestartResult]:
    """B independent restarts of one instance, one stream per restart."""
    tokens = np.asarray(tokens).reshape(1, -1)
    row_streams = [streams.get(f"restart.{tag}.{i}")
                   for i in range(budget.breadth)]
    pairs = _stack_pairs(model, row_streams)
    rep = np.repeat(tokens, budget.breadth, axis=0)
    noise = _RowStreams(row_streams) if budget.beta_eval > 0 else None
    return _rollout(model, rep, budget.depth, budget.beta_eval, pairs, noise,
                    budget.window, stream_ids=[s.stream_id for s in row_streams])


def run_dataset(model: IterativeReasoner, inputs: np.ndarray,
                budget: ScalingBudget, streams: StreamSet,
                chunk_rows: int = 256) -> list[list[RestartResult]]:
    """run_breadth over a dataset, batching (instance, restart) rows."""
    n = inputs.shape[0]
    b = budget.breadth
    per_instance: list[list[RestartResult]] = [[] for _ in range(n)]
    row_meta = [(i, j) for i in range(n) for j in range(b)]
    for lo in range(0, len(row_meta), chunk_rows):
        chunk = row_meta[lo:lo + chunk_rows]
        row_streams = [streams.get(f"restart.{i}.{j}") for i, j in chunk]
        tokens = np.stack([inputs[i] for i, _ in chunk])
        pairs = _stack_pairs(model, row_streams)
        noise = _RowStreams(row_streams) if budget.beta_eval > 0 else None
        results = _rollout(model, tokens, budget.depth, budget.beta_eval,
                           pairs, noise, budget.window,
                           stream_ids=[s.stream_id for s in row_streams])
        for (i, _), res in zip(chunk, results):
            per_instance[i].append(res)
    return per_instance


# ---------------------------------------------------------------------------
# aggregation metrics


def _correct(result: RestartResult, target: np.ndarray) -> bool:
    return np.array_equal(result.prediction, np.asarray(target))


def acc_avg(results: Sequence[RestartResult], target) -> float:
    """Mean exact-match indicator over restarts."""
    if not results:
        raise ValueError("need at least one restart")
    return float(np.mean([_correct(r, target) for r in results]))


def top1_converged(results: Sequence[RestartResult], target,
                   window: int = 3) -> int:
    """Exact-match indicator of the restart with the smallest mean residual
    over its final ``window`` steps (ties: lowest restart index)."""
    if any(len(r.residuals) < window for r in results):
        raise ValueError(f"every restart needs >= {window} recorded residuals")
    scores = [float(np.mean(r.residuals[-window:])) for r in results]
    best = int(np.argmin(scores))
    return int(_correct(results[best], target))


def majority_vote(results: Sequence[RestartResult], target) -> int:
    """Exact-match indicator of the modal decoded sequence (ties: the
    sequence first produced by the lowest restart index)."""
    counts: dict[bytes, int] = {}
    first: dict[bytes, int] = {}
    for idx, r in enumerate(results):
        key = np.asarray(r.prediction).tobytes()
        counts[key] = counts.get(key, 0) + 1
        first.setdefault(key, idx)
    winner = max(counts, key=lambda k: (counts[k], -first[k]))
    return int(np.array_equal(results[first[winner]].prediction,
                              np.asarray(target)))


def path_independence(per_instance: Sequence[Sequence[RestartResult]],
                      targets: np.ndarray) -> float:
    """Mean over inputs of |AccAvg_B - AccAvg_1|, restart 0 as the single run."""
    if any(len(rs) < 2 for rs in per_instance):
        raise ValueError("path independence needs >= 2 restarts per instance")
    gaps = []
    for rs, tgt in zip(per_instance, targets):
        acc_b = acc_avg(rs, tgt)
        acc_1 = float(_correct(rs[0], tgt))
        gaps.append(abs(acc_b - acc_1))
    return float(np.mean(gaps))


# ---------------------------------------------------------------------------
# halting-queue evaluation


def act_queue_eval(inputs: np.ndarray, model: IterativeReasoner,
                   budget: ScalingBudget, streams: StreamSet,
                   capacity: int = 64):
    """Fixed-capacity inference queue with per-sample halting.

    Each slot advances one outer step per tick; a slot halts when its
    halting logit exceeds the threshold (if ``budget.act_enabled``) or when
    it reaches ``budget.depth``, emits its result, and is refilled from the
    pending pool. Returns (results in dataset order, average NFE), where
    average NFE = total outer steps executed / number of instances.
    """
    n = inputs.shape[0]
    pending = deque(range(n))
    results: list[Optional[RestartResult]] = [None] * n
    cfg = model.config

    with no_grad():
        all_emb = model.embed(inputs).data  # (n, seq, hidden)

    slot_inst: list[int] = []
    slot_step: list[int] = []
    slot_trace: list[list[float]] = []
    slot_zh = np.zeros((0, cfg.seq_len, cfg.hidden), dtype=np.float32)
    slot_zl = np.zeros_like(slot_zh)
    slot_streams: list[RngStream] = []

    def refill():
        nonlocal slot_zh, slot_zl
        fresh_h, fresh_l = [], []
        while pending and len(slot_inst) + len(fresh_h) < capacity:
            i = pending.popleft()
            s = streams.get(f"restart.{i}.0")
            fresh_h.append(s.normal((cfg.seq_len, cfg.hidden),
                                    scale=cfg.init_scale_h))
            fresh_l.append(s.normal((cfg.seq_len, cfg.hidden),
                                    scale=cfg.init_scale_l))
            slot_inst.append(i)
            slot_step.append(0)
            slot_trace.append([])
            slot_streams.append(s)
        if fresh_h:
            slot_zh = np.concatenate([slot_zh, np.stack(fresh_h)])
            slot_zl = np.concatenate([slot_zl, np.stack(fresh_l)])

    refill()
    total_steps = 0
    lam = cfg.damping
    while slot_inst:
        x_emb = Tensor._wrap(all_emb[slot_inst], False)
        pair = LatentPair(Tensor._wrap(slot_zh, False),
                          Tensor._wrap(slot_zl, False))
        noise = _RowStreams(slot_streams) if budget.beta_eval > 0 else None
        with no_grad():
            prev = pair.z_h.data
            pair = model.outer_step(pair, x_emb, lam, budget.beta_eval, noise)
            q = model.q_head(pair.z_h).data
        d = pair.z_h.data.astype(np.float64) - prev.astype(np.float64)
        res = np.sqrt((d * d).reshape(d.shape[0], -1).sum(axis=1))
        total_steps += len(slot_inst)
        for i in range(len(slot_inst)):
            slot_step[i] += 1
            slot_trace[i].append(float(res[i]))
        halted = np.array([
            (budget.act_enabled and q[i] > budget.halt_threshold)
            or slot_step[i] >= budget.depth
            for i in range(len(slot_inst))])
        if halted.any():
            with no_grad():
                rows = np.where(halted)[0]
                sub = Tensor._wrap(pair.z_h.data[rows], False)
                preds = decode(model.lm_head(sub))
            for r, row in enumerate(rows):
                inst = slot_inst[row]
                trace = np.asarray(slot_trace[row])
                w = min(budget.window, len(trace))
                results[inst] = RestartResult(
                    prediction=preds[r],
                    window_residual=float(trace[-w:].mean()),
                    halt_step=slot_step[row],
                    residuals=trace,
                    stream_id=slot_streams[row].stream_id)
            keep = np.where(~halted)[0]
            slot_inst = [slot_inst[i] for i in keep]
            slot_step = [slot_step[i] for i in keep]
            slot_trace = [slot_trace[i] for i in keep]
            slot_streams = [slot_streams[i] for i in keep]
            slot_zh = pair.z_h.data[keep]
            slot_zl = pair.z_l.data[keep]
            refill()
        else:
            slot_zh = pair.z_h.data
            slot_zl = pair.z_l.data

    assert all(r is not None for r in results)
    return results, total_steps / n


def calibrate_halt_threshold(model: IterativeReasoner, inputs: np.ndarray,
                             targets: np.ndarray, budget: ScalingBudget,
                             streams_seed: int = 1234,
                             candidates=(0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0,
                                         3.5, 4.0),
                             max_drop: float = 0.01) -> float:
    """Pick the smallest halting threshold whose exact-accuracy cost on a
    calibration set stays within ``max_drop`` of halting-free evaluation.

    The raw learned logit is trained toward 1{decode correct}, which reads
    overconfident off the training distribution; thresholding on held-back
    training data restores the compute/accuracy trade without touching the
    evaluation split.
    """
    base_budget = ScalingBudget(depth=budget.depth, breadth=1,
                                window=budget.window,
                                beta_eval=budget.beta_eval, act_enabled=False)
    off, _ = act_queue_eval(inputs, model, base_budget,
                            StreamSet(streams_seed), capacity=64)
    acc_off = float(np.mean([np.array_equal(r.prediction, t)
                             for r, t in zip(off, targets)]))
    for delta in candidates:
        b = ScalingBudget(depth=budget.depth, breadth=1, window=budget.window,
                          beta_eval=budget.beta_eval, act_enabled=True,
                          halt_threshold=delta)
        on, _ = act_queue_eval(inputs, model, b, StreamSet(streams_seed),
                               capacity=64)
        acc_on = float(np.mean([np.array_equal(r.prediction, t)
                                for r, t in zip(on, targets)]))
        if acc_off - acc_on <= max_drop:
            return float(delta)
    return float(candidates[-1])


# ---------------------------------------------------------------------------
# sweep


SWEEP_FIELDS = ("D", "B", "nfe", "nle", "acc_avg", "top1_conv", "majority",
                "mean_residual", "delta_pi")


def sweep_cell(model: IterativeReasoner, inputs: np.ndarray,
               targets: np.ndarray, budget: ScalingBudget,
               streams: StreamSet) -> dict:
    """Aggregate metrics for one (D, B) cell over a dataset.

    ``mean_residual`` is the mean final fixed-point residual over all
    restarts and instances; ``delta_pi`` is 0 by definition at B = 1.
    """
    per_instance = run_dataset(model, inputs, budget, streams)
    accs, top1s, majs, fps = [], [], [], []
    for rs, tgt in zip(per_instance, targets):
        accs.append(acc_avg(rs, tgt))
        top1s.append(top1_converged(rs, tgt, min(budget.window, budget.depth)))
        majs.append(majority_vote(rs, tgt))
        fps.extend(r.fp_residual for r in rs)
    dpi = (path_independence(per_instance, targets)
           if budget.breadth > 1 else 0.0)
    return {
        "D": budget.depth,
        "B": budget.breadth,
        "nfe": nfe(budget.depth, budget.breadth),
        "nle": nle(budget.depth, budget.breadth, model.config),
        "acc_avg": float(np.mean(accs)),
        "top1_conv": float(np.mean(top1s)),
        "majority": float(np.mean(majs)),
        "mean_residual": float(np.mean(fps)),
        "delta_pi": dpi,
    }
