"""Attractor-landscape instrumentation.

Residual analytics, output margins, empirical contraction probes, and 2-D
trajectory projection via power iteration with deflation. The residual and
contraction helpers take a generic state-update operator (any callable
z -> z'), so they apply to both the trained solver and hand-built
synthetic maps; ``reasoner_operator`` adapts a model + input into such a
callable over stacked latent pairs.
"""

from __future__ import annotations

import csv

import numpy as np

from .model import IterativeReasoner, LatentPair, decode
from .rng import RngStream
from .tensor import Tensor, no_grad

POWER_ITER_TOL = 1e-8
POWER_ITER_MAX = 1000


def fixed_point_residual(op, z: np.ndarray) -> float:
    """||op(z) - z||: one extra operator evaluation, Euclidean norm."""
    z = np.asarray(z, dtype=np.float64)
    return float(np.linalg.norm(np.asarray(op(z), dtype=np.float64) - z))


def rollout_residual_trace(states) -> np.ndarray:
    """Consecutive-state norms ||z_t - z_(t-1)|| along a trajectory."""
    if len(states) < 2:
        raise ValueError("trajectory needs at least 2 states")
    flat = [np.asarray(s, dtype=np.float64).reshape(-1) for s in states]
    return np.array([np.linalg.norm(b - a) for a, b in zip(flat, flat[1:])])


def margin_from_logits(logits: np.ndarray, targets: np.ndarray) -> float:
    """Min over positions of (target logit - best competing logit).

    Positive iff the greedy decode matches the target everywhere.
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets)
    flat = logits.reshape(-1, logits.shape[-1])
    tgt = targets.reshape(-1)
    n = flat.shape[0]
    target_scores = flat[np.arange(n), tgt]
    masked = flat.copy()
    masked[np.arange(n), tgt] = -np.inf
    competitors = masked.max(axis=-1)
    return float(np.min(target_scores - competitors))


def output_margin(model: IterativeReasoner, z_h, targets) -> float:
    """Margin of the decoded output at a latent state."""
    if not isinstance(z_h, Tensor):
        z_h = Tensor._wrap(np.asarray(z_h, dtype=np.float32), False)
    if z_h.data.ndim == 2:
        z_h = Tensor._wrap(z_h.data[None], False)
    with no_grad():
        logits = model.lm_head(z_h).data
    return margin_from_logits(logits, targets)


def contraction_probe(op, center: np.ndarray, n_pairs: int, radius: float,
                      rng: RngStream) -> float:
    """Empirical lower bound on the local Lipschitz constant near ``center``:
    max over sampled nearby pairs of ||op(z1)-op(z2)|| / ||z1-z2||."""
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    center = np.asarray(center, dtype=np.float64)
    best = 0.0
    for _ in range(n_pairs):
        z1 = center + radius * rng.normal(center.shape).astype(np.float64)
        z2 = center + radius * rng.normal(center.shape).astype(np.float64)
        gap = np.linalg.norm(z1 - z2)
        if gap < 1e-12:
            continue  # degenerate pair
        num = np.linalg.norm(np.asarray(op(z1), dtype=np.float64)
                             - np.asarray(op(z2), dtype=np.float64))
        best = max(best, num / gap)
    return float(best)


def reasoner_operator(model: IterativeReasoner, tokens: np.ndarray):
    """Adapt the model into a deterministic operator over stacked latent
    pairs: flat state [z_H; z_L] -> one undamped, noiseless outer step."""
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None]
    cfg = model.config
    shape = (tokens.shape[0], cfg.seq_len, cfg.hidden)
    with no_grad():
        x_emb = model.embed(tokens)

    def op(flat: np.ndarray) -> np.ndarray:
        z = np.asarray(flat, dtype=np.float32).reshape(2, *shape)
        pair = LatentPair(Tensor._wrap(z[0], False), Tensor._wrap(z[1], False))
        with no_grad():
            out = model.outer_step(pair, x_emb, 0.0, 0.0, None)
        return np.stack([out.z_h.data, out.z_l.data]).reshape(-1)

    return op


# ---------------------------------------------------------------------------
# PCA export via power iteration


def power_iteration_components(states: np.ndarray, k: int = 2,
                               tol: float = POWER_ITER_TOL,
                               max_iter: int = POWER_ITER_MAX,
                               seed: int = 0):
    """Top-k principal directions of mean-centered ``states`` (n, d) by
    power iteration with deflation.

    Returns (eigenvalues, components (k_found, d), n_found); ``n_found``
    drops below ``k`` on rank-deficient input.
    """
    states = np.asarray(states, dtype=np.float64)
    n, d = states.shape
    centered = states - states.mean(axis=0, keepdims=True)
    rng = RngStream(seed, "pca")
    comps, eigs = [], []
    scale = float(np.abs(centered).max()) or 1.0

    def matvec(v):
        w = centered @ v
        u = centered.T @ w / n
        for lam, c in zip(eigs, comps):
            u -= lam * c * (c @ v)
        return u

    for _ in range(k):
        v = rng.normal((d,)).astype(np.float64)
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(max_iter):
            u = matvec(v)
            lam = float(np.linalg.norm(u))
            if lam <= tol * scale ** 2:
                lam = 0.0
                break
            u /= lam
            if min(np.linalg.norm(u - v), np.linalg.norm(u + v)) < tol:
                v = u
                break
            v = u
        if lam == 0.0:
            break  # rank deficient: fewer components than requested
        comps.append(v)
        eigs.append(lam)
    return np.array(eigs), np.array(comps), len(comps)


def project_trajectories(trajectories, out_path, seed: int = 0) -> dict:
    """Project trajectory states to the top-2 principal directions and
    write (traj, step, pc1, pc2, residual, correct) rows.

    ``trajectories`` is a sequence of dicts with keys ``traj`` (id),
    ``states`` (list of state vectors), ``residuals`` (one per state, the
    step's incoming residual; first entry may be nan) and ``correct``.
    """
    all_states = np.concatenate(
        [np.asarray(t["states"], dtype=np.float64).reshape(len(t["states"]), -1)
         for t in trajectories])
    if all_states.shape[0] < 3:
        raise ValueError("need at least 3 states to project")
    eigs, comps, n_found = power_iteration_components(all_states, k=2,
                                                      seed=seed)
    mean = all_states.mean(axis=0, keepdims=True)
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["traj", "step", "pc1", "pc2", "residual", "correct"])
        for t in trajectories:
            states = np.asarray(t["states"], dtype=np.float64)
            states = states.reshape(states.shape[0], -1) - mean
            proj = states @ comps.T if n_found else np.zeros((len(states), 0))
            for step in range(states.shape[0]):
                pc1 = proj[step, 0] if n_found >= 1 else 0.0
                pc2 = proj[step, 1] if n_found >= 2 else 0.0
                w.writerow([t["traj"], step, f"{pc1:.8g}", f"{pc2:.8g}",
                            f"{t['residuals'][step]:.8g}",
                            int(t["correct"])])
    return {"eigenvalues": eigs.tolist(), "components": comps,
            "n_components": n_found, "rank_deficient": n_found < 2}


def collect_trajectories(model: IterativeReasoner, inputs: np.ndarray,
                         targets: np.ndarray, depth: int, restarts: int,
                         streams, beta: float = 0.0,
                         max_instances: int | None = None) -> list[dict]:
    """Roll out and keep per-step z_H states for projection/diagnostics."""
    n = inputs.shape[0] if max_instances is None else min(
        max_instances, inputs.shape[0])
    trajs = []
    for i in range(n):
        for j in range(restarts):
            s = streams.get(f"restart.{i}.{j}")
            cfg = model.config
            zh = s.normal((1, cfg.seq_len, cfg.hidden), scale=cfg.init_scale_h)
            zl = s.normal((1, cfg.seq_len, cfg.hidden), scale=cfg.init_scale_l)
            pair = LatentPair(Tensor._wrap(zh, False), Tensor._wrap(zl, False))
            with no_grad():
                x_emb = model.embed(inputs[i][None])
                states = [pair.z_h.data.reshape(-1).copy()]
                residuals = [float("nan")]
                for _ in range(depth):
                    prev = pair.z_h.data
                    pair = model.outer_step(pair, x_emb, model.config.damping,
                                            beta, s if beta > 0 else None)
                    states.append(pair.z_h.data.reshape(-1).copy())
                    residuals.append(float(np.linalg.norm(
                        pair.z_h.data.astype(np.float64) - prev)))
                pred = decode(model.lm_head(pair.z_h))[0]
            trajs.append({"traj": f"{i}.{j}", "states": states,
                          "residuals": residuals,
                          "correct": bool(np.array_equal(pred, targets[i]))})
    return trajs
