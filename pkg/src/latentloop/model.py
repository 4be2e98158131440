"""Weight-tied iterative solver: token embedding, mixer+MLP blocks, the
hierarchical two-latent loop, damped/noisy iteration steps, truncated
unrolls with detached carry, and the output/halting heads.

One *outer step* applies ``h_cycles`` latent loops; each latent loop runs
``l_cycles`` low-level updates conditioned on (input embedding + z_H) and
then one high-level update conditioned on z_L. The per-outer-step
equivalent-layer count is therefore n_blocks * h_cycles * (l_cycles + 1).

The iteration update is

    z <- z + (1 - damping) * (f(z, cond) - z) + noise_scale * eps

with eps ~ N(0, I) drawn from a named stream; damping = 0 and
noise_scale = 0 reduce, bitwise, to the raw update z <- f(z, cond).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .rng import RngStream
from .tensor import (
    Tensor,
    add,
    embedding_lookup,
    gelu,
    matmul,
    no_grad,
    reshape,
    rms_norm,
    scale,
    softmax,
    sub,
    tmean,
    transpose,
)

MIXERS = ("mlp_mixer", "self_attention")


class DivergenceError(Exception):
    """Raised when a latent state turns non-finite; carries the step index."""

    def __init__(self, step: int, what: str = "latent state"):
        self.step = step
        super().__init__(f"non-finite {what} at outer step {step}")


@dataclass
class ModelConfig:
    vocab_size: int
    seq_len: int
    hidden: int
    n_blocks: int = 2
    mixer: str = "mlp_mixer"
    n_heads: int = 4
    h_cycles: int = 3
    l_cycles: int = 6
    outer_steps: int = 4          # T: outer steps per tracked-unroll segment
    damping: float = 0.05
    noise_scale: float = 0.01
    init_scale_h: float = 1.0
    init_scale_l: float = 1.0
    mlp_expansion: int = 4
    token_expansion: int = 4
    rms_eps: float = 1e-6

    def __post_init__(self):
        if self.mixer not in MIXERS:
            raise ValueError(f"mixer must be one of {MIXERS}, got {self.mixer!r}")
        if self.mixer == "self_attention" and self.hidden % self.n_heads != 0:
            raise ValueError(f"hidden={self.hidden} not divisible by "
                             f"n_heads={self.n_heads}")
        if self.outer_steps < 1 or self.h_cycles < 1 or self.l_cycles < 1:
            raise ValueError("outer_steps, h_cycles and l_cycles must be >= 1")
        if not 0.0 <= self.damping < 1.0:
            raise ValueError("damping must lie in [0, 1)")
        if self.noise_scale < 0 or self.init_scale_h < 0 or self.init_scale_l < 0:
            raise ValueError("noise and init scales must be >= 0")

    @property
    def equivalent_layers(self) -> int:
        """Real layer applications per outer step."""
        return self.n_blocks * self.h_cycles * (self.l_cycles + 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class LatentPair:
    z_h: Tensor
    z_l: Tensor

    def detach(self) -> "LatentPair":
        return LatentPair(self.z_h.detach(), self.z_l.detach())


@dataclass
class UnrollOutput:
    logits: Tensor                      # (batch, seq, vocab)
    q_logit: Tensor                     # (batch,)
    pair: LatentPair
    residual_trace: list = field(default_factory=list)  # per outer step: (batch,) |dz_H|
    fp_residual: Optional[np.ndarray] = None            # (batch,) |f(z)-z| on z_H


# ---------------------------------------------------------------------------
# parameter helpers


def _init_linear(params, name, fan_in, fan_out, stream):
    w = stream.normal((fan_in, fan_out), scale=1.0 / math.sqrt(fan_in))
    params[f"{name}.w"] = Tensor(w, requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(fan_out, dtype=np.float32),
                                 requires_grad=True)


def _linear(params, name, x: Tensor) -> Tensor:
    return add(matmul(x, params[f"{name}.w"]), params[f"{name}.b"])


def _init_block(params, prefix, cfg: ModelConfig, stream):
    if cfg.mixer == "mlp_mixer":
        s = cfg.seq_len
        _init_linear(params, f"{prefix}.tok1", s, s * cfg.token_expansion, stream)
        _init_linear(params, f"{prefix}.tok2", s * cfg.token_expansion, s, stream)
    else:
        h = cfg.hidden
        for name in ("q", "k", "v", "o"):
            _init_linear(params, f"{prefix}.att_{name}", h, h, stream)
    _init_linear(params, f"{prefix}.mlp1", cfg.hidden,
                 cfg.hidden * cfg.mlp_expansion, stream)
    _init_linear(params, f"{prefix}.mlp2", cfg.hidden * cfg.mlp_expansion,
                 cfg.hidden, stream)


def _token_mix(params, prefix, x: Tensor, cfg) -> Tensor:
    b, s, h = x.shape
    y = reshape(transpose(x, (0, 2, 1)), (b * h, s))
    y = _linear(params, f"{prefix}.tok2", gelu(_linear(params, f"{prefix}.tok1", y)))
    return transpose(reshape(y, (b, h, s)), (0, 2, 1))


def _attention(params, prefix, x: Tensor, cfg) -> Tensor:
    b, s, h = x.shape
    nh = cfg.n_heads
    dh = h // nh

    def split_heads(name):
        y = _linear(params, f"{prefix}.att_{name}", reshape(x, (b * s, h)))
        y = transpose(reshape(y, (b, s, nh, dh)), (0, 2, 1, 3))
        return reshape(y, (b * nh, s, dh))

    q, k, v = split_heads("q"), split_heads("k"), split_heads("v")
    scores = scale(matmul(q, transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
    ctx = matmul(softmax(scores), v)
    ctx = transpose(reshape(ctx, (b, nh, s, dh)), (0, 2, 1, 3))
    out = _linear(params, f"{prefix}.att_o", reshape(ctx, (b * s, h)))
    return reshape(out, (b, s, h))


def _apply_block(params, prefix, x: Tensor, cfg: ModelConfig) -> Tensor:
    if cfg.mixer == "mlp_mixer":
        mixed = _token_mix(params, prefix, x, cfg)
    else:
        mixed = _attention(params, prefix, x, cfg)
    x = rms_norm(add(x, mixed), cfg.rms_eps)
    b, s, h = x.shape
    y = reshape(x, (b * s, h))
    y = _linear(params, f"{prefix}.mlp2", gelu(_linear(params, f"{prefix}.mlp1", y)))
    return rms_norm(add(x, reshape(y, (b, s, h))), cfg.rms_eps)


def _row_norms(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = (a.astype(np.float64) - b.astype(np.float64)).reshape(a.shape[0], -1)
    return np.sqrt((d * d).sum(axis=1)).astype(np.float32)


def decode(logits: Tensor | np.ndarray) -> np.ndarray:
    """Greedy token decode: argmax over the vocab axis."""
    data = logits.data if isinstance(logits, Tensor) else logits
    return np.argmax(data, axis=-1)


class IterativeReasoner:
    """The shared update operator plus embedding and output heads."""

    def __init__(self, config: ModelConfig, init_stream: RngStream):
        self.config = config
        params: dict[str, Tensor] = {}
        emb = init_stream.normal((config.vocab_size, config.hidden),
                                 scale=1.0 / math.sqrt(config.hidden))
        params["embed"] = Tensor(emb, requires_grad=True)
        if config.mixer == "self_attention":
            pos = init_stream.normal((config.seq_len, config.hidden),
                                     scale=1.0 / math.sqrt(config.hidden))
            params["pos"] = Tensor(pos, requires_grad=True)
        for i in range(config.n_blocks):
            _init_block(params, f"block{i}", config, init_stream)
        _init_linear(params, "lm", config.hidden, config.vocab_size, init_stream)
        _init_linear(params, "q", config.hidden, 1, init_stream)
        self.params = params

    # -- parameter plumbing -------------------------------------------------

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def load_param_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            p.data = np.ascontiguousarray(arrays[k], dtype=np.float32)

    def with_params(self, arrays: dict[str, np.ndarray]) -> "IterativeReasoner":
        """Shallow evaluation view over a different parameter set (e.g. EMA)."""
        view = IterativeReasoner.__new__(IterativeReasoner)
        view.config = self.config
        view.params = {k: Tensor(arrays[k].astype(np.float32, copy=False))
                       for k in self.params}
        return view

    def n_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    # -- forward pieces -----------------------------------------------------

    def embed(self, tokens: np.ndarray) -> Tensor:
        """Scaled embedding lookup; tokens shaped (batch, seq)."""
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        x = scale(embedding_lookup(self.params["embed"], tokens),
                  math.sqrt(self.config.hidden))
        if self.config.mixer == "self_attention":
            x = add(x, self.params["pos"])
        return x

    def block_forward(self, h: Tensor, cond: Tensor) -> Tensor:
        x = add(h, cond)
        for i in range(self.config.n_blocks):
            x = _apply_block(self.params, f"block{i}", x, self.config)
        return x

    def iter_step(self, z: Tensor, cond: Tensor, damping: float,
                  noise_scale: float, noise_stream: RngStream | None) -> Tensor:
        f = self.block_forward(z, cond)
        if damping == 0.0:
            out = f  # exact raw update; z + 1*(f - z) would differ in f32
        else:
            out = add(z, scale(sub(f, z), 1.0 - damping))
        if noise_scale > 0.0:
            eps = noise_stream.normal(out.shape, scale=noise_scale)
            out = add(out, Tensor._wrap(eps, False))
        return out

    def latent_loop(self, pair: LatentPair, x_emb: Tensor, damping: float,
                    noise_scale: float, noise_stream) -> LatentPair:
        """One low-level cycle batch plus one high-level update."""
        z_h, z_l = pair.z_h, pair.z_l
        for _ in range(self.config.l_cycles):
            z_l = self.iter_step(z_l, add(x_emb, z_h), damping, noise_scale,
                                 noise_stream)
        z_h = self.iter_step(z_h, z_l, damping, noise_scale, noise_stream)
        return LatentPair(z_h, z_l)

    def outer_step(self, pair: LatentPair, x_emb: Tensor, damping: float,
                   noise_scale: float, noise_stream) -> LatentPair:
        for _ in range(self.config.h_cycles):
            pair = self.latent_loop(pair, x_emb, damping, noise_scale,
                                    noise_stream)
        return pair

    def truncated_unroll(self, pair: LatentPair, x_emb: Tensor,
                         outer_steps: int | None = None,
                         damping: float | None = None,
                         noise_scale: float | None = None,
                         noise_stream: RngStream | None = None,
                         compute_fp_residual: bool = False) -> UnrollOutput:
        """T-1 outer steps under a detached carry, then one tracked step.

        The residual trace holds one (batch,) entry per outer step with the
        step-to-step norm |z_H^k - z_H^(k-1)|; ``fp_residual``, when
        requested, holds the deterministic fixed-point residual |f(z)-z| on
        z_H at the final state.
        """
        cfg = self.config
        t = cfg.outer_steps if outer_steps is None else outer_steps
        lam = cfg.damping if damping is None else damping
        beta = cfg.noise_scale if noise_scale is None else noise_scale
        if t < 1:
            raise ValueError("outer_steps must be >= 1")
        if beta > 0.0 and noise_stream is None:
            raise ValueError("noise_scale > 0 needs a noise stream")

        trace: list[np.ndarray] = []

        def advance(p, step_idx):
            prev = p.z_h.data
            p = self.outer_step(p, x_emb, lam, beta, noise_stream)
            trace.append(_row_norms(p.z_h.data, prev))
            if not (np.all(np.isfinite(p.z_h.data))
                    and np.all(np.isfinite(p.z_l.data))):
                raise DivergenceError(step_idx)
            return p

        with no_grad():
            for k in range(t - 1):
                pair = advance(pair, k + 1)
        pair = advance(pair.detach(), t)

        logits = self.lm_head(pair.z_h)
        q_logit = self.q_head(pair.z_h)
        fp = None
        if compute_fp_residual:
            with no_grad():
                nxt = self.outer_step(pair, x_emb, 0.0, 0.0, None)
                fp = _row_norms(nxt.z_h.data, pair.z_h.data)
        return UnrollOutput(logits, q_logit, pair, trace, fp)

    def lm_head(self, z_h: Tensor) -> Tensor:
        b, s, h = z_h.shape
        y = _linear(self.params, "lm", reshape(z_h, (b * s, h)))
        return reshape(y, (b, s, self.config.vocab_size))

    def q_head(self, z_h: Tensor) -> Tensor:
        pooled = tmean(z_h, axis=1)  # (batch, hidden); permutation-invariant
        return reshape(_linear(self.params, "q", pooled), (z_h.shape[0],))

    def init_pair(self, batch: int, randomize: bool,
                  stream: RngStream | None = None,
                  sigma_h: float | None = None,
                  sigma_l: float | None = None) -> LatentPair:
        """Fresh latent pair: N(0, sigma I) draws when randomized, else zeros."""
        cfg = self.config
        shape = (batch, cfg.seq_len, cfg.hidden)
        if randomize:
            sh = cfg.init_scale_h if sigma_h is None else sigma_h
            sl = cfg.init_scale_l if sigma_l is None else sigma_l
            z_h = stream.normal(shape, scale=sh)
            z_l = stream.normal(shape, scale=sl)
        else:
            z_h = np.zeros(shape, dtype=np.float32)
            z_l = np.zeros(shape, dtype=np.float32)
        return LatentPair(Tensor._wrap(z_h, False), Tensor._wrap(z_l, False))


class FeedforwardSolver:
    """Depth-matched baseline: ``depth`` distinct blocks applied once."""

    def __init__(self, config: ModelConfig, depth: int, init_stream: RngStream):
        self.config = config
        self.depth = depth
        params: dict[str, Tensor] = {}
        emb = init_stream.normal((config.vocab_size, config.hidden),
                                 scale=1.0 / math.sqrt(config.hidden))
        params["embed"] = Tensor(emb, requires_grad=True)
        if config.mixer == "self_attention":
            pos = init_stream.normal((config.seq_len, config.hidden),
                                     scale=1.0 / math.sqrt(config.hidden))
            params["pos"] = Tensor(pos, requires_grad=True)
        for i in range(depth):
            _init_block(params, f"ff{i}", config, init_stream)
        _init_linear(params, "lm", config.hidden, config.vocab_size, init_stream)
        self.params = params

    def forward(self, tokens: np.ndarray) -> Tensor:
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        x = scale(embedding_lookup(self.params["embed"], tokens),
                  math.sqrt(self.config.hidden))
        if self.config.mixer == "self_attention":
            x = add(x, self.params["pos"])
        for i in range(self.depth):
            x = _apply_block(self.params, f"ff{i}", x, self.config)
        b, s, h = x.shape
        y = _linear(self.params, "lm", reshape(x, (b * s, h)))
        return reshape(y, (b, s, self.config.vocab_size))

    def n_params(self) -> int:
        return sum(p.data.size for p in self.params.values())
