import numpy as np
import pytest

from latentloop.model import (DivergenceError, FeedforwardSolver,
                              IterativeReasoner, LatentPair, ModelConfig,
                              decode)
from latentloop.rng import RngStream
from latentloop.tensor import Tensor, backward, no_grad, tsum

RNG = np.random.default_rng(7)


def small_config(**kw):
    base = dict(vocab_size=11, seq_len=8, hidden=16, n_blocks=1,
                mixer="mlp_mixer", h_cycles=2, l_cycles=2, outer_steps=3,
                damping=0.0, noise_scale=0.0, mlp_expansion=2,
                token_expansion=2)
    base.update(kw)
    return ModelConfig(**base)


def make_model(seed=0, **kw):
    return IterativeReasoner(small_config(**kw), RngStream(seed, "params"))


def rand_pair(model, batch=2, seed=3):
    rng = np.random.default_rng(seed)
    shape = (batch, model.config.seq_len, model.config.hidden)
    return LatentPair(
        Tensor(rng.standard_normal(shape).astype(np.float32) * 0.5),
        Tensor(rng.standard_normal(shape).astype(np.float32) * 0.5))


class TestConfig:
    def test_equivalent_layers_sudoku_config(self):
        cfg = ModelConfig(vocab_size=11, seq_len=81, hidden=32, n_blocks=2,
                          h_cycles=3, l_cycles=6)
        assert cfg.equivalent_layers == 42

    def test_attention_head_divisibility(self):
        with pytest.raises(ValueError):
            ModelConfig(vocab_size=5, seq_len=4, hidden=10,
                        mixer="self_attention", n_heads=4)

    def test_bad_mixer(self):
        with pytest.raises(ValueError):
            small_config(mixer="conv")

    def test_roundtrip_dict(self):
        cfg = small_config()
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestEmbed:
    def test_pad_sequence_constant_rows(self):
        model = make_model()
        x = model.embed(np.zeros((1, 8), dtype=np.int64)).data
        assert np.all(x == x[0, 0])

    def test_deterministic(self):
        model = make_model()
        toks = RNG.integers(0, 11, size=(1, 8))
        assert np.array_equal(model.embed(toks).data, model.embed(toks).data)

    def test_out_of_vocab(self):
        model = make_model()
        with pytest.raises(IndexError):
            model.embed(np.array([[0, 1, 2, 3, 4, 5, 6, 11]]))


class TestBlockForward:
    @pytest.mark.parametrize("mixer", ["mlp_mixer", "self_attention"])
    def test_shape_preserved(self, mixer):
        model = make_model(mixer=mixer, n_heads=2)
        pair = rand_pair(model)
        out = model.block_forward(pair.z_h, pair.z_l)
        assert out.shape == pair.z_h.shape

    def test_mixer_uses_positions(self):
        # permuting sequence positions must NOT commute for random weights
        model = make_model()
        h = rand_pair(model, batch=1).z_h
        cond = Tensor(np.zeros_like(h.data))
        out = model.block_forward(h, cond).data
        perm = RNG.permutation(model.config.seq_len)
        h_p = Tensor(h.data[:, perm])
        out_p = model.block_forward(h_p, cond).data
        assert not np.allclose(out[:, perm], out_p, atol=1e-5)

    def test_gradcheck_through_block(self):
        # finite differences on an independent f64 replica of the block
        model = make_model(seed=5)
        cfg = model.config
        h = RNG.standard_normal((1, cfg.seq_len, cfg.hidden)).astype(np.float32) * 0.3
        cond = RNG.standard_normal(h.shape).astype(np.float32) * 0.3
        th = Tensor(h, requires_grad=True)
        backward(tsum(model.block_forward(th, Tensor(cond))))
        g = th.grad.copy()

        p64 = {k: v.data.astype(np.float64) for k, v in model.params.items()}

        def ref_block(x):
            def rms(a):
                return a / np.sqrt((a * a).mean(-1, keepdims=True) + cfg.rms_eps)

            def gelu64(a):
                u = np.sqrt(2 / np.pi) * (a + 0.044715 * a ** 3)
                return 0.5 * a * (1 + np.tanh(u))

            x = x + cond.astype(np.float64)
            b, s, d = x.shape
            y = x.transpose(0, 2, 1).reshape(b * d, s)
            y = gelu64(y @ p64["block0.tok1.w"] + p64["block0.tok1.b"])
            y = y @ p64["block0.tok2.w"] + p64["block0.tok2.b"]
            x = rms(x + y.reshape(b, d, s).transpose(0, 2, 1))
            y = x.reshape(b * s, d)
            y = gelu64(y @ p64["block0.mlp1.w"] + p64["block0.mlp1.b"])
            y = y @ p64["block0.mlp2.w"] + p64["block0.mlp2.b"]
            return rms(x + y.reshape(b, s, d))

        fd = np.zeros_like(h, dtype=np.float64)
        flat_h = h.astype(np.float64)
        it = np.nditer(flat_h, flags=["multi_index"])
        eps = 1e-3
        while not it.finished:
            idx = it.multi_index
            orig = flat_h[idx]
            flat_h[idx] = orig + eps
            fp = ref_block(flat_h).sum()
            flat_h[idx] = orig - eps
            fm = ref_block(flat_h).sum()
            flat_h[idx] = orig
            fd[idx] = (fp - fm) / (2 * eps)
            it.iternext()
        err = np.linalg.norm(g - fd) / np.linalg.norm(fd)
        assert err < 1e-3


class TestIterStep:
    def test_raw_update_reduction(self):
        # damping=0, noise=0 equals one raw operator application, bitwise
        model = make_model()
        pair = rand_pair(model)
        cond = Tensor(np.zeros_like(pair.z_h.data))
        raw = model.block_forward(pair.z_h, cond).data
        stepped = model.iter_step(pair.z_h, cond, 0.0, 0.0, None).data
        assert np.array_equal(raw, stepped)

    def test_full_damping_freezes(self):
        model = make_model()
        pair = rand_pair(model)
        cond = Tensor(np.zeros_like(pair.z_h.data))
        out = model.iter_step(pair.z_h, cond, 1.0, 0.0, None).data
        assert np.array_equal(out, pair.z_h.data)

    def test_noise_replay(self):
        model = make_model()
        pair = rand_pair(model)
        cond = Tensor(np.zeros_like(pair.z_h.data))
        a = model.iter_step(pair.z_h, cond, 0.1, 0.05, RngStream(9, "noise")).data
        b = model.iter_step(pair.z_h, cond, 0.1, 0.05, RngStream(9, "noise")).data
        c = model.iter_step(pair.z_h, cond, 0.1, 0.05, RngStream(10, "noise")).data
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)


class TestLatentLoop:
    def test_call_count_single_cycles(self):
        # L=1, H=1, damping=0: exactly two block_forward evaluations
        model = make_model(l_cycles=1, h_cycles=1)
        calls = []
        orig = model.block_forward

        def counting(h, cond):
            calls.append(1)
            return orig(h, cond)

        model.block_forward = counting
        pair = rand_pair(model)
        x = Tensor(np.zeros_like(pair.z_h.data))
        model.latent_loop(pair, x, 0.0, 0.0, None)
        assert len(calls) == 2

    def test_full_damping_fixes_pair(self):
        model = make_model()
        pair = rand_pair(model)
        x = Tensor(np.zeros_like(pair.z_h.data))
        out = model.latent_loop(pair, x, 1.0, 0.0, None)
        assert np.array_equal(out.z_h.data, pair.z_h.data)
        assert np.array_equal(out.z_l.data, pair.z_l.data)


class TestTruncatedUnroll:
    def test_trace_length_is_t(self):
        model = make_model()
        pair = rand_pair(model)
        x = model.embed(RNG.integers(0, 11, size=(2, 8)))
        for t in (1, 2, 5):
            out = model.truncated_unroll(pair, x, outer_steps=t)
            assert len(out.residual_trace) == t

    def test_t1_tracks_gradients(self):
        model = make_model()
        pair = rand_pair(model)
        x = model.embed(RNG.integers(0, 11, size=(2, 8)))
        out = model.truncated_unroll(pair, x, outer_steps=1)
        backward(tsum(out.logits))
        assert model.params["lm.w"].grad is not None
        assert model.params["block0.mlp1.w"].grad is not None

    def test_truncation_contract_bitwise(self):
        # grad from T=5 equals grad from T=1 seeded with the step-4 carry
        model = make_model(seed=11)
        toks = RNG.integers(0, 11, size=(2, 8))
        pair0 = model.init_pair(2, randomize=True, stream=RngStream(4, "init"))

        x = model.embed(toks)
        out5 = model.truncated_unroll(pair0, x, outer_steps=5)
        backward(tsum(out5.logits))
        grads5 = {k: p.grad.copy() for k, p in model.params.items()
                  if p.grad is not None}
        for p in model.params.values():
            p.grad = None

        with no_grad():
            carry = pair0
            x2 = model.embed(toks)
            for _ in range(4):
                carry = model.outer_step(carry, x2, 0.0, 0.0, None)
        x3 = model.embed(toks)
        out1 = model.truncated_unroll(carry.detach(), x3, outer_steps=1)
        backward(tsum(out1.logits))
        for k, g in grads5.items():
            assert np.array_equal(g, model.params[k].grad), k

    def test_divergence_error_names_step(self):
        model = make_model()
        bad = np.zeros((1, 8, 16), dtype=np.float32)
        bad[0, 0, 0] = np.nan
        pair = LatentPair(Tensor._wrap(bad, False), Tensor._wrap(bad.copy(), False))
        x = model.embed(np.zeros((1, 8), dtype=np.int64))
        with np.errstate(invalid="ignore"), pytest.raises(DivergenceError) as exc:
            model.truncated_unroll(pair, x, outer_steps=3)
        assert exc.value.step == 1

    def test_fp_residual_requested(self):
        model = make_model()
        pair = rand_pair(model)
        x = model.embed(RNG.integers(0, 11, size=(2, 8)))
        out = model.truncated_unroll(pair, x, outer_steps=2,
                                     compute_fp_residual=True)
        assert out.fp_residual.shape == (2,)
        assert np.all(out.fp_residual >= 0)


class TestHeads:
    def test_zero_state_zero_bias_heads(self):
        model = make_model()
        z = Tensor(np.zeros((1, 8, 16), dtype=np.float32))
        assert np.all(model.lm_head(z).data == 0)
        assert np.all(model.q_head(z).data == 0)

    def test_lm_head_shape(self):
        model = make_model()
        z = rand_pair(model).z_h
        assert model.lm_head(z).shape == (2, 8, 11)

    def test_q_head_permutation_invariant(self):
        model = make_model()
        z = rand_pair(model, batch=1).z_h
        perm = RNG.permutation(8)
        q1 = model.q_head(z).data
        q2 = model.q_head(Tensor(z.data[:, perm])).data
        assert np.allclose(q1, q2, atol=1e-5)


class TestDeterminism:
    def test_identical_seeds_identical_unrolls(self):
        toks = RNG.integers(0, 11, size=(2, 8))
        outs = []
        for _ in range(2):
            model = make_model(seed=21, damping=0.05, noise_scale=0.01)
            pair = model.init_pair(2, randomize=True,
                                   stream=RngStream(5, "init"))
            x = model.embed(toks)
            out = model.truncated_unroll(pair, x, outer_steps=3,
                                         noise_stream=RngStream(6, "noise"))
            outs.append(out)
        assert np.array_equal(outs[0].logits.data, outs[1].logits.data)
        assert np.array_equal(outs[0].q_logit.data, outs[1].q_logit.data)
        assert np.array_equal(np.stack(outs[0].residual_trace),
                              np.stack(outs[1].residual_trace))


class TestFeedforward:
    def test_forward_shape_and_training_params(self):
        cfg = small_config()
        ff = FeedforwardSolver(cfg, depth=3, init_stream=RngStream(1, "params"))
        toks = RNG.integers(0, 11, size=(2, 8))
        logits = ff.forward(toks)
        assert logits.shape == (2, 8, 11)
        backward(tsum(logits))
        assert ff.params["ff2.mlp1.w"].grad is not None

    def test_depth_matched_distinct_blocks(self):
        cfg = small_config()
        ff = FeedforwardSolver(cfg, depth=4, init_stream=RngStream(1, "params"))
        assert not np.array_equal(ff.params["ff0.mlp1.w"].data,
                                  ff.params["ff1.mlp1.w"].data)


def test_decode_argmax():
    logits = np.zeros((1, 3, 4), dtype=np.float32)
    logits[0, 0, 2] = 5
    logits[0, 1, 0] = 1
    logits[0, 2, 3] = 9
    assert np.array_equal(decode(logits), [[2, 0, 3]])
