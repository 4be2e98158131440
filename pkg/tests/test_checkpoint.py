import json

import numpy as np
import pytest

from latentloop.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from latentloop.model import IterativeReasoner, ModelConfig
from latentloop.rng import RngStream, StreamSet

RNG = np.random.default_rng(0)


def test_roundtrip_arrays_and_metadata(tmp_path):
    arrays = {
        "w": RNG.standard_normal((3, 4)).astype(np.float32),
        "ema/w": RNG.standard_normal((3, 4)).astype(np.float32),
        "opt.m/w": np.zeros((3, 4), dtype=np.float32),
    }
    streams = StreamSet(7)
    streams.get("noise").normal((5,))
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, arrays, {"hidden": 16}, streams.states(), step=42,
                    extra={"note": "x"})
    ck = load_checkpoint(path)
    assert ck.step == 42
    assert ck.config == {"hidden": 16}
    assert ck.extra == {"note": "x"}
    for k in arrays:
        assert np.array_equal(ck.arrays[k], arrays[k])
    assert ck.params() == {"w": pytest.approx(arrays["w"])} or \
        np.array_equal(ck.params()["w"], arrays["w"])
    assert np.array_equal(ck.ema()["w"], arrays["ema/w"])


def test_header_is_readable_json_first_line(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, {"w": np.ones(2, dtype=np.float32)}, {}, {}, 0)
    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
    assert header["format"] == "latentloop-checkpoint"
    t = header["tensors"][0]
    assert t["name"] == "w" and t["shape"] == [2] and t["offset"] == 0


def test_payload_is_little_endian_f32(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, {"w": np.array([1.0, -2.5], dtype=np.float32)},
                    {}, {}, 0)
    with open(path, "rb") as fh:
        fh.readline()
        raw = fh.read()
    assert np.array_equal(np.frombuffer(raw, dtype="<f4"), [1.0, -2.5])


def test_rng_state_restores_exact_stream(tmp_path):
    streams = StreamSet(3)
    s = streams.get("noise")
    s.normal((4,))
    saved = streams.states()
    expected = s.normal((6,))

    fresh = StreamSet(3)
    fresh.restore(saved)
    assert np.array_equal(fresh.get("noise").normal((6,)), expected)


def test_stream_ids_distinct_by_name_and_seed():
    a = RngStream(0, "init")
    b = RngStream(0, "noise")
    c = RngStream(1, "init")
    assert len({a.stream_id, b.stream_id, c.stream_id}) == 3


def test_bad_file_rejected(tmp_path):
    path = tmp_path / "junk"
    path.write_bytes(b"\x00\x01binary")
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_model_checkpoint_reload_identical_forward(tmp_path):
    cfg = ModelConfig(vocab_size=11, seq_len=8, hidden=16, n_blocks=1,
                      h_cycles=1, l_cycles=1, mlp_expansion=2,
                      token_expansion=2)
    model = IterativeReasoner(cfg, RngStream(5, "params"))
    toks = RNG.integers(0, 11, size=(2, 8))
    pair = model.init_pair(2, False)
    out = model.truncated_unroll(pair, model.embed(toks), outer_steps=2,
                                 damping=0.0, noise_scale=0.0)

    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model.param_arrays(), cfg.to_dict(), {}, 0)
    ck = load_checkpoint(path)
    model2 = IterativeReasoner(ModelConfig.from_dict(ck.config),
                               RngStream(99, "params"))
    model2.load_param_arrays(ck.arrays)
    pair2 = model2.init_pair(2, False)
    out2 = model2.truncated_unroll(pair2, model2.embed(toks), outer_steps=2,
                                   damping=0.0, noise_scale=0.0)
    assert np.array_equal(out.logits.data, out2.logits.data)
