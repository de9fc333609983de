"""Checkpoint serialization: byte-stable round-trips and hashing."""

import numpy as np
import pytest

from styletune import autodiff as ad
from styletune import checkpoint as ck
from styletune import model as md
from styletune.adapters import AdapterConfig, init_adapter

TINY = md.ModelConfig(
    n_layer=2, d_model=16, n_head=2, d_mlp=32, d_text=8, grid=4, vocab_visual=8, text_vocab=12
)


def test_model_round_trip(tmp_path):
    weights = md.init_weights(TINY, seed=0)
    path = tmp_path / "model.stck"
    ck.save_model(path, weights, TINY)
    loaded_w, loaded_cfg = ck.load_model(path)
    assert loaded_cfg == TINY
    assert set(loaded_w) == set(weights)
    for name, t in weights.items():
        assert np.array_equal(loaded_w[name].data, t.data)
        assert loaded_w[name].data.dtype == np.float64


def test_adapter_round_trip(tmp_path):
    cfg = AdapterConfig(d_emb=16, d_prj=4, n_layer=2, is_shared=True)
    adapter = init_adapter(cfg, seed=3)
    path = tmp_path / "adapter.stck"
    ck.save_adapter(path, adapter)
    loaded = ck.load_adapter(path)
    assert loaded.cfg == cfg
    for name, t in adapter.tensors.items():
        assert np.array_equal(loaded.tensors[name].data, t.data)


def test_serialization_is_byte_deterministic(tmp_path):
    weights = md.init_weights(TINY, seed=5)
    a, b = tmp_path / "a.stck", tmp_path / "b.stck"
    ck.save_model(a, weights, TINY)
    ck.save_model(b, weights, TINY)
    assert a.read_bytes() == b.read_bytes()


def test_hash_tracks_content():
    w1 = md.init_weights(TINY, seed=6)
    w2 = md.init_weights(TINY, seed=6)
    assert ck.hash_model(w1) == ck.hash_model(w2)
    w2["head.b"].data[0] += 1e-9
    assert ck.hash_model(w1) != ck.hash_model(w2)


def test_rejects_unknown_version(tmp_path):
    blob = ck.serialize_tensors({"x": np.zeros(2)}, meta={})
    header, _, payload = blob.partition(b"\n")
    doctored = header.replace(b'"version": 1', b'"version": 99') + b"\n" + payload
    path = tmp_path / "bad.stck"
    path.write_bytes(doctored)
    with pytest.raises(ValueError, match="version"):
        ck.load_tensors(path)


def test_loaded_model_reproduces_logits(tmp_path):
    weights = md.init_weights(TINY, seed=8)
    path = tmp_path / "model.stck"
    ck.save_model(path, weights, TINY)
    loaded_w, loaded_cfg = ck.load_model(path)
    rng = np.random.default_rng(9)
    v = rng.integers(0, TINY.vocab_visual, TINY.seq_len)
    v[5] = TINY.mask_id
    e = rng.normal(0.0, 0.5, (3, TINY.d_text))
    with ad.no_grad():
        a = md.forward(v, e, weights, TINY).data
        b = md.forward(v, e, loaded_w, loaded_cfg).data
    assert np.array_equal(a, b)
