"""Forward-pass contracts: shapes, adapter identity, permutation invariance,
masking, the training objective, and a golden-logits regression file."""

import json
from pathlib import Path

import numpy as np
import pytest

from styletune import autodiff as ad
from styletune import model as md
from styletune.adapters import AdapterConfig, init_adapter

GOLDEN = Path(__file__).parent / "golden" / "tiny_model_logits.json"

TINY = md.ModelConfig(
    n_layer=2, d_model=16, n_head=2, d_mlp=32, d_text=8, grid=4, vocab_visual=8, text_vocab=12
)


@pytest.fixture(scope="module")
def tiny_weights():
    return md.init_weights(TINY, seed=42)


def tiny_inputs():
    rng = np.random.default_rng(7)
    v = rng.integers(0, TINY.vocab_visual, size=TINY.seq_len)
    v[3] = TINY.mask_id  # include a MASK token
    e = rng.normal(size=(4, TINY.d_text))
    return v, e


def test_logit_shape_and_no_mask_column(tiny_weights):
    v, e = tiny_inputs()
    out = md.forward(v, e, tiny_weights, TINY)
    assert out.data.shape == (TINY.seq_len, TINY.vocab_visual)  # K columns, no MASK


def test_forward_validates_inputs(tiny_weights):
    v, e = tiny_inputs()
    with pytest.raises(ValueError):
        md.forward(v[:5], e, tiny_weights, TINY)
    bad = v.copy()
    bad[0] = TINY.mask_id + 1
    with pytest.raises(ValueError):
        md.forward(bad, e, tiny_weights, TINY)


@pytest.mark.parametrize("shared", [True, False])
def test_zero_up_adapter_is_bit_identical(tiny_weights, shared):
    v, e = tiny_inputs()
    plain = md.forward(v, e, tiny_weights, TINY).data
    adp = init_adapter(AdapterConfig(TINY.d_model, 3, TINY.n_layer, shared), seed=9)
    with_adp = md.forward(v, e, tiny_weights, TINY, adapter=adp).data
    assert np.max(np.abs(plain - with_adp)) == 0.0


def test_text_row_permutation_preserves_logits(tiny_weights):
    v, e = tiny_inputs()
    base = md.forward(v, e, tiny_weights, TINY).data
    perm = md.forward(v, e[::-1].copy(), tiny_weights, TINY).data
    np.testing.assert_allclose(perm, base, atol=1e-12)


def test_batched_forward_matches_single(tiny_weights):
    rng = np.random.default_rng(3)
    vb = rng.integers(0, TINY.vocab_visual, size=(6, TINY.seq_len))
    e = rng.normal(size=(3, TINY.d_text))
    with ad.no_grad():
        batched = md.forward_batch(vb, e, tiny_weights, TINY).data
        for i in range(6):
            single = md.forward(vb[i], e, tiny_weights, TINY).data
            np.testing.assert_allclose(batched[i], single, atol=1e-12)


def test_golden_logits_stable(tiny_weights):
    v, e = tiny_inputs()
    out = md.forward(v, e, tiny_weights, TINY).data
    if not GOLDEN.exists():  # recorded once from the first verified build
        GOLDEN.parent.mkdir(exist_ok=True)
        GOLDEN.write_text(json.dumps({"logits": out.tolist()}))
    want = np.array(json.loads(GOLDEN.read_text())["logits"])
    np.testing.assert_allclose(out, want, atol=1e-10)


def test_mask_ratio_schedule_endpoints():
    assert md.mask_ratio_schedule(0.0) == 1.0
    assert abs(md.mask_ratio_schedule(1.0)) < 1e-12
    assert md.mask_ratio_schedule(0.5) == pytest.approx(np.sqrt(2) / 2, abs=1e-12)
    with pytest.raises(ValueError):
        md.mask_ratio_schedule(1.5)


def test_mask_tokens_counts_and_positions():
    rng = np.random.default_rng(0)
    v = np.arange(64) % 7
    for ratio, want in ((1.0, 64), (0.5, 32), (0.01, 1), (0.26, 17)):
        masked, mask = md.mask_tokens(v, ratio, rng, mask_id=99)
        assert mask.sum() == want  # ceil(ratio * 64)
        assert np.all(masked[mask] == 99)
        assert np.array_equal(masked[~mask], v[~mask])
    with pytest.raises(ValueError):
        md.mask_tokens(v, 0.0, rng, 99)
    with pytest.raises(ValueError):
        md.mask_tokens(v, 1.2, rng, 99)


def test_mask_tokens_uniform_coverage():
    rng = np.random.default_rng(1)
    hits = np.zeros(16)
    for _ in range(2000):
        _, mask = md.mask_tokens(np.zeros(16, dtype=int), 0.25, rng, 5)
        hits += mask
    # 2000 draws of 4/16 positions: each position expects 500 hits.
    assert 380 < hits.min() and hits.max() < 620


def test_mvtm_loss_uniform_logits_value():
    logits = ad.Tensor(np.zeros((10, 4)))
    mask = np.zeros(10, dtype=bool)
    mask[[1, 4, 7]] = True
    loss = md.mvtm_loss(logits, np.zeros(10, dtype=int), mask)
    assert loss.item() == pytest.approx(np.log(4.0), abs=1e-6)


def test_mvtm_loss_ignores_unmasked_logits():
    rng = np.random.default_rng(5)
    base = rng.normal(size=(12, 6))
    targets = rng.integers(0, 6, size=12)
    mask = np.zeros(12, dtype=bool)
    mask[[0, 5, 9]] = True
    a = md.mvtm_loss(ad.Tensor(base), targets, mask).item()
    noisy = base.copy()
    noisy[~mask] += rng.normal(size=(9, 6)) * 100
    b = md.mvtm_loss(ad.Tensor(noisy), targets, mask).item()
    assert a == b  # bit-identical: unmasked rows never enter the graph


def test_mvtm_loss_requires_masked_position():
    with pytest.raises(ValueError):
        md.mvtm_loss(ad.Tensor(np.zeros((4, 3))), np.zeros(4, dtype=int), np.zeros(4, dtype=bool))


def test_mvtm_loss_batch_matches_singles():
    rng = np.random.default_rng(8)
    B, S, K = 3, 10, 5
    logits = rng.normal(size=(B, S, K))
    targets = rng.integers(0, K, size=(B, S))
    masks = rng.random((B, S)) < 0.4
    masks[:, 0] = True  # ensure non-empty
    batched = md.mvtm_loss_batch(ad.Tensor(logits), targets, masks).item()
    singles = [
        md.mvtm_loss(ad.Tensor(logits[i]), targets[i], masks[i]).item() for i in range(B)
    ]
    assert batched == pytest.approx(np.mean(singles), abs=1e-12)
