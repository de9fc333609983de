"""Miniature masked image transformer with cross-attention text conditioning.

A pre-norm encoder over the flattened token grid: self-attention,
cross-attention into the prompt embedding rows, MLP.  Visual positions get
learned embeddings; text rows deliberately get none, so logits are invariant
to permuting the prompt rows.  The MASK token is an extra input embedding
row (id K) that the output head never predicts: the head has exactly K
columns.  Adapter sites sit after the cross-attention block and after the
MLP block of every layer.

The core runs batched (leading B axis) so training steps and samplers can
push many grids through one tape; the single-example ``forward`` is a batch
of one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .adapters import AdapterParams, apply_adapter, materialize_site


@dataclass(frozen=True)
class ModelConfig:
    n_layer: int = 4
    d_model: int = 128
    n_head: int = 4
    d_mlp: int = 256
    d_text: int = 32
    grid: int = 8  # token grid side; sequence length is grid**2
    vocab_visual: int = 128  # codebook size K; MASK is id K internally
    text_vocab: int = 64

    def __post_init__(self):
        if self.d_model % self.n_head:
            raise ValueError("d_model must divide evenly into heads")

    @property
    def seq_len(self) -> int:
        return self.grid * self.grid

    @property
    def mask_id(self) -> int:
        return self.vocab_visual


def init_weights(cfg: ModelConfig, seed: int = 0) -> dict:
    """Named parameter tensors; every array is float64 and seed-deterministic."""
    rng = np.random.default_rng(seed)
    std = 0.02

    def mk(*shape):
        return ad.param(rng.normal(0.0, std, size=shape))

    def zeros(*shape):
        return ad.param(np.zeros(shape))

    def ones(*shape):
        return ad.param(np.ones(shape))

    w = {
        "tok_emb": mk(cfg.vocab_visual + 1, cfg.d_model),  # + MASK row, trainable
        "pos_emb": mk(cfg.seq_len, cfg.d_model),
        "text_emb": ad.param(
            np.random.default_rng(seed + 1).normal(0.0, 0.5, (cfg.text_vocab, cfg.d_text))
        ),
        "ln_f.g": ones(cfg.d_model),
        "ln_f.b": zeros(cfg.d_model),
        "head.w": mk(cfg.d_model, cfg.vocab_visual),
        "head.b": zeros(cfg.vocab_visual),
    }
    for i in range(cfg.n_layer):
        p = f"layer{i}."
        w[p + "ln1.g"] = ones(cfg.d_model)
        w[p + "ln1.b"] = zeros(cfg.d_model)
        for n in ("wq", "wk", "wv", "wo"):
            w[p + "attn." + n] = mk(cfg.d_model, cfg.d_model)
        for n in ("bq", "bk", "bv", "bo"):
            w[p + "attn." + n] = zeros(cfg.d_model)
        w[p + "ln_ca.g"] = ones(cfg.d_model)
        w[p + "ln_ca.b"] = zeros(cfg.d_model)
        w[p + "cross.wq"] = mk(cfg.d_model, cfg.d_model)
        w[p + "cross.wk"] = mk(cfg.d_text, cfg.d_model)
        w[p + "cross.wv"] = mk(cfg.d_text, cfg.d_model)
        w[p + "cross.wo"] = mk(cfg.d_model, cfg.d_model)
        for n in ("bq", "bk", "bv", "bo"):
            w[p + "cross." + n] = zeros(cfg.d_model)
        w[p + "ln2.g"] = ones(cfg.d_model)
        w[p + "ln2.b"] = zeros(cfg.d_model)
        w[p + "mlp.w1"] = mk(cfg.d_model, cfg.d_mlp)
        w[p + "mlp.b1"] = zeros(cfg.d_mlp)
        w[p + "mlp.w2"] = mk(cfg.d_mlp, cfg.d_model)
        w[p + "mlp.b2"] = zeros(cfg.d_model)
    return w


def _attention(x, kv, w, prefix: str, n_head: int):
    """Multi-head attention; x: (B, S, D) queries, kv: (B, Sk, *) keys/values."""
    q = ad.add(ad.matmul(x, w[prefix + "wq"]), w[prefix + "bq"])
    k = ad.add(ad.matmul(kv, w[prefix + "wk"]), w[prefix + "bk"])
    v = ad.add(ad.matmul(kv, w[prefix + "wv"]), w[prefix + "bv"])
    B, S, D = q.shape
    Sk = k.shape[1]
    dh = D // n_head
    q = ad.transpose(ad.reshape(q, (B, S, n_head, dh)), (0, 2, 1, 3))
    k = ad.transpose(ad.reshape(k, (B, Sk, n_head, dh)), (0, 2, 1, 3))
    v = ad.transpose(ad.reshape(v, (B, Sk, n_head, dh)), (0, 2, 1, 3))
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    out = ad.matmul(ad.softmax(scores), v)  # (B, H, S, dh)
    out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (B, S, D))
    return ad.add(ad.matmul(out, w[prefix + "wo"]), w[prefix + "bo"])


def forward_batch(
    v_tokens: np.ndarray,
    text,
    weights: dict,
    cfg: ModelConfig,
    adapter: AdapterParams | None = None,
) -> ad.Tensor:
    """Logits (B, seq_len, K).  `text` is (S, E) shared or (B, S, E) per item."""
    v_tokens = np.asarray(v_tokens, dtype=np.int64)
    if v_tokens.ndim != 2 or v_tokens.shape[1] != cfg.seq_len:
        raise ValueError(f"expected (B, {cfg.seq_len}) tokens, got {v_tokens.shape}")
    if v_tokens.min() < 0 or v_tokens.max() > cfg.mask_id:
        raise ValueError("visual token id out of range")
    B = v_tokens.shape[0]
    e = text if isinstance(text, ad.Tensor) else ad.Tensor(np.asarray(text, dtype=np.float64))
    if e.data.ndim == 2:
        e = ad.reshape(e, (1,) + e.data.shape) if B == 1 else ad.Tensor(
            np.broadcast_to(e.data, (B,) + e.data.shape).copy()
        )
    x = ad.add(ad.gather_rows(weights["tok_emb"], v_tokens), weights["pos_emb"])
    for i in range(cfg.n_layer):
        p = f"layer{i}."
        h = ad.layer_norm(x, weights[p + "ln1.g"], weights[p + "ln1.b"])
        x = ad.add(x, _attention(h, h, weights, p + "attn.", cfg.n_head))
        h = ad.layer_norm(x, weights[p + "ln_ca.g"], weights[p + "ln_ca.b"])
        x = ad.add(x, _attention(h, e, weights, p + "cross.", cfg.n_head))
        if adapter is not None:
            x = apply_adapter(x, *materialize_site(adapter, 0, i))
        h = ad.layer_norm(x, weights[p + "ln2.g"], weights[p + "ln2.b"])
        m = ad.add(ad.matmul(h, weights[p + "mlp.w1"]), weights[p + "mlp.b1"])
        m = ad.add(ad.matmul(ad.gelu(m), weights[p + "mlp.w2"]), weights[p + "mlp.b2"])
        x = ad.add(x, m)
        if adapter is not None:
            x = apply_adapter(x, *materialize_site(adapter, 1, i))
    x = ad.layer_norm(x, weights["ln_f.g"], weights["ln_f.b"])
    return ad.add(ad.matmul(x, weights["head.w"]), weights["head.b"])


def forward(
    v_tokens: np.ndarray,
    text,
    weights: dict,
    cfg: ModelConfig,
    adapter: AdapterParams | None = None,
) -> ad.Tensor:
    """Single-grid logits (seq_len, K); a batch of one underneath."""
    v_tokens = np.asarray(v_tokens, dtype=np.int64)
    if v_tokens.shape != (cfg.seq_len,):
        raise ValueError(f"expected {cfg.seq_len} tokens, got {v_tokens.shape}")
    out = forward_batch(v_tokens[None, :], text, weights, cfg, adapter=adapter)
    return ad.reshape(out, (cfg.seq_len, cfg.vocab_visual))


def encode_text_graph(token_ids: np.ndarray, weights: dict) -> ad.Tensor:
    """Prompt rows looked up inside the graph so pretraining reaches the table."""
    return ad.gather_rows(weights["text_emb"], np.asarray(token_ids, dtype=np.int64))


# ---------------------------------------------------------------------------
# Masking and the training objective
# ---------------------------------------------------------------------------


def mask_ratio_schedule(u: float) -> float:
    """Cosine schedule: heavier masking early in training-time u."""
    if not 0.0 <= u <= 1.0:
        raise ValueError("u must lie in [0, 1]")
    return math.cos(math.pi * u / 2.0)


def mask_tokens(v: np.ndarray, ratio: float, rng: np.random.Generator, mask_id: int):
    """Mask ceil(ratio * len) positions chosen uniformly without replacement."""
    v = np.asarray(v, dtype=np.int64)
    if not 0.0 < ratio <= 1.0:
        raise ValueError("mask ratio must lie in (0, 1]")
    n = math.ceil(ratio * v.shape[0])
    pos = rng.choice(v.shape[0], size=n, replace=False)
    mask = np.zeros(v.shape[0], dtype=bool)
    mask[pos] = True
    out = v.copy()
    out[mask] = mask_id
    return out, mask


def mvtm_loss(logits: ad.Tensor, targets: np.ndarray, mask: np.ndarray) -> ad.Tensor:
    """Mean cross-entropy over the masked positions only."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("loss needs at least one masked position")
    idx = np.nonzero(mask)[0]
    rows = ad.gather_rows(logits, idx)
    logp = ad.log_softmax(rows)
    picked = ad.take_pairs(logp, np.asarray(targets, dtype=np.int64)[idx])
    return ad.mul(ad.tmean(picked), -1.0)


def mvtm_loss_batch(logits: ad.Tensor, targets: np.ndarray, masks: np.ndarray) -> ad.Tensor:
    """Mean over examples of each example's masked-position mean CE."""
    B, S, K = logits.shape
    masks = np.asarray(masks, dtype=bool)
    targets = np.asarray(targets, dtype=np.int64)
    if masks.shape != (B, S) or targets.shape != (B, S):
        raise ValueError("targets/masks must be (B, seq_len)")
    counts = masks.sum(axis=1)
    if (counts == 0).any():
        raise ValueError("loss needs at least one masked position per example")
    flat = ad.reshape(logits, (B * S, K))
    idx = np.nonzero(masks.ravel())[0]
    rows = ad.gather_rows(flat, idx)
    logp = ad.log_softmax(rows)
    picked = ad.take_pairs(logp, targets.ravel()[idx])
    # Each example contributes 1/(B * its masked count) per picked position.
    w = np.repeat(1.0 / (B * counts), counts)
    return ad.mul(ad.tsum(ad.mul(picked, w)), -1.0)
