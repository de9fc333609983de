"""Optimization loops: base pretraining, adapter tuning, gradient checking.

Pretraining updates every base tensor (token/position/text embeddings
included).  Adapter tuning wraps the base weights in detached views sharing
the same arrays, so gradients flow only into the adapter tables and the
base provably cannot move.  Both loops draw the mask ratio from the cosine
schedule at u ~ U[0, 1] and abort on non-finite loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .adapters import AdapterConfig, AdapterParams, init_adapter
from .model import (
    ModelConfig,
    encode_text_graph,
    forward_batch,
    init_weights,
    mask_ratio_schedule,
    mask_tokens,
)


@dataclass(frozen=True)
class OptConfig:
    lr: float
    steps: int
    batch_size: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    #: Adapter tuning only: stop once the smoothed loss reaches this value
    #: (steps then acts as a cap).  Single-reference adapters have a narrow
    #: working band between underfitting and memorizing the reference;
    #: stopping on loss rather than step count lands every init there.
    stop_at_loss: float | None = None
    #: Cosine-decay the learning rate from lr down to this floor across
    #: steps; None keeps it constant.
    lr_min: float | None = None


#: Batch-loss smoothing window for the stop_at_loss rule; single-image
#: batches are noisy because the drawn mask ratios dominate the loss.
STOP_WINDOW = 25

# Documented tuning defaults (adapter rounds); the desk profile overrides lr,
# since 1000 steps at 3e-5 barely move a zero-initialized up-projection on a
# model this small.
PAPER_TUNE_OPT = OptConfig(lr=3e-5, steps=1000, batch_size=8)
DESK_TUNE_OPT = OptConfig(lr=3e-4, steps=1000, batch_size=8, stop_at_loss=1.5)
DESK_PRETRAIN_OPT = OptConfig(lr=1e-3, steps=6000, batch_size=8)

TEXT_DROPOUT = 0.1  # probability of training against the null prompt


@dataclass
class TrainPair:
    tokens: np.ndarray  # complete token grid (seq_len,)
    text_ids: np.ndarray  # prompt token ids


@dataclass
class TrainResult:
    losses: list = field(default_factory=list)


class Adam:
    def __init__(self, params: dict, cfg: OptConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        c = self.cfg
        lr = self._lr()
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = c.beta1 * self.m[k] + (1.0 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1.0 - c.beta2) * g * g
            p.data -= lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + c.eps)

    def _lr(self) -> float:
        c = self.cfg
        if c.lr_min is None:
            return c.lr
        frac = self.t / max(1, c.steps - 1)
        return c.lr_min + 0.5 * (c.lr - c.lr_min) * (1.0 + np.cos(np.pi * min(1.0, frac)))


def _batch_loss(weights, cfg, pairs, rng, adapter=None, text_dropout=0.0):
    """Mean over the batch of per-example masked-CE; batched by prompt length."""
    items = []
    for pair in pairs:
        ratio = mask_ratio_schedule(rng.random())
        masked, mask = mask_tokens(pair.tokens, ratio, rng, cfg.mask_id)
        ids = pair.text_ids
        if text_dropout > 0.0 and rng.random() < text_dropout:
            ids = np.array([0], dtype=np.int64)  # null prompt
        items.append((masked, mask, np.asarray(pair.tokens, dtype=np.int64), ids))
    B = len(items)
    total = None
    for length in sorted({len(it[3]) for it in items}):
        group = [it for it in items if len(it[3]) == length]
        vb = np.stack([it[0] for it in group])
        masks = np.stack([it[1] for it in group])
        targets = np.stack([it[2] for it in group])
        ids = np.stack([it[3] for it in group])
        e = encode_text_graph(ids, weights)  # (Bg, S, E)
        logits = forward_batch(vb, e, weights, cfg, adapter=adapter)
        counts = masks.sum(axis=1)
        flat = ad.reshape(logits, (len(group) * cfg.seq_len, cfg.vocab_visual))
        idx = np.nonzero(masks.ravel())[0]
        logp = ad.log_softmax(ad.gather_rows(flat, idx))
        picked = ad.take_pairs(logp, targets.ravel()[idx])
        w = np.repeat(1.0 / (B * counts), counts)
        part = ad.mul(ad.tsum(ad.mul(picked, w)), -1.0)
        total = part if total is None else ad.add(total, part)
    return total


def _check_finite(loss: float, step: int, what: str):
    if not np.isfinite(loss):
        raise RuntimeError(f"{what} diverged: non-finite loss {loss} at step {step}")


def pretrain_base(
    data: list,
    cfg: ModelConfig,
    opt: OptConfig = DESK_PRETRAIN_OPT,
    seed: int = 0,
    text_dropout: float = TEXT_DROPOUT,
) -> tuple[dict, TrainResult]:
    """Train all base weights on complete grids with schedule-masked inputs."""
    if not data:
        raise ValueError("pretraining needs a non-empty dataset")
    weights = init_weights(cfg, seed=seed)
    rng = np.random.default_rng([seed, 0xBA5E])
    optimizer = Adam(weights, opt)
    result = TrainResult()
    for step in range(opt.steps):
        idx = rng.integers(0, len(data), size=opt.batch_size)
        optimizer.zero_grad()
        loss = _batch_loss(
            weights, cfg, [data[i] for i in idx], rng, text_dropout=text_dropout
        )
        val = loss.item()
        _check_finite(val, step, "pretraining")
        loss.backward()
        optimizer.step()
        result.losses.append(val)
    return weights, result


def detach_weights(weights: dict) -> dict:
    """Views sharing the same arrays but outside the gradient tape."""
    return {k: ad.Tensor(t.data) for k, t in weights.items()}


def tune_adapter(
    base_weights: dict,
    cfg: ModelConfig,
    pairs: list,
    adapter_cfg: AdapterConfig,
    opt: OptConfig = DESK_TUNE_OPT,
    seed: int = 0,
) -> tuple[AdapterParams, TrainResult]:
    """Fit adapter tables on (grid, prompt) pairs; base weights cannot move."""
    if not pairs:
        raise ValueError("adapter tuning needs at least one training pair")
    if adapter_cfg.d_emb != cfg.d_model or adapter_cfg.n_layer != cfg.n_layer:
        raise ValueError("adapter dimensions must match the model")
    frozen = detach_weights(base_weights)
    adapter = init_adapter(adapter_cfg, seed=seed)
    rng = np.random.default_rng([seed, 0xADA7])
    optimizer = Adam(adapter.tensors, opt)
    result = TrainResult()
    for step in range(opt.steps):
        idx = rng.integers(0, len(pairs), size=opt.batch_size)
        optimizer.zero_grad()
        loss = _batch_loss(frozen, cfg, [pairs[i] for i in idx], rng, adapter=adapter)
        val = loss.item()
        _check_finite(val, step, "adapter tuning")
        loss.backward()
        optimizer.step()
        result.losses.append(val)
        if (
            opt.stop_at_loss is not None
            and len(result.losses) >= STOP_WINDOW
            and float(np.mean(result.losses[-STOP_WINDOW:])) <= opt.stop_at_loss
        ):
            break
    return adapter, result


def grad_check(
    build_loss,
    params: dict,
    rng: np.random.Generator,
    coords_per_tensor: int = 3,
    eps: float = 1e-4,
) -> float:
    """Max relative error of reverse-mode grads vs. central differences."""
    for p in params.values():
        p.grad = None
    build_loss().backward()
    worst = 0.0
    for name, p in params.items():
        if p.grad is None:
            raise RuntimeError(f"no gradient reached {name}")
        flat = p.data.ravel()
        n = min(coords_per_tensor, flat.size)
        for i in rng.choice(flat.size, size=n, replace=False):
            orig = flat[i]
            flat[i] = orig + eps
            fp = build_loss().item()
            flat[i] = orig - eps
            fm = build_loss().item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            analytic = p.grad.ravel()[i]
            denom = max(abs(numeric), abs(analytic))
            err = 0.0 if denom < 1e-12 else abs(numeric - analytic) / denom
            worst = max(worst, err)
    return worst
