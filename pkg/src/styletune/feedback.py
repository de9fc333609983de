"""Iterative tuning with feedback: pools, scoring, selection, round two.

Round 1 tunes a small shared adapter on a single (image, prompt) style
reference.  A pool of candidates is then synthesized from templated
prompts, one candidate set per prompt.  A selection strategy — proxy-score
argmax, uniform random, or human choice — picks the winners, which become
the round-2 training set for a larger unshared adapter.  Text and style
alignment scores come from a small two-tower embedder trained
contrastively on the synthetic catalog (standing in for a large
pretrained image-text scorer).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import model as md
from . import sampler as sp
from . import textenc as tx
from . import tokenizer as tk
from . import training as tr
from .adapters import AdapterConfig, AdapterParams
from .synthdata import OracleGateError, extract_features

# Upstream prompt templates, shipped verbatim; "{}" takes a style descriptor.
PAPER_TEMPLATES = (
    "A chihuahua {}",
    "A chihuahua walking on the street {}",
    "A chihuahua walking in the forest {}",
    "A tabby cat {}",
    "A tabby cat walking on the street {}",
    "A tabby cat walking in the forest {}",
    "A portrait of chihuahua {}",
    "A portrait of tabby cat {}",
    "A portrait of human face {}",
    "An apple on the table {}",
    "An apple on the dish {}",
    "An apple on the ground {}",
    "A banana on the table {}",
    "A banana on the dish {}",
    "A banana on the ground {}",
    "A human {}",
    "A human walking on the street {}",
    "A human walking in the forest {}",
    "A church on the street {}",
    "A temple on the street {}",
    "A cabin on the street {}",
    "A church in the mountain {}",
    "A temple in the mountain {}",
    "A cabin in the mountain {}",
    "A church in the field {}",
    "A temple in the field {}",
    "A cabin in the field {}",
    "A church on the beach {}",
    "A temple on the beach {}",
    "A cabin on the beach {}",
)

# Reduced in-vocabulary list for desk runs: (template, target content id).
DESK_TEMPLATES = (
    ("A circle {}", 0),
    ("A small circle {}", 0),
    ("A triangle {}", 1),
    ("A big triangle {}", 1),
    ("A square {}", 2),
    ("A small square {}", 2),
    ("A glyph {}", 3),
    ("A cross {}", 4),
    ("A big cross {}", 4),
    ("A ring {}", 5),
)

DESK_TEMPLATE_STRINGS = tuple(t for t, _ in DESK_TEMPLATES)


def fill_template(template: str, style_descriptor) -> tx.PromptSpec:
    """Substitute a style descriptor into a '... {}' prompt template."""
    if not template.endswith(" {}") or template.count("{}") != 1:
        raise ValueError(f"template must end with a single ' {{}}': {template!r}")
    return tx.build_prompt(template[: -len(" {}")].split(), style_descriptor)


# ---------------------------------------------------------------------------
# Training-set plumbing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainingExample:
    image: np.ndarray
    prompt: tx.PromptSpec


def encode_training_set(
    examples: Sequence[TrainingExample],
    codebook: tk.Codebook,
    vocab: tx.Vocabulary,
    rare_token_mode: bool = False,
) -> list:
    return [
        tr.TrainPair(
            tk.encode(ex.image, codebook),
            tx.token_ids(ex.prompt, vocab, rare_token_mode),
        )
        for ex in examples
    ]


# ---------------------------------------------------------------------------
# Two-tower proxy scorer
# ---------------------------------------------------------------------------

PROXY_GATE = 0.90


@dataclass(frozen=True)
class ProxyEmbedder:
    """Linear image and prompt towers into a shared unit-norm space."""

    w_img: np.ndarray  # (n_features, dim)
    w_txt: np.ndarray  # (vocab, dim)
    feat_mean: np.ndarray
    feat_std: np.ndarray
    vocab: tx.Vocabulary

    @property
    def dim(self) -> int:
        return self.w_img.shape[1]

    def embed_images(self, images: Sequence[np.ndarray]) -> np.ndarray:
        feats = np.stack([extract_features(im) for im in images])
        z = ((feats - self.feat_mean) / self.feat_std) @ self.w_img
        return z / np.linalg.norm(z, axis=-1, keepdims=True)

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        return self.embed_images([image])[0]

    def _bag(self, prompt: tx.PromptSpec) -> np.ndarray:
        ids = tx.token_ids(prompt, self.vocab)
        bag = np.zeros(self.vocab.size)
        np.add.at(bag, ids, 1.0 / len(ids))
        return bag

    def embed_prompts(self, prompts: Sequence[tx.PromptSpec]) -> np.ndarray:
        z = np.stack([self._bag(p) for p in prompts]) @ self.w_txt
        return z / np.linalg.norm(z, axis=-1, keepdims=True)

    def embed_prompt(self, prompt: tx.PromptSpec) -> np.ndarray:
        return self.embed_prompts([prompt])[0]


def _normalize_rows(x: ad.Tensor) -> ad.Tensor:
    n2 = ad.tsum(ad.mul(x, x), axis=-1, keepdims=True)
    return ad.mul(x, ad.pow_const(n2, -0.5))


def train_proxy(
    examples,
    vocab: Optional[tx.Vocabulary] = None,
    seed: int = 0,
    dim: int = 16,
    steps: int = 300,
    lr: float = 0.05,
    temp: float = 0.1,
    holdout_frac: float = 0.25,
    gate: float = PROXY_GATE,
) -> ProxyEmbedder:
    """Contrastive fit of the two towers on labeled catalog examples.

    Each image is pushed toward its own styled prompt and away from every
    other distinct prompt.  Fails loudly when held-out (image, prompt)
    matching falls below the gate.
    """
    from .synthdata import default_contents, default_styles

    if vocab is None:
        vocab = tx.default_vocab()
    styles, contents = default_styles(), default_contents()

    def prompt_of(ex) -> tx.PromptSpec:
        return tx.build_prompt(
            ("a", contents[ex.content_id].name), (styles[ex.style_id].name,)
        )

    labels = [(ex.style_id, ex.content_id) for ex in examples]
    distinct = sorted(set(labels))
    if len(distinct) < 2:
        raise ValueError("need at least two distinct (style, content) prompts")
    prompt_idx = np.array([distinct.index(l) for l in labels])
    prompts = []
    bags = np.zeros((len(distinct), vocab.size))
    for i, (s, c) in enumerate(distinct):
        p = tx.build_prompt(("a", contents[c].name), (styles[s].name,))
        prompts.append(p)
        ids = tx.token_ids(p, vocab)
        np.add.at(bags[i], ids, 1.0 / len(ids))

    feats = np.stack([extract_features(ex.image) for ex in examples])
    rng = np.random.default_rng([seed, 0xC11B])
    order = rng.permutation(len(examples))
    n_hold = max(1, int(round(holdout_frac * len(examples))))
    hold, train = order[:n_hold], order[n_hold:]

    mean = feats[train].mean(axis=0)
    std = feats[train].std(axis=0) + 1e-8
    x_train = (feats[train] - mean) / std

    w_img = ad.param(rng.normal(0.0, 0.1, (feats.shape[1], dim)))
    w_txt = ad.param(rng.normal(0.0, 0.1, (vocab.size, dim)))
    x_const = ad.Tensor(x_train)
    bags_const = ad.Tensor(bags)
    targets = prompt_idx[train]
    optimizer = tr.Adam({"w_img": w_img, "w_txt": w_txt}, tr.OptConfig(lr=lr, steps=steps))
    for _ in range(steps):
        optimizer.zero_grad()
        img_emb = _normalize_rows(ad.matmul(x_const, w_img))
        txt_emb = _normalize_rows(ad.matmul(bags_const, w_txt))
        logits = ad.mul(ad.matmul(img_emb, ad.transpose(txt_emb, (1, 0))), 1.0 / temp)
        loss = ad.mul(ad.tmean(ad.take_pairs(ad.log_softmax(logits), targets)), -1.0)
        loss.backward()
        optimizer.step()

    emb = ProxyEmbedder(w_img.data.copy(), w_txt.data.copy(), mean, std, vocab)

    held_img = emb.embed_images([examples[i].image for i in hold])
    held_txt = emb.embed_prompts([prompts[j] for j in prompt_idx[hold]])
    wrong = np.array(
        [rng.choice([j for j in range(len(distinct)) if j != prompt_idx[i]]) for i in hold]
    )
    wrong_txt = emb.embed_prompts([prompts[j] for j in wrong])
    matched = (held_img * held_txt).sum(axis=1)
    mismatched = (held_img * wrong_txt).sum(axis=1)
    rate = float((matched > mismatched).mean())
    if rate < gate:
        raise OracleGateError(
            f"proxy matched-vs-mismatched rate {rate:.3f} below gate {gate}"
        )
    return emb


def save_proxy(path, emb: ProxyEmbedder) -> None:
    from .checkpoint import save_tensors

    save_tensors(
        path,
        {
            "w_img": emb.w_img,
            "w_txt": emb.w_txt,
            "feat_mean": emb.feat_mean,
            "feat_std": emb.feat_std,
        },
        meta={"proxy": {"vocab": list(emb.vocab.words)}},
    )


def load_proxy(path) -> ProxyEmbedder:
    from .checkpoint import load_tensors

    arrays, meta = load_tensors(path)
    return ProxyEmbedder(
        arrays["w_img"],
        arrays["w_txt"],
        arrays["feat_mean"],
        arrays["feat_std"],
        tx.Vocabulary(tuple(meta["proxy"]["vocab"])),
    )


def text_score(images: Sequence[np.ndarray], prompts: Sequence[tx.PromptSpec], emb: ProxyEmbedder) -> float:
    """Mean image-prompt cosine over aligned lists."""
    if len(images) == 0 or len(images) != len(prompts):
        raise ValueError("need equal-length non-empty image and prompt lists")
    return float((emb.embed_images(images) * emb.embed_prompts(prompts)).sum(axis=1).mean())


def style_score(images: Sequence[np.ndarray], style_ref: np.ndarray, emb: ProxyEmbedder) -> float:
    """Mean cosine between each image and the style reference."""
    if len(images) == 0:
        raise ValueError("need a non-empty image list")
    return float((emb.embed_images(images) @ emb.embed_image(style_ref)).mean())


# ---------------------------------------------------------------------------
# Pools and selection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PoolItem:
    item_id: str
    prompt_id: int
    prompt: tx.PromptSpec
    tokens: np.ndarray
    image: np.ndarray
    scores: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SamplePool:
    pool_id: str
    items: tuple
    style_ref: Optional[np.ndarray] = None

    def __post_init__(self):
        ids = [it.item_id for it in self.items]
        if len(set(ids)) != len(ids):
            raise ValueError("pool item ids must be unique")

    def item(self, item_id: str) -> PoolItem:
        for it in self.items:
            if it.item_id == item_id:
                return it
        raise KeyError(item_id)

    def prompt_groups(self) -> dict:
        groups: dict = {}
        for it in self.items:
            groups.setdefault(it.prompt_id, []).append(it)
        return groups


@dataclass(frozen=True)
class SelectionRecord:
    pool_id: str
    strategy: str  # "clip" | "human" | "random"
    item_ids: tuple
    timestamp: Optional[str] = None  # automated strategies leave this unset
    annotator: Optional[str] = None

    def __post_init__(self):
        if self.strategy not in ("clip", "human", "random"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if len(set(self.item_ids)) != len(self.item_ids):
            raise ValueError("selection ids must be unique")


def generate_pool(
    weights: dict,
    model_cfg: md.ModelConfig,
    codebook: tk.Codebook,
    vocab: tx.Vocabulary,
    adapter: AdapterParams,
    prompts: Sequence[tx.PromptSpec],
    n_per_prompt: int,
    gcfg: sp.GuidanceConfig,
    seed: int,
    pool_id: str,
    emb: Optional[ProxyEmbedder] = None,
    style_ref: Optional[np.ndarray] = None,
    rare_token_mode: bool = False,
    negative: Optional[tx.PromptSpec] = None,
) -> SamplePool:
    """Synthesize n_per_prompt guided samples per prompt.

    Item (j, i) decodes with generator seeded [seed, j, i], so any single
    item is exactly reproducible in isolation.  `negative` is the shared
    negative prompt for every item (default: the empty negative).
    """
    if n_per_prompt < 1 or not prompts:
        raise ValueError("need at least one prompt and one sample per prompt")
    neg_ids = tx.token_ids(negative if negative is not None else tx.EMPTY_NEGATIVE, vocab)
    ref_emb = emb.embed_image(style_ref) if emb is not None and style_ref is not None else None
    items = []
    counter = 0
    for j, prompt in enumerate(prompts):
        provider = sp.adapter_provider(
            weights,
            model_cfg,
            adapter,
            tx.token_ids(prompt, vocab, rare_token_mode),
            neg_ids,
            gcfg.adapter_scale,
            gcfg.negative_scale,
        )
        rngs = [np.random.default_rng([seed, j, i]) for i in range(n_per_prompt)]
        grids = sp.decode_iterative_batch(provider, gcfg, rngs, model_cfg.seq_len, model_cfg.mask_id)
        images = [tk.decode(g, codebook) for g in grids]
        if emb is not None:
            img_embs = emb.embed_images(images)
            p_emb = emb.embed_prompt(prompt)
        for i in range(n_per_prompt):
            scores = {}
            if emb is not None:
                scores["text"] = float(img_embs[i] @ p_emb)
                if ref_emb is not None:
                    scores["style"] = float(img_embs[i] @ ref_emb)
            items.append(
                PoolItem(
                    item_id=f"{pool_id}-{counter:04d}",
                    prompt_id=j,
                    prompt=prompt,
                    tokens=grids[i],
                    image=images[i],
                    scores=scores,
                )
            )
            counter += 1
    return SamplePool(pool_id=pool_id, items=tuple(items), style_ref=style_ref)


def select(
    pool: SamplePool,
    strategy: str,
    emb: Optional[ProxyEmbedder] = None,
    rng: Optional[np.random.Generator] = None,
    human_input: Optional[SelectionRecord] = None,
) -> SelectionRecord:
    """Pick pool winners: proxy-score argmax, uniform random, or human ids."""
    groups = pool.prompt_groups()
    if strategy == "clip":
        if emb is None:
            raise ValueError("clip selection needs a proxy embedder")
        chosen = []
        for pid in sorted(groups):
            group = sorted(groups[pid], key=lambda it: it.item_id)
            scores = (
                emb.embed_images([it.image for it in group])
                @ emb.embed_prompt(group[0].prompt)
            )
            chosen.append(group[int(np.argmax(scores))].item_id)  # first max wins ties
        return SelectionRecord(pool.pool_id, "clip", tuple(chosen))
    if strategy == "random":
        if rng is None:
            raise ValueError("random selection needs a generator")
        chosen = []
        for pid in sorted(groups):
            group = sorted(groups[pid], key=lambda it: it.item_id)
            chosen.append(group[int(rng.integers(len(group)))].item_id)
        return SelectionRecord(pool.pool_id, "random", tuple(chosen))
    if strategy == "human":
        if human_input is None:
            raise ValueError("human selection needs a SelectionRecord")
        if human_input.strategy != "human" or human_input.pool_id != pool.pool_id:
            raise ValueError("human record must target this pool with strategy 'human'")
        if not 1 <= len(human_input.item_ids) <= len(pool.items):
            raise ValueError("human selection must pick between 1 and pool-size items")
        known = {it.item_id for it in pool.items}
        unknown = [i for i in human_input.item_ids if i not in known]
        if unknown:
            raise ValueError(f"selection references unknown items: {unknown}")
        return human_input
    raise ValueError(f"unknown strategy {strategy!r}")


def build_round2(pool: SamplePool, sel: SelectionRecord) -> list:
    """Training set from the chosen items: decoded pool image + original prompt."""
    if not sel.item_ids:
        raise ValueError("selection is empty")
    if sel.pool_id != pool.pool_id:
        raise ValueError("selection belongs to a different pool")
    return [
        TrainingExample(pool.item(item_id).image, pool.item(item_id).prompt)
        for item_id in sel.item_ids
    ]


# ---------------------------------------------------------------------------
# Full iteration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IterationConfig:
    round1_d_prj: int = 4
    round1_shared: bool = True
    round2_d_prj: int = 32
    round2_shared: bool = False
    tune_opt: tr.OptConfig = tr.DESK_TUNE_OPT
    guidance: sp.GuidanceConfig = sp.DESK_GUIDANCE
    templates: tuple = DESK_TEMPLATE_STRINGS
    n_per_prompt: int = 8
    eval_n_per_prompt: int = 4
    include_reference: bool = False  # add the original style pair to round 2
    rare_token_mode: bool = False
    #: Sample pools against a negative naming the reference pair itself;
    #: countering the single-image adapter's pull toward that image's content.
    negative_from_reference: bool = True


def reference_negative(style_prompt: tx.PromptSpec) -> tx.PromptSpec:
    """The reference pair's own description, flipped into a negative."""
    return tx.PromptSpec(style_prompt.content_text, style_prompt.style_descriptor, True)


def round1_adapter(
    weights: dict,
    model_cfg: md.ModelConfig,
    codebook: tk.Codebook,
    vocab: tx.Vocabulary,
    style_image: np.ndarray,
    style_prompt: tx.PromptSpec,
    it_cfg: IterationConfig = IterationConfig(),
    seed: int = 0,
) -> AdapterParams:
    """Tune the single-reference (round 1) adapter."""
    pairs = encode_training_set(
        [TrainingExample(style_image, style_prompt)], codebook, vocab, it_cfg.rare_token_mode
    )
    cfg1 = AdapterConfig(
        model_cfg.d_model, it_cfg.round1_d_prj, model_cfg.n_layer, it_cfg.round1_shared
    )
    theta1, _ = tr.tune_adapter(weights, model_cfg, pairs, cfg1, it_cfg.tune_opt, seed=seed)
    return theta1


@dataclass(frozen=True)
class IterationResult:
    theta_round1: AdapterParams
    pool: SamplePool
    selection: SelectionRecord
    theta_round2: AdapterParams
    metrics: dict
    round2_set: tuple
    eval_pool: SamplePool


def run_iteration(
    weights: dict,
    model_cfg: md.ModelConfig,
    codebook: tk.Codebook,
    vocab: tx.Vocabulary,
    style_image: np.ndarray,
    style_prompt: tx.PromptSpec,
    strategy: str,
    emb: ProxyEmbedder,
    it_cfg: IterationConfig = IterationConfig(),
    seed: int = 0,
    human_input: Optional[SelectionRecord] = None,
    pool_id: Optional[str] = None,
    select_fn=None,
) -> IterationResult:
    """One full feedback iteration.

    Seed discipline: round-1 tuning uses `seed`, the candidate pool `seed`,
    round-2 tuning `seed + 1`, the round-2 evaluation pool `seed + 2`, and
    random selection a generator seeded [seed, 3].

    `select_fn(pool) -> SelectionRecord`, when given, replaces the built-in
    selection step; callers use it to persist the pool and wait for an
    out-of-process (human) record while keeping every other stage identical.
    """
    if style_prompt.style_descriptor is None:
        raise ValueError("the style prompt must carry a style descriptor")
    descriptor = style_prompt.style_descriptor
    pool_id = pool_id if pool_id is not None else f"pool-{seed}"

    ref_example = TrainingExample(style_image, style_prompt)
    theta1 = round1_adapter(
        weights, model_cfg, codebook, vocab, style_image, style_prompt, it_cfg, seed
    )
    negative = reference_negative(style_prompt) if it_cfg.negative_from_reference else None

    prompts = [fill_template(t, descriptor) for t in it_cfg.templates]
    pool = generate_pool(
        weights, model_cfg, codebook, vocab, theta1, prompts,
        it_cfg.n_per_prompt, it_cfg.guidance, seed, pool_id,
        emb=emb, style_ref=style_image, rare_token_mode=it_cfg.rare_token_mode,
        negative=negative,
    )
    if select_fn is not None:
        sel = select_fn(pool)
        if sel.pool_id != pool.pool_id:
            raise ValueError("selection callback returned a record for a different pool")
    else:
        sel = select(
            pool, strategy, emb=emb,
            rng=np.random.default_rng([seed, 3]), human_input=human_input,
        )

    round2_set = build_round2(pool, sel)
    if it_cfg.include_reference:
        round2_set = round2_set + [ref_example]
    pairs2 = encode_training_set(round2_set, codebook, vocab, it_cfg.rare_token_mode)
    cfg2 = AdapterConfig(model_cfg.d_model, it_cfg.round2_d_prj, model_cfg.n_layer, it_cfg.round2_shared)
    theta2, _ = tr.tune_adapter(weights, model_cfg, pairs2, cfg2, it_cfg.tune_opt, seed=seed + 1)

    eval_pool = generate_pool(
        weights, model_cfg, codebook, vocab, theta2, prompts,
        it_cfg.eval_n_per_prompt, it_cfg.guidance, seed + 2, f"{pool_id}-eval",
        emb=emb, style_ref=style_image, rare_token_mode=it_cfg.rare_token_mode,
        negative=negative,
    )

    def pool_metrics(p: SamplePool) -> tuple:
        images = [it.image for it in p.items]
        prompts_of = [it.prompt for it in p.items]
        return (
            text_score(images, prompts_of, emb),
            style_score(images, style_image, emb),
        )

    r1_text, r1_style = pool_metrics(pool)
    r2_text, r2_style = pool_metrics(eval_pool)
    metrics = {
        "round1_text": r1_text,
        "round1_style": r1_style,
        "round2_text": r2_text,
        "round2_style": r2_style,
    }
    return IterationResult(theta1, pool, sel, theta2, metrics, tuple(round2_set), eval_pool)
