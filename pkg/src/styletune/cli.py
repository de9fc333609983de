"""Command-line front end for the whole pipeline.

Every stage reads and writes one run directory (``--run-dir``, defaulting to
the ``STYLEDROP_RUN_DIR`` environment variable or ``./run``):

    gen-data       render the labeled style/content image catalog
    fit-tokenizer  fit the patch codebook on the catalog
    pretrain       train the base masked-token model
    tune           train a style (or content) adapter on reference images
    sample         draw guided samples as PNGs
    pool           generate a candidate pool from an adapter
    select         record a pool selection (proxy argmax, random, or human ids)
    round          one full feedback iteration: tune, pool, select, retune
    compose        sample with a style adapter and a content adapter mixed
    eval           score a stored pool with the two-tower proxy
    serve          HTTP service for pool browsing and human selection

Exit codes: 0 success, 1 user error (bad flags, missing artifacts,
invalid selections), 2 internal error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
import traceback
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import checkpoint as ck
from . import feedback as fb
from . import model as md
from . import rundir as rd
from . import sampler as sp
from . import synthdata as sd
from . import textenc as tx
from . import tokenizer as tk
from . import training as tr
from .synthdata import OracleGateError


class UserError(Exception):
    """Anything the operator can fix: bad flags, missing artifacts."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; we promise 1
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


# ---------------------------------------------------------------------------
# Run-directory helpers
# ---------------------------------------------------------------------------


def _open_run(args, create: bool = True) -> rd.RunDirectory:
    try:
        return rd.RunDirectory(args.run_dir, create=create)
    except FileNotFoundError as exc:
        raise UserError(str(exc)) from exc


def _catalog_root(run: rd.RunDirectory) -> Path:
    return run.path("data", "catalog")


def _load_catalog(run: rd.RunDirectory) -> list:
    root = _catalog_root(run)
    if not root.is_dir():
        raise UserError(f"no dataset at {root}; run `gen-data` first")
    return sd.load_dataset(root)


def _codebook_path(run: rd.RunDirectory) -> Path:
    return run.path("checkpoints", "codebook.bin")


def _load_codebook(run: rd.RunDirectory) -> tk.Codebook:
    path = _codebook_path(run)
    if not path.is_file():
        raise UserError(f"no codebook at {path}; run `fit-tokenizer` first")
    return tk.load_codebook(path)


def _model_path(run: rd.RunDirectory, name: str) -> Path:
    return run.path("checkpoints", f"{name}.stck")


def _load_base(run: rd.RunDirectory, name: str) -> tuple:
    path = _model_path(run, name)
    if not path.is_file():
        raise UserError(f"no base model at {path}; run `pretrain` first")
    return ck.load_model(path)


def _adapter_path(run: rd.RunDirectory, name: str) -> Path:
    return run.path("checkpoints", f"{name}.ckpt")


def _load_adapter_arg(run: rd.RunDirectory, spec: str):
    """Adapter flags accept either a checkpoint name in the run or a path."""
    candidate = Path(spec)
    if candidate.is_file():
        return ck.load_adapter(candidate)
    named = _adapter_path(run, spec)
    if named.is_file():
        return ck.load_adapter(named)
    raise UserError(f"no adapter checkpoint named {spec!r} (looked at {candidate} and {named})")


def _proxy_path(run: rd.RunDirectory) -> Path:
    return run.path("checkpoints", "proxy.ckpt")


def _ensure_proxy(run: rd.RunDirectory, seed: int, cb: tk.Codebook) -> fb.ProxyEmbedder:
    """Train (or load) the scoring proxy.

    Training includes codebook reconstructions of the catalog so the proxy
    scores generated images — which are decoded token grids — as reliably
    as it scores clean renders.
    """
    path = _proxy_path(run)
    if path.is_file():
        return fb.load_proxy(path)
    catalog = _load_catalog(run)
    recons = [
        sd.LabeledExample(e.style_id, e.content_id, e.seed, tk.decode(tk.encode(e.image, cb), cb))
        for e in catalog
    ]
    emb = fb.train_proxy(catalog + recons, seed=seed)
    fb.save_proxy(path, emb)
    return emb


def _snapshot(run: rd.RunDirectory, name: str, payload: dict) -> None:
    try:
        run.snapshot_config(name, payload)
    except rd.ArtifactExistsError as exc:
        raise UserError(str(exc)) from exc


def _load_image(path_text: str) -> np.ndarray:
    path = Path(path_text)
    if not path.is_file():
        raise UserError(f"no image at {path}")
    return sd.load_png(path)


# ---------------------------------------------------------------------------
# Shared flag groups
# ---------------------------------------------------------------------------


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument(
        "--run-dir",
        default=None,
        help="run directory (default: $STYLEDROP_RUN_DIR or ./run)",
    )
    p.add_argument("--seed", type=int, default=0, help="random seed for every numeric choice")


def _add_guidance_flags(p: argparse.ArgumentParser, steps_default: int) -> None:
    g = sp.DESK_GUIDANCE
    p.add_argument("--cfg-scale", type=float, default=g.cfg_scale,
                   help="base guidance scale against the negative prompt")
    p.add_argument("--adapter-scale", "--lambda-a", dest="adapter_scale", type=float,
                   default=g.adapter_scale, help="style-strength scale (adapted vs. base logits)")
    p.add_argument("--negative-scale", "--lambda-b", dest="negative_scale", type=float,
                   default=g.negative_scale, help="negative-prompt scale in adapter guidance")
    p.add_argument("--content-mix", "--gamma", dest="content_mix", type=float,
                   default=g.content_mix, help="content-adapter share when composing two adapters")
    p.add_argument("--temperature", type=float, default=g.temperature,
                   help="confidence-noise temperature during decoding")
    p.add_argument("--steps", type=int, default=steps_default, help="decoding steps")


def _guidance_from_args(args) -> sp.GuidanceConfig:
    try:
        return sp.GuidanceConfig(
            cfg_scale=args.cfg_scale,
            adapter_scale=args.adapter_scale,
            negative_scale=args.negative_scale,
            content_mix=args.content_mix,
            temperature=args.temperature,
            steps=args.steps,
        )
    except ValueError as exc:
        raise UserError(str(exc)) from exc


def _add_tune_flags(p: argparse.ArgumentParser, opt: tr.OptConfig) -> None:
    p.add_argument("--tune-steps", type=int, default=opt.steps, help="adapter training steps")
    p.add_argument("--tune-lr", type=float, default=opt.lr, help="adapter learning rate")
    p.add_argument("--tune-batch", type=int, default=opt.batch_size, help="adapter batch size")
    p.add_argument(
        "--tune-stop-at", type=float, default=opt.stop_at_loss,
        help="stop adapter tuning once the smoothed loss reaches this value "
             "(--tune-steps caps it; 0 disables)",
    )


def _tune_opt_from_args(args) -> tr.OptConfig:
    stop = args.tune_stop_at
    return replace(
        tr.DESK_TUNE_OPT, steps=args.tune_steps, lr=args.tune_lr, batch_size=args.tune_batch,
        stop_at_loss=None if not stop or stop <= 0 else stop,
    )


def _prompt_from_args(args) -> tx.PromptSpec:
    style = getattr(args, "style", None)
    prompt = tx.build_prompt(args.prompt, style)
    if not prompt.content_text:
        raise UserError("--prompt must not be empty")
    return prompt


def _negative_from_args(args) -> tx.PromptSpec:
    text = getattr(args, "negative", "")
    return tx.build_prompt(text, None, is_negative=True) if text else tx.EMPTY_NEGATIVE


def _templates_from_args(args) -> tuple:
    table = {"desk": fb.DESK_TEMPLATE_STRINGS, "paper": tuple(fb.PAPER_TEMPLATES)}
    templates = table[args.templates]
    if args.prompts is not None:
        if not 1 <= args.prompts <= len(templates):
            raise UserError(
                f"--prompts must be in 1..{len(templates)} for the {args.templates} template set"
            )
        templates = templates[: args.prompts]
    return tuple(templates)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    run = _open_run(args)
    root = _catalog_root(run)
    if root.exists():
        raise UserError(f"dataset already exists at {root}")
    catalog = sd.generate_catalog(seeds_per_cell=args.seeds_per_cell)
    sd.save_dataset(catalog, root)
    _snapshot(run, "dataset", {"seeds_per_cell": args.seeds_per_cell, "n_images": len(catalog)})
    print(f"wrote {len(catalog)} images to {root}")
    return 0


def cmd_fit_tokenizer(args) -> int:
    run = _open_run(args)
    catalog = _load_catalog(run)
    cb = tk.fit_codebook(
        [e.image for e in catalog], K=args.k, patch_size=args.patch_size, seed=args.seed
    )
    path = _codebook_path(run)
    if path.exists():
        raise UserError(f"codebook already exists at {path}")
    tk.save_codebook(cb, path)
    _snapshot(run, "tokenizer", {"K": args.k, "patch_size": args.patch_size, "seed": args.seed})
    print(f"wrote {args.k}-entry codebook to {path}")
    return 0


def _style_content_filter(args, catalog):
    styles = {s.name: s.style_id for s in sd.default_styles()}
    contents = {c.name: c.content_id for c in sd.default_contents()}

    def resolve(value, table, what):
        if value in (None, "none"):
            return None
        if value not in table:
            raise UserError(f"unknown {what} {value!r}; one of {sorted(table)} or 'none'")
        return table[value]

    drop_style = resolve(args.exclude_style, styles, "style")
    drop_content = resolve(args.exclude_content, contents, "content")
    kept = [
        e
        for e in catalog
        if e.style_id != drop_style and e.content_id != drop_content
    ]
    if not kept:
        raise UserError("the exclusions leave no training images")
    return kept, drop_style, drop_content


def cmd_pretrain(args) -> int:
    run = _open_run(args)
    catalog = _load_catalog(run)
    cb = _load_codebook(run)
    kept, drop_style, drop_content = _style_content_filter(args, catalog)

    vocab = tx.default_vocab()
    style_names = {s.style_id: s.name for s in sd.default_styles()}
    content_names = {c.content_id: c.name for c in sd.default_contents()}
    pairs = [
        tr.TrainPair(
            tk.encode(e.image, cb),
            tx.token_ids(
                tx.build_prompt(f"a {content_names[e.content_id]}", style_names[e.style_id]),
                vocab,
            ),
        )
        for e in kept
    ]

    cfg = md.ModelConfig()
    opt = replace(
        tr.DESK_PRETRAIN_OPT, steps=args.steps, lr=args.lr, batch_size=args.batch_size,
        lr_min=None if not args.lr_min or args.lr_min <= 0 else args.lr_min,
    )
    weights, result = tr.pretrain_base(pairs, cfg, opt, seed=args.seed)

    path = _model_path(run, args.out)
    if path.exists():
        raise UserError(f"model checkpoint already exists at {path}")
    ck.save_model(path, weights, cfg)
    rows = [
        {"step": i + 1, "loss": loss}
        for i, loss in enumerate(result.losses)
        if (i + 1) % 100 == 0 or i + 1 == len(result.losses)
    ]
    run.save_metrics(f"{args.out}-train", rows, ["step", "loss"])
    _snapshot(
        run,
        f"pretrain-{args.out}",
        {
            "exclude_style": drop_style,
            "exclude_content": drop_content,
            "n_pairs": len(pairs),
            "opt": asdict(opt),
            "model": asdict(cfg),
            "seed": args.seed,
        },
    )
    print(
        f"pretrained on {len(pairs)} pairs for {opt.steps} steps; "
        f"final loss {result.losses[-1]:.4f}; wrote {path}"
    )
    return 0


def cmd_tune(args) -> int:
    run = _open_run(args)
    cb = _load_codebook(run)
    weights, cfg = _load_base(run, args.base)
    vocab = tx.default_vocab()

    if len(args.image) != len(args.prompt) and len(args.prompt) != 1:
        raise UserError("--prompt must appear once (shared) or once per --image")
    prompts = args.prompt * len(args.image) if len(args.prompt) == 1 else args.prompt
    examples = [
        fb.TrainingExample(_load_image(img), tx.build_prompt(text, args.style))
        for img, text in zip(args.image, prompts)
    ]
    pairs = fb.encode_training_set(examples, cb, vocab, rare_token_mode=args.rare_token)

    adapter_cfg = fb.AdapterConfig(
        cfg.d_model, args.d_prj, cfg.n_layer, is_shared=not args.unshared
    )
    opt = _tune_opt_from_args(args)
    adapter, result = tr.tune_adapter(weights, cfg, pairs, adapter_cfg, opt, seed=args.seed)

    path = _adapter_path(run, args.out)
    if path.exists():
        raise UserError(f"adapter checkpoint already exists at {path}")
    ck.save_adapter(path, adapter)
    _snapshot(
        run,
        f"tune-{args.out}",
        {
            "base": args.base,
            "images": list(args.image),
            "prompts": prompts,
            "style": args.style,
            "rare_token": args.rare_token,
            "adapter": asdict(adapter_cfg),
            "opt": asdict(opt),
            "seed": args.seed,
        },
    )
    print(
        f"tuned {_adapter_param_count(adapter)} adapter parameters on {len(pairs)} pairs "
        f"for {opt.steps} steps; final loss {result.losses[-1]:.4f}; wrote {path}"
    )
    return 0


def _adapter_param_count(adapter) -> int:
    from .adapters import count_params

    return count_params(adapter.cfg)


def _write_samples(images, tokens, args) -> None:
    out = Path(args.out)
    if len(images) == 1 and out.suffix == ".png":
        targets = [out]
    else:
        out.mkdir(parents=True, exist_ok=True)
        targets = [out / f"sample-{i:04d}.png" for i in range(len(images))]
    for i, (img, target) in enumerate(zip(images, targets)):
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(sd.to_png_bytes(img))
        if args.dump_tokens:
            target.with_suffix(".tokens.json").write_text(
                json.dumps({"tokens": [int(t) for t in tokens[i]]}) + "\n"
            )
    where = targets[0] if len(targets) == 1 else out
    print(f"wrote {len(images)} sample(s) to {where}")


def _draw_samples(provider, gcfg, cb, cfg, n, seed):
    images, grids = [], []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        grid = sp.decode_iterative(provider, gcfg, rng, cfg.seq_len, cfg.mask_id)
        grids.append(grid)
        images.append(tk.decode(grid, cb))
    return images, grids


def cmd_sample(args) -> int:
    run = _open_run(args)
    cb = _load_codebook(run)
    weights, cfg = _load_base(run, args.base)
    vocab = tx.default_vocab()
    gcfg = _guidance_from_args(args)

    prompt = _prompt_from_args(args)
    pos = tx.token_ids(prompt, vocab, args.rare_token)
    neg = tx.token_ids(_negative_from_args(args), vocab)

    if args.style_adapter:
        adapter = _load_adapter_arg(run, args.style_adapter)
        provider = sp.adapter_provider(
            weights, cfg, adapter, pos, neg, gcfg.adapter_scale, gcfg.negative_scale
        )
    else:
        provider = sp.base_provider(weights, cfg, pos, neg, gcfg.cfg_scale)

    images, grids = _draw_samples(provider, gcfg, cb, cfg, args.n, args.seed)
    _write_samples(images, grids, args)
    return 0


def cmd_compose(args) -> int:
    run = _open_run(args)
    cb = _load_codebook(run)
    weights, cfg = _load_base(run, args.base)
    vocab = tx.default_vocab()
    gcfg = _guidance_from_args(args)

    prompt = _prompt_from_args(args)
    if prompt.style_descriptor is None:
        raise UserError("compose needs --style so the content prompt can drop it")
    pos = tx.token_ids(prompt, vocab)
    content = tx.token_ids(tx.strip_style(prompt), vocab)
    neg = tx.token_ids(_negative_from_args(args), vocab)

    style_adapter = _load_adapter_arg(run, args.style_adapter)
    content_adapter = _load_adapter_arg(run, args.content_adapter)
    provider = sp.dual_provider(
        weights, cfg, style_adapter, content_adapter, pos, content, neg,
        gcfg.adapter_scale, gcfg.negative_scale, gcfg.content_mix,
    )

    images, grids = _draw_samples(provider, gcfg, cb, cfg, args.n, args.seed)
    _write_samples(images, grids, args)
    return 0


def cmd_pool(args) -> int:
    run = _open_run(args)
    cb = _load_codebook(run)
    weights, cfg = _load_base(run, args.base)
    vocab = tx.default_vocab()
    gcfg = _guidance_from_args(args)
    adapter = _load_adapter_arg(run, args.adapter)
    templates = _templates_from_args(args)
    prompts = [fb.fill_template(t, args.style) for t in templates]

    emb = _ensure_proxy(run, args.seed, cb) if args.score else None
    reference = _load_image(args.reference) if args.reference else None
    pool_id = args.pool_id or f"pool-{args.seed}"
    pool = fb.generate_pool(
        weights, cfg, cb, vocab, adapter, prompts, args.pool_size, gcfg,
        args.seed, pool_id, emb=emb, style_ref=reference,
        rare_token_mode=args.rare_token, negative=_negative_from_args(args),
    )
    try:
        run.save_pool(pool)
    except rd.ArtifactExistsError as exc:
        raise UserError(str(exc)) from exc
    _snapshot(
        run,
        f"pool-{pool_id}",
        {
            "base": args.base,
            "adapter": args.adapter,
            "style": args.style,
            "templates": list(templates),
            "pool_size": args.pool_size,
            "guidance": asdict(gcfg),
            "negative": args.negative,
            "seed": args.seed,
            "scored": bool(emb),
        },
    )
    print(f"pool {pool_id}: {len(pool.items)} items over {len(prompts)} prompts")
    return 0


def _human_record_from_file(path_text: str, pool_id: str) -> fb.SelectionRecord:
    path = Path(path_text)
    if not path.is_file():
        raise UserError(f"no selection file at {path}")
    body = json.loads(path.read_text())
    chosen = body.get("chosen")
    if not isinstance(chosen, list) or not chosen:
        raise UserError("selection file needs a non-empty 'chosen' list")
    return fb.SelectionRecord(
        pool_id=pool_id,
        strategy="human",
        item_ids=tuple(chosen),
        timestamp=body.get("timestamp"),
        annotator=body.get("annotator"),
    )


def cmd_select(args) -> int:
    run = _open_run(args)
    cb = _load_codebook(run)
    if not run.has_pool(args.pool_id):
        raise UserError(f"no pool named {args.pool_id!r} in {run.root}")
    pool = run.load_pool(args.pool_id, cb)

    try:
        if args.strategy == "clip":
            sel = fb.select(pool, "clip", emb=_ensure_proxy(run, args.seed, cb))
        elif args.strategy == "random":
            sel = fb.select(pool, "random", rng=np.random.default_rng([args.seed, 3]))
        else:
            if args.ids:
                record = fb.SelectionRecord(
                    pool_id=args.pool_id,
                    strategy="human",
                    item_ids=tuple(args.ids.split(",")),
                    annotator=args.annotator,
                )
            elif args.human_file:
                record = _human_record_from_file(args.human_file, args.pool_id)
            else:
                raise UserError("human selection needs --ids or --human-file")
            sel = fb.select(pool, "human", human_input=record)
    except ValueError as exc:
        raise UserError(str(exc)) from exc

    try:
        run.save_selection(sel, replace=args.replace)
    except rd.ArtifactExistsError as exc:
        raise UserError(f"{exc}; pass --replace to overwrite") from exc
    print(f"selected {len(sel.item_ids)} item(s) from {args.pool_id}: {', '.join(sel.item_ids)}")
    return 0


def _wait_for_selection(run: rd.RunDirectory, pool_id: str, timeout, poll: float):
    deadline = None if timeout is None else time.monotonic() + timeout
    announced = False
    while not run.has_selection(pool_id):
        if not announced:
            print(
                f"pool {pool_id} saved; waiting for a selection "
                f"(serve the run directory and submit, or drop selections/{pool_id}.json)"
            )
            announced = True
        if deadline is not None and time.monotonic() > deadline:
            raise UserError(f"timed out waiting for a selection for pool {pool_id!r}")
        time.sleep(poll)
    return run.load_selection(pool_id)


def cmd_round(args) -> int:
    run = _open_run(args)
    cb = _load_codebook(run)
    weights, cfg = _load_base(run, args.base)
    vocab = tx.default_vocab()
    emb = _ensure_proxy(run, args.seed, cb)
    templates = _templates_from_args(args)

    it_cfg = fb.IterationConfig(
        round1_d_prj=args.round1_d_prj,
        round2_d_prj=args.round2_d_prj,
        tune_opt=_tune_opt_from_args(args),
        guidance=_guidance_from_args(args),
        templates=templates,
        n_per_prompt=args.pool_size,
        eval_n_per_prompt=args.eval_size,
        include_reference=args.include_reference,
        rare_token_mode=args.rare_token,
        negative_from_reference=args.reference_negative,
    )
    style_image = _load_image(args.image)
    style_prompt = tx.build_prompt(args.prompt, args.style)
    pool_id = args.pool_id or f"pool-{args.seed}"

    def select_fn(pool: fb.SamplePool) -> fb.SelectionRecord:
        if run.has_pool(pool_id):
            # A deterministic rerun (say, after a timed-out wait for a human
            # selection) regenerates the identical pool; anything else is a
            # name collision the operator has to resolve.
            if not run.stored_pool_matches(pool):
                raise UserError(
                    f"pool {pool_id!r} already exists with different content; "
                    "pick another --pool-id"
                )
        else:
            run.save_pool(pool)
        if args.strategy == "human":
            record = _wait_for_selection(run, pool_id, args.timeout, args.poll_interval)
            try:
                return fb.select(pool, "human", human_input=record)
            except ValueError as exc:
                raise UserError(f"stored selection for {pool_id!r} is unusable: {exc}") from exc
        sel = fb.select(
            pool, args.strategy, emb=emb, rng=np.random.default_rng([args.seed, 3])
        )
        run.save_selection(sel)
        return sel

    result = fb.run_iteration(
        weights, cfg, cb, vocab, style_image, style_prompt, args.strategy, emb,
        it_cfg=it_cfg, seed=args.seed, pool_id=pool_id, select_fn=select_fn,
    )

    run.save_pool(result.eval_pool)
    ck.save_adapter(run.path("checkpoints", f"{pool_id}-round1.ckpt"), result.theta_round1)
    ck.save_adapter(run.path("checkpoints", f"{pool_id}-round2.ckpt"), result.theta_round2)
    m = result.metrics
    run.save_metrics(
        pool_id,
        [
            {"round": 1, "text_score": m["round1_text"], "style_score": m["round1_style"], "seed": args.seed},
            {"round": 2, "text_score": m["round2_text"], "style_score": m["round2_style"], "seed": args.seed},
        ],
        ["round", "text_score", "style_score", "seed"],
    )
    _snapshot(
        run,
        f"round-{pool_id}",
        {
            "base": args.base,
            "image": args.image,
            "prompt": args.prompt,
            "style": args.style,
            "strategy": args.strategy,
            "templates": list(templates),
            "pool_size": args.pool_size,
            "eval_size": args.eval_size,
            "round1_d_prj": args.round1_d_prj,
            "round2_d_prj": args.round2_d_prj,
            "include_reference": args.include_reference,
            "negative_from_reference": args.reference_negative,
            "rare_token": args.rare_token,
            "guidance": asdict(it_cfg.guidance),
            "opt": asdict(it_cfg.tune_opt),
            "seed": args.seed,
        },
    )
    print(
        f"round complete ({args.strategy}): "
        f"text {m['round1_text']:.4f} -> {m['round2_text']:.4f}, "
        f"style {m['round1_style']:.4f} -> {m['round2_style']:.4f}"
    )
    return 0


def cmd_eval(args) -> int:
    run = _open_run(args)
    cb = _load_codebook(run)
    if not run.has_pool(args.pool_id):
        raise UserError(f"no pool named {args.pool_id!r} in {run.root}")
    pool = run.load_pool(args.pool_id, cb)
    emb = _ensure_proxy(run, args.seed, cb)
    reference = _load_image(args.reference) if args.reference else pool.style_ref

    rows = []
    for item in pool.items:
        row = {
            "item_id": item.item_id,
            "prompt_id": item.prompt_id,
            "text_score": fb.text_score([item.image], [item.prompt], emb),
        }
        row["style_score"] = (
            fb.style_score([item.image], reference, emb) if reference is not None else ""
        )
        rows.append(row)
    name = args.out or f"{args.pool_id}-scores"
    try:
        run.save_metrics(name, rows, ["item_id", "prompt_id", "text_score", "style_score"])
    except rd.ArtifactExistsError as exc:
        raise UserError(str(exc)) from exc

    mean_text = float(np.mean([r["text_score"] for r in rows]))
    line = f"pool {args.pool_id}: mean text {mean_text:.4f}"
    if reference is not None:
        mean_style = float(np.mean([r["style_score"] for r in rows]))
        line += f", mean style {mean_style:.4f}"
    print(line + f"; wrote metrics/{name}.csv")
    return 0


def cmd_serve(args) -> int:
    from .service import serve

    run = _open_run(args, create=False)
    ui_dir = Path(args.ui_dir) if args.ui_dir else None
    if ui_dir is not None and not ui_dir.is_dir():
        raise UserError(f"no UI directory at {ui_dir}")
    print(f"serving {run.root} on http://{args.host}:{args.port}")
    serve(run, port=args.port, host=args.host, ui_dir=ui_dir)
    return 0


# ---------------------------------------------------------------------------
# Parser assembly
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="styletune", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=fn)
        _add_run_flags(p)
        return p

    p = command("gen-data", cmd_gen_data, "render the labeled image catalog")
    p.add_argument("--seeds-per-cell", type=int, default=sd.DEFAULT_SEEDS_PER_CELL,
                   help="renders per style/content pair")

    p = command("fit-tokenizer", cmd_fit_tokenizer, "fit the patch codebook")
    p.add_argument("--k", type=int, default=128, help="codebook size")
    p.add_argument("--patch-size", type=int, default=4, help="square patch edge")

    p = command("pretrain", cmd_pretrain, "train the base masked-token model")
    p.add_argument("--exclude-style", default="frost",
                   help="style name to hold out, or 'none'")
    p.add_argument("--exclude-content", default="none",
                   help="content name to hold out, or 'none'")
    p.add_argument("--steps", type=int, default=tr.DESK_PRETRAIN_OPT.steps)
    p.add_argument("--lr", type=float, default=tr.DESK_PRETRAIN_OPT.lr)
    p.add_argument("--lr-min", type=float, default=tr.DESK_PRETRAIN_OPT.lr_min,
                   help="cosine-decay floor for the learning rate (0 keeps it constant)")
    p.add_argument("--batch-size", type=int, default=tr.DESK_PRETRAIN_OPT.batch_size)
    p.add_argument("--out", default="base", help="checkpoint name under checkpoints/")

    p = command("tune", cmd_tune, "train an adapter on reference images")
    p.add_argument("--base", default="base", help="base model checkpoint name")
    p.add_argument("--image", action="append", required=True, help="reference PNG (repeatable)")
    p.add_argument("--prompt", action="append", required=True,
                   help="content text (one shared, or one per image)")
    p.add_argument("--style", default=None, help="style descriptor, e.g. 'frost'")
    p.add_argument("--rare-token", action="store_true",
                   help="swap the descriptor for the reserved rare identifier")
    p.add_argument("--d-prj", type=int, default=4, help="adapter bottleneck width")
    p.add_argument("--unshared", action="store_true",
                   help="independent per-site weights instead of the shared factorization")
    _add_tune_flags(p, tr.DESK_TUNE_OPT)
    p.add_argument("--out", default="adapter", help="checkpoint name under checkpoints/")

    p = command("sample", cmd_sample, "draw guided samples as PNGs")
    p.add_argument("--base", default="base")
    p.add_argument("--style-adapter", default=None, help="adapter checkpoint name or path")
    p.add_argument("--prompt", required=True, help="content text")
    p.add_argument("--style", default=None, help="style descriptor")
    p.add_argument("--negative", default="", help="negative prompt text (default empty)")
    p.add_argument("--rare-token", action="store_true")
    _add_guidance_flags(p, steps_default=sp.DESK_STEPS)
    p.add_argument("--n", type=int, default=1, help="number of samples")
    p.add_argument("--out", default="sample.png", help="output PNG (or directory when --n > 1)")
    p.add_argument("--dump-tokens", action="store_true", help="write token grids as JSON")

    p = command("compose", cmd_compose, "sample with style and content adapters mixed")
    p.add_argument("--base", default="base")
    p.add_argument("--style-adapter", required=True)
    p.add_argument("--content-adapter", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--style", required=True)
    p.add_argument("--negative", default="")
    _add_guidance_flags(p, steps_default=sp.DESK_STEPS)
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--out", default="sample.png")
    p.add_argument("--dump-tokens", action="store_true")

    p = command("pool", cmd_pool, "generate a candidate pool from an adapter")
    p.add_argument("--base", default="base")
    p.add_argument("--adapter", required=True)
    p.add_argument("--style", required=True, help="style descriptor for the templates")
    p.add_argument("--templates", choices=("desk", "paper"), default="desk")
    p.add_argument("--prompts", type=int, default=None, help="use only the first N templates")
    p.add_argument("--pool-size", type=int, default=8, help="samples per prompt")
    p.add_argument("--reference", default=None, help="style reference PNG for style scores")
    p.add_argument("--pool-id", default=None, help="default: pool-<seed>")
    p.add_argument("--no-score", dest="score", action="store_false",
                   help="skip proxy scoring")
    p.add_argument("--negative", default="", help="negative prompt text (default empty)")
    p.add_argument("--rare-token", action="store_true")
    _add_guidance_flags(p, steps_default=sp.DESK_STEPS)

    p = command("select", cmd_select, "record a selection for a stored pool")
    p.add_argument("--pool-id", required=True)
    p.add_argument("--strategy", choices=("clip", "random", "human"), required=True)
    p.add_argument("--ids", default=None, help="comma-separated item ids (human)")
    p.add_argument("--human-file", default=None, help="JSON file with a 'chosen' list (human)")
    p.add_argument("--annotator", default=None)
    p.add_argument("--replace", action="store_true", help="overwrite an existing selection")

    p = command("round", cmd_round, "one full feedback iteration")
    p.add_argument("--base", default="base")
    p.add_argument("--strategy", choices=("clip", "random", "human"), required=True)
    p.add_argument("--image", required=True, help="style reference PNG")
    p.add_argument("--prompt", default="a circle", help="content text of the reference")
    p.add_argument("--style", required=True, help="style descriptor")
    p.add_argument("--templates", choices=("desk", "paper"), default="desk")
    p.add_argument("--prompts", type=int, default=None)
    p.add_argument("--pool-size", type=int, default=8, help="candidates per prompt")
    p.add_argument("--eval-size", type=int, default=4, help="eval samples per prompt")
    p.add_argument("--round1-d-prj", type=int, default=4)
    p.add_argument("--round2-d-prj", type=int, default=32)
    p.add_argument("--include-reference", action="store_true",
                   help="add the reference pair to the round-2 set")
    p.add_argument("--empty-negative", dest="reference_negative", action="store_false",
                   help="sample pools against the empty negative prompt instead of "
                        "the reference description")
    p.add_argument("--rare-token", action="store_true")
    p.add_argument("--pool-id", default=None)
    p.add_argument("--timeout", type=float, default=None,
                   help="seconds to wait for a human selection (default: forever)")
    p.add_argument("--poll-interval", type=float, default=0.5)
    _add_tune_flags(p, tr.DESK_TUNE_OPT)
    _add_guidance_flags(p, steps_default=sp.DESK_STEPS)

    p = command("eval", cmd_eval, "score a stored pool with the proxy")
    p.add_argument("--pool-id", required=True)
    p.add_argument("--reference", default=None,
                   help="style reference PNG (default: the pool's stored reference)")
    p.add_argument("--out", default=None, help="metrics CSV name (default: <pool-id>-scores)")

    p = command("serve", cmd_serve, "HTTP service for pools and human selection")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--ui-dir", default=None, help="static UI directory to mount at /ui")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    if args.run_dir is None:
        args.run_dir = rd.default_root()
    try:
        return args.func(args)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except rd.ArtifactExistsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 1
    except OracleGateError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
