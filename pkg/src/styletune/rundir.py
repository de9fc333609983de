"""Run-directory persistence: artifacts are written atomically, exactly once.

Layout under the root:

    data/         rendered reference images + manifest
    checkpoints/  model, codebook, adapter, and proxy checkpoints
    pools/        one subdirectory per sample pool (manifest + PNGs)
    selections/   {pool_id}.json selection records
    metrics/      CSV score tables
    config/       JSON snapshots of the flags/seeds that made each artifact

Every write goes through write-then-rename so concurrent readers never see
a half-written file; a second write to the same path is refused unless the
caller explicitly asks to replace (used only by selection replacement).
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Optional

import numpy as np

from . import feedback as fb
from . import textenc as tx
from .synthdata import load_png, to_png_bytes

SUBDIRS = ("data", "checkpoints", "pools", "selections", "metrics", "config")
RUN_DIR_ENV = "STYLEDROP_RUN_DIR"


def default_root() -> Path:
    return Path(os.environ.get(RUN_DIR_ENV, "./run"))


class ArtifactExistsError(FileExistsError):
    pass


def atomic_write_bytes(path: Path, payload: bytes, replace: bool = False) -> None:
    path = Path(path)
    if path.exists() and not replace:
        raise ArtifactExistsError(f"refusing to overwrite {path}")
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_json(path: Path, obj, replace: bool = False) -> None:
    payload = (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()
    atomic_write_bytes(path, payload, replace=replace)


def prompt_to_json(p: tx.PromptSpec) -> dict:
    return {
        "content": list(p.content_text),
        "descriptor": list(p.style_descriptor) if p.style_descriptor is not None else None,
        "negative": p.is_negative,
        "text": p.as_text(),
    }


def prompt_from_json(d: dict) -> tx.PromptSpec:
    descriptor = d.get("descriptor")
    return tx.PromptSpec(
        tuple(d["content"]),
        tuple(descriptor) if descriptor is not None else None,
        bool(d.get("negative", False)),
    )


def pool_manifest(pool: fb.SamplePool) -> dict:
    """The JSON manifest a pool serializes to (token grids are canonical)."""
    return {
        "pool_id": pool.pool_id,
        "reference": "reference.png" if pool.style_ref is not None else None,
        "items": [
            {
                "item_id": it.item_id,
                "prompt_id": it.prompt_id,
                "prompt": prompt_to_json(it.prompt),
                "tokens": [int(t) for t in it.tokens],
                "image": f"{it.item_id}.png",
                "scores": {k: float(v) for k, v in sorted(it.scores.items())},
            }
            for it in pool.items
        ],
    }


def selection_to_json(sel: fb.SelectionRecord) -> dict:
    return {
        "pool_id": sel.pool_id,
        "strategy": sel.strategy,
        "item_ids": list(sel.item_ids),
        "timestamp": sel.timestamp,
        "annotator": sel.annotator,
    }


def selection_from_json(d: dict) -> fb.SelectionRecord:
    return fb.SelectionRecord(
        d["pool_id"], d["strategy"], tuple(d["item_ids"]), d.get("timestamp"), d.get("annotator")
    )


class RunDirectory:
    def __init__(self, root: Path | str, create: bool = True):
        self.root = Path(root)
        if create:
            for sub in SUBDIRS:
                (self.root / sub).mkdir(parents=True, exist_ok=True)
        elif not self.root.is_dir():
            raise FileNotFoundError(f"run directory {self.root} does not exist")

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    # -- config snapshots ---------------------------------------------------

    def snapshot_config(self, name: str, payload: dict) -> Path:
        target = self.path("config", f"{name}.json")
        atomic_write_json(target, payload)
        return target

    # -- pools --------------------------------------------------------------

    def pool_dir(self, pool_id: str) -> Path:
        return self.path("pools", pool_id)

    def save_pool(self, pool: fb.SamplePool) -> Path:
        pdir = self.pool_dir(pool.pool_id)
        if pdir.exists():
            raise ArtifactExistsError(f"pool {pool.pool_id} already stored")
        manifest = pool_manifest(pool)
        for it, entry in zip(pool.items, manifest["items"]):
            atomic_write_bytes(pdir / entry["image"], to_png_bytes(it.image))
        if pool.style_ref is not None:
            atomic_write_bytes(pdir / "reference.png", to_png_bytes(pool.style_ref))
        atomic_write_json(pdir / "manifest.json", manifest)
        return pdir

    def stored_pool_matches(self, pool: fb.SamplePool) -> bool:
        """True when the stored manifest equals this pool's manifest exactly
        (used to resume a deterministic run that already wrote its pool)."""
        path = self.pool_dir(pool.pool_id) / "manifest.json"
        if not path.is_file():
            return False
        return json.loads(path.read_text()) == pool_manifest(pool)

    def load_pool(self, pool_id: str, codebook) -> fb.SamplePool:
        """Rebuild a pool; token grids are canonical, so item images are
        re-decoded through the codebook rather than read back from the
        8-bit display PNGs (centroid values need not be 8-bit exact)."""
        from .tokenizer import decode

        pdir = self.pool_dir(pool_id)
        manifest = json.loads((pdir / "manifest.json").read_text())
        items = tuple(
            fb.PoolItem(
                item_id=d["item_id"],
                prompt_id=d["prompt_id"],
                prompt=prompt_from_json(d["prompt"]),
                tokens=np.array(d["tokens"], dtype=np.int64),
                image=decode(np.array(d["tokens"], dtype=np.int64), codebook),
                scores=dict(d["scores"]),
            )
            for d in manifest["items"]
        )
        ref = load_png(pdir / manifest["reference"]) if manifest.get("reference") else None
        return fb.SamplePool(pool_id=manifest["pool_id"], items=items, style_ref=ref)

    def list_pools(self) -> list:
        pools_dir = self.path("pools")
        return sorted(
            p.name for p in pools_dir.iterdir() if (p / "manifest.json").is_file()
        ) if pools_dir.is_dir() else []

    def has_pool(self, pool_id: str) -> bool:
        return (self.pool_dir(pool_id) / "manifest.json").is_file()

    # -- selections ---------------------------------------------------------

    def selection_path(self, pool_id: str) -> Path:
        return self.path("selections", f"{pool_id}.json")

    def save_selection(self, sel: fb.SelectionRecord, replace: bool = False) -> Path:
        target = self.selection_path(sel.pool_id)
        atomic_write_json(target, selection_to_json(sel), replace=replace)
        return target

    def load_selection(self, pool_id: str) -> fb.SelectionRecord:
        return selection_from_json(json.loads(self.selection_path(pool_id).read_text()))

    def has_selection(self, pool_id: str) -> bool:
        return self.selection_path(pool_id).is_file()

    # -- metrics ------------------------------------------------------------

    def save_metrics(self, name: str, rows: list, fieldnames: list) -> Path:
        lines = [",".join(fieldnames)]
        for row in rows:
            lines.append(",".join(str(row[f]) for f in fieldnames))
        target = self.path("metrics", f"{name}.csv")
        atomic_write_bytes(target, ("\n".join(lines) + "\n").encode())
        return target
