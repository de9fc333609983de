"""HTTP service for browsing sample pools and collecting human selections.

Every piece of state lives in the run directory; the process holds nothing
in memory between requests, so a restart loses nothing.  Error responses
share one JSON shape: {"code": <stable machine code>, "message": <human
text>, ...} with extra fields (like the offending ids) where they help.
"""

from __future__ import annotations

import json
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, Request
from fastapi.responses import FileResponse, JSONResponse
from fastapi.staticfiles import StaticFiles

from . import feedback as fb
from .rundir import RunDirectory


def _error(status: int, code: str, message: str, **extra) -> JSONResponse:
    return JSONResponse({"code": code, "message": message, **extra}, status_code=status)


def _pool_manifest(run: RunDirectory, pool_id: str) -> Optional[dict]:
    path = run.pool_dir(pool_id) / "manifest.json"
    if not path.is_file():
        return None
    return json.loads(path.read_text())


def build_app(run: RunDirectory, ui_dir: Optional[Path] = None) -> FastAPI:
    app = FastAPI(title="style-tuning feedback service", docs_url=None, redoc_url=None)

    @app.get("/api/pools")
    def list_pools() -> list:
        out = []
        for pool_id in run.list_pools():
            manifest = _pool_manifest(run, pool_id)
            if manifest is None:
                continue
            prompt_ids = {item["prompt_id"] for item in manifest["items"]}
            out.append(
                {
                    "pool_id": pool_id,
                    "n_items": len(manifest["items"]),
                    "n_prompts": len(prompt_ids),
                    "has_reference": manifest.get("reference") is not None,
                    "has_selection": run.has_selection(pool_id),
                }
            )
        return out

    @app.get("/api/pools/{pool_id}")
    def get_pool(pool_id: str):
        manifest = _pool_manifest(run, pool_id)
        if manifest is None:
            return _error(404, "unknown_pool", f"no pool named {pool_id!r}")
        body = dict(manifest)
        for item in body["items"]:
            item["image_url"] = f"/api/images/{item['item_id']}.png"
        if manifest.get("reference"):
            body["reference_url"] = f"/api/reference/{pool_id}.png"
        body["has_selection"] = run.has_selection(pool_id)
        if body["has_selection"]:
            body["selection"] = json.loads(run.selection_path(pool_id).read_text())
        return body

    @app.get("/api/images/{item_id}.png")
    def get_image(item_id: str):
        pool_id, _, _ = item_id.rpartition("-")
        path = run.pool_dir(pool_id) / f"{item_id}.png"
        if not pool_id or not path.is_file():
            return _error(404, "unknown_item", f"no image for item {item_id!r}")
        return FileResponse(path, media_type="image/png")

    @app.get("/api/reference/{pool_id}.png")
    def get_reference(pool_id: str):
        path = run.pool_dir(pool_id) / "reference.png"
        if not path.is_file():
            return _error(404, "unknown_pool", f"no style reference for pool {pool_id!r}")
        return FileResponse(path, media_type="image/png")

    @app.post("/api/pools/{pool_id}/selection")
    async def post_selection(pool_id: str, request: Request, replace: bool = False):
        manifest = _pool_manifest(run, pool_id)
        if manifest is None:
            return _error(404, "unknown_pool", f"no pool named {pool_id!r}")
        try:
            body = await request.json()
        except Exception:
            return _error(400, "malformed_body", "request body must be JSON")
        if not isinstance(body, dict):
            return _error(400, "malformed_body", "request body must be a JSON object")
        chosen = body.get("chosen")
        if (
            not isinstance(chosen, list)
            or not chosen
            or not all(isinstance(i, str) for i in chosen)
        ):
            return _error(400, "malformed_body", "'chosen' must be a non-empty list of item ids")
        if len(set(chosen)) != len(chosen):
            return _error(400, "malformed_body", "'chosen' contains duplicate ids")
        if len(chosen) > len(manifest["items"]):
            return _error(400, "malformed_body", "'chosen' lists more items than the pool holds")
        annotator = body.get("annotator")
        if annotator is not None and not isinstance(annotator, str):
            return _error(400, "malformed_body", "'annotator' must be a string when present")
        known = {item["item_id"] for item in manifest["items"]}
        unknown = [i for i in chosen if i not in known]
        if unknown:
            return _error(
                400, "unknown_items", f"selection references unknown items: {unknown}",
                unknown_ids=unknown,
            )
        if run.has_selection(pool_id) and not replace:
            return _error(409, "selection_exists", f"pool {pool_id!r} already has a selection")
        record = fb.SelectionRecord(
            pool_id=pool_id,
            strategy="human",
            item_ids=tuple(chosen),
            timestamp=datetime.now(timezone.utc).isoformat(),
            annotator=annotator,
        )
        run.save_selection(record, replace=replace)
        return JSONResponse(
            {
                "pool_id": pool_id,
                "count": len(chosen),
                "item_ids": list(chosen),
                "timestamp": record.timestamp,
            },
            status_code=201,
        )

    if ui_dir is not None and Path(ui_dir).is_dir():
        app.mount("/ui", StaticFiles(directory=ui_dir, html=True), name="ui")

    return app


def serve(run: RunDirectory, port: int = 8000, host: str = "127.0.0.1", ui_dir=None) -> None:
    import uvicorn

    uvicorn.run(build_app(run, ui_dir=ui_dir), host=host, port=port, log_level="warning")
