"""JSON-over-HTTP facade over the catalog review queue and patch store.

Local tool, no authentication; mutations funnel through the catalog's single
writer lock. Every response carries the catalog version in X-Catalog-Version
so clients can detect staleness.
"""

from __future__ import annotations

from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, Response
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from .catalog import (Catalog, CatalogError, ConflictError, NotFoundError,
                      ValidationError)
from .imagecore import png_bytes

DEFAULT_BIND = ("127.0.0.1", 8077)


class DecisionBody(BaseModel):
    action: str
    class_id: int | None = None
    name: str | None = None
    decided_by: str = "anonymous"


def _error_code(exc: CatalogError) -> tuple[int, str]:
    if isinstance(exc, NotFoundError):
        return 404, "not_found"
    if isinstance(exc, ConflictError):
        return 409, "conflict"
    if isinstance(exc, ValidationError):
        return 400, "invalid"
    return 500, "io"


def _item_summary(item) -> dict:
    return {
        "id": item.item_id,
        "patch_url": f"/api/patches/{item.patch.patch_id}.png",
        "candidates": item.prediction.get("candidates", [])[:3],
        "uncertainty": item.prediction.get("uncertainty"),
    }


def _item_full(item) -> dict:
    return {
        "id": item.item_id,
        "state": item.state,
        "patch_id": item.patch.patch_id,
        "patch_url": f"/api/patches/{item.patch.patch_id}.png",
        "prediction": item.prediction,
        "decision": item.decision,
        "decided_by": item.decided_by,
        "enqueued_at": item.enqueued_at,
        "decided_at": item.decided_at,
    }


def _mc_record(mc) -> dict:
    return {
        "class_id": mc.class_id,
        "name": mc.name,
        "status": mc.status,
        "created_at": mc.created_at,
        "exemplar_count": len(mc.exemplars),
        "exemplars": [f"/api/patches/{ref.patch_id}.png"
                      for ref in mc.exemplars[:8]],
    }


def create_app(catalog: Catalog, ui_dir=None) -> FastAPI:
    app = FastAPI(title="mcforge review service")

    @app.middleware("http")
    async def version_header(request: Request, call_next):
        response = await call_next(request)
        response.headers["X-Catalog-Version"] = str(catalog.version)
        return response

    @app.exception_handler(CatalogError)
    async def catalog_error(request: Request, exc: CatalogError):
        status, code = _error_code(exc)
        return JSONResponse(status_code=status,
                            content={"code": code, "message": str(exc)},
                            headers={"X-Catalog-Version": str(catalog.version)})

    @app.exception_handler(RequestValidationError)
    async def invalid_body(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400,
                            content={"code": "invalid", "message": str(exc)},
                            headers={"X-Catalog-Version": str(catalog.version)})

    @app.get("/api/queue")
    def queue(sort: str | None = None):
        items = catalog.pending_reviews(sort=sort)
        return [_item_summary(item) for item in items]

    @app.get("/api/items/{item_id}")
    def item(item_id: str):
        return _item_full(catalog.get_item(item_id))

    @app.get("/api/patches/{patch_id}.png")
    def patch_png(patch_id: str):
        pixels = catalog.patch_pixels(patch_id)
        return Response(content=png_bytes(pixels), media_type="image/png")

    @app.get("/api/mcs")
    def mcs():
        return [_mc_record(mc) for mc in catalog.mcs]

    @app.post("/api/items/{item_id}/decision")
    def decide(item_id: str, body: DecisionBody):
        if body.action not in ("assign", "create_new"):
            raise ValidationError(f"unknown action {body.action!r}")
        if body.action == "assign" and body.class_id is None:
            raise ValidationError("assign requires class_id")
        if body.action == "create_new" and not (body.name or "").strip():
            raise ValidationError("create_new requires a non-empty name")
        decision = {"action": body.action}
        if body.class_id is not None:
            decision["class_id"] = body.class_id
        if body.name is not None:
            decision["name"] = body.name
        item = catalog.decide_review(item_id, decision, body.decided_by)
        catalog.snapshot()
        return _item_full(item)

    if ui_dir is not None and Path(ui_dir).exists():
        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app


def serve(catalog: Catalog, host: str = DEFAULT_BIND[0],
          port: int = DEFAULT_BIND[1], ui_dir=None) -> None:
    import uvicorn
    uvicorn.run(create_app(catalog, ui_dir=ui_dir), host=host, port=port)
