"""HTTP state API over any provider; doubles as the mock beacon node in tests."""

from __future__ import annotations

from fastapi import FastAPI, HTTPException, Response

from .schemas import SlotRange
from .sources import DecodeError, StateNotFound, StateProvider


def create_app(provider: StateProvider) -> FastAPI:
    app = FastAPI(title="beacon-rewards state API")

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok", "backend": provider.kind}

    @app.get("/range", response_model=SlotRange)
    def slot_range() -> SlotRange:
        return provider.slot_range()

    @app.get("/states/{slot}")
    def get_state(slot: int) -> Response:
        try:
            snap = provider.get_state(slot)
        except StateNotFound as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        except DecodeError as exc:
            raise HTTPException(status_code=500, detail=str(exc))
        # Pre-serialized so every backend returns the same bytes.
        return Response(content=snap.model_dump_json(), media_type="application/json")

    return app
