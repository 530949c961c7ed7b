"""HTTP JSON API for steering sessions.

Endpoints mirror the pipeline's intervention surface one-to-one; errors
come back as {code, message} with a matching status. The PNG component
route is a presentation convenience for the web console; the canonical
artifact stays PPM.
"""

from __future__ import annotations

import io
from pathlib import Path

from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles

from . import errors as err
from .image import write_ppm
from .pipeline import Intervention, SessionStore
from .planner import PromptText
from .session import PipelineConfig

_STATUS = {
    "unknown_session": 404,
    "not_ready": 409,
    "illegal_transition": 409,
    "illegal_intervention": 409,
    "malformed_record": 400,
    "no_entity_found": 400,
    "cyclic_layout": 400,
    "unknown_subtask": 400,
    "unknown_entity": 400,
    "capacity_exceeded": 400,
    "session_failure": 500,
}


def _error_response(exc: err.AtelierError) -> JSONResponse:
    return JSONResponse(
        status_code=_STATUS.get(exc.code, 500),
        content={"code": exc.code, "message": str(exc)},
    )


def _session_view(runner) -> dict:
    state = runner.state
    view: dict = {
        "session_id": runner.session.session_id,
        "state": runner.session.state.value,
        "config": runner.config.to_json(),
        "prompt": runner.prompt.text,
        "events": [e.to_json() for e in runner.session.events],
        "plan": state.plan.to_json() if state.plan is not None else None,
        "protection": {
            "amplitude": state.amplitude,
            "chips_per_bit": state.chips_per_bit,
        },
        "components": [],
        "metrics": (
            runner.session.metrics.to_json() if runner.session.metrics else None
        ),
    }
    if state.plan is not None:
        tau = runner.config.alignment_threshold
        for subtask in state.plan.subtasks:
            attempts = state.seeds.get(subtask.id, {})
            score = state.final_score(subtask.id)
            view["components"].append(
                {
                    "subtask_id": subtask.id,
                    "entity": subtask.entity,
                    "kind": subtask.kind,
                    "attempts": len(attempts),
                    "score": score if attempts else None,
                    "passed": bool(attempts)
                    and (score >= tau or subtask.id in state.overridden),
                    "overridden": subtask.id in state.overridden,
                    "threshold": tau,
                }
            )
    return view


def create_app(store: SessionStore, static_dir: Path | None = None) -> FastAPI:
    app = FastAPI(title="atelier", docs_url=None, redoc_url=None)

    @app.exception_handler(err.AtelierError)
    async def _handle(request: Request, exc: err.AtelierError):
        return _error_response(exc)

    @app.exception_handler(ValueError)
    async def _handle_value(request: Request, exc: ValueError):
        return JSONResponse(
            status_code=400, content={"code": "bad_request", "message": str(exc)}
        )

    @app.post("/sessions")
    async def create_session(body: dict):
        prompt = PromptText(str(body.get("prompt", "")))
        config = PipelineConfig.from_json(body.get("config", {}))
        runner = store.create(prompt, config)
        return {"session_id": runner.session.session_id, "state": runner.session.state.value}

    @app.get("/sessions")
    async def list_sessions():
        return {"sessions": store.ids()}

    @app.get("/sessions/{session_id}")
    async def get_session(session_id: str):
        return _session_view(store.get(session_id))

    @app.post("/sessions/{session_id}/advance")
    async def advance(session_id: str):
        state = store.advance(session_id)
        return {"session_id": session_id, "state": state.value}

    @app.post("/sessions/{session_id}/interventions")
    async def intervene(session_id: str, body: dict):
        runner = store.get(session_id)
        event = runner.submit_intervention(Intervention.from_json(body))
        return {
            "session_id": session_id,
            "state": runner.session.state.value,
            "seq": event.seq,
        }

    @app.get("/sessions/{session_id}/artifact")
    async def artifact(session_id: str):
        art = store.get(session_id).artifact()
        return Response(
            content=write_ppm(art.image),
            media_type="image/x-portable-pixmap",
            headers={"Content-Disposition": f'attachment; filename="{session_id}.ppm"'},
        )

    @app.get("/sessions/{session_id}/provenance")
    async def provenance(session_id: str):
        art = store.get(session_id).artifact()
        return Response(
            content=art.provenance.to_canonical_json(), media_type="application/json"
        )

    @app.get("/sessions/{session_id}/metrics")
    async def metrics(session_id: str):
        return store.get(session_id).metrics_report().to_json()

    @app.get("/sessions/{session_id}/components/{subtask_id}.png")
    async def component_png(session_id: str, subtask_id: int):
        from PIL import Image as PILImage  # presentation-only dependency

        runner = store.get(session_id)
        if runner.state.plan is None or subtask_id not in runner.state.seeds:
            raise err.NotReady(f"no component for subtask {subtask_id}")
        comp = runner._component(subtask_id, runner.state.best_attempt(subtask_id))
        rgba = (comp.image.quantized(), (comp.alpha * 255).astype("uint8"))
        pil = PILImage.fromarray(rgba[0], mode="RGB").convert("RGBA")
        pil.putalpha(PILImage.fromarray(rgba[1], mode="L"))
        buf = io.BytesIO()
        pil.save(buf, format="PNG")
        return Response(content=buf.getvalue(), media_type="image/png")

    @app.get("/sessions/{session_id}/scene.png")
    async def scene_png(session_id: str):
        from PIL import Image as PILImage

        runner = store.get(session_id)
        art = runner.artifact()
        pil = PILImage.fromarray(art.image.quantized(), mode="RGB")
        buf = io.BytesIO()
        pil.save(buf, format="PNG")
        return Response(content=buf.getvalue(), media_type="image/png")

    if static_dir is not None and Path(static_dir).exists():
        app.mount("/", StaticFiles(directory=static_dir, html=True), name="console")
    return app
