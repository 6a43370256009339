"""HTTP backend service answering the generator/reconstructor wire protocol.

Runs the deterministic stubs behind the same multipart endpoints a real
generation or reconstruction backend would expose, so pipelines configured
with an HTTP backend can be exercised end to end:

    POST /generate     coarse.png + mask.png + reference.png + tokens.bin
                       + meta json  ->  refined.png
    POST /reconstruct  cameras.txt + view_###.png [+ depth_###.png] + meta
                       json  ->  scene.ply
    GET  /healthz      liveness probe

Swap in real backends by passing custom clients to create_app.
"""

from __future__ import annotations

from fastapi import FastAPI, File, Form, HTTPException, Response, UploadFile

from . import __version__, formats
from .backends import (
    GeneratorClient,
    GeneratorRequest,
    ReconstructorClient,
    StubGenerator,
    StubReconstructor,
    ViewRecord,
)
from .errors import ResplatError
from .wire import GenerateMeta, HealthResponse, ReconstructMeta


def create_app(
    generator: GeneratorClient | None = None,
    reconstructor: ReconstructorClient | None = None,
) -> FastAPI:
    gen = generator or StubGenerator()
    recon = reconstructor or StubReconstructor()
    app = FastAPI(title="resplat backend", version=__version__)

    @app.get("/healthz", response_model=HealthResponse)
    def healthz() -> HealthResponse:
        return HealthResponse(status="ok", service="resplat-backend", version=__version__)

    @app.post("/generate")
    async def generate(
        meta: str = Form(...),
        coarse: UploadFile = File(...),
        mask: UploadFile = File(...),
        reference: UploadFile = File(...),
        tokens: UploadFile = File(...),
    ) -> Response:
        parsed = GenerateMeta.model_validate_json(meta)
        try:
            request = GeneratorRequest(
                coarse=formats.load_image_png(await coarse.read()),
                mask=formats.load_mask_png(await mask.read()),
                reference=formats.load_image_png(await reference.read()),
                tokens=formats.load_token_grid(await tokens.read()),
                request_id=parsed.request_id,
            )
            if request.coarse.shape[:2] != (parsed.height, parsed.width):
                raise HTTPException(422, detail="coarse image size does not match request metadata")
            refined = gen.refine(request)
        except ResplatError as exc:
            raise HTTPException(422, detail=str(exc)) from exc
        return Response(
            content=formats.image_png_bytes(refined),
            media_type="image/png",
            headers={"x-request-id": parsed.request_id},
        )

    @app.post("/reconstruct")
    async def reconstruct(
        meta: str = Form(...),
        cameras: UploadFile = File(...),
        views: list[UploadFile] = File(...),
        depths: list[UploadFile] = File(default=[]),
    ) -> Response:
        parsed = ReconstructMeta.model_validate_json(meta)
        if len(parsed.has_depth) != parsed.n_views or len(views) != parsed.n_views:
            raise HTTPException(422, detail="view count does not match request metadata")
        if sum(parsed.has_depth) != len(depths):
            raise HTTPException(422, detail="depth file count does not match request metadata")
        try:
            poses = formats.parse_camera_text((await cameras.read()).decode("utf-8"), origin="cameras.txt")
            if len(poses) != parsed.n_views:
                raise HTTPException(422, detail="camera count does not match request metadata")
            records = []
            depth_iter = iter(depths)
            for i in range(parsed.n_views):
                depth = formats.load_depth_png(await next(depth_iter).read()) if parsed.has_depth[i] else None
                records.append(ViewRecord(
                    image=formats.load_image_png(await views[i].read()),
                    pose=poses[i],
                    depth=depth,
                ))
            scene = recon.reconstruct(records, parsed.request_id)
        except ResplatError as exc:
            raise HTTPException(422, detail=str(exc)) from exc
        return Response(
            content=formats.scene_ply_bytes(scene),
            media_type="application/octet-stream",
            headers={"x-request-id": parsed.request_id},
        )

    return app


app = create_app()
