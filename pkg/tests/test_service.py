import json

import numpy as np
import pytest
from fastapi.testclient import TestClient

from resplat import formats
from resplat.backends import (
    GeneratorRequest,
    HttpGenerator,
    HttpReconstructor,
    StubGenerator,
    StubReconstructor,
)
from resplat.scene import TokenGrid
from resplat.service import create_app
from resplat.synthetic import make_rgbd_fixture


@pytest.fixture(scope="module")
def client():
    return TestClient(create_app())


def generator_payload(rng, request_id="svc-1", size=32):
    coarse = rng.random((size, size, 3)).astype(np.float32)
    mask = rng.random((size, size)) < 0.3
    tokens = TokenGrid(np.zeros((2, 2, 768), np.float32))
    meta = {"request_id": request_id, "width": size, "height": size}
    files = {
        "coarse": ("coarse.png", formats.image_png_bytes(coarse), "image/png"),
        "mask": ("mask.png", formats.mask_png_bytes(mask), "image/png"),
        "reference": ("reference.png", formats.image_png_bytes(coarse), "image/png"),
        "tokens": ("tokens.bin", formats.token_grid_bytes(tokens), "application/octet-stream"),
    }
    return coarse, mask, tokens, meta, files


class TestHealth:
    def test_healthz(self, client):
        resp = client.get("/healthz")
        assert resp.status_code == 200
        body = resp.json()
        assert body["status"] == "ok"
        assert body["service"] == "resplat-backend"


class TestGenerateEndpoint:
    def test_round_trip_matches_stub(self, client, rng):
        coarse, mask, tokens, meta, files = generator_payload(rng)
        resp = client.post("/generate", data={"meta": json.dumps(meta)}, files=files)
        assert resp.status_code == 200
        assert resp.headers["content-type"] == "image/png"
        assert resp.headers["x-request-id"] == "svc-1"
        refined = formats.load_image_png(resp.content)
        # the endpoint decodes the quantized PNG, so compare against the stub
        # run on the same quantized input
        quantized = formats.load_image_png(formats.image_png_bytes(coarse))
        direct = StubGenerator().refine(GeneratorRequest(quantized, mask, quantized, tokens, "x"))
        assert np.abs(refined - direct).max() <= 1.0 / 255.0 + 1e-6

    def test_size_mismatch_rejected(self, client, rng):
        _, _, _, meta, files = generator_payload(rng)
        meta["width"] = 999
        resp = client.post("/generate", data={"meta": json.dumps(meta)}, files=files)
        assert resp.status_code == 422

    def test_bad_token_container_rejected(self, client, rng):
        _, _, _, meta, files = generator_payload(rng)
        files["tokens"] = ("tokens.bin", b"garbage-bytes", "application/octet-stream")
        resp = client.post("/generate", data={"meta": json.dumps(meta)}, files=files)
        assert resp.status_code == 422


class TestReconstructEndpoint:
    def test_round_trip_matches_stub(self, client):
        views = make_rgbd_fixture(2, size=64)
        meta = {"request_id": "svc-recon", "n_views": 2, "has_depth": [True, True]}
        files = [
            ("cameras", ("cameras.txt", formats.camera_set_text([v.pose for v in views]).encode(), "text/plain")),
        ]
        for i, view in enumerate(views):
            files.append(("views", (f"view_{i:03d}.png", formats.image_png_bytes(view.image), "image/png")))
            files.append(("depths", (f"depth_{i:03d}.png", formats.depth_png_bytes(view.depth), "image/png")))
        resp = client.post("/reconstruct", data={"meta": json.dumps(meta)}, files=files)
        assert resp.status_code == 200
        scene = formats.load_scene_ply(resp.content)
        direct = StubReconstructor().reconstruct(views, "x")
        assert len(scene) == len(direct)

    def test_count_mismatch_rejected(self, client):
        views = make_rgbd_fixture(2, size=64)
        meta = {"request_id": "bad", "n_views": 3, "has_depth": [True, True, True]}
        files = [
            ("cameras", ("cameras.txt", formats.camera_set_text([v.pose for v in views]).encode(), "text/plain")),
            ("views", ("view_000.png", formats.image_png_bytes(views[0].image), "image/png")),
            ("views", ("view_001.png", formats.image_png_bytes(views[1].image), "image/png")),
        ]
        resp = client.post("/reconstruct", data={"meta": json.dumps(meta)}, files=files)
        assert resp.status_code == 422


class TestHttpClientsAgainstService:
    def test_http_generator_through_asgi(self, client, rng):
        coarse, mask, tokens, _, _ = generator_payload(rng, request_id="client-1")
        gen = HttpGenerator(client=client)
        out = gen.refine(GeneratorRequest(coarse, mask, coarse, tokens, "client-1"))
        assert out.shape == coarse.shape
        # unmasked pixels survive the PNG round trips exactly
        quantized = formats.load_image_png(formats.image_png_bytes(coarse))
        np.testing.assert_array_equal(out[~mask], quantized[~mask])

    def test_http_reconstructor_through_asgi(self, client):
        views = make_rgbd_fixture(2, size=64)
        recon = HttpReconstructor(client=client)
        scene = recon.reconstruct(views, "client-2")
        assert len(scene) == 2 * (64 // 4) ** 2

    def test_http_error_becomes_backend_error(self, rng):
        from resplat.errors import BackendError

        broken = TestClient(create_app(), raise_server_exceptions=False)
        gen = HttpGenerator(client=broken)
        coarse = rng.random((8, 8, 3)).astype(np.float32)
        tokens = TokenGrid(np.zeros((1, 1, 8), np.float32))
        # mask shape disagrees with the image; the service fails the request
        request = GeneratorRequest(coarse, np.zeros((6, 6), bool), coarse, tokens, "err")
        with pytest.raises(BackendError):
            gen.refine(request)
