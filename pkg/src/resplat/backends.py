"""Generator and reconstructor backends: in-process stubs, directory
exchange, and HTTP clients.

The real refinement generator and feed-forward reconstructor are external
systems. Three client flavors speak to them:

- stubs run in-process and are fully deterministic (onion-peel inpainting
  and RGBD back-projection), closing the loop without any learned model
- directory-exchange clients drop a request directory and poll for a done
  marker, decoupling foreign runtimes completely
- HTTP clients post the same payload as multipart form data; the bundled
  FastAPI service (resplat.service) answers that protocol with the stubs

Backend spec strings: "stub", "dir:<root>", or an http(s) URL. The
RESPLAT_BACKEND_URL environment variable overrides either with an HTTP
endpoint.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import httpx
import numpy as np

from . import formats
from .errors import BackendError
from .scene import CameraPose, GaussianScene, TokenGrid, check_image, check_mask
from .wire import (
    GENERATOR_DONE_MARKER,
    GENERATOR_RESULT_FILE,
    RECONSTRUCTOR_RESULT_FILE,
    GenerateMeta,
    ReconstructMeta,
)

BACKEND_URL_ENV = "RESPLAT_BACKEND_URL"


@dataclass(frozen=True)
class GeneratorRequest:
    """One view-refinement request: coarse render, refined mask, reference."""

    coarse: np.ndarray      # (H, W, 3)
    mask: np.ndarray        # (H, W) bool, True = generate
    reference: np.ndarray   # (H, W, 3), the first input view by default
    tokens: TokenGrid
    request_id: str


@dataclass(frozen=True)
class ViewRecord:
    """A posed view, optionally with depth, as reconstructor input."""

    image: np.ndarray
    pose: CameraPose
    depth: np.ndarray | None = None


class GeneratorClient(Protocol):
    def refine(self, request: GeneratorRequest) -> np.ndarray: ...


class ReconstructorClient(Protocol):
    def reconstruct(self, views: list[ViewRecord], request_id: str) -> GaussianScene: ...


# ---------------------------------------------------------------------------
# stub generator: onion-peel inpainting
# ---------------------------------------------------------------------------

def inpaint_nearest(values: np.ndarray, hole: np.ndarray, empty_fill: float = 0.5) -> np.ndarray:
    """Fill holes by iterative diffusion from the hole boundary.

    Each pass assigns every hole pixel with at least one valid 4-neighbor the
    mean of those neighbors, then marks it valid; rings fill inward one pixel
    per pass. Fully deterministic. A map with no valid pixels at all is
    filled with `empty_fill`.
    """
    hole = check_mask(hole)
    arr = np.asarray(values, dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[..., None]
    if arr.shape[:2] != hole.shape:
        raise ValueError(f"value shape {arr.shape[:2]} does not match hole shape {hole.shape}")
    out = arr.copy()
    valid = ~hole
    if not valid.any():
        out[:] = empty_fill
        return (out[..., 0] if squeeze else out).astype(np.float32)

    while not valid.all():
        acc = np.zeros_like(out)
        cnt = np.zeros(hole.shape)
        weighted = out * valid[..., None]
        # 4-neighbor sums via padded shifts
        acc[1:, :] += weighted[:-1, :]
        cnt[1:, :] += valid[:-1, :]
        acc[:-1, :] += weighted[1:, :]
        cnt[:-1, :] += valid[1:, :]
        acc[:, 1:] += weighted[:, :-1]
        cnt[:, 1:] += valid[:, :-1]
        acc[:, :-1] += weighted[:, 1:]
        cnt[:, :-1] += valid[:, 1:]
        frontier = ~valid & (cnt > 0)
        out[frontier] = acc[frontier] / cnt[frontier][:, None]
        valid |= frontier
    return (out[..., 0] if squeeze else out).astype(np.float32)


class StubGenerator:
    """Deterministic inpainting stand-in for the learned generator."""

    def refine(self, request: GeneratorRequest) -> np.ndarray:
        coarse = check_image(request.coarse)
        mask = check_mask(request.mask)
        return np.clip(inpaint_nearest(coarse, mask), 0.0, 1.0)


# ---------------------------------------------------------------------------
# stub reconstructor: RGBD back-projection
# ---------------------------------------------------------------------------

class StubReconstructor:
    """Back-project posed RGBD views into isotropic Gaussians.

    One Gaussian per stride x stride cell (at the cell center), sized to
    cover its footprint: sigma = sigma_px * depth / fx world units, which
    projects back to roughly sigma_px pixels. Views without depth are
    accepted but contribute nothing.
    """

    def __init__(self, stride: int = 4, sigma_px: float = 2.5, opacity: float = 0.9):
        self.stride = stride
        self.sigma_px = sigma_px
        self.opacity = opacity

    def reconstruct(self, views: list[ViewRecord], request_id: str = "") -> GaussianScene:
        centers, scales, colors = [], [], []
        for view in views:
            if view.depth is None:
                continue
            img = check_image(view.image)
            cam = view.pose
            h, w = view.depth.shape
            rows = np.arange(self.stride // 2, h, self.stride)
            cols = np.arange(self.stride // 2, w, self.stride)
            cc, rr = np.meshgrid(cols, rows)
            depth = np.asarray(view.depth, dtype=np.float64)[rr, cc]
            good = depth > 0
            if not good.any():
                continue
            rr, cc, depth = rr[good], cc[good], depth[good]
            x_cam = (cc - cam.cx) / cam.fx * depth
            y_cam = (rr - cam.cy) / cam.fy * depth
            pts_cam = np.stack([x_cam, y_cam, depth], axis=1)
            pts_world = (pts_cam - cam.translation) @ cam.rotation
            sigma = self.sigma_px * depth / cam.fx
            centers.append(pts_world)
            scales.append(np.repeat(sigma[:, None], 3, axis=1))
            colors.append(img[rr, cc].astype(np.float64))
        if not centers:
            return GaussianScene.empty(source_id=f"stub-recon:{request_id}")
        n = sum(len(c) for c in centers)
        rot = np.zeros((n, 4))
        rot[:, 0] = 1.0
        return GaussianScene(
            centers=np.concatenate(centers),
            scales=np.concatenate(scales),
            rotations=rot,
            opacities=np.full(n, self.opacity),
            colors=np.concatenate(colors),
            source_id=f"stub-recon:{request_id}",
        )


# ---------------------------------------------------------------------------
# directory exchange
# ---------------------------------------------------------------------------

def _wait_for(path: Path, timeout: float, poll: float) -> None:
    deadline = time.monotonic() + timeout
    while not path.exists():
        if time.monotonic() > deadline:
            raise BackendError(f"timed out after {timeout:.0f}s waiting for {path}")
        time.sleep(poll)


def write_generator_request(root: Path, request: GeneratorRequest) -> Path:
    reqdir = Path(root) / request.request_id
    reqdir.mkdir(parents=True, exist_ok=True)
    formats.save_image_png(request.coarse, reqdir / "coarse.png")
    formats.save_mask_png(request.mask, reqdir / "mask.png")
    formats.save_image_png(request.reference, reqdir / "reference.png")
    formats.save_token_grid(request.tokens, reqdir / "tokens.bin")
    h, w = request.coarse.shape[:2]
    meta = GenerateMeta(request_id=request.request_id, width=w, height=h)
    (reqdir / "request.json").write_text(meta.model_dump_json(indent=2), encoding="utf-8")
    return reqdir


class DirectoryGenerator:
    """Generator client speaking the request-directory protocol."""

    def __init__(self, root: str | Path, timeout: float = 120.0, poll: float = 0.05):
        self.root = Path(root)
        self.timeout = timeout
        self.poll = poll

    def refine(self, request: GeneratorRequest) -> np.ndarray:
        reqdir = write_generator_request(self.root, request)
        _wait_for(reqdir / GENERATOR_DONE_MARKER, self.timeout, self.poll)
        result = reqdir / GENERATOR_RESULT_FILE
        if not result.exists():
            raise BackendError(f"backend wrote done marker but no {GENERATOR_RESULT_FILE} in {reqdir}")
        return formats.load_image_png(result)


def write_reconstructor_request(root: Path, views: list[ViewRecord], request_id: str) -> Path:
    reqdir = Path(root) / request_id
    reqdir.mkdir(parents=True, exist_ok=True)
    formats.save_camera_set([v.pose for v in views], reqdir / "cameras.txt")
    has_depth = []
    for i, view in enumerate(views):
        formats.save_image_png(view.image, reqdir / f"view_{i:03d}.png")
        if view.depth is not None:
            formats.save_depth_png(view.depth, reqdir / f"depth_{i:03d}.png")
        has_depth.append(view.depth is not None)
    meta = ReconstructMeta(request_id=request_id, n_views=len(views), has_depth=has_depth)
    (reqdir / "request.json").write_text(meta.model_dump_json(indent=2), encoding="utf-8")
    return reqdir


def read_reconstructor_request(reqdir: Path) -> list[ViewRecord]:
    meta = ReconstructMeta.model_validate_json((reqdir / "request.json").read_text(encoding="utf-8"))
    poses = formats.load_camera_set(reqdir / "cameras.txt")
    views = []
    for i in range(meta.n_views):
        depth = None
        if meta.has_depth[i]:
            depth = formats.load_depth_png(reqdir / f"depth_{i:03d}.png")
        views.append(ViewRecord(
            image=formats.load_image_png(reqdir / f"view_{i:03d}.png"),
            pose=poses[i],
            depth=depth,
        ))
    return views


class DirectoryReconstructor:
    def __init__(self, root: str | Path, timeout: float = 300.0, poll: float = 0.05):
        self.root = Path(root)
        self.timeout = timeout
        self.poll = poll

    def reconstruct(self, views: list[ViewRecord], request_id: str) -> GaussianScene:
        reqdir = write_reconstructor_request(self.root, views, request_id)
        _wait_for(reqdir / GENERATOR_DONE_MARKER, self.timeout, self.poll)
        result = reqdir / RECONSTRUCTOR_RESULT_FILE
        if not result.exists():
            raise BackendError(f"backend wrote done marker but no {RECONSTRUCTOR_RESULT_FILE} in {reqdir}")
        return formats.load_scene_ply(result)


def serve_exchange_once(
    root: str | Path,
    generator: GeneratorClient | None = None,
    reconstructor: ReconstructorClient | None = None,
) -> int:
    """Process pending request directories under root; returns the count.

    This is the counterpart a foreign backend would implement: it answers
    generator requests (coarse.png present) and reconstructor requests
    (cameras.txt present) that lack a done marker.
    """
    generator = generator or StubGenerator()
    reconstructor = reconstructor or StubReconstructor()
    root = Path(root)
    handled = 0
    if not root.exists():
        return handled
    for reqdir in sorted(p for p in root.iterdir() if p.is_dir()):
        if (reqdir / GENERATOR_DONE_MARKER).exists() or not (reqdir / "request.json").exists():
            continue
        if (reqdir / "coarse.png").exists():
            meta = GenerateMeta.model_validate_json((reqdir / "request.json").read_text(encoding="utf-8"))
            request = GeneratorRequest(
                coarse=formats.load_image_png(reqdir / "coarse.png"),
                mask=formats.load_mask_png(reqdir / "mask.png"),
                reference=formats.load_image_png(reqdir / "reference.png"),
                tokens=formats.load_token_grid(reqdir / "tokens.bin"),
                request_id=meta.request_id,
            )
            formats.save_image_png(generator.refine(request), reqdir / GENERATOR_RESULT_FILE)
        elif (reqdir / "cameras.txt").exists():
            views = read_reconstructor_request(reqdir)
            meta = ReconstructMeta.model_validate_json((reqdir / "request.json").read_text(encoding="utf-8"))
            scene = reconstructor.reconstruct(views, meta.request_id)
            (reqdir / RECONSTRUCTOR_RESULT_FILE).write_bytes(formats.scene_ply_bytes(scene))
        else:
            continue
        (reqdir / GENERATOR_DONE_MARKER).touch()
        handled += 1
    return handled


# ---------------------------------------------------------------------------
# HTTP clients
# ---------------------------------------------------------------------------

class HttpGenerator:
    """Posts a refinement request as multipart form data to <base>/generate."""

    def __init__(self, base_url: str | None = None, client: httpx.Client | None = None, timeout: float = 120.0):
        if client is None and base_url is None:
            raise ValueError("either base_url or an httpx client is required")
        self._client = client or httpx.Client(base_url=base_url, timeout=timeout)

    def refine(self, request: GeneratorRequest) -> np.ndarray:
        h, w = request.coarse.shape[:2]
        meta = GenerateMeta(request_id=request.request_id, width=w, height=h)
        try:
            resp = self._client.post(
                "/generate",
                data={"meta": meta.model_dump_json()},
                files={
                    "coarse": ("coarse.png", formats.image_png_bytes(request.coarse), "image/png"),
                    "mask": ("mask.png", formats.mask_png_bytes(request.mask), "image/png"),
                    "reference": ("reference.png", formats.image_png_bytes(request.reference), "image/png"),
                    "tokens": ("tokens.bin", formats.token_grid_bytes(request.tokens), "application/octet-stream"),
                },
            )
        except httpx.HTTPError as exc:
            raise BackendError(f"generator endpoint unreachable: {exc}") from exc
        if resp.status_code != 200:
            raise BackendError(f"generator endpoint returned {resp.status_code}: {resp.text[:200]}")
        return formats.load_image_png(resp.content)


class HttpReconstructor:
    def __init__(self, base_url: str | None = None, client: httpx.Client | None = None, timeout: float = 300.0):
        if client is None and base_url is None:
            raise ValueError("either base_url or an httpx client is required")
        self._client = client or httpx.Client(base_url=base_url, timeout=timeout)

    def reconstruct(self, views: list[ViewRecord], request_id: str) -> GaussianScene:
        meta = ReconstructMeta(
            request_id=request_id,
            n_views=len(views),
            has_depth=[v.depth is not None for v in views],
        )
        files: list[tuple[str, tuple[str, bytes, str]]] = [
            ("cameras", ("cameras.txt", formats.camera_set_text([v.pose for v in views]).encode(), "text/plain")),
        ]
        for i, view in enumerate(views):
            files.append(("views", (f"view_{i:03d}.png", formats.image_png_bytes(view.image), "image/png")))
            if view.depth is not None:
                files.append(("depths", (f"depth_{i:03d}.png", formats.depth_png_bytes(view.depth), "image/png")))
        try:
            resp = self._client.post("/reconstruct", data={"meta": meta.model_dump_json()}, files=files)
        except httpx.HTTPError as exc:
            raise BackendError(f"reconstructor endpoint unreachable: {exc}") from exc
        if resp.status_code != 200:
            raise BackendError(f"reconstructor endpoint returned {resp.status_code}: {resp.text[:200]}")
        return formats.load_scene_ply(resp.content)


# ---------------------------------------------------------------------------
# backend spec resolution
# ---------------------------------------------------------------------------

def _resolve_url(spec: str, env: dict | None) -> str | None:
    env = os.environ if env is None else env
    override = env.get(BACKEND_URL_ENV)
    if override:
        return override
    if spec.startswith("http://") or spec.startswith("https://"):
        return spec
    return None


def make_generator(spec: str = "stub", env: dict | None = None) -> GeneratorClient:
    url = _resolve_url(spec, env)
    if url:
        return HttpGenerator(base_url=url)
    if spec == "stub":
        return StubGenerator()
    if spec.startswith("dir:"):
        return DirectoryGenerator(spec[4:])
    raise ValueError(f"unknown generator backend spec: {spec!r}")


def make_reconstructor(spec: str = "stub", env: dict | None = None) -> ReconstructorClient:
    url = _resolve_url(spec, env)
    if url:
        return HttpReconstructor(base_url=url)
    if spec == "stub":
        return StubReconstructor()
    if spec.startswith("dir:"):
        return DirectoryReconstructor(spec[4:])
    raise ValueError(f"unknown reconstructor backend spec: {spec!r}")
