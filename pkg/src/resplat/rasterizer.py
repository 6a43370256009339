"""CPU rasterizer for 3D Gaussian scenes.

Projects Gaussians to screen space (EWA-style perspective approximation) and
alpha-composites per-pixel color, expected depth, and the accumulated
compositing weight. Two paths share one projection stage:

- render: 16x16 tile binning with per-tile depth-ordered compositing,
  optionally parallel across tiles. The tile bound for each splat is chosen
  so that every contribution it can exclude is already below the skip
  threshold, which keeps the result identical to the naive path.
- render_oracle: the plain reference loop over all projected splats with
  exact sorting and no tiling. Kept deliberately simple; the tiled path is
  tested against it.

Per pixel, splats are composited front to back in view-depth order (ties
broken by primitive index, ascending):

    alpha_i = opacity_i * exp(-0.5 * d^T cov2d^-1 d)   clamped to <= 0.99
    w_i     = alpha_i * prod_{j<i} (1 - alpha_j)

Contributions with alpha below 1/255 are skipped; a pixel stops compositing
once its running transmittance falls below the early-stop threshold. The
output `alpha` equals the accumulated weight sum, and `transmittance` exposes
the same map under the name the masking stage uses.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .geometry import quaternions_to_rotations
from .scene import CameraPose, GaussianPrimitive, GaussianScene


@dataclass(frozen=True)
class RenderOptions:
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    tile: int = 16
    alpha_clamp: float | None = 0.99
    alpha_skip: float = 1.0 / 255.0
    early_stop: float | None = 1e-4
    near_plane: float = 0.01
    cull_sigma: float = 3.0
    lowpass: float = 0.3
    workers: int = 0  # 0 picks a worker count from the frame size


@dataclass(frozen=True)
class Projected2D:
    mean2d: np.ndarray      # (2,) pixels
    cov2d: np.ndarray       # (2, 2) pixels^2, after low-pass regularization
    view_depth: float       # camera-space z, world units
    color: np.ndarray       # (3,)
    opacity: float


@dataclass(frozen=True)
class RenderOutput:
    color: np.ndarray          # (H, W, 3) float32
    depth: np.ndarray          # (H, W) float32, 0 where uncovered
    alpha: np.ndarray          # (H, W) float32, accumulated weight
    transmittance: np.ndarray  # same map as alpha; low values mark under-observed pixels


@dataclass
class ProjectionStats:
    total: int = 0
    behind: int = 0
    offscreen: int = 0
    degenerate: int = 0
    kept: int = 0


@dataclass
class _Splats:
    """Projected splats in composite order (depth ascending, index tie-break)."""

    mean: np.ndarray      # (M, 2) float64
    inv: np.ndarray       # (M, 3) float64: (a, b, c) of the inverse 2x2
    cov_diag: np.ndarray  # (M, 2) float64: marginal variances (xx, yy)
    depth: np.ndarray     # (M,) float64
    color: np.ndarray     # (M, 3) float64
    opacity: np.ndarray   # (M,) float64
    bound: np.ndarray     # (M, 2) float64: half extents beyond which alpha < skip


def project_scene(scene: GaussianScene, cam: CameraPose, opts: RenderOptions) -> tuple[_Splats, ProjectionStats]:
    """Project every primitive, cull, and sort into composite order."""
    stats = ProjectionStats(total=len(scene))
    empty = _Splats(*(np.zeros((0, k)) if k else np.zeros(0) for k in (2, 3, 2, 0, 3, 0, 2)))
    if len(scene) == 0:
        return empty, stats

    rot_w2c = cam.rotation
    centers = scene.centers.astype(np.float64)
    t_cam = centers @ rot_w2c.T + cam.translation
    x, y, z = t_cam[:, 0], t_cam[:, 1], t_cam[:, 2]

    front = z > opts.near_plane
    stats.behind = int(np.count_nonzero(~front))
    if not front.any():
        return empty, stats
    idx = np.flatnonzero(front)
    x, y, z = x[idx], y[idx], z[idx]

    # world covariance R diag(s^2) R^T, then into camera frame
    rots = quaternions_to_rotations(scene.rotations[idx].astype(np.float64))
    scaled = rots * (scene.scales[idx].astype(np.float64) ** 2)[:, None, :]
    sigma_world = scaled @ rots.transpose(0, 2, 1)
    sigma_cam = rot_w2c @ sigma_world @ rot_w2c.T

    # perspective Jacobian rows at the camera-space center
    fx, fy = cam.fx, cam.fy
    z2 = z * z
    j = np.zeros((len(idx), 2, 3))
    j[:, 0, 0] = fx / z
    j[:, 0, 2] = -fx * x / z2
    j[:, 1, 1] = fy / z
    j[:, 1, 2] = -fy * y / z2
    cov2d = j @ sigma_cam @ j.transpose(0, 2, 1)
    cov2d[:, 0, 0] += opts.lowpass
    cov2d[:, 1, 1] += opts.lowpass

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    ok = det > 0
    stats.degenerate = int(np.count_nonzero(~ok))

    mean_x = fx * x / z + cam.cx
    mean_y = fy * y / z + cam.cy
    rx = opts.cull_sigma * np.sqrt(np.maximum(a, 0.0))
    ry = opts.cull_sigma * np.sqrt(np.maximum(c, 0.0))
    on_screen = (
        (mean_x + rx >= 0.0) & (mean_x - rx <= cam.width - 1.0)
        & (mean_y + ry >= 0.0) & (mean_y - ry <= cam.height - 1.0)
    )
    stats.offscreen = int(np.count_nonzero(ok & ~on_screen))
    keep = ok & on_screen
    stats.kept = int(np.count_nonzero(keep))
    if not keep.any():
        return empty, stats

    sub = np.flatnonzero(keep)
    a, b, c, det = a[sub], b[sub], c[sub], det[sub]
    inv = np.stack([c / det, -b / det, a / det], axis=1)
    opacity = scene.opacities[idx[sub]].astype(np.float64)

    # half extents past which alpha stays below the skip threshold
    q_max = 2.0 * np.log(np.maximum(opacity, 1e-300) / opts.alpha_skip)
    coverable = q_max > 0
    bound = np.zeros((len(sub), 2))
    bound[coverable, 0] = np.sqrt(q_max[coverable] * a[coverable])
    bound[coverable, 1] = np.sqrt(q_max[coverable] * c[coverable])
    bound[~coverable] = -1.0  # never reaches the skip threshold anywhere

    order = np.argsort(z[sub], kind="stable")
    splats = _Splats(
        mean=np.stack([mean_x[sub], mean_y[sub]], axis=1)[order],
        inv=inv[order],
        cov_diag=np.stack([a, c], axis=1)[order],
        depth=z[sub][order],
        color=scene.colors[idx[sub]].astype(np.float64)[order],
        opacity=opacity[order],
        bound=bound[order],
    )
    return splats, stats


def project_gaussian(g: GaussianPrimitive, cam: CameraPose, opts: RenderOptions | None = None) -> Projected2D | None:
    """Project one primitive; returns None when culled."""
    opts = opts or RenderOptions()
    scene = GaussianScene.from_primitives([g])
    splats, _ = project_scene(scene, cam, opts)
    if len(splats.depth) == 0:
        return None
    a, bb, c = splats.inv[0]
    det_inv = a * c - bb * bb
    cov = np.array([[c, -bb], [-bb, a]]) / det_inv
    return Projected2D(
        mean2d=splats.mean[0].copy(),
        cov2d=cov,
        view_depth=float(splats.depth[0]),
        color=splats.color[0].copy(),
        opacity=float(splats.opacity[0]),
    )


def _finalize(color_acc, depth_acc, alpha_acc, opts: RenderOptions) -> RenderOutput:
    bg = np.asarray(opts.background, dtype=np.float64)
    color = color_acc + (1.0 - alpha_acc)[..., None] * bg
    covered = alpha_acc >= 1e-6
    depth = np.where(covered, depth_acc / np.maximum(alpha_acc, 1e-6), 0.0)
    color32 = np.clip(color, 0.0, 1.0).astype(np.float32)
    depth32 = depth.astype(np.float32)
    alpha32 = alpha_acc.astype(np.float32)
    for arr in (color32, depth32, alpha32):
        arr.setflags(write=False)
    return RenderOutput(color=color32, depth=depth32, alpha=alpha32, transmittance=alpha32)


def render_oracle(scene: GaussianScene, cam: CameraPose, opts: RenderOptions | None = None) -> RenderOutput:
    """Reference renderer: every projected splat against every pixel."""
    opts = opts or RenderOptions()
    splats, _ = project_scene(scene, cam, opts)
    h, w = cam.height, cam.width
    xs = np.arange(w, dtype=np.float64)[None, :]
    ys = np.arange(h, dtype=np.float64)[:, None]

    color_acc = np.zeros((h, w, 3))
    alpha_acc = np.zeros((h, w))
    depth_acc = np.zeros((h, w))
    trans = np.ones((h, w))

    for k in range(len(splats.depth)):
        live = trans >= opts.early_stop if opts.early_stop is not None else np.ones((h, w), bool)
        if not live.any():
            break
        dx = xs - splats.mean[k, 0]
        dy = ys - splats.mean[k, 1]
        ia, ib, ic = splats.inv[k]
        quad = ia * dx * dx + 2.0 * ib * dx * dy + ic * dy * dy
        alpha = splats.opacity[k] * np.exp(-0.5 * quad)
        if opts.alpha_clamp is not None:
            alpha = np.minimum(alpha, opts.alpha_clamp)
        use = live & (alpha >= opts.alpha_skip)
        weight = np.where(use, alpha * trans, 0.0)
        color_acc += weight[..., None] * splats.color[k]
        alpha_acc += weight
        depth_acc += weight * splats.depth[k]
        trans = np.where(use, trans * (1.0 - alpha), trans)

    return _finalize(color_acc, depth_acc, alpha_acc, opts)


def _composite_tile(splats: _Splats, members: np.ndarray, x0: int, y0: int, x1: int, y1: int, opts: RenderOptions):
    """Composite one tile; returns (color, alpha, depth) accumulators."""
    th, tw = y1 - y0, x1 - x0
    xs = np.arange(x0, x1, dtype=np.float64)[None, :]
    ys = np.arange(y0, y1, dtype=np.float64)[:, None]
    color_acc = np.zeros((th, tw, 3))
    alpha_acc = np.zeros((th, tw))
    depth_acc = np.zeros((th, tw))
    trans = np.ones((th, tw))

    for k in members:
        if opts.early_stop is not None:
            live = trans >= opts.early_stop
            if not live.any():
                break
        else:
            live = True
        dx = xs - splats.mean[k, 0]
        dy = ys - splats.mean[k, 1]
        ia, ib, ic = splats.inv[k]
        quad = ia * dx * dx + 2.0 * ib * dx * dy + ic * dy * dy
        alpha = splats.opacity[k] * np.exp(-0.5 * quad)
        if opts.alpha_clamp is not None:
            alpha = np.minimum(alpha, opts.alpha_clamp)
        use = live & (alpha >= opts.alpha_skip)
        weight = np.where(use, alpha * trans, 0.0)
        color_acc += weight[..., None] * splats.color[k]
        alpha_acc += weight
        depth_acc += weight * splats.depth[k]
        trans = np.where(use, trans * (1.0 - alpha), trans)
    return color_acc, alpha_acc, depth_acc


def render(scene: GaussianScene, cam: CameraPose, opts: RenderOptions | None = None) -> RenderOutput:
    """Tiled renderer. An empty or fully culled scene yields background."""
    opts = opts or RenderOptions()
    if opts.tile < 1:
        raise ValueError("tile size must be >= 1")
    splats, _ = project_scene(scene, cam, opts)
    h, w = cam.height, cam.width
    tile = opts.tile
    tiles_x = (w + tile - 1) // tile
    tiles_y = (h + tile - 1) // tile

    # conservative tile membership: a splat outside its bound only produces
    # contributions the skip rule would drop anyway
    buckets: list[list[int]] = [[] for _ in range(tiles_x * tiles_y)]
    for k in range(len(splats.depth)):
        bx, by = splats.bound[k]
        if bx < 0:
            continue
        mx, my = splats.mean[k]
        tx0 = max(int(np.floor((mx - bx) / tile)), 0)
        tx1 = min(int(np.floor((mx + bx) / tile)), tiles_x - 1)
        ty0 = max(int(np.floor((my - by) / tile)), 0)
        ty1 = min(int(np.floor((my + by) / tile)), tiles_y - 1)
        for ty in range(ty0, ty1 + 1):
            row = ty * tiles_x
            for tx in range(tx0, tx1 + 1):
                buckets[row + tx].append(k)

    color_acc = np.zeros((h, w, 3))
    alpha_acc = np.zeros((h, w))
    depth_acc = np.zeros((h, w))

    def run_tile(tid: int) -> None:
        members = buckets[tid]
        if not members:
            return
        ty, tx = divmod(tid, tiles_x)
        x0, y0 = tx * tile, ty * tile
        x1, y1 = min(x0 + tile, w), min(y0 + tile, h)
        col, alp, dep = _composite_tile(splats, np.asarray(members), x0, y0, x1, y1, opts)
        color_acc[y0:y1, x0:x1] = col
        alpha_acc[y0:y1, x0:x1] = alp
        depth_acc[y0:y1, x0:x1] = dep

    workers = opts.workers
    if workers == 0:
        workers = 1 if h * w <= 96 * 96 else min(4, os.cpu_count() or 1)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run_tile, range(tiles_x * tiles_y)))
    else:
        for tid in range(tiles_x * tiles_y):
            run_tile(tid)

    return _finalize(color_acc, depth_acc, alpha_acc, opts)
