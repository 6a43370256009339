"""Deterministic synthetic RGBD fixtures for tests and demos.

The scene is two fronto-parallel planes (a textured wall and a nearer card)
rendered analytically per camera, so images and depth maps are exact and any
number of consistent views can be produced. Patterns are smooth trig fields,
which back-project well through the stub reconstructor.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import formats
from .backends import ViewRecord
from .scene import CameraPose, TokenGrid

WALL_Z = 2.4
CARD_Z = 1.6
CARD_CENTER = (0.12, -0.06)
CARD_HALF = (0.42, 0.34)


def _pattern(x: np.ndarray, y: np.ndarray, on_card: np.ndarray) -> np.ndarray:
    base = np.stack(
        [
            0.5 + 0.34 * np.sin(2.1 * x + 0.7) * np.cos(1.7 * y - 0.3),
            0.5 + 0.30 * np.sin(1.6 * x - 1.1) * np.cos(2.3 * y + 0.4),
            0.5 + 0.32 * np.cos(1.9 * x + 0.2) * np.sin(1.4 * y + 0.9),
        ],
        axis=-1,
    )
    card = np.stack(
        [
            0.55 + 0.30 * np.cos(3.0 * x - 0.4),
            0.45 + 0.28 * np.sin(2.6 * y + 0.8),
            0.50 + 0.26 * np.sin(2.2 * (x + y)),
        ],
        axis=-1,
    )
    return np.where(on_card[..., None], card, base)


def render_analytic(cam: CameraPose, card: bool = True) -> ViewRecord:
    """Exact RGBD render of the two-plane scene for an axis-aligned camera.

    Assumes the camera rotation is identity (all fixture cameras are pure
    translations), which keeps the plane intersection closed-form. With
    card=False only the wall is rendered (no depth discontinuities).
    """
    if not np.allclose(cam.rotation, np.eye(3)):
        raise ValueError("analytic fixture renderer expects identity rotations")
    origin = cam.camera_center()
    cols = (np.arange(cam.width) - cam.cx) / cam.fx
    rows = (np.arange(cam.height) - cam.cy) / cam.fy
    dx, dy = np.meshgrid(cols, rows)

    z_wall = WALL_Z - origin[2]
    wall_x = origin[0] + dx * z_wall
    wall_y = origin[1] + dy * z_wall

    z_card = CARD_Z - origin[2]
    card_x = origin[0] + dx * z_card
    card_y = origin[1] + dy * z_card
    if card:
        on_card = (np.abs(card_x - CARD_CENTER[0]) < CARD_HALF[0]) & (
            np.abs(card_y - CARD_CENTER[1]) < CARD_HALF[1]
        )
    else:
        on_card = np.zeros(dx.shape, dtype=bool)

    depth = np.where(on_card, z_card, z_wall).astype(np.float32)
    x = np.where(on_card, card_x, wall_x)
    y = np.where(on_card, card_y, wall_y)
    image = np.clip(_pattern(x, y, on_card), 0.0, 1.0).astype(np.float32)
    return ViewRecord(image=image, pose=cam, depth=depth)


def fixture_cameras(n_views: int = 2, size: int = 126, baseline: float = 0.5) -> list[CameraPose]:
    """Cameras on a horizontal rail looking down +z."""
    if n_views < 1:
        raise ValueError("need at least one view")
    focal = size * 0.875
    centers = np.linspace(-baseline / 2.0, baseline / 2.0, n_views) if n_views > 1 else [0.0]
    cams = []
    for cx_world in centers:
        center = np.array([cx_world, 0.0, 0.0])
        cams.append(CameraPose(
            rotation=np.eye(3),
            translation=-center,  # identity rotation: t = -camera_center
            fx=focal, fy=focal, cx=size / 2.0, cy=size / 2.0,
            width=size, height=size,
        ))
    return cams


def make_rgbd_fixture(n_views: int = 2, size: int = 126, baseline: float = 0.5, card: bool = True) -> list[ViewRecord]:
    return [render_analytic(cam, card=card) for cam in fixture_cameras(n_views, size, baseline)]


def write_rgbd_fixture(out_dir: str | Path, n_views: int = 2, size: int = 126,
                       baseline: float = 0.5, card: bool = True) -> Path:
    """Write cameras.txt, view/depth PNGs, and a zero token grid.

    The image size must divide by the 14 px token patch so the token grid
    lines up (126 = 9 * 14 does).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    views = make_rgbd_fixture(n_views, size, baseline, card=card)
    formats.save_camera_set([v.pose for v in views], out / "cameras.txt")
    for i, view in enumerate(views):
        formats.save_image_png(view.image, out / f"view_{i:03d}.png")
        formats.save_depth_png(view.depth, out / f"depth_{i:03d}.png")
    formats.save_token_grid(TokenGrid.zeros_for_image(size, size), out / "tokens.bin")
    return out
