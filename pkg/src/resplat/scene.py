"""Domain types: Gaussian scenes, cameras, token grids, image conventions.

Array conventions used throughout the package:

- images: float32 (H, W, 3) in [0, 1], sRGB, row 0 at the top
- depth maps: float32 (H, W), world units, 0 encodes "no coverage"
- masks: bool (H, W), True marks the region to be generated / inpainted
- camera: world-to-camera, +z forward, pixel (0, 0) at the top-left;
  a point projecting to (cx, cy) lands on the pixel with column cx, row cy

All types are immutable after construction and safe to share across workers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .geometry import orthonormality_drift


@dataclass(frozen=True)
class GaussianPrimitive:
    """One anisotropic 3D Gaussian.

    scale holds per-axis standard deviations in world units (already
    exponentiated), opacity is the post-sigmoid value in [0, 1], rotation is a
    unit quaternion (w, x, y, z).
    """

    center: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: float
    color: np.ndarray


class GaussianScene:
    """An ordered set of Gaussian primitives, stored columnar for rendering.

    Ordering only matters for depth-tie handling in the rasterizer; any
    permutation of primitives with distinct view depths renders identically.
    """

    def __init__(
        self,
        centers: np.ndarray,
        scales: np.ndarray,
        rotations: np.ndarray,
        opacities: np.ndarray,
        colors: np.ndarray,
        source_id: str = "",
    ):
        # float64 storage: raw<->activated conversions round-trip far inside
        # the file tolerance (the PLY payload itself stays float32)
        self.centers = np.ascontiguousarray(centers, dtype=np.float64).reshape(-1, 3)
        self.scales = np.ascontiguousarray(scales, dtype=np.float64).reshape(-1, 3)
        self.rotations = np.ascontiguousarray(rotations, dtype=np.float64).reshape(-1, 4)
        self.opacities = np.ascontiguousarray(opacities, dtype=np.float64).reshape(-1)
        self.colors = np.ascontiguousarray(colors, dtype=np.float64).reshape(-1, 3)
        self.source_id = source_id
        n = len(self.centers)
        for name in ("scales", "rotations", "opacities", "colors"):
            if len(getattr(self, name)) != n:
                raise DataError(f"scene field {name} has {len(getattr(self, name))} rows, expected {n}")
        for arr in (self.centers, self.scales, self.rotations, self.opacities, self.colors):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.centers)

    def primitive(self, index: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            center=self.centers[index].copy(),
            scale=self.scales[index].copy(),
            rotation=self.rotations[index].copy(),
            opacity=float(self.opacities[index]),
            color=self.colors[index].copy(),
        )

    @property
    def primitives(self) -> list[GaussianPrimitive]:
        return [self.primitive(i) for i in range(len(self))]

    @classmethod
    def from_primitives(cls, prims: list[GaussianPrimitive], source_id: str = "") -> "GaussianScene":
        if prims:
            return cls(
                centers=np.stack([p.center for p in prims]),
                scales=np.stack([p.scale for p in prims]),
                rotations=np.stack([p.rotation for p in prims]),
                opacities=np.array([p.opacity for p in prims]),
                colors=np.stack([p.color for p in prims]),
                source_id=source_id,
            )
        return cls.empty(source_id)

    @classmethod
    def empty(cls, source_id: str = "") -> "GaussianScene":
        z3 = np.zeros((0, 3))
        return cls(z3, z3, np.zeros((0, 4)), np.zeros(0), z3, source_id)

    def validate(self) -> None:
        """Raise DataError on any violated primitive invariant."""
        if len(self) == 0:
            return
        for name in ("centers", "scales", "rotations", "opacities", "colors"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)):
                idx = int(np.argwhere(~np.isfinite(arr).reshape(len(self), -1).all(axis=1))[0, 0])
                raise DataError(f"non-finite value in {name} at primitive {idx}")
        if np.any(self.scales <= 0):
            idx = int(np.argwhere((self.scales <= 0).any(axis=1))[0, 0])
            raise DataError(f"non-positive scale at primitive {idx}")
        norms = np.linalg.norm(self.rotations.astype(np.float64), axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            idx = int(np.argwhere(np.abs(norms - 1.0) > 1e-6)[0, 0])
            raise DataError(f"non-unit quaternion at primitive {idx}")
        if np.any(self.opacities < 0) or np.any(self.opacities > 1):
            raise DataError("opacity outside [0, 1]")
        if np.any(self.colors < 0) or np.any(self.colors > 1):
            raise DataError("color component outside [0, 1]")


@dataclass(frozen=True)
class CameraPose:
    """Pinhole camera: world-to-camera rotation/translation plus intrinsics.

    Identity rotation with zero translation places the camera at the origin
    looking down +z.
    """

    rotation: np.ndarray      # (3, 3), world-to-camera
    translation: np.ndarray   # (3,), world units
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.ascontiguousarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.ascontiguousarray(self.translation, dtype=np.float64).reshape(3))
        self.rotation.setflags(write=False)
        self.translation.setflags(write=False)

    def validate(self) -> None:
        if orthonormality_drift(self.rotation) > 1e-6:
            raise DataError("camera rotation is not orthonormal within 1e-6")
        if np.linalg.det(self.rotation) <= 0:
            raise DataError("camera rotation has non-positive determinant")
        if self.fx <= 0 or self.fy <= 0:
            raise DataError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise DataError("principal point outside the image")

    def camera_center(self) -> np.ndarray:
        """Camera position in world coordinates (-R^T t)."""
        return -self.rotation.T @ self.translation


TOKEN_DIM = 768
PATCH_SIZE = 14


@dataclass(frozen=True)
class TokenGrid:
    """Per-view feature tokens on the patch lattice of the source image.

    tokens has shape (rows, cols, dim) with rows = H / patch, cols = W / patch.
    """

    tokens: np.ndarray
    patch: int = PATCH_SIZE

    def __post_init__(self):
        arr = np.ascontiguousarray(self.tokens, dtype=np.float32)
        if arr.ndim != 3:
            raise DataError(f"token grid must be 3-dimensional, got shape {arr.shape}")
        object.__setattr__(self, "tokens", arr)
        arr.setflags(write=False)

    @property
    def rows(self) -> int:
        return self.tokens.shape[0]

    @property
    def cols(self) -> int:
        return self.tokens.shape[1]

    @property
    def dim(self) -> int:
        return self.tokens.shape[2]

    @property
    def image_height(self) -> int:
        return self.rows * self.patch

    @property
    def image_width(self) -> int:
        return self.cols * self.patch

    @classmethod
    def zeros_for_image(cls, height: int, width: int, dim: int = TOKEN_DIM, patch: int = PATCH_SIZE) -> "TokenGrid":
        if height % patch or width % patch:
            raise ValueError(f"image {width}x{height} is not divisible by patch size {patch}")
        return cls(np.zeros((height // patch, width // patch, dim), dtype=np.float32), patch=patch)

    def validate(self) -> None:
        if not np.all(np.isfinite(self.tokens)):
            bad = np.argwhere(~np.isfinite(self.tokens).all(axis=2))[0]
            raise DataError(f"non-finite token at grid cell ({bad[0]}, {bad[1]})")


def check_image(img: np.ndarray) -> np.ndarray:
    """Validate an (H, W, 3) image in [0, 1] and return it as float32."""
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError("image contains non-finite values")
    if arr.min() < 0 or arr.max() > 1:
        raise DataError("image values outside [0, 1]")
    return arr.astype(np.float32, copy=False)


def check_depth(depth: np.ndarray) -> np.ndarray:
    """Validate an (H, W) depth map (>= 0, finite); float64 passes through."""
    arr = np.asarray(depth)
    if arr.ndim != 2:
        raise ValueError(f"expected (H, W) depth map, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError("depth map contains non-finite values")
    if arr.min() < 0:
        raise DataError("depth map contains negative values")
    if arr.dtype == np.float64:
        return arr
    return arr.astype(np.float32, copy=False)


def check_mask(mask: np.ndarray) -> np.ndarray:
    """Validate an (H, W) boolean mask and return it as bool."""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValueError(f"expected (H, W) mask, got shape {arr.shape}")
    if arr.dtype != bool:
        if not np.all((arr == 0) | (arr == 1)):
            raise DataError("mask contains values other than 0/1")
        arr = arr.astype(bool)
    return arr
