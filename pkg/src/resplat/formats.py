"""File formats: scene PLY, camera text files, token containers, PNG images.

Scenes travel as binary little-endian PLY with the common splat vertex layout
(x y z, f_dc_0..2, opacity, scale_0..2, rot_0..3). Raw file values are stored
pre-activation: scale as log, opacity as logit, color as DC coefficients.
Activations applied on load:

    scale   = exp(raw)
    opacity = sigmoid(raw)
    color   = clamp(0.2820948 * raw + 0.5, 0, 1)
    rotation normalized to unit length

Cameras are plain text, one camera per line: 9 rotation floats (row-major,
world-to-camera), 3 translation floats, fx fy cx cy, width height. Lines
starting with '#' are comments.

Token grids are a small headered binary: magic "LV3DTOK1", three uint32
(rows, cols, dim), then the float32 payload row-major. Depth PNGs are 16-bit
grayscale storing round(depth_m * 1000), saturating at 65535. Masks are 1-bit
PNGs with 0 = keep and 255 = generate.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError, FormatError
from .geometry import nearest_rotation, orthonormality_drift
from .scene import CameraPose, GaussianScene, TokenGrid, check_depth, check_image, check_mask

SH_DC = 0.2820948
OPACITY_EPS = 1e-6

PLY_FIELDS = [
    "x", "y", "z",
    "f_dc_0", "f_dc_1", "f_dc_2",
    "opacity",
    "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
]

TOKEN_MAGIC = b"LV3DTOK1"
WEIGHTS_MAGIC = b"LV3DADW1"

_PLY_TYPES = {
    "float": np.dtype("<f4"), "float32": np.dtype("<f4"),
    "double": np.dtype("<f8"), "float64": np.dtype("<f8"),
    "uchar": np.dtype("<u1"), "uint8": np.dtype("<u1"),
    "int": np.dtype("<i4"), "int32": np.dtype("<i4"),
    "uint": np.dtype("<u4"), "uint32": np.dtype("<u4"),
    "short": np.dtype("<i2"), "ushort": np.dtype("<u2"),
    "char": np.dtype("<i1"),
}


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _logit(p: np.ndarray) -> np.ndarray:
    return np.log(p / (1.0 - p))


# ---------------------------------------------------------------------------
# scene PLY
# ---------------------------------------------------------------------------

def _parse_ply_header(handle) -> tuple[int, list[tuple[str, np.dtype]]]:
    line = handle.readline().strip()
    if line != b"ply":
        raise FormatError("not a PLY file (missing 'ply' magic)")
    fmt = handle.readline().strip()
    if fmt != b"format binary_little_endian 1.0":
        raise FormatError(f"unsupported PLY format line: {fmt.decode(errors='replace')}")
    count = None
    props: list[tuple[str, np.dtype]] = []
    in_vertex = False
    while True:
        raw = handle.readline()
        if not raw:
            raise FormatError("unexpected end of PLY header")
        line = raw.strip().decode("ascii", errors="replace")
        if line == "end_header":
            break
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                count = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            if parts[1] == "list":
                raise FormatError("list properties are not supported in the vertex element")
            if parts[1] not in _PLY_TYPES:
                raise FormatError(f"unsupported property type {parts[1]}")
            props.append((parts[2], _PLY_TYPES[parts[1]]))
    if count is None:
        raise FormatError("PLY file has no vertex element")
    return count, props


def read_scene_ply_raw(source: str | Path | bytes) -> np.ndarray:
    """Read the raw (pre-activation) vertex record array from a splat PLY."""
    if isinstance(source, bytes):
        handle = io.BytesIO(source)
        count, props = _parse_ply_header(handle)
    else:
        with open(source, "rb") as handle:
            return read_scene_ply_raw(handle.read())
    names = [name for name, _ in props]
    for required in PLY_FIELDS:
        if required not in names:
            raise FormatError(f"PLY vertex element is missing field '{required}'")
    dtype = np.dtype(props)
    payload = handle.read(dtype.itemsize * count)
    if len(payload) != dtype.itemsize * count:
        raise FormatError(
            f"PLY payload truncated: expected {dtype.itemsize * count} bytes, got {len(payload)}"
        )
    return np.frombuffer(payload, dtype=dtype, count=count)


def load_scene_ply(path: str | Path | bytes) -> GaussianScene:
    """Load a Gaussian scene, applying activations to the raw fields."""
    verts = read_scene_ply_raw(path)
    n = len(verts)

    def col(names) -> np.ndarray:
        return np.stack([verts[f].astype(np.float64) for f in names], axis=1) if n else np.zeros((0, len(names)))

    centers = col(["x", "y", "z"])
    f_dc = col(["f_dc_0", "f_dc_1", "f_dc_2"])
    raw_opacity = verts["opacity"].astype(np.float64) if n else np.zeros(0)
    raw_scale = col(["scale_0", "scale_1", "scale_2"])
    raw_rot = col(["rot_0", "rot_1", "rot_2", "rot_3"])

    if n:
        for name, arr in (("center", centers), ("f_dc", f_dc), ("opacity", raw_opacity),
                          ("scale", raw_scale), ("rotation", raw_rot)):
            finite = np.isfinite(arr).reshape(n, -1).all(axis=1)
            if not finite.all():
                raise DataError(f"non-finite {name} value at primitive {int(np.argmin(finite))}")

    norms = np.linalg.norm(raw_rot, axis=1) if n else np.zeros(0)
    if n and np.any(norms < 1e-12):
        raise DataError(f"zero-norm rotation quaternion at primitive {int(np.argmin(norms))}")

    scene = GaussianScene(
        centers=centers,
        scales=np.exp(raw_scale),
        rotations=raw_rot / norms[:, None] if n else raw_rot,
        opacities=_sigmoid(raw_opacity),
        colors=np.clip(SH_DC * f_dc + 0.5, 0.0, 1.0),
        source_id="<bytes>" if isinstance(path, bytes) else str(path),
    )
    scene.validate()
    return scene


def scene_ply_bytes(scene: GaussianScene) -> bytes:
    """Serialize a scene as binary little-endian PLY with inverse activations.

    Opacities of exactly 0 or 1 are clamped to [1e-6, 1 - 1e-6] before the
    logit; this edge is lossy by design (the file format has no infinities).
    """
    n = len(scene)
    dtype = np.dtype([(name, "<f4") for name in PLY_FIELDS])
    rec = np.empty(n, dtype=dtype)
    if n:
        centers = scene.centers.astype(np.float64)
        rec["x"], rec["y"], rec["z"] = centers[:, 0], centers[:, 1], centers[:, 2]
        f_dc = (scene.colors.astype(np.float64) - 0.5) / SH_DC
        rec["f_dc_0"], rec["f_dc_1"], rec["f_dc_2"] = f_dc[:, 0], f_dc[:, 1], f_dc[:, 2]
        opacity = np.clip(scene.opacities.astype(np.float64), OPACITY_EPS, 1.0 - OPACITY_EPS)
        rec["opacity"] = _logit(opacity)
        log_scale = np.log(scene.scales.astype(np.float64))
        rec["scale_0"], rec["scale_1"], rec["scale_2"] = log_scale[:, 0], log_scale[:, 1], log_scale[:, 2]
        rot = scene.rotations.astype(np.float64)
        for i in range(4):
            rec[f"rot_{i}"] = rot[:, i]
    header = "\n".join(
        ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
        + [f"property float {name}" for name in PLY_FIELDS]
        + ["end_header", ""]
    )
    return header.encode("ascii") + rec.tobytes()


def save_scene_ply(scene: GaussianScene, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(scene_ply_bytes(scene))


# ---------------------------------------------------------------------------
# cameras
# ---------------------------------------------------------------------------

def parse_camera_text(text: str, origin: str = "<text>") -> list[CameraPose]:
    """Parse camera records; see the module docstring for the layout.

    Rotations within 1e-3 of orthonormal are projected onto the nearest
    rotation; larger drift or a non-positive determinant is an error.
    """
    cameras: list[CameraPose] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 18:
            raise FormatError(f"{origin}:{lineno}: expected 18 fields per camera, got {len(parts)}")
        try:
            vals = [float(p) for p in parts]
        except ValueError as exc:
            raise FormatError(f"{origin}:{lineno}: {exc}") from exc
        rot = np.array(vals[0:9]).reshape(3, 3)
        if np.linalg.det(rot) <= 0:
            raise DataError(f"{origin}:{lineno}: rotation determinant is not positive")
        drift = orthonormality_drift(rot)
        if drift > 1e-3:
            raise DataError(f"{origin}:{lineno}: rotation drifts {drift:.2e} from orthonormal (limit 1e-3)")
        if drift > 0:
            rot = nearest_rotation(rot)
        cam = CameraPose(
            rotation=rot,
            translation=np.array(vals[9:12]),
            fx=vals[12], fy=vals[13], cx=vals[14], cy=vals[15],
            width=int(round(vals[16])), height=int(round(vals[17])),
        )
        cam.validate()
        cameras.append(cam)
    return cameras


def load_camera_set(path: str | Path) -> list[CameraPose]:
    with open(path, "r", encoding="utf-8") as handle:
        return parse_camera_text(handle.read(), origin=str(path))


def camera_set_text(cameras: list[CameraPose]) -> str:
    lines = ["# rotation(9, row-major) translation(3) fx fy cx cy width height"]
    for cam in cameras:
        nums = [*cam.rotation.ravel(), *cam.translation, cam.fx, cam.fy, cam.cx, cam.cy]
        lines.append(" ".join(f"{v:.17g}" for v in nums) + f" {cam.width} {cam.height}")
    return "\n".join(lines) + "\n"


def save_camera_set(cameras: list[CameraPose], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(camera_set_text(cameras), encoding="utf-8")


# ---------------------------------------------------------------------------
# token grids and weight containers
# ---------------------------------------------------------------------------

def load_token_grid(source: str | Path | bytes | io.BufferedIOBase) -> TokenGrid:
    if isinstance(source, (str, Path)):
        with open(source, "rb") as handle:
            return load_token_grid(handle)
    if isinstance(source, bytes):
        return load_token_grid(io.BytesIO(source))
    magic = source.read(8)
    if magic != TOKEN_MAGIC:
        raise FormatError(f"bad token container magic: {magic!r}")
    header = source.read(12)
    if len(header) != 12:
        raise FormatError("token container header truncated")
    rows, cols, dim = struct.unpack("<III", header)
    expected = rows * cols * dim * 4
    payload = source.read(expected + 1)
    if len(payload) != expected:
        raise FormatError(f"token payload size mismatch: expected {expected} bytes, got {len(payload)}")
    tokens = np.frombuffer(payload, dtype="<f4").reshape(rows, cols, dim)
    bad = ~np.isfinite(tokens)
    if bad.any():
        r, c, _ = np.argwhere(bad)[0]
        raise DataError(f"non-finite token value at grid cell ({r}, {c})")
    return TokenGrid(tokens)


def save_token_grid(grid: TokenGrid, target: str | Path | io.BufferedIOBase) -> None:
    if isinstance(target, (str, Path)):
        Path(target).parent.mkdir(parents=True, exist_ok=True)
        with open(target, "wb") as handle:
            save_token_grid(grid, handle)
        return
    target.write(TOKEN_MAGIC)
    target.write(struct.pack("<III", grid.rows, grid.cols, grid.dim))
    target.write(np.ascontiguousarray(grid.tokens, dtype="<f4").tobytes())


def token_grid_bytes(grid: TokenGrid) -> bytes:
    buf = io.BytesIO()
    save_token_grid(grid, buf)
    return buf.getvalue()


def save_array_bundle(arrays: dict[str, np.ndarray], target: str | Path | io.BufferedIOBase) -> None:
    """Write named float32 arrays into one container (magic "LV3DADW1").

    Used for adapter weight snapshots and feature-pyramid dumps. Layout after
    the magic: uint32 array count, then per array uint32 name length, the
    utf-8 name, uint32 ndim, uint32 dims, float32 payload (C order).
    """
    if isinstance(target, (str, Path)):
        Path(target).parent.mkdir(parents=True, exist_ok=True)
        with open(target, "wb") as handle:
            save_array_bundle(arrays, handle)
        return
    target.write(WEIGHTS_MAGIC)
    target.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        encoded = name.encode("utf-8")
        arr32 = np.ascontiguousarray(arr, dtype="<f4")
        target.write(struct.pack("<I", len(encoded)))
        target.write(encoded)
        target.write(struct.pack("<I", arr32.ndim))
        target.write(struct.pack(f"<{arr32.ndim}I", *arr32.shape))
        target.write(arr32.tobytes())


def load_array_bundle(source: str | Path | io.BufferedIOBase) -> dict[str, np.ndarray]:
    if isinstance(source, (str, Path)):
        with open(source, "rb") as handle:
            return load_array_bundle(handle)
    magic = source.read(8)
    if magic != WEIGHTS_MAGIC:
        raise FormatError(f"bad array bundle magic: {magic!r}")

    def read_exact(nbytes: int) -> bytes:
        data = source.read(nbytes)
        if len(data) != nbytes:
            raise FormatError("array bundle truncated")
        return data

    (count,) = struct.unpack("<I", read_exact(4))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", read_exact(4))
        name = read_exact(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", read_exact(4))
        shape = struct.unpack(f"<{ndim}I", read_exact(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(read_exact(size * 4), dtype="<f4").reshape(shape)
        if not np.all(np.isfinite(arrays[name])):
            raise DataError(f"non-finite value in bundled array '{name}'")
    return arrays


# ---------------------------------------------------------------------------
# PNG images, depth, masks
# ---------------------------------------------------------------------------

def save_image_png(img: np.ndarray, path: str | Path) -> None:
    arr = check_image(img)
    data = np.round(arr * 255.0).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def load_image_png(source: str | Path | bytes) -> np.ndarray:
    img = Image.open(io.BytesIO(source) if isinstance(source, bytes) else source)
    arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return arr


def image_png_bytes(img: np.ndarray) -> bytes:
    arr = check_image(img)
    buf = io.BytesIO()
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


DEPTH_SCALE = 1000.0  # stored value = depth in meters * 1000, saturating


def depth_png_bytes(depth: np.ndarray) -> bytes:
    arr = check_depth(depth)
    data = np.clip(np.round(arr.astype(np.float64) * DEPTH_SCALE), 0, 65535).astype(np.uint16)
    buf = io.BytesIO()
    Image.fromarray(data).save(buf, format="PNG")
    return buf.getvalue()


def save_depth_png(depth: np.ndarray, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(depth_png_bytes(depth))


def load_depth_png(source: str | Path | bytes) -> np.ndarray:
    img = Image.open(io.BytesIO(source) if isinstance(source, bytes) else source)
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise FormatError("depth PNG must be single-channel")
    return (arr / DEPTH_SCALE).astype(np.float32)


def save_mask_png(mask: np.ndarray, path: str | Path) -> None:
    arr = check_mask(mask)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG", bits=1)


def load_mask_png(source: str | Path | bytes) -> np.ndarray:
    img = Image.open(io.BytesIO(source) if isinstance(source, bytes) else source)
    return np.asarray(img.convert("L")) > 127


def mask_png_bytes(mask: np.ndarray) -> bytes:
    arr = check_mask(mask)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG", bits=1)
    return buf.getvalue()
