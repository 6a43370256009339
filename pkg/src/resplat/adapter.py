"""Toy-scale conditioning adapter: geometry-token fusion and multi-scale features.

The forward path mirrors a lightweight diffusion-conditioning adapter:

1. patchify the reference condition image into 768-d tokens (14 px patches)
2. fuse with per-view geometry tokens via single-head cross-attention
   (queries and keys from the image tokens, values from the geometry tokens)
3. unpatch the attended tokens into a residual added onto the condition image
   (the unpatch projection is zero-initialized, so the fused condition equals
   the input until the adapter is trained)
4. resize to 512 px, project with an 8x8 stride-8 convolution to 64x64, and
   run four stages of [entry conv + two ConvNeXt-style blocks], average
   pooling between stages, emitting one feature map per stage at spatial
   sizes 64 / 32 / 16 / 8

Everything is plain numpy; weights are built deterministically from a seed, so
fixed seed means bit-identical weights and bit-identical pyramids.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import cv2
import numpy as np
from scipy.special import erf

from .scene import PATCH_SIZE, TOKEN_DIM, TokenGrid, check_image, check_mask

COND_RESOLUTION = 512
PROJ_STRIDE = 8
LATENT_SIZE = COND_RESOLUTION // PROJ_STRIDE  # 64
DEFAULT_CHANNELS = (320, 640, 1280, 1280)
TOY_CHANNELS = (8, 16, 32, 32)
LAYER_SCALE_INIT = 1e-6
_LN_EPS = 1e-6


@dataclass(frozen=True)
class AdapterConfig:
    channels: tuple[int, int, int, int] = DEFAULT_CHANNELS
    token_dim: int = TOKEN_DIM
    patch: int = PATCH_SIZE


@dataclass
class ConvNextBlockWeights:
    dw_w: np.ndarray      # (7, 7, C) depthwise
    dw_b: np.ndarray      # (C,)
    ln_gamma: np.ndarray  # (C,)
    ln_beta: np.ndarray   # (C,)
    pw1_w: np.ndarray     # (C, 4C)
    pw1_b: np.ndarray     # (4C,)
    pw2_w: np.ndarray     # (4C, C)
    pw2_b: np.ndarray     # (C,)
    scale: np.ndarray     # (C,) per-channel residual scale


@dataclass
class StageWeights:
    entry_w: np.ndarray   # (3, 3, Cin, Cout)
    entry_b: np.ndarray   # (Cout,)
    blocks: list[ConvNextBlockWeights] = field(default_factory=list)


@dataclass
class AdapterWeights:
    config: AdapterConfig
    patch_w: np.ndarray   # (patch*patch*3, token_dim)
    patch_b: np.ndarray   # (token_dim,)
    wq: np.ndarray        # (token_dim, token_dim)
    wk: np.ndarray
    wv: np.ndarray
    unpatch_w: np.ndarray  # (token_dim, patch*patch*3), zero at init
    unpatch_b: np.ndarray
    proj_w: np.ndarray     # (8, 8, 3, C1)
    proj_b: np.ndarray     # (C1,)
    stages: list[StageWeights] = field(default_factory=list)

    def validate(self) -> None:
        for name, arr in self.named_arrays().items():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite adapter weight: {name}")

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {
            "patch_w": self.patch_w, "patch_b": self.patch_b,
            "wq": self.wq, "wk": self.wk, "wv": self.wv,
            "unpatch_w": self.unpatch_w, "unpatch_b": self.unpatch_b,
            "proj_w": self.proj_w, "proj_b": self.proj_b,
        }
        for si, stage in enumerate(self.stages):
            out[f"stage{si}.entry_w"] = stage.entry_w
            out[f"stage{si}.entry_b"] = stage.entry_b
            for bi, blk in enumerate(stage.blocks):
                for fname in ("dw_w", "dw_b", "ln_gamma", "ln_beta", "pw1_w", "pw1_b", "pw2_w", "pw2_b", "scale"):
                    out[f"stage{si}.block{bi}.{fname}"] = getattr(blk, fname)
        return out


def init_adapter_weights(seed: int, config: AdapterConfig | None = None) -> AdapterWeights:
    """Deterministic weight construction; same seed, same bits."""
    cfg = config or AdapterConfig()
    rng = np.random.default_rng(seed)
    d = cfg.token_dim
    patch_in = cfg.patch * cfg.patch * 3

    def dense(shape, fan_in):
        return (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(np.float32)

    weights = AdapterWeights(
        config=cfg,
        patch_w=dense((patch_in, d), patch_in),
        patch_b=np.zeros(d, np.float32),
        wq=dense((d, d), d),
        wk=dense((d, d), d),
        wv=dense((d, d), d),
        unpatch_w=np.zeros((d, patch_in), np.float32),
        unpatch_b=np.zeros(patch_in, np.float32),
        proj_w=dense((PROJ_STRIDE, PROJ_STRIDE, 3, cfg.channels[0]), PROJ_STRIDE * PROJ_STRIDE * 3),
        proj_b=np.zeros(cfg.channels[0], np.float32),
    )
    c_in = cfg.channels[0]
    for c_out in cfg.channels:
        stage = StageWeights(
            entry_w=dense((3, 3, c_in, c_out), 9 * c_in),
            entry_b=np.zeros(c_out, np.float32),
        )
        for _ in range(2):
            stage.blocks.append(ConvNextBlockWeights(
                dw_w=dense((7, 7, c_out), 49),
                dw_b=np.zeros(c_out, np.float32),
                ln_gamma=np.ones(c_out, np.float32),
                ln_beta=np.zeros(c_out, np.float32),
                pw1_w=dense((c_out, 4 * c_out), c_out),
                pw1_b=np.zeros(4 * c_out, np.float32),
                pw2_w=dense((4 * c_out, c_out), 4 * c_out),
                pw2_b=np.zeros(c_out, np.float32),
                scale=np.full(c_out, LAYER_SCALE_INIT, np.float32),
            ))
        weights.stages.append(stage)
        c_in = c_out
    return weights


def weights_from_arrays(arrays: dict[str, np.ndarray]) -> AdapterWeights:
    """Rebuild AdapterWeights from a named-array bundle (shapes fix the config)."""
    channels = []
    si = 0
    while f"stage{si}.entry_w" in arrays:
        channels.append(arrays[f"stage{si}.entry_w"].shape[3])
        si += 1
    if len(channels) != 4:
        raise ValueError(f"expected 4 stages in weight bundle, found {len(channels)}")
    d = arrays["wq"].shape[0]
    patch = int(np.sqrt(arrays["patch_w"].shape[0] // 3))
    cfg = AdapterConfig(channels=tuple(channels), token_dim=d, patch=patch)
    weights = AdapterWeights(
        config=cfg,
        patch_w=arrays["patch_w"], patch_b=arrays["patch_b"],
        wq=arrays["wq"], wk=arrays["wk"], wv=arrays["wv"],
        unpatch_w=arrays["unpatch_w"], unpatch_b=arrays["unpatch_b"],
        proj_w=arrays["proj_w"], proj_b=arrays["proj_b"],
    )
    for si in range(4):
        stage = StageWeights(entry_w=arrays[f"stage{si}.entry_w"], entry_b=arrays[f"stage{si}.entry_b"])
        for bi in range(2):
            prefix = f"stage{si}.block{bi}."
            stage.blocks.append(ConvNextBlockWeights(**{
                fname: arrays[prefix + fname]
                for fname in ("dw_w", "dw_b", "ln_gamma", "ln_beta", "pw1_w", "pw1_b", "pw2_w", "pw2_b", "scale")
            }))
        weights.stages.append(stage)
    weights.validate()
    return weights


@dataclass(frozen=True)
class FeaturePyramid:
    """Four feature maps at spatial sizes 64, 32, 16, 8 (H, W, C layout)."""

    levels: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]

    def __post_init__(self):
        if len(self.levels) != 4:
            raise ValueError("a feature pyramid has exactly 4 levels")
        for i in range(1, 4):
            prev, cur = self.levels[i - 1], self.levels[i]
            if cur.shape[0] * 2 != prev.shape[0] or cur.shape[1] * 2 != prev.shape[1]:
                raise ValueError(f"level {i + 1} does not halve level {i} spatially")

    @property
    def spatial_sizes(self) -> tuple[int, ...]:
        return tuple(level.shape[0] for level in self.levels)

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(level.shape[2] for level in self.levels)


# ---------------------------------------------------------------------------
# numpy conv helpers (HWC layout)
# ---------------------------------------------------------------------------

def _conv2d_same(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    kh, kw, cin, cout = w.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((ph, ph), (pw, pw), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(0, 1))
    h, wd = x.shape[:2]
    cols = win.transpose(0, 1, 3, 4, 2).reshape(h * wd, kh * kw * cin)
    out = cols @ w.reshape(kh * kw * cin, cout)
    return (out + b).reshape(h, wd, cout)


def _depthwise7(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    xp = np.pad(x, ((3, 3), (3, 3), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (7, 7), axis=(0, 1))
    return np.einsum("hwcij,ijc->hwc", win, w, optimize=True) + b


def _layernorm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + _LN_EPS) * gamma + beta


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def _convnext_block(x: np.ndarray, blk: ConvNextBlockWeights) -> np.ndarray:
    y = _depthwise7(x, blk.dw_w.astype(np.float64), blk.dw_b.astype(np.float64))
    y = _layernorm(y, blk.ln_gamma.astype(np.float64), blk.ln_beta.astype(np.float64))
    y = _gelu(y @ blk.pw1_w.astype(np.float64) + blk.pw1_b.astype(np.float64))
    y = y @ blk.pw2_w.astype(np.float64) + blk.pw2_b.astype(np.float64)
    return x + blk.scale.astype(np.float64) * y


def _avgpool2(x: np.ndarray) -> np.ndarray:
    h, w, c = x.shape
    return x.reshape(h // 2, 2, w // 2, 2, c).mean(axis=(1, 3))


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def patchify(img: np.ndarray, weights: AdapterWeights) -> TokenGrid:
    """Linear patch embedding of an image whose sides divide by the patch size.

    Patch content is flattened in (row, column, channel) order before the
    learned projection.
    """
    img = check_image(img)
    p = weights.config.patch
    h, w, _ = img.shape
    if h % p or w % p:
        raise ValueError(f"image {w}x{h} is not divisible by patch size {p}")
    rows, cols = h // p, w // p
    patches = img.reshape(rows, p, cols, p, 3).transpose(0, 2, 1, 3, 4).reshape(rows * cols, p * p * 3)
    tokens = patches.astype(np.float64) @ weights.patch_w.astype(np.float64) + weights.patch_b
    return TokenGrid(tokens.reshape(rows, cols, -1).astype(np.float32), patch=p)


def attention_weights(image_tokens: TokenGrid, weights: AdapterWeights) -> np.ndarray:
    """Row-stochastic attention matrix over the image-token positions."""
    d = weights.config.token_dim
    flat = image_tokens.tokens.reshape(-1, d).astype(np.float64)
    q = flat @ weights.wq.T.astype(np.float64)
    k = flat @ weights.wk.T.astype(np.float64)
    logits = q @ k.T / np.sqrt(d)
    logits -= logits.max(axis=1, keepdims=True)
    expl = np.exp(logits)
    return expl / expl.sum(axis=1, keepdims=True)


def cross_attention(image_tokens: TokenGrid, geometry_tokens: TokenGrid, weights: AdapterWeights) -> TokenGrid:
    """Fuse geometry tokens into the image-token grid.

    Queries and keys both come from the image tokens; values come from the
    geometry tokens, so the output is a content-addressed remix of geometry
    features on the image lattice.
    """
    if image_tokens.dim != weights.config.token_dim or geometry_tokens.dim != weights.config.token_dim:
        raise ValueError(
            f"token dim mismatch: image {image_tokens.dim}, geometry {geometry_tokens.dim}, "
            f"weights {weights.config.token_dim}"
        )
    if image_tokens.tokens.shape[:2] != geometry_tokens.tokens.shape[:2]:
        raise ValueError(
            f"token grid mismatch: image {image_tokens.tokens.shape[:2]} vs "
            f"geometry {geometry_tokens.tokens.shape[:2]}"
        )
    attn = attention_weights(image_tokens, weights)
    values = geometry_tokens.tokens.reshape(-1, geometry_tokens.dim).astype(np.float64) @ weights.wv.T.astype(np.float64)
    fused = attn @ values
    rows, cols = image_tokens.rows, image_tokens.cols
    return TokenGrid(fused.reshape(rows, cols, -1).astype(np.float32), patch=image_tokens.patch)


def unpatch_and_fuse(attended: TokenGrid, condition: np.ndarray, weights: AdapterWeights) -> np.ndarray:
    """Map tokens back to a pixel residual and add it to the condition image.

    The unpatch projection starts at zero, so a freshly initialized adapter
    returns the condition unchanged, bit for bit.
    """
    condition = check_image(condition)
    p = attended.patch
    h, w, _ = condition.shape
    if attended.rows * p != h or attended.cols * p != w:
        raise ValueError(
            f"token grid {attended.rows}x{attended.cols} (patch {p}) does not cover a {w}x{h} image"
        )
    flat = attended.tokens.reshape(-1, attended.dim).astype(np.float64)
    patches = flat @ weights.unpatch_w.astype(np.float64) + weights.unpatch_b
    residual = (
        patches.reshape(attended.rows, attended.cols, p, p, 3)
        .transpose(0, 2, 1, 3, 4)
        .reshape(h, w, 3)
    )
    return (condition + residual.astype(np.float32)).astype(np.float32)


def adapter_forward(condition: np.ndarray, weights: AdapterWeights) -> FeaturePyramid:
    """Run the projection + stage stack on a (possibly fused) condition image."""
    weights.validate()
    condition = check_image(condition)
    if condition.shape[:2] != (COND_RESOLUTION, COND_RESOLUTION):
        condition = cv2.resize(condition, (COND_RESOLUTION, COND_RESOLUTION), interpolation=cv2.INTER_LINEAR)
        condition = np.clip(condition, 0.0, 1.0)
    x = condition.astype(np.float64)

    # 8x8 stride-8 projection: non-overlapping blocks
    s = PROJ_STRIDE
    blocks = x.reshape(LATENT_SIZE, s, LATENT_SIZE, s, 3).transpose(0, 2, 1, 3, 4).reshape(LATENT_SIZE * LATENT_SIZE, s * s * 3)
    c1 = weights.config.channels[0]
    x = (blocks @ weights.proj_w.astype(np.float64).reshape(s * s * 3, c1) + weights.proj_b).reshape(LATENT_SIZE, LATENT_SIZE, c1)

    levels = []
    for si, stage in enumerate(weights.stages):
        x = _conv2d_same(x, stage.entry_w.astype(np.float64), stage.entry_b.astype(np.float64))
        for blk in stage.blocks:
            x = _convnext_block(x, blk)
        levels.append(x.astype(np.float32))
        if si < 3:
            x = _avgpool2(x)
    return FeaturePyramid(levels=tuple(levels))


def inject(encoder_features: FeaturePyramid, condition_features: FeaturePyramid) -> FeaturePyramid:
    """Elementwise sum per pyramid level."""
    out = []
    for i, (enc, cond) in enumerate(zip(encoder_features.levels, condition_features.levels), start=1):
        if enc.shape != cond.shape:
            raise ValueError(f"pyramid level {i} shape mismatch: {enc.shape} vs {cond.shape}")
        out.append(enc + cond)
    return FeaturePyramid(levels=tuple(out))


def pack_condition(noised_latent: np.ndarray, coarse_latent: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Assemble the 9-channel 64x64 denoiser input.

    Channel order: noised latent (4), coarse-image latent (4), mask (1). The
    mask is area-averaged down to 64x64 and thresholded at 0.5.
    """
    noised = np.asarray(noised_latent, dtype=np.float32)
    coarse = np.asarray(coarse_latent, dtype=np.float32)
    if noised.shape != (4, LATENT_SIZE, LATENT_SIZE):
        raise ValueError(f"noised latent must be (4, 64, 64), got {noised.shape}")
    if coarse.shape != (4, LATENT_SIZE, LATENT_SIZE):
        raise ValueError(f"coarse latent must be (4, 64, 64), got {coarse.shape}")
    mask = check_mask(mask)
    if mask.shape != (LATENT_SIZE, LATENT_SIZE):
        small = cv2.resize(mask.astype(np.float32), (LATENT_SIZE, LATENT_SIZE), interpolation=cv2.INTER_AREA)
    else:
        small = mask.astype(np.float32)
    mask_channel = (small >= 0.5).astype(np.float32)[None]
    return np.concatenate([noised, coarse, mask_channel], axis=0)
