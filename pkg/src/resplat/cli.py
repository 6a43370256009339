"""Command-line interface.

Subcommands: render, mask, filter-palette, adapter, refine, level-up, run,
eval, serve, fixture. Global options --config / --seed / --out-dir apply to
the pipeline-level commands; the RESPLAT_BACKEND_URL environment variable
redirects any backend spec to an HTTP endpoint.

Exit codes: 0 success, 1 usage or data error, 2 some views failed to refine,
3 a backend failed fatally.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__, formats
from .adapter import (
    AdapterConfig,
    DEFAULT_CHANNELS,
    TOY_CHANNELS,
    adapter_forward,
    cross_attention,
    init_adapter_weights,
    patchify,
    unpatch_and_fuse,
    weights_from_arrays,
)
from .backends import make_generator, make_reconstructor, ViewRecord
from .errors import BackendError, ResplatError
from .masking import opacity_mask, refine_mask
from .metrics import depth_metrics, fit_embedding_gaussian, frechet_distance, met3r_sequence, psnr, ssim
from .palette import DEFAULT_ETA_P, filter_dataset, score_pair, write_records_csv
from .pipeline import PipelineConfig, level_up, refine_views, run_alg1, view_request_id
from .rasterizer import RenderOptions, render
from .synthetic import write_rgbd_fixture

EXIT_PARTIAL = 2
EXIT_BACKEND = 3


def _parse_rgb(text: str) -> tuple[float, float, float]:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 3:
        raise click.BadParameter("expected r,g,b")
    return tuple(parts)


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(__version__)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Pipeline config JSON.")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--out-dir", type=click.Path(file_okay=False), default=None, help="Output directory.")
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
@click.pass_context
def main(ctx: click.Context, config_path: str | None, seed: int | None, out_dir: str | None, verbose: bool):
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    ctx.ensure_object(dict)
    ctx.obj.update(config_path=config_path, seed=seed, out_dir=out_dir)


def _global_out_dir(ctx: click.Context, fallback: str) -> Path:
    out = ctx.obj.get("out_dir") or fallback
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_config(ctx: click.Context, require: bool = False) -> PipelineConfig:
    path = ctx.obj.get("config_path")
    if path:
        cfg = PipelineConfig.from_json(path)
    elif require:
        raise click.UsageError("this command needs --config (global option before the subcommand)")
    else:
        cfg = PipelineConfig()
    if ctx.obj.get("seed") is not None:
        cfg.seed = ctx.obj["seed"]
    if ctx.obj.get("out_dir") is not None:
        cfg.out_dir = ctx.obj["out_dir"]
    return cfg


@main.command("render")
@click.option("--scene", "scene_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--cameras", "cameras_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--index", type=int, default=None, help="Render only this camera index.")
@click.option("--background", default="0,0,0", show_default=True, help="Background color r,g,b.")
@click.option("--tile", type=int, default=16, show_default=True)
@click.option("--alpha-clamp", type=float, default=0.99, show_default=True)
@click.option("--early-stop", type=float, default=1e-4, show_default=True)
@click.option("--workers", type=int, default=0, show_default=True, help="Tile workers; 0 = auto.")
@click.pass_context
def render_cmd(ctx, scene_path, cameras_path, index, background, tile, alpha_clamp, early_stop, workers):
    """Render color / depth / transmittance PNGs for each camera."""
    out_dir = _global_out_dir(ctx, "renders")
    scene = formats.load_scene_ply(scene_path)
    cameras = formats.load_camera_set(cameras_path)
    opts = RenderOptions(background=_parse_rgb(background), tile=tile,
                         alpha_clamp=alpha_clamp, early_stop=early_stop, workers=workers)
    indices = [index] if index is not None else range(len(cameras))
    for i in indices:
        out = render(scene, cameras[i], opts)
        formats.save_image_png(out.color, out_dir / f"view_{i:03d}_color.png")
        formats.save_depth_png(out.depth, out_dir / f"view_{i:03d}_depth.png")
        alpha8 = np.repeat(out.transmittance[..., None], 3, axis=2)
        formats.save_image_png(alpha8, out_dir / f"view_{i:03d}_alpha.png")
        click.echo(f"view {i:03d}: coverage mean {out.transmittance.mean():.4f}")
    click.echo(f"wrote renders to {out_dir}")


@main.command("mask")
@click.option("--scene", "scene_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--cameras", "cameras_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--index", type=int, default=None)
@click.option("--eta-mask", type=float, default=0.5, show_default=True)
@click.option("--k-close", type=int, default=5, show_default=True)
@click.option("--k-dilate", type=int, default=20, show_default=True)
@click.option("--literal-complement", is_flag=True,
              help="Complement the closed mask before dilating (no hole fill).")
@click.pass_context
def mask_cmd(ctx, scene_path, cameras_path, index, eta_mask, k_close, k_dilate, literal_complement):
    """Extract and refine opacity masks for each camera."""
    out_dir = _global_out_dir(ctx, "masks")
    scene = formats.load_scene_ply(scene_path)
    cameras = formats.load_camera_set(cameras_path)
    indices = [index] if index is not None else range(len(cameras))
    for i in indices:
        out = render(scene, cameras[i], RenderOptions())
        m_bar = opacity_mask(out.transmittance, eta_mask)
        m_ref = refine_mask(m_bar, k_close, k_dilate, literal_complement=literal_complement)
        formats.save_mask_png(m_bar, out_dir / f"view_{i:03d}_mask.png")
        formats.save_mask_png(m_ref, out_dir / f"view_{i:03d}_mask_refined.png")
        click.echo(f"view {i:03d}: masked {m_bar.mean():.3f} -> refined {m_ref.mean():.3f}")
    click.echo(f"wrote masks to {out_dir}")


@main.command("filter-palette")
@click.option("--manifest", "manifest_path", type=click.Path(exists=True, dir_okay=False), required=True,
              help="One pair per line: gt_image mask [render_image].")
@click.option("--eta-p", type=float, default=DEFAULT_ETA_P, show_default=True,
              help="Keep pairs with score strictly above this threshold.")
@click.option("--score-render", is_flag=True,
              help="Score the rendered image (third manifest column) instead of ground truth.")
@click.option("--out-manifest", type=click.Path(dir_okay=False), default=None)
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False), default=None)
@click.pass_context
def filter_palette_cmd(ctx, manifest_path, eta_p, score_render, out_manifest, csv_path):
    """Score masked-region intensity spread and keep informative pairs."""
    out_dir = _global_out_dir(ctx, "palette")
    out_manifest = Path(out_manifest) if out_manifest else out_dir / "kept.txt"
    csv_path = Path(csv_path) if csv_path else out_dir / "palette_scores.csv"
    records = []
    lines = []
    for raw in Path(manifest_path).read_text(encoding="utf-8").splitlines():
        raw = raw.strip()
        if not raw or raw.startswith("#"):
            continue
        cols = raw.split()
        if len(cols) < 2:
            raise click.UsageError(f"manifest line needs at least 2 columns: {raw!r}")
        if score_render and len(cols) < 3:
            raise click.UsageError(f"--score-render needs a third column: {raw!r}")
        image_path = cols[2] if score_render else cols[0]
        img = formats.load_image_png(image_path)
        mask = formats.load_mask_png(cols[1])
        records.append(score_pair(cols[0], img, mask))
        lines.append(raw)
    kept = set(filter_dataset(records, eta_p))
    write_records_csv(records, csv_path)
    out_manifest.parent.mkdir(parents=True, exist_ok=True)
    out_manifest.write_text(
        "\n".join(line for line, rec in zip(lines, records) if rec.pair_id in kept) + "\n",
        encoding="utf-8",
    )
    click.echo(f"kept {len(kept)}/{len(records)} pairs (eta_p={eta_p}); scores in {csv_path}")


@main.command("adapter")
@click.option("--image", "image_path", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Reference condition image (sides divisible by 14).")
@click.option("--tokens", "tokens_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--weights", "weights_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Weight bundle; otherwise build from --adapter-seed.")
@click.option("--adapter-seed", type=int, default=0, show_default=True)
@click.option("--channels", type=click.Choice(["toy", "full"]), default="toy", show_default=True)
@click.option("--save-weights", type=click.Path(dir_okay=False), default=None)
@click.pass_context
def adapter_cmd(ctx, image_path, tokens_path, weights_path, adapter_seed, channels, save_weights):
    """Run the conditioning forward pass and dump the feature pyramid."""
    out_dir = _global_out_dir(ctx, "adapter")
    img = formats.load_image_png(image_path)
    tokens = formats.load_token_grid(tokens_path)
    if weights_path:
        weights = weights_from_arrays(formats.load_array_bundle(weights_path))
    else:
        plan = TOY_CHANNELS if channels == "toy" else DEFAULT_CHANNELS
        weights = init_adapter_weights(adapter_seed, AdapterConfig(channels=plan))
    if save_weights:
        formats.save_array_bundle(weights.named_arrays(), save_weights)
    image_tokens = patchify(img, weights)
    fused_tokens = cross_attention(image_tokens, tokens, weights)
    condition = unpatch_and_fuse(fused_tokens, img, weights)
    pyramid = adapter_forward(condition, weights)
    dump = {f"level{i + 1}": level for i, level in enumerate(pyramid.levels)}
    dump["condition"] = condition
    out_path = out_dir / "pyramid.bin"
    formats.save_array_bundle(dump, out_path)
    sizes = ", ".join(f"{lv.shape[0]}x{lv.shape[1]}x{lv.shape[2]}" for lv in pyramid.levels)
    click.echo(f"pyramid levels: {sizes}; wrote {out_path}")


@main.command("refine")
@click.option("--scene", "scene_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--cameras", "cameras_path", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Poses to render and refine.")
@click.option("--reference", "reference_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--tokens", "tokens_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--backend", default="stub", show_default=True, help="stub | dir:<root> | http(s) URL.")
@click.option("--eta-mask", type=float, default=0.5, show_default=True)
@click.option("--k-close", type=int, default=5, show_default=True)
@click.option("--k-dilate", type=int, default=20, show_default=True)
@click.option("--literal-complement", is_flag=True)
@click.pass_context
def refine_cmd(ctx, scene_path, cameras_path, reference_path, tokens_path, backend,
               eta_mask, k_close, k_dilate, literal_complement):
    """Render, mask, and dispatch refinement for every camera."""
    out_dir = _global_out_dir(ctx, "refine")
    cfg = _load_config(ctx)
    cfg.out_dir = str(out_dir)
    cfg.generator = backend
    cfg.eta_mask = eta_mask
    cfg.k_close = k_close
    cfg.k_dilate = k_dilate
    cfg.literal_complement_mask = literal_complement
    cfg.tokens = tokens_path

    scene = formats.load_scene_ply(scene_path)
    cameras = formats.load_camera_set(cameras_path)
    reference = formats.load_image_png(reference_path)
    ref_record = ViewRecord(image=reference, pose=cameras[0])
    from .pipeline import resolve_tokens

    tokens = resolve_tokens(cfg, ref_record)
    try:
        results = refine_views(scene, cameras, make_generator(cfg.generator), cfg, tokens, reference, out_dir)
    except BackendError as exc:
        click.echo(f"backend fatal: {exc}", err=True)
        ctx.exit(EXIT_BACKEND)
    failed = [r for r in results if not r.ok]
    for r in results:
        click.echo(f"{r.request_id}: {'failed: ' + r.error if r.error else ('reused' if r.reused else 'completed')}")
    formats.save_camera_set(cameras, out_dir / "cameras_extrapolated.txt")
    if failed:
        ctx.exit(EXIT_PARTIAL)


@main.command("level-up")
@click.option("--inputs-dir", type=click.Path(exists=True, file_okay=False), required=True,
              help="Directory with cameras.txt and view_###.png [depth_###.png].")
@click.option("--run-dir", type=click.Path(exists=True, file_okay=False), default=None,
              help="Previous refine/run output to pull refined views from.")
@click.option("--backend", default="stub", show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None,
              help="Output scene PLY (default <out-dir>/scene_leveled.ply).")
@click.pass_context
def level_up_cmd(ctx, inputs_dir, run_dir, backend, out_path):
    """Re-reconstruct from input views plus previously refined views."""
    from .pipeline import load_input_views

    out_dir = _global_out_dir(ctx, "level_up")
    out_path = Path(out_path) if out_path else out_dir / "scene_leveled.ply"
    inputs = load_input_views(inputs_dir)
    refined: list[ViewRecord] = []
    if run_dir:
        run_dir = Path(run_dir)
        cfg = PipelineConfig.from_json(run_dir / "config.json") if (run_dir / "config.json").exists() else PipelineConfig()
        poses = formats.load_camera_set(run_dir / "cameras_extrapolated.txt")
        for pose in poses:
            vdir = run_dir / "views" / view_request_id(pose, cfg)
            if not (vdir / "refined.png").exists():
                continue
            depth_file = vdir / "depth.png"
            depth = formats.load_depth_png(depth_file) if depth_file.exists() else None
            if depth is not None and not (depth > 0).any():
                depth = None
            refined.append(ViewRecord(image=formats.load_image_png(vdir / "refined.png"), pose=pose, depth=depth))
    try:
        scene = level_up(inputs, refined, make_reconstructor(backend))
    except BackendError as exc:
        click.echo(f"backend fatal: {exc}", err=True)
        ctx.exit(EXIT_BACKEND)
    formats.save_scene_ply(scene, out_path)
    click.echo(f"leveled scene: {len(scene)} primitives ({len(inputs)} inputs + {len(refined)} refined) -> {out_path}")


@main.command("run")
@click.pass_context
def run_cmd(ctx):
    """Run the full pipeline from the global --config."""
    cfg = _load_config(ctx, require=True)
    try:
        manifest = run_alg1(cfg)
    except BackendError as exc:
        click.echo(f"backend fatal: {exc}", err=True)
        ctx.exit(EXIT_BACKEND)
    failed = manifest.get("failed_views", 0)
    total = len(manifest.get("views", []))
    click.echo(f"run complete: {total - failed}/{total} views refined, manifest in {cfg.out_dir}")
    if failed:
        ctx.exit(EXIT_PARTIAL)


@main.command("eval")
@click.option("--manifest", "manifest_path", type=click.Path(exists=True, dir_okay=False), required=True,
              help="One view per line: pred_image gt_image [pred_depth gt_depth].")
@click.option("--align", type=click.Choice(["none", "median"]), default="none", show_default=True)
@click.option("--met3r", "met3r_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Pairwise consistency scores, one per line.")
@click.option("--embeddings-a", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Token container of embeddings for a Frechet distance.")
@click.option("--embeddings-b", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--out", "csv_path", type=click.Path(dir_okay=False), default=None)
@click.pass_context
def eval_cmd(ctx, manifest_path, align, met3r_path, embeddings_a, embeddings_b, csv_path):
    """Compute image and depth metrics over a manifest of view pairs."""
    import csv as csv_mod

    out_dir = _global_out_dir(ctx, "eval")
    csv_path = Path(csv_path) if csv_path else out_dir / "metrics.csv"
    rows = []
    for raw in Path(manifest_path).read_text(encoding="utf-8").splitlines():
        raw = raw.strip()
        if not raw or raw.startswith("#"):
            continue
        cols = raw.split()
        if len(cols) not in (2, 4):
            raise click.UsageError(f"manifest line needs 2 or 4 columns: {raw!r}")
        pred = formats.load_image_png(cols[0])
        gt = formats.load_image_png(cols[1])
        row = {"pred": cols[0], "psnr": psnr(pred, gt), "ssim": ssim(pred, gt)}
        if len(cols) == 4:
            report = depth_metrics(formats.load_depth_png(cols[2]), formats.load_depth_png(cols[3]), align=align)
            row.update(abs_rel=report.abs_rel, rmse=report.rmse, rmse_log=report.rmse_log,
                       delta125=report.delta125, valid_pixels=report.valid_pixel_count)
        rows.append(row)
    if not rows:
        raise click.UsageError("manifest is empty")

    fields = ["pred", "psnr", "ssim", "abs_rel", "rmse", "rmse_log", "delta125", "valid_pixels"]
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", newline="", encoding="utf-8") as handle:
        writer = csv_mod.DictWriter(handle, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)

    finite_psnr = [r["psnr"] for r in rows if np.isfinite(r["psnr"])]
    mean_psnr = float(np.mean(finite_psnr)) if finite_psnr else float("inf")
    click.echo(f"views: {len(rows)}  psnr: {mean_psnr:.3f}  ssim: {np.mean([r['ssim'] for r in rows]):.4f}")
    if any("abs_rel" in r for r in rows):
        click.echo(
            "depth  abs_rel: {:.4f}  rmse: {:.4f}  rmse_log: {:.4f}  delta<1.25: {:.4f}".format(
                *(np.mean([r[k] for r in rows if k in r]) for k in ("abs_rel", "rmse", "rmse_log", "delta125"))
            )
        )
    if met3r_path:
        scores = [float(s) for s in Path(met3r_path).read_text().split()]
        click.echo(f"met3r sequence: {met3r_sequence(scores):.4f}")
    if embeddings_a and embeddings_b:
        emb_a = formats.load_token_grid(embeddings_a).tokens.reshape(-1, formats.load_token_grid(embeddings_a).dim)
        emb_b = formats.load_token_grid(embeddings_b).tokens.reshape(-1, formats.load_token_grid(embeddings_b).dim)
        fd = frechet_distance(*fit_embedding_gaussian(emb_a), *fit_embedding_gaussian(emb_b))
        click.echo(f"frechet distance: {fd:.6f}")
    click.echo(f"wrote {csv_path}")


@main.command("serve")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
def serve_cmd(host, port):
    """Serve the stub generator/reconstructor over the HTTP backend protocol."""
    import uvicorn

    from .service import app

    uvicorn.run(app, host=host, port=port, log_level="info")


@main.command("fixture")
@click.option("--views", "n_views", type=int, default=2, show_default=True)
@click.option("--size", type=int, default=126, show_default=True)
@click.option("--baseline", type=float, default=0.5, show_default=True)
@click.option("--no-card", is_flag=True, help="Wall only, no depth discontinuity.")
@click.pass_context
def fixture_cmd(ctx, n_views, size, baseline, no_card):
    """Write a synthetic RGBD input set (cameras, views, depth, tokens)."""
    out_dir = _global_out_dir(ctx, "fixture")
    write_rgbd_fixture(out_dir, n_views, size, baseline, card=not no_card)
    click.echo(f"fixture with {n_views} views at {size}x{size} in {out_dir}")


def entrypoint() -> None:
    try:
        main(standalone_mode=True)
    except ResplatError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)


if __name__ == "__main__":
    entrypoint()
