"""Batch command line: validate, parameterize, analyze, synth, report."""

from __future__ import annotations

import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from .mesh_core import GeodesicGraph, boundary_loops, shortest_boundary_geodesic, validate_topology
from .meshfiles import ingest, load_manifest, write_dataset
from .parameterize import cut_along_geodesic, flatten_to_unit_square, resample_grid
from .pipeline import PipelineConfig, run_pipeline
from .synth import TubeSpec, generate_sequence


def _parse_grid(text):
    try:
        n, m = text.lower().split("x")
        return int(n), int(m)
    except ValueError:
        raise click.BadParameter(f"expected NxM, got {text!r}")


def _load_config(config_path, **overrides) -> PipelineConfig:
    cfg = PipelineConfig.from_file(config_path) if config_path else PipelineConfig()
    clean = {k: v for k, v in overrides.items() if v is not None}
    return replace(cfg, **clean) if clean else cfg


@click.group()
@click.option("--verbose", is_flag=True, help="Enable debug logging.")
def main(verbose):
    """Grid parameterization and wall-motion analysis of tubular surfaces."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )


@main.command()
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--out", type=click.Path(), default=None, help="Write a JSON report here.")
def validate(manifest, out):
    """Check tube topology of every frame in a dataset."""
    man = load_manifest(manifest)
    meshes = ingest(man)
    reports = []
    failures = 0
    for surface, frames in sorted(meshes.items()):
        for k, mesh in enumerate(frames):
            rep = validate_topology(mesh)
            reports.append({
                "surface": surface,
                "frame": k,
                "passes": rep.passes,
                "boundary_loops": rep.boundary_loop_count,
                "euler_characteristic": rep.euler_characteristic,
                "degenerate_triangles": rep.degenerate_triangles.tolist(),
                "messages": rep.messages,
            })
            if not rep.passes:
                failures += 1
                click.echo(f"{surface}[{k}]: {rep}")
    click.echo(f"validated {len(reports)} frames, {failures} failures")
    if out:
        Path(out).write_text(json.dumps(reports, indent=2) + "\n")
    if failures:
        sys.exit(1)


@main.command()
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--grid", default="80x50", help="Lattice size NxM (default 80x50).")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
def parameterize(manifest, out, grid, config_path):
    """Compute consistent grids for the outer surface and save them."""
    n, m = _parse_grid(grid)
    cfg = _load_config(config_path, grid_n=n, grid_m=m)
    man = load_manifest(manifest)
    meshes = ingest(man)["outer"]
    inlet = man.inlet if cfg.inlet is None else cfg.inlet
    grids = []
    for k, mesh in enumerate(meshes):
        graph = GeodesicGraph(mesh, cfg.steiner_per_edge)
        seam = shortest_boundary_geodesic(mesh, graph=graph)
        inlet_loop, _ = boundary_loops(mesh, inlet=inlet)
        ids = set(int(v) for v in inlet_loop.vertex_indices)
        sp = seam.start
        on_inlet = (sp.vertex in ids) if sp.vertex is not None else (sp.edge[0] in ids)
        if not on_inlet:
            seam = seam.reversed()
        flat = flatten_to_unit_square(cut_along_geodesic(mesh, seam))
        grids.append(resample_grid(flat, cfg.grid_n, cfg.grid_m, frame_index=k).points)
        click.echo(f"frame {k}: seam {seam.length:.4f} mm, grid {n}x{m}")
    out_path = Path(out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(out_path, grids=np.stack(grids), period=man.period)
    click.echo(f"wrote {out_path}")


@main.command()
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--grid", default=None, help="Lattice size NxM (default 80x50).")
@click.option("--no-clip", is_flag=True, help="Skip the volume-preserving clip "
                                              "(fixed-window outputs only).")
@click.option("--surfaces", default=None,
              help="Comma-separated subset of outer,inner,lumen.")
@click.option("--threshold", type=click.Choice(["gauss", "p75", "both"]), default=None)
def analyze(manifest, out, config_path, grid, no_clip, surfaces, threshold):
    """Run the full analysis pipeline for one subject."""
    overrides = {}
    if grid:
        overrides["grid_n"], overrides["grid_m"] = _parse_grid(grid)
    if no_clip:
        overrides["clip"] = False
    if surfaces:
        overrides["surfaces"] = tuple(s.strip() for s in surfaces.split(",") if s.strip())
    if threshold:
        overrides["threshold"] = threshold
    cfg = _load_config(config_path, **overrides)
    summary = run_pipeline(manifest, cfg, out)
    table = summary["cycle_table"]
    click.echo(json.dumps(table, indent=2))
    click.echo(f"outputs in {out}")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="TubeSpec JSON; defaults are used when omitted.")
@click.option("--out", required=True, type=click.Path())
@click.option("--format", "fmt", type=click.Choice(["ply", "obj"]), default="ply")
@click.option("--subject", default="synthetic")
@click.option("--cohort", default="normal")
def synth(config_path, out, fmt, subject, cohort):
    """Generate a synthetic deforming-tube dataset plus manifest."""
    spec = TubeSpec(**json.loads(Path(config_path).read_text())) if config_path else TubeSpec()
    result = generate_sequence(spec)
    inlet = "auto" if abs(spec.inlet_radius - spec.outlet_radius) > 0.011 * max(
        spec.inlet_radius, spec.outlet_radius) else 0
    manifest = write_dataset(
        out,
        {"outer": result.outer, "inner": result.inner, "lumen": result.lumen},
        period=spec.period, subject=subject, cohort=cohort, fmt=fmt, inlet=inlet,
    )
    (Path(out) / "tube_spec.json").write_text(json.dumps(spec.to_dict(), indent=2) + "\n")
    click.echo(f"wrote {3 * spec.frames} meshes and {manifest}")


@main.command()
@click.option("--out", "out_dir", required=True, type=click.Path(exists=True),
              help="Directory of a completed analyze run.")
def report(out_dir):
    """Print the cycle summary table of a finished run."""
    summary = json.loads((Path(out_dir) / "summary.json").read_text())
    t = summary["cycle_table"]
    click.echo(f"subject: {summary['subject']} ({summary['cohort']}), "
               f"{summary['frames']} frames, period {1000 * summary['period_s']:.0f} ms")
    click.echo("expand%  contract%  ratio  period  expand  contract  "
               "| speed mm/s: min max avg std cycle")
    click.echo(
        f"{t['expand_pct']:6.2f}%  {t['contract_pct']:8.2f}%  {t['ratio']:5.2f}  "
        f"{t['period_ms']:6.0f}  {t['expand_ms']:6.0f}  {t['contract_ms']:8.0f}  "
        f"| {t['speed_min']:.4g} {t['speed_max']:.4g} {t['speed_avg']:.4g} "
        f"{t['speed_std']:.4g} {t['speed_cycle']:.4g}"
    )


if __name__ == "__main__":
    main()
