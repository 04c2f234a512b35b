"""Batch pipeline: manifest in, analysis directory out.

Stages: validate -> seam geodesics -> seam stabilization -> cut/flatten ->
grid resampling -> cycle alignment -> optional volume-preserving clip ->
cross sections -> area image analyses -> curvature stacks -> strain
fields -> contour shape modes -> CSV / PNG / summary exports.
"""

from __future__ import annotations

import json
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import kinematics as kin  # noqa: E402
from . import sections as sec  # noqa: E402
from . import shape as shp  # noqa: E402
from .imaging import AREA_COLORMAP, gradient_rgb, normalize_matrix, render_image, save_figure  # noqa: E402
from .mesh_core import (  # noqa: E402
    GeodesicGraph,
    TriMeshFrame,
    boundary_loops,
    enclosed_volume,
    remove_degenerate_triangles,
    shortest_boundary_geodesic,
    validate_topology,
)
from .meshfiles import DatasetManifest, ingest, load_manifest  # noqa: E402
from .parameterize import (  # noqa: E402
    GridMesh,
    align_lumen_seam,
    cut_along_geodesic,
    flatten_to_unit_square,
    grid_layer_volume,
    project_to_inner,
    resample_grid,
)
from .temporal import (  # noqa: E402
    CyclePhaseMap,
    SurfaceSequence,
    align_cycle_by_volume,
    clip_to_constant_volume,
    stabilize_seam_endpoints,
)

logger = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    """A pipeline stage failed; the message names the stage and context."""


@dataclass
class PipelineConfig:
    """Declarative pipeline settings (key-value config file compatible)."""

    grid_n: int = 80
    grid_m: int = 50
    clip: bool = True
    surfaces: tuple = ("outer", "inner", "lumen")
    threshold: str = "both"          # gauss | p75 | both
    steiner_per_edge: int = 3
    contour_samples: int = 100
    pca_modes: int = 3
    pca_stations: Optional[tuple] = None
    magnification: int = 4
    inlet: Optional[object] = None   # override the manifest's inlet labeling
    stabilize_seams: bool = True
    two_segment_warp: bool = True
    projection_max_distance: float = 0.2
    fail_on_section_violations: bool = False
    annotated_figures: bool = True

    @staticmethod
    def from_file(path) -> "PipelineConfig":
        doc = json.loads(Path(path).read_text())
        known = {f for f in PipelineConfig.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "surfaces" in doc:
            doc["surfaces"] = tuple(doc["surfaces"])
        if "pca_stations" in doc and doc["pca_stations"] is not None:
            doc["pca_stations"] = tuple(doc["pca_stations"])
        return PipelineConfig(**doc)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["surfaces"] = list(self.surfaces)
        if self.pca_stations is not None:
            d["pca_stations"] = list(self.pca_stations)
        return d


def _fmt_row(values):
    out = []
    for v in values:
        if isinstance(v, (int, np.integer)):
            out.append(str(int(v)))
        elif v is None or (isinstance(v, float) and not np.isfinite(v)):
            out.append("nan")
        else:
            out.append(f"{float(v):.12g}")
    return ",".join(out)


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)]
    lines.extend(_fmt_row(r) for r in rows)
    path.write_text("\n".join(lines) + "\n")


def write_matrix_csv(path, matrix, row_label: str, col_prefix: str):
    matrix = np.asarray(matrix)
    header = [row_label] + [f"{col_prefix}{k}" for k in range(matrix.shape[1])]
    rows = [[j] + list(matrix[j]) for j in range(matrix.shape[0])]
    write_csv(path, header, rows)


def prepare_mesh(mesh: TriMeshFrame, stage: str) -> TriMeshFrame:
    """Validate one frame; repair degenerate triangles and inward
    orientation, reject anything else."""
    report = validate_topology(mesh)
    if len(report.degenerate_triangles):
        mesh = remove_degenerate_triangles(mesh)
        report = validate_topology(mesh)
    if not report.passes:
        raise PipelineError(f"{stage}: topology check failed: {'; '.join(report.messages)}")
    if enclosed_volume(mesh, signed=True) < 0:
        mesh = TriMeshFrame(mesh.vertices, mesh.triangles[:, ::-1],
                            mesh.frame_index, mesh.time)
        warnings.warn(f"{stage}: flipped inward-facing orientation")
    return mesh


def _orient_seam_from_inlet(mesh, seam, inlet_loop):
    ids = set(int(v) for v in inlet_loop.vertex_indices)
    sp = seam.start
    if sp.vertex is not None:
        on_inlet = sp.vertex in ids
    else:
        on_inlet = sp.edge[0] in ids or sp.edge[1] in ids
    return seam if on_inlet else seam.reversed()


def _parameterize_frames(frames, config, inlet, label, seams=None, progress=None):
    """Cut, flatten and resample a list of frames along given seams."""
    grids = []
    for t, mesh in enumerate(frames):
        try:
            cut = cut_along_geodesic(mesh, seams[t])
            flat = flatten_to_unit_square(cut)
            grids.append(resample_grid(flat, config.grid_n, config.grid_m,
                                       frame_index=t, label=label))
        except Exception as exc:
            raise PipelineError(f"parameterize[{label}] frame {t}: {exc}") from exc
    return grids


def run_pipeline(manifest, config: Optional[PipelineConfig] = None,
                 out_dir="tubekin_out") -> dict:
    """Run the full analysis for one subject; returns the summary dict.

    ``manifest`` is a path to a manifest JSON or a DatasetManifest.
    Outputs (CSV tables, PNG images, summary.json) land in ``out_dir``.
    """
    t_start = time.time()
    config = config or PipelineConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not isinstance(manifest, DatasetManifest):
        manifest = load_manifest(manifest)
    inlet = manifest.inlet if config.inlet is None else config.inlet
    if inlet not in ("auto", 0, 1):
        inlet = "auto"

    surfaces = [s for s in config.surfaces if s in manifest.surfaces]
    if "outer" not in surfaces:
        raise PipelineError("pipeline requires the outer surface")
    meshes = ingest(manifest)
    T = manifest.n_frames
    period = manifest.period
    spf = period / T
    timings = {}

    # --- validate ------------------------------------------------------
    t0 = time.time()
    for s in surfaces:
        meshes[s] = [prepare_mesh(m, f"validate[{s}] frame {k}")
                     for k, m in enumerate(meshes[s])]
    timings["validate"] = time.time() - t0

    # --- seam geodesics on the outer surface ---------------------------
    t0 = time.time()
    outer = meshes["outer"]
    graphs = []
    seams = []
    for t, mesh in enumerate(outer):
        graph = GeodesicGraph(mesh, config.steiner_per_edge)
        seam = shortest_boundary_geodesic(mesh, graph=graph)
        inlet_loop, _ = boundary_loops(mesh, inlet=inlet)
        seams.append(_orient_seam_from_inlet(mesh, seam, inlet_loop))
        graphs.append(graph)
    timings["geodesics"] = time.time() - t0

    t0 = time.time()
    if config.stabilize_seams and T >= 3:
        seams = stabilize_seam_endpoints(outer, seams, graphs=graphs,
                                         steiner_per_edge=config.steiner_per_edge)
    timings["stabilize"] = time.time() - t0

    # --- parameterize ---------------------------------------------------
    t0 = time.time()
    grids: Dict[str, list] = {}
    grids["outer"] = _parameterize_frames(outer, config, inlet, "outer", seams=seams)
    if "inner" in surfaces:
        grids["inner"] = [
            project_to_inner(grids["outer"][t], meshes["inner"][t],
                             max_distance=config.projection_max_distance)
            for t in range(T)
        ]
    if "lumen" in surfaces:
        lumen_seams = []
        for t in range(T):
            lumen_seams.append(align_lumen_seam(
                meshes["lumen"][t], seams[t],
                steiner_per_edge=config.steiner_per_edge))
        grids["lumen"] = _parameterize_frames(meshes["lumen"], config, inlet,
                                              "lumen", seams=lumen_seams)
    del graphs
    timings["parameterize"] = time.time() - t0

    # --- temporal alignment ---------------------------------------------
    t0 = time.time()
    sequences = {s: SurfaceSequence(grids[s], period, s) for s in grids}
    outer_vols = sequences["outer"].volumes()
    phase_map = align_cycle_by_volume(sequences["outer"],
                                      two_segment=config.two_segment_warp,
                                      volumes=outer_vols)
    layer_vols = None
    clip_result = None
    if "inner" in grids:
        layer_vols = np.asarray([
            grid_layer_volume(grids["outer"][t].points, grids["inner"][t].points)
            for t in range(T)
        ])
        if config.clip:
            clip_result = clip_to_constant_volume(sequences["outer"], sequences["inner"])
    timings["temporal"] = time.time() - t0

    # --- sections and areas ----------------------------------------------
    t0 = time.time()
    planes_per_frame = [sec.section_planes(grids["outer"][t]) for t in range(T)]
    contours: Dict[str, list] = {}
    for s in grids:
        contours[s] = [
            sec.grid_contours(grids[s][t], planes_per_frame[t], config.contour_samples)
            for t in range(T)
        ]
    violation_count = 0
    worst = None
    for t in range(T):
        rep = sec.validate_nonintersection(planes_per_frame[t], contours["outer"][t])
        violation_count += len(rep.violations)
        if rep.violations and worst is None:
            worst = (t, rep.violations[0])
    if violation_count and config.fail_on_section_violations:
        raise PipelineError(
            f"sections: {violation_count} adjacent-plane violations "
            f"(first at frame {worst[0]}, stations {worst[1][:2]})"
        )
    depths = np.mean(
        [grids["outer"][t].station_depths() for t in range(T)], axis=0
    )
    images: Dict[str, kin.AreaImage] = {}
    for s in grids:
        table = np.empty((config.grid_m, T))
        for t in range(T):
            for c in contours[s][t]:
                table[c.station, t] = sec.contour_area(c)
        images[s] = kin.build_area_image(table, depths, spf)
    timings["sections"] = time.time() - t0

    # --- kinematics -------------------------------------------------------
    t0 = time.time()
    peaks: Dict[str, np.ndarray] = {}
    bands: Dict[str, list] = {}
    for s in images:
        pk = kin.peak_times(images[s])
        peaks[s] = pk
        bands[s] = [
            kin.expansion_band(images[s].values[j], pk[j], station=j)
            if np.isfinite(pk[j]) else None
            for j in range(config.grid_m)
        ]
    wave = kin.wave_speed_stats(peaks["outer"], depths, spf, T)
    ratios = kin.cycle_phase_ratios(outer_vols, period)
    gradients = {s: kin.area_gradient_image(images[s]) for s in images}
    timings["kinematics"] = time.time() - t0

    # --- shape -------------------------------------------------------------
    t0 = time.time()
    radial_stack = [
        shp.radial_curvature_image(grids["outer"][t], contours["outer"][t])
        for t in range(T)
    ]
    radial_norm = shp.normalize_per_pixel(radial_stack)
    lumen_curv = None
    lumen_norm = None
    if "lumen" in grids:
        lumen_curv = [shp.mean_curvature(grids["lumen"][t]) for t in range(T)]
        lumen_norm = shp.normalize_per_pixel(lumen_curv)
    reference = grids["outer"][phase_map.min_index]
    strain_fields = [shp.strain_energy(grids["outer"][t], reference) for t in range(T)]
    strain_stack = np.stack([f.energy for f in strain_fields])

    pca_modes = {}
    if "inner" in grids or not config.clip:
        if config.clip and clip_result is not None:
            pca_source = clip_result.outer
            pca_planes = [sec.section_planes(pca_source[t]) for t in range(T)]
            pca_contours = [
                sec.grid_contours(pca_source[t], pca_planes[t], config.contour_samples)
                for t in range(T)
            ]
        else:
            pca_contours = contours["outer"]
        stations = config.pca_stations or (0, config.grid_m // 2, config.grid_m - 1)
        cset = shp.ContourSet(groups={})
        phase_frames = {
            "expansion": set(int(i) for i in phase_map.expansion_indices()),
            "contraction": set(int(i) for i in phase_map.contraction_indices()),
        }
        for t in range(T):
            for j in stations:
                c = pca_contours[t][j]
                for phase, members in phase_frames.items():
                    if t in members:
                        cset.add(j, phase, c)
        pca_modes = shp.contour_pca(cset, n_modes=config.pca_modes)
    timings["shape"] = time.time() - t0

    # --- exports -----------------------------------------------------------
    t0 = time.time()
    outputs = _export_all(
        out, config, manifest, images, peaks, bands, gradients, wave, ratios,
        outer_vols, layer_vols, clip_result, phase_map, radial_stack,
        radial_norm, lumen_curv, lumen_norm, strain_fields, strain_stack,
        pca_modes, violation_count, depths,
    )
    timings["export"] = time.time() - t0

    summary = {
        "subject": manifest.subject,
        "cohort": manifest.cohort,
        "period_s": period,
        "frames": T,
        "grid": [config.grid_n, config.grid_m],
        "surfaces": sorted(grids),
        "cycle_table": {
            **ratios.as_dict(),
            **wave.as_dict(),
        },
        "volume": {
            "min_frame": int(phase_map.min_index),
            "max_frame": int(phase_map.max_index),
            "outer_min_mm3": float(outer_vols.min()),
            "outer_max_mm3": float(outer_vols.max()),
            "layer_min_mm3": float(layer_vols.min()) if layer_vols is not None else None,
            "layer_max_mm3": float(layer_vols.max()) if layer_vols is not None else None,
        },
        "clip": {
            "enabled": bool(clip_result is not None),
            "target_volume_mm3": float(clip_result.target_volume) if clip_result else None,
            "v_c_min": float(clip_result.v_c.min()) if clip_result else None,
            "volume_spread_pct": (
                100.0 * float(np.ptp(clip_result.volumes_after) / clip_result.target_volume)
                if clip_result else None
            ),
        },
        "sections": {
            "adjacent_plane_violations": int(violation_count),
            "flat_stations": {
                s: int(np.sum(~np.isfinite(peaks[s]))) for s in sorted(peaks)
            },
        },
        "timings_s": {k: round(v, 3) for k, v in timings.items()},
        "elapsed_s": round(time.time() - t_start, 3),
        "outputs": sorted(str(p.relative_to(out)) for p in outputs),
    }
    (out / "run_config.json").write_text(json.dumps(config.to_dict(), indent=2) + "\n")
    stable = {k: v for k, v in summary.items() if k not in ("timings_s", "elapsed_s")}
    (out / "summary.json").write_text(json.dumps(stable, indent=2, sort_keys=True) + "\n")
    summary_path = out / "summary.json"
    logger.info("pipeline finished in %.1fs -> %s", time.time() - t_start, summary_path)
    return summary


def _export_all(out, config, manifest, images, peaks, bands, gradients, wave,
                ratios, outer_vols, layer_vols, clip_result, phase_map,
                radial_stack, radial_norm, lumen_curv, lumen_norm,
                strain_fields, strain_stack, pca_modes, violation_count,
                depths) -> List[Path]:
    outputs = []
    mag = config.magnification
    T = images["outer"].n_frames
    m = images["outer"].n_stations
    spf = images["outer"].seconds_per_frame

    def track(p):
        outputs.append(Path(p))
        return Path(p)

    # volumes and clip
    rows = []
    for t in range(T):
        rows.append([
            t, t * spf, outer_vols[t],
            layer_vols[t] if layer_vols is not None else float("nan"),
            clip_result.v_c[t] if clip_result is not None else 1.0,
        ])
    write_csv(track(out / "volumes.csv"),
              ["frame", "time_s", "outer_volume_mm3", "layer_volume_mm3", "v_c"],
              rows)
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
    axes[0].plot(np.arange(T) * spf * 1000.0,
                 layer_vols if layer_vols is not None else outer_vols)
    axes[0].set_xlabel("time (ms)")
    axes[0].set_ylabel("wall volume (mm$^3$)" if layer_vols is not None
                       else "enclosed volume (mm$^3$)")
    vc = clip_result.v_c if clip_result is not None else np.ones(T)
    axes[1].plot(np.arange(T) * spf * 1000.0, 100.0 * (1.0 - vc))
    axes[1].set_xlabel("time (ms)")
    axes[1].set_ylabel("trimmed length (%)")
    fig.tight_layout()
    save_figure(fig, track(out / "volumes.png"))
    plt.close(fig)

    for s, image in sorted(images.items()):
        A = image.values
        write_matrix_csv(track(out / f"area_{s}.csv"), A, "station", "t")
        render_image(normalize_matrix(A), AREA_COLORMAP,
                     track(out / f"area_{s}.png"), magnification=mag)

        pk = peaks[s]
        rows = [[j, depths[j], pk[j], pk[j] * spf if np.isfinite(pk[j]) else float("nan")]
                for j in range(m)]
        write_csv(track(out / f"peaks_{s}.csv"),
                  ["station", "depth_mm", "t_peak_frame", "t_peak_s"], rows)

        band_rows = []
        for j, b in enumerate(bands[s]):
            if b is None:
                band_rows.append([j, float("nan"), float("nan"), float("nan"),
                                  float("nan"), float("nan"), 0])
                continue
            band_rows.append([
                j,
                b.gauss_sigma if b.gauss_sigma is not None else float("nan"),
                b.gauss_band[0] if b.gauss_band else float("nan"),
                b.gauss_band[1] if b.gauss_band else float("nan"),
                b.p75_band[0], b.p75_band[1],
                1 if b.gauss_converged else 0,
            ])
        write_csv(track(out / f"bands_{s}.csv"),
                  ["station", "sigma_frames", "gauss_lo", "gauss_hi",
                   "p75_lo", "p75_hi", "gauss_converged"], band_rows)

        defined = [b for b in bands[s] if b is not None]
        gauss_pct, p75_pct = kin.percent_time_expanded(
            [b for b in bands[s] if b is not None], T)
        full_gauss = np.full(m, np.nan)
        full_p75 = np.full(m, np.nan)
        for (b, g, p) in zip(defined, gauss_pct, p75_pct):
            full_gauss[b.station] = g
            full_p75[b.station] = p
        write_csv(track(out / f"percent_expanded_{s}.csv"),
                  ["station", "depth_mm", "fraction_gauss", "fraction_p75"],
                  [[j, depths[j], full_gauss[j], full_p75[j]] for j in range(m)])
        fig, ax = plt.subplots(figsize=(5, 3.2))
        if config.threshold in ("gauss", "both"):
            ax.plot(depths, 100 * full_gauss, label="within 1 sigma of max")
        if config.threshold in ("p75", "both"):
            ax.plot(depths, 100 * full_p75, label="above 75% of max")
        ax.set_xlabel("distance along tube (mm)")
        ax.set_ylabel("time expanded (%)")
        ax.legend(loc="best", fontsize=8)
        fig.tight_layout()
        save_figure(fig, track(out / f"percent_expanded_{s}.png"))
        plt.close(fig)

        max_rows = []
        for j in range(m):
            row = A[j]
            b = bands[s][j]
            sigma_level = float("nan")
            if b is not None and b.gauss_sigma is not None:
                edge = b.gauss_band[0] % T
                k0 = int(edge) % T
                k1 = (k0 + 1) % T
                w = edge - int(edge)
                sigma_level = (1 - w) * row[k0] + w * row[k1]
            max_rows.append([j, depths[j], row.max(), 0.75 * row.max(), sigma_level])
        write_csv(track(out / f"max_area_{s}.csv"),
                  ["station", "depth_mm", "max_area_mm2", "p75_level_mm2",
                   "sigma_level_mm2"], max_rows)

        g = gradients[s]
        write_matrix_csv(track(out / f"gradient_{s}_angle.csv"), g.angle, "station", "t")
        write_matrix_csv(track(out / f"gradient_{s}_magnitude.csv"), g.magnitude,
                         "station", "t")
        rgb = gradient_rgb(g.angle, g.magnitude)
        render_image(None, None, track(out / f"gradient_{s}.png"),
                     magnification=mag, rgb=rgb)

    if config.annotated_figures:
        image = images["outer"]
        fig, ax = plt.subplots(figsize=(7, 3.6))
        extent = [0, T * spf * 1000.0, 0, depths[-1]]
        ax.imshow(image.values, origin="lower", aspect="auto", extent=extent,
                  cmap="jet")
        tt = peaks["outer"] * spf * 1000.0
        ax.plot(tt, depths, "k-", lw=1.2, label="peak expansion")
        for j, b in enumerate(bands["outer"]):
            if b is None:
                continue
            for edge in b.p75_band:
                ax.plot([(edge % T) * spf * 1000.0], [depths[j]], "k+", ms=3)
            if b.gauss_band is not None:
                for edge in b.gauss_band:
                    ax.plot([(edge % T) * spf * 1000.0], [depths[j]], "k*", ms=3)
        ax.set_xlabel("time (ms)")
        ax.set_ylabel("distance along tube (mm)")
        ax.legend(loc="upper right", fontsize=8)
        fig.tight_layout()
        save_figure(fig, track(out / "area_outer_annotated.png"))
        plt.close(fig)

    local = []
    pk = peaks["outer"]
    for j in range(m - 1):
        if np.isfinite(pk[j]) and np.isfinite(pk[j + 1]):
            dt = ((pk[j + 1] - pk[j] + T / 2) % T - T / 2) * spf
            sp = (depths[j + 1] - depths[j]) / dt if dt != 0 else float("nan")
        else:
            sp = float("nan")
        local.append([j, 0.5 * (depths[j] + depths[j + 1]), sp])
    write_csv(track(out / "wave_speeds_outer.csv"),
              ["gap", "depth_mid_mm", "speed_mm_per_s"], local)

    # curvature exports
    f_min, f_max = phase_map.min_index, phase_map.max_index
    for tag, fidx in (("maxcontraction", f_min), ("maxexpansion", f_max)):
        K = radial_stack[fidx].values
        write_matrix_csv(track(out / f"radial_curvature_outer_{tag}.csv"), K,
                         "station", "u")
        render_image(normalize_matrix(K), AREA_COLORMAP,
                     track(out / f"radial_curvature_outer_{tag}.png"),
                     magnification=mag)
        if lumen_curv is not None:
            Kl = lumen_curv[fidx].values
            write_matrix_csv(track(out / f"mean_curvature_lumen_{tag}.csv"), Kl,
                             "station", "u")
            render_image(normalize_matrix(Kl), AREA_COLORMAP,
                         track(out / f"mean_curvature_lumen_{tag}.png"),
                         magnification=mag)
    phase_img = radial_norm.peak_frame / max(T - 1, 1)
    write_matrix_csv(track(out / "radial_curvature_peak_phase.csv"), phase_img,
                     "station", "u")
    render_image(phase_img, AREA_COLORMAP,
                 track(out / "radial_curvature_peak_phase.png"), magnification=mag)

    # strain exports: global and per-frame normalization at max expansion
    E_max = strain_fields[f_max].energy
    write_matrix_csv(track(out / "strain_energy_maxexpansion.csv"), E_max,
                     "station", "u")
    global_hi = np.nanmax(strain_stack)
    render_image(normalize_matrix(E_max, vmin=0.0, vmax=global_hi), AREA_COLORMAP,
                 track(out / "strain_energy_global_norm.png"), magnification=mag)
    render_image(normalize_matrix(E_max), AREA_COLORMAP,
                 track(out / "strain_energy_frame_norm.png"), magnification=mag)

    # PCA exports
    for (station, phase), modes in sorted(pca_modes.items()):
        rows = []
        K = len(modes.mean_contour)
        for k in range(K):
            row = [k, modes.mean_contour[k, 0], modes.mean_contour[k, 1]]
            for mi in range(len(modes.variances)):
                row.extend([modes.modes[mi, k, 0], modes.modes[mi, k, 1]])
            rows.append(row)
        header = ["sample", "mean_x_mm", "mean_y_mm"]
        for mi in range(len(modes.variances)):
            header.extend([f"mode{mi + 1}_dx", f"mode{mi + 1}_dy"])
        write_csv(track(out / f"pca_station{station:02d}_{phase}.csv"), header, rows)
        var_rows = [[mi + 1, modes.variances[mi], modes.variance_fractions()[mi]]
                    for mi in range(len(modes.variances))]
        write_csv(track(out / f"pca_station{station:02d}_{phase}_variance.csv"),
                  ["mode", "variance_mm2", "fraction"], var_rows)

    if pca_modes:
        n_groups = len(pca_modes)
        n_show = max(len(v.variances) for v in pca_modes.values())
        fig, axes = plt.subplots(n_groups, max(n_show, 1),
                                 figsize=(3.0 * max(n_show, 1), 2.6 * n_groups),
                                 squeeze=False)
        for gi, ((station, phase), modes) in enumerate(sorted(pca_modes.items())):
            for mi in range(n_show):
                ax = axes[gi][mi]
                ax.set_aspect("equal")
                mc = modes.mean_contour
                ax.plot(np.append(mc[:, 0], mc[0, 0]), np.append(mc[:, 1], mc[0, 1]),
                        "-", color="0.4", lw=0.8)
                if mi < len(modes.variances):
                    scale = 2.0 * np.sqrt(modes.variances[mi])
                    q = modes.modes[mi] * scale
                    ax.quiver(mc[::5, 0], mc[::5, 1], q[::5, 0], q[::5, 1],
                              angles="xy", scale_units="xy", scale=1.0, width=0.006)
                    ax.set_title(f"st {station} {phase} mode {mi + 1}", fontsize=8)
                ax.set_xticks([])
                ax.set_yticks([])
        fig.tight_layout()
        save_figure(fig, track(out / "pca_modes.png"))
        plt.close(fig)

    return outputs
