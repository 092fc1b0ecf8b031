#!/usr/bin/env python3
"""
Command-line driver for the hpscatter PEC scattering solver.

Usage:
    python -m hpscatter solve --set geometry=plate --set side=1 --set divisions=1 --set formulation=efie
    python -m hpscatter validate --config sphere.cfg --set leaf_factors=0.25,0.5,0.75
    python -m hpscatter rcs --config sphere.cfg --set sweep_mode=bistatic
    python -m hpscatter sweep --set geometry=sphere --set sweep_sizes=4,6,8
    python -m hpscatter mesh-info --set geometry=cube --set side=0.5

Requirements:
    - numpy, scipy, pandas, tabulate, python-dotenv (see requirements.txt)
    - openpyxl for the optional sweep workbook (xlsx = true)

Environment Variables:
    HPSCATTER_OUTPUT_DIR, HPSCATTER_CACHE_DIR, HPSCATTER_WORKERS,
    HPSCATTER_DENSE_CAP, HPSCATTER_LOG_LEVEL (see hpscatter.settings)

Exit codes:
    0 success, 2 configuration or validation error, 3 power series diverged,
    4 internal numerical failure
"""

import argparse
import dataclasses
import json
import logging
import os
import sys
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from dotenv import load_dotenv
from scipy import constants
from tabulate import tabulate

from hpscatter.errors import ConfigError, DenseCapExceededError, HpScatterError, SeriesDivergenceError
from hpscatter.geometry import build_rwg, classify_surface, geodesic_max_edge, make_geodesic_sphere
from hpscatter.cluster_tree import build_tree, partition_blocks
from hpscatter.em_operator import Medium
from hpscatter.hmatrix import dense_direct_solve
from hpscatter.pipeline import ScatteringPipeline, build_geometry
from hpscatter.postprocess import (
    MieConfig,
    PlaneWave,
    RcsCurve,
    bistatic_rcs,
    compare_curves,
    mie_rcs_pec_sphere,
    monostatic_rcs,
    physical_optics_plate_rcs,
    to_dbsm,
)
from hpscatter.power_series import SeriesStatus
from hpscatter.schur_scaling import offdiagonal_ratio
from hpscatter.settings import RunConfig, environment_values, load_config

logger = logging.getLogger(__name__)

COMMANDS = ("solve", "validate", "rcs", "sweep", "mesh-info")


# ---------------------------------------------------------------------------
# Artifacts
# ---------------------------------------------------------------------------


def _output_path(config: RunConfig, name: str) -> str:
    os.makedirs(config.output_dir, exist_ok=True)
    return os.path.join(config.output_dir, name)


def write_report(config: RunConfig, record: Dict[str, object], stem: str = "report") -> str:
    """UTF-8 ``key = value`` text plus the same record as JSON"""
    text_path = _output_path(config, f"{stem}.txt")
    with open(text_path, "w", encoding="utf-8") as handle:
        for key, value in record.items():
            handle.write(f"{key} = {value}\n")
    with open(_output_path(config, f"{stem}.json"), "w", encoding="utf-8") as handle:
        json.dump(record, handle, indent=2, default=str)
    logger.info(f"Report written to {text_path}")
    return text_path


def write_currents(config: RunConfig, pipeline: ScatteringPipeline, x: np.ndarray) -> str:
    path = _output_path(config, "currents.csv")
    frame = pd.DataFrame(
        {
            "index": np.arange(len(x)),
            "edge": pipeline.basis.edge_ids,
            "real": np.real(x),
            "imag": np.imag(x),
        }
    )
    frame.to_csv(path, index=False, float_format="%.9g")
    logger.info(f"Saved {len(x)} current coefficients to {path}")
    return path


def loglog_slope(sizes, values) -> Optional[float]:
    """Least-squares slope of log(value) against log(size); None when fewer than two usable points"""
    sizes = np.asarray(sizes, dtype=float)
    values = np.asarray(values, dtype=float)
    keep = (sizes > 0) & (values > 0)
    if keep.sum() < 2 or len(np.unique(sizes[keep])) < 2:
        return None
    slope, _ = np.polyfit(np.log(sizes[keep]), np.log(values[keep]), 1)
    return float(slope)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _incident(config: RunConfig) -> PlaneWave:
    return PlaneWave(config.incident_theta, config.incident_phi, config.polarization)


def cmd_solve(config: RunConfig) -> int:
    """Single excitation: currents, convergence and timing reports"""
    pipeline = ScatteringPipeline(config)
    try:
        pipeline.initialize()
        wave = _incident(config)
        b = pipeline.rhs(wave.theta_deg, wave.phi_deg, wave.polarization)
        x, report = pipeline.solve(b)
        write_currents(config, pipeline, x)
        record = pipeline.report()
        record.update({f"series_{key}": value for key, value in report.to_dict().items()})
        write_report(config, record)
        if report.status is SeriesStatus.DIVERGING:
            logger.error(
                f"Power series diverged: ratio {report.max_ratio:.3e} >= threshold {report.threshold}; "
                "currents were written but are not trustworthy"
            )
            return SeriesDivergenceError.exit_code
        logger.info(f"✅ Solved N = {pipeline.n}, max series ratio {report.max_ratio:.3e}")
        return 0
    finally:
        pipeline.cleanup()


def cmd_validate(config: RunConfig) -> int:
    """Dense LU against the power series, ACA block errors and scaling off-diagonal mass"""
    pipeline = ScatteringPipeline(config)
    try:
        pipeline.initialize()
        if pipeline.n > config.dense_cap:
            raise DenseCapExceededError(f"N={pipeline.n} exceeds the dense cap of {config.dense_cap} unknowns")
        wave = _incident(config)
        b = pipeline.rhs(wave.theta_deg, wave.phi_deg, wave.polarization)
        logger.info(f"Assembling the dense {pipeline.n}x{pipeline.n} reference matrix")
        x_dir = dense_direct_solve(pipeline.operator.dense(), b, config.dense_cap)
        x_ps, report = pipeline.solve(b)
        error = float(np.linalg.norm(x_dir - x_ps) / np.linalg.norm(x_dir))

        block_errors = pipeline.hmatrix.far_block_errors(pipeline.operator)
        ratio = offdiagonal_ratio(pipeline.near_input, pipeline.scaling, config.dense_cap)
        record = pipeline.report()
        record.update(
            {
                "solution_error": error,
                "aca_block_error_max": max(block_errors, default=0.0),
                "aca_block_error_mean": float(np.mean(block_errors)) if block_errors else 0.0,
                "aca_blocks_over_2eps": sum(1 for e in block_errors if e > 2.0 * config.aca_tolerance),
                "scaling_offdiagonal_ratio": ratio,
            }
        )
        record.update({f"series_{key}": value for key, value in report.to_dict().items()})

        rows = [[config.leaf_factor, pipeline.n, len(pipeline.tree.leaves), report.max_ratio, error]]
        for leaf_factor in config.leaf_factors:
            study = ScatteringPipeline(dataclasses.replace(config, leaf_factor=leaf_factor, cache_dir=None), pipeline.mesh)
            try:
                study.initialize()
                x_study, study_report = study.solve(b)
                rows.append(
                    [
                        leaf_factor,
                        study.n,
                        len(study.tree.leaves),
                        study_report.max_ratio,
                        float(np.linalg.norm(x_dir - x_study) / np.linalg.norm(x_dir)),
                    ]
                )
            finally:
                study.cleanup()
        headers = ["leaf_factor", "n_unknowns", "leaves", "series_ratio", "solution_error"]
        frame = pd.DataFrame(rows, columns=headers).drop_duplicates("leaf_factor").sort_values("leaf_factor")
        frame.to_csv(_output_path(config, "validate.csv"), index=False, float_format="%.6g")
        logger.info("Validation summary:\n" + tabulate(frame.values.tolist(), headers=headers, tablefmt="grid"))

        write_report(config, record)
        if report.status is SeriesStatus.DIVERGING:
            return SeriesDivergenceError.exit_code
        logger.info(f"✅ |x_dir - x_ps| / |x_dir| = {error:.3e}, off-diagonal ratio {ratio:.3e}")
        return 0
    finally:
        pipeline.cleanup()


def _rcs_curve(config: RunConfig, solver, angles: List[float]) -> RcsCurve:
    if config.sweep_mode == "monostatic":
        return monostatic_rcs(
            solver, angles, config.polarization, config.sweep_cut, config.fixed_angle, workers=config.workers
        )
    wave = _incident(config)
    b = solver.operator.rhs(wave.direction, wave.polarization)
    x, report = solver.solve(b)
    if report is not None and report.status is SeriesStatus.DIVERGING:
        raise SeriesDivergenceError(
            f"Power series diverged at incidence angle {wave.theta_deg:g} deg (ratio {report.max_ratio:.3e})",
            wave.theta_deg,
            report,
        )
    return bistatic_rcs(x, solver.basis, solver.medium, angles, wave, config.sweep_cut, config.fixed_angle)


def cmd_rcs(config: RunConfig) -> int:
    """Bistatic or monostatic RCS curve, Mie overlay for spheres, optional GMRES comparison"""
    pipeline = ScatteringPipeline(config)
    try:
        pipeline.initialize()
        angles = config.sweep_angles()
        curve = _rcs_curve(config, pipeline, angles)
        curve.metadata["geometry"] = config.geometry
        curve.to_csv(_output_path(config, "rcs.csv"))
        logger.info(f"Saved {len(angles)}-sample {config.sweep_mode} RCS curve")
        record = pipeline.report()
        record.update({"sweep_mode": config.sweep_mode, "sweep_cut": config.sweep_cut, "samples": len(angles)})
        record["setup_count"] = pipeline.setup_count

        if config.geometry == "sphere":
            mie_cfg = MieConfig(radius=config.radius, wavenumber=pipeline.medium.wavenumber)
            mie = mie_rcs_pec_sphere(
                mie_cfg, angles, config.sweep_mode, _incident(config), config.sweep_cut, config.fixed_angle
            )
            mie.to_csv(_output_path(config, "rcs_mie.csv"))
            record.update({f"mie_{key}": value for key, value in compare_curves(curve, mie).items()})
        elif config.geometry == "plate":
            record["po_broadside_dbsm"] = float(
                to_dbsm(physical_optics_plate_rcs(config.side * config.side, pipeline.medium.wavelength))
            )

        if config.compare_gmres:
            view = pipeline.gmres_view()
            reference = _rcs_curve(config, view, angles)
            reference.to_csv(_output_path(config, "rcs_gmres.csv"))
            deviation = compare_curves(curve, reference)
            record.update({f"gmres_{key}": value for key, value in deviation.items()})
            record["gmres_iterations_mean"] = float(np.mean(view.iterations))
            record["gmres_iterations_max"] = int(max(view.iterations))
            record["series_u_applications_per_rhs"] = pipeline.timing.u_applications / max(len(pipeline.timing.solves), 1)
            logger.info(
                f"GMRES baseline: {record['gmres_iterations_mean']:.1f} iterations per RHS; "
                f"max curve deviation {deviation['max_abs_db']:.3f} dB"
            )
        record.update(pipeline.timing.to_dict())
        write_report(config, record)
        return 0
    finally:
        pipeline.cleanup()


def _sweep_instance(config: RunConfig, size: int):
    """Mesh and frequency for one sweep point at constant elements per wavelength"""
    if config.geometry == "sphere":
        mesh = make_geodesic_sphere(config.radius, size)
        wavelength = config.elements_per_wavelength * geodesic_max_edge(config.radius, size)
        return mesh, dataclasses.replace(config, frequency=constants.c / wavelength)
    if config.geometry in ("plate", "cube"):
        wavelength = config.elements_per_wavelength * config.side / size
        instance = dataclasses.replace(config, divisions=size, frequency=constants.c / wavelength)
        return build_geometry(instance), instance
    raise ConfigError("sweep needs a generated geometry (sphere, plate or cube)")


def cmd_scaling_sweep(config: RunConfig) -> int:
    """Setup time, memory and per-RHS time over growing problem sizes, with log-log slopes"""
    rows = []
    for size in config.sweep_sizes:
        mesh, instance = _sweep_instance(config, size)
        pipeline = ScatteringPipeline(dataclasses.replace(instance, cache_dir=None), mesh)
        try:
            pipeline.initialize()
            wave = _incident(instance)
            _, report = pipeline.solve(pipeline.rhs(wave.theta_deg, wave.phi_deg, wave.polarization))
            timing = pipeline.timing
            rows.append(
                {
                    "size": size,
                    "n_unknowns": pipeline.n,
                    "frequency_hz": instance.frequency,
                    "tree_depth": pipeline.tree.depth,
                    "setup_s": timing.setup_total,
                    "scaling_s": timing.scaling,
                    "solve_s": timing.per_rhs,
                    "memory_bytes": timing.memory_bytes,
                    "scaling_memory_bytes": timing.scaling_memory_bytes,
                    "fill_in_blocks": timing.fill_in,
                    "series_ratio": report.max_ratio,
                }
            )
        finally:
            pipeline.cleanup()
        logger.info(f"Sweep point {size}: N = {rows[-1]['n_unknowns']}, setup {rows[-1]['setup_s']:.2f}s")

    frame = pd.DataFrame(rows)
    frame.to_csv(_output_path(config, "sweep.csv"), index=False, float_format="%.6g")
    if config.xlsx:
        frame.to_excel(_output_path(config, "sweep.xlsx"), index=False, engine="openpyxl")
    print(tabulate(frame.values.tolist(), headers=list(frame.columns), tablefmt="grid", floatfmt=".4g"))

    sizes = frame["n_unknowns"].to_numpy()
    record: Dict[str, object] = {"geometry": config.geometry, "points": len(rows)}
    for column in ("setup_s", "scaling_s", "solve_s", "memory_bytes", "scaling_memory_bytes"):
        record[f"slope_{column}"] = loglog_slope(sizes, frame[column].to_numpy())
    write_report(config, record, stem="sweep_report")
    logger.info(
        "Log-log slopes: "
        + ", ".join(f"{k[6:]} {v:.2f}" for k, v in record.items() if k.startswith("slope_") and v is not None)
    )
    return 0


def cmd_mesh_info(config: RunConfig) -> int:
    mesh = build_geometry(config)
    basis = build_rwg(mesh)
    medium = Medium.free_space(config.frequency)
    tree = build_tree(basis.centroids, medium.wavelength, config.leaf_factor)
    partition = partition_blocks(tree, config.eta)
    rows = [
        ["nodes", mesh.n_nodes],
        ["triangles", mesh.n_triangles],
        ["edges", mesh.n_edges],
        ["boundary edges", len(mesh.boundary_edges)],
        ["unknowns (N)", basis.n],
        ["surface", classify_surface(mesh).value],
        ["consistently oriented", mesh.is_consistently_oriented()],
        ["max edge (m)", f"{mesh.max_edge_length():.4g}"],
        ["max edge (wavelengths)", f"{mesh.max_edge_length() / medium.wavelength:.4g}"],
        ["tree depth", tree.depth],
        ["leaves", len(tree.leaves)],
        ["near blocks", len(partition.near)],
        ["far blocks", len(partition.far)],
    ]
    print(tabulate(rows, headers=["property", "value"], tablefmt="grid"))
    return 0


HANDLERS = {
    "solve": cmd_solve,
    "validate": cmd_validate,
    "rcs": cmd_rcs,
    "sweep": cmd_scaling_sweep,
    "mesh-info": cmd_mesh_info,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hpscatter",
        description="H-matrix power-series solver for plane-wave scattering by perfect conductors.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Trivial plate, one unknown
  python -m hpscatter solve --set geometry=plate --set divisions=1 --set formulation=efie

  # Bistatic RCS of a 0.75 m sphere at 300 MHz with a Mie overlay
  python -m hpscatter rcs --set radius=0.75

  # Monostatic plate sweep compared with GMRES
  python -m hpscatter rcs --set geometry=plate --set side=2 --set formulation=efie \\
      --set sweep_mode=monostatic --set sweep_step=10 --set compare_gmres=true
        """,
    )
    parser.add_argument("command", choices=COMMANDS, help="What to run")
    parser.add_argument("--config", type=str, default=None, help="Flat key = value configuration file")
    parser.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="Override one configuration key"
    )
    parser.add_argument("--output-dir", type=str, default=None, help="Directory for reports and CSV files")
    parser.add_argument("--verbose", action="store_true", help="Enable verbose (DEBUG level) logging.")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)

    level_name = "DEBUG" if args.verbose else environment_values().get("log_level", "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level_name, logging.INFO),
        format="%(asctime)s - %(levelname)s - %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )

    overrides = list(args.overrides)
    if args.output_dir:
        overrides.append(f"output_dir={args.output_dir}")
    try:
        config = load_config(args.config, overrides)
        if not args.verbose:
            logging.getLogger().setLevel(config.log_level)
        logger.info(f"Running '{args.command}' on geometry '{config.geometry}' at {config.frequency:.6g} Hz")
        return HANDLERS[args.command](config)
    except HpScatterError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except Exception as e:
        logger.error(f"Run failed: {e}", exc_info=True)
        return 4


if __name__ == "__main__":
    sys.exit(main())
