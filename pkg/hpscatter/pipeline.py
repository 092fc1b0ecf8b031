"""
End-to-end solver setup shared by every CLI command.

    mesh -> RWG basis -> operator -> cluster tree -> block partition
         -> leaf ordering -> H-matrix (cache-aware) -> near-field scaling
         -> power-series solver

The setup runs once in ``initialize()``; afterwards any number of
right-hand sides can be solved. Stage times are collected in a TimingReport.
"""

import hashlib
import logging
import math
import threading
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from hpscatter.cache import HMatrixCache, config_key
from hpscatter.cluster_tree import BlockPartition, ClusterTree, bandwidth, build_tree, order_leaves, partition_blocks
from hpscatter.em_operator import EmOperator, Formulation, Medium, OperatorConfig, Polarization
from hpscatter.geometry import (
    RwgBasisSet,
    TriangleMesh,
    build_rwg,
    load_mesh,
    make_cube,
    make_plate,
    make_sphere,
)
from hpscatter.hmatrix import AcaConfig, HMatrix, assemble_hmatrix
from hpscatter.postprocess import PlaneWave
from hpscatter.power_series import (
    ConvergenceReport,
    GmresResult,
    PowerSeriesSolver,
    SeriesConfig,
    condition_diagnostics,
    gmres_solve,
)
from hpscatter.schur_scaling import ScaledNearField, ScalingSet, compute_scaling, symmetrize_near_blocks
from hpscatter.settings import RunConfig

logger = logging.getLogger(__name__)

BYTES_PER_COMPLEX = 16


def build_geometry(config: RunConfig) -> TriangleMesh:
    """Mesh described by the run configuration"""
    if config.geometry == "sphere":
        return make_sphere(config.radius, config.target_edge)
    if config.geometry == "mesh":
        return load_mesh(config.mesh_path, config.mesh_format)
    divisions = config.divisions or max(1, math.ceil(config.side / config.target_edge))
    if config.geometry == "plate":
        return make_plate(config.side, divisions)
    return make_cube(config.side, divisions)


def mesh_digest(mesh: TriangleMesh) -> str:
    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(mesh.nodes, dtype=float).tobytes())
    digest.update(np.ascontiguousarray(mesh.triangles, dtype=np.int64).tobytes())
    return digest.hexdigest()[:16]


@dataclass
class TimingReport:
    """Stage wall-clock seconds and memory; totals are sums of the parts"""

    mesh: float = 0.0
    tree: float = 0.0
    assembly: float = 0.0
    aca: float = 0.0
    cache: float = 0.0
    scaling: float = 0.0
    solves: List[float] = field(default_factory=list)
    hmatrix_storage: int = 0  # complex numbers
    scaling_storage: int = 0
    near_field_storage: int = 0
    u_applications: int = 0
    matvec_count: int = 0
    fill_in: int = 0

    @property
    def setup_total(self) -> float:
        return self.mesh + self.tree + self.assembly + self.aca + self.cache + self.scaling

    @property
    def solve_total(self) -> float:
        return float(sum(self.solves))

    @property
    def per_rhs(self) -> float:
        return self.solve_total / len(self.solves) if self.solves else 0.0

    @property
    def total(self) -> float:
        return self.setup_total + self.solve_total

    @property
    def memory_bytes(self) -> int:
        return BYTES_PER_COMPLEX * (self.hmatrix_storage + self.scaling_storage + self.near_field_storage)

    @property
    def scaling_memory_bytes(self) -> int:
        return BYTES_PER_COMPLEX * (self.scaling_storage + self.near_field_storage)

    def to_dict(self) -> Dict[str, float]:
        return {
            "time_mesh_s": self.mesh,
            "time_tree_s": self.tree,
            "time_assembly_s": self.assembly,
            "time_aca_s": self.aca,
            "time_cache_s": self.cache,
            "time_scaling_s": self.scaling,
            "time_setup_total_s": self.setup_total,
            "time_solve_total_s": self.solve_total,
            "time_per_rhs_s": self.per_rhs,
            "time_total_s": self.total,
            "rhs_count": len(self.solves),
            "memory_bytes": self.memory_bytes,
            "scaling_memory_bytes": self.scaling_memory_bytes,
            "u_applications": self.u_applications,
            "matvec_count": self.matvec_count,
            "fill_in_blocks": self.fill_in,
        }


class ScatteringPipeline:
    """
    One configured scattering problem.

    Call ``initialize()`` once, then ``rhs()`` and ``solve()`` per excitation.
    ``cleanup()`` drops the large arrays.
    """

    def __init__(self, config: RunConfig, mesh: Optional[TriangleMesh] = None):
        self.config = config
        self.mesh = mesh
        self.basis: Optional[RwgBasisSet] = None
        self.medium: Optional[Medium] = None
        self.operator: Optional[EmOperator] = None
        self.tree: Optional[ClusterTree] = None
        self.partition: Optional[BlockPartition] = None
        self.leaf_order: List[int] = []
        self.hmatrix: Optional[HMatrix] = None
        self.scaling: Optional[ScalingSet] = None
        self.near_field: Optional[ScaledNearField] = None
        self.solver: Optional[PowerSeriesSolver] = None
        self.timing = TimingReport()
        self.reports: List[ConvergenceReport] = []
        self.near_asymmetry: Optional[float] = None
        self.near_input: Dict[Tuple[int, int], np.ndarray] = {}
        self.conditions: Optional[Tuple[float, float]] = None
        self.cache_hit = False
        self.setup_count = 0
        self._lock = threading.Lock()

    @property
    def n(self) -> int:
        return self.basis.n if self.basis is not None else 0

    @property
    def symmetric(self) -> bool:
        return self.operator is not None and self.operator.config.formulation is Formulation.EFIE

    def initialize(self) -> "ScatteringPipeline":
        cfg = self.config
        started = time.perf_counter()
        if self.mesh is None:
            self.mesh = build_geometry(cfg)
        self.basis = build_rwg(self.mesh)
        self.medium = Medium.free_space(cfg.frequency)
        self.operator = EmOperator(self.basis, self.medium, OperatorConfig(formulation=cfg.formulation, alpha=cfg.alpha))
        self.timing.mesh = time.perf_counter() - started
        logger.info(
            f"Geometry '{cfg.geometry}': {self.mesh.n_triangles} triangles, N = {self.n} unknowns, "
            f"{self.operator.config.formulation.name} alpha={self.operator.config.alpha}"
        )

        started = time.perf_counter()
        self.tree = build_tree(self.basis.centroids, self.medium.wavelength, cfg.leaf_factor)
        self.partition = partition_blocks(self.tree, cfg.eta)
        graph, leaf_ids = self.partition.near_adjacency(self.tree)
        positions = order_leaves(graph)
        self.leaf_order = [leaf_ids[i] for i in positions]
        self.timing.tree = time.perf_counter() - started
        logger.info(
            f"Cluster tree depth {self.tree.depth}, {len(leaf_ids)} leaves; near-graph bandwidth "
            f"{bandwidth(graph, np.arange(len(leaf_ids)))} -> {bandwidth(graph, positions)} after reordering"
        )

        self.hmatrix = self._build_hmatrix()

        started = time.perf_counter()
        near = self.hmatrix.near_blocks()
        symmetric_scaling = self.symmetric
        if cfg.symmetrize_near and not self.symmetric:
            self.near_asymmetry = _near_asymmetry(near)
            logger.warning(
                f"⚠️  Symmetrizing the near field before scaling; relative asymmetry dropped: {self.near_asymmetry:.3e}"
            )
            near = symmetrize_near_blocks(near)
            symmetric_scaling = True
        self.near_input = near
        self.scaling, self.near_field = compute_scaling(
            near, self.leaf_order, self.tree.leaf_indices(), symmetric=symmetric_scaling
        )
        self.solver = PowerSeriesSolver(
            self.hmatrix,
            self.scaling,
            self.near_field,
            SeriesConfig(n_terms=cfg.n_terms, threshold=cfg.threshold, adaptive=cfg.adaptive, max_terms=cfg.max_terms),
        )
        self.timing.scaling = time.perf_counter() - started
        self.timing.hmatrix_storage = self.hmatrix.storage()
        self.timing.scaling_storage = self.scaling.storage()
        self.timing.near_field_storage = self.near_field.storage()
        self.timing.fill_in = self.scaling.fill_in

        if cfg.compute_conditions:
            self.conditions = condition_diagnostics(self.hmatrix, self.scaling, self.near_field)
            logger.info(f"Condition numbers: k_nf = {self.conditions[0]:.3e}, k_ff = {self.conditions[1]:.3e}")
        self.setup_count += 1
        logger.info(f"Setup finished in {self.timing.setup_total:.2f}s")
        return self

    def _cache_key(self) -> str:
        cfg = self.config
        return config_key(
            {
                "mesh": mesh_digest(self.mesh),
                "frequency": cfg.frequency,
                "formulation": self.operator.config.formulation.value,
                "alpha": self.operator.config.alpha,
                "leaf_factor": cfg.leaf_factor,
                "eta": cfg.eta,
                "aca_tolerance": cfg.aca_tolerance,
                "aca_max_rank": cfg.aca_max_rank,
                "seed": cfg.seed,
                "symmetric": self.symmetric,
            }
        )

    def _build_hmatrix(self) -> HMatrix:
        cfg = self.config
        cache = HMatrixCache(cfg.cache_dir, cfg.cache_max_age) if cfg.cache_dir else None
        key = self._cache_key() if cache else None
        if cache:
            started = time.perf_counter()
            h = cache.load(key)
            if h is not None and h.n == self.n:
                self.timing.cache = time.perf_counter() - started
                self.cache_hit = True
                self.tree, self.partition = h.tree, h.partition
                h.workers, h.deterministic = cfg.workers, cfg.deterministic
                return h
        h = assemble_hmatrix(
            self.operator,
            self.tree,
            self.partition,
            AcaConfig(tolerance=cfg.aca_tolerance, max_rank=cfg.aca_max_rank, seed=cfg.seed),
            symmetric=self.symmetric,
            workers=cfg.workers,
            deterministic=cfg.deterministic,
        )
        self.timing.assembly = h.near_seconds
        self.timing.aca = h.far_seconds
        if cache:
            started = time.perf_counter()
            cache.save(key, h)
            self.timing.cache = time.perf_counter() - started
        return h

    def _require_setup(self):
        if self.solver is None:
            raise RuntimeError("Pipeline not initialized; call initialize() first")

    def rhs(self, theta_deg: float, phi_deg: float, polarization: Polarization = Polarization.VV) -> np.ndarray:
        self._require_setup()
        wave = PlaneWave(theta_deg, phi_deg, polarization)
        return self.operator.rhs(wave.direction, wave.polarization)

    def solve(self, b: np.ndarray) -> Tuple[np.ndarray, ConvergenceReport]:
        self._require_setup()
        started = time.perf_counter()
        x, report = self.solver.solve(b)
        elapsed = time.perf_counter() - started
        with self._lock:
            self.timing.solves.append(elapsed)
            self.reports.append(report)
            self.timing.u_applications = self.solver.u_applications
        return x, report

    def solve_gmres(self, b: np.ndarray) -> GmresResult:
        self._require_setup()
        cfg = self.config
        result = gmres_solve(self.hmatrix, b, tol=cfg.gmres_tol, restart=cfg.gmres_restart, max_iters=cfg.gmres_max_iters)
        with self._lock:
            self.timing.matvec_count = self.hmatrix.matvec_count
        return result

    def gmres_view(self) -> "GmresView":
        return GmresView(self)

    def report(self) -> Dict[str, object]:
        """Machine-readable run summary"""
        self._require_setup()
        ratios = [r for report in self.reports for r in report.ratios]
        record: Dict[str, object] = {
            "geometry": self.config.geometry,
            "frequency_hz": self.config.frequency,
            "wavelength_m": self.medium.wavelength,
            "formulation": self.operator.config.formulation.value,
            "alpha": self.operator.config.alpha,
            "n_unknowns": self.n,
            "n_triangles": self.mesh.n_triangles,
            "tree_depth": self.tree.depth,
            "n_leaves": len(self.tree.leaves),
            "near_blocks": len(self.partition.near),
            "far_blocks": len(self.partition.far),
            "symmetric": self.symmetric,
            "cache_hit": self.cache_hit,
            "hmatrix_storage": self.hmatrix.storage(),
            "compression_ratio": self.hmatrix.compression_ratio(),
            "series_ratio_max": max(ratios, default=0.0),
            "series_diverged": any(r >= self.config.threshold for r in ratios),
        }
        record.update({f"aca_{key}": value for key, value in self.hmatrix.rank_statistics().items()})
        record.update({f"scaling_{key}": value for key, value in self.scaling.report().items()})
        record.update(self.timing.to_dict())
        if self.near_asymmetry is not None:
            record["near_asymmetry"] = self.near_asymmetry
        if self.conditions is not None:
            record["k_nf"], record["k_ff"] = self.conditions
        return record

    def cleanup(self):
        self.near_input = {}
        self.hmatrix = None
        self.scaling = None
        self.near_field = None
        self.solver = None


class GmresView:
    """Pipeline facade whose solve runs unpreconditioned GMRES instead of the series"""

    def __init__(self, pipeline: ScatteringPipeline):
        self.pipeline = pipeline
        self.basis = pipeline.basis
        self.medium = pipeline.medium
        self.operator = pipeline.operator
        self.iterations: List[int] = []
        self._lock = threading.Lock()

    def solve(self, b: np.ndarray) -> Tuple[np.ndarray, None]:
        result = self.pipeline.solve_gmres(b)
        with self._lock:
            self.iterations.append(result.iterations)
        return result.x, None


def _near_asymmetry(blocks: Dict[Tuple[int, int], np.ndarray]) -> float:
    """|Z_N - Z_N^T|_F / |Z_N|_F over the near blocks"""
    diff = 0.0
    total = 0.0
    for (t, s), block in blocks.items():
        mirror = blocks.get((s, t))
        if mirror is not None:
            diff += float(np.linalg.norm(block - mirror.T) ** 2)
        total += float(np.linalg.norm(block) ** 2)
    return math.sqrt(diff / total) if total else 0.0
