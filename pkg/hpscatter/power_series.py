"""
Power-series solution of the scaled H-matrix system.

With L Z_N R = D from the near-field scaling, Z x = b becomes

    (I + U) x~ = b_0,   U = D^{-1} L Z_F R,   b_0 = D^{-1} L b,   x = R x~

and x~ = it_0 - it_1 + it_2 - ... with it_0 = b_0 and it_n = U it_{n-1}.
``n_terms`` counts applications of U, so the default of 2 evaluates
it_0 - it_1 + it_2. The ratio |it_n| / |it_{n-1}| estimates |U|; a ratio at or
above the threshold marks the series as diverging.

A restarted GMRES on the full H-matrix is provided as the iterative baseline.
"""

import enum
import logging
import threading
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.sparse.linalg import LinearOperator, gmres

from hpscatter.errors import DimensionError, SeriesDivergenceError
from hpscatter.hmatrix import HMatrix
from hpscatter.schur_scaling import ScaledNearField, ScalingSet, apply_Dinv, apply_left, apply_right

logger = logging.getLogger(__name__)


class SeriesStatus(enum.Enum):
    CONVERGED = "converged"
    DIVERGING = "diverging"


class ConvergenceStatus(enum.Enum):
    OK = "ok"
    DIVERGED = "diverged"


@dataclass(frozen=True)
class SeriesConfig:
    n_terms: int = 2
    threshold: float = 0.1
    adaptive: bool = False
    max_terms: int = 8
    tolerance: float = 1e-12

    def __post_init__(self):
        if self.n_terms < 1:
            raise ValueError(f"n_terms must be at least 1, got {self.n_terms}")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")


@dataclass
class ConvergenceReport:
    norms: List[float] = field(default_factory=list)
    threshold: float = 0.1
    k_nf: Optional[float] = None
    k_ff: Optional[float] = None

    @property
    def ratios(self) -> List[float]:
        out = []
        for previous, current in zip(self.norms, self.norms[1:]):
            out.append(current / previous if previous > 0.0 else 0.0)
        return out

    @property
    def terms(self) -> int:
        """Applications of U performed"""
        return max(len(self.norms) - 1, 0)

    @property
    def status(self) -> SeriesStatus:
        if any(r >= self.threshold for r in self.ratios):
            return SeriesStatus.DIVERGING
        return SeriesStatus.CONVERGED

    @property
    def max_ratio(self) -> float:
        return max(self.ratios, default=0.0)

    def to_dict(self) -> Dict[str, object]:
        record = {
            "terms": self.terms,
            "norms": self.norms,
            "ratios": self.ratios,
            "max_ratio": self.max_ratio,
            "threshold": self.threshold,
            "status": self.status.value,
        }
        if self.k_nf is not None:
            record["k_nf"] = self.k_nf
            record["k_ff"] = self.k_ff
        return record


class SeriesOperator:
    """U = D^{-1} L Z_F R applied matrix-free; near blocks of H are never touched"""

    def __init__(self, hmatrix: HMatrix, scaling: ScalingSet, near_field: ScaledNearField):
        if not hmatrix.n == scaling.n == near_field.n:
            raise DimensionError(f"Inconsistent sizes: H {hmatrix.n}, scaling {scaling.n}, D {near_field.n}")
        self.hmatrix = hmatrix
        self.scaling = scaling
        self.near_field = near_field
        self.applications = 0
        self._lock = threading.Lock()

    @property
    def n(self) -> int:
        return self.hmatrix.n

    def apply(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v)
        if v.shape[0] != self.n:
            raise DimensionError(f"Vector of length {v.shape[0]} for a {self.n}-unknown operator")
        with self._lock:
            self.applications += 1 if v.ndim == 1 else v.shape[1]
        w = apply_right(self.scaling, v)
        w = self.hmatrix.far_matvec(w)
        w = apply_left(self.scaling, w)
        return apply_Dinv(self.near_field, w)


def apply_U(u: SeriesOperator, v: np.ndarray) -> np.ndarray:
    return u.apply(v)


def series_solve(u: SeriesOperator, b0: np.ndarray, cfg: Optional[SeriesConfig] = None) -> Tuple[np.ndarray, ConvergenceReport]:
    """x~ = sum_n (-1)^n it_n over n_terms applications of U (adaptive: stop on tolerance or divergence)"""
    cfg = cfg or SeriesConfig()
    b0 = np.asarray(b0, dtype=complex)
    if not np.all(np.isfinite(b0)):
        raise ValueError("Series right-hand side contains non-finite values")
    report = ConvergenceReport(norms=[float(np.linalg.norm(b0))], threshold=cfg.threshold)
    x = b0.copy()
    term = b0
    limit = cfg.max_terms if cfg.adaptive else cfg.n_terms
    for n in range(1, limit + 1):
        term = u.apply(term)
        norm = float(np.linalg.norm(term))
        report.norms.append(norm)
        x = x - term if n % 2 else x + term
        if cfg.adaptive:
            if report.ratios[-1] >= cfg.threshold:
                break
            if norm <= cfg.tolerance * np.linalg.norm(x):
                break
    logger.debug(f"Series: {report.terms} terms, ratios {['%.3e' % r for r in report.ratios]}")
    return x, report


def check_convergence(report: ConvergenceReport) -> ConvergenceStatus:
    if len(report.norms) < 2:
        raise ValueError("Convergence check needs at least two recorded terms")
    return ConvergenceStatus.OK if all(r < report.threshold for r in report.ratios) else ConvergenceStatus.DIVERGED


def solve_system(
    h: HMatrix, s: ScalingSet, d: ScaledNearField, b: np.ndarray, cfg: Optional[SeriesConfig] = None
) -> Tuple[np.ndarray, ConvergenceReport]:
    """b~ = L b, b_0 = D^{-1} b~, series, then x = R x~"""
    u = SeriesOperator(h, s, d)
    return _solve_with(u, b, cfg)


def _solve_with(u: SeriesOperator, b: np.ndarray, cfg: Optional[SeriesConfig]) -> Tuple[np.ndarray, ConvergenceReport]:
    b = np.asarray(b)
    if b.shape != (u.n,):
        raise DimensionError(f"Right-hand side of shape {b.shape} for a {u.n}-unknown system")
    b0 = apply_Dinv(u.near_field, apply_left(u.scaling, b))
    x_tilde, report = series_solve(u, b0, cfg)
    return apply_right(u.scaling, x_tilde), report


class PowerSeriesSolver:
    """One setup, many right-hand sides"""

    def __init__(self, hmatrix: HMatrix, scaling: ScalingSet, near_field: ScaledNearField, cfg: Optional[SeriesConfig] = None):
        self.operator = SeriesOperator(hmatrix, scaling, near_field)
        self.cfg = cfg or SeriesConfig()
        self.solves = 0
        self._lock = threading.Lock()

    @property
    def u_applications(self) -> int:
        return self.operator.applications

    def solve(self, b: np.ndarray) -> Tuple[np.ndarray, ConvergenceReport]:
        x, report = _solve_with(self.operator, b, self.cfg)
        with self._lock:
            self.solves += 1
        if report.status is SeriesStatus.DIVERGING:
            logger.warning(
                f"⚠️  Power series ratio {report.max_ratio:.3e} reached the threshold {report.threshold}"
            )
        return x, report

    def solve_many(self, rhs: np.ndarray) -> Tuple[np.ndarray, List[ConvergenceReport]]:
        """Solve every column of an (N, k) right-hand-side array"""
        rhs = np.asarray(rhs)
        solutions = np.zeros(rhs.shape, dtype=complex)
        reports = []
        for col in range(rhs.shape[1]):
            solutions[:, col], report = self.solve(rhs[:, col])
            reports.append(report)
        return solutions, reports

    def solve_or_raise(self, b: np.ndarray, angle: Optional[float] = None) -> Tuple[np.ndarray, ConvergenceReport]:
        x, report = self.solve(b)
        if report.status is SeriesStatus.DIVERGING:
            where = f" at angle {angle:g} deg" if angle is not None else ""
            raise SeriesDivergenceError(
                f"Power series diverged{where}: ratio {report.max_ratio:.3e} >= {report.threshold}", angle, report
            )
        return x, report


def _frobenius_condition(matrix: np.ndarray) -> float:
    try:
        return float(np.linalg.norm(matrix) * np.linalg.norm(np.linalg.inv(matrix)))
    except np.linalg.LinAlgError:
        return float("inf")


def condition_diagnostics(
    h: HMatrix, scaling: ScalingSet, near_field: ScaledNearField, limit: int = 2000
) -> Tuple[float, float]:
    """Frobenius condition numbers of D and of the scaled far field L Z_F R (small N only)"""
    n = h.n
    if n > limit:
        raise ValueError(f"Condition diagnostics are limited to N <= {limit}, got {n}")
    d = np.zeros((n, n), dtype=complex)
    for leaf, block in near_field.blocks.items():
        rows = near_field.leaf_indices[leaf]
        d[np.ix_(rows, rows)] = block
    identity = np.eye(n, dtype=complex)
    far = apply_left(scaling, h.far_matvec(apply_right(scaling, identity)))
    return _frobenius_condition(d), _frobenius_condition(far)


@dataclass
class GmresResult:
    x: np.ndarray
    iterations: int
    converged: bool
    residual: float


def gmres_solve(
    h: HMatrix, b: np.ndarray, tol: float = 1e-6, restart: int = 50, max_iters: int = 1000
) -> GmresResult:
    """Unpreconditioned restarted GMRES on the full H-matrix"""
    b = np.asarray(b, dtype=complex)
    if b.shape != (h.n,):
        raise DimensionError(f"Right-hand side of shape {b.shape} for a {h.n}-unknown system")
    operator = LinearOperator((h.n, h.n), matvec=h.matvec, dtype=complex)
    iterations = [0]

    def count(_residual):
        iterations[0] += 1

    restart = min(restart, h.n)
    cycles = max(1, int(np.ceil(max_iters / restart)))
    x, info = gmres(
        operator, b, rtol=tol, atol=0.0, restart=restart, maxiter=cycles, callback=count, callback_type="pr_norm"
    )
    norm_b = np.linalg.norm(b)
    residual = float(np.linalg.norm(b - h.matvec(x)) / norm_b) if norm_b else 0.0
    converged = info == 0
    if not converged:
        logger.warning(f"⚠️  GMRES stopped after {iterations[0]} iterations with relative residual {residual:.3e}")
    else:
        logger.debug(f"GMRES converged in {iterations[0]} iterations (residual {residual:.3e})")
    return GmresResult(x=x, iterations=iterations[0], converged=converged, residual=residual)
