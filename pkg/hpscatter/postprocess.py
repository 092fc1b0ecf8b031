"""
Far-field radiation, radar cross section sweeps and the Mie-series oracle.

Angles in the public API are degrees; the underlying operator works in
radians. A plane wave "incident at (theta, phi)" arrives from that direction,
so the backscatter direction equals the incidence direction.

    sigma = 4 pi |r E_scat|^2 / |E_inc|^2,  reported as 10 log10(sigma / 1 m^2)
"""

import asyncio
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import special

from hpscatter.em_operator import EmOperator, Medium, Polarization, _direction_vectors
from hpscatter.errors import SeriesDivergenceError
from hpscatter.geometry import RwgBasisSet
from hpscatter.power_series import ConvergenceReport, SeriesStatus
from hpscatter.quadrature import triangle_rule

logger = logging.getLogger(__name__)

NULL_FLOOR_DB = 30.0


def to_dbsm(sigma) -> np.ndarray:
    return 10.0 * np.log10(np.maximum(np.asarray(sigma, dtype=float), 1e-20))


@dataclass(frozen=True)
class PlaneWave:
    theta_deg: float = 0.0
    phi_deg: float = 0.0
    polarization: Polarization = Polarization.VV

    def __post_init__(self):
        if not 0.0 <= self.theta_deg <= 180.0:
            raise ValueError(f"theta must lie in [0, 180] degrees, got {self.theta_deg}")
        if not 0.0 <= self.phi_deg < 360.0:
            raise ValueError(f"phi must lie in [0, 360) degrees, got {self.phi_deg}")

    @property
    def direction(self) -> Tuple[float, float]:
        """(theta, phi) in radians"""
        return math.radians(self.theta_deg), math.radians(self.phi_deg)


@dataclass
class RcsCurve:
    angles_deg: np.ndarray
    rcs_dbsm: np.ndarray
    metadata: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        self.angles_deg = np.asarray(self.angles_deg, dtype=float)
        self.rcs_dbsm = np.asarray(self.rcs_dbsm, dtype=float)
        if self.angles_deg.shape != self.rcs_dbsm.shape:
            raise ValueError("Angle and RCS arrays must have the same length")
        if np.any(np.diff(self.angles_deg) <= 0):
            raise ValueError("RCS curve angles must be strictly increasing")
        if not np.all(np.isfinite(self.rcs_dbsm)):
            raise ValueError("RCS curve contains non-finite values")

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"angle_deg": self.angles_deg, "rcs_dbsm": self.rcs_dbsm})

    def to_csv(self, path: str) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.6g")

    @classmethod
    def from_csv(cls, path: str) -> "RcsCurve":
        frame = pd.read_csv(path)
        return cls(frame["angle_deg"].to_numpy(), frame["rcs_dbsm"].to_numpy())


def compare_curves(curve: RcsCurve, reference: RcsCurve, null_floor_db: float = NULL_FLOOR_DB) -> Dict[str, float]:
    """Mean and max |delta sigma| in dB, skipping reference samples more than null_floor_db below its peak"""
    if not np.allclose(curve.angles_deg, reference.angles_deg):
        raise ValueError("Curves are sampled at different angles")
    keep = reference.rcs_dbsm >= reference.rcs_dbsm.max() - null_floor_db
    delta = np.abs(curve.rcs_dbsm - reference.rcs_dbsm)[keep]
    return {
        "mean_abs_db": float(delta.mean()),
        "max_abs_db": float(delta.max()),
        "samples": int(keep.sum()),
        "excluded": int((~keep).sum()),
    }


def physical_optics_plate_rcs(area: float, wavelength: float) -> float:
    """Broadside peak of a flat plate, 4 pi A^2 / lambda^2"""
    return 4.0 * np.pi * area * area / (wavelength * wavelength)


# ---------------------------------------------------------------------------
# Far field
# ---------------------------------------------------------------------------


def sample_currents(basis: RwgBasisSet, currents: np.ndarray, order: int = 3) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Surface current at quadrature points: (points (T, q, 3), J (T, q, 3), weights (T, q))"""
    currents = np.asarray(currents, dtype=complex)
    if currents.shape != (basis.n,):
        raise ValueError(f"Expected {basis.n} current coefficients, got shape {currents.shape}")
    mesh = basis.mesh
    rule = triangle_rule(order)
    vertices = mesh.vertices()
    points = rule.points(vertices)
    # J on triangle t = sum_a K[t, a] (r - v_a)
    k = np.zeros((mesh.n_triangles, 3), dtype=complex)
    coefficients = basis.coefficients()
    for side in range(2):
        np.add.at(k, (basis.triangles[:, side], basis.free_local[:, side]), coefficients[:, side] * currents)
    j = np.einsum("ta,tqd->tqd", k, points) - np.einsum("ta,tad->td", k, vertices)[:, None, :]
    weights = rule.weights[None, :] * mesh.triangle_areas()[:, None]
    return points, j, weights


def radiated_farfield(
    currents: np.ndarray,
    basis: RwgBasisSet,
    medium: Medium,
    direction: Tuple,
    order: int = 3,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    (E_theta, E_phi) of r E_scat in the far zone, per unit distance.

    ``direction`` is (theta, phi) in radians; both may be arrays of equal shape.
    """
    theta = np.atleast_1d(np.asarray(direction[0], dtype=float))
    phi = np.atleast_1d(np.asarray(direction[1], dtype=float))
    theta, phi = np.broadcast_arrays(theta, phi)
    points, j, weights = sample_currents(basis, currents, order)
    pts = points.reshape(-1, 3)
    jw = (j * weights[:, :, None]).reshape(-1, 3)
    factor = -1j * medium.omega * medium.mu / (4.0 * np.pi)
    e_theta = np.zeros(theta.shape, dtype=complex)
    e_phi = np.zeros(theta.shape, dtype=complex)
    for idx in np.ndindex(theta.shape):
        r_hat, theta_hat, phi_hat = _direction_vectors(theta[idx], phi[idx])
        phase = np.exp(1j * medium.wavenumber * (pts @ r_hat))
        integral = phase @ jw
        e_theta[idx] = factor * (integral @ theta_hat)
        e_phi[idx] = factor * (integral @ phi_hat)
    if np.ndim(direction[0]) == 0 and np.ndim(direction[1]) == 0:
        return e_theta[0], e_phi[0]
    return e_theta, e_phi


def _sweep_directions(angles_deg: Sequence[float], cut: str, fixed_deg: float) -> Tuple[np.ndarray, np.ndarray]:
    angles = np.radians(np.asarray(angles_deg, dtype=float))
    fixed = np.full(angles.shape, math.radians(fixed_deg))
    if cut == "theta":
        return angles, fixed
    if cut == "phi":
        return fixed, angles
    raise ValueError(f"Sweep cut must be 'theta' or 'phi', got '{cut}'")


def bistatic_rcs(
    currents: np.ndarray,
    basis: RwgBasisSet,
    medium: Medium,
    sweep: Sequence[float],
    incident: PlaneWave,
    cut: str = "theta",
    fixed_deg: Optional[float] = None,
    order: int = 3,
) -> RcsCurve:
    """Total scattered sigma over observation angles; the cut holds phi (or theta) at ``fixed_deg``"""
    if fixed_deg is None:
        fixed_deg = incident.phi_deg if cut == "theta" else incident.theta_deg
    theta, phi = _sweep_directions(sweep, cut, fixed_deg)
    e_theta, e_phi = radiated_farfield(currents, basis, medium, (theta, phi), order)
    sigma = 4.0 * np.pi * (np.abs(e_theta) ** 2 + np.abs(e_phi) ** 2)
    return RcsCurve(
        np.asarray(sweep, dtype=float),
        to_dbsm(sigma),
        {
            "mode": "bistatic",
            "cut": cut,
            "fixed_deg": fixed_deg,
            "frequency_hz": medium.frequency,
            "polarization": incident.polarization.value,
            "incident_theta_deg": incident.theta_deg,
            "incident_phi_deg": incident.phi_deg,
        },
    )


class ScatteringSolver(Protocol):
    """What a monostatic sweep needs: the discretization and a solve for one right-hand side"""

    basis: RwgBasisSet
    medium: Medium
    operator: EmOperator

    def solve(self, b: np.ndarray):
        ...


def _backscatter(
    solver: ScatteringSolver, theta: float, phi: float, polarization: Polarization, order: int, angle_deg: float
) -> float:
    b = solver.operator.rhs((theta, phi), polarization)
    x, report = solver.solve(b)
    if isinstance(report, ConvergenceReport) and report.status is SeriesStatus.DIVERGING:
        raise SeriesDivergenceError(
            f"Power series diverged at incidence angle {angle_deg:g} deg (ratio {report.max_ratio:.3e})",
            angle_deg,
            report,
        )
    e_theta, e_phi = radiated_farfield(x, solver.basis, solver.medium, (theta, phi), order)
    co_pol = e_theta if polarization is Polarization.VV else e_phi
    return 4.0 * np.pi * float(np.abs(co_pol) ** 2)


def monostatic_rcs(
    solver: ScatteringSolver,
    sweep: Sequence[float],
    polarization: Polarization = Polarization.VV,
    cut: str = "theta",
    fixed_deg: float = 0.0,
    workers: int = 1,
    order: int = 3,
) -> RcsCurve:
    """
    Co-polarized backscatter for each incidence angle of the sweep.

    The solver's setup is shared; each angle costs one right-hand side and one
    solve. A diverging series aborts the sweep with the offending angle.
    """
    theta, phi = _sweep_directions(sweep, cut, fixed_deg)
    sweep = np.asarray(sweep, dtype=float)

    def job(k):
        return _backscatter(solver, float(theta[k]), float(phi[k]), polarization, order, float(sweep[k]))

    if workers <= 1:
        sigma = [job(k) for k in range(len(sweep))]
    else:
        sigma = asyncio.run(_gather_angles(job, len(sweep), workers))
    logger.info(f"Monostatic sweep: {len(sweep)} incidence angles solved")
    return RcsCurve(
        sweep,
        to_dbsm(sigma),
        {
            "mode": "monostatic",
            "cut": cut,
            "fixed_deg": fixed_deg,
            "frequency_hz": solver.medium.frequency,
            "polarization": polarization.value,
        },
    )


async def _gather_angles(job, count: int, workers: int) -> List[float]:
    semaphore = asyncio.Semaphore(workers)

    async def run(k):
        async with semaphore:
            return await asyncio.to_thread(job, k)

    return await asyncio.gather(*(run(k) for k in range(count)))


# ---------------------------------------------------------------------------
# Mie series
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MieConfig:
    radius: float
    wavenumber: float
    order: Optional[int] = None

    def __post_init__(self):
        if self.radius * self.wavenumber <= 0:
            raise ValueError("Mie series needs ka > 0")

    @property
    def size_parameter(self) -> float:
        return self.radius * self.wavenumber

    @property
    def truncation(self) -> int:
        if self.order is not None:
            return self.order
        x = self.size_parameter
        return int(math.ceil(x + 4.0 * x ** (1.0 / 3.0) + 2.0))


def _mie_coefficients(cfg: MieConfig) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    x = cfg.size_parameter
    n = np.arange(1, cfg.truncation + 1)
    jn = special.spherical_jn(n, x)
    yn = special.spherical_yn(n, x)
    jn_d = special.spherical_jn(n, x, derivative=True)
    yn_d = special.spherical_yn(n, x, derivative=True)
    hn = jn + 1j * yn
    hn_d = jn_d + 1j * yn_d
    # perfectly conducting sphere: a_n = [x j_n]' / [x h_n]', b_n = j_n / h_n
    a = (jn + x * jn_d) / (hn + x * hn_d)
    b = jn / hn
    return n, a, b


def mie_amplitudes(cfg: MieConfig, scattering_angle: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Amplitude functions S1 (perpendicular) and S2 (parallel) at scattering angles in radians"""
    n, a, b = _mie_coefficients(cfg)
    mu = np.cos(np.atleast_1d(scattering_angle))
    s1 = np.zeros(mu.shape, dtype=complex)
    s2 = np.zeros(mu.shape, dtype=complex)
    pi_prev = np.zeros_like(mu)
    pi_curr = np.ones_like(mu)
    for k, order in enumerate(n):
        tau = order * mu * pi_curr - (order + 1) * pi_prev
        weight = (2 * order + 1) / (order * (order + 1))
        s1 += weight * (a[k] * pi_curr + b[k] * tau)
        s2 += weight * (a[k] * tau + b[k] * pi_curr)
        pi_next = ((2 * order + 1) * mu * pi_curr - (order + 1) * pi_prev) / order
        pi_prev, pi_curr = pi_curr, pi_next
    return s1, s2


def mie_bistatic_sigma(cfg: MieConfig, incident: PlaneWave, theta: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """sigma (m^2) for arbitrary incidence and observation directions in radians"""
    r_in, theta_hat, phi_hat = _direction_vectors(*incident.direction)
    k_hat = -r_in
    e_hat = theta_hat if incident.polarization is Polarization.VV else phi_hat
    theta = np.atleast_1d(theta)
    phi = np.atleast_1d(phi)
    r_obs = np.stack([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)], axis=-1)
    cos_scatter = np.clip(r_obs @ k_hat, -1.0, 1.0)
    s1, s2 = mie_amplitudes(cfg, np.arccos(cos_scatter))
    in_plane = r_obs - cos_scatter[:, None] * k_hat
    norm = np.linalg.norm(in_plane, axis=1)
    # forward and backward directions: |S1| = |S2|, any plane will do
    safe = np.where(norm > 1e-12, norm, 1.0)
    cos_psi = np.where(norm > 1e-12, (in_plane @ e_hat) / safe, 1.0)
    intensity = np.abs(s2) ** 2 * cos_psi ** 2 + np.abs(s1) ** 2 * (1.0 - cos_psi ** 2)
    return 4.0 * np.pi * intensity / cfg.wavenumber ** 2


def mie_rcs_pec_sphere(
    cfg: MieConfig,
    angles: Sequence[float],
    mode: str = "bistatic",
    incident: Optional[PlaneWave] = None,
    cut: str = "theta",
    fixed_deg: Optional[float] = None,
) -> RcsCurve:
    """
    Exact PEC sphere RCS in dBsm.

    Bistatic mode observes along the sweep for the given incidence (default
    VV from theta = 0); monostatic mode is the backscatter, the same for every
    angle of a sphere.
    """
    if cfg.size_parameter > 100:
        raise ValueError(f"Mie truncation is only validated for ka <= 100, got {cfg.size_parameter:.2f}")
    incident = incident or PlaneWave()
    angles = np.asarray(angles, dtype=float)
    if mode == "monostatic":
        s1, _ = mie_amplitudes(cfg, np.array([np.pi]))
        sigma = np.full(angles.shape, 4.0 * np.pi * np.abs(s1[0]) ** 2 / cfg.wavenumber ** 2)
    elif mode == "bistatic":
        if fixed_deg is None:
            fixed_deg = incident.phi_deg if cut == "theta" else incident.theta_deg
        theta, phi = _sweep_directions(angles, cut, fixed_deg)
        sigma = mie_bistatic_sigma(cfg, incident, theta, phi)
    else:
        raise ValueError(f"Mie mode must be 'bistatic' or 'monostatic', got '{mode}'")
    return RcsCurve(angles, to_dbsm(sigma), {"mode": f"mie-{mode}", "ka": cfg.size_parameter})
