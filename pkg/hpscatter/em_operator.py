"""
Galerkin EFIE / MFIE / CFIE operator on RWG functions.

Time convention is e^{+jwt}, so the free-space Green's function is
G = e^{-jkR} / (4 pi R); this satisfies the radiation condition.

Matrix entries are assembled per triangle pair. For test triangle i and
source triangle j the RWG function restricted to a triangle is
c (r - v) with c = s l / (2A), so every entry is a sum over the four
(side, side) combinations of c_m c_n C_ij[a, b], where a and b are the
local slots of the free vertices and C_ij is a 3x3 matrix per pair.

Pair classes:
    regular   centroid distance >= near_factor * max diameter, ``regular_order``
              rule (7 points by default)
    near      closer than that but not touching, ``near_order`` rule
    singular  triangles sharing at least one node; the static 1/R part of G
              is integrated analytically over the source triangle and only
              the smooth remainder is sampled
"""

import enum
import logging
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import constants

from hpscatter.errors import FormulationError, GeometryDomainError
from hpscatter.geometry import RwgBasisSet, SurfaceKind, classify_surface
from hpscatter.quadrature import TriangleRule, static_potential_integrals, subdivided_rule, triangle_rule

logger = logging.getLogger(__name__)

FOUR_PI = 4.0 * np.pi


class Formulation(enum.Enum):
    EFIE = "efie"
    MFIE = "mfie"
    CFIE = "cfie"


class Polarization(enum.Enum):
    VV = "VV"  # electric field along theta-hat of the incidence direction
    HH = "HH"  # electric field along phi-hat


@dataclass(frozen=True)
class Medium:
    """Lossless homogeneous background"""

    frequency: float
    epsilon: float = constants.epsilon_0
    mu: float = constants.mu_0

    @classmethod
    def free_space(cls, frequency_hz: float) -> "Medium":
        if frequency_hz <= 0:
            raise ValueError(f"Frequency must be positive, got {frequency_hz}")
        return cls(frequency=float(frequency_hz))

    @property
    def omega(self) -> float:
        return 2.0 * np.pi * self.frequency

    @property
    def wavenumber(self) -> float:
        return self.omega * np.sqrt(self.mu * self.epsilon)

    @property
    def impedance(self) -> float:
        return float(np.sqrt(self.mu / self.epsilon))

    @property
    def wavelength(self) -> float:
        return 2.0 * np.pi / self.wavenumber


@dataclass(frozen=True)
class OperatorConfig:
    formulation: Formulation = Formulation.CFIE
    alpha: float = 0.5
    regular_order: int = 7
    regular_levels: int = 0
    near_order: int = 7
    singular_order: int = 7
    singular_levels: int = 3  # test-side subdivision for node-sharing pairs
    singular_inner_levels: int = 1  # source-side subdivision of the smooth remainder
    touching_levels: int = 1  # MFIE on edge- or vertex-touching pairs
    near_factor: float = 2.0
    chunk_points: int = 500_000

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise FormulationError(f"CFIE alpha must lie in [0, 1], got {self.alpha}")

    def resolved(self, surface: SurfaceKind) -> "OperatorConfig":
        """Apply the formulation's alpha and reject magnetic-field equations on open surfaces"""
        if self.formulation is Formulation.EFIE:
            return replace(self, alpha=1.0)
        if surface is SurfaceKind.OPEN:
            if self.formulation is Formulation.CFIE and self.alpha == 1.0:
                return replace(self, formulation=Formulation.EFIE)
            raise FormulationError(
                f"{self.formulation.name} can only be solved for closed objects; "
                "use EFIE (alpha = 1) for open surfaces"
            )
        if self.formulation is Formulation.MFIE:
            return replace(self, alpha=0.0)
        return self


# ---------------------------------------------------------------------------
# Kernel
# ---------------------------------------------------------------------------


def _distance(r, r_src) -> Tuple[np.ndarray, np.ndarray]:
    diff = np.asarray(r, dtype=float) - np.asarray(r_src, dtype=float)
    dist = np.linalg.norm(diff, axis=-1)
    if np.any(dist == 0.0):
        raise GeometryDomainError("Green's function evaluated at R = 0; the singular point belongs to quadrature")
    return diff, dist


def green(r, r_src, k: float):
    """G = e^{-jkR} / (4 pi R); broadcasts over leading axes of 3-vectors"""
    _, dist = _distance(r, r_src)
    return np.exp(-1j * k * dist) / (FOUR_PI * dist)


def grad_green(r, r_src, k: float):
    """
    Gradient of G with respect to the source point r_src:
    (jk + 1/R) G (r - r_src) / R.
    """
    diff, dist = _distance(r, r_src)
    g = np.exp(-1j * k * dist) / (FOUR_PI * dist)
    return ((1j * k + 1.0 / dist) * g / dist)[..., None] * diff


def _smooth_green(dist: np.ndarray, k: float) -> np.ndarray:
    """(e^{-jkR} - 1) / (4 pi R), finite at R = 0"""
    safe = np.where(dist > 0.0, dist, 1.0)
    half = np.sin(0.5 * k * safe)
    value = (-2.0 * half * half - 1j * np.sin(k * safe)) / (FOUR_PI * safe)
    return np.where(dist > 0.0, value, -1j * k / FOUR_PI)


def _direction_vectors(theta: float, phi: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    st, ct = np.sin(theta), np.cos(theta)
    sp, cp = np.sin(phi), np.cos(phi)
    r_hat = np.array([st * cp, st * sp, ct])
    theta_hat = np.array([ct * cp, ct * sp, -st])
    phi_hat = np.array([-sp, cp, 0.0])
    return r_hat, theta_hat, phi_hat


def incident_fields(points: np.ndarray, direction: Tuple[float, float], polarization: Polarization, medium: Medium):
    """
    Plane wave arriving from direction (theta, phi) in radians, |E| = 1 V/m.

    The wave travels along k_hat = -r_hat(theta, phi). Returns (E, H) sampled at
    ``points`` with shape (..., 3).
    """
    r_hat, theta_hat, phi_hat = _direction_vectors(*direction)
    k_hat = -r_hat
    e_hat = theta_hat if polarization is Polarization.VV else phi_hat
    phase = np.exp(-1j * medium.wavenumber * (np.asarray(points) @ k_hat))
    e_field = phase[..., None] * e_hat
    h_field = np.cross(k_hat, e_field) / medium.impedance
    return e_field, h_field


# ---------------------------------------------------------------------------
# Operator
# ---------------------------------------------------------------------------


class EmOperator:
    """
    Matrix sampler for the configured formulation.

    ``block(rows, cols)`` returns the dense sub-block for any basis index
    lists; this is both the near-field assembler and the row/column sampler
    for cross approximation. Instances hold only read-only arrays, so blocks
    may be requested from several threads at once.
    """

    def __init__(self, basis: RwgBasisSet, medium: Medium, config: Optional[OperatorConfig] = None):
        config = config or OperatorConfig()
        mesh = basis.mesh
        self.basis = basis
        self.medium = medium
        self.surface = classify_surface(mesh)
        self.config = config.resolved(self.surface)
        if self.config.alpha < 1.0 and not (mesh.is_consistently_oriented() and mesh.signed_volume() > 0):
            raise FormulationError("MFIE part needs a closed surface with consistent outward-facing triangles")

        self.k = medium.wavenumber
        self.vertices = mesh.vertices()
        self.triangle_nodes = mesh.triangles
        self.areas = mesh.triangle_areas()
        self.normals = mesh.triangle_normals()
        self.centroids = self.vertices.mean(axis=1)
        edges = np.stack([self.vertices[:, (a + 1) % 3] - self.vertices[:, a] for a in range(3)], axis=1)
        self.diameters = np.linalg.norm(edges, axis=2).max(axis=1)
        self.coefficients = basis.coefficients()
        self.regular_rule = subdivided_rule(self.config.regular_order, self.config.regular_levels)
        self.near_rule = triangle_rule(self.config.near_order)
        self.singular_inner = subdivided_rule(self.config.singular_order, self.config.singular_inner_levels)
        self.singular_outer = subdivided_rule(self.config.singular_order, self.config.singular_levels)
        self.gram_rule = triangle_rule(3)
        self.efie_weight = self.config.alpha
        self.mfie_weight = medium.impedance * (1.0 - self.config.alpha)
        logger.debug(
            f"Operator {self.config.formulation.name} alpha={self.config.alpha} on {basis.n} unknowns, "
            f"k={self.k:.4g} rad/m"
        )

    @property
    def n(self) -> int:
        return self.basis.n

    # -- public sampling -------------------------------------------------

    def block(self, rows: Sequence[int], cols: Sequence[int]) -> np.ndarray:
        return self._assemble(rows, cols, self.efie_weight, self.mfie_weight)

    def efie_block(self, rows, cols) -> np.ndarray:
        return self._assemble(rows, cols, 1.0, 0.0)

    def mfie_block(self, rows, cols) -> np.ndarray:
        if self.surface is SurfaceKind.OPEN:
            raise FormulationError("MFIE can only be solved for closed objects")
        return self._assemble(rows, cols, 0.0, 1.0)

    def gram_block(self, rows, cols) -> np.ndarray:
        """RWG Gram matrix <f_m, f_n>"""
        return self._assemble(rows, cols, 0.0, 0.0, gram_weight=1.0)

    def dense(self) -> np.ndarray:
        idx = np.arange(self.n)
        return self.block(idx, idx)

    # -- excitation ------------------------------------------------------

    def rhs(self, direction: Tuple[float, float], polarization: Polarization) -> np.ndarray:
        """b_m = alpha <f_m, E_inc> + Z0 (1 - alpha) <f_m, n x H_inc>"""
        rule = self.near_rule
        points = rule.points(self.vertices)  # (T, q, 3)
        e_field, h_field = incident_fields(points, direction, polarization, self.medium)
        tested = self.config.alpha * e_field
        if self.config.alpha < 1.0:
            n_cross_h = np.cross(self.normals[:, None, :], h_field)
            tested = tested + self.medium.impedance * (1.0 - self.config.alpha) * n_cross_h
        weights = rule.weights[None, :] * self.areas[:, None]
        # moments[t, a] = sum_q w (r_q - v_a) . F(r_q)
        moments = np.einsum("tq,tqd,tqd->t", weights, points, tested)[:, None] - np.einsum(
            "tq,tad,tqd->ta", weights, self.vertices, tested
        )
        b = np.zeros(self.n, dtype=complex)
        tris = self.basis.triangles
        slots = self.basis.free_local
        for side in range(2):
            b += self.coefficients[:, side] * moments[tris[:, side], slots[:, side]]
        return b

    # -- assembly --------------------------------------------------------

    def _assemble(self, rows, cols, efie_weight: float, mfie_weight: float, gram_weight: float = 0.0) -> np.ndarray:
        rows = np.atleast_1d(np.asarray(rows, dtype=np.int64))
        cols = np.atleast_1d(np.asarray(cols, dtype=np.int64))
        tris = self.basis.triangles
        slots = self.basis.free_local
        row_tris, row_inv = np.unique(tris[rows], return_inverse=True)
        col_tris, col_inv = np.unique(tris[cols], return_inverse=True)
        row_inv = row_inv.reshape(len(rows), 2)
        col_inv = col_inv.reshape(len(cols), 2)
        ti = np.repeat(row_tris, len(col_tris))
        tj = np.tile(col_tris, len(row_tris))
        pair = self.pair_matrices(ti, tj, efie_weight, mfie_weight, gram_weight)

        block = np.zeros((len(rows), len(cols)), dtype=complex)
        for s in range(2):
            a = slots[rows, s][:, None]
            cm = self.coefficients[rows, s][:, None]
            for t in range(2):
                b = slots[cols, t][None, :]
                cn = self.coefficients[cols, t][None, :]
                index = row_inv[:, s][:, None] * len(col_tris) + col_inv[:, t][None, :]
                block += cm * cn * pair[index, a, b]
        return block

    def pair_matrices(
        self, ti: np.ndarray, tj: np.ndarray, efie_weight: float, mfie_weight: float, gram_weight: float = 0.0
    ) -> np.ndarray:
        """Combined 3x3 interaction matrix per triangle pair, shape (P, 3, 3)"""
        ti = np.asarray(ti, dtype=np.int64)
        tj = np.asarray(tj, dtype=np.int64)
        out = np.zeros((len(ti), 3, 3), dtype=complex)
        identical = ti == tj
        shared = (self.triangle_nodes[ti][:, :, None] == self.triangle_nodes[tj][:, None, :]).any(axis=(1, 2))
        dist = np.linalg.norm(self.centroids[ti] - self.centroids[tj], axis=1)
        reach = self.config.near_factor * np.maximum(self.diameters[ti], self.diameters[tj])
        near = ~shared & (dist < reach)
        regular = ~shared & ~near

        for mask, rule in ((regular, self.regular_rule), (near, self.near_rule)):
            if mask.any() and (efie_weight != 0.0 or mfie_weight != 0.0):
                idx = np.flatnonzero(mask)
                out[idx] = self._smooth_pairs(ti[idx], tj[idx], rule, rule, efie_weight, mfie_weight)

        if shared.any():
            idx = np.flatnonzero(shared)
            if efie_weight != 0.0:
                out[idx] += efie_weight * self._singular_efie(ti[idx], tj[idx])
            touching = idx[~identical[idx]]
            if mfie_weight != 0.0 and len(touching):
                # coplanar or not, interior points of distinct triangles never coincide
                rule = subdivided_rule(self.config.near_order, self.config.touching_levels)
                out[touching] += self._smooth_pairs(ti[touching], tj[touching], rule, rule, 0.0, mfie_weight)

        self_weight = 0.5 * mfie_weight + gram_weight
        if self_weight != 0.0 and identical.any():
            idx = np.flatnonzero(identical)
            out[idx] += self_weight * self._gram(ti[idx])
        return out

    def _chunks(self, count: int, points_per_pair: int):
        step = max(1, self.config.chunk_points // max(points_per_pair, 1))
        for start in range(0, count, step):
            yield slice(start, min(count, start + step))

    def _gram(self, t: np.ndarray) -> np.ndarray:
        rule = self.gram_rule
        x = rule.points(self.vertices[t])  # (P, q, 3)
        rel = x[:, :, None, :] - self.vertices[t][:, None, :, :]  # (P, q, a, 3)
        w = rule.weights[None, :] * self.areas[t][:, None]
        return np.einsum("pq,pqad,pqbd->pab", w, rel, rel)

    def _smooth_pairs(
        self, ti, tj, rule_i: TriangleRule, rule_j: TriangleRule, efie_weight: float, mfie_weight: float
    ) -> np.ndarray:
        out = np.zeros((len(ti), 3, 3), dtype=complex)
        for sl in self._chunks(len(ti), rule_i.size * rule_j.size):
            out[sl] = self._smooth_chunk(ti[sl], tj[sl], rule_i, rule_j, efie_weight, mfie_weight)
        return out

    def _smooth_chunk(self, ti, tj, rule_i, rule_j, efie_weight, mfie_weight) -> np.ndarray:
        k = self.k
        x = rule_i.points(self.vertices[ti])
        y = rule_j.points(self.vertices[tj])
        xc = x - self.centroids[ti][:, None, :]
        yc = y - self.centroids[tj][:, None, :]
        w = (rule_i.weights[None, :] * self.areas[ti][:, None])[:, :, None] * (
            rule_j.weights[None, :] * self.areas[tj][:, None]
        )[:, None, :]
        diff = x[:, :, None, :] - y[:, None, :, :]
        dist = np.linalg.norm(diff, axis=-1)
        g = np.exp(-1j * k * dist) / (FOUR_PI * dist)
        alpha = self.centroids[ti][:, None, :] - self.vertices[ti]
        beta = self.centroids[tj][:, None, :] - self.vertices[tj]
        result = np.zeros((len(ti), 3, 3), dtype=complex)

        if efie_weight != 0.0:
            wg = w * g
            s = wg.sum(axis=(1, 2))
            q = np.einsum("pab,pad->pd", wg, xc)
            p = np.einsum("pab,pbd->pd", wg, yc)
            t = np.einsum("pab,pad,pbd->p", wg, xc, yc)
            result += efie_weight * self._efie_from_moments(s, p, q, t, alpha, beta)

        if mfie_weight != 0.0:
            normal = self.normals[ti]
            wphi = w * (1.0 + 1j * k * dist) * g / (dist * dist)
            n_dot_d = np.einsum("pabd,pd->pab", diff, normal)
            kern = wphi * n_dot_d
            k0 = kern.sum(axis=(1, 2))
            kx = np.einsum("pab,pad->pd", kern, xc)
            ky = np.einsum("pab,pbd->pd", kern, yc)
            kxy = np.einsum("pab,pad,pbd->p", kern, xc, yc)
            x_dot_d = np.einsum("pad,pabd->pab", xc, diff)
            n_dot_y = np.einsum("pbd,pd->pb", yc, normal)
            a1 = np.einsum("pab,pab,pb->p", wphi, x_dot_d, n_dot_y)
            a2 = (wphi * x_dot_d).sum(axis=(1, 2))
            a3 = np.einsum("pab,pabd,pb->pd", wphi, diff, n_dot_y)
            a4 = np.einsum("pab,pabd->pd", wphi, diff)
            n_dot_beta = np.einsum("pbd,pd->pb", beta, normal)
            term1 = (
                kxy[:, None, None]
                + np.einsum("pd,pbd->pb", kx, beta)[:, None, :]
                + np.einsum("pad,pd->pa", alpha, ky)[:, :, None]
                + np.einsum("pad,pbd->pab", alpha, beta) * k0[:, None, None]
            )
            term2 = (
                a1[:, None, None]
                + (n_dot_beta * a2[:, None])[:, None, :]
                + np.einsum("pad,pd->pa", alpha, a3)[:, :, None]
                + np.einsum("pad,pd->pa", alpha, a4)[:, :, None] * n_dot_beta[:, None, :]
            )
            result -= mfie_weight * (term1 - term2)
        return result

    def _efie_from_moments(self, s, p, q, t, alpha, beta) -> np.ndarray:
        """
        jwmu int int (r - v_a).(r' - v_b) G  -  4j/(w eps) int int G

        from the centroid-relative moments S = ∫∫G, P = ∫∫G (r' - c_j),
        Q = ∫∫G (r - c_i), T = ∫∫G (r - c_i).(r' - c_j).
        """
        omega = self.medium.omega
        vector = (
            t[:, None, None]
            + np.einsum("pd,pbd->pb", q, beta)[:, None, :]
            + np.einsum("pad,pd->pa", alpha, p)[:, :, None]
            + np.einsum("pad,pbd->pab", alpha, beta) * s[:, None, None]
        )
        scalar = s[:, None, None] * np.ones((1, 3, 3))
        return 1j * omega * self.medium.mu * vector - 4j / (omega * self.medium.epsilon) * scalar

    def _singular_efie(self, ti, tj) -> np.ndarray:
        """EFIE for node-sharing pairs, averaged with the swapped evaluation so Z stays symmetric"""
        out = np.zeros((len(ti), 3, 3), dtype=complex)
        per_pair = self.singular_outer.size * self.singular_inner.size
        for sl in self._chunks(len(ti), per_pair):
            a, b = ti[sl], tj[sl]
            s1, p1, q1, t1 = self._singular_moments(a, b)
            s2, p2, q2, t2 = self._singular_moments(b, a)
            s = 0.5 * (s1 + s2)
            p = 0.5 * (p1 + q2)
            q = 0.5 * (q1 + p2)
            t = 0.5 * (t1 + t2)
            alpha = self.centroids[a][:, None, :] - self.vertices[a]
            beta = self.centroids[b][:, None, :] - self.vertices[b]
            out[sl] = self._efie_from_moments(s, p, q, t, alpha, beta)
        return out

    def _singular_moments(self, ti, tj):
        outer, inner = self.singular_outer, self.singular_inner
        x = outer.points(self.vertices[ti])  # (P, q, 3)
        y = inner.points(self.vertices[tj])  # (P, p, 3)
        wi = outer.weights[None, :] * self.areas[ti][:, None]
        wj = inner.weights[None, :] * self.areas[tj][:, None]
        xc = x - self.centroids[ti][:, None, :]
        yc = y - self.centroids[tj][:, None, :]

        dist = np.linalg.norm(x[:, :, None, :] - y[:, None, :, :], axis=-1)
        smooth = _smooth_green(dist, self.k) * wj[:, None, :]
        g0 = smooth.sum(axis=2)
        g1 = np.einsum("pab,pbd->pad", smooth, yc)

        n_pairs, n_outer = x.shape[:2]
        flat = x.reshape(-1, 3)
        tri = np.repeat(self.vertices[tj], n_outer, axis=0)
        i0, i1 = static_potential_integrals(flat, tri)
        normal = np.repeat(self.normals[tj], n_outer, axis=0)
        height = np.einsum("md,md->m", flat - tri[:, 0], normal)
        rho = flat - height[:, None] * normal
        centre = np.repeat(self.centroids[tj], n_outer, axis=0)
        g0 = g0 + (i0 / FOUR_PI).reshape(n_pairs, n_outer)
        g1 = g1 + ((i1 + (rho - centre) * i0[:, None]) / FOUR_PI).reshape(n_pairs, n_outer, 3)

        s = np.einsum("pa,pa->p", wi, g0)
        q = np.einsum("pa,pa,pad->pd", wi, g0, xc)
        p = np.einsum("pa,pad->pd", wi, g1)
        t = np.einsum("pa,pad,pad->p", wi, xc, g1)
        return s, p, q, t


# ---------------------------------------------------------------------------
# Entry-level helpers
# ---------------------------------------------------------------------------


def _operator(basis: RwgBasisSet, medium: Medium, config: Optional[OperatorConfig]) -> EmOperator:
    return EmOperator(basis, medium, config)


def efie_entry(m: int, n: int, basis: RwgBasisSet, medium: Medium, config: Optional[OperatorConfig] = None) -> complex:
    cfg = replace(config or OperatorConfig(), formulation=Formulation.EFIE, alpha=1.0)
    return complex(_operator(basis, medium, cfg).efie_block([m], [n])[0, 0])


def mfie_entry(m: int, n: int, basis: RwgBasisSet, medium: Medium, config: Optional[OperatorConfig] = None) -> complex:
    cfg = replace(config or OperatorConfig(), formulation=Formulation.MFIE, alpha=0.0)
    return complex(_operator(basis, medium, cfg).mfie_block([m], [n])[0, 0])


def cfie_entry(m: int, n: int, basis: RwgBasisSet, medium: Medium, config: Optional[OperatorConfig] = None) -> complex:
    return complex(_operator(basis, medium, config).block([m], [n])[0, 0])


def assemble_block(
    rows: Sequence[int], cols: Sequence[int], basis: RwgBasisSet, medium: Medium, config: Optional[OperatorConfig] = None
) -> np.ndarray:
    if len(rows) == 0 or len(cols) == 0:
        raise ValueError("assemble_block needs non-empty test and source index lists")
    return _operator(basis, medium, config).block(rows, cols)


def plane_wave_rhs(
    direction: Tuple[float, float],
    polarization: Polarization,
    basis: RwgBasisSet,
    medium: Medium,
    config: Optional[OperatorConfig] = None,
) -> np.ndarray:
    return _operator(basis, medium, config).rhs(direction, polarization)
