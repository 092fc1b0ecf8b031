"""
Triangle quadrature rules and analytic static potential integrals.

Rules are stored in barycentric form with weights normalised to sum to one,
so an integral over a triangle of area A is ``A * sum(w * f(points))``.
The analytic integrals of 1/R and (r' - rho)/R over a flat triangle are used
to extract the singular part of the Green's function for touching triangles.
"""

from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np


@dataclass(frozen=True)
class TriangleRule:
    """Quadrature rule in barycentric coordinates"""

    barycentric: np.ndarray  # (q, 3)
    weights: np.ndarray  # (q,), sums to 1

    @property
    def size(self) -> int:
        return len(self.weights)

    def points(self, vertices: np.ndarray) -> np.ndarray:
        """Map the rule onto triangles given as (..., 3, 3) vertex arrays -> (..., q, 3)"""
        return np.einsum("qa,...ad->...qd", self.barycentric, vertices)


def _seven_point_rule() -> TriangleRule:
    sqrt15 = np.sqrt(15.0)
    a1 = (9.0 - 2.0 * sqrt15) / 21.0
    b1 = (6.0 + sqrt15) / 21.0
    a2 = (9.0 + 2.0 * sqrt15) / 21.0
    b2 = (6.0 - sqrt15) / 21.0
    w1 = (155.0 + sqrt15) / 1200.0
    w2 = (155.0 - sqrt15) / 1200.0
    bary = np.array(
        [
            [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
            [a1, b1, b1],
            [b1, a1, b1],
            [b1, b1, a1],
            [a2, b2, b2],
            [b2, a2, b2],
            [b2, b2, a2],
        ]
    )
    weights = np.array([0.225, w1, w1, w1, w2, w2, w2])
    return TriangleRule(bary, weights)


_RULES: Dict[int, TriangleRule] = {
    1: TriangleRule(np.array([[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]]), np.array([1.0])),
    3: TriangleRule(
        np.array(
            [
                [2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0],
                [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0],
                [1.0 / 6.0, 1.0 / 6.0, 2.0 / 3.0],
            ]
        ),
        np.full(3, 1.0 / 3.0),
    ),
    7: _seven_point_rule(),
}


def triangle_rule(order: int) -> TriangleRule:
    """Symmetric rule with 1, 3 or 7 points (exact to degree 1, 2 and 5)"""
    try:
        return _RULES[order]
    except KeyError:
        raise ValueError(f"Unsupported triangle rule with {order} points; use one of {sorted(_RULES)}")


def subdivided_rule(order: int, levels: int) -> TriangleRule:
    """Composite rule: split the triangle into 4**levels congruent pieces and apply ``order`` on each"""
    base = triangle_rule(order)
    if levels <= 0:
        return base
    corners = [np.eye(3)]
    for _ in range(levels):
        refined = []
        for c in corners:
            m01 = 0.5 * (c[0] + c[1])
            m12 = 0.5 * (c[1] + c[2])
            m02 = 0.5 * (c[0] + c[2])
            refined.extend(
                [
                    np.array([c[0], m01, m02]),
                    np.array([m01, c[1], m12]),
                    np.array([m02, m12, c[2]]),
                    np.array([m01, m12, m02]),
                ]
            )
        corners = refined
    bary = np.concatenate([base.barycentric @ c for c in corners])
    weights = np.tile(base.weights / len(corners), len(corners))
    return TriangleRule(bary, weights)


def static_potential_integrals(points: np.ndarray, vertices: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Analytic integrals over flat triangles of 1/R and of (r' - rho)/R.

    ``points`` is (M, 3) and ``vertices`` is (M, 3, 3); point m is paired with
    triangle m. ``rho`` is the projection of the point onto the triangle plane.
    Returns (I0 of shape (M,), I1 of shape (M, 3)). Points may lie in the plane,
    on an edge or on a vertex of the triangle.
    """
    points = np.asarray(points, dtype=float)
    vertices = np.asarray(vertices, dtype=float)
    normal = np.cross(vertices[:, 1] - vertices[:, 0], vertices[:, 2] - vertices[:, 0])
    normal /= np.linalg.norm(normal, axis=1, keepdims=True)
    d = np.einsum("md,md->m", points - vertices[:, 0], normal)
    rho = points - d[:, None] * normal
    abs_d = np.abs(d)
    scale = np.linalg.norm(vertices[:, 1] - vertices[:, 0], axis=1)
    tiny = 1e-12 * scale

    i0 = np.zeros(len(points))
    i1 = np.zeros((len(points), 3))
    for e in range(3):
        start = vertices[:, e]
        end = vertices[:, (e + 1) % 3]
        edge = end - start
        l_hat = edge / np.linalg.norm(edge, axis=1, keepdims=True)
        u_hat = np.cross(l_hat, normal)
        t0 = np.einsum("md,md->m", start - rho, u_hat)
        l_minus = np.einsum("md,md->m", start - rho, l_hat)
        l_plus = np.einsum("md,md->m", end - rho, l_hat)
        r0_sq = t0 * t0 + d * d
        r_minus = np.sqrt(r0_sq + l_minus * l_minus)
        r_plus = np.sqrt(r0_sq + l_plus * l_plus)

        on_line = np.sqrt(r0_sq) <= tiny
        safe_r0_sq = np.where(on_line, 1.0, r0_sq)
        # R + l loses all digits when l < 0 and the point is close to the edge line
        with np.errstate(divide="ignore", invalid="ignore"):
            num = np.where(l_plus >= 0.0, r_plus + l_plus, safe_r0_sq / (r_plus - l_plus))
            den = np.where(l_minus >= 0.0, r_minus + l_minus, safe_r0_sq / (r_minus - l_minus))
            log_term = np.log(num / den)
        log_term = np.where(on_line, 0.0, log_term)

        atan_term = np.arctan2(t0 * l_plus, r0_sq + abs_d * r_plus) - np.arctan2(
            t0 * l_minus, r0_sq + abs_d * r_minus
        )
        i0 += t0 * log_term - abs_d * atan_term
        i1 += 0.5 * u_hat * (r0_sq * log_term + l_plus * r_plus - l_minus * r_minus)[:, None]
    return i0, i1
