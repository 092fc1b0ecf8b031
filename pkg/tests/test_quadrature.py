import math

import numpy as np
import pytest

from hpscatter.quadrature import static_potential_integrals, subdivided_rule, triangle_rule

REFERENCE = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


def monomial_integral(a, b):
    """Exact integral of x^a y^b over the reference triangle"""
    return math.factorial(a) * math.factorial(b) / math.factorial(a + b + 2)


def integrate(rule, f):
    points = rule.points(REFERENCE)
    return 0.5 * np.sum(rule.weights * f(points[:, 0], points[:, 1]))


@pytest.mark.parametrize("order, degree", [(1, 1), (3, 2), (7, 5)])
def test_rules_exact_to_their_degree(order, degree):
    rule = triangle_rule(order)
    assert rule.size == order
    assert np.isclose(rule.weights.sum(), 1.0)
    for a in range(degree + 1):
        for b in range(degree + 1 - a):
            value = integrate(rule, lambda x, y: x**a * y**b)
            assert np.isclose(value, monomial_integral(a, b), rtol=1e-12, atol=1e-15)


def test_unsupported_rule():
    with pytest.raises(ValueError):
        triangle_rule(4)


def test_subdivided_rule_keeps_exactness():
    rule = subdivided_rule(7, 2)
    assert rule.size == 7 * 16
    assert np.isclose(rule.weights.sum(), 1.0)
    assert np.isclose(integrate(rule, lambda x, y: x**3 * y**2), monomial_integral(3, 2), rtol=1e-12)
    # points stay inside the triangle
    assert np.all(rule.barycentric >= -1e-15)
    assert np.allclose(rule.barycentric.sum(axis=1), 1.0)


def test_points_map_batches_of_triangles():
    rule = triangle_rule(3)
    shifted = REFERENCE + np.array([2.0, 0.0, 1.0])
    points = rule.points(np.stack([REFERENCE, shifted]))
    assert points.shape == (2, 3, 3)
    assert np.allclose(points[1] - points[0], [2.0, 0.0, 1.0])


def test_static_integral_from_a_vertex():
    i0, i1 = static_potential_integrals(np.zeros((1, 3)), REFERENCE[None])
    assert np.isclose(i0[0], math.sqrt(2.0) * math.log(1.0 + math.sqrt(2.0)), rtol=1e-12)
    assert np.all(np.isfinite(i1))


@pytest.mark.parametrize("point", [[0.3, 0.2, 0.5], [1.2, -0.4, 0.5], [0.25, 0.25, -0.7]])
def test_static_integrals_against_fine_quadrature(point):
    point = np.array(point)
    i0, i1 = static_potential_integrals(point[None], REFERENCE[None])

    rule = subdivided_rule(7, 5)
    samples = rule.points(REFERENCE)
    rho = np.array([point[0], point[1], 0.0])
    distance = np.linalg.norm(samples - point, axis=1)
    weights = 0.5 * rule.weights
    assert np.isclose(i0[0], np.sum(weights / distance), rtol=1e-6)
    assert np.allclose(i1[0], np.sum(weights[:, None] * (samples - rho) / distance[:, None], axis=0), rtol=1e-6, atol=1e-9)


def test_static_integral_continuous_onto_the_plane():
    above = np.array([[0.3, 0.3, 1e-9]])
    inside = np.array([[0.3, 0.3, 0.0]])
    i0_above, _ = static_potential_integrals(above, REFERENCE[None])
    i0_inside, _ = static_potential_integrals(inside, REFERENCE[None])
    assert np.isclose(i0_above[0], i0_inside[0], rtol=1e-6)
