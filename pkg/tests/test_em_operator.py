import numpy as np
import pytest

from hpscatter.em_operator import (
    EmOperator,
    Formulation,
    Medium,
    OperatorConfig,
    Polarization,
    assemble_block,
    cfie_entry,
    efie_entry,
    grad_green,
    green,
    incident_fields,
    mfie_entry,
    plane_wave_rhs,
)
from hpscatter.errors import FormulationError, GeometryDomainError
from hpscatter.geometry import build_rwg, make_cube, make_geodesic_sphere, make_plate
from hpscatter.quadrature import static_potential_integrals, subdivided_rule

EFIE = OperatorConfig(formulation=Formulation.EFIE)
MFIE = OperatorConfig(formulation=Formulation.MFIE)


def brute_force_entry(basis, m, n, medium, kind, levels=2):
    """Galerkin entry by direct double quadrature on refined rules"""
    mesh = basis.mesh
    rule = subdivided_rule(7, levels)
    vertices = mesh.vertices()
    areas = mesh.triangle_areas()
    normals = mesh.triangle_normals()
    coefficients = basis.coefficients()
    k, omega = medium.wavenumber, medium.omega
    total = 0.0j
    for s in range(2):
        tm = basis.triangles[m, s]
        x = rule.points(vertices[tm])
        fm = coefficients[m, s] * (x - mesh.nodes[basis.free_vertices[m, s]])
        wx = rule.weights * areas[tm]
        for t in range(2):
            tn = basis.triangles[n, t]
            y = rule.points(vertices[tn])
            fn = coefficients[n, t] * (y - mesh.nodes[basis.free_vertices[n, t]])
            wy = rule.weights * areas[tn]
            w = wx[:, None] * wy[None, :]
            if kind == "efie":
                g = green(x[:, None, :], y[None, :, :], k)
                vector = np.sum(w * g * (fm @ fn.T))
                scalar = np.sum(w * g) * 4.0 * coefficients[m, s] * coefficients[n, t]
                total += 1j * omega * medium.mu * vector - 1j / (omega * medium.epsilon) * scalar
            else:
                grad = grad_green(x[:, None, :], y[None, :, :], k)
                inner = np.cross(fn[None, :, :], grad)
                rotated = np.cross(normals[tm], inner)
                total -= np.sum(w * np.einsum("ad,abd->ab", fm, rotated))
    return total


def self_term_by_extraction(basis, m, medium, outer_levels=4, inner_levels=3):
    """Z_mm with the static 1/R part integrated analytically and the remainder on fine rules"""
    mesh = basis.mesh
    vertices = mesh.vertices()
    areas = mesh.triangle_areas()
    normals = mesh.triangle_normals()
    coefficients = basis.coefficients()
    outer = subdivided_rule(7, outer_levels)
    inner = subdivided_rule(7, inner_levels)
    k, omega = medium.wavenumber, medium.omega
    total = 0.0j
    for s in range(2):
        tm = basis.triangles[m, s]
        cm = coefficients[m, s]
        x = outer.points(vertices[tm])
        fm = cm * (x - mesh.nodes[basis.free_vertices[m, s]])
        wx = outer.weights * areas[tm]
        for t in range(2):
            tn = basis.triangles[m, t]
            cn = coefficients[m, t]
            free = mesh.nodes[basis.free_vertices[m, t]]
            i0, i1 = static_potential_integrals(x, np.repeat(vertices[tn][None], len(x), axis=0))
            rho = x - np.outer((x - vertices[tn][0]) @ normals[tn], normals[tn])
            static_vector = cn * (i1 + (rho - free) * i0[:, None])

            y = inner.points(vertices[tn])
            wy = inner.weights * areas[tn]
            dist = np.linalg.norm(x[:, None, :] - y[None, :, :], axis=-1)
            safe = np.where(dist > 0.0, dist, 1.0)
            remainder = np.where(dist > 0.0, (np.exp(-1j * k * safe) - 1.0) / safe, -1j * k) * wy
            smooth_vector = remainder @ (cn * (y - free))

            vector = np.sum(wx * np.einsum("qd,qd->q", fm, static_vector + smooth_vector)) / (4.0 * np.pi)
            scalar = 4.0 * cm * cn * np.sum(wx * (i0 + remainder.sum(axis=1))) / (4.0 * np.pi)
            total += 1j * omega * medium.mu * vector - 1j / (omega * medium.epsilon) * scalar
    return total


# ---------------------------------------------------------------------------
# Kernel
# ---------------------------------------------------------------------------


def test_green_static_limit():
    assert np.isclose(green([1.0, 0.0, 0.0], [0.0, 0.0, 0.0], 0.0), 1.0 / (4.0 * np.pi))


def test_green_half_wavelength():
    value = green([0.5, 0.0, 0.0], [0.0, 0.0, 0.0], 2.0 * np.pi)
    assert np.isclose(value, -0.1591549, atol=1e-7)


def test_green_symmetry_and_decay(rng):
    r = rng.standard_normal((20, 3))
    r_src = rng.standard_normal((20, 3))
    k = 3.7
    assert np.allclose(green(r, r_src, k), green(r_src, r, k))
    dist = np.linalg.norm(r - r_src, axis=1)
    assert np.allclose(np.abs(green(r, r_src, k)) * 4.0 * np.pi * dist, 1.0)


def test_green_rejects_coincident_points():
    with pytest.raises(GeometryDomainError):
        green([0.1, 0.2, 0.3], [0.1, 0.2, 0.3], 1.0)
    with pytest.raises(GeometryDomainError):
        grad_green([0.1, 0.2, 0.3], [0.1, 0.2, 0.3], 1.0)


def test_grad_green_static_magnitude_and_antisymmetry():
    g = grad_green([0.0, 0.0, 1.0], [0.0, 0.0, 0.0], 0.0)
    assert np.isclose(np.linalg.norm(g), 1.0 / (4.0 * np.pi))
    a, b = np.array([0.3, -0.2, 0.1]), np.array([-0.4, 0.5, 0.2])
    assert np.allclose(grad_green(a, b, 2.0), -grad_green(b, a, 2.0))


def test_grad_green_matches_finite_differences():
    r = np.array([0.7, 0.0, 0.0])
    r_src = np.zeros(3)
    k = 2.0 * np.pi
    h = 1e-6 * 0.7
    analytic = grad_green(r, r_src, k)
    for axis in range(3):
        step = np.zeros(3)
        step[axis] = h
        numeric = (green(r, r_src + step, k) - green(r, r_src - step, k)) / (2.0 * h)
        assert abs(numeric - analytic[axis]) <= 1e-6 * np.abs(analytic).max()


def test_incident_field_is_a_unit_transverse_wave(medium):
    points = np.array([[0.1, 0.2, 0.3], [-0.4, 0.0, 0.2]])
    direction = (0.6, 1.1)
    for pol in Polarization:
        e, h = incident_fields(points, direction, pol, medium)
        r_hat = np.array([np.sin(0.6) * np.cos(1.1), np.sin(0.6) * np.sin(1.1), np.cos(0.6)])
        assert np.allclose(np.linalg.norm(e, axis=1), 1.0)
        assert np.allclose(e @ r_hat, 0.0)
        assert np.allclose(h, np.cross(-r_hat, e) / medium.impedance)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def test_medium_relations():
    medium = Medium.free_space(1e9)
    assert np.isclose(medium.wavenumber, medium.omega * np.sqrt(medium.mu * medium.epsilon))
    assert np.isclose(medium.impedance, 376.730313, rtol=1e-6)
    assert np.isclose(medium.wavelength, 0.299792458, rtol=1e-8)
    with pytest.raises(ValueError):
        Medium.free_space(0.0)


def test_open_surface_formulations(medium):
    basis = build_rwg(make_plate(1.0, 2))
    with pytest.raises(FormulationError):
        EmOperator(basis, medium, MFIE)
    with pytest.raises(FormulationError):
        EmOperator(basis, medium, OperatorConfig(alpha=0.5))
    forced = EmOperator(basis, medium, OperatorConfig(alpha=1.0))
    assert forced.config.formulation is Formulation.EFIE
    efie = EmOperator(basis, medium, EFIE)
    with pytest.raises(FormulationError):
        efie.mfie_block([0], [0])


def test_alpha_range():
    with pytest.raises(FormulationError):
        OperatorConfig(alpha=1.5)


# ---------------------------------------------------------------------------
# Matrix entries
# ---------------------------------------------------------------------------


def test_efie_matrix_is_complex_symmetric(cube_basis, medium):
    z = EmOperator(cube_basis, medium, EFIE).dense()
    assert np.all(np.isfinite(z))
    assert np.abs(z - z.T).max() <= 1e-8 * np.abs(z).max()


def test_efie_entry_symmetry_for_separated_bases(cube_basis, medium):
    centroids = cube_basis.centroids
    m = int(np.argmin(centroids.sum(axis=1)))
    n = int(np.argmax(centroids.sum(axis=1)))
    a = efie_entry(m, n, cube_basis, medium)
    b = efie_entry(n, m, cube_basis, medium)
    assert abs(a - b) <= 1e-10 * abs(a)


def test_regular_rule_converged_for_distant_bases():
    medium = Medium.free_space(150e6)
    basis = build_rwg(make_plate(1.0, 8))
    default = EmOperator(basis, medium, OperatorConfig(formulation=Formulation.EFIE))
    refined = EmOperator(basis, medium, OperatorConfig(formulation=Formulation.EFIE, regular_levels=2))
    centroids = basis.centroids
    rows = np.flatnonzero(centroids[:, 0] + centroids[:, 1] < -0.6)
    cols = np.flatnonzero(centroids[:, 0] + centroids[:, 1] > 0.6)
    assert len(rows) and len(cols)
    a = default.block(rows, cols)
    b = refined.block(rows, cols)
    assert np.abs(a - b).max() <= 1e-3 * np.abs(b).max()


def test_efie_matches_brute_force_for_distant_bases():
    medium = Medium.free_space(150e6)
    basis = build_rwg(make_plate(1.0, 8))
    centroids = basis.centroids
    m = int(np.argmin(centroids[:, 0] + centroids[:, 1]))
    n = int(np.argmax(centroids[:, 0] + centroids[:, 1]))
    value = efie_entry(m, n, basis, medium, OperatorConfig(regular_order=7))
    oracle = brute_force_entry(basis, m, n, medium, "efie")
    assert abs(value - oracle) <= 1e-3 * abs(oracle)


def test_mfie_matches_brute_force_on_opposite_faces():
    medium = Medium.free_space(50e6)
    basis = build_rwg(make_cube(1.0, 4))
    centroids = basis.centroids
    inside = (np.abs(centroids[:, 0]) < 0.45) & (np.abs(centroids[:, 1]) < 0.45)
    top = np.flatnonzero(inside & np.isclose(centroids[:, 2], 0.5))
    bottom = np.flatnonzero(inside & np.isclose(centroids[:, 2], -0.5))
    moments = first_moments(basis)
    cfg = OperatorConfig(formulation=Formulation.MFIE, regular_order=7)
    for m in (top[0], top[len(top) // 2]):
        # partner with the most parallel first moment so the entry does not cancel
        n = bottom[np.argmax(np.abs(moments[bottom] @ moments[m]))]
        value = mfie_entry(int(m), int(n), basis, medium, cfg)
        oracle = brute_force_entry(basis, int(m), int(n), medium, "mfie")
        assert abs(value - oracle) <= 1e-3 * abs(oracle)


def test_mfie_identity_term_is_half_the_gram(cube_basis, medium):
    op = EmOperator(cube_basis, medium, MFIE)
    t = np.arange(cube_basis.mesh.n_triangles)
    mfie = op.pair_matrices(t, t, 0.0, 1.0)
    gram = op.pair_matrices(t, t, 0.0, 0.0, gram_weight=1.0)
    assert np.allclose(mfie, 0.5 * gram, rtol=1e-12, atol=1e-15)


def test_gram_matrix_is_exact(cube_basis, medium):
    op = EmOperator(cube_basis, medium, EFIE)
    gram = op.gram_block(np.arange(cube_basis.n), np.arange(cube_basis.n))
    assert np.allclose(gram, gram.T)
    assert np.all(np.linalg.eigvalsh(gram.real) > 0)
    # overlap of a function with itself by a fine rule
    m = 5
    mesh = cube_basis.mesh
    rule = subdivided_rule(7, 2)
    total = 0.0
    for s in range(2):
        t = cube_basis.triangles[m, s]
        x = rule.points(mesh.vertices()[t])
        f = cube_basis.coefficients()[m, s] * (x - mesh.nodes[cube_basis.free_vertices[m, s]])
        total += np.sum(rule.weights * mesh.triangle_areas()[t] * np.einsum("qd,qd->q", f, f))
    assert np.isclose(gram[m, m].real, total, rtol=1e-12)


def test_self_terms_match_singularity_extraction_oracle():
    medium = Medium.free_space(150e6)
    basis = build_rwg(make_plate(0.5, 5))
    op = EmOperator(basis, medium, EFIE)
    for m in (0, basis.n // 2, basis.n - 1):
        value = op.efie_block([m], [m])[0, 0]
        oracle = self_term_by_extraction(basis, m, medium)
        assert abs(value - oracle) <= 1e-4 * abs(oracle)


@pytest.mark.parametrize("alpha", [0.0, 0.25, 0.5, 1.0])
def test_cfie_is_linear_in_alpha(alpha, medium):
    basis = build_rwg(make_cube(0.3, 1))
    op = EmOperator(basis, medium, OperatorConfig(alpha=alpha))
    idx = np.arange(basis.n)
    expected = alpha * op.efie_block(idx, idx) + medium.impedance * (1.0 - alpha) * op.mfie_block(idx, idx)
    assert np.allclose(op.block(idx, idx), expected, rtol=1e-12, atol=1e-12 * np.abs(expected).max())


def test_cfie_entry_limits(medium):
    basis = build_rwg(make_cube(0.3, 1))
    assert np.isclose(cfie_entry(2, 7, basis, medium, OperatorConfig(alpha=1.0)), efie_entry(2, 7, basis, medium))
    assert np.isclose(
        cfie_entry(2, 7, basis, medium, OperatorConfig(alpha=0.0)),
        medium.impedance * mfie_entry(2, 7, basis, medium),
    )


def test_assemble_block_requests(cube_basis, medium):
    cfg = OperatorConfig()
    single = assemble_block([3], [11], cube_basis, medium, cfg)
    assert single.shape == (1, 1)
    assert np.isclose(single[0, 0], cfie_entry(3, 11, cube_basis, medium, cfg))
    row = assemble_block([3], np.arange(cube_basis.n), cube_basis, medium, cfg)
    column = assemble_block(np.arange(cube_basis.n), [11], cube_basis, medium, cfg)
    assert row.shape == (1, cube_basis.n) and column.shape == (cube_basis.n, 1)
    assert np.isclose(row[0, 11], column[3, 0])
    with pytest.raises(ValueError):
        assemble_block([], [1], cube_basis, medium, cfg)


def test_efie_blocks_on_disjoint_clusters_are_transposes(cube_basis, medium):
    op = EmOperator(cube_basis, medium, EFIE)
    left = np.flatnonzero(cube_basis.centroids[:, 0] < 0)
    right = np.flatnonzero(cube_basis.centroids[:, 0] > 0)
    a = op.block(left, right)
    b = op.block(right, left)
    assert np.abs(a - b.T).max() <= 1e-10 * np.abs(a).max()


def test_dense_matches_entry_loop(medium):
    basis = build_rwg(make_cube(0.3, 1))
    op = EmOperator(basis, medium, OperatorConfig())
    dense = op.dense()
    loop = np.array([[op.block([m], [n])[0, 0] for n in range(basis.n)] for m in range(basis.n)])
    assert np.allclose(dense, loop, rtol=1e-12, atol=1e-12 * np.abs(dense).max())


# ---------------------------------------------------------------------------
# Excitation
# ---------------------------------------------------------------------------


def first_moments(basis):
    """int f_m dS = (l/2) [(c+ - p+) - (c- - p-)]"""
    mesh = basis.mesh
    centroids = mesh.triangle_centroids()
    plus = centroids[basis.triangles[:, 0]] - mesh.nodes[basis.free_vertices[:, 0]]
    minus = centroids[basis.triangles[:, 1]] - mesh.nodes[basis.free_vertices[:, 1]]
    return 0.5 * basis.lengths[:, None] * (plus - minus)


def test_static_rhs_matches_first_moment():
    medium = Medium.free_space(1e-3)
    basis = build_rwg(make_cube(0.5, 2))
    b = plane_wave_rhs((0.0, 0.0), Polarization.VV, basis, medium, EFIE)
    expected = first_moments(basis) @ np.array([1.0, 0.0, 0.0])
    assert np.allclose(b, expected, rtol=1e-8, atol=1e-8 * np.abs(expected).max())


def test_plate_normal_incidence_polarizations(medium):
    basis = build_rwg(make_plate(1.0, 3))
    moments = first_moments(basis)
    vv = plane_wave_rhs((0.0, 0.0), Polarization.VV, basis, medium, EFIE)
    hh = plane_wave_rhs((0.0, 0.0), Polarization.HH, basis, medium, EFIE)
    assert np.allclose(vv, moments[:, 0], atol=1e-12)
    assert np.allclose(hh, moments[:, 1], atol=1e-12)
    # the rotated field tests the rotated geometry: |b_VV| = |b_HH| on a square plate
    assert np.isclose(np.linalg.norm(vv), np.linalg.norm(hh))


def test_mirrored_incidence_has_equal_rhs_norm(medium):
    basis = build_rwg(make_geodesic_sphere(0.4, 2))
    theta, phi = 0.7, 0.4
    first = plane_wave_rhs((theta, phi), Polarization.VV, basis, medium, EFIE)
    mirrored = plane_wave_rhs((np.pi - theta, phi + np.pi), Polarization.VV, basis, medium, EFIE)
    assert np.isclose(np.linalg.norm(first), np.linalg.norm(mirrored), rtol=1e-8)


def test_cfie_rhs_is_the_weighted_sum(small_sphere, medium):
    basis = build_rwg(small_sphere)
    direction = (0.3, 1.2)
    cfie = EmOperator(basis, medium, OperatorConfig(alpha=0.5)).rhs(direction, Polarization.HH)
    efie = EmOperator(basis, medium, EFIE).rhs(direction, Polarization.HH)
    mfie = EmOperator(basis, medium, MFIE).rhs(direction, Polarization.HH)
    assert np.allclose(cfie, 0.5 * efie + 0.5 * mfie)
