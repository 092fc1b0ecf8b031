import numpy as np

from hpscatter.geometry import TriangleMesh, make_cube
from hpscatter.pipeline import ScatteringPipeline
from hpscatter.postprocess import PlaneWave, bistatic_rcs, compare_curves
from hpscatter.settings import RunConfig

ANGLES = np.arange(0.0, 181.0, 10.0)


def cube_pipeline(mesh, side, **changes):
    config = RunConfig(geometry="cube", side=side, frequency=300e6, **changes).validate()
    return ScatteringPipeline(config, mesh).initialize()


def bistatic_curve(p, wave):
    x, _ = p.solve(p.rhs(wave.theta_deg, wave.phi_deg, wave.polarization))
    return bistatic_rcs(x, p.basis, p.medium, ANGLES, wave)


def quarter_turn(mesh):
    """Rotate by 90 degrees about z: (x, y, z) -> (-y, x, z)"""
    x, y, z = mesh.nodes.T
    return TriangleMesh(np.column_stack([-y, x, z]), mesh.triangles)


def test_rcs_follows_a_quarter_turn_of_the_cube(cube_mesh):
    before = bistatic_curve(cube_pipeline(cube_mesh, 0.3), PlaneWave(30.0, 20.0))
    after = bistatic_curve(cube_pipeline(quarter_turn(cube_mesh), 0.3), PlaneWave(30.0, 110.0))
    assert np.allclose(after.rcs_dbsm, before.rcs_dbsm, atol=1e-6)


def test_rcs_is_invariant_under_translation(cube_mesh):
    moved = TriangleMesh(cube_mesh.nodes + np.array([1.3, -0.4, 2.1]), cube_mesh.triangles)
    wave = PlaneWave(40.0, 10.0)
    before = bistatic_curve(cube_pipeline(cube_mesh, 0.3), wave)
    after = bistatic_curve(cube_pipeline(moved, 0.3), wave)
    assert np.allclose(after.rcs_dbsm, before.rcs_dbsm, atol=1e-6)


def test_two_term_series_agrees_with_gmres():
    p = cube_pipeline(make_cube(1.5, 5), 1.5)
    assert len(p.hmatrix.far) > 0
    wave = PlaneWave(30.0, 20.0)
    b = p.rhs(wave.theta_deg, wave.phi_deg, wave.polarization)
    x_series, report = p.solve(b)
    assert report.terms == 2
    x_gmres = p.solve_gmres(b).x
    series = bistatic_rcs(x_series, p.basis, p.medium, ANGLES, wave)
    gmres = bistatic_rcs(x_gmres, p.basis, p.medium, ANGLES, wave)
    assert compare_curves(series, gmres)["max_abs_db"] <= 0.5

