import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from canalshape.geometry import build_mesh, canal_geometry, sphere_geometry
from canalshape.potentials import (
    CauchyDatum,
    DataMismatchError,
    Density,
    apply_A,
    calibrate,
    eval_U,
    eval_V,
    jump_convention,
    jump_equation_residual,
    neumann_trace_V,
    read_datum,
    stack_data,
    write_datum,
)


@pytest.fixture(scope="module")
def shell():
    """Unit sphere, 32 x 16 midpoint mesh, unit density, Laplace kernel."""
    mesh = build_mesh(sphere_geometry(1.0).membrane, 16, 32, "midpoint-tensor")
    return Density(np.ones(mesh.n_nodes), mesh)


@pytest.fixture(scope="module")
def wall_mesh():
    return build_mesh(canal_geometry().wall, 8, 8, order=3)


def smooth_density(mesh):
    t, v = mesh.uv[:, 0], mesh.uv[:, 1]
    return Density((1 + 0.5 * np.cos(2 * np.pi * v)) * np.sin(np.pi * t) + 0.3j * t, mesh)


# ---------------------------------------------------------------------------
# data types and calibration
# ---------------------------------------------------------------------------
def test_calibrated_convention():
    conv = jump_convention()
    assert (conv.sigma_jump, conv.double_sign) == (1, -1)
    assert (conv.u_coeff, conv.a_coeff) == (2.0, 1.0)
    assert conv.relation == "H = 2 U_N + 1 A H"


def test_calibration_is_insensitive_to_resolution():
    conv = calibrate(3, 6, 2)
    assert (conv.sigma_jump, conv.double_sign) == (1, -1)


def test_datum_requires_nonzero_f(wall_mesh):
    with pytest.raises(ValueError):
        CauchyDatum(1.0, np.zeros(wall_mesh.n_nodes), np.ones(wall_mesh.n_nodes), wall_mesh)


def test_datum_and_density_lengths(wall_mesh):
    with pytest.raises(DataMismatchError):
        CauchyDatum(1.0, np.ones(3), np.ones(3), wall_mesh)
    with pytest.raises(DataMismatchError):
        Density(np.ones(3), wall_mesh)


# ---------------------------------------------------------------------------
# U
# ---------------------------------------------------------------------------
def test_eval_U_is_linear_in_the_data(wall_mesh):
    # a datum with f = 0 cannot be built, so the zero case follows from linearity
    rng = np.random.default_rng(2)
    n = wall_mesh.n_nodes
    d = CauchyDatum(1.0, rng.standard_normal(n), rng.standard_normal(n), wall_mesh)
    x = [[0.0, 0.0, 1.0], [0.05, 0.1, 2.0]]
    u = eval_U(d, x)
    np.testing.assert_allclose(eval_U(d.scaled(0.5 - 2j), x), (0.5 - 2j) * u, rtol=1e-13)
    np.testing.assert_allclose(eval_U(d.scaled(1e-300), x), 0.0, atol=1e-290)


def _radial_datum(res, k=0.4):
    mesh = build_mesh(sphere_geometry(1.0).membrane, res, 2 * res, order=3)
    n = mesh.n_nodes
    return CauchyDatum(k, np.full(n, math.sin(k)), np.full(n, k * math.cos(k) - math.sin(k)), mesh)


def test_green_identity_reproduces_interior_solution():
    k = 0.4
    d = _radial_datum(6, k)
    x = np.array([[0.1, 0.2, -0.3], [0.0, 0.0, 0.5], [-0.4, 0.3, 0.2]])
    r = np.linalg.norm(x, axis=1)
    exact = np.sin(k * r) / r
    np.testing.assert_allclose(eval_U(d, x), exact, rtol=1e-2)


def _plane_wave_datum(res, k=1.0):
    mesh = build_mesh(sphere_geometry(1.0).membrane, res, 2 * res, order=2)
    d = np.array([0.0, 0.6, 0.8])
    u = np.exp(1j * k * mesh.nodes @ d)
    return CauchyDatum(k, u, 1j * k * (mesh.normals @ d) * u, mesh)


def test_eval_U_self_convergence():
    x = np.array([[0.3, -0.2, 0.4]])
    vals = [eval_U(_plane_wave_datum(n), x)[0] for n in (2, 4, 8)]
    change = [abs(vals[1] - vals[0]), abs(vals[2] - vals[1])]
    assert change[1] < 0.25 * change[0], change
    exact = np.exp(1j * x[0] @ np.array([0.0, 0.6, 0.8]))
    assert abs(vals[2] - exact) < 2 * change[1]


def test_eval_U_refuses_points_on_F():
    d = _radial_datum(2)
    with pytest.raises(ValueError):
        eval_U(d, d.mesh.nodes[:1])


# ---------------------------------------------------------------------------
# V and A
# ---------------------------------------------------------------------------
def test_zero_density_gives_zero(wall_mesh):
    H = Density(np.zeros(wall_mesh.n_nodes), wall_mesh)
    assert np.all(eval_V(H, [[0.0, 0.0, 1.0]], 1.0) == 0)
    assert np.all(apply_A(H, 1.0) == 0)
    assert np.all(neumann_trace_V(H, 1.0) == 0)


def test_shell_theorem_inside_outside_and_on(shell):
    inside = eval_V(shell, [[0.1, 0.2, 0.3], [0.0, -0.5, 0.0]], 0.0)
    np.testing.assert_allclose(inside, 1.0, rtol=1e-2)
    rho = np.array([1.5, 2.0, 3.0])
    outside = eval_V(shell, np.column_stack([np.zeros(3), np.zeros(3), rho]), 0.0)
    np.testing.assert_allclose(outside, 1.0 / rho, rtol=1e-2)
    on = eval_V(shell, shell.mesh.nodes[:20], 0.0)
    np.testing.assert_allclose(on, 1.0, rtol=1e-2)


def test_A_of_constant_on_sphere(shell):
    np.testing.assert_allclose(apply_A(shell, 0.0), -1.0, atol=1e-2)


def test_interior_neumann_trace_vanishes_for_uniform_shell(shell):
    assert np.max(np.abs(neumann_trace_V(shell, 0.0))) < 0.02


LINEARITY_MESH = build_mesh(canal_geometry().wall, 3, 4, order=2)


@settings(max_examples=8)
@given(st.complex_numbers(max_magnitude=10, allow_nan=False, allow_infinity=False),
       st.complex_numbers(max_magnitude=10, allow_nan=False, allow_infinity=False))
def test_layer_operators_are_linear(a, b):
    mesh = LINEARITY_MESH
    rng = np.random.default_rng(0)
    h1, h2 = rng.standard_normal((2, mesh.n_nodes))
    H1, H2, H12 = (Density(h, mesh) for h in (h1, h2, a * h1 + b * h2))
    scale = np.max(np.abs(apply_A(H1, 1.0))) * (abs(a) + abs(b) + 1)
    np.testing.assert_allclose(apply_A(H12, 1.0), a * apply_A(H1, 1.0) + b * apply_A(H2, 1.0),
                               atol=1e-12 * scale)
    x = [[0.05, 0.0, 1.0]]
    np.testing.assert_allclose(eval_V(H12, x, 1.0), a * eval_V(H1, x, 1.0) + b * eval_V(H2, x, 1.0),
                               atol=1e-12 * scale)


def _one_sided(H, nodes, normals, eps, k, side):
    a = eval_V(H, nodes + side * eps * normals, k)
    b = eval_V(H, nodes + 2 * side * eps * normals, k)
    return side * (b - a) / eps


def test_neumann_trace_against_off_surface_differences(wall_mesh):
    k = 1.0
    H = smooth_density(wall_mesh)
    eps = 1e-3 * canal_geometry().diameter
    sel = np.flatnonzero((wall_mesh.uv[:, 0] > 0.3) & (wall_mesh.uv[:, 0] < 0.7))[::7]
    x, n = wall_mesh.nodes[sel], wall_mesh.normals[sel]
    inner = _one_sided(H, x, n, eps, k, -1)
    outer = _one_sided(H, x, n, eps, k, +1)
    trace = neumann_trace_V(H, k)[sel]
    scale = np.max(np.abs(trace))
    assert np.max(np.abs(inner - trace)) < 0.02 * scale
    # exterior minus interior trace is -H with the calibrated sign
    assert np.max(np.abs((outer - inner) + H.values[sel])) < 0.02 * np.max(np.abs(H.values[sel]))


def test_single_layer_is_continuous_across_G(wall_mesh):
    H = smooth_density(wall_mesh)
    sel = np.flatnonzero((wall_mesh.uv[:, 0] > 0.3) & (wall_mesh.uv[:, 0] < 0.7))[::11]
    x, n = wall_mesh.nodes[sel], wall_mesh.normals[sel]
    on = eval_V(H, x, 1.0)
    for eps in (1e-3, 1e-4):
        jump = eval_V(H, x + eps * n, 1.0) - eval_V(H, x - eps * n, 1.0)
        assert np.max(np.abs(jump)) < 0.01 * np.max(np.abs(on))


# ---------------------------------------------------------------------------
# density equation
# ---------------------------------------------------------------------------
def test_jump_residual_is_linear_in_data(wall_mesh):
    geo = canal_geometry()
    F = build_mesh(geo.membrane, 2, 4, order=2)
    rng = np.random.default_rng(3)
    d = CauchyDatum(1.0, rng.standard_normal(F.n_nodes), rng.standard_normal(F.n_nodes), F)
    H = smooth_density(wall_mesh)
    c = 0.7 - 1.3j
    r = jump_equation_residual(H, d)
    rc = jump_equation_residual(Density(c * H.values, wall_mesh), d.scaled(c))
    np.testing.assert_allclose(rc, c * r, atol=1e-12 * np.max(np.abs(r)))


def test_zero_density_and_vanishing_field_give_zero_residual(wall_mesh):
    F = build_mesh(canal_geometry().membrane, 2, 4, order=2)
    d = CauchyDatum(1.0, np.ones(F.n_nodes), np.ones(F.n_nodes), F).scaled(1e-300)
    H0 = Density(np.zeros(wall_mesh.n_nodes), wall_mesh)
    np.testing.assert_allclose(jump_equation_residual(H0, d), 0.0, atol=1e-290)


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------
@pytest.mark.parametrize("suffix", [".csv", ".json"])
def test_datum_file_round_trip(tmp_path, suffix):
    mesh = build_mesh(canal_geometry().membrane, 2, 4, order=2)
    rng = np.random.default_rng(5)
    d = CauchyDatum(0.8, rng.standard_normal(mesh.n_nodes) + 1j * rng.standard_normal(mesh.n_nodes),
                    rng.standard_normal(mesh.n_nodes) + 0j, mesh, {"seed": 5})
    path = write_datum(d, tmp_path / ("d" + suffix), {"note": "x"})
    back = read_datum(path, mesh)
    assert back.k == d.k and back.provenance == {"seed": 5}
    np.testing.assert_array_equal(back.f_values, d.f_values)
    np.testing.assert_array_equal(back.h_values, d.h_values)


def test_datum_file_with_other_mesh_is_rejected(tmp_path):
    geo = canal_geometry()
    a = build_mesh(geo.membrane, 2, 4, order=2)
    b = build_mesh(geo.membrane, 2, 4, order=3)
    path = write_datum(CauchyDatum(1.0, np.ones(a.n_nodes), np.ones(a.n_nodes), a), tmp_path / "d.csv")
    with pytest.raises(DataMismatchError):
        read_datum(path, b)


def test_stacking_requires_common_k_and_mesh():
    geo = canal_geometry()
    a = build_mesh(geo.membrane, 2, 4, order=2)
    d1 = CauchyDatum(1.0, np.ones(a.n_nodes), np.ones(a.n_nodes), a)
    d2 = CauchyDatum(1.1, np.ones(a.n_nodes), np.ones(a.n_nodes), a)
    assert stack_data([d1, d1])[0] == 1.0
    with pytest.raises(DataMismatchError):
        stack_data([d1, d2])
    with pytest.raises(ValueError):
        stack_data([])
