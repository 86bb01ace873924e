import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from canalshape.forward import (
    ConstantExcitation,
    InadmissibleWavenumberError,
    InverseCrimeError,
    MeshSpec,
    make_synthetic,
)
from canalshape.inverse import (
    InverseOptions,
    InverseState,
    ResidualModel,
    ShapeParametrization,
    StepSizeError,
    damped_step,
    full_jacobian,
    gauss_newton_step,
    projected_residual,
    radial_error,
    reconstruct,
    shape_jacobian,
    write_history,
)
from canalshape.potentials import CauchyDatum, DataMismatchError

from conftest import K, RADIUS, SMALL_MESH

ROWS = (1, 2, 3, 4)


@pytest.fixture(scope="module")
def model(small_scenario):
    s = small_scenario
    return ResidualModel([s.datum], s.initial.wall, s.spec)


@pytest.fixture(scope="module")
def shape(small_scenario):
    return ShapeParametrization(small_scenario.initial.wall, ROWS)


@pytest.fixture(scope="module")
def tube_data(small_scenario):
    """Data from the unperturbed tube itself."""
    s = small_scenario
    return make_synthetic(s.initial, ConstantExcitation(), K, s.spec, estimate_error=False)


@pytest.fixture(scope="module")
def tube_jacobian(small_scenario, tube_data, shape):
    m = ResidualModel([tube_data], small_scenario.initial.wall, SMALL_MESH)
    dens, _ = m.project(m.ops)
    return shape_jacobian(m, shape, shape.params(small_scenario.initial.wall.offsets), dens)


# ---------------------------------------------------------------------------
# shape parameters
# ---------------------------------------------------------------------------
@given(st.lists(st.floats(-0.05, 0.05), min_size=24, max_size=24))
def test_shape_parameters_round_trip(shape, values):
    p = np.array(values)
    off = shape.offsets(p)
    np.testing.assert_array_equal(shape.params(off), p)
    np.testing.assert_array_equal(off[0], shape.base[0])
    np.testing.assert_array_equal(off[-1], shape.base[-1])


def test_seam_and_tip_rows_are_not_parameters(small_scenario):
    wall = small_scenario.initial.wall
    for rows in ((0, 1), (1, wall.offsets.shape[0] - 1)):
        with pytest.raises(ValueError):
            ShapeParametrization(wall, rows)


def test_smoothing_annihilates_constants(shape):
    S = shape.smoothing()
    np.testing.assert_allclose(S @ np.ones(shape.size), 0.0, atol=1e-14)
    assert np.linalg.norm(S @ np.random.default_rng(0).standard_normal(shape.size)) > 0


# ---------------------------------------------------------------------------
# residual system
# ---------------------------------------------------------------------------
def test_block_lengths_match_meshes(model):
    dens, blocks = model.project(model.ops)
    nF, nG = model.mesh_F.n_nodes, model.mesh_G.n_nodes
    assert [len(getattr(blocks, b)[0]) for b in ("R1", "R2", "R3", "R4")] == [nF, nF, nG, nG]
    assert len(dens[0]) == nG
    assert all(math.isfinite(v) for v in blocks.norms().values())


@settings(max_examples=10)
@given(st.complex_numbers(max_magnitude=5, allow_nan=False, allow_infinity=False),
       st.complex_numbers(max_magnitude=5, allow_nan=False, allow_infinity=False))
def test_residual_is_affine_in_the_density(model, a, b):
    rng = np.random.default_rng(4)
    n = model.mesh_G.n_nodes
    H1, H2 = rng.standard_normal((2, n)) + 1j * rng.standard_normal((2, n))
    r = lambda H: model.blocks(model.ops, [H]).stacked()  # noqa: E731
    r0 = r(np.zeros(n))
    lhs = r(a * H1 + b * H2) - r0
    rhs = a * (r(H1) - r0) + b * (r(H2) - r0)
    scale = (abs(a) + abs(b) + 1) * max(np.linalg.norm(r(H1)), np.linalg.norm(r0))
    assert np.linalg.norm(lhs - rhs) < 1e-12 * scale


def test_projected_density_minimizes_the_residual(model):
    dens, blocks = model.project(model.ops)
    rng = np.random.default_rng(5)
    for _ in range(3):
        H = dens[0] + 1e-3 * rng.standard_normal(len(dens[0]))
        assert model.blocks(model.ops, [H]).norm > blocks.norm


def test_noise_residual_scales_linearly(model):
    a, b = model.noise_residual(model.ops, 0.01), model.noise_residual(model.ops, 0.02)
    assert a > 0 and b == pytest.approx(2 * a, rel=1e-12)


def test_consistency_floor_matches_self_generated_data(small_scenario, tube_data):
    m = ResidualModel([tube_data], small_scenario.initial.wall, SMALL_MESH)
    _, blocks = m.project(m.ops)
    floor = m.consistency_floor(small_scenario.initial)
    assert 0.3 < blocks.norm / floor < 3.0
    assert m.data[0] is tube_data


def test_outward_perturbation_increases_residual(scenario):
    s = scenario
    m = ResidualModel([s.datum], s.truth.wall, s.spec)
    r0, _, _ = projected_residual(m, s.truth.wall.offsets)
    off = s.truth.wall.offsets.copy()
    off[1:-1] += 0.01 * RADIUS
    r1, _, _ = projected_residual(m, off)
    assert np.linalg.norm(r1) > np.linalg.norm(r0)


# ---------------------------------------------------------------------------
# Jacobians
# ---------------------------------------------------------------------------
def test_density_columns_match_finite_differences(model, small_scenario):
    dens, _ = model.project(model.ops)
    one = ShapeParametrization(small_scenario.initial.wall, (2,))
    J = full_jacobian(model, one, one.params(small_scenario.initial.wall.offsets), dens)
    Jd = J[:, one.size:]
    h = 1e-6
    for i in (0, 17, len(dens[0]) - 1):
        e = np.zeros(len(dens[0]))
        e[i] = h
        fd = (model.blocks(model.ops, [dens[0] + e]).stacked()
              - model.blocks(model.ops, [dens[0] - e]).stacked()) / (2 * h)
        assert np.linalg.norm(fd - Jd[:, i]) < 1e-6 * np.linalg.norm(Jd[:, i])


def test_symmetric_state_gives_symmetric_columns(tube_jacobian):
    # half-turn rotation maps control column j to j + 3 and preserves the meshes
    norms = np.linalg.norm(tube_jacobian, axis=0).reshape(len(ROWS), 6)
    np.testing.assert_allclose(norms[:, :3], norms[:, 3:], rtol=1e-6)


def test_shape_jacobian_has_full_column_rank(tube_jacobian):
    sv = np.linalg.svd(np.vstack([tube_jacobian.real, tube_jacobian.imag]), compute_uv=False)
    assert sv[-1] > 1e-10 * sv[0]


def test_vanishing_step_is_detected(model, small_scenario):
    dens, _ = model.project(model.ops)
    one = ShapeParametrization(small_scenario.initial.wall, (1,))
    with pytest.raises(StepSizeError):
        shape_jacobian(model, one, one.params(small_scenario.initial.wall.offsets), dens, fd_step=1e-20)


# ---------------------------------------------------------------------------
# damped steps
# ---------------------------------------------------------------------------
def test_damped_step_solves_the_regularized_normal_equations(rng):
    J = rng.standard_normal((40, 6)) + 1j * rng.standard_normal((40, 6))
    r = rng.standard_normal(40) + 1j * rng.standard_normal(40)
    lam, mu, nu = 0.1, 0.05, 0.01
    S = np.diff(np.eye(6), 2, axis=0)
    delta = damped_step(J, r, lam, mu, nu, S)
    Jr = np.vstack([J.real, J.imag])
    d = np.max(np.diag(Jr.T @ Jr))
    A = np.vstack([Jr, math.sqrt((lam + nu) * d) * np.eye(6), math.sqrt(mu * d) * S])
    b = np.concatenate([-r.real, -r.imag, np.zeros(6 + 4)])
    np.testing.assert_allclose(delta, np.linalg.lstsq(A, b, rcond=None)[0], rtol=1e-10)


def test_zero_residual_gives_zero_step(rng):
    J = rng.standard_normal((10, 3)) + 0j
    assert np.all(damped_step(J, np.zeros(10, complex), 0.1, 0.0, 0.0) == 0)


def test_strong_regularization_suppresses_the_step(rng):
    J = rng.standard_normal((10, 3)) + 0j
    r = rng.standard_normal(10) + 0j
    steps = [np.linalg.norm(damped_step(J, r, lam, 0.0, 0.0)) for lam in (1.0, 1e3, 1e6, 1e9)]
    assert all(b < a for a, b in zip(steps, steps[1:]))
    assert steps[-1] < 1e-8 * steps[0]


def test_first_step_decreases_the_residual(small_scenario, model, shape):
    dens, blocks = model.project(model.ops)
    state = InverseState(shape.params(small_scenario.initial.wall.offsets), dens,
                         {"lambda": 1e-2, "mu": 1e-3, "nu": 1e-3})
    new, rep = gauss_newton_step(model, shape, state, InverseOptions(active_rows=ROWS))
    assert rep.accepted and not rep.stagnated
    assert rep.residual_before == pytest.approx(blocks.norm, rel=1e-12)
    assert rep.residual_after < rep.residual_before
    assert new.regularization["nu"] < state.regularization["nu"]


# ---------------------------------------------------------------------------
# reconstruct
# ---------------------------------------------------------------------------
def test_data_from_the_initial_geometry(scenario):
    # on the coarse test mesh the discretization floor is too rough for this check
    s = scenario
    data = make_synthetic(s.initial, ConstantExcitation(), K, s.spec, estimate_error=False)
    res = reconstruct([data], s.initial, InverseOptions(active_rows=ROWS), s.spec)
    assert res.iterations <= 1
    assert radial_error(res.geometry.wall, s.initial.wall, RADIUS) < 1e-3


def test_zero_iterations_returns_the_initial_geometry(small_scenario):
    s = small_scenario
    res = reconstruct([s.datum], s.initial, InverseOptions(max_iters=0, use_model_error=False), s.spec)
    assert res.iterations == 0 and res.status == "max-iters"
    np.testing.assert_array_equal(res.geometry.wall.offsets, s.initial.wall.offsets)
    assert len(res.history) == 1


def test_history_is_monotone(small_scenario, tmp_path):
    s = small_scenario
    opts = InverseOptions(max_iters=2, use_model_error=False, active_rows=ROWS)
    res = reconstruct([s.datum], s.initial, opts, s.spec)
    totals = [h["total"] for h in res.history]
    assert all(b <= a for a, b in zip(totals, totals[1:]))
    assert all(math.isfinite(t) for t in totals)
    path = tmp_path / "h.csv"
    write_history(res.history, path, {"config_hash": "abc"})
    lines = path.read_text().splitlines()
    assert lines[0] == "# config_hash: abc"
    assert lines[1].startswith("iteration,R1,R2,R3,R4,total")
    assert len(lines) == 2 + len(res.history)


def test_inverse_crime_is_refused(small_scenario):
    s = small_scenario
    crime = make_synthetic(s.truth, ConstantExcitation(), K, s.spec, fine_factor=1,
                           allow_inverse_crime=True, estimate_error=False)
    with pytest.raises(InverseCrimeError):
        reconstruct([crime], s.initial, InverseOptions(max_iters=0), s.spec)
    res = reconstruct([crime], s.initial, InverseOptions(max_iters=0, allow_inverse_crime=True,
                                                         use_model_error=False), s.spec)
    assert res.iterations == 0


def test_mismatched_membrane_mesh_is_refused(small_scenario):
    s = small_scenario
    with pytest.raises(DataMismatchError):
        reconstruct([s.datum], s.initial, InverseOptions(max_iters=0),
                    MeshSpec(membrane=(3, 4), wall=(6, 4), order=3))


def test_inadmissible_wavenumber_is_refused(small_scenario):
    s = small_scenario
    d = s.datum
    fast = CauchyDatum(2.0, d.f_values, d.h_values, d.mesh, d.provenance)
    with pytest.raises(InadmissibleWavenumberError):
        reconstruct([fast], s.initial, InverseOptions(max_iters=0), s.spec)


def test_at_least_one_datum_is_required(small_scenario):
    with pytest.raises(ValueError):
        reconstruct([], small_scenario.initial)


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------
def test_radial_error_of_a_uniform_shift(small_scenario):
    wall = small_scenario.initial.wall
    assert radial_error(wall, wall, RADIUS) == 0.0
    off = wall.offsets.copy()
    off[1:-1] = 0.006
    err = radial_error(wall.with_offsets(off), wall, RADIUS, region=(0.1, 0.35))
    assert err == pytest.approx(0.02, rel=1e-12)


@pytest.mark.slow
def test_two_excitations_do_not_hurt(scenario, gaussian_datum):
    # equal iteration budgets; the discrepancy stop would end the stacked run at once
    s = scenario
    opts = InverseOptions(active_rows=ROWS, use_model_error=False, max_iters=3)
    one = reconstruct([s.datum], s.initial, opts, s.spec)
    two = reconstruct([s.datum, gaussian_datum], s.initial, opts, s.spec)
    err_one = radial_error(one.geometry.wall, s.truth.wall, RADIUS)
    assert radial_error(two.geometry.wall, s.truth.wall, RADIUS) <= err_one
