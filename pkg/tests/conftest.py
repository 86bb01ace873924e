"""Shared fixtures: canal scenarios are synthesized once per session."""

from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import settings

from canalshape.forward import ConstantExcitation, GaussianBump, MeshSpec, make_synthetic
from canalshape.geometry.canal import CanalGeometry, bumped_offsets, canal_geometry
from canalshape.inverse import InverseOptions, ReconstructionResult, reconstruct
from canalshape.potentials import CauchyDatum

settings.register_profile("repo", deadline=None, max_examples=25, derandomize=True)
settings.load_profile("repo")

K = 1.0
RADIUS = 0.3
INVERSION_MESH = MeshSpec(membrane=(3, 4), wall=(8, 4), order=4)
SMALL_MESH = MeshSpec(membrane=(2, 4), wall=(6, 4), order=3)


def bumped(initial: CanalGeometry, amplitude: float, z_end: float = 0.4) -> CanalGeometry:
    """Initial canal with a radial bump sampled on its own control grid."""
    wall = initial.wall
    offs = bumped_offsets(wall.reference, wall.t_knots, wall.offsets.shape[1], RADIUS, amplitude,
                          z_start=0.0, z_end=z_end)
    return initial.with_wall(wall.with_offsets(offs))


@dataclass
class Scenario:
    initial: CanalGeometry
    truth: CanalGeometry
    spec: MeshSpec
    datum: CauchyDatum


def _scenario(spec: MeshSpec) -> Scenario:
    init = canal_geometry(RADIUS, 2.5)
    truth = bumped(init, 0.1)
    return Scenario(init, truth, spec, make_synthetic(truth, ConstantExcitation(), K, spec))


@pytest.fixture(scope="session")
def scenario() -> Scenario:
    """10% bump, noise-free data at fine factor 2 on the inversion mesh."""
    return _scenario(INVERSION_MESH)


@pytest.fixture(scope="session")
def small_scenario() -> Scenario:
    """Same truth on a coarse mesh, for mechanics tests."""
    return _scenario(SMALL_MESH)


@pytest.fixture(scope="session")
def reconstruction(scenario) -> ReconstructionResult:
    """Noise-free reconstruction of the bump from the unperturbed tube."""
    s = scenario
    return reconstruct([s.datum], s.initial, InverseOptions(active_rows=(1, 2, 3, 4)), s.spec)


@pytest.fixture(scope="session")
def gaussian_datum(scenario) -> CauchyDatum:
    """Second excitation for the bump scenario."""
    s = scenario
    return make_synthetic(s.truth, GaussianBump(), K, s.spec, estimate_error=False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
