import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cvsurrogate.cv import CoordinationCV, DistanceCV, SingularConfigurationError, make_cv, mass_vector
from cvsurrogate.geometry import Configuration, SimBox

from conftest import brute_force_min_image, central_fd

BOX = SimBox(2.7)
dist = DistanceCV(BOX)
coord = CoordinationCV(BOX)


def coordination_config(distances, axis=0):
    """Mg near the box centre, oxygen i at distances[i] along one axis, the rest at L/2 on other axes."""
    mg = np.array([1.0, 1.0, 1.0])
    ox = np.tile(mg, (20, 1))
    for i in range(20):
        ox[i, (i % 2) + 1] += 1.35  # far: exactly half a box away
    for i, d in enumerate(distances):
        ox[i] = mg
        ox[i, axis] += d
    return np.concatenate([mg, ox.ravel()])


class TestDistance:
    def test_345_triangle(self):
        assert dist.value([0, 0, 0, 0.3, 0.4, 0]) == pytest.approx(0.5, abs=1e-15)

    def test_coincident(self):
        assert dist.value([0.5, 0.5, 0.5, 0.5, 0.5, 0.5]) == 0.0

    def test_minimum_image(self):
        x = [0.1, 0, 0, 2.6, 0, 0]
        expected = np.linalg.norm(brute_force_min_image(x[:3], x[3:], 2.7))
        assert expected == pytest.approx(0.2, abs=1e-12)
        assert dist.value(x) == pytest.approx(expected, abs=1e-12)

    def test_jacobian_345(self):
        x = np.array([0, 0, 0, 0.3, 0.4, 0])
        expected = [-0.6, -0.8, 0, 0.6, 0.8, 0]
        np.testing.assert_allclose(dist.jacobian(x), expected, atol=1e-15)
        np.testing.assert_allclose(central_fd(dist.value, x, 1e-6), expected, atol=1e-9)

    def test_jacobian_axis_aligned(self):
        np.testing.assert_allclose(dist.jacobian([0.2, 0.3, 0.4, 0.9, 0.3, 0.4]), [-1, 0, 0, 1, 0, 0], atol=1e-15)

    def test_jacobian_singular(self):
        with pytest.raises(SingularConfigurationError):
            dist.jacobian([0.5, 0.5, 0.5, 0.5, 0.5, 0.5])

    def test_wrong_dimension(self):
        with pytest.raises(ValueError):
            dist.value(np.zeros(7))

    def test_accepts_configuration_and_batches(self, rng):
        x = rng.uniform(0, 2.7, (10, 6))
        np.testing.assert_array_equal(dist.value(x)[3], dist.value(Configuration(x[3], BOX)))
        assert dist.jacobian(x).shape == (10, 6)

    def test_translation_invariance_of_jacobian_blocks(self, rng):
        jac = dist.jacobian(rng.uniform(0, 2.7, (200, 6)))
        np.testing.assert_allclose(jac[:, :3] + jac[:, 3:], 0, atol=1e-15)
        np.testing.assert_allclose(np.linalg.norm(jac[:, 3:], axis=1), 1, atol=1e-14)


class TestCoordination:
    def test_switch_midpoint(self):
        x = coordination_config([0.265])
        assert coord.value(x) == pytest.approx(0.5, abs=1e-12)

    def test_inner_oxygen(self):
        expected = 0.5 * (1 + math.tanh(30 * (0.265 - 0.165)))
        assert expected == pytest.approx(0.99753, abs=1e-5)
        assert coord.value(coordination_config([0.165])) == pytest.approx(expected, abs=1e-12)

    def test_all_far(self):
        x = coordination_config([1.0] * 20, axis=0)
        assert 0.0 <= coord.value(x) <= 20 * 1e-18

    def test_switch_jacobian_at_r0(self):
        jac = coord.jacobian(coordination_config([0.265]))
        assert jac[3] == pytest.approx(-15.0, abs=1e-9)
        assert jac[0] == pytest.approx(15.0, abs=1e-9)

    def test_saturated_jacobian(self):
        jac = coord.jacobian(coordination_config([1.0] * 20))
        assert np.max(np.abs(jac)) < 1e-15

    def test_mg_block_balances_oxygens(self, rng):
        x = rng.uniform(0, 2.7, (100, 63))
        jac = coord.jacobian(x)
        np.testing.assert_allclose(jac[:, :3], -jac[:, 3:].reshape(100, 20, 3).sum(axis=1), atol=1e-12)

    def test_singular(self):
        x = coordination_config([0.3])
        x[3:6] = x[0:3]
        with pytest.raises(SingularConfigurationError):
            coord.jacobian(x)

    def test_wrong_dimension(self):
        with pytest.raises(ValueError):
            coord.value(np.zeros(60))

    def test_switch_derivative_never_overflows(self):
        d = np.array([-100.0, 0.0, 100.0])
        assert np.all(np.isfinite(coord.switch_derivative(d)))

    def test_switch_strictly_decreasing_where_resolved(self):
        d = np.linspace(0.01, 1.2, 2000)
        s = coord.switch(d)
        assert np.all(np.diff(s) < 0)


@pytest.mark.parametrize("cv", [dist, coord], ids=["distance", "coordination"])
def test_jacobian_matches_finite_differences(cv, rng):
    for _ in range(20):
        x = rng.uniform(0, 2.7, cv.input_dim)
        if cv is coord:  # pull a few oxygens into the switching region
            x[3:12] = np.tile(x[0:3], 3) + rng.normal(0, 0.2, 9)
        fd = central_fd(cv.value, x, 1e-6)
        jac = cv.jacobian(x)
        assert np.max(np.abs(jac - fd)) / np.max(np.abs(jac)) < 1e-6


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 2.7), min_size=6, max_size=6), st.lists(st.floats(-5, 5), min_size=3, max_size=3))
def test_distance_translation_invariant(x, shift):
    x = np.array(x)
    moved = x + np.tile(shift, 2)
    assert abs(dist.value(moved) - dist.value(x)) < 1e-10


def test_bounds(rng):
    d = dist.value(rng.uniform(-3, 6, (5000, 6)))
    assert np.all(d >= 0) and np.all(d <= BOX.max_distance + 1e-12)
    c = coord.value(rng.uniform(-3, 6, (5000, 63)))
    assert np.all(c >= 0) and np.all(c <= 20)


def test_make_cv_and_masses():
    assert make_cv("distance").input_dim == 6
    assert make_cv("coordination").input_dim == 63
    with pytest.raises(ValueError):
        make_cv("rmsd")
    m = mass_vector(dist)
    np.testing.assert_array_equal(m, [24.305] * 3 + [35.453] * 3)
    assert mass_vector(coord, {"O": 18.0})[-1] == 18.0
