import numpy as np
import pytest

from artifact.inverse_map import (InverseMapConfig, InversionError, invert_mesh, invert_point,
                                  invert_points, train_warm_start)
from artifact.mesh_multipatch import line_patch, plate_patches
from artifact.spline_core import KnotVector, NurbsPatch, map_forward

F1 = line_patch((0, 3, 10))
F2 = line_patch((0, 8, 10))


def quad_root(c2, c1, x):
    """Root in [0, 1] of c2 xi^2 + c1 xi - x = 0."""
    return (-c1 + np.sqrt(c1**2 + 4 * c2 * x)) / (2 * c2)


def affine_patch():
    kv = KnotVector([0, 0, 1, 1], 1)
    return NurbsPatch((kv, kv), [[[-1, 0], [-1, 2]], [[3, 0], [3, 2]]], kind="bspline")


def test_closed_form_inversions():
    # F1(xi) = 6 xi + 4 xi^2, F2(xi) = 16 xi - 6 xi^2 written as 8(2 xi) ... via Bernstein form
    assert invert_point(F1, [4.0])[0] == pytest.approx(0.5, abs=1e-12)
    assert invert_point(F1, [5.0])[0] == pytest.approx((-6 + np.sqrt(116)) / 8, abs=1e-12)
    assert invert_point(F2, [6.5])[0] == pytest.approx(0.5, abs=1e-12)


def test_corner_points():
    for P in plate_patches().values():
        for xi in ([0, 0], [1, 0], [0, 1], [1, 1]):
            x = map_forward(P, np.array([xi], float))[0]
            got = invert_point(P, x)
            assert np.linalg.norm(map_forward(P, got[None])[0] - x) < 1e-14
            np.testing.assert_allclose(got, xi, atol=1e-9)


def test_outside_point_raises_with_residual():
    with pytest.raises(InversionError) as err:
        invert_point(F1, [12.0])
    assert err.value.residual == pytest.approx(2.0, abs=1e-9)
    with pytest.raises(InversionError):
        invert_point(plate_patches()[1], [0.0, 0.0])


def test_affine_lookup_predictor_accuracy():
    P = affine_patch()
    pred = train_warm_start(P, InverseMapConfig(sample_grid=11))
    xi = np.random.default_rng(0).random((200, 2))
    assert np.abs(pred(map_forward(P, xi)) - xi).max() < 1e-3


def test_predictor_clamped():
    pred = train_warm_start(F1)
    out = pred(np.array([[-5.0], [20.0], [4.0]]))
    assert out.min() >= 0.0 and out.max() <= 1.0


@pytest.mark.parametrize("kind", ["lookup", "regressor"])
def test_predictor_improves_with_grid_density(kind):
    P = plate_patches()[1]
    xi = np.random.default_rng(1).uniform(0.05, 0.95, (300, 2))
    x = map_forward(P, xi)
    errs = [np.abs(train_warm_start(P, InverseMapConfig(warm_start=kind, sample_grid=m))(x) - xi).mean()
            for m in (3, 9)]
    assert errs[1] < errs[0]


def test_regressor_warm_start_then_refinement():
    cfg = InverseMapConfig(warm_start="regressor")
    xi = invert_points(F2, np.array([[1.0], [6.5], [9.9]]), cfg)
    np.testing.assert_allclose(xi[1, 0], 0.5, atol=1e-11)


def test_no_warm_start():
    xi = invert_point(plate_patches()[2], [-1.0, 2.0], InverseMapConfig(warm_start="none"))
    assert np.linalg.norm(map_forward(plate_patches()[2], xi[None])[0] - [-1.0, 2.0]) < 1e-10


def test_invert_mesh_recovers_grid():
    P = plate_patches()[2]
    t = np.linspace(0, 1, 9)
    xi = np.stack(np.meshgrid(t, t, indexing="ij"), axis=-1).reshape(-1, 2)
    got = invert_mesh(P, map_forward(P, xi))
    assert np.abs(got - xi).max() < 1e-9


def test_uniform_nodes_under_second_map():
    x = np.linspace(0, 10, 21)
    xi = invert_mesh(F2, x[:, None])[:, 0]
    # F2(xi) = 16 xi - 6 xi^2
    expect = (16 - np.sqrt(256 - 24 * x)) / 12
    np.testing.assert_allclose(xi, expect, atol=1e-10)
    assert np.abs(map_forward(F2, xi[:, None])[:, 0] - x).max() < 1e-10
    assert np.ptp(np.diff(xi)) > 1e-2


def test_empty_input():
    assert invert_mesh(F1, np.zeros((0, 1))).shape == (0, 1)


def test_quadratic_convergence_on_line_maps():
    for P, c2, c1 in ((F1, 4.0, 6.0), (F2, -6.0, 16.0)):
        for x in (1.3, 4.0, 7.7):
            hist = []
            invert_point(P, [x], InverseMapConfig(warm_start="none", tolerance=1e-14), history=hist)
            r = np.array([h for h in hist if h > 1e-13])
            ratios = r[1:] / r[:-1]**2
            assert np.all(ratios < 10.0), ratios


def test_deterministic_lookup():
    P = plate_patches()[1]
    x = map_forward(P, np.random.default_rng(2).random((50, 2)))
    assert np.array_equal(invert_points(P, x), invert_points(P, x))


def test_config_validation():
    with pytest.raises(ValueError):
        InverseMapConfig(tolerance=0)
    with pytest.raises(ValueError):
        InverseMapConfig(max_iterations=0)
    with pytest.raises(ValueError):
        InverseMapConfig(warm_start="net")
