"""Exact fields of the benchmark problems."""
import numpy as np

from .mesh_multipatch import HOLE_RADIUS

HUMP_CENTER = (-0.5, 1.0)


def hump(x):
    """Gaussian hump ``exp(-pi (X^2 + Y^2))`` about :data:`HUMP_CENTER`."""
    X, Y = x[:, 0] - HUMP_CENTER[0], x[:, 1] - HUMP_CENTER[1]
    return np.exp(-np.pi * (X**2 + Y**2))


def hump_gradient(x):
    X, Y = x[:, 0] - HUMP_CENTER[0], x[:, 1] - HUMP_CENTER[1]
    u = hump(x)
    return np.stack([-2 * np.pi * X * u, -2 * np.pi * Y * u], axis=-1)


def hump_source(x):
    """``b = -Laplace(u)`` for the hump."""
    X, Y = x[:, 0] - HUMP_CENTER[0], x[:, 1] - HUMP_CENTER[1]
    return (4 * np.pi - 4 * np.pi**2 * (X**2 + Y**2)) * hump(x)


def _polar(x):
    return np.hypot(x[:, 0], x[:, 1]), np.arctan2(x[:, 1], x[:, 0])


def kirsch_stress(x, R=HOLE_RADIUS, T=1.0):
    """Stresses ``(s_xx, s_yy, s_xy)`` around a hole under far-field tension ``T`` along x."""
    r, t = _polar(np.asarray(x, float))
    a2, a4 = R**2 / r**2, 1.5 * R**4 / r**4
    c2, c4, s2, s4 = np.cos(2 * t), np.cos(4 * t), np.sin(2 * t), np.sin(4 * t)
    sxx = 1 - a2 * (1.5 * c2 + c4) + a4 * c4
    syy = -a2 * (0.5 * c2 - c4) - a4 * c4
    sxy = -a2 * (0.5 * s2 + s4) + a4 * s4
    return T * np.stack([sxx, syy, sxy], axis=-1)


def kirsch_sxx(x, R=HOLE_RADIUS):
    return kirsch_stress(x, R)[:, 0]


def kirsch_displacement(x, E, nu, R=HOLE_RADIUS, T=1.0):
    """Plane-stress displacements matching :func:`kirsch_stress`.

    Zero at ``theta = pi/2`` in x and at ``theta = 0, pi`` in y, so they
    satisfy the quarter-symmetry constraints.
    """
    r, t = _polar(np.asarray(x, float))
    mu = E / (2 * (1 + nu))
    k = (3 - nu) / (1 + nu)
    f = T * R / (8 * mu)
    q = r / R
    ux = f * (q * (k + 1) * np.cos(t) + 2 / q * ((1 + k) * np.cos(t) + np.cos(3 * t))
              - 2 / q**3 * np.cos(3 * t))
    uy = f * (q * (k - 3) * np.sin(t) + 2 / q * ((1 - k) * np.sin(t) + np.sin(3 * t))
              - 2 / q**3 * np.sin(3 * t))
    return np.stack([ux, uy], axis=-1)


def alternating(n):
    """Nodal values ``1, 2, 1, 2, ...``."""
    return 1.0 + (np.arange(n) % 2)
