"""B-spline and NURBS bases, geometric mappings and their Jacobians.

Parametric points are arrays of shape ``(npts, d)`` with ``d`` equal to 1 or
2. Control nets are stored as ``(n1, [n2,] dim)`` arrays so the first
parametric direction is the slowest varying index.
"""
from dataclasses import dataclass, field
import json

import numpy as np


class DomainError(ValueError):
    """Parametric coordinate outside the unit interval."""


class BijectivityError(ValueError):
    """The Jacobian determinant of a mapping is too close to zero."""


def _as_points(xi, d):
    xi = np.asarray(xi, dtype=float)
    if xi.ndim == 0:
        xi = xi.reshape(1, 1)
    elif xi.ndim == 1:
        xi = xi.reshape(-1, 1) if d == 1 else xi.reshape(1, -1)
    if xi.shape[1] != d:
        raise ValueError(f"expected {d} parametric coordinates, got {xi.shape[1]}")
    return xi


@dataclass(frozen=True)
class KnotVector:
    """Open knot vector on [0, 1].

    Parameters
    ----------
    knots : array_like
        Non-decreasing knot values with ``knots[0] = 0`` and
        ``knots[-1] = 1``, each endpoint repeated ``degree + 1`` times.
    degree : int
        Polynomial degree ``p``.
    """

    knots: np.ndarray
    degree: int

    def __post_init__(self):
        U = np.asarray(self.knots, dtype=float)
        p = int(self.degree)
        object.__setattr__(self, "knots", U)
        object.__setattr__(self, "degree", p)
        U.setflags(write=False)
        if p < 0:
            raise ValueError("degree must be non-negative")
        if U.ndim != 1 or U.size < 2 * (p + 1):
            raise ValueError("knot vector too short for its degree")
        if np.any(np.diff(U) < 0):
            raise ValueError("knots must be non-decreasing")
        if U[0] != 0.0 or U[-1] != 1.0:
            raise ValueError("knots must start at 0 and end at 1")
        if np.any(U[: p + 1] != 0.0) or np.any(U[-p - 1:] != 1.0):
            raise ValueError("knot vector is not open")
        if U[p + 1] == 0.0 or U[-p - 2] == 1.0:
            raise ValueError("endpoint multiplicity exceeds p + 1")
        _, counts = np.unique(U[p + 1: -p - 1], return_counts=True)
        if counts.size and counts.max() > p:
            raise ValueError("interior knot multiplicity exceeds the degree")

    @property
    def basis_count(self):
        return self.knots.size - self.degree - 1

    @property
    def breakpoints(self):
        """Distinct knot values, i.e. the boundaries of the knot spans."""
        return np.unique(self.knots)

    def find_span(self, xi):
        """Index ``i`` with ``knots[i] <= xi < knots[i + 1]``.

        The right limit is used at repeated interior knots and the left
        limit at ``xi = 1``.
        """
        xi = np.asarray(xi, dtype=float)
        if np.any(xi < 0.0) or np.any(xi > 1.0) or np.any(np.isnan(xi)):
            raise DomainError("parametric coordinate outside [0, 1]")
        n, p = self.basis_count, self.degree
        span = np.searchsorted(self.knots, xi, side="right") - 1
        return np.clip(span, p, n - 1)


def eval_basis(kv, xi, order=0):
    """Nonzero B-spline basis values at ``xi``.

    Parameters
    ----------
    kv : KnotVector
    xi : float or array_like
        Evaluation points in [0, 1].
    order : {0, 1}
        Return values (0) or first derivatives (1).

    Returns
    -------
    values : ndarray, shape (npts, p + 1)
        The ``p + 1`` basis functions that may be nonzero at each point.
    first : ndarray of int, shape (npts,)
        Index of the basis function in column 0.
    """
    scalar = np.ndim(xi) == 0
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    span = kv.find_span(xi)
    vals, ders = _basis_and_derivative(kv, span, xi)
    out = vals if order == 0 else ders
    if order not in (0, 1):
        raise ValueError("order must be 0 or 1")
    first = span - kv.degree
    if scalar:
        return out[0], int(first[0])
    return out, first


def _basis_table(U, p, span, xi):
    """Nonzero basis values of degree ``p`` (inverted triangle of Cox-de Boor)."""
    npts = xi.size
    N = np.zeros((npts, p + 1))
    N[:, 0] = 1.0
    left = np.zeros((npts, p + 1))
    right = np.zeros((npts, p + 1))
    for j in range(1, p + 1):
        left[:, j] = xi - U[span + 1 - j]
        right[:, j] = U[span + j] - xi
        saved = np.zeros(npts)
        for r in range(j):
            den = right[:, r + 1] + left[:, j - r]
            with np.errstate(divide="ignore", invalid="ignore"):
                temp = np.where(den != 0.0, N[:, r] / den, 0.0)
            N[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        N[:, j] = saved
    return N


def _basis_and_derivative(kv, span, xi):
    U, p = kv.knots, kv.degree
    N = _basis_table(U, p, span, xi)
    dN = np.zeros_like(N)
    if p == 0:
        return N, dN
    Nm = _basis_table(U, p - 1, span, xi)
    # pad so that Nm_ext[:, k] is N_{span-p+k, p-1}; the outermost vanish
    Nm_ext = np.zeros((xi.size, p + 2))
    Nm_ext[:, 1: p + 1] = Nm
    for k in range(p + 1):
        i = span - p + k
        d1 = U[i + p] - U[i]
        d2 = U[i + p + 1] - U[i + 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            a = np.where(d1 > 0, Nm_ext[:, k] / d1, 0.0)
            b = np.where(d2 > 0, Nm_ext[:, k + 1] / d2, 0.0)
        dN[:, k] = p * (a - b)
    return N, dN


@dataclass(frozen=True)
class NurbsPatch:
    """A B-spline or NURBS patch with its control net.

    Parameters
    ----------
    knot_vectors : tuple of KnotVector
        One per parametric direction.
    points : ndarray, shape (n1, [n2,] dim)
        Control points.
    weights : ndarray, shape (n1, [n2])
        Positive control weights. Defaults to ones.
    kind : {"nurbs", "bspline"}
    patch_id : int
    delta : float
        Lower bound on ``|det J|`` used by the bijectivity check.
    check : bool
        Sample the Jacobian at construction time.
    """

    knot_vectors: tuple
    points: np.ndarray
    weights: np.ndarray = None
    kind: str = "nurbs"
    patch_id: int = 0
    delta: float = 1e-8
    check: bool = field(default=True, compare=False)

    def __post_init__(self):
        kvs = tuple(self.knot_vectors)
        d = len(kvs)
        if d not in (1, 2):
            raise ValueError("only curves and surfaces are supported")
        shape = tuple(kv.basis_count for kv in kvs)
        P = np.asarray(self.points, dtype=float)
        if P.ndim == d:
            P = P[..., None]
        if P.shape[:d] != shape:
            raise ValueError(f"control net {P.shape[:d]} does not match basis counts {shape}")
        w = np.ones(shape) if self.weights is None else np.asarray(self.weights, dtype=float)
        if w.shape != shape:
            raise ValueError("weights do not match the control net")
        if np.any(w <= 0):
            raise ValueError("control weights must be positive")
        if self.kind not in ("nurbs", "bspline"):
            raise ValueError(f"unknown patch kind {self.kind!r}")
        if self.kind == "bspline" and np.any(w != 1.0):
            raise ValueError("B-spline patches must have unit weights")
        P.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "knot_vectors", kvs)
        object.__setattr__(self, "points", P)
        object.__setattr__(self, "weights", w)
        if self.check and P.shape[-1] == d:
            check_bijectivity(self)

    @property
    def pdim(self):
        """Number of parametric directions."""
        return len(self.knot_vectors)

    @property
    def dim(self):
        """Number of physical coordinates."""
        return self.points.shape[-1]

    @property
    def degrees(self):
        return tuple(kv.degree for kv in self.knot_vectors)

    def _tensor(self, xi):
        """Tensor-product B-spline values/gradients and flat control indices."""
        xi = _as_points(xi, self.pdim)
        vals, ders, firsts = [], [], []
        for k, kv in enumerate(self.knot_vectors):
            span = kv.find_span(xi[:, k])
            v, dv = _basis_and_derivative(kv, span, xi[:, k])
            vals.append(v)
            ders.append(dv)
            firsts.append(span - kv.degree)
        if self.pdim == 1:
            idx = firsts[0][:, None] + np.arange(vals[0].shape[1])
            return idx, vals[0], ders[0][..., None]
        (v1, v2), (d1, d2) = vals, ders
        n2 = self.knot_vectors[1].basis_count
        i1 = firsts[0][:, None] + np.arange(v1.shape[1])
        i2 = firsts[1][:, None] + np.arange(v2.shape[1])
        npts = xi.shape[0]
        idx = (i1[:, :, None] * n2 + i2[:, None, :]).reshape(npts, -1)
        B = (v1[:, :, None] * v2[:, None, :]).reshape(npts, -1)
        dB = np.stack([(d1[:, :, None] * v2[:, None, :]).reshape(npts, -1),
                       (v1[:, :, None] * d2[:, None, :]).reshape(npts, -1)], axis=-1)
        return idx, B, dB

    def weight_function(self, xi):
        """Weighting function ``W(xi)`` and its parametric gradient.

        Returns
        -------
        W : ndarray, shape (npts,)
        dW : ndarray, shape (npts, d)
        """
        idx, B, dB = self._tensor(xi)
        w = self.weights.reshape(-1)[idx]
        return np.einsum("qk,qk->q", B, w), np.einsum("qkd,qk->qd", dB, w)

    def _geometry(self, xi):
        idx, R, dR = eval_nurbs_basis(self, xi)
        P = self.points.reshape(-1, self.dim)[idx]
        x = np.einsum("qk,qkc->qc", R, P)
        J = np.einsum("qkd,qkc->qcd", dR, P)
        return x, J


def eval_nurbs_basis(patch, xi):
    """Rational basis functions that are nonzero at ``xi``.

    Returns
    -------
    idx : ndarray of int, shape (npts, nloc)
        Flat (row-major) control point indices.
    R : ndarray, shape (npts, nloc)
        Rational basis values.
    dR : ndarray, shape (npts, nloc, d)
        Parametric gradients.
    """
    idx, B, dB = patch._tensor(xi)
    w = patch.weights.reshape(-1)[idx]
    Bw = B * w
    W = Bw.sum(axis=1)
    dW = np.einsum("qkd,qk->qd", dB, w)
    if np.any(W <= 0):
        raise ArithmeticError("weighting function vanished")
    R = Bw / W[:, None]
    dR = (dB * w[..., None] - R[..., None] * dW[:, None, :]) / W[:, None, None]
    return idx, R, dR


def map_forward(patch, xi):
    """Physical coordinates ``F(xi)``, shape ``(npts, dim)``."""
    return patch._geometry(xi)[0]


def jacobian(patch, xi, check=True):
    """Jacobian ``dF/dxi`` and its determinant.

    Returns
    -------
    J : ndarray, shape (npts, dim, d)
    det : ndarray, shape (npts,)
        Only defined for square Jacobians (``dim == d``).

    Raises
    ------
    BijectivityError
        If ``check`` and any ``|det J| <= patch.delta``.
    """
    _, J = patch._geometry(xi)
    if J.shape[1] != J.shape[2]:
        raise ValueError("Jacobian is not square")
    det = np.linalg.det(J)
    if check and np.any(np.abs(det) <= patch.delta):
        bad = int(np.argmin(np.abs(det)))
        raise BijectivityError(f"|det J| = {abs(det[bad]):.3e} <= delta at sample {bad}")
    return J, det


def span_sample_grid(patch, per_span=None):
    """Parametric samples on a ``(4p + 1)^d`` grid inside every knot span."""
    axes = []
    for kv in patch.knot_vectors:
        m = 4 * kv.degree + 1 if per_span is None else per_span
        bp = kv.breakpoints
        t = np.linspace(0.0, 1.0, m)
        axes.append(np.unique((bp[:-1, None] + np.diff(bp)[:, None] * t).ravel()))
    grids = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=-1)


def check_bijectivity(patch):
    """Raise :class:`BijectivityError` unless ``|det J| > delta`` on the span grid
    and the sign of ``det J`` is constant."""
    _, det = jacobian(patch, span_sample_grid(patch))
    if np.any(np.sign(det) != np.sign(det[0])):
        raise BijectivityError("Jacobian determinant changes sign")


def patch_from_dict(data, patch_id=0, delta=1e-8):
    """Build a patch from the JSON layout (row-major flat points and weights)."""
    degrees = data["degree"]
    knots = data["knots"]
    if np.ndim(degrees) == 0:
        degrees, knots = [degrees], [knots]
    kvs = tuple(KnotVector(np.asarray(U, dtype=float), int(p)) for U, p in zip(knots, degrees))
    shape = tuple(kv.basis_count for kv in kvs)
    P = np.asarray(data["points"], dtype=float)
    P = P.reshape(shape + (-1,))
    w = data.get("weights")
    w = None if w is None else np.asarray(w, dtype=float).reshape(shape)
    return NurbsPatch(kvs, P, w, kind=data.get("kind", "nurbs"), patch_id=patch_id, delta=delta)


def patch_to_dict(patch):
    return {
        "degree": [kv.degree for kv in patch.knot_vectors],
        "knots": [kv.knots.tolist() for kv in patch.knot_vectors],
        "points": patch.points.reshape(-1, patch.dim).tolist(),
        "weights": patch.weights.reshape(-1).tolist(),
        "kind": patch.kind,
    }


def load_patch(path, patch_id=0):
    with open(path) as f:
        return patch_from_dict(json.load(f), patch_id=patch_id)


def save_patch(patch, path):
    with open(path, "w") as f:
        json.dump(patch_to_dict(patch), f, indent=1)
