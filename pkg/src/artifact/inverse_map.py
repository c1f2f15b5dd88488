"""Inversion of spline mappings: physical point to parametric point.

A cheap predictor supplies starting values and a box-constrained
Gauss-Newton iteration refines them until ``||F(xi) - x|| < tol``.
"""
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import LinearNDInterpolator, NearestNDInterpolator

from .spline_core import jacobian, map_forward


class InversionError(ValueError):
    """Gauss-Newton failed to reach the tolerance.

    Attributes
    ----------
    residual : float
        Best residual norm reached (largest over the failed points).
    failed : ndarray of int
        Indices of the points that failed.
    """

    def __init__(self, msg, residual=np.inf, failed=()):
        super().__init__(msg)
        self.residual = residual
        self.failed = np.asarray(failed, dtype=int)


@dataclass(frozen=True)
class InverseMapConfig:
    """Settings of the inverse map.

    Parameters
    ----------
    tolerance : float
        Required residual ``||F(xi) - x||``.
    max_iterations : int
        Gauss-Newton iterations.
    warm_start : {"lookup", "regressor", "none"}
        Piecewise-linear interpolation of a sampled grid, a small sigmoid
        network, or the domain center.
    sample_grid : int
        Samples per direction used to build the predictor.
    max_halvings : int
        Step halvings tried when the residual does not decrease.
    """

    tolerance: float = 1e-10
    max_iterations: int = 50
    warm_start: str = "lookup"
    sample_grid: int = 21
    max_halvings: int = 20

    def __post_init__(self):
        if self.tolerance <= 0 or self.max_iterations < 1:
            raise ValueError("tolerance must be positive and max_iterations >= 1")
        if self.warm_start not in ("lookup", "regressor", "none"):
            raise ValueError(f"unknown warm start {self.warm_start!r}")


class _Predictor:
    def __init__(self, fn, d, dim):
        self.fn, self.d, self.dim = fn, d, dim

    def __call__(self, x):
        x = np.asarray(x, dtype=float).reshape(-1, self.dim)
        return np.clip(np.reshape(self.fn(x), (-1, self.d)), 0.0, 1.0)


def _training_pairs(patch, m):
    t = np.linspace(0.0, 1.0, m)
    g = np.meshgrid(*([t] * patch.pdim), indexing="ij")
    xi = np.stack([a.ravel() for a in g], axis=-1)
    return xi, map_forward(patch, xi)


def train_warm_start(patch, config=InverseMapConfig()):
    """Approximate inverse of ``patch`` built from sampled pairs.

    Returns
    -------
    callable
        ``predict(x) -> xi`` with ``xi`` clamped to the unit box. For
        ``warm_start="none"`` the domain center is returned.
    """
    d, dim = patch.pdim, patch.dim
    if config.warm_start == "none":
        fn = lambda x: np.full((x.shape[0], d), 0.5)
    else:
        xi, x = _training_pairs(patch, config.sample_grid)
        if config.warm_start == "lookup":
            if dim == 1:
                order = np.argsort(x[:, 0])
                xs, ts = x[order, 0], xi[order, 0]
                fn = lambda q: np.interp(q[:, 0], xs, ts)
            else:
                lin = LinearNDInterpolator(x, xi)
                near = NearestNDInterpolator(x, xi)

                def fn(q):
                    out = lin(q)
                    miss = np.isnan(out).any(axis=1)
                    if np.any(miss):
                        out[miss] = near(q[miss])
                    return out
        else:
            from sklearn.neural_network import MLPRegressor

            lo, hi = x.min(axis=0), x.max(axis=0)
            span = np.where(hi > lo, hi - lo, 1.0)
            net = MLPRegressor(hidden_layer_sizes=(32, 32), activation="logistic",
                               solver="lbfgs", max_iter=5000, random_state=0, tol=1e-10)
            net.fit((x - lo) / span, xi if d > 1 else xi[:, 0])
            fn = lambda q: net.predict((q - lo) / span)
    return _Predictor(fn, d, dim)


def _gauss_newton(patch, x, xi, config, history=None):
    """Vectorized box-projected Gauss-Newton. Returns ``xi`` and residual norms."""
    tol = config.tolerance
    r = map_forward(patch, xi) - x
    res = np.linalg.norm(r, axis=1)
    if history is not None:
        history.append(res.copy())
    active = res >= tol
    for _ in range(config.max_iterations):
        if not np.any(active):
            break
        ia = np.flatnonzero(active)
        J, _ = jacobian(patch, xi[ia], check=False)
        step = _solve_steps(J, -r[ia])
        lam = np.ones(ia.size)
        pending = np.ones(ia.size, dtype=bool)
        new_xi = xi[ia].copy()
        new_r = r[ia].copy()
        new_res = res[ia].copy()
        for _ in range(config.max_halvings + 1):
            k = np.flatnonzero(pending)
            if k.size == 0:
                break
            trial = np.clip(xi[ia[k]] + lam[k, None] * step[k], 0.0, 1.0)
            tr = map_forward(patch, trial) - x[ia[k]]
            tres = np.linalg.norm(tr, axis=1)
            ok = tres < res[ia[k]]
            new_xi[k[ok]], new_r[k[ok]], new_res[k[ok]] = trial[ok], tr[ok], tres[ok]
            pending[k[ok]] = False
            lam[k[~ok]] *= 0.5
        stalled = pending
        xi[ia], r[ia], res[ia] = new_xi, new_r, new_res
        if history is not None:
            history.append(res.copy())
        active[ia] = (res[ia] >= tol) & ~stalled
    return xi, res


def _solve_steps(J, rhs):
    # square systems by solve, falling back to least squares when singular
    if J.shape[1] == J.shape[2]:
        try:
            return np.linalg.solve(J, rhs[..., None])[..., 0]
        except np.linalg.LinAlgError:
            pass
    return np.stack([np.linalg.lstsq(Jk, bk, rcond=None)[0] for Jk, bk in zip(J, rhs)])


def invert_points(patch, x, config=InverseMapConfig(), xi0=None, predictor=None, history=None):
    """Invert many points at once.

    Parameters
    ----------
    patch : NurbsPatch
    x : array_like, shape (npts, dim)
    config : InverseMapConfig
    xi0 : array_like, shape (npts, d), optional
        Starting values; the predictor is used otherwise.
    predictor : callable, optional
        Reused across calls to avoid retraining.
    history : list, optional
        Receives the residual norms of every iteration.

    Returns
    -------
    xi : ndarray, shape (npts, d)

    Raises
    ------
    InversionError
        Listing the indices of the points that missed the tolerance.
    """
    x = np.asarray(x, dtype=float).reshape(-1, patch.dim)
    if x.shape[0] == 0:
        return np.zeros((0, patch.pdim))
    if xi0 is None:
        predictor = predictor or train_warm_start(patch, config)
        xi0 = predictor(x)
    xi = np.clip(np.array(xi0, dtype=float).reshape(-1, patch.pdim), 0.0, 1.0)
    xi, res = _gauss_newton(patch, x, xi, config, history)
    bad = np.flatnonzero(~(res < config.tolerance))
    if bad.size:
        raise InversionError(f"{bad.size} point(s) not inverted, worst residual {res[bad].max():.3e}; "
                             f"first ids {bad[:10].tolist()}", float(res[bad].max()), bad)
    return xi


def invert_point(patch, x, config=InverseMapConfig(), xi0=None, history=None):
    """Parametric coordinates of a single physical point.

    Raises
    ------
    InversionError
        When the residual stays above the tolerance, carrying the best
        residual reached.
    """
    xi0 = None if xi0 is None else np.reshape(xi0, (1, -1))
    h = [] if history is not None else None
    try:
        xi = invert_points(patch, np.reshape(x, (1, -1)), config, xi0=xi0, history=h)
    finally:
        if history is not None:
            history.extend(float(v[0]) for v in h)
    return xi[0]


def invert_mesh(patch, physical_nodes, config=InverseMapConfig(), predictor=None):
    """Parametric coordinates of every node of a physical mesh."""
    return invert_points(patch, physical_nodes, config, predictor=predictor)
