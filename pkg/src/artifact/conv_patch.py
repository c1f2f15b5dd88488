"""Convolution patch functions with the Kronecker delta and reproducing properties.

A convolution patch function set ``W`` on nodes ``x_1..x_n`` interpolates
nodal values, ``W_K(x_J) = delta_KJ``, and reproduces every entry of a
basis ``P`` (monomials, optionally divided by a NURBS weighting function).
It combines compactly supported radial functions with the basis through
the moment system

    G = [[Psi, P], [P^T, 0]],   [W(x)] = [psi(x), P(x)] G^{-1}[:, :n].

Distances are measured in coordinates scaled per direction by ``scale``,
so the dilation ``a`` is expressed in units of the local element size.
"""
from dataclasses import dataclass
from itertools import product

import numpy as np


class ConvConstructionError(ValueError):
    """The moment system of a convolution patch could not be solved."""

    def __init__(self, msg, node=None):
        super().__init__(msg if node is None else f"node {node}: {msg}")
        self.node = node


@dataclass(frozen=True)
class ConvSpec:
    """Parameters of a convolution patch construction.

    Parameters
    ----------
    s : int
        Patch size in element layers.
    p : int
        Reproducing order.
    a : float, optional
        Dilation in element units. Defaults to ``s + 1``.
    rbf : {"cubic", "gaussian"}
    basis_kind : {"nurbs", "polynomial"}
        Divide the monomials by the patch weighting function or not.
    space : {"tensor", "complete"}
        Tensor-product monomials (degree <= p per direction) or the
        complete space (total degree <= p).
    """

    s: int
    p: int
    a: float = None
    rbf: str = "cubic"
    basis_kind: str = "nurbs"
    space: str = "tensor"

    def __post_init__(self):
        if self.s < 0 or self.p < 0:
            raise ValueError("s and p must be non-negative")
        if self.a is not None and self.a <= 0:
            raise ValueError("dilation must be positive")
        if self.rbf not in ("cubic", "gaussian"):
            raise ValueError(f"unknown rbf {self.rbf!r}")
        if self.basis_kind not in ("nurbs", "polynomial"):
            raise ValueError(f"unknown basis kind {self.basis_kind!r}")
        if self.space not in ("tensor", "complete"):
            raise ValueError(f"unknown polynomial space {self.space!r}")

    @property
    def dilation(self):
        return float(self.s + 1) if self.a is None else float(self.a)


def rbf_eval(kind, r, a, order=0):
    """Compactly supported radial function or its radial derivative.

    Parameters
    ----------
    kind : {"cubic", "gaussian"}
    r : array_like
        Non-negative distances.
    a : float
        Support radius.
    order : {0, 1}
        ``order=1`` returns ``d psi / d r``.
    """
    q = np.asarray(r, dtype=float) / a
    inner = q <= 0.5
    inside = q <= 1.0
    if kind == "cubic":
        if order == 0:
            v = np.where(inner, 2 / 3 - 4 * q**2 + 4 * q**3,
                         4 / 3 - 4 * q + 4 * q**2 - 4 / 3 * q**3)
        else:
            v = np.where(inner, -8 * q + 12 * q**2, -4 + 8 * q - 4 * q**2) / a
    elif kind == "gaussian":
        e = np.exp(-q**2)
        v = e if order == 0 else -2 * q * e / a
    else:
        raise ValueError(f"unknown rbf {kind!r}")
    return np.where(inside, v, 0.0)


def monomial_exponents(d, p, space="tensor"):
    """Exponent tuples of the reproduced monomials, constant first."""
    exps = [e for e in product(range(p + 1), repeat=d) if space == "tensor" or sum(e) <= p]
    exps.sort(key=lambda e: (sum(e), e[::-1]))
    return np.array(exps, dtype=int).reshape(-1, d)


def basis_size(d, p, space="tensor"):
    return (p + 1) ** d if space == "tensor" else len(monomial_exponents(d, p, space))


def eval_monomials(z, exps):
    """Monomials ``z^e`` and their gradients.

    Parameters
    ----------
    z : ndarray, shape (..., d)
    exps : ndarray of int, shape (m, d)

    Returns
    -------
    M : ndarray, shape (..., m)
    dM : ndarray, shape (..., m, d)
    """
    pmax = int(exps.max()) if exps.size else 0
    d = exps.shape[1]
    pows = [np.ones(z.shape[:-1] + (pmax + 1,)) for _ in range(d)]
    for k in range(d):
        for e in range(1, pmax + 1):
            pows[k][..., e] = pows[k][..., e - 1] * z[..., k]
    fac = [pows[k][..., exps[:, k]] for k in range(d)]
    M = np.prod(fac, axis=0)
    dM = np.empty(M.shape + (d,))
    for k in range(d):
        ek = exps[:, k]
        dk = ek * pows[k][..., np.maximum(ek - 1, 0)]
        rest = np.prod([fac[j] for j in range(d) if j != k], axis=0) if d > 1 else 1.0
        dM[..., k] = dk * rest
    return M, dM


def divide_by_weight(M, dM, W, dW):
    """Quotient rule for ``M / W`` with ``W`` broadcast over the basis axis."""
    P = M / W[..., None]
    dP = (dM - P[..., None] * dW[..., None, :]) / W[..., None, None]
    return P, dP


class PolynomialBasis:
    """Centered, scaled monomials, optionally divided by a weighting function.

    Parameters
    ----------
    d, p : int
        Dimension and order.
    center, scale : array_like, shape (d,)
        The basis is built on ``z = (x - center) / scale``.
    space : {"tensor", "complete"}
    weight : callable, optional
        ``weight(x) -> (W, dW)`` with shapes ``(npts,)`` and ``(npts, d)``.
    """

    def __init__(self, d, p, center=None, scale=None, space="tensor", weight=None):
        self.d, self.p, self.space = d, p, space
        self.center = np.zeros(d) if center is None else np.asarray(center, dtype=float).reshape(d)
        self.scale = np.ones(d) if scale is None else np.broadcast_to(np.asarray(scale, float), (d,))
        self.weight = weight
        self.exps = monomial_exponents(d, p, space)

    @property
    def size(self):
        return len(self.exps)

    def reduced(self, p):
        return PolynomialBasis(self.d, p, self.center, self.scale, self.space, self.weight)

    def __call__(self, x):
        x = np.asarray(x, dtype=float).reshape(-1, self.d)
        M, dM = eval_monomials((x - self.center) / self.scale, self.exps)
        dM = dM / self.scale
        if self.weight is not None:
            W, dW = self.weight(x)
            M, dM = divide_by_weight(M, dM, W, np.asarray(dW).reshape(-1, self.d))
        return M, dM


class StackedBasis:
    """Concatenation of a basis in coordinate ``t`` with a second basis
    expressed in a transferred coordinate ``tau(t)``.

    Parameters
    ----------
    first, second : callable
        ``basis(x) -> (P, dP)``.
    transfer : callable, optional
        ``transfer(t) -> (tau, dtau/dt)`` for 1D coordinates. Identity when
        omitted.
    keep : array_like of int, optional
        Columns retained after removing dependent entries.
    """

    def __init__(self, first, second, transfer=None, keep=None):
        self.first, self.second, self.transfer = first, second, transfer
        self.keep = keep

    def __call__(self, t):
        t = np.asarray(t, dtype=float).reshape(-1, 1)
        P1, dP1 = self.first(t)
        if self.transfer is None:
            tau, dtau = t, np.ones_like(t)
        else:
            tau, dtau = self.transfer(t[:, 0])
            tau, dtau = np.reshape(tau, (-1, 1)), np.reshape(dtau, (-1, 1))
        P2, dP2 = self.second(tau)
        P = np.concatenate([P1, P2], axis=1)
        dP = np.concatenate([dP1, dP2 * dtau[:, None, :]], axis=1)
        if self.keep is not None:
            P, dP = P[:, self.keep], dP[:, self.keep]
        return P, dP


def _independent_columns(A, n_first, tol):
    """Columns of ``A`` kept by Gram-Schmidt, taking the first block whole."""
    Q, _ = np.linalg.qr(A[:, :n_first])
    keep = list(range(n_first))
    for j in range(n_first, A.shape[1]):
        c = A[:, j]
        r = c - Q @ (Q.T @ c)
        if np.linalg.norm(r) > tol * max(np.linalg.norm(c), 1e-300):
            keep.append(j)
            Q = np.column_stack([Q, r / np.linalg.norm(r)])
    return np.array(keep)


# ---------------------------------------------------------------------------
# batched kernels shared by every construction

def _pairwise(z1, z2):
    diff = z1[..., :, None, :] - z2[..., None, :, :]
    return diff, np.sqrt(np.einsum("...k,...k->...", diff, diff))


def check_dilation(Zn, a, node=None):
    """Reject dilations too small for the RBF support to reach a neighbour."""
    if Zn.shape[-2] < 2:
        return
    _, r = _pairwise(Zn, Zn)
    n = r.shape[-1]
    r = np.where(np.eye(n, dtype=bool), np.inf, r)
    nearest = r.min(axis=-1).max()
    if a <= nearest:
        raise ConvConstructionError(
            f"dilation a={a:g} does not reach the nearest neighbour at distance {nearest:g}", node)


def moment_solve(Zn, Pn, rbf, a, nodes=None, tol=1e-8):
    """Solve the moment systems of a batch of patches.

    Parameters
    ----------
    Zn : ndarray, shape (B, n, d)
        Scaled node coordinates.
    Pn : ndarray, shape (B, n, m)
        Basis evaluated at the nodes.
    nodes : array_like of int, optional
        Center node ids, reported on failure.

    Returns
    -------
    X : ndarray, shape (B, n + m, n)
        First ``n`` columns of ``G^{-1}``.
    """
    B, n, m = Pn.shape
    _, r = _pairwise(Zn, Zn)
    G = np.zeros((B, n + m, n + m))
    G[:, :n, :n] = rbf_eval(rbf, r, a)
    G[:, :n, n:] = Pn
    G[:, n:, :n] = np.swapaxes(Pn, 1, 2)
    rhs = np.zeros((B, n + m, n))
    rhs[:, :n, :] = np.eye(n)
    try:
        X = np.linalg.solve(G, rhs)
    except np.linalg.LinAlgError:
        X = np.full_like(rhs, np.nan)
        for b in range(B):
            try:
                X[b] = np.linalg.solve(G[b], rhs[b])
            except np.linalg.LinAlgError:
                pass
    ok = np.isfinite(X).all(axis=(1, 2))
    if np.any(ok):
        # one refinement step; the moment systems can be moderately ill-conditioned
        X[ok] += np.linalg.solve(G[ok], rhs[ok] - G[ok] @ X[ok])
    res = np.abs(G @ X - rhs).max(axis=(1, 2))
    bad = ~np.isfinite(res) | (res > tol)
    if np.any(bad):
        b = int(np.flatnonzero(bad)[0])
        node = None if nodes is None else int(np.asarray(nodes)[b])
        raise ConvConstructionError(f"singular moment matrix (residual {res[b]:.2e})", node)
    return X


def conv_eval(Zq, Zn, X, Pq, dPq, rbf, a, scale):
    """Evaluate a batch of convolution function sets.

    Parameters
    ----------
    Zq : ndarray, shape (B, nq, d)
        Scaled query coordinates.
    Zn : ndarray, shape (B, n, d)
    X : ndarray, shape (B, n + m, n)
    Pq, dPq : ndarray, shapes (B, nq, m) and (B, nq, m, d)
        Basis and its gradient (with respect to unscaled coordinates).
    scale : ndarray, shape (d,) or (B, 1, 1, d)

    Returns
    -------
    W : ndarray, shape (B, nq, n)
    dW : ndarray, shape (B, nq, n, d)
        Gradients with respect to unscaled coordinates.
    """
    n = Zn.shape[1]
    diff, r = _pairwise(Zq, Zn)
    psi = rbf_eval(rbf, r, a)
    dpsi = rbf_eval(rbf, r, a, order=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.where(r > 0, dpsi / r, 0.0)
    A, K = X[:, :n, :], X[:, n:, :]
    W = psi @ A + Pq @ K
    d = Zn.shape[-1]
    scale = np.asarray(scale, dtype=float)
    if scale.ndim <= 1:
        scale = np.broadcast_to(scale.reshape(-1), (d,))
    dW = np.empty(W.shape + (d,))
    for k in range(d):
        dW[..., k] = (g * diff[..., k] / scale[..., k]) @ A + dPq[..., k] @ K
    return W, dW


class ConvFunctions:
    """Convolution functions of one patch, evaluable anywhere.

    Attributes
    ----------
    nodes : ndarray, shape (n, d)
    basis : callable
        The reproduced basis.
    coef : ndarray, shape (n + m, n)
    """

    mode = "interior"

    def __init__(self, nodes, basis, coef, rbf, a, scale):
        self.nodes, self.basis, self.coef = nodes, basis, coef
        self.rbf, self.a = rbf, a
        self.scale = np.asarray(scale, dtype=float)

    @property
    def size(self):
        return self.nodes.shape[0]

    def evaluate(self, x):
        """Values ``(nq, n)`` and gradients ``(nq, n, d)`` at ``x``."""
        d = self.nodes.shape[1]
        x = np.asarray(x, dtype=float).reshape(-1, d)
        P, dP = self.basis(x)
        W, dW = conv_eval((x / self.scale)[None], (self.nodes / self.scale)[None],
                          self.coef[None], P[None], dP[None], self.rbf, self.a, self.scale)
        return W[0], dW[0]

    def values(self, x):
        return self.evaluate(x)[0]

    def gradients(self, x):
        return self.evaluate(x)[1]


def build_conv_functions(nodes, basis, spec, scale=None, center=None):
    """Convolution functions on a patch of nodes.

    Parameters
    ----------
    nodes : array_like, shape (n, d)
    basis : callable
        ``basis(x) -> (P, dP)``, e.g. a :class:`PolynomialBasis`.
    spec : ConvSpec
    scale : array_like, shape (d,), optional
        Element size per direction. Distances are divided by it.
    center : int, optional
        Center node id used in error messages.

    Returns
    -------
    ConvFunctions
    """
    nodes = np.asarray(nodes, dtype=float)
    if nodes.ndim == 1:
        nodes = nodes[:, None]
    n, d = nodes.shape
    scale = np.ones(d) if scale is None else np.broadcast_to(np.asarray(scale, float), (d,))
    P, _ = basis(nodes)
    if P.shape[1] > n:
        raise ConvConstructionError(f"{n} nodes cannot reproduce {P.shape[1]} basis terms", center)
    Zn = (nodes / scale)[None]
    check_dilation(Zn, spec.dilation, center)
    X = moment_solve(Zn, P[None], spec.rbf, spec.dilation,
                     nodes=None if center is None else [center])
    return ConvFunctions(nodes, basis, X[0], spec.rbf, spec.dilation, scale)


class InterfaceConvFunctions(ConvFunctions):
    """Shared 1D functions along an interface, in the first side's coordinate."""

    mode = "interface-1d"


def build_interface_conv_1d(nodes_a, nodes_b, trace_a, trace_b, spec, transfer=None,
                            scale_a=1.0, scale_b=1.0, center=None, tol=1e-10):
    """One set of 1D convolution functions shared by two patches.

    The reproduced basis stacks the weighted monomials of both sides,
    ``[t_a^q / W_a(t_a), t_b^q / W_b(t_b)]`` for ``q = 0..p``, and drops
    entries of the second block that the first already represents at the
    nodes.

    Parameters
    ----------
    nodes_a, nodes_b : array_like, shape (n,)
        Parametric coordinates of the shared nodes on each side.
    trace_a, trace_b : callable or None
        ``trace(t) -> (W, dW)``, the weighting function restricted to the
        interface. ``None`` means ``W = 1``.
    spec : ConvSpec
    transfer : callable, optional
        ``transfer(t_a) -> (t_b, dt_b/dt_a)``. Identity when omitted.
    scale_a, scale_b : float
        Element sizes on each side.
    center : int, optional
        Index (into ``nodes_a``) of the patch center used to center the
        monomials; defaults to the middle node.

    Returns
    -------
    InterfaceConvFunctions
        Evaluated in the ``t_a`` coordinate.
    """
    ta = np.asarray(nodes_a, dtype=float).reshape(-1)
    tb = np.asarray(nodes_b, dtype=float).reshape(-1)
    n = ta.size
    if tb.size != n:
        raise ValueError("both sides need the same nodes")
    c = n // 2 if center is None else center
    p = spec.p
    while True:
        first = PolynomialBasis(1, p, ta[c], scale_a, weight=trace_a)
        second = PolynomialBasis(1, p, tb[c], scale_b, weight=trace_b)
        stacked = StackedBasis(first, second, transfer)
        keep = _independent_columns(stacked(ta)[0], p + 1, tol)
        if keep.size <= n or p == 0:
            break
        p -= 1
    stacked.keep = keep
    P, _ = stacked(ta)
    Zn = (ta / scale_a)[None, :, None]
    check_dilation(Zn, spec.dilation, center)
    X = moment_solve(Zn, P[None], spec.rbf, spec.dilation)
    return InterfaceConvFunctions(ta[:, None], stacked, X[0], spec.rbf, spec.dilation, [scale_a])


class ProductConvFunctions:
    """Tensor-product functions ``W_K = (rho_K / rho) W^xi_m W^eta_n``.

    ``rho = W / (T_xi T_eta)`` where ``T_xi(xi)`` and ``T_eta(eta)`` are the
    weighting function traces along the interfaces the 1D factors were
    built for (1 if a factor is not interface-bound). Node ``K = (m, n)``
    is stored at position ``m * n_eta + n``.
    """

    mode = "product-rule-2d"

    def __init__(self, f_xi, f_eta, weight=None, trace_xi=None, trace_eta=None):
        self.f_xi, self.f_eta = f_xi, f_eta
        self.weight, self.trace_xi, self.trace_eta = weight, trace_xi, trace_eta
        txi, teta = f_xi.nodes[:, 0], f_eta.nodes[:, 0]
        g = np.meshgrid(txi, teta, indexing="ij")
        self.nodes = np.stack([g[0].ravel(), g[1].ravel()], axis=-1)
        self.rho_nodes = self._log_rho(self.nodes)[0]

    @property
    def size(self):
        return self.nodes.shape[0]

    def _log_rho(self, x):
        npts = x.shape[0]
        if self.weight is None:
            return np.zeros(npts), np.zeros((npts, 2))
        W, dW = self.weight(x)
        lr = np.log(W)
        dlr = dW / W[:, None]
        for k, tr in ((0, self.trace_xi), (1, self.trace_eta)):
            if tr is not None:
                T, dT = tr(x[:, k:k + 1])
                T, dT = np.reshape(T, -1), np.reshape(dT, -1)
                lr = lr - np.log(T)
                dlr[:, k] -= dT / T
        return lr, dlr

    def evaluate(self, x):
        x = np.asarray(x, dtype=float).reshape(-1, 2)
        a, da = self.f_xi.evaluate(x[:, :1])
        b, db = self.f_eta.evaluate(x[:, 1:])
        da, db = da[..., 0], db[..., 0]
        lr, dlr = self._log_rho(x)
        fac = np.exp(self.rho_nodes[None, :] - lr[:, None])
        nq = x.shape[0]
        W = (a[:, :, None] * b[:, None, :]).reshape(nq, -1) * fac
        dW = np.stack([(da[:, :, None] * b[:, None, :]).reshape(nq, -1) * fac - W * dlr[:, :1],
                       (a[:, :, None] * db[:, None, :]).reshape(nq, -1) * fac - W * dlr[:, 1:]],
                      axis=-1)
        return W, dW

    def values(self, x):
        return self.evaluate(x)[0]

    def gradients(self, x):
        return self.evaluate(x)[1]


def product_rule_conv_2d(shared_1d, transverse_1d, weight_fn=None, weight_trace=None,
                         shared_axis=0, transverse_trace=None):
    """Combine two 1D function sets into 2D functions on a tensor grid.

    Parameters
    ----------
    shared_1d : ConvFunctions
        Functions along the interface direction.
    transverse_1d : ConvFunctions
        Functions across the interface.
    weight_fn : callable, optional
        ``W(xi, eta) -> (W, dW)``; ``None`` for B-spline patches.
    weight_trace : callable, optional
        Trace of ``W`` along the interface, a function of the interface
        coordinate.
    shared_axis : {0, 1}
        Parametric direction the interface runs along.
    transverse_trace : callable, optional
        Trace for the transverse factor when it is itself interface-bound.

    Returns
    -------
    ProductConvFunctions
    """
    if shared_axis == 0:
        return ProductConvFunctions(shared_1d, transverse_1d, weight_fn, weight_trace, transverse_trace)
    return ProductConvFunctions(transverse_1d, shared_1d, weight_fn, transverse_trace, weight_trace)
