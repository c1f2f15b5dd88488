"""C-IGA shape functions, Galerkin assembly, solution and error norms.

Shape functions compose the linear (1D) or bilinear (2D) element basis with
convolution patch functions built in the parametric domain of each CAD
patch,

    N~_J(xi) = sum_I N_I(xi) W^{I}_J(xi),

and map to physical space isoparametrically, ``x = sum_J N~_J x_J``.
Element-level data are produced in blocks so large meshes never hold the
whole table in memory.
"""
from dataclasses import dataclass, field
import logging

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.io import mmwrite
from scipy.spatial import cKDTree

from .conv_patch import (ConvSpec, ProductConvFunctions, PolynomialBasis, build_conv_functions,
                         build_interface_conv_1d, conv_eval, divide_by_weight, eval_monomials,
                         moment_solve, check_dilation, monomial_exponents)
from .inverse_map import InverseMapConfig, invert_points
from .mesh_multipatch import build_conv_patch_sets, detect_interfaces, region_seams
from .spline_core import jacobian, map_forward

log = logging.getLogger(__name__)

MODES = ("nodal", "g0", "penalty")


class SolveError(RuntimeError):
    """The linear system could not be solved."""


@dataclass(frozen=True)
class SolveConfig:
    """Assembly and solver settings.

    Parameters
    ----------
    compat_mode : {"nodal", "g0", "penalty"}
    penalty_rho : float, optional
        Interface penalty; defaults to ``1e4 / h`` with ``h`` the mean
        interface edge length.
    quadrature_order : int, optional
        Gauss points per direction; defaults to ``p + 2``.
    solver : {"direct", "cg"}
    tol : float
        Relative residual tolerance of the conjugate-gradient solver.
    export_matrix : str, optional
        Write the unconstrained matrix in Matrix Market format.
    """

    compat_mode: str = "nodal"
    penalty_rho: float = None
    quadrature_order: int = None
    solver: str = "direct"
    tol: float = 1e-12
    export_matrix: str = None

    def __post_init__(self):
        if self.compat_mode not in MODES:
            raise ValueError(f"unknown compatibility mode {self.compat_mode!r}")
        if self.penalty_rho is not None and self.penalty_rho <= 0:
            raise ValueError("penalty_rho must be positive")
        if self.solver not in ("direct", "cg"):
            raise ValueError(f"unknown solver {self.solver!r}")


def gauss_rule(n, d):
    """Tensor Gauss-Legendre rule on ``[-1, 1]^d``."""
    t, w = np.polynomial.legendre.leggauss(n)
    g = np.meshgrid(*([t] * d), indexing="ij")
    wg = np.meshgrid(*([w] * d), indexing="ij")
    return np.stack([a.ravel() for a in g], axis=-1), np.prod([a.ravel() for a in wg], axis=0)


_SX = np.array([-1.0, 1.0, 1.0, -1.0])
_SY = np.array([-1.0, -1.0, 1.0, 1.0])


def element_basis(P):
    """Linear or bilinear element functions at parent points ``P (..., d)``."""
    if P.shape[-1] == 1:
        t = P[..., 0]
        N = np.stack([(1 - t) / 2, (1 + t) / 2], axis=-1)
        dN = np.broadcast_to(np.array([-0.5, 0.5])[:, None], N.shape + (1,)).copy()
        return N, dN
    u, v = P[..., 0:1], P[..., 1:2]
    a, b = 1 + _SX * u, 1 + _SY * v
    N = a * b / 4
    dN = np.stack([_SX * b / 4, _SY * a / 4], axis=-1)
    return N, dN


def param_to_parent(corners, xi, iters=8):
    """Invert the element map ``xi = sum_c N_c(P) xi_c``.

    Parameters
    ----------
    corners : ndarray, shape (ne, 2**d, d)
    xi : ndarray, shape (ne, nq, d)
    """
    P = np.zeros_like(xi)
    for _ in range(iters):
        N, dN = element_basis(P)
        r = np.einsum("eqc,ecd->eqd", N, corners) - xi
        if np.abs(r).max(initial=0.0) < 1e-15:
            break
        J = np.einsum("eqck,ecd->eqdk", dN, corners)
        P = P - np.linalg.solve(J, r[..., None])[..., 0]
    return P


@dataclass
class ShapeBlock:
    """Shape function data on a block of elements.

    Attributes
    ----------
    elements : ndarray, shape (ne,)
    J : ndarray of int, shape (ne, Jmax)
        Node ids of ``A_s^e``, padded with -1.
    N : ndarray, shape (ne, nq, Jmax)
    grad : ndarray, shape (ne, nq, Jmax, dim)
        Physical gradients.
    x : ndarray, shape (ne, nq, dim)
        Isoparametric physical coordinates.
    xi : ndarray, shape (ne, nq, d)
        Parametric coordinates in the owning patch.
    det : ndarray, shape (ne, nq)
        Determinant of ``dx / dP`` (parent to physical).
    dN_parent : ndarray, shape (ne, nq, Jmax, d)
    w : ndarray, shape (ne, nq), optional
        Quadrature weights times ``|det|``.
    """

    elements: np.ndarray
    J: np.ndarray
    N: np.ndarray
    grad: np.ndarray
    x: np.ndarray
    xi: np.ndarray
    det: np.ndarray
    dN_parent: np.ndarray
    w: np.ndarray = None

    def field(self, u):
        """Values and gradients of a nodal field (``u`` indexed by ``J``)."""
        uj = _gather(u, self.J)
        val = np.einsum("eqj,ej...->eq...", self.N, uj)
        grad = np.einsum("eqjc,ej...->eq...c", self.grad, uj)
        return val, grad


def _gather(u, J):
    u = np.asarray(u)
    out = u[np.where(J >= 0, J, 0)]
    out[J < 0] = 0.0
    return out


def _local_scale(xi, default=None):
    """Mean node spacing of a patch per direction (distances are measured in it)."""
    xi = np.asarray(xi, float).reshape(len(xi), -1)
    out = np.ones(xi.shape[1]) if default is None else np.array(default, float).reshape(-1)
    for k in range(xi.shape[1]):
        u = np.unique(np.round(xi[:, k], 12))
        if u.size > 1:
            out[k] = (u[-1] - u[0]) / (u.size - 1)
    return out


class _Transferred:
    """1D functions re-expressed in a coordinate affinely related to theirs."""

    def __init__(self, f, c0, c1):
        self.f, self.c0, self.c1 = f, c0, c1
        self.nodes = np.clip((f.nodes - c0) / c1, 0.0, 1.0)

    @property
    def size(self):
        return self.f.size

    def evaluate(self, t):
        W, dW = self.f.evaluate(self.c0 + self.c1 * np.asarray(t, float).reshape(-1, 1))
        return W, dW * self.c1


class ShapeTable:
    """C-IGA shape functions of a mesh, evaluated on demand in element blocks.

    Parameters
    ----------
    mesh : MultiPatchMesh
    index : ConvPatchIndex
    spec : ConvSpec
    mode : {"nodal", "g0", "penalty"}
        ``"g0"`` builds product-rule functions for nodes within ``s``
        layers of every region seam (patch interfaces and knot lines).
    quad_order : int, optional
        Gauss points per direction, default ``p + 2``.
    block_bytes : float
        Memory budget of one evaluated block.
    """

    def __init__(self, mesh, index, spec, mode="nodal", quad_order=None, block_bytes=2e8):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        if index.s != spec.s:
            raise ValueError("patch index and spec disagree on s")
        self.mesh, self.index, self.spec, self.mode = mesh, index, spec, mode
        self.d = mesh.d
        self.nq1 = quad_order or spec.p + 2
        self.block_bytes = block_bytes
        N = mesh.n_nodes
        sizes = np.array([len(j) for j in index.element_sets])
        self.Jmax = int(sizes.max())
        self.Jpad = np.full((mesh.n_elements, self.Jmax), N, dtype=np.int64)
        for e, j in enumerate(index.element_sets):
            self.Jpad[e, :j.size] = j
        self.weighted = spec.basis_kind == "nurbs"
        self.node_weight = {}
        for a, P in mesh.patches.items():
            w = np.full(N, np.nan)
            ids = mesh.patch_nodes(a)
            w[ids] = P.weight_function(mesh.param[a][ids])[0]
            self.node_weight[a] = w
        self._build_recipes()
        self._interface_cache = {}

    # -- construction recipes ------------------------------------------------

    def _local_order(self, xi):
        p = self.spec.p
        if self.spec.space == "tensor":
            distinct = min(np.unique(np.round(xi[:, k], 12)).size for k in range(xi.shape[1]))
            p = min(p, distinct - 1)
        while p > 0 and len(monomial_exponents(xi.shape[1], p, self.spec.space)) > xi.shape[0]:
            p -= 1
        return p

    def _build_recipes(self):
        mesh, index = self.mesh, self.index
        nreg = len(mesh.regions)
        self.rec_table = np.full((nreg, mesh.n_nodes), -1, dtype=np.int64)
        self.rec_members, self.rec_p, self.rec_region, self.rec_node = [], [], [], []
        self.rec_scale = []
        self.rec_product = {}
        for reg in mesh.regions:
            xi_all = mesh.param[reg.patch]
            for node, members in index.node_sets[reg.id].items():
                k = len(self.rec_members)
                self.rec_table[reg.id, node] = k
                self.rec_members.append(members)
                self.rec_region.append(reg.id)
                self.rec_node.append(node)
                self.rec_p.append(self._local_order(xi_all[members]) if self.spec.s > 0 else 0)
                self.rec_scale.append(_local_scale(xi_all[members], reg.scale))
        self.rec_p = np.array(self.rec_p)
        self.rec_scale = np.array(self.rec_scale).reshape(len(self.rec_members), -1)
        self.rec_n = np.array([m.size for m in self.rec_members])
        self.rec_region = np.array(self.rec_region)
        self._f1d = {}
        if self.spec.s > 0 and self.d == 2:
            self._build_product_recipes()

    def _trace(self, patch, axis, value):
        """Weight function restricted to ``xi[axis] = value`` as a 1D function."""
        P = self.mesh.patches[patch]
        along = 1 - axis

        def trace(t):
            # affine transfers can overshoot the unit interval by rounding
            t = np.clip(np.asarray(t, float).reshape(-1), 0.0, 1.0)
            pts = np.empty((t.size, 2))
            pts[:, axis] = value
            pts[:, along] = t
            W, dW = P.weight_function(pts)
            return W, dW[:, along:along + 1]
        return trace

    def _build_product_recipes(self):
        # Nodes on the domain boundary always use the product rule: the 1D
        # factor across the boundary is Kronecker there, so functions of
        # interior nodes vanish on the boundary and nodal Dirichlet data
        # constrain the whole trace. In g0 mode every node within s layers
        # of a region seam also uses it, with the seam factor shared.
        mesh, s = self.mesh, self.spec.s
        if any(reg.grid is None for reg in mesh.regions):
            if self.mode == "g0":
                region_seams(mesh)  # raises with the offending region
            log.warning("regions are not tensor grids; boundary product rule skipped")
            self.seams = []
            return
        self.seams = region_seams(mesh) if self.mode == "g0" else []
        bindings = {}  # (region, node) -> {direction: (layer, seam index, role)}
        bnodes = set(mesh.boundary_nodes.tolist())
        for reg in mesh.regions:
            G = reg.grid
            for side_nodes in (G[0, :], G[-1, :], G[:, 0], G[:, -1]):
                if bnodes.issuperset(side_nodes.tolist()):
                    for node in side_nodes.tolist():
                        bindings.setdefault((reg.id, node), {})
        for q, seam in enumerate(self.seams):
            for role, side in (("a", seam.a), ("b", seam.b)):
                reg = mesh.regions[side.region]
                G = reg.grid
                n_ax = G.shape[side.axis] - 1
                idx = np.arange(G.shape[side.axis])
                layer = idx if side.end == 0 else n_ax - idx
                along = 1 - side.axis
                for i in np.flatnonzero(layer <= s):
                    line = G[i, :] if side.axis == 0 else G[:, i]
                    for node in line.tolist():
                        b = bindings.setdefault((reg.id, node), {})
                        cur = b.get(along)
                        if cur is None or layer[i] < cur[0]:
                            b[along] = (int(layer[i]), q, role)
        grid_pos = {}
        for reg in mesh.regions:
            gp = np.full((mesh.n_nodes, 2), -1)
            gp[reg.grid] = np.stack(np.indices(reg.grid.shape), axis=-1)
            grid_pos[reg.id] = gp
        for (r, node), bind in bindings.items():
            reg = mesh.regions[r]
            pos = grid_pos[r][node].copy()
            funcs, traces, ids = [], [], []
            for k in (0, 1):
                if k in bind:
                    _, q, role = bind[k]
                    f, tr, line_ids = self._seam_function(q, role, node, reg, pos)
                else:
                    f, tr, line_ids = self._plain_function(reg, k, pos), None, None
                    line_ids = self._plain_ids(reg, k, pos)
                funcs.append(f)
                traces.append(tr)
                ids.append(line_ids)
            gi = grid_pos[r]
            ii = gi[ids[0], 0]
            jj = gi[ids[1], 1]
            members = reg.grid[ii[:, None], jj[None, :]].ravel()
            k = self.rec_table[r, node]
            if set(members.tolist()) != set(self.rec_members[k].tolist()):
                raise RuntimeError(f"product box of node {node} differs from its convolution patch")
            weight = mesh.patches[reg.patch].weight_function if self.weighted else None
            if not self.weighted:
                traces = [None, None]
            self.rec_members[k] = members
            self.rec_product[k] = ProductConvFunctions(funcs[0], funcs[1], weight, traces[0], traces[1])

    def _box(self, center, length):
        s = self.spec.s
        return np.arange(max(0, center - s), min(length, center + s + 1))

    def _plain_ids(self, reg, k, pos):
        line = reg.grid[:, pos[1]] if k == 0 else reg.grid[pos[0], :]
        return line[self._box(pos[k], line.size)]

    def _plain_function(self, reg, k, pos):
        key = ("plain", reg.id, k, int(pos[k]))
        if key not in self._f1d:
            line = reg.grid[:, pos[1]] if k == 0 else reg.grid[pos[0], :]
            t = self.mesh.param[reg.patch][line, k]
            box = self._box(pos[k], line.size)
            h = _local_scale(t[box])[0]
            p = min(self.spec.p, box.size - 1)
            basis = PolynomialBasis(1, p, [t[pos[k]]], [h])
            self._f1d[key] = build_conv_functions(t[box], basis, self.spec, scale=[h],
                                                  center=int(line[pos[k]]))
        return self._f1d[key]

    def _seam_function(self, q, role, node, reg, pos):
        seam = self.seams[q]
        S = seam.a.nodes
        side = seam.a if role == "a" else seam.b
        # the seam node on the same grid line as ``node``
        k = 1 - side.axis
        line_pos = pos.copy()
        line_pos[side.axis] = 0 if side.end == 0 else reg.grid.shape[side.axis] - 1
        snode = reg.grid[tuple(line_pos)]
        m = int(np.flatnonzero(S == snode)[0])
        key = ("seam", q, m)
        ra, rb = self.mesh.regions[seam.a.region], self.mesh.regions[seam.b.region]
        if key not in self._f1d:
            ka, kb = 1 - seam.a.axis, 1 - seam.b.axis
            ta = self.mesh.param[ra.patch][S, ka]
            tb = self.mesh.param[rb.patch][S, kb]
            box = self._box(m, S.size)
            c0, c1 = seam.transfer
            if self.weighted:
                tr_a = self._trace(ra.patch, seam.a.axis, self.mesh.param[ra.patch][S[0], seam.a.axis])
                tr_b = self._trace(rb.patch, seam.b.axis, self.mesh.param[rb.patch][S[0], seam.b.axis])
            else:
                tr_a = tr_b = None
            transfer = lambda t: ((np.asarray(t) - c0) / c1, np.full(np.shape(t), 1.0 / c1))
            self._f1d[key] = build_interface_conv_1d(
                ta[box], tb[box], tr_a, tr_b, self.spec, transfer=transfer,
                scale_a=_local_scale(ta[box])[0], scale_b=_local_scale(tb[box])[0],
                center=int(m - box[0]))
        f = self._f1d[key]
        ids = S[self._box(m, S.size)]
        if role == "b":
            f = _Transferred(f, *seam.transfer)
        trace = None
        if self.weighted:
            trace = self._trace(reg.patch, side.axis, self.mesh.param[reg.patch][snode, side.axis])
        return f, trace, ids

    # -- evaluation ----------------------------------------------------------

    def _ordinary(self, recs, xi_q, Wq, dWq):
        """Convolution functions of ordinary recipes at per-occurrence points.

        Returns values ``(B, nq, n)`` and parametric gradients
        ``(B, nq, n, d)`` for recipes sharing ``n`` and ``p``.
        """
        mesh, spec = self.mesh, self.spec
        d = self.d
        uniq, inv = np.unique(recs, return_inverse=True)
        p = int(self.rec_p[uniq[0]])
        exps = monomial_exponents(d, p, spec.space)
        members = np.stack([self.rec_members[k] for k in uniq])
        regs = self.rec_region[uniq]
        patches = np.array([mesh.regions[r].patch for r in regs])
        scale = self.rec_scale[uniq][:, None, :]
        centers = np.empty((uniq.size, d))
        Xn = np.empty(members.shape + (d,))
        Wn = np.empty(members.shape)
        for a in np.unique(patches):
            m = patches == a
            centers[m] = mesh.param[a][np.array(self.rec_node)[uniq[m]]]
            Xn[m] = mesh.param[a][members[m]]
            Wn[m] = self.node_weight[a][members[m]]
        Zn = (Xn - centers[:, None, :]) / scale
        Mn, _ = eval_monomials(Zn, exps)
        if self.weighted:
            Mn = Mn / Wn[..., None]
        X = moment_solve(Zn, Mn, spec.rbf, spec.dilation, nodes=np.array(self.rec_node)[uniq])
        Zq = (xi_q - centers[inv][:, None, :]) / scale[inv]
        Mq, dMq = eval_monomials(Zq, exps)
        dMq = dMq / scale[inv][:, :, None, :]
        if self.weighted:
            Mq, dMq = divide_by_weight(Mq, dMq, Wq, dWq)
        return conv_eval(Zq, Zn[inv], X[inv], Mq, dMq, spec.rbf, spec.dilation, scale[inv][:, None])

    def check_dilation(self):
        """Raise if the dilation cannot reach neighbouring nodes in some patch."""
        for k, members in enumerate(self.rec_members):
            if members.size < 2:
                continue
            reg = self.mesh.regions[self.rec_region[k]]
            Z = self.mesh.param[reg.patch][members] / self.rec_scale[k]
            check_dilation(Z[None], self.spec.dilation, node=self.rec_node[k])

    def evaluate(self, elements, parent, weights=None):
        """Shape functions on ``elements`` at parent points.

        Parameters
        ----------
        elements : array_like of int, shape (ne,)
        parent : ndarray, shape (nq, d) or (ne, nq, d)
        weights : ndarray, shape (nq,) or (ne, nq), optional
            Reference quadrature weights; multiplied by ``|det|``.

        Returns
        -------
        ShapeBlock
        """
        mesh, d = self.mesh, self.d
        elements = np.atleast_1d(np.asarray(elements, dtype=np.int64))
        ne = elements.size
        parent = np.asarray(parent, float)
        if parent.ndim == 2:
            parent = np.broadcast_to(parent, (ne,) + parent.shape)
        nq = parent.shape[1]
        Nb, dNb = element_basis(parent)
        corners = mesh.element_param(elements)
        xi = np.einsum("eqc,ecd->eqd", Nb, corners)
        dxi = np.einsum("eqck,ecd->eqdk", dNb, corners)
        Jp = self.Jpad[elements]
        Jmax = Jp.shape[1]
        Nt = np.zeros((ne, nq, Jmax))
        dNt = np.zeros((ne, nq, Jmax, d))
        epatch = mesh.element_patch[elements]
        Wq = np.ones((ne, nq))
        dWq = np.zeros((ne, nq, d))
        if self.weighted:
            for a in np.unique(epatch):
                m = epatch == a
                W, dW = mesh.patches[a].weight_function(xi[m].reshape(-1, d))
                Wq[m] = W.reshape(-1, nq)
                dWq[m] = dW.reshape(-1, nq, d)
        ereg = mesh.element_region[elements]
        nc = mesh.elements.shape[1]
        enodes = mesh.elements[elements]
        recs = self.rec_table[ereg[:, None], enodes]
        if np.any(recs < 0):
            raise RuntimeError("element node without a convolution patch")
        occ_e = np.repeat(np.arange(ne), nc)
        occ_c = np.tile(np.arange(nc), ne)
        occ_r = recs.ravel()

        def accumulate(oe, oc, members, W, dW):
            # dW is with respect to xi; chain to the parent coordinates
            J = dxi[oe][:, :, None]
            dWp = sum(dW[..., j, None] * J[..., j, :] for j in range(d))
            nb = Nb[oe, :, oc][:, :, None]
            dnb = dNb[oe, :, oc][:, :, None, :]
            rows = Jp[oe]
            key = rows + (np.arange(oe.size) * (mesh.n_nodes + 1))[:, None]
            pos = np.searchsorted(key.ravel(), (members + (np.arange(oe.size) * (mesh.n_nodes + 1))[:, None]).ravel())
            pos = pos.reshape(members.shape) - (np.arange(oe.size) * Jmax)[:, None]
            val = nb * W
            grad = dnb * W[..., None] + nb[..., None] * dWp
            for c in range(nc):
                sel = oc == c
                if not np.any(sel):
                    continue
                ee = oe[sel][:, None, None]
                qq = np.arange(nq)[None, :, None]
                pp = pos[sel][:, None, :]
                Nt[ee, qq, pp] += val[sel]
                dNt[ee, qq, pp] += grad[sel]

        if self.spec.s == 0:
            nodes = enodes.ravel()[:, None]
            accumulate(occ_e, occ_c, nodes, np.ones((occ_e.size, nq, 1)), np.zeros((occ_e.size, nq, 1, d)))
        else:
            is_prod = np.array([r in self.rec_product for r in occ_r.tolist()]) if self.rec_product \
                else np.zeros(occ_r.size, dtype=bool)
            ordinary = np.flatnonzero(~is_prod)
            sig = self.rec_n[occ_r[ordinary]] * 64 + self.rec_p[occ_r[ordinary]]
            for g in np.unique(sig):
                o = ordinary[sig == g]
                W, dW = self._ordinary(occ_r[o], xi[occ_e[o]], Wq[occ_e[o]], dWq[occ_e[o]])
                members = np.stack([self.rec_members[k] for k in occ_r[o]])
                accumulate(occ_e[o], occ_c[o], members, W, dW)
            prod = np.flatnonzero(is_prod)
            for k in np.unique(occ_r[prod]):
                o = prod[occ_r[prod] == k]
                fn = self.rec_product[k]
                W, dW = fn.evaluate(xi[occ_e[o]].reshape(-1, d))
                n = W.shape[1]
                members = np.broadcast_to(self.rec_members[k], (o.size, n))
                accumulate(occ_e[o], occ_c[o], members, W.reshape(o.size, nq, n),
                           dW.reshape(o.size, nq, n, d))

        Jm = np.where(Jp < mesh.n_nodes, Jp, -1)
        Xj = mesh.nodes[np.where(Jm >= 0, Jm, 0)]
        Xj[Jm < 0] = 0.0
        x = Nt @ Xj
        dxdP = np.stack([dNt[..., k] @ Xj for k in range(d)], axis=-1)
        if dxdP.shape[-1] == dxdP.shape[-2]:
            det = np.linalg.det(dxdP)
            inv = np.linalg.inv(dxdP)[:, :, None]
            grad = sum(dNt[..., k, None] * inv[..., k, :] for k in range(d))
        else:
            det = np.full((ne, nq), np.nan)
            grad = np.full(Nt.shape + (x.shape[-1],), np.nan)
        w = None
        if weights is not None:
            w = np.abs(det) * np.broadcast_to(weights, (ne, nq))
        return ShapeBlock(elements, Jm, Nt, grad, x, xi, det, dNt, w)

    def _block_size(self, nq):
        per = nq * self.Jmax * (2 + 2 * self.d) * 8 * 4
        return max(1, int(self.block_bytes // per))

    def quadrature_blocks(self, elements=None):
        """Yield :class:`ShapeBlock` objects with Gauss points and weights."""
        pts, wts = gauss_rule(self.nq1, self.d)
        els = np.arange(self.mesh.n_elements) if elements is None else np.asarray(elements)
        step = self._block_size(pts.shape[0])
        for i in range(0, els.size, step):
            yield self.evaluate(els[i:i + step], pts, wts)

    # -- point location ------------------------------------------------------

    def locate(self, patch, xi):
        """Elements of ``patch`` containing parametric points and parent coordinates."""
        mesh = self.mesh
        xi = np.asarray(xi, float).reshape(-1, self.d)
        els = np.flatnonzero(mesh.element_patch == patch)
        corners = mesh.element_param(els)
        lo, hi = corners.min(axis=1), corners.max(axis=1)
        tree = cKDTree((lo + hi) / 2)
        kk = min(16, els.size)
        _, cand = tree.query(xi, k=kk)
        cand = cand.reshape(xi.shape[0], -1)
        found = np.full(xi.shape[0], -1)
        parent = np.zeros_like(xi)
        for j in range(cand.shape[1]):
            todo = np.flatnonzero(found < 0)
            if todo.size == 0:
                break
            c = cand[todo, j]
            P = param_to_parent(corners[c], xi[todo][:, None, :])[:, 0]
            ok = np.all(np.abs(P) <= 1 + 1e-10, axis=1)
            found[todo[ok]] = els[c[ok]]
            parent[todo[ok]] = np.clip(P[ok], -1, 1)
        if np.any(found < 0):
            raise ValueError("parametric point outside the mesh of the patch")
        return found, parent

    def evaluate_at(self, patch, xi):
        """Shape functions at parametric points of ``patch`` (one element per point)."""
        els, parent = self.locate(patch, xi)
        return self.evaluate(els, parent[:, None, :])


def build_shape_table(mesh, conv_index, conv_spec, mode="nodal", quad_order=None):
    """Convenience constructor of :class:`ShapeTable`."""
    return ShapeTable(mesh, conv_index, conv_spec, mode, quad_order)


def geometric_consistency_check(patch, table, sample_count=100, rng=None):
    """Largest distance between ``sum_J N~_J x_J`` and ``F(xi)`` at random points."""
    rng = np.random.default_rng(0) if rng is None else rng
    a = patch.patch_id
    xi = rng.random((sample_count, patch.pdim))
    blk = table.evaluate_at(a, xi)
    return float(np.linalg.norm(blk.x[:, 0] - map_forward(patch, xi), axis=-1).max())


# ---------------------------------------------------------------------------
# degrees of freedom and interfaces

def make_dofmap(mesh, mode):
    """Patch id to node-to-dof arrays; interface nodes are split in penalty mode."""
    N = mesh.n_nodes
    dofmap = {a: np.arange(N) for a in mesh.patches}
    n = N
    if mode == "penalty":
        seen = set()
        for itf in detect_interfaces(mesh):
            m = dofmap[itf.beta].copy()
            new = [v for v in itf.nodes.tolist() if (itf.beta, v) not in seen]
            m[new] = n + np.arange(len(new))
            n += len(new)
            seen.update((itf.beta, v) for v in new)
            dofmap[itf.beta] = m
    return dofmap, n


def _element_dofs(mesh, dofmap, block):
    pa = mesh.element_patch[block.elements]
    out = np.full(block.J.shape, -1)
    for a in np.unique(pa):
        m = pa == a
        J = block.J[m]
        out[m] = np.where(J >= 0, dofmap[a][np.where(J >= 0, J, 0)], -1)
    return out


@dataclass
class InterfaceQuadrature:
    """Matched points on both sides of an interface.

    Attributes
    ----------
    x : ndarray, shape (k, nq, dim)
    w : ndarray, shape (k, nq)
        Line quadrature weights including the arc-length factor.
    elements : ndarray, shape (k, 2)
    parent : ndarray, shape (2, k, nq, d)
    t : ndarray, shape (k, nq)
        Parametric coordinate of the points along the interface (alpha side).
    """

    x: np.ndarray
    w: np.ndarray
    elements: np.ndarray
    parent: np.ndarray
    t: np.ndarray


def interface_quadrature(mesh, itf, nq, config=InverseMapConfig()):
    """Gauss points along each interface edge, located on both sides."""
    g, gw = np.polynomial.legendre.leggauss(nq)
    t = (g + 1) / 2
    return interface_points(mesh, itf, t, gw / 2)


def interface_points(mesh, itf, t, wt=None, config=InverseMapConfig()):
    """Points at fractions ``t`` of every interface edge on both sides."""
    t = np.asarray(t, float)
    a, b = itf.alpha, itf.beta
    Pa, Pb = mesh.patches[a], mesh.patches[b]
    ua, va = mesh.param[a][itf.edges[:, 0]], mesh.param[a][itf.edges[:, 1]]
    ub, vb = mesh.param[b][itf.edges[:, 0]], mesh.param[b][itf.edges[:, 1]]
    k = itf.edges.shape[0]
    xa = ua[:, None] + t[None, :, None] * (va - ua)[:, None]
    xb0 = ub[:, None] + t[None, :, None] * (vb - ub)[:, None]
    d = xa.shape[-1]
    x = map_forward(Pa, xa.reshape(-1, d))
    xb = invert_points(Pb, x, config, xi0=xb0.reshape(-1, d)).reshape(k, -1, d)
    Jf, _ = jacobian(Pa, xa.reshape(-1, d), check=False)
    tang = np.einsum("qcd,qd->qc", Jf, np.repeat(va - ua, t.size, axis=0))
    ds = np.linalg.norm(tang, axis=1).reshape(k, -1)
    w = None if wt is None else ds * wt[None, :]
    parents = []
    for els, pts in ((itf.elements[:, 0], xa), (itf.elements[:, 1], xb)):
        parents.append(np.clip(param_to_parent(mesh.element_param(els), pts), -1, 1))
    along = 1 - itf.sides[0][0]
    return InterfaceQuadrature(x.reshape(k, -1, x.shape[-1]), w, itf.elements,
                               np.stack(parents), xa[..., along])


def interface_values(table, itf_q, u_alpha, u_beta):
    """Traces of two nodal fields on both sides of an interface.

    ``u_alpha`` and ``u_beta`` are node-indexed arrays (scalar or vector
    per node). Returns arrays of shape ``(k, nq[, ncomp])``.
    """
    out = []
    for side, u in ((0, u_alpha), (1, u_beta)):
        blk = table.evaluate(itf_q.elements[:, side], itf_q.parent[side])
        out.append(blk.field(u)[0])
    return out


def interface_deviation(table, itf, u_alpha, u_beta, nq=None):
    """Relative L2 deviation ``||u1 - u2|| / (||u1|| + ||u2||)`` on an interface."""
    if itf is None or itf.edges.size == 0:
        raise ValueError("empty interface")
    nq = nq or table.nq1
    key = (itf.alpha, itf.beta, nq)
    if key not in table._interface_cache:
        table._interface_cache[key] = interface_quadrature(table.mesh, itf, nq)
    q = table._interface_cache[key]
    u1, u2 = interface_values(table, q, u_alpha, u_beta)

    def l2(v):
        v2 = v**2 if v.ndim == 2 else (v**2).sum(axis=-1)
        return np.sqrt(np.sum(q.w * v2))
    return l2(u1 - u2) / (l2(u1) + l2(u2))


# ---------------------------------------------------------------------------
# assembly and solution

@dataclass
class DofSystem:
    """Assembled linear system.

    Attributes
    ----------
    K : scipy.sparse.csr_matrix
    f : ndarray
    fixed : ndarray of int
        Constrained dofs.
    values : ndarray
        Prescribed values of ``fixed``.
    dofmap : dict
        Patch id to node-to-dof array.
    ncomp : int
        Unknowns per node (dof ``i`` of node ``n`` is ``ncomp * n + i``).
    """

    K: sp.csr_matrix
    f: np.ndarray
    fixed: np.ndarray
    values: np.ndarray
    dofmap: dict
    ncomp: int = 1
    info: dict = field(default_factory=dict)

    def node_field(self, u, patch):
        """Nodal values as seen from ``patch``, shape ``(N,)`` or ``(N, ncomp)``."""
        d = self.dofmap[patch]
        if self.ncomp == 1:
            return u[d]
        return np.stack([u[self.ncomp * d + i] for i in range(self.ncomp)], axis=-1)


class _Assembler:
    """Sparse matrix summed block by block to bound memory."""

    def __init__(self, n):
        self.n = n
        self.K = sp.csr_matrix((n, n))

    def add(self, dofs, ke, ncomp=1):
        """Add element matrices ``ke (ne, n, n)`` with node dofs ``(ne, n / ncomp)``."""
        if ncomp > 1:
            base = np.where(dofs >= 0, dofs, -1)
            dofs = np.where(base[..., None] >= 0, ncomp * base[..., None] + np.arange(ncomp), -1)
            dofs = dofs.reshape(dofs.shape[0], -1)
        r = np.broadcast_to(dofs[:, :, None], ke.shape)
        c = np.broadcast_to(dofs[:, None, :], ke.shape)
        m = (r >= 0) & (c >= 0) & (ke != 0)
        self.K = self.K + sp.csr_matrix((ke[m], (r[m], c[m])), shape=(self.n, self.n))

    def symmetric(self):
        """The summed matrix with round-off asymmetry of the duplicate sums removed."""
        return (0.5 * (self.K + self.K.T)).tocsr()


def _vector_add(f, dofs, fe, ncomp=1):
    if ncomp > 1:
        dofs = np.where(dofs[..., None] >= 0, ncomp * dofs[..., None] + np.arange(ncomp), -1)
        dofs = dofs.reshape(dofs.shape[0], -1)
        fe = fe.reshape(fe.shape[0], -1)
    m = dofs >= 0
    np.add.at(f, dofs[m], fe[m])


def _penalty(table, dofmap, rho, ncomp, asm):
    mesh = table.mesh
    for itf in detect_interfaces(mesh):
        q = interface_quadrature(mesh, itf, table.nq1)
        h = np.linalg.norm(mesh.nodes[itf.edges[:, 1]] - mesh.nodes[itf.edges[:, 0]], axis=1).mean()
        r = 1e4 / h if rho is None else rho
        ba = table.evaluate(q.elements[:, 0], q.parent[0])
        bb = table.evaluate(q.elements[:, 1], q.parent[1])
        da = _element_dofs(mesh, dofmap, ba)
        db = _element_dofs(mesh, dofmap, bb)
        Nj = np.concatenate([ba.N, -bb.N], axis=2)
        dofs = np.concatenate([da, db], axis=1)
        ke = r * np.einsum("eq,eqi,eqj->eij", q.w, Nj, Nj)
        if ncomp > 1:
            n = ke.shape[1]
            kk = np.zeros((ke.shape[0], n, ncomp, n, ncomp))
            for c in range(ncomp):
                kk[:, :, c, :, c] = ke
            ke = kk.reshape(ke.shape[0], n * ncomp, n * ncomp)
        asm.add(dofs, ke, ncomp)


def assemble_poisson(mesh, table, source, dirichlet, config=SolveConfig(), dirichlet_names=None):
    """Stiffness matrix and load of ``-Laplace(u) = b`` with Dirichlet data.

    Parameters
    ----------
    source : callable
        ``b(x)`` for physical points ``x (npts, dim)``.
    dirichlet : callable
        ``g(x)``; imposed at the nodes of boundary edges tagged
        ``"dirichlet"`` (or the named sides).
    """
    dofmap, n = make_dofmap(mesh, config.compat_mode)
    f = np.zeros(n)
    asm = _Assembler(n)
    for blk in table.quadrature_blocks():
        dofs = _element_dofs(mesh, dofmap, blk)
        ke = np.einsum("eq,eqic,eqjc->eij", blk.w, blk.grad, blk.grad)
        asm.add(dofs, ke)
        b = source(blk.x.reshape(-1, blk.x.shape[-1])).reshape(blk.w.shape)
        _vector_add(f, dofs, np.einsum("eq,eqi->ei", blk.w * b, blk.N))
    if config.compat_mode == "penalty":
        _penalty(table, dofmap, config.penalty_rho, 1, asm)
    K = asm.symmetric()
    nodes = _dirichlet_nodes(mesh, dirichlet_names)
    if nodes.size == 0:
        raise SolveError("no Dirichlet dofs: the system is singular")
    g = np.asarray(dirichlet(mesh.nodes[nodes]), float).reshape(-1)
    fixed, values = [], []
    for a, m in dofmap.items():
        own = np.intersect1d(nodes, mesh.patch_nodes(a))
        fixed.append(m[own])
        values.append(g[np.searchsorted(nodes, own)])
    fixed, idx = np.unique(np.concatenate(fixed), return_index=True)
    system = DofSystem(K, f, fixed, np.concatenate(values)[idx], dofmap)
    _export(system, config)
    return system


def _dirichlet_nodes(mesh, names=None):
    if mesh.d == 1:
        return mesh.boundary_nodes
    if names is not None:
        return mesh.nodes_named(*names)
    return np.unique(mesh.boundary_edges[mesh.boundary_tags == "dirichlet"])


def plane_stress_matrix(E, nu):
    return E / (1 - nu**2) * np.array([[1, nu, 0], [nu, 1, 0], [0, 0, (1 - nu) / 2]])


def _export(system, config):
    if config.export_matrix:
        mmwrite(config.export_matrix, system.K)


def _edge_parent(mesh, elements, edges, t):
    """Parent coordinates of points at fractions ``t`` along element edges."""
    E = mesh.elements[elements]
    ref = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], float)
    i0 = np.argmax(E == edges[:, :1], axis=1)
    i1 = np.argmax(E == edges[:, 1:], axis=1)
    p0, p1 = ref[i0], ref[i1]
    return p0[:, None, :] + t[None, :, None] * (p1 - p0)[:, None, :], p1 - p0


def _boundary_owner(mesh, edges):
    key = {}
    for e, el in enumerate(mesh.elements.tolist()):
        for c in range(len(el)):
            key[frozenset((el[c], el[(c + 1) % len(el)]))] = e
    return np.array([key[frozenset(x)] for x in edges.tolist()])


def assemble_elasticity(mesh, table, E, nu, config=SolveConfig(), stress=None,
                        traction_sides=("left", "top"), constraints=None, displacement=None):
    """Plane-stress elasticity system.

    Parameters
    ----------
    E, nu : float
        Young's modulus and Poisson's ratio.
    stress : callable, optional
        ``stress(x) -> (npts, 3)`` with ``(s_xx, s_yy, s_xy)``; its traction
        ``sigma . n`` is applied on ``traction_sides``.
    constraints : dict
        Side name to the constrained displacement components. Defaults to
        the quarter-symmetry conditions ``{"bottom": (1,), "right": (0,)}``.
    displacement : callable, optional
        ``u(x) -> (npts, 2)`` prescribed on constrained components; zero
        when omitted.
    """
    if constraints is None:
        constraints = {"bottom": (1,), "right": (0,)}
    D = plane_stress_matrix(E, nu)
    dofmap, n = make_dofmap(mesh, config.compat_mode)
    f = np.zeros(2 * n)
    asm = _Assembler(2 * n)
    for blk in table.quadrature_blocks():
        dofs = _element_dofs(mesh, dofmap, blk)
        gx, gy = blk.grad[..., 0], blk.grad[..., 1]
        w = blk.w
        kxx = np.einsum("eq,eqi,eqj->eij", w, D[0, 0] * gx, gx) + np.einsum("eq,eqi,eqj->eij", w, D[2, 2] * gy, gy)
        kyy = np.einsum("eq,eqi,eqj->eij", w, D[1, 1] * gy, gy) + np.einsum("eq,eqi,eqj->eij", w, D[2, 2] * gx, gx)
        kxy = np.einsum("eq,eqi,eqj->eij", w, D[0, 1] * gx, gy) + np.einsum("eq,eqi,eqj->eij", w, D[2, 2] * gy, gx)
        ne, nj = kxx.shape[:2]
        ke = np.empty((ne, nj, 2, nj, 2))
        ke[:, :, 0, :, 0] = kxx
        ke[:, :, 1, :, 1] = kyy
        ke[:, :, 0, :, 1] = kxy
        ke[:, :, 1, :, 0] = np.swapaxes(kxy, 1, 2)
        asm.add(dofs, ke.reshape(ne, 2 * nj, 2 * nj), 2)
    if stress is not None and traction_sides:
        mask = np.isin(mesh.boundary_names, traction_sides)
        edges = mesh.boundary_edges[mask]
        if edges.size:
            els = _boundary_owner(mesh, edges)
            g, gw = np.polynomial.legendre.leggauss(table.nq1)
            t = (g + 1) / 2
            parent, dP = _edge_parent(mesh, els, edges, t)
            blk = table.evaluate(els, parent)
            dofs = _element_dofs(mesh, dofmap, blk)
            # tangent dx/dt along the edge from the isoparametric map
            tang = np.einsum("eqjk,ejc,ek->eqc", blk.dN_parent, _node_xy(mesh, blk.J), dP)
            ds = np.linalg.norm(tang, axis=-1)
            normal = np.stack([tang[..., 1], -tang[..., 0]], axis=-1) / ds[..., None]
            cen = mesh.nodes[mesh.elements[els]].mean(axis=1)
            flip = np.einsum("eqc,eqc->eq", normal, cen[:, None, :] - blk.x) > 0
            normal[flip] *= -1
            s = stress(blk.x.reshape(-1, 2)).reshape(blk.x.shape[:2] + (3,))
            tx = s[..., 0] * normal[..., 0] + s[..., 2] * normal[..., 1]
            ty = s[..., 2] * normal[..., 0] + s[..., 1] * normal[..., 1]
            wq = ds * gw[None, :] / 2
            fe = np.stack([np.einsum("eq,eqj->ej", wq * tx, blk.N),
                           np.einsum("eq,eqj->ej", wq * ty, blk.N)], axis=-1)
            _vector_add(f, dofs, fe, 2)
    if config.compat_mode == "penalty":
        _penalty(table, dofmap, config.penalty_rho, 2, asm)
    K = asm.symmetric()
    fixed, values = [], []
    for name, comps in constraints.items():
        nodes = mesh.nodes_named(name)
        if nodes.size == 0:
            continue
        u = np.zeros((nodes.size, 2)) if displacement is None else \
            np.asarray(displacement(mesh.nodes[nodes]), float).reshape(-1, 2)
        for a, m in dofmap.items():
            own = np.isin(nodes, mesh.patch_nodes(a))
            for c in comps:
                fixed.append(2 * m[nodes[own]] + c)
                values.append(u[own, c])
    if not fixed:
        raise SolveError("no Dirichlet dofs: the system is singular")
    fixed, idx = np.unique(np.concatenate(fixed), return_index=True)
    system = DofSystem(K, f, fixed, np.concatenate(values)[idx], dofmap, ncomp=2)
    _export(system, config)
    return system


def _node_xy(mesh, J):
    X = mesh.nodes[np.where(J >= 0, J, 0)]
    X[J < 0] = 0.0
    return X


def solve_system(system, config=SolveConfig()):
    """Solve with the constrained dofs eliminated.

    Returns
    -------
    u : ndarray
        Full dof vector.

    Raises
    ------
    SolveError
        Singular matrix, typically from missing constraints.
    """
    K, f = system.K, system.f
    n = f.size
    u = np.zeros(n)
    u[system.fixed] = system.values
    free = np.setdiff1d(np.arange(n), system.fixed)
    if free.size == 0:
        return u
    Kff = K[free][:, free].tocsc()
    rhs = f[free] - K[free][:, system.fixed] @ system.values
    if config.solver == "direct":
        try:
            lu = spla.splu(Kff)
        except RuntimeError as err:
            raise SolveError(f"singular stiffness matrix ({err}); check the Dirichlet constraints") from err
        x = lu.solve(rhs)
        for _ in range(3):  # iterative refinement with the same factors
            r = rhs - Kff @ x
            if np.linalg.norm(r) <= 1e-13 * np.linalg.norm(rhs):
                break
            x = x + lu.solve(r)
    else:
        dinv = 1.0 / Kff.diagonal()
        M = spla.LinearOperator(Kff.shape, matvec=lambda v: dinv * v)
        x, info = spla.cg(Kff, rhs, rtol=config.tol, maxiter=20 * free.size, M=M)
        if info != 0:
            raise SolveError(f"conjugate gradients did not converge (info={info})")
    if not np.all(np.isfinite(x)):
        raise SolveError("non-finite solution; the matrix may be singular")
    res = np.linalg.norm(Kff @ x - rhs) / max(np.linalg.norm(rhs), 1e-300)
    system.info["residual"] = res
    if config.solver == "direct" and res > 1e-10:
        raise SolveError(f"residual {res:.2e} after direct solve; the matrix is near singular")
    u[free] = x
    return u


# ---------------------------------------------------------------------------
# error measures

def compute_error_norms(table, u_nodes, exact, exact_grad):
    """L2, broken H1 and energy errors of a scalar field.

    Parameters
    ----------
    u_nodes : dict or ndarray
        Patch id to node-indexed values (or one array used by all
        patches).
    exact, exact_grad : callable
        ``u(x) -> (npts,)`` and ``grad u(x) -> (npts, dim)``.

    Returns
    -------
    dict
        ``L2``, ``H1_broken`` (root-sum-square of patchwise H1 norms),
        ``energy`` (``sqrt(int |grad e|^2)``), the relative variants and the
        per-patch contributions.
    """
    mesh = table.mesh
    acc = {a: np.zeros(4) for a in mesh.patches}
    for blk in table.quadrature_blocks():
        pa = mesh.element_patch[blk.elements]
        xs = blk.x.reshape(-1, blk.x.shape[-1])
        ue = np.asarray(exact(xs)).reshape(blk.w.shape)
        ge = np.asarray(exact_grad(xs)).reshape(blk.grad.shape[:2] + (-1,))
        for a in np.unique(pa):
            m = pa == a
            u = u_nodes[a] if isinstance(u_nodes, dict) else u_nodes
            uj = _gather(u, blk.J[m])
            uh = np.einsum("eqj,ej->eq", blk.N[m], uj)
            gh = np.einsum("eqjc,ej->eqc", blk.grad[m], uj)
            w = blk.w[m]
            acc[a] += [np.sum(w * (uh - ue[m])**2), np.sum(w * ((gh - ge[m])**2).sum(-1)),
                       np.sum(w * ue[m]**2), np.sum(w * (ge[m]**2).sum(-1))]
    tot = sum(acc.values())
    out = {
        "L2": np.sqrt(tot[0]),
        "H1_broken": np.sqrt(tot[0] + tot[1]),
        "energy": np.sqrt(tot[1]),
        "L2_relative": np.sqrt(tot[0] / tot[2]) if tot[2] > 0 else np.nan,
        "energy_relative": np.sqrt(tot[1] / tot[3]) if tot[3] > 0 else np.nan,
        "per_patch": {a: {"L2": np.sqrt(v[0]), "H1": np.sqrt(v[0] + v[1])} for a, v in acc.items()},
    }
    return out


def elastic_energy_error(table, u_nodes, stress, E, nu):
    """Energy-norm stress error ``sqrt(int 1/2 e . C^{-1} e)`` with ``e = sigma^h - sigma``.

    Returns the absolute error and the same norm of the exact stress.
    """
    D = plane_stress_matrix(E, nu)
    C = np.linalg.inv(D)
    mesh = table.mesh
    err = ref = 0.0
    for blk in table.quadrature_blocks():
        pa = mesh.element_patch[blk.elements]
        se = stress(blk.x.reshape(-1, 2)).reshape(blk.w.shape + (3,))
        for a in np.unique(pa):
            m = pa == a
            u = u_nodes[a] if isinstance(u_nodes, dict) else u_nodes
            uj = _gather(u, blk.J[m])
            g = np.einsum("eqjc,ejk->eqkc", blk.grad[m], uj)
            eps = np.stack([g[..., 0, 0], g[..., 1, 1], g[..., 0, 1] + g[..., 1, 0]], axis=-1)
            sh = eps @ D.T
            e = sh - se[m]
            w = blk.w[m]
            err += np.sum(w * 0.5 * np.einsum("eqi,ij,eqj->eq", e, C, e))
            ref += np.sum(w * 0.5 * np.einsum("eqi,ij,eqj->eq", se[m], C, se[m]))
    return np.sqrt(err), np.sqrt(ref)


def interpolation_error(table, values, exact):
    """L2 error of the C-IGA interpolant of nodal ``values`` against ``exact``."""
    tot = 0.0
    for blk in table.quadrature_blocks():
        uh = np.einsum("eqj,ej->eq", blk.N, _gather(values, blk.J))
        ue = np.asarray(exact(blk.x.reshape(-1, blk.x.shape[-1]))).reshape(blk.w.shape)
        tot += np.sum(blk.w * (uh - ue)**2)
    return np.sqrt(tot)


def setup(mesh, spec, mode="nodal", quad_order=None):
    """Patch index and shape table for a mesh in one call."""
    index = build_conv_patch_sets(mesh, spec.s)
    return ShapeTable(mesh, index, spec, mode, quad_order)
