"""Multi-patch meshes, interfaces, convolution patch index sets and generators.

Every physical node carries one parametric coordinate per CAD patch it
belongs to. Elements are subdivided into *regions*, one per knot span of
the coarsest spline mapping; convolution patches are confined to regions.
"""
from dataclasses import dataclass, field
import json

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .inverse_map import InverseMapConfig, invert_mesh
from .spline_core import KnotVector, NurbsPatch, map_forward, patch_from_dict

HOLE_RADIUS = 0.5
PLATE_HALF_WIDTH = 4.0


class NodalCompatibilityError(ValueError):
    """Patches meet along an edge without sharing its nodes."""


class RegionLayoutError(ValueError):
    """Regions do not satisfy the regular-grid requirements of G0 mode."""


@dataclass
class Region:
    """Elements of one patch inside one coarse knot span.

    Attributes
    ----------
    grid : ndarray of int or None
        Node ids arranged as ``grid[i, j]`` (``i`` along the first
        parametric direction) when the region is a tensor grid.
    scale : ndarray, shape (d,)
        Parametric element size per direction.
    """

    id: int
    patch: int
    span: tuple
    elements: np.ndarray
    nodes: np.ndarray
    grid: np.ndarray = None
    scale: np.ndarray = None


@dataclass
class MultiPatchMesh:
    """Conforming multi-patch mesh.

    Attributes
    ----------
    nodes : ndarray, shape (N, dim)
        Physical coordinates.
    elements : ndarray of int, shape (E, 2**d)
        Node ids; quads counterclockwise in the parametric domain
        starting at the lower-left corner, segments left to right.
    element_patch : ndarray of int, shape (E,)
    patches : dict
        Patch id to :class:`NurbsPatch`.
    param : dict
        Patch id to an ``(N, d)`` array of parametric coordinates, NaN for
        nodes outside the patch.
    boundary_edges : ndarray of int, shape (nb, 2)
        2D only; 1D meshes list the two end nodes in ``boundary_nodes``.
    boundary_names : ndarray of str
        Side labels such as ``"hole"``.
    boundary_tags : ndarray of str
        ``"dirichlet"`` or ``"neumann"``.
    """

    nodes: np.ndarray
    elements: np.ndarray
    element_patch: np.ndarray
    patches: dict
    param: dict
    boundary_edges: np.ndarray = None
    boundary_names: np.ndarray = None
    boundary_tags: np.ndarray = None
    breakpoints: dict = None
    regions: list = field(default=None, repr=False)
    element_region: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=float)
        if self.nodes.ndim == 1:
            self.nodes = self.nodes[:, None]
        self.elements = np.asarray(self.elements, dtype=int)
        self.element_patch = np.asarray(self.element_patch, dtype=int)
        if self.breakpoints is None:
            self.breakpoints = {a: [kv.breakpoints for kv in P.knot_vectors]
                                for a, P in self.patches.items()}
        if self.boundary_edges is None and self.d == 2:
            self.boundary_edges = _boundary_edges(self.elements)
        if self.boundary_names is None and self.boundary_edges is not None:
            self.boundary_names = np.full(len(self.boundary_edges), "boundary")
        if self.boundary_tags is None and self.boundary_edges is not None:
            self.boundary_tags = np.full(len(self.boundary_edges), "dirichlet")
        self._build_regions()

    @property
    def d(self):
        return self.elements.shape[1] // 2 if self.elements.shape[1] == 4 else 1

    @property
    def n_nodes(self):
        return self.nodes.shape[0]

    @property
    def n_elements(self):
        return self.elements.shape[0]

    def patch_nodes(self, alpha):
        return np.unique(self.elements[self.element_patch == alpha])

    @property
    def boundary_nodes(self):
        if self.d == 1:
            ids, counts = np.unique(self.elements, return_counts=True)
            return ids[counts == 1]
        return np.unique(self.boundary_edges)

    def nodes_named(self, *names):
        """Nodes lying on boundary edges with the given side names."""
        if self.d == 1:
            return self.boundary_nodes
        mask = np.isin(self.boundary_names, names)
        return np.unique(self.boundary_edges[mask])

    def element_param(self, e):
        """Parametric corner coordinates of elements, shape ``(ne, 2**d, d)``."""
        e = np.atleast_1d(e)
        out = np.empty(e.shape + (self.elements.shape[1], self.d))
        for a in np.unique(self.element_patch[e]):
            m = self.element_patch[e] == a
            out[m] = self.param[a][self.elements[e[m]]]
        return out

    def _build_regions(self):
        cen = self.element_param(np.arange(self.n_elements)).mean(axis=1)
        spans = np.zeros((self.n_elements, self.d), dtype=int)
        for a in np.unique(self.element_patch):
            m = self.element_patch == a
            for k, bp in enumerate(self.breakpoints[a]):
                spans[m, k] = np.clip(np.searchsorted(bp, cen[m, k], side="right") - 1, 0, bp.size - 2)
        keys = np.column_stack([self.element_patch, spans])
        uniq, inv = np.unique(keys, axis=0, return_inverse=True)
        uniq = [(int(k[0]), tuple(int(v) for v in k[1:])) for k in uniq]
        self.element_region = inv.reshape(-1)
        self.regions = []
        for i, (a, span) in enumerate(uniq):
            els = np.flatnonzero(self.element_region == i)
            nodes = np.unique(self.elements[els])
            reg = Region(i, a, span, els, nodes)
            reg.grid = _detect_grid(self, reg)
            ext = self.element_param(els)
            reg.scale = (ext.max(axis=1) - ext.min(axis=1)).mean(axis=0)
            self.regions.append(reg)

    def node_regions(self, node):
        return [r for r in self.regions if node in set(r.nodes.tolist())]

    def validate(self, tol=1e-10):
        """Round-trip check ``||F(xi_I) - x_I|| < tol`` for every patch node."""
        worst = 0.0
        for a, P in self.patches.items():
            ids = self.patch_nodes(a)
            err = np.linalg.norm(map_forward(P, self.param[a][ids]) - self.nodes[ids], axis=1)
            worst = max(worst, float(err.max(initial=0.0)))
        if not worst < tol:
            raise ValueError(f"round-trip residual {worst:.3e} exceeds {tol:g}")
        return worst


def _element_edges(elements):
    k = elements.shape[1]
    return np.stack([elements, np.roll(elements, -1, axis=1)], axis=-1).reshape(-1, 2) if k > 2 \
        else elements.copy()


def _boundary_edges(elements):
    edges = _element_edges(elements)
    key = np.sort(edges, axis=1)
    _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    return edges[counts[inv.reshape(-1)] == 1]


def _detect_grid(mesh, reg):
    """Arrange region nodes as a tensor grid if they form one."""
    xi = mesh.param[reg.patch][reg.nodes]
    if mesh.d == 1:
        order = np.argsort(xi[:, 0])
        return reg.nodes[order]
    keys = [np.round(xi[:, k], 12) for k in range(2)]
    u = [np.unique(k) for k in keys]
    if u[0].size * u[1].size != reg.nodes.size:
        return None
    grid = np.full((u[0].size, u[1].size), -1)
    grid[np.searchsorted(u[0], keys[0]), np.searchsorted(u[1], keys[1])] = reg.nodes
    if np.any(grid < 0):
        return None
    cells = np.stack([grid[:-1, :-1], grid[1:, :-1], grid[1:, 1:], grid[:-1, 1:]], axis=-1).reshape(-1, 4)
    have = {frozenset(c) for c in mesh.elements[reg.elements].tolist()}
    if len(have) != len(cells) or any(frozenset(c) not in have for c in cells.tolist()):
        return None
    return grid


# ---------------------------------------------------------------------------
# interfaces

@dataclass
class Interface:
    """Shared boundary between patches ``alpha < beta``.

    Attributes
    ----------
    nodes : ndarray of int
        Shared nodes ordered along the interface.
    edges : ndarray of int, shape (k, 2)
        Consecutive node pairs.
    elements : ndarray of int, shape (k, 2)
        Owning element on the alpha and beta side of each edge.
    sides : tuple
        ``(axis, value)`` per side: the parametric coordinate that is
        constant along the interface and its value.
    """

    alpha: int
    beta: int
    nodes: np.ndarray
    edges: np.ndarray
    elements: np.ndarray
    sides: tuple


def _segment_distance(pts, a, b):
    ab = b - a
    t = np.clip(np.einsum("ij,ij->i", pts - a, ab) / np.einsum("ij,ij->i", ab, ab), 0.0, 1.0)
    return np.linalg.norm(pts - (a + t[:, None] * ab), axis=1), t


def detect_interfaces(mesh, tol=1e-12):
    """Interfaces between patches of a conforming mesh.

    Raises
    ------
    NodalCompatibilityError
        When patches meet geometrically along edges that do not share the
        same nodes (hanging or duplicated nodes).
    """
    if mesh.d == 1:
        return []
    E = mesh.elements
    edges = _element_edges(E)
    owner = np.repeat(np.arange(E.shape[0]), E.shape[1])
    key = np.sort(edges, axis=1)
    _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    # edges owned by one element: either domain boundary or a non-conforming seam
    single = np.flatnonzero(counts[inv] == 1)
    if single.size and len(mesh.patches) > 1:
        mid = mesh.nodes[edges[single]].mean(axis=1)
        length = np.linalg.norm(np.diff(mesh.nodes[edges[single]], axis=1)[:, 0], axis=1)
        tree = cKDTree(mid)
        pat = mesh.element_patch[owner[single]]
        for i, j in tree.query_pairs(0.25 * length.min()):
            if pat[i] != pat[j]:
                raise NodalCompatibilityError(
                    f"patches {pat[i]} and {pat[j]} overlap along edges {edges[single[i]].tolist()} "
                    f"and {edges[single[j]].tolist()} without sharing nodes")
        ntree = cKDTree(mesh.nodes)
        for k, s in enumerate(single):
            a, b = mesh.nodes[edges[s]]
            near = ntree.query_ball_point((a + b) / 2, 0.5 * np.linalg.norm(b - a) + tol)
            near = [n for n in near if n not in edges[s]]
            if near:
                dist, t = _segment_distance(mesh.nodes[near], a[None], b[None])
                hit = (dist < 1e-9 * max(1.0, length[k])) & (t > 1e-6) & (t < 1 - 1e-6)
                if np.any(hit):
                    raise NodalCompatibilityError(
                        f"hanging node {near[int(np.flatnonzero(hit)[0])]} on edge {edges[s].tolist()}")
    shared = np.flatnonzero(counts == 2)
    pairs = {}
    for g in shared:
        k = np.flatnonzero(inv == g)
        e1, e2 = owner[k]
        p1, p2 = mesh.element_patch[[e1, e2]]
        if p1 == p2:
            continue
        if p1 > p2:
            e1, e2, p1, p2 = e2, e1, p2, p1
        pairs.setdefault((int(p1), int(p2)), []).append((key[k[0]], e1, e2))
    out = []
    for (a, b), items in sorted(pairs.items()):
        ed = np.array([it[0] for it in items])
        els = np.array([[it[1], it[2]] for it in items])
        order_nodes, order_edges = _chain(ed)
        ed, els = ed[order_edges], els[order_edges]
        # orient each edge along the chain
        flip = ed[:, 0] != order_nodes[:-1]
        ed[flip] = ed[flip][:, ::-1]
        sides = (_constant_side(mesh.param[a][order_nodes]), _constant_side(mesh.param[b][order_nodes]))
        out.append(Interface(a, b, order_nodes, ed, els, sides))
    return out


def _chain(edges):
    """Order edges into a path, returning the node sequence and edge order."""
    adj = {}
    for i, (u, v) in enumerate(edges.tolist()):
        adj.setdefault(u, []).append((v, i))
        adj.setdefault(v, []).append((u, i))
    ends = [n for n, l in adj.items() if len(l) == 1]
    if len(ends) != 2 or any(len(l) > 2 for l in adj.values()):
        raise NodalCompatibilityError("interface edges do not form a single open curve")
    start = min(ends)
    nodes, order, used = [start], [], set()
    cur = start
    while len(order) < len(edges):
        nxt, i = next((v, i) for v, i in adj[cur] if i not in used)
        used.add(i)
        order.append(i)
        nodes.append(nxt)
        cur = nxt
    return np.array(nodes), np.array(order)


def _constant_side(xi, tol=1e-10):
    for k in range(xi.shape[1]):
        for v in (0.0, 1.0):
            if np.all(np.abs(xi[:, k] - v) < tol):
                return (k, v)
    raise NodalCompatibilityError("interface is not a full parametric edge of its patch")


# ---------------------------------------------------------------------------
# convolution patch index sets

@dataclass
class ConvPatchIndex:
    """Node sets of the convolution patches.

    Attributes
    ----------
    s : int
    node_sets : list of dict
        Per region, center node id to the sorted member ids ``A_s``.
    element_sets : list of ndarray
        Per element, the sorted ids ``A_s^e`` (union over its nodes).
    partition : dict
        ``(alpha, beta, node)`` to ``(P, Q_alpha, Q_beta)`` for nodes on an
        interface.
    """

    s: int
    node_sets: list
    element_sets: list
    partition: dict

    def node_set(self, region, node):
        return self.node_sets[region][node]

    def max_element_size(self):
        return max(len(j) for j in self.element_sets)


def _region_adjacency(mesh, reg):
    loc = {n: i for i, n in enumerate(reg.nodes.tolist())}
    els = mesh.elements[reg.elements]
    rows = np.vectorize(loc.get)(els).ravel()
    cols = np.repeat(np.arange(els.shape[0]), els.shape[1])
    A = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(reg.nodes.size, els.shape[0]))
    M = (A @ A.T).astype(bool).astype(np.int8)
    return A, M


def build_conv_patch_sets(mesh, s, coarse_span_boundaries=None):
    """Convolution patch node sets confined to regions.

    Parameters
    ----------
    mesh : MultiPatchMesh
    s : int
        Patch size in element layers.
    coarse_span_boundaries : dict, optional
        Patch id to a list of breakpoint arrays overriding the knot spans
        used for truncation. The mesh regions are rebuilt when given.

    Returns
    -------
    ConvPatchIndex
    """
    if s < 0:
        raise ValueError("s must be non-negative")
    if coarse_span_boundaries is not None:
        mesh.breakpoints = {a: [np.asarray(b, float) for b in bps]
                            for a, bps in coarse_span_boundaries.items()}
        mesh._build_regions()
    node_sets = []
    element_sets = [None] * mesh.n_elements
    for reg in mesh.regions:
        A, M = _region_adjacency(mesh, reg)
        R = sp.identity(reg.nodes.size, format="csr", dtype=np.int8)
        for _ in range(s):
            R = (R @ M).astype(bool).astype(np.int8)
        R = sp.csr_matrix(R)
        R.sort_indices()
        sets = {int(reg.nodes[i]): reg.nodes[R.indices[R.indptr[i]:R.indptr[i + 1]]]
                for i in range(reg.nodes.size)}
        node_sets.append(sets)
        E = sp.csr_matrix((A.T @ R).astype(bool))
        E.sort_indices()
        for k, e in enumerate(reg.elements):
            element_sets[e] = reg.nodes[E.indices[E.indptr[k]:E.indptr[k + 1]]]
    partition = {}
    for itf in detect_interfaces(mesh):
        for node in itf.nodes.tolist():
            sets = {}
            for side in (itf.alpha, itf.beta):
                members = [node_sets[r.id][node] for r in mesh.regions
                           if r.patch == side and node in node_sets[r.id]]
                sets[side] = np.unique(np.concatenate(members))
            P = np.intersect1d(sets[itf.alpha], sets[itf.beta])
            partition[(itf.alpha, itf.beta, node)] = (
                P, np.setdiff1d(sets[itf.alpha], P), np.setdiff1d(sets[itf.beta], P))
    return ConvPatchIndex(s, node_sets, element_sets, partition)


# ---------------------------------------------------------------------------
# region boundaries for the product-rule construction

@dataclass
class RegionSide:
    region: int
    axis: int
    end: int
    nodes: np.ndarray


@dataclass
class RegionSeam:
    """Full side shared by two regions.

    ``transfer = (c0, c1)`` maps the along-side parametric coordinate of
    side ``b`` to that of side ``a``: ``t_a = c0 + c1 * t_b``.
    """

    a: RegionSide
    b: RegionSide
    transfer: tuple


def _region_sides(reg):
    g = reg.grid
    return [RegionSide(reg.id, 0, 0, g[0, :]), RegionSide(reg.id, 0, 1, g[-1, :]),
            RegionSide(reg.id, 1, 0, g[:, 0]), RegionSide(reg.id, 1, 1, g[:, -1])]


def region_seams(mesh, tol=1e-10):
    """Region sides shared with another region (patch interfaces and knot lines).

    Raises
    ------
    RegionLayoutError
        If a region is not a tensor grid, a side is only partly shared, or
        the along-side coordinates of the two sides are not affinely related.
    """
    if mesh.d != 2:
        return []
    for reg in mesh.regions:
        if reg.grid is None:
            raise RegionLayoutError(f"region {reg.id} is not a regular tensor grid")
    sides = [sd for reg in mesh.regions for sd in _region_sides(reg)]
    seams = []
    for i, sa in enumerate(sides):
        set_a = set(sa.nodes.tolist())
        for sb in sides[i + 1:]:
            if sb.region == sa.region:
                continue
            common = set_a & set(sb.nodes.tolist())
            if len(common) < 2:
                continue
            if common != set_a or common != set(sb.nodes.tolist()):
                raise RegionLayoutError(
                    f"regions {sa.region} and {sb.region} share only part of a side")
            ra, rb = mesh.regions[sa.region], mesh.regions[sb.region]
            nb = sb.nodes if np.array_equal(sb.nodes, sa.nodes) else sb.nodes[::-1]
            if not np.array_equal(nb, sa.nodes):
                raise RegionLayoutError("shared side nodes are not in matching order")
            ta = mesh.param[ra.patch][sa.nodes, 1 - sa.axis]
            tb = mesh.param[rb.patch][sa.nodes, 1 - sb.axis]
            c1, c0 = np.polyfit(tb, ta, 1)
            if np.abs(c0 + c1 * tb - ta).max() > tol:
                raise RegionLayoutError(
                    f"regions {sa.region} and {sb.region}: side coordinates are not affinely related")
            seams.append(RegionSeam(sa, RegionSide(sb.region, sb.axis, sb.end, sa.nodes), (c0, c1)))
    return seams


# ---------------------------------------------------------------------------
# generators

def _linear_blend(inner, outer, weights, radial_knots):
    """Control net interpolating linearly between two rational curves."""
    kv = KnotVector(radial_knots, 2)
    g = np.array([kv.knots[k + 1: k + 3].mean() for k in range(kv.basis_count)])
    inner, outer = np.asarray(inner, float), np.asarray(outer, float)
    P = (1 - g)[None, :, None] * inner[:, None, :] + g[None, :, None] * outer[:, None, :]
    W = np.repeat(np.asarray(weights, float)[:, None], g.size, axis=1)
    return kv, P, W


def plate_patches(two_patch=True, split_second=False, radius=HOLE_RADIUS, half_width=PLATE_HALF_WIDTH):
    """NURBS patches of the quarter plate with a hole (second quadrant).

    The plate occupies ``[-L, 0] x [0, L]`` minus the disk ``r < R``. With
    ``two_patch`` it is cut along the 135 degree diagonal: patch 1 sweeps
    the angle from 180 to 135 degrees, patch 2 from 135 to 90 degrees.
    The first parametric direction is angular, the second radial, and
    each patch is a linear blend between the hole arc and the outer
    boundary, so the weights only vary with the angle.

    Parameters
    ----------
    two_patch : bool
        Two patches, or a single patch with a C0 knot line on the diagonal.
    split_second : bool
        Give patch 2 the same two radial spans as patch 1.
    """
    R, L = radius, half_width
    t = np.tan(np.pi / 8)
    c = np.cos(np.pi / 8)
    s2 = np.sqrt(0.5)
    arc1 = [(-R, 0.0), (-R, R * t), (-R * s2, R * s2)]
    out1 = [(-L, 0.0), (-L, L * t), (-L, L)]
    arc2 = [(-R * s2, R * s2), (-R * t, R), (0.0, R)]
    out2 = [(-L, L), (-L * t, L), (0.0, L)]
    w = [1.0, c, 1.0]
    ang = KnotVector([0, 0, 0, 1, 1, 1], 2)
    split = [0, 0, 0, 0.5, 1, 1, 1]
    whole = [0, 0, 0, 1, 1, 1]
    if not two_patch:
        angd = KnotVector([0, 0, 0, 0.5, 0.5, 1, 1, 1], 2)
        kv, P, W = _linear_blend(arc1 + arc2[1:], out1 + out2[1:], w + w[1:], whole)
        return {1: NurbsPatch((angd, kv), P, W, patch_id=1)}
    kv1, P1, W1 = _linear_blend(arc1, out1, w, split)
    kv2, P2, W2 = _linear_blend(arc2, out2, w, split if split_second else whole)
    return {1: NurbsPatch((ang, kv1), P1, W1, patch_id=1),
            2: NurbsPatch((ang, kv2), P2, W2, patch_id=2)}


def _structured(patches, counts, shared, side_names, tags, glue_tol=1e-12):
    """Mesh uniform parametric grids of several patches glued along full sides.

    Parameters
    ----------
    counts : dict
        Patch id to ``(n_xi, n_eta)``.
    shared : list of tuple
        ``(alpha, (axis, end), beta, (axis, end))`` sides identified node by
        node in increasing order of the along-side index.
    side_names : dict
        ``(patch, axis, end)`` to a boundary name.
    tags : dict
        Boundary name to ``"dirichlet"`` or ``"neumann"``.
    """
    grids, xs, params = {}, [], []
    offset = 0
    for a in sorted(patches):
        nx, ny = counts[a]
        g = np.full((nx + 1, ny + 1), -1)
        for (pa, sa, pb, sb) in shared:
            if pb == a:
                src = grids[pa]
                along = src[0 if sa[1] == 0 else -1, :] if sa[0] == 0 else src[:, 0 if sa[1] == 0 else -1]
                if sb[0] == 0:
                    g[0 if sb[1] == 0 else -1, :] = along
                else:
                    g[:, 0 if sb[1] == 0 else -1] = along
        free = g < 0
        g[free] = offset + np.arange(free.sum())
        offset += free.sum()
        grids[a] = g
    N = offset
    nodes = np.full((N, 2), np.nan)
    param = {}
    elements, owner = [], []
    bedges, bnames = [], []
    for a in sorted(patches):
        nx, ny = counts[a]
        u, v = np.meshgrid(np.linspace(0, 1, nx + 1), np.linspace(0, 1, ny + 1), indexing="ij")
        xi = np.stack([u.ravel(), v.ravel()], axis=-1)
        x = map_forward(patches[a], xi)
        g = grids[a].ravel()
        known = ~np.isnan(nodes[g, 0])
        if np.any(known):
            gap = np.abs(nodes[g[known]] - x[known]).max()
            if gap > glue_tol * PLATE_HALF_WIDTH * 10:
                raise NodalCompatibilityError(f"glued sides differ by {gap:.2e}")
        nodes[g[~known]] = x[~known]
        pa = np.full((N, 2), np.nan)
        pa[g] = xi
        param[a] = pa
        G = grids[a]
        el = np.stack([G[:-1, :-1], G[1:, :-1], G[1:, 1:], G[:-1, 1:]], axis=-1).reshape(-1, 4)
        elements.append(el)
        owner.append(np.full(el.shape[0], a))
        for axis in (0, 1):
            for end in (0, 1):
                name = side_names.get((a, axis, end))
                if name is None:
                    continue
                idx = -1 if end else 0
                line = G[idx, :] if axis == 0 else G[:, idx]
                e = np.stack([line[:-1], line[1:]], axis=-1)
                bedges.append(e)
                bnames += [name] * len(e)
    bedges = np.concatenate(bedges)
    bnames = np.array(bnames)
    btags = np.array([tags.get(n, "dirichlet") for n in bnames])
    mesh = MultiPatchMesh(nodes, np.concatenate(elements), np.concatenate(owner), patches, param,
                          bedges, bnames, btags)
    mesh.grids = grids
    return mesh


def generate_plate_with_hole(level, two_patch=True, g0_split=False, base=10, tags=None):
    """Quarter plate with a circular hole.

    Parameters
    ----------
    level : int
        Refinement level; the mesh has ``n = base * 2**level`` elements per
        direction in total (each of the two patches gets ``n/2`` angular by
        ``n`` radial elements).
    two_patch : bool
        Split along the 135 degree diagonal into two NURBS patches.
    g0_split : bool
        Split patch 2 into two radial knot spans mirroring patch 1.
    base : int
        Elements per direction at level 0 (even).
    tags : dict, optional
        Boundary name to tag. Names are ``hole``, ``bottom`` (y = 0),
        ``right`` (x = 0), ``left`` (x = -L) and ``top`` (y = L).

    Returns
    -------
    MultiPatchMesh
    """
    if level < 0:
        raise ValueError("level must be non-negative")
    n = base * 2 ** level
    if n % 2:
        raise ValueError("the element count per direction must be even")
    tags = tags or {}
    patches = plate_patches(two_patch, g0_split)
    if not two_patch:
        names = {(1, 1, 0): "hole", (1, 0, 0): "bottom", (1, 0, 1): "right"}
        mesh = _structured(patches, {1: (n, n)}, [], names, tags)
        # the outer side turns the corner at xi = 1/2
        _rename_outer(mesh, 1)
        return mesh
    names = {(1, 1, 0): "hole", (1, 0, 0): "bottom", (1, 1, 1): "left",
             (2, 1, 0): "hole", (2, 0, 1): "right", (2, 1, 1): "top"}
    return _structured(patches, {1: (n // 2, n), 2: (n // 2, n)},
                       [(1, (0, 1), 2, (0, 0))], names, tags)


def _rename_outer(mesh, a):
    g = mesh.grids[a]
    line = g[:, -1]
    e = np.stack([line[:-1], line[1:]], axis=-1)
    x = mesh.nodes[e].mean(axis=1)
    names = np.where(np.isclose(x[:, 0], -PLATE_HALF_WIDTH), "left", "top")
    mesh.boundary_edges = np.concatenate([mesh.boundary_edges, e])
    mesh.boundary_names = np.concatenate([mesh.boundary_names, names])
    mesh.boundary_tags = np.concatenate([mesh.boundary_tags, np.full(len(e), "dirichlet")])


def generate_square(n, patch=None, tags=None):
    """Single patch meshed by a uniform ``n x n`` parametric grid.

    Parameters
    ----------
    patch : NurbsPatch, optional
        Defaults to the bilinear unit square.
    """
    if patch is None:
        kv = KnotVector([0, 0, 1, 1], 1)
        patch = NurbsPatch((kv, kv), [[[0, 0], [0, 1]], [[1, 0], [1, 1]]], kind="bspline", patch_id=1)
    names = {(1, 1, 0): "bottom", (1, 0, 1): "right", (1, 1, 1): "top", (1, 0, 0): "left"}
    return _structured({1: patch}, {1: (n, n)}, [], names, tags or {})


def generate_two_patch_square(n, tags=None):
    """Unit square cut at ``x = 1/2`` into two bilinear patches.

    Each patch gets ``n/2 x n`` elements; the interface is patch 1's side
    ``xi = 1`` glued to patch 2's side ``xi = 0``.
    """
    if n < 2 or n % 2:
        raise ValueError("n must be even and at least 2")
    kv = KnotVector([0, 0, 1, 1], 1)
    patches = {a: NurbsPatch((kv, kv), [[[x0, 0], [x0, 1]], [[x0 + 0.5, 0], [x0 + 0.5, 1]]],
                             kind="bspline", patch_id=a)
               for a, x0 in ((1, 0.0), (2, 0.5))}
    names = {(1, 0, 0): "left", (1, 1, 0): "bottom", (1, 1, 1): "top",
             (2, 0, 1): "right", (2, 1, 0): "bottom", (2, 1, 1): "top"}
    return _structured(patches, {1: (n // 2, n), 2: (n // 2, n)}, [(1, (0, 1), 2, (0, 0))],
                       names, tags or {})


def line_mesh(patch, x_nodes, config=InverseMapConfig()):
    """1D mesh over the image of ``patch`` with the given physical nodes."""
    x = np.asarray(x_nodes, dtype=float).reshape(-1, 1)
    xi = invert_mesh(patch, x, config)
    elements = np.stack([np.arange(len(x) - 1), np.arange(1, len(x))], axis=-1)
    a = patch.patch_id
    return MultiPatchMesh(x, elements, np.full(len(elements), a), {a: patch}, {a: xi})


def line_patch(points, patch_id=1):
    """Quadratic Bezier segment through the given control abscissae."""
    return NurbsPatch((KnotVector([0, 0, 0, 1, 1, 1], 2),), np.asarray(points, float),
                      kind="bspline", patch_id=patch_id)


@dataclass
class TwoMapLine:
    """The interval [0, 10] parameterized by two quadratic maps."""

    patches: tuple
    nodes: np.ndarray
    meshes: tuple

    @property
    def param(self):
        return tuple(m.param[m.element_patch[0]][:, 0] for m in self.meshes)


def generate_1d_two_map(n_elements, points=((0, 3, 10), (0, 8, 10)), config=InverseMapConfig()):
    """Uniform nodes on [0, 10] and their preimages under two quadratic maps."""
    if n_elements < 2:
        raise ValueError("need at least two elements")
    patches = tuple(line_patch(p, patch_id=k + 1) for k, p in enumerate(points))
    x = np.linspace(0.0, 10.0, n_elements + 1)
    meshes = tuple(line_mesh(P, x, config) for P in patches)
    return TwoMapLine(patches, x, meshes)


# ---------------------------------------------------------------------------
# JSON

def mesh_to_dict(mesh):
    data = {"nodes": mesh.nodes.tolist(), "elements": mesh.elements.tolist(),
            "patch_of_element": mesh.element_patch.tolist()}
    if mesh.boundary_edges is not None:
        data["boundary"] = [{"edge": e, "tag": t, "name": n} for e, t, n in
                            zip(mesh.boundary_edges.tolist(), mesh.boundary_tags.tolist(),
                                mesh.boundary_names.tolist())]
    return data


def mesh_from_dict(data, patches, config=InverseMapConfig()):
    """Mesh from the JSON layout, inverting the nodes of every patch.

    Parameters
    ----------
    patches : dict
        Patch id to :class:`NurbsPatch` (or to its JSON dictionary).
    """
    patches = {int(a): (P if isinstance(P, NurbsPatch) else patch_from_dict(P, int(a)))
               for a, P in patches.items()}
    nodes = np.asarray(data["nodes"], float)
    elements = np.asarray(data["elements"], int)
    owner = np.asarray(data["patch_of_element"], int)
    param = {}
    for a, P in patches.items():
        ids = np.unique(elements[owner == a])
        xi = np.full((nodes.shape[0], P.pdim), np.nan)
        xi[ids] = invert_mesh(P, nodes[ids], config)
        param[a] = xi
    b = data.get("boundary")
    kw = {}
    if b:
        kw = dict(boundary_edges=np.array([x["edge"] for x in b]),
                  boundary_tags=np.array([x["tag"] for x in b]),
                  boundary_names=np.array([x.get("name", x["tag"]) for x in b]))
    return MultiPatchMesh(nodes, elements, owner, patches, param, **kw)


def save_mesh(mesh, path):
    with open(path, "w") as f:
        json.dump(mesh_to_dict(mesh), f)
