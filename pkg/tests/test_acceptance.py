"""Acceptance gate: one PASS/FAIL line per criterion.

Each test computes every sub-check before asserting, so a red criterion
still reports all of its numbers.
"""
import functools
import time

import numpy as np
import pytest

from artifact.bench_cli import (acceptance_checks, run_elasticity, run_interp1d, run_interp2d,
                                run_poisson)
from artifact.conv_patch import (ConvSpec, PolynomialBasis, build_conv_functions,
                                 build_interface_conv_1d, product_rule_conv_2d)
from artifact.fe_engine import (SolveConfig, assemble_elasticity, assemble_poisson,
                                geometric_consistency_check, setup, solve_system)
from artifact.inverse_map import invert_point
from artifact.mesh_multipatch import (generate_1d_two_map, generate_plate_with_hole, generate_square,
                                      generate_two_patch_square, line_patch)
from artifact.problems import hump, hump_source, kirsch_stress
from artifact.spline_core import map_forward

SIDES = ("left", "right", "top", "bottom")
PATCH_QUAD = 128


def report(capsys, number, title, checks, seconds=None, budget=None):
    """Print the criterion line and the sub-checks; return overall pass."""
    ok = all(c[3] for c in checks)
    if budget is not None:
        ok &= seconds < budget
    with capsys.disabled():
        tail = "" if seconds is None else f" ({seconds:.0f}s{'' if budget is None else f' of {budget}s'})"
        print(f"\nCRITERION {number} {'PASS' if ok else 'FAIL'}: {title}{tail}")
        for name, value, band, passed in checks:
            print(f"    {'ok  ' if passed else 'MISS'} {name} = {value:.4g} {band}")
    return ok


def below(name, value, tol):
    return (name, float(value), f"< {tol:g}", bool(value < tol))


def bands(rep):
    return [(f"{rep.name} {c['check']}", c["value"], f"[{c['low']:.3g}, {c['high']:.3g}]", c["passed"])
            for c in acceptance_checks(rep)]


# ---------------------------------------------------------------------------
# criterion 1

def _grid(*n):
    # nodes on the unit box so the reproduced monomials are of order one
    axes = [np.linspace(0.0, 1.0, k) for k in n]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(n))


def _conv_checks(rng):
    out = []
    kron = unity = repro = grad = 0.0
    for n, s, p in (((5,), 2, 1), ((7,), 3, 3), ((5, 5), 2, 2), ((7, 7), 3, 3), ((3, 3), 1, 1)):
        nodes = _grid(*n)
        d, h = nodes.shape[1], 1.0 / (n[0] - 1)
        f = build_conv_functions(nodes, PolynomialBasis(d, p, nodes.mean(axis=0), s * h), ConvSpec(s, p),
                                 scale=h)
        kron = max(kron, np.abs(f.values(nodes) - np.eye(len(nodes))).max())
        x = nodes.min(0) + (nodes.max(0) - nodes.min(0)) * rng.random((100, d))
        W, dW = f.evaluate(x)
        unity = max(unity, np.abs(W.sum(axis=1) - 1).max())
        for e in np.ndindex(*([p + 1] * d)):
            mono = lambda z: np.prod(z**np.array(e), axis=1)
            repro = max(repro, np.abs(W @ mono(nodes) - mono(x)).max())
        for k in range(d):
            dx = np.eye(d)[k] * 1e-6 * h
            fd = (f.values(x + dx) - f.values(x - dx)) / (2e-6 * h)
            grad = max(grad, np.abs(dW[..., k] - fd).max() / max(np.abs(dW[..., k]).max(), 1.0))
    out += [below("Kronecker delta", kron, 1e-10), below("partition of unity", unity, 1e-12),
            below("order-p reproduction", repro, 1e-9), below("gradient vs differences (rel)", grad, 1e-6)]
    return out


def _product_rule_checks(rng):
    p, h = 2, 0.25
    t = np.linspace(0, 1, 5)
    T = lambda u: (1 + 0.5 * np.reshape(u, -1) * (1 - np.reshape(u, -1)), 0.5 * (1 - 2 * np.reshape(u, -1)))
    weight = lambda x: (T(x[:, 0])[0] * (1 + 0.2 * x[:, 1]),
                        np.stack([T(x[:, 0])[1] * (1 + 0.2 * x[:, 1]), 0.2 * T(x[:, 0])[0]], axis=-1))
    fx = build_interface_conv_1d(t, t, T, T, ConvSpec(2, p), scale_a=h, scale_b=h)
    fy = build_conv_functions(t[:, None], PolynomialBasis(1, p, t[2], h), ConvSpec(2, p), scale=h)
    prod = product_rule_conv_2d(fx, fy, weight, T)
    nodes = prod.nodes
    x = rng.random((60, 2))
    W = prod.values(x)
    Wn, Wx = weight(nodes)[0], weight(x)[0]
    repro = max(np.abs(W @ (nodes[:, 0]**a * nodes[:, 1]**b / Wn) - x[:, 0]**a * x[:, 1]**b / Wx).max()
                for a in range(p + 1) for b in range(p + 1))
    kron = np.abs(prod.values(nodes) - np.eye(len(nodes))).max()
    return [below("product rule Kronecker", kron, 1e-9), below("product rule reproduction", repro, 1e-9)]


def _shape_checks():
    out = []
    worst_geo, worst_sym = 0.0, 0.0
    for mode, split in (("nodal", False), ("g0", True)):
        mesh = generate_plate_with_hole(0, g0_split=split)
        tab = setup(mesh, ConvSpec(2, 2), mode)
        worst_geo = max(worst_geo, max(geometric_consistency_check(P, tab) for P in mesh.patches.values()))
    mesh = generate_plate_with_hole(0)
    for mode in ("nodal", "penalty"):
        tab = setup(mesh, ConvSpec(2, 2), mode)
        for sy in (assemble_poisson(mesh, tab, hump_source, hump, SolveConfig(mode), dirichlet_names=("hole",)),
                   assemble_elasticity(mesh, tab, 1e3, 0.3, SolveConfig(mode), stress=kirsch_stress)):
            D = (sy.K - sy.K.T).tocoo()
            worst_sym = max(worst_sym, np.abs(D.data).max(initial=0.0))
    out += [below("geometric equivalence on the plate", worst_geo, 1e-9),
            below("stiffness symmetry", worst_sym, 1e-12)]
    return out


def _patch_checks():
    lin = lambda x: x[:, 0] + 2 * x[:, 1]
    strain = lambda x: np.stack([1e-3 * x[:, 0] + 2e-3 * x[:, 1], -5e-4 * x[:, 0] + 3e-3 * x[:, 1]], -1)
    zero = lambda x: 0 * x[:, 0]
    poisson = elastic = 0.0
    cases = [(generate_square(4), p, "nodal") for p in (1, 2, 3)] + [(generate_two_patch_square(4), 2, "g0")]
    for mesh, p, mode in cases:
        tab = setup(mesh, ConvSpec(p, p), mode, quad_order=PATCH_QUAD)
        cfg = SolveConfig(mode)
        sy = assemble_poisson(mesh, tab, zero, lin, cfg, dirichlet_names=SIDES)
        u = solve_system(sy, cfg)
        poisson = max([poisson] + [np.abs(sy.node_field(u, a) - lin(mesh.nodes))[mesh.patch_nodes(a)].max()
                                   for a in mesh.patches])
        if p == 2:
            sy = assemble_elasticity(mesh, tab, 1e3, 0.3, cfg, traction_sides=(),
                                     constraints={s: (0, 1) for s in SIDES}, displacement=strain)
            u = solve_system(sy, cfg)
            ref = strain(mesh.nodes)
            elastic = max([elastic] + [np.abs(sy.node_field(u, a) - ref)[mesh.patch_nodes(a)].max()
                                       / np.abs(ref).max() for a in mesh.patches])
    return [below("linear Poisson patch test", poisson, 1e-9),
            below("constant-strain patch test (rel)", elastic, 1e-9)]


def test_criterion_1_property_suite(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    checks = _conv_checks(rng) + _product_rule_checks(rng) + _shape_checks() + _patch_checks()
    assert report(capsys, 1, "property suite", checks, time.perf_counter() - t0, 120)


# ---------------------------------------------------------------------------
# criteria 2 and 3

def test_criterion_2_smooth_1d(capsys):
    t0 = time.perf_counter()
    reps = [run_interp1d("smooth", p=p, levels=5) for p in (1, 2, 3)]
    checks = [c for r in reps for c in bands(r)]
    assert len(reps[0].rows) >= 4
    assert report(capsys, 2, "1D smooth deviation rate p+1 +- 0.3", checks, time.perf_counter() - t0)


def test_criterion_3_oscillatory_1d(capsys):
    t0 = time.perf_counter()
    reps = [run_interp1d("oscillatory", p=p, levels=5) for p in (2, 3)]
    checks = [c for r in reps for c in bands(r)]
    assert report(capsys, 3, "1D oscillatory deviation rate 1.0 +- 0.2", checks, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# criteria 4 to 7 (benchmark studies on the plate with a hole)

@functools.lru_cache(maxsize=None)
def study(kind, mode, p, levels):
    if kind == "interp2d":
        return run_interp2d(p=p, levels=levels)
    if kind == "poisson":
        return run_poisson(mode, p=p, levels=levels)
    return run_elasticity(mode, p=p, levels=levels)


def test_criterion_4_interpolation_2d(capsys):
    reps = [study("interp2d", None, p, 5) for p in (2, 3)]
    assert reps[0].rows[-1]["h"] == pytest.approx(1 / 160)
    seconds = sum(r.seconds for r in reps)
    assert report(capsys, 4, "2D interpolation L2 rates", [c for r in reps for c in bands(r)], seconds, 300)


def test_criterion_5_poisson_g0(capsys):
    reps = [study("poisson", "g0", p, 5) for p in (2, 3)]
    seconds = sum(r.seconds for r in reps)
    assert report(capsys, 5, "Poisson G0 mode", [c for r in reps for c in bands(r)], seconds, 600)


def test_criterion_6_poisson_nodal(capsys):
    rep = study("poisson", "nodal", 2, 5)
    assert report(capsys, 6, "Poisson nodal mode", bands(rep), rep.seconds)


def test_criterion_7_elasticity_nodal(capsys):
    reps = [study("elasticity", "nodal", p, 4) for p in (2, 3)]
    seconds = sum(r.seconds for r in reps)
    assert report(capsys, 7, "elasticity nodal mode", [c for r in reps for c in bands(r)], seconds)


# ---------------------------------------------------------------------------
# criterion 8

def test_criterion_8_inverse_mapping(capsys):
    t0 = time.perf_counter()
    worst = 0.0
    meshes = [generate_plate_with_hole(L, g0_split=g) for L in range(5) for g in (False, True)]
    meshes += [generate_square(8), generate_two_patch_square(8)]
    meshes += [m for n in (10, 160) for m in generate_1d_two_map(n).meshes]
    for mesh in meshes:
        for a, P in mesh.patches.items():
            ids = mesh.patch_nodes(a)
            r = np.linalg.norm(map_forward(P, mesh.param[a][ids]) - mesh.nodes[ids], axis=1)
            worst = max(worst, r.max())
    # F1(xi) = 6 xi + 4 xi^2 and F2(xi) = 16 xi - 6 xi^2 from the Bezier control points
    closed = 0.0
    for P, c2, c1 in ((line_patch((0, 3, 10)), 4.0, 6.0), (line_patch((0, 8, 10)), -6.0, 16.0)):
        for x in np.linspace(0, 10, 41):
            ref = (-c1 + np.sqrt(c1**2 + 4 * c2 * x)) / (2 * c2)
            closed = max(closed, abs(invert_point(P, [x])[0] - ref))
    checks = [below("node round trip |F(xi) - x|", worst, 1e-10),
              below("closed-form inversion error", closed, 1e-10)]
    assert report(capsys, 8, "inverse mapping", checks, time.perf_counter() - t0)
