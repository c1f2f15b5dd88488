import numpy as np
import pytest

from artifact.conv_patch import (ConvConstructionError, ConvSpec, PolynomialBasis,
                                 build_conv_functions, build_interface_conv_1d, moment_solve,
                                 product_rule_conv_2d, rbf_eval)

RNG = np.random.default_rng(11)


def grid(n1, n2=None, h=1.0):
    t1 = np.arange(n1) * h
    if n2 is None:
        return t1[:, None]
    t2 = np.arange(n2) * h
    return np.stack(np.meshgrid(t1, t2, indexing="ij"), axis=-1).reshape(-1, 2)


def in_hull(nodes, k):
    lo, hi = nodes.min(axis=0), nodes.max(axis=0)
    return lo + (hi - lo) * RNG.random((k, nodes.shape[1]))


def test_cubic_values():
    assert rbf_eval("cubic", 0.0, 3.0) == pytest.approx(2 / 3)
    q = 0.5
    inner = 2 / 3 - 4 * q**2 + 4 * q**3
    outer = 4 / 3 - 4 * q + 4 * q**2 - 4 / 3 * q**3
    assert inner == pytest.approx(1 / 6) and outer == pytest.approx(1 / 6)
    assert rbf_eval("cubic", 1.5, 3.0) == pytest.approx(1 / 6, abs=1e-15)
    assert rbf_eval("cubic", 3.0 + 1e-9, 3.0) == 0.0


def test_cubic_derivative_continuity_and_fd():
    a = 2.0
    r = np.array([0.3, 0.999, 1.0, 1.001, 1.7])
    h = 1e-6
    fd = (rbf_eval("cubic", r + h, a) - rbf_eval("cubic", r - h, a)) / (2 * h)
    np.testing.assert_allclose(rbf_eval("cubic", r, a, order=1), fd, atol=1e-6)


def test_gaussian_values():
    assert rbf_eval("gaussian", 0.0, 2.0) == 1.0
    assert rbf_eval("gaussian", 2.0002, 2.0) == 0.0
    assert rbf_eval("gaussian", 1.0, 2.0) == pytest.approx(np.exp(-0.25))


def test_two_node_linear_system_by_hand():
    nodes = np.array([[0.0], [1.0]])
    spec = ConvSpec(s=1, p=1, a=2.0)
    f = build_conv_functions(nodes, PolynomialBasis(1, 1), spec)
    # assemble G = [[Psi, P], [P^T, 0]] directly and solve for W at x
    psi = lambda x: rbf_eval("cubic", np.abs(x - nodes[:, 0]), 2.0)
    P = np.array([[1, 0], [1, 1]], float)
    G = np.block([[np.array([psi(0.0), psi(1.0)]), P], [P.T, np.zeros((2, 2))]])
    x = np.linspace(0, 1, 7)
    ref = np.array([np.linalg.solve(G, np.concatenate([psi(t), [1, t]]))[:2] for t in x])
    W = f.values(x[:, None])
    np.testing.assert_allclose(W, ref, atol=1e-13)
    np.testing.assert_allclose(W, np.stack([1 - x, x], axis=-1), atol=1e-13)


CASES = [(grid(5), 2, 1), (grid(7), 3, 3), (grid(4), 1, 1), (grid(5, 5), 2, 2), (grid(7, 7), 3, 3),
         (grid(3, 3), 1, 1), (grid(5, 3), 2, 1)]


@pytest.mark.parametrize("nodes,s,p", CASES)
def test_kronecker_unity_reproduction(nodes, s, p):
    d = nodes.shape[1]
    basis = PolynomialBasis(d, p, center=nodes.mean(axis=0), scale=s)
    f = build_conv_functions(nodes, basis, ConvSpec(s=s, p=p))
    assert np.abs(f.values(nodes) - np.eye(len(nodes))).max() < 1e-10
    x = in_hull(nodes, 100)
    W = f.values(x)
    assert np.abs(W.sum(axis=1) - 1).max() < 1e-12
    # every tensor monomial of degree <= p per direction
    for e in np.ndindex(*([p + 1] * d)):
        mono = lambda z: np.prod(z**np.array(e), axis=1)
        assert np.abs(W @ mono(nodes) - mono(x)).max() < 1e-9


@pytest.mark.parametrize("nodes,s,p", CASES)
def test_gradient_matches_central_differences(nodes, s, p):
    d = nodes.shape[1]
    f = build_conv_functions(nodes, PolynomialBasis(d, p, nodes.mean(axis=0)), ConvSpec(s=s, p=p))
    x = in_hull(nodes, 20)
    h = 1e-6
    _, dW = f.evaluate(x)
    for k in range(d):
        e = np.zeros(d)
        e[k] = h
        fd = (f.values(x + e) - f.values(x - e)) / (2 * h)
        scale = np.abs(dW[..., k]).max()
        assert np.abs(dW[..., k] - fd).max() < 1e-6 * max(scale, 1.0)


def test_weighted_basis_reproduction():
    w = lambda x: (1 + 0.3 * x[:, 0]**2, 0.6 * x[:, :1])
    nodes = grid(7, h=0.25)
    f = build_conv_functions(nodes, PolynomialBasis(1, 2, weight=w), ConvSpec(s=3, p=2), scale=0.25)
    x = in_hull(nodes, 50)
    W = f.values(x)
    for q in range(3):
        g = lambda z: z[:, 0]**q / w(z)[0]
        assert np.abs(W @ g(nodes) - g(x)).max() < 1e-9


def test_moment_matrix_symmetric_and_solves():
    nodes = grid(5, 5)
    P, _ = PolynomialBasis(2, 2, nodes.mean(axis=0))(nodes)
    X = moment_solve(nodes[None], P[None], "cubic", 3.0)
    n, m = P.shape
    from artifact.conv_patch import _pairwise
    G = np.block([[rbf_eval("cubic", _pairwise(nodes, nodes)[1], 3.0), P], [P.T, np.zeros((m, m))]])
    assert np.array_equal(G, G.T)
    np.testing.assert_allclose(G @ X[0], np.vstack([np.eye(n), np.zeros((m, n))]), atol=1e-10)


def test_too_small_dilation():
    with pytest.raises(ConvConstructionError):
        build_conv_functions(grid(5), PolynomialBasis(1, 1), ConvSpec(s=2, p=1, a=0.1), center=3)


def test_duplicate_nodes_singular():
    nodes = np.array([[0.0], [1.0], [1.0], [2.0]])
    with pytest.raises(ConvConstructionError):
        build_conv_functions(nodes, PolynomialBasis(1, 1), ConvSpec(s=2, p=1, a=3.0), center=7)


def test_too_few_nodes():
    with pytest.raises(ConvConstructionError):
        build_conv_functions(grid(2), PolynomialBasis(1, 2), ConvSpec(s=1, p=2))


def test_spec_validation():
    for kw in (dict(s=-1, p=1), dict(s=1, p=1, a=0), dict(s=1, p=1, rbf="tps"),
               dict(s=1, p=1, basis_kind="x"), dict(s=1, p=1, space="full")):
        with pytest.raises(ValueError):
            ConvSpec(**kw)
    assert ConvSpec(2, 2).dilation == 3.0


def test_interface_identical_parameterization_equals_ordinary():
    t = np.linspace(0, 1, 5)
    spec = ConvSpec(s=2, p=2)
    shared = build_interface_conv_1d(t, t, None, None, spec, scale_a=0.25, scale_b=0.25)
    plain = build_conv_functions(t[:, None], PolynomialBasis(1, 2, t[2], 0.25), spec, scale=0.25)
    x = np.linspace(0, 1, 33)[:, None]
    assert np.abs(shared.values(x) - plain.values(x)).max() < 1e-12
    assert shared.basis.keep.size == 3


def _trace(c):
    return lambda t: (1 + c * np.reshape(t, -1) * (1 - np.reshape(t, -1)),
                      c * (1 - 2 * np.reshape(t, -1)))


def test_interface_nurbs_reproduces_both_sides():
    ta = np.linspace(0.2, 0.6, 7)
    tb = 0.1 + 0.8 * ta + 0.3 * ta**2    # a different (nonlinear) coordinate of the same nodes
    transfer = lambda t: (0.1 + 0.8 * t + 0.3 * t**2, 0.8 + 0.6 * t)
    Wa, Wb = _trace(0.4), _trace(-0.3)
    f = build_interface_conv_1d(ta, tb, Wa, Wb, ConvSpec(s=3, p=1), transfer=transfer,
                                scale_a=np.diff(ta).mean(), scale_b=np.diff(tb).mean())
    x = np.sort(RNG.uniform(ta[0], ta[-1], 50))
    W = f.values(x[:, None])
    assert np.abs(f.values(ta[:, None]) - np.eye(ta.size)).max() < 1e-10
    tx = transfer(x)[0]
    for q in range(2):
        assert np.abs(W @ (ta**q / Wa(ta)[0]) - x**q / Wa(x)[0]).max() < 1e-9
        assert np.abs(W @ (tb**q / Wb(tb)[0]) - tx**q / Wb(tx)[0]).max() < 1e-9


def test_interface_bspline_constant_reproduction():
    ta = np.linspace(0.0, 0.5, 6)
    tb = 2 * ta - ta**2
    f = build_interface_conv_1d(ta, tb, None, None, ConvSpec(s=2, p=2),
                                transfer=lambda t: (2 * t - t**2, 2 - 2 * t), scale_a=0.1, scale_b=0.1)
    x = np.linspace(0, 0.5, 41)[:, None]
    assert np.abs(f.values(x).sum(axis=1) - 1).max() < 1e-12
    # 1 and t_b = 2t - t^2 already lie in span{1, t, t^2}; only t_b^2 is new
    assert f.basis.keep.size == 4


def _one_d(t, p, s):
    h = np.diff(t).mean()
    return build_conv_functions(t[:, None], PolynomialBasis(1, p, t[len(t) // 2], h), ConvSpec(s, p), scale=h)


def test_product_rule_unit_weight_is_tensor_product():
    fx, fy = _one_d(np.linspace(0, 1, 5), 2, 2), _one_d(np.linspace(0, 0.5, 4), 1, 2)
    prod = product_rule_conv_2d(fx, fy)
    x = RNG.random((30, 2)) * [1, 0.5]
    a, b = fx.values(x[:, :1]), fy.values(x[:, 1:])
    ref = (a[:, :, None] * b[:, None, :]).reshape(30, -1)
    assert np.abs(prod.values(x) - ref).max() < 1e-14


def test_product_rule_nurbs_kronecker_and_reproduction():
    p = 2
    tx, ty = np.linspace(0, 1, 5), np.linspace(0, 1, 5)
    T = _trace(0.5)
    weight = lambda x: (T(x[:, 0])[0] * (1 + 0.2 * x[:, 1]) + 0.1 * x[:, 0] * x[:, 1]**2,
                        np.stack([T(x[:, 0])[1] * (1 + 0.2 * x[:, 1]) + 0.1 * x[:, 1]**2,
                                  0.2 * T(x[:, 0])[0] + 0.2 * x[:, 0] * x[:, 1]], axis=-1))
    h = 0.25
    fx = build_interface_conv_1d(tx, tx, T, T, ConvSpec(2, p), scale_a=h, scale_b=h)
    fy = _one_d(ty, p, 2)
    prod = product_rule_conv_2d(fx, fy, weight, T)
    nodes = prod.nodes
    assert np.abs(prod.values(nodes) - np.eye(len(nodes))).max() < 1e-9
    x = RNG.random((50, 2))
    W = prod.values(x)
    Wn, Wx = weight(nodes)[0], weight(x)[0]
    for q1 in range(p + 1):
        for q2 in range(p + 1):
            g = lambda z, w: z[:, 0]**q1 * z[:, 1]**q2 / w
            assert np.abs(W @ g(nodes, Wn) - g(x, Wx)).max() < 1e-9
    # gradients of the product against central differences
    _, dW = prod.evaluate(x)
    e = 1e-6
    for k in range(2):
        dx = np.zeros(2)
        dx[k] = e
        fd = (prod.values(np.clip(x + dx, 0, 1)) - prod.values(np.clip(x - dx, 0, 1))) / \
            (np.clip(x + dx, 0, 1) - np.clip(x - dx, 0, 1))[:, k:k + 1]
        assert np.abs(dW[..., k] - fd).max() < 1e-5
