import json

import numpy as np
import pytest

from artifact.mesh_multipatch import (HOLE_RADIUS, NodalCompatibilityError, RegionLayoutError,
                                      build_conv_patch_sets, detect_interfaces, generate_1d_two_map,
                                      generate_plate_with_hole, generate_square,
                                      generate_two_patch_square, mesh_from_dict, mesh_to_dict,
                                      region_seams)
from artifact.spline_core import map_forward


@pytest.fixture(scope="module")
def plate():
    return generate_plate_with_hole(0)


def test_plate_level0_node_count(plate):
    # two n/2 x n grids glued along a side of n + 1 nodes: 2 (n/2 + 1)(n + 1) - (n + 1)
    n = 10
    assert plate.n_nodes == 2 * (n // 2 + 1) * (n + 1) - (n + 1) == 121
    assert plate.n_elements == n * n


@pytest.mark.parametrize("level", [0, 1, 2])
def test_plate_refinement_counts(level):
    n = 10 * 2**level
    mesh = generate_plate_with_hole(level)
    assert mesh.n_elements == n * n and mesh.n_nodes == (n + 1)**2


def test_hole_nodes_on_circle(plate):
    hole = plate.nodes_named("hole")
    assert hole.size == 11
    r2 = (plate.nodes[hole]**2).sum(axis=1)
    assert np.abs(r2 - HOLE_RADIUS**2).max() < 1e-10


def test_round_trip_all_nodes():
    for mesh in (generate_plate_with_hole(1), generate_plate_with_hole(1, g0_split=True)):
        assert mesh.validate(1e-10) < 1e-10


def test_one_interface_on_the_diagonal(plate):
    itfs = detect_interfaces(plate)
    assert len(itfs) == 1
    itf = itfs[0]
    assert (itf.alpha, itf.beta) == (1, 2)
    x = plate.nodes[itf.nodes]
    assert np.abs(x[:, 0] + x[:, 1]).max() < 1e-12
    xa = map_forward(plate.patches[1], plate.param[1][itf.nodes])
    xb = map_forward(plate.patches[2], plate.param[2][itf.nodes])
    assert np.abs(xa - x).max() < 1e-10 and np.abs(xb - x).max() < 1e-10
    assert not np.allclose(plate.param[1][itf.nodes], plate.param[2][itf.nodes])
    # consistent ordering along the interface
    assert np.all(np.diff(np.hypot(*x.T)) > 0)


def test_single_patch_has_no_interface():
    assert detect_interfaces(generate_square(4)) == []


def _two_square_dict(perturb):
    mesh = generate_two_patch_square(4)
    data = mesh_to_dict(mesh)
    nodes = [list(v) for v in data["nodes"]]
    itf = detect_interfaces(mesh)[0].nodes
    copy = {}
    for k in itf:
        copy[int(k)] = len(nodes)
        nodes.append(list(mesh.nodes[k]))
    nodes[copy[int(itf[2])]][1] += perturb
    els = np.array(data["elements"])
    two = mesh.element_patch == 2
    els[two] = np.vectorize(lambda v: copy.get(int(v), v))(els[two])
    data.update(nodes=nodes, elements=els.tolist())
    data.pop("boundary")
    return data, mesh.patches


def test_perturbed_duplicate_node_is_rejected():
    data, patches = _two_square_dict(1e-7)
    mesh = mesh_from_dict(data, patches)
    with pytest.raises(NodalCompatibilityError):
        detect_interfaces(mesh)


def test_unmerged_duplicate_nodes_are_rejected():
    data, patches = _two_square_dict(0.0)
    with pytest.raises(NodalCompatibilityError):
        detect_interfaces(mesh_from_dict(data, patches))


def test_hanging_node_is_rejected():
    # one element on the left, two stacked on the right: (0.5, 0.5) hangs
    nodes = [[0, 0], [0.5, 0], [0.5, 1], [0, 1], [1, 0], [1, 0.5], [0.5, 0.5], [1, 1]]
    data = {"nodes": nodes, "elements": [[0, 1, 2, 3], [1, 4, 5, 6], [6, 5, 7, 2]],
            "patch_of_element": [1, 2, 2]}
    mesh = mesh_from_dict(data, generate_two_patch_square(2).patches)
    with pytest.raises(NodalCompatibilityError, match="hanging"):
        detect_interfaces(mesh)


def test_1d_patch_sizes():
    line = generate_1d_two_map(20)
    idx = build_conv_patch_sets(line.meshes[0], 2)
    sets = idx.node_sets[0]
    np.testing.assert_array_equal(sets[10], np.arange(8, 13))
    np.testing.assert_array_equal(sets[0], [0, 1, 2])
    np.testing.assert_array_equal(sets[20], [18, 19, 20])


@pytest.mark.parametrize("s", [1, 2, 3])
def test_full_interior_patch(s):
    mesh = generate_square(10)
    idx = build_conv_patch_sets(mesh, s)
    center = 5 * 11 + 5
    assert idx.node_sets[0][center].size == (2 * s + 1)**2


def test_interface_node_patch_partition_hand_enumerated():
    # patch 1 grid ids g1[i, j] = 5 i + j (i < 3); patch 2 g2[0] = g1[2], g2[i] = 15 + 5 (i - 1) + j
    mesh = generate_two_patch_square(4)
    g1, g2 = mesh.grids[1], mesh.grids[2]
    assert g1[2, 2] == 12 and g2[0, 2] == 12 and g2[1, 2] == 17
    idx = build_conv_patch_sets(mesh, 1)
    reg1 = [r.id for r in mesh.regions if r.patch == 1][0]
    reg2 = [r.id for r in mesh.regions if r.patch == 2][0]
    np.testing.assert_array_equal(idx.node_sets[reg1][12], [6, 7, 8, 11, 12, 13])
    np.testing.assert_array_equal(idx.node_sets[reg2][12], [11, 12, 13, 16, 17, 18])
    P, Qa, Qb = idx.partition[(1, 2, 12)]
    np.testing.assert_array_equal(P, [11, 12, 13])
    np.testing.assert_array_equal(Qa, [6, 7, 8])
    np.testing.assert_array_equal(Qb, [16, 17, 18])
    # a node next to the interface keeps its patch to its own side
    np.testing.assert_array_equal(idx.node_sets[reg1][7], [1, 2, 3, 6, 7, 8, 11, 12, 13])


def test_no_foreign_nodes_and_knot_span_truncation():
    mesh = generate_plate_with_hole(1)
    idx = build_conv_patch_sets(mesh, 3)
    for reg in mesh.regions:
        own = set(mesh.patch_nodes(reg.patch).tolist())
        eta = mesh.param[reg.patch][:, 1]
        lo, hi = mesh.breakpoints[reg.patch][1][reg.span[1]: reg.span[1] + 2]
        for node, members in idx.node_sets[reg.id].items():
            assert set(members.tolist()) <= own
            assert np.all((eta[members] >= lo - 1e-12) & (eta[members] <= hi + 1e-12))


def test_element_sets_are_unions_of_node_sets():
    mesh = generate_plate_with_hole(0)
    idx = build_conv_patch_sets(mesh, 2)
    for e in range(0, mesh.n_elements, 7):
        reg = mesh.element_region[e]
        union = np.unique(np.concatenate([idx.node_sets[reg][n] for n in mesh.elements[e]]))
        np.testing.assert_array_equal(idx.element_sets[e], union)


def test_g0_split_mirrors_patch_one():
    mesh = generate_plate_with_hole(0, g0_split=True)
    assert len(mesh.regions) == 4
    seams = region_seams(mesh)
    assert len(seams) == 4


def test_irregular_mesh_rejected_for_seams():
    mesh = generate_square(4)
    mesh.regions[0].grid = None
    with pytest.raises(RegionLayoutError):
        region_seams(mesh)


def test_two_map_line():
    line = generate_1d_two_map(2)
    np.testing.assert_allclose(line.nodes, [0, 5, 10])
    xi1, xi2 = line.param
    assert xi1[1] == pytest.approx((-6 + np.sqrt(116)) / 8, abs=1e-10)
    np.testing.assert_allclose([xi1[0], xi1[-1], xi2[0], xi2[-1]], [0, 1, 0, 1], atol=1e-12)
    line = generate_1d_two_map(20)
    assert line.param[1][13] == pytest.approx(0.5, abs=1e-10)
    with pytest.raises(ValueError):
        generate_1d_two_map(1)


def test_json_round_trip(tmp_path):
    mesh = generate_plate_with_hole(0)
    path = tmp_path / "mesh.json"
    path.write_text(json.dumps(mesh_to_dict(mesh)))
    back = mesh_from_dict(json.loads(path.read_text()), mesh.patches)
    np.testing.assert_array_equal(back.elements, mesh.elements)
    for a in mesh.patches:
        ids = mesh.patch_nodes(a)
        assert np.abs(back.param[a][ids] - mesh.param[a][ids]).max() < 1e-9
    assert len(detect_interfaces(back)) == 1


def test_invalid_levels():
    with pytest.raises(ValueError):
        generate_plate_with_hole(-1)
    with pytest.raises(ValueError):
        build_conv_patch_sets(generate_square(2), -1)
