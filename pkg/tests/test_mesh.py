import numpy as np
import pytest

from plaplace.errors import MeshGenerationFailure, PartitionFailure
from plaplace.mesh import (
    MeshGeometry,
    build_disk_mesh,
    build_partition,
    cells_connected,
    check_mesh,
    load_mesh,
    perturb_mesh,
    save_mesh,
)


def _edge_lengths(mesh):
    e = mesh.edges()
    return np.linalg.norm(mesh.nodes[e[:, 0]] - mesh.nodes[e[:, 1]], axis=1)


@pytest.mark.parametrize("n", [16, 64, 128])
def test_structural_invariants(n):
    mesh = build_disk_mesh(n)
    check_mesh(mesh)
    assert mesh.n_boundary == n
    assert np.all(mesh.areas > 0)
    th = 2 * np.pi * np.arange(n) / n
    np.testing.assert_allclose(mesh.nodes[mesh.boundary], np.c_[np.cos(th), np.sin(th)], atol=1e-12, rtol=0)
    assert np.all(np.hypot(*mesh.nodes.T) <= 1 + 1e-12)
    h = 2 * np.pi / n
    assert abs(mesh.areas.sum() - np.pi) <= 2 * h**2


def test_node_count_scales_with_boundary(mesh):
    # quasi-uniform area scaling from ~28,000 nodes at N=512
    assert 0.8 * 1750 <= mesh.n_nodes <= 1.2 * 1750
    assert 1.7 * mesh.n_nodes <= mesh.n_triangles <= 2.1 * mesh.n_nodes


def test_edge_lengths_quasi_uniform(mesh):
    L = _edge_lengths(mesh)
    h = 2 * np.pi / mesh.n_boundary
    assert L.min() >= h / 2 and L.max() <= 2 * h


def test_argument_checks():
    with pytest.raises((MeshGenerationFailure, ValueError)):
        build_disk_mesh(15)
    with pytest.raises((MeshGenerationFailure, ValueError)):
        build_disk_mesh(8)


def test_check_mesh_detects_flipped_triangle(mesh):
    tri = mesh.triangles.copy()
    tri[0] = tri[0][::-1]
    with pytest.raises(MeshGenerationFailure):
        check_mesh(MeshGeometry(mesh.nodes, tri, mesh.boundary))


def test_deterministic():
    a, b = build_disk_mesh(64, seed=3, jitter=0.2), build_disk_mesh(64, seed=3, jitter=0.2)
    assert a.digest == b.digest


def test_perturb_mesh(mesh):
    other = perturb_mesh(mesh, 5)
    check_mesh(other)
    assert other.n_boundary == mesh.n_boundary
    assert abs(other.n_nodes - mesh.n_nodes) < 0.05 * mesh.n_nodes
    interior = np.setdiff1d(np.arange(mesh.n_nodes), mesh.boundary)
    interior_o = np.setdiff1d(np.arange(other.n_nodes), other.boundary)
    a = {tuple(np.round(x, 12)) for x in mesh.nodes[interior]}
    b = {tuple(np.round(x, 12)) for x in other.nodes[interior_o]}
    assert a != b
    np.testing.assert_allclose(other.nodes[other.boundary], mesh.nodes[mesh.boundary], atol=1e-12)
    assert perturb_mesh(mesh, 6).digest != other.digest


def test_perturb_with_generator_seed_is_valid():
    m = build_disk_mesh(32, seed=1, jitter=0.2)
    check_mesh(perturb_mesh(m, 1))


def test_partition_desk(partition):
    M = partition.n_cells
    assert abs(M - 240) <= 12
    assert len(partition.areas) == M == partition.sectors.sum()
    assert partition.cell_areas_spread() <= 0.25
    mesh = partition.mesh
    assert partition.areas.sum() == pytest.approx(mesh.areas.sum(), rel=1e-13)
    assert set(np.unique(partition.cell_of_triangle)) == set(range(M))
    assert cells_connected(partition)
    np.testing.assert_allclose(np.bincount(partition.cell_of_triangle, mesh.areas, M), partition.areas)


def test_partition_single_cell(mesh):
    part = build_partition(mesh, target_cells=1)
    assert part.n_cells == 1
    assert part.areas[0] == pytest.approx(mesh.areas.sum())


def test_partition_too_fine(mesh):
    with pytest.raises(PartitionFailure):
        build_partition(mesh, target_cells=mesh.n_triangles)


def test_partition_960_on_finer_mesh():
    part = build_partition(build_disk_mesh(256), target_cells=960)
    assert abs(part.n_cells - 960) <= 48
    assert part.cell_areas_spread() <= 0.25
    assert cells_connected(part)


def test_save_load_roundtrip(tmp_path, mesh, partition):
    path = tmp_path / "mesh.txt"
    save_mesh(path, mesh, partition)
    m2, p2 = load_mesh(path)
    assert m2.digest == mesh.digest
    np.testing.assert_array_equal(p2.cell_of_triangle, partition.cell_of_triangle)
    np.testing.assert_allclose(p2.areas, partition.areas)
    save_mesh(tmp_path / "bare.txt", mesh)
    m3, p3 = load_mesh(tmp_path / "bare.txt")
    assert p3 is None and m3.digest == mesh.digest
