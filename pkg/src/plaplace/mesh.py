"""Unit-disk triangulations and the polar cell partition of the conductivity.

Nodes are laid out on concentric rings (a structured polar template), then
Laplace-smoothed and Delaunay-triangulated.  Node 0 is the interior node
closest to the origin; the last ``N`` nodes are the boundary nodes in order of
increasing polar angle, node ``k`` of the boundary sitting at ``2 pi k / N``.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import Delaunay

from .errors import MeshGenerationFailure, PartitionFailure

# Rings per boundary node.  Matches the reference count of about 28,000 nodes
# for 512 boundary nodes (N (K + 1) / 2 nodes for K rings).
RINGS_PER_BOUNDARY_NODE = 109.4 / 512


@dataclass(eq=False)
class MeshGeometry:
    nodes: np.ndarray       # (n_nodes, 2)
    triangles: np.ndarray   # (n_tri, 3), counter-clockwise
    boundary: np.ndarray    # (N,) boundary node indices ordered by angle
    seed: int | None = None

    def __post_init__(self):
        self.nodes = np.ascontiguousarray(self.nodes, dtype=float)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64)
        self.boundary = np.ascontiguousarray(self.boundary, dtype=np.int64)
        self.nodes.flags.writeable = False
        self.triangles.flags.writeable = False
        self.boundary.flags.writeable = False

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def n_boundary(self) -> int:
        return len(self.boundary)

    @cached_property
    def areas(self) -> np.ndarray:
        return signed_areas(self.nodes, self.triangles)

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.nodes[self.triangles].mean(axis=1)

    @cached_property
    def boundary_angles(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.n_boundary) / self.n_boundary

    @cached_property
    def gauge_node(self) -> int:
        """Interior node nearest the origin; its value is pinned to zero."""
        interior = np.setdiff1d(np.arange(self.n_nodes), self.boundary)
        r = np.hypot(*self.nodes[interior].T)
        return int(interior[np.argmin(r)])

    @cached_property
    def digest(self) -> str:
        h = hashlib.sha1()
        for a in (self.nodes, self.triangles, self.boundary):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()[:16]

    def edges(self) -> np.ndarray:
        e = np.concatenate([self.triangles[:, [0, 1]], self.triangles[:, [1, 2]], self.triangles[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)


def signed_areas(nodes, triangles):
    a, b, c = (nodes[triangles[:, k]] for k in range(3))
    return 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))


def _ring_layout(N, rng=None, jitter=0.0):
    n_rings = max(2, int(round(RINGS_PER_BOUNDARY_NODE * N)))
    pts = [np.zeros((1, 2))]
    for k in range(1, n_rings):
        r = k / n_rings
        m = max(6, int(round(N * r)))
        offset = 0.5 * (k % 2)
        if rng is not None:
            offset = rng.uniform(0.0, 1.0)
        th = 2 * np.pi * (np.arange(m) + offset) / m
        rr = np.full(m, r)
        if rng is not None and jitter > 0:
            th = th + jitter * (2 * np.pi / m) * rng.uniform(-1, 1, m)
            rr = rr + jitter / n_rings * rng.uniform(-1, 1, m)
        pts.append(np.stack([rr * np.cos(th), rr * np.sin(th)], -1))
    if rng is not None and jitter > 0:
        pts[0] = jitter / n_rings * rng.uniform(-0.5, 0.5, (1, 2))
    th = 2 * np.pi * np.arange(N) / N
    pts.append(np.stack([np.cos(th), np.sin(th)], -1))
    return np.concatenate(pts)


def _triangulate(nodes):
    tri = Delaunay(nodes).simplices.astype(np.int64)
    area = signed_areas(nodes, tri)
    flip = area < 0
    tri[flip] = tri[flip][:, [0, 2, 1]]
    area = np.abs(area)
    # drop zero-area slivers from cocircular boundary triples
    keep = area > 1e-14
    return tri[keep]


def _smooth(nodes, triangles, n_interior, sweeps, relax=0.5):
    """Laplace smoothing of interior nodes towards the mean of their neighbours."""
    n = len(nodes)
    e = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    e = np.concatenate([e, e[:, ::-1]])
    A = coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n)).tocsr()
    A.data[:] = 1.0
    deg = np.asarray(A.sum(axis=1)).ravel()
    x = nodes.copy()
    for _ in range(sweeps):
        avg = (A @ x) / deg[:, None]
        x[:n_interior] += relax * (avg[:n_interior] - x[:n_interior])
    return x


def build_disk_mesh(boundary_node_count: int = 128, seed=None, jitter: float = 0.0, smoothing_sweeps: int = 2) -> MeshGeometry:
    """Quasi-uniform triangulation of the unit disk.

    Parameters
    ----------
    boundary_node_count : int
        Number ``N`` of boundary nodes, even and at least 16.  Boundary node
        ``k`` is placed at angle ``2 pi k / N``.
    seed : int, optional
        When given, each interior ring gets a random rotation and nodes are
        jittered by ``jitter`` times the local spacing; this is how
        :func:`perturb_mesh` produces a distinct mesh of the same disk.
    """
    N = int(boundary_node_count)
    if N < 16 or N % 2:
        raise MeshGenerationFailure(f"boundary_node_count must be even and >= 16, got {N}")
    rng = np.random.default_rng(seed) if seed is not None else None
    nodes = _ring_layout(N, rng, jitter)
    n_int = len(nodes) - N
    tri = _triangulate(nodes)
    if smoothing_sweeps:
        nodes = _smooth(nodes, tri, n_int, smoothing_sweeps)
        tri = _triangulate(nodes)
    boundary = np.arange(n_int, n_int + N)
    # put the node nearest the origin first so it doubles as the gauge node
    c = int(np.argmin(np.hypot(*nodes[:n_int].T)))
    perm = np.arange(len(nodes))
    perm[[0, c]] = perm[[c, 0]]
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    nodes = nodes[perm]
    tri = inv[tri]
    mesh = MeshGeometry(nodes, tri, boundary, seed=seed)
    check_mesh(mesh)
    return mesh


def perturb_mesh(mesh: MeshGeometry, rng_seed, jitter: float = 0.25) -> MeshGeometry:
    """A different triangulation of the same disk with the same boundary nodes."""
    return build_disk_mesh(mesh.n_boundary, seed=rng_seed, jitter=jitter)


def check_mesh(mesh: MeshGeometry):
    """Raise MeshGenerationFailure unless the structural invariants hold."""
    if np.any(mesh.areas <= 0):
        raise MeshGenerationFailure("non-positive triangle area")
    bn = mesh.nodes[mesh.boundary]
    th = mesh.boundary_angles
    if np.max(np.abs(bn - np.stack([np.cos(th), np.sin(th)], -1))) > 1e-12:
        raise MeshGenerationFailure("boundary nodes are off the unit circle")
    # conforming: each edge shared by at most two triangles, boundary edges once
    e = np.sort(
        np.concatenate([mesh.triangles[:, [0, 1]], mesh.triangles[:, [1, 2]], mesh.triangles[:, [2, 0]]]), axis=1
    )
    _, counts = np.unique(e, axis=0, return_counts=True)
    if counts.max() > 2:
        raise MeshGenerationFailure("non-conforming edge shared by more than two triangles")
    n_single = int((counts == 1).sum())
    if n_single != mesh.n_boundary:
        raise MeshGenerationFailure(f"{n_single} free edges, expected {mesh.n_boundary}")
    used = np.zeros(mesh.n_nodes, bool)
    used[mesh.triangles.ravel()] = True
    if not used.all():
        raise MeshGenerationFailure("mesh has nodes not attached to any triangle")


# ---------------------------------------------------------------------------
# Partition
# ---------------------------------------------------------------------------

def ring_sector_counts(m_rings: int, target_cells: int) -> np.ndarray:
    """Sectors per annulus, proportional to the annulus mean radius."""
    if m_rings < 1 or target_cells < 1:
        raise PartitionFailure("m_rings and target_cells must be positive")
    c = target_cells / m_rings**2
    counts = np.maximum(1, np.rint(c * (2 * np.arange(m_rings) + 1))).astype(int)
    return counts


def default_rings(target_cells: int) -> int:
    """Ring count giving roughly square cells (sector width close to ring width)."""
    return max(1, int(round(np.sqrt(target_cells / np.pi))))


@dataclass(eq=False)
class Partition:
    cell_of_triangle: np.ndarray  # (n_tri,) 0-based cell index
    n_cells: int
    centroids: np.ndarray         # (M, 2) area-weighted cell centroids
    areas: np.ndarray             # (M,)
    m_rings: int
    sectors: np.ndarray           # sectors per ring, innermost first
    mesh: MeshGeometry = field(repr=False, default=None)

    def cell_areas_spread(self) -> float:
        """Largest relative deviation of a cell area from the mean area."""
        mean = self.areas.sum() / self.n_cells
        return float(np.max(np.abs(self.areas - mean)) / mean)

    def triangle_values(self, cell_values) -> np.ndarray:
        return np.asarray(cell_values, dtype=float)[self.cell_of_triangle]


def polar_cell_index(points, m_rings, sectors) -> np.ndarray:
    """Cell containing each point of a polar ring-sector grid (0-based)."""
    r = np.hypot(points[:, 0], points[:, 1])
    th = np.mod(np.arctan2(points[:, 1], points[:, 0]), 2 * np.pi)
    ring = np.minimum((r * m_rings).astype(int), m_rings - 1)
    first = np.concatenate([[0], np.cumsum(sectors)[:-1]])
    ns = sectors[ring]
    sec = np.minimum((th / (2 * np.pi) * ns).astype(int), ns - 1)
    return first[ring] + sec


def build_partition(mesh: MeshGeometry, m_rings: int | None = None, target_cells: int = 240) -> Partition:
    """Split the disk into ``m_rings`` annuli of equal width, each cut into
    sectors in proportion to its mean radius, and assign every triangle to the
    cell containing its centroid.

    Triangles that end up detached from the rest of their cell (touching it
    only at a vertex) are handed to the adjacent cell, so cells stay
    edge-connected.
    """
    if target_cells > mesh.n_triangles / 4:
        raise PartitionFailure(f"target_cells={target_cells} exceeds a quarter of {mesh.n_triangles} triangles")
    if m_rings is None:
        m_rings = default_rings(target_cells)
    sectors = ring_sector_counts(m_rings, target_cells)
    M = int(sectors.sum())
    if abs(M - target_cells) > 0.05 * target_cells + 0.5:
        raise PartitionFailure(f"{m_rings} rings give {M} cells, not within 5% of {target_cells}")
    cell = polar_cell_index(mesh.centroids, m_rings, sectors)
    if np.bincount(cell, minlength=M).min() == 0:
        raise PartitionFailure("a cell received no triangle")
    a, b = _triangle_adjacency(mesh)
    cell = _repair_fragments(cell, a, b, M)
    areas = np.bincount(cell, weights=mesh.areas, minlength=M)
    if np.any(areas == 0):
        raise PartitionFailure(f"{int((areas == 0).sum())} cells received no triangle")
    cx = np.bincount(cell, weights=mesh.areas * mesh.centroids[:, 0], minlength=M) / areas
    cy = np.bincount(cell, weights=mesh.areas * mesh.centroids[:, 1], minlength=M) / areas
    return Partition(cell, M, np.stack([cx, cy], -1), areas, m_rings, sectors, mesh)


def _triangle_adjacency(mesh: MeshGeometry):
    """Pairs ``(a, b)`` of triangles sharing an edge."""
    t = mesh.triangles
    e = np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
    owner = np.tile(np.arange(len(t)), 3)
    order = np.lexsort((e[:, 1], e[:, 0]))
    e, owner = e[order], owner[order]
    same = np.all(e[1:] == e[:-1], axis=1)
    return owner[:-1][same], owner[1:][same]


def _cell_components(cell, a, b, n_tri):
    keep = cell[a] == cell[b]
    g = coo_matrix((np.ones(keep.sum()), (a[keep], b[keep])), shape=(n_tri, n_tri))
    return connected_components(g, directed=False)


def _repair_fragments(cell, a, b, n_cells, max_rounds=10):
    """Move triangles in detached fragments of a cell to the neighbouring cell
    they share most edges with, until every cell is edge-connected."""
    cell = cell.copy()
    n_tri = len(cell)
    for _ in range(max_rounds):
        n_comp, lab = _cell_components(cell, a, b, n_tri)
        if n_comp == n_cells:
            return cell
        size = np.bincount(lab)
        # main component of each cell = its largest one
        order = np.lexsort((-size[lab], cell))
        main = np.full(n_cells, -1)
        first = np.ones(len(order), bool)
        first[1:] = cell[order][1:] != cell[order][:-1]
        main[cell[order][first]] = lab[order][first]
        stray = np.flatnonzero(lab != main[cell])
        for t in stray:
            nb = np.concatenate([b[a == t], a[b == t]])
            nb = nb[cell[nb] != cell[t]]
            if len(nb):
                vals, cnt = np.unique(cell[nb], return_counts=True)
                cell[t] = vals[np.argmax(cnt)]
    return cell


def cells_connected(part: Partition) -> bool:
    """True if every cell is an edge-connected union of triangles."""
    a, b = _triangle_adjacency(part.mesh)
    n_comp, _ = _cell_components(part.cell_of_triangle, a, b, part.mesh.n_triangles)
    return n_comp == part.n_cells


# ---------------------------------------------------------------------------
# Plain-text import / export
# ---------------------------------------------------------------------------

def save_mesh(path, mesh: MeshGeometry, partition: Partition | None = None):
    """Write nodes, triangles, boundary list and (optionally) the partition
    column to a plain-text file."""
    path = Path(path)
    with path.open("w") as fh:
        fh.write(f"# plaplace mesh v1 seed={mesh.seed} digest={mesh.digest}\n")
        fh.write(f"nodes {mesh.n_nodes}\n")
        for i, (x, y) in enumerate(mesh.nodes):
            fh.write(f"{i} {float(x)!r} {float(y)!r}\n")
        fh.write(f"triangles {mesh.n_triangles}\n")
        cells = partition.cell_of_triangle if partition is not None else None
        for i, (a, b, c) in enumerate(mesh.triangles):
            extra = f" {cells[i]}" if cells is not None else ""
            fh.write(f"{a} {b} {c}{extra}\n")
        fh.write(f"boundary {mesh.n_boundary}\n")
        fh.write(" ".join(map(str, mesh.boundary)) + "\n")
        if partition is not None:
            fh.write(f"partition {partition.m_rings} " + " ".join(map(str, partition.sectors)) + "\n")


def load_mesh(path):
    """Inverse of :func:`save_mesh`; returns ``(mesh, partition_or_None)``."""
    lines = Path(path).read_text().splitlines()
    header = lines[0]
    seed = None
    for tok in header.split():
        if tok.startswith("seed=") and tok[5:] != "None":
            seed = int(tok[5:])
    i = 1
    n = int(lines[i].split()[1]); i += 1
    nodes = np.array([[float(v) for v in lines[i + k].split()[1:3]] for k in range(n)]); i += n
    m = int(lines[i].split()[1]); i += 1
    rows = [lines[i + k].split() for k in range(m)]; i += m
    tri = np.array([[int(v) for v in r[:3]] for r in rows])
    nb = int(lines[i].split()[1]); i += 1
    boundary = np.array([int(v) for v in lines[i].split()]); i += 1
    mesh = MeshGeometry(nodes, tri, boundary, seed=seed)
    assert len(boundary) == nb
    part = None
    if i < len(lines) and lines[i].startswith("partition"):
        tok = lines[i].split()
        m_rings = int(tok[1])
        sectors = np.array([int(v) for v in tok[2:]])
        cell = np.array([int(r[3]) for r in rows])
        M = int(sectors.sum())
        areas = np.bincount(cell, weights=mesh.areas, minlength=M)
        cx = np.bincount(cell, weights=mesh.areas * mesh.centroids[:, 0], minlength=M) / areas
        cy = np.bincount(cell, weights=mesh.areas * mesh.centroids[:, 1], minlength=M) / areas
        part = Partition(cell, M, np.stack([cx, cy], -1), areas, m_rings, sectors, mesh)
    return mesh, part
