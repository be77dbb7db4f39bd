"""Bundled Scottish lip-cancer data and geometry builders for it.

The packaged table carries the classic 56-county counts and expected
counts together with approximate district-centroid coordinates on a
kilometre grid. County polygons, the household grid, the neighbor graph,
and a triangulation graded to resolve the small central-belt districts are
all derived deterministically from those centroids.
"""

import csv
import importlib.resources
from dataclasses import dataclass

import numpy as np
from scipy.spatial import Delaunay

from .icar import Adjacency
from .mesh import TriMesh
from .project import AreaPartition, PopulationGrid

# Prior center for (log tau, log kappa) on kilometre-scale domains of this
# size: unit marginal variance, practical range a few hundred km.
SCOTLAND_THETA_PRIOR_MEAN = (3.24, -4.51)


@dataclass(frozen=True)
class ScotlandData:
    ids: tuple
    names: tuple
    centroids: np.ndarray  # (56, 2) km
    counts: np.ndarray
    expecteds: np.ndarray

    @property
    def n(self):
        return len(self.ids)


def load_scotland():
    """Load the packaged lip-cancer table."""
    ref = importlib.resources.files("aggfield") / "data" / "scotland_lip_cancer.csv"
    ids, names, xs, ys, counts, exp = [], [], [], [], [], []
    with ref.open(newline="") as fh:
        for row in csv.DictReader(fh):
            ids.append(row["id"])
            names.append(row["name"])
            xs.append(float(row["x"]))
            ys.append(float(row["y"]))
            counts.append(float(row["count"]))
            exp.append(float(row["expected"]))
    return ScotlandData(
        ids=tuple(ids),
        names=tuple(names),
        centroids=np.column_stack([xs, ys]),
        counts=np.asarray(counts),
        expecteds=np.asarray(exp),
    )


def _clip_halfplane(poly, point, normal):
    """Sutherland-Hodgman clip of a convex polygon to normal . (x - point) <= 0."""
    out = []
    k = len(poly)
    for i in range(k):
        a, b = poly[i], poly[(i + 1) % k]
        da = float(normal @ (a - point))
        db = float(normal @ (b - point))
        if da <= 0:
            out.append(a)
        if (da < 0 < db) or (db < 0 < da):
            t = da / (da - db)
            out.append(a + t * (b - a))
    return out


def voronoi_partition(points, ids, margin=30.0):
    """Voronoi cells of the seed points clipped to their bbox plus a margin.

    Built by half-plane clipping, so the construction is deterministic and
    dependency free; cells tile the padded bounding rectangle.
    """
    points = np.asarray(points, dtype=float)
    lo = points.min(axis=0) - margin
    hi = points.max(axis=0) + margin
    box = [
        np.array([lo[0], lo[1]]),
        np.array([hi[0], lo[1]]),
        np.array([hi[0], hi[1]]),
        np.array([lo[0], hi[1]]),
    ]
    rings = []
    for i, ci in enumerate(points):
        poly = list(box)
        for j, cj in enumerate(points):
            if j == i:
                continue
            mid = 0.5 * (ci + cj)
            poly = _clip_halfplane(poly, mid, cj - ci)
            if len(poly) < 3:
                raise ValueError(f"empty Voronoi cell for seed {ids[i]!r}")
        rings.append((np.asarray(poly),))
    return AreaPartition(ids=tuple(ids), rings=tuple(rings))


def gabriel_adjacency(points):
    """Gabriel graph: i ~ j when the disk on segment ij holds no other point."""
    points = np.asarray(points, dtype=float)
    n = points.shape[0]
    neighbors = [set() for _ in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            mid = 0.5 * (points[i] + points[j])
            r2 = 0.25 * float(np.sum((points[i] - points[j]) ** 2))
            d2 = np.sum((points - mid) ** 2, axis=1)
            d2[i] = d2[j] = np.inf
            if np.all(d2 >= r2 - 1e-9):
                neighbors[i].add(j)
                neighbors[j].add(i)
    return Adjacency(neighbors=tuple(tuple(sorted(ne)) for ne in neighbors))


def contiguity_adjacency(points, prune_factor=2.5):
    """Contiguity-style neighbor graph from the Delaunay triangulation.

    Delaunay edges approximate shared-border contiguity of centroid-seeded
    territories; edges longer than ``prune_factor`` times the median edge are
    dropped (implausible sea crossings), and minimum-spanning-tree edges are
    restored so remote islands stay connected to the graph.
    """
    from scipy.sparse.csgraph import minimum_spanning_tree

    points = np.asarray(points, dtype=float)
    n = points.shape[0]
    tri = Delaunay(points)
    edges = set()
    for simplex in tri.simplices:
        for a in range(3):
            i, j = int(simplex[a]), int(simplex[(a + 1) % 3])
            edges.add((min(i, j), max(i, j)))
    lengths = {e: float(np.linalg.norm(points[e[0]] - points[e[1]])) for e in edges}
    cutoff = prune_factor * float(np.median(list(lengths.values())))
    kept = {e for e, L in lengths.items() if L <= cutoff}
    dist = np.zeros((n, n))
    for (i, j), L in lengths.items():
        dist[i, j] = dist[j, i] = L
    mst = minimum_spanning_tree(dist).tocoo()
    for i, j in zip(mst.row, mst.col):
        kept.add((min(int(i), int(j)), max(int(i), int(j))))
    neighbors = [set() for _ in range(n)]
    for i, j in kept:
        neighbors[i].add(j)
        neighbors[j].add(i)
    return Adjacency(neighbors=tuple(tuple(sorted(ne)) for ne in neighbors))


def graded_mesh(points, spacing=20.0, extension=60.0, min_separation=None):
    """Delaunay triangulation of a lattice with the seed points inserted.

    Lattice nodes closer than ``min_separation`` (default 0.45 * spacing) to
    a seed are dropped so every seed becomes a mesh node without slivers.
    """
    points = np.asarray(points, dtype=float)
    if min_separation is None:
        min_separation = 0.45 * spacing
    lo = points.min(axis=0) - extension
    hi = points.max(axis=0) + extension
    xs = np.arange(lo[0], hi[0] + spacing / 2, spacing)
    ys = np.arange(lo[1], hi[1] + spacing / 2, spacing)
    lattice = np.column_stack([np.tile(xs, ys.size), np.repeat(ys, xs.size)])
    d2 = np.min(
        np.sum((lattice[:, None, :] - points[None, :, :]) ** 2, axis=2), axis=1
    )
    lattice = lattice[d2 > min_separation**2]
    nodes = np.vstack([points, lattice])
    tri = Delaunay(nodes)
    return TriMesh(nodes=nodes, triangles=tri.simplices.astype(int))


def household_grid(data, spacing=8.0, total=500000.0):
    """Synthetic household grid: one population blob per district.

    Blob mass is proportional to the expected count (an age-standardized
    population surrogate) and its spread is tied to the nearest-neighbor
    distance so towns stay inside their own district. District centroids are
    appended as grid cells, guaranteeing positive in-area mass everywhere.
    """
    pts = data.centroids
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    xs = np.arange(lo[0], hi[0] + spacing / 2, spacing)
    ys = np.arange(lo[1], hi[1] + spacing / 2, spacing)
    cells = np.column_stack([np.tile(xs, ys.size), np.repeat(ys, xs.size)])
    cells = np.vstack([cells, pts])
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.sqrt(np.sum(diff**2, axis=2))
    np.fill_diagonal(dist, np.inf)
    sd = np.clip(0.45 * dist.min(axis=1), 4.0, 20.0)
    mass = data.expecteds / data.expecteds.sum() * total
    counts = np.zeros(cells.shape[0])
    for i in range(data.n):
        d2 = np.sum((cells - pts[i]) ** 2, axis=1)
        counts += mass[i] * np.exp(-0.5 * d2 / sd[i] ** 2) / (2.0 * np.pi * sd[i] ** 2)
    return PopulationGrid(cells=cells, counts=counts)
