"""Planar triangulations and the finite-element matrices built on them.

Meshes come from the structured lattice builder or from node/triangle CSV
files; both paths run the same validation (index bounds, nonzero areas,
counterclockwise orientation, edge connectivity). Coordinates are treated
as planar throughout.
"""

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


class MeshError(ValueError):
    """Invalid mesh construction or query input."""


def _signed_area(pts, tri):
    a, b, c = pts[tri[:, 0]], pts[tri[:, 1]], pts[tri[:, 2]]
    return 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
                  - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))


@dataclass
class TriMesh:
    """Triangulation of a planar domain.

    Parameters
    ----------
    nodes : (m, 2) float array
        Node coordinates, in domain units (degrees or km).
    triangles : (t, 3) int array
        Vertex index triples; normalized to counterclockwise orientation.
    domain_boundary : optional (k, 2) array
        Polygon used for point-in-domain tests; not required for inference.
    """

    nodes: np.ndarray
    triangles: np.ndarray
    domain_boundary: np.ndarray | None = None
    _tri_index: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        nodes = np.atleast_2d(np.asarray(self.nodes, dtype=float))
        tris = np.atleast_2d(np.asarray(self.triangles, dtype=int))
        if nodes.ndim != 2 or nodes.shape[1] != 2:
            raise MeshError(f"nodes must be (m, 2), got {nodes.shape}")
        if tris.ndim != 2 or tris.shape[1] != 3:
            raise MeshError(f"triangles must be (t, 3), got {tris.shape}")
        if not np.all(np.isfinite(nodes)):
            raise MeshError("non-finite node coordinate")
        m = nodes.shape[0]
        bad = (tris < 0) | (tris >= m)
        if np.any(bad):
            row = int(np.nonzero(bad.any(axis=1))[0][0])
            raise MeshError(f"triangle row {row} references node outside 0..{m - 1}: {tris[row]}")
        for r, t in enumerate(tris):
            if len(set(t)) != 3:
                raise MeshError(f"triangle row {r} has repeated vertices: {t}")
        area = _signed_area(nodes, tris)
        scale = max(np.abs(nodes).max(), 1.0)
        degenerate = np.abs(area) <= 1e-14 * scale * scale
        if np.any(degenerate):
            row = int(np.nonzero(degenerate)[0][0])
            raise MeshError(f"triangle row {row} is degenerate (zero area): {tris[row]}")
        flip = area < 0
        tris = tris.copy()
        tris[flip] = tris[flip][:, [0, 2, 1]]
        self.nodes = nodes
        self.triangles = tris
        self._check_connected()

    def _check_connected(self):
        m = self.n_nodes
        parent = np.arange(m)

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        for t in self.triangles:
            r0 = find(t[0])
            for v in t[1:]:
                rv = find(v)
                if rv != r0:
                    parent[rv] = r0
        roots = {find(i) for i in range(m)}
        if len(roots) > 1:
            raise MeshError(f"mesh is not edge-connected ({len(roots)} components)")

    @property
    def n_nodes(self):
        return self.nodes.shape[0]

    @property
    def n_triangles(self):
        return self.triangles.shape[0]

    def triangle_areas(self):
        return _signed_area(self.nodes, self.triangles)

    def _index(self):
        # lazy uniform-bin spatial index over triangle bounding boxes
        if self._tri_index is None:
            pts = self.nodes[self.triangles]  # (t, 3, 2)
            lo, hi = pts.min(axis=1), pts.max(axis=1)
            gmin, gmax = self.nodes.min(axis=0), self.nodes.max(axis=0)
            span = np.maximum(gmax - gmin, 1e-300)
            ng = max(1, int(np.sqrt(self.n_triangles)))
            cells = {}
            ilo = np.clip(((lo - gmin) / span * ng).astype(int), 0, ng - 1)
            ihi = np.clip(((hi - gmin) / span * ng).astype(int), 0, ng - 1)
            for t in range(self.n_triangles):
                for ix in range(ilo[t, 0], ihi[t, 0] + 1):
                    for iy in range(ilo[t, 1], ihi[t, 1] + 1):
                        cells.setdefault((ix, iy), []).append(t)
            self._tri_index = {"cells": cells, "gmin": gmin, "span": span, "ng": ng}
        return self._tri_index


def build_regular_mesh(bbox, spacing, extension=0.0):
    """Structured triangular lattice over an axis-aligned rectangle.

    The rectangle ``bbox = (xmin, ymin, xmax, ymax)`` is enlarged by
    ``extension`` on every side; nodes are laid out row-major with the given
    spacing and each lattice cell is split along its lower-left/upper-right
    diagonal.
    """
    if spacing <= 0:
        raise MeshError(f"spacing must be positive, got {spacing}")
    if extension < 0:
        raise MeshError(f"extension must be nonnegative, got {extension}")
    xmin, ymin, xmax, ymax = map(float, bbox)
    if not (xmax > xmin and ymax > ymin):
        raise MeshError(f"degenerate bbox {bbox}")
    x0, y0 = xmin - extension, ymin - extension
    wx, wy = (xmax - xmin) + 2 * extension, (ymax - ymin) + 2 * extension
    nx = int(np.ceil(wx / spacing - 1e-9)) + 1
    ny = int(np.ceil(wy / spacing - 1e-9)) + 1
    xs = x0 + spacing * np.arange(nx)
    ys = y0 + spacing * np.arange(ny)
    nodes = np.column_stack([np.tile(xs, ny), np.repeat(ys, nx)])
    tris = []
    for iy in range(ny - 1):
        for ix in range(nx - 1):
            v00 = iy * nx + ix
            v10 = v00 + 1
            v01 = v00 + nx
            v11 = v01 + 1
            tris.append((v00, v10, v11))
            tris.append((v00, v11, v01))
    return TriMesh(nodes, np.array(tris, dtype=int))


def load_mesh(node_source, triangle_source):
    """Read a mesh from ``nodes.csv`` (id,x,y) and ``triangles.csv`` (v0,v1,v2)."""
    nodes = []
    with open(node_source, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["id", "x", "y"]:
            raise MeshError(f"{node_source}: expected header id,x,y, got {reader.fieldnames}")
        for r, row in enumerate(reader):
            try:
                i, x, y = int(row["id"]), float(row["x"]), float(row["y"])
            except (TypeError, ValueError) as exc:
                raise MeshError(f"{node_source}: bad row {r}: {row}") from exc
            if i != r:
                raise MeshError(f"{node_source}: ids must be 0-based contiguous, row {r} has id {i}")
            nodes.append((x, y))
    if not nodes:
        raise MeshError(f"{node_source}: no nodes")
    tris = []
    with open(triangle_source, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["v0", "v1", "v2"]:
            raise MeshError(f"{triangle_source}: expected header v0,v1,v2, got {reader.fieldnames}")
        for r, row in enumerate(reader):
            try:
                tris.append((int(row["v0"]), int(row["v1"]), int(row["v2"])))
            except (TypeError, ValueError) as exc:
                raise MeshError(f"{triangle_source}: bad row {r}: {row}") from exc
    if not tris:
        raise MeshError(f"{triangle_source}: no triangles")
    return TriMesh(np.array(nodes), np.array(tris, dtype=int))


def save_mesh(mesh, node_path, triangle_path):
    """Write a mesh in the same CSV formats accepted by load_mesh."""
    with open(node_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "x", "y"])
        for i, (x, y) in enumerate(mesh.nodes):
            w.writerow([i, repr(float(x)), repr(float(y))])
    with open(triangle_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["v0", "v1", "v2"])
        for t in mesh.triangles:
            w.writerow([int(t[0]), int(t[1]), int(t[2])])


@dataclass(frozen=True)
class FemMatrices:
    """Lumped mass matrix C (diagonal) and stiffness matrix G for a mesh."""

    C: sp.csc_matrix
    G: sp.csc_matrix

    @property
    def n(self):
        return self.C.shape[0]

    def C_diag(self):
        return np.asarray(self.C.diagonal())


def assemble_fem(mesh):
    """Assemble the piecewise-linear mass (lumped) and stiffness matrices.

    C_kk collects one third of the area of every triangle containing node k;
    G accumulates inner products of the barycentric basis gradients per
    element, so G 1 = 0 and G is symmetric positive semidefinite.
    """
    pts = mesh.nodes
    tris = mesh.triangles
    areas = mesh.triangle_areas()
    if np.any(areas <= 0):
        raise MeshError("degenerate triangle encountered during assembly")
    m = mesh.n_nodes
    c_diag = np.zeros(m)
    np.add.at(c_diag, tris.ravel(), np.repeat(areas / 3.0, 3))

    a, b, c = pts[tris[:, 0]], pts[tris[:, 1]], pts[tris[:, 2]]
    # gradient of barycentric coordinate i: (y_j - y_k, x_k - x_j) / (2 area)
    bco = np.stack([b[:, 1] - c[:, 1], c[:, 1] - a[:, 1], a[:, 1] - b[:, 1]], axis=1)
    cco = np.stack([c[:, 0] - b[:, 0], a[:, 0] - c[:, 0], b[:, 0] - a[:, 0]], axis=1)
    rows, cols, vals = [], [], []
    for i in range(3):
        for j in range(3):
            rows.append(tris[:, i])
            cols.append(tris[:, j])
            vals.append((bco[:, i] * bco[:, j] + cco[:, i] * cco[:, j]) / (4.0 * areas))
    G = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(m, m)
    ).tocsc()
    G = (G + G.T) * 0.5
    C = sp.diags(c_diag, format="csc")
    return FemMatrices(C=C, G=G)


def barycentric_coordinates(pts, tri_pts):
    """Barycentric coordinates of points with respect to one triangle."""
    a, b, c = tri_pts
    m = np.array([[b[0] - a[0], c[0] - a[0]], [b[1] - a[1], c[1] - a[1]]])
    rhs = np.asarray(pts, dtype=float) - a
    sol = np.linalg.solve(m, rhs.T).T
    if sol.ndim == 1:
        l1, l2 = sol[0], sol[1]
    else:
        l1, l2 = sol[:, 0], sol[:, 1]
    return np.stack([1.0 - l1 - l2, l1, l2], axis=-1)


def locate_point(mesh, x, tol=1e-12):
    """Find the triangle containing ``x``; None if outside the mesh.

    Returns ``(triangle_index, barycentric)`` with the barycentric weights
    ordered like the triangle's vertices. Points on shared edges resolve to
    the lowest triangle index.
    """
    x = np.asarray(x, dtype=float)
    idx = mesh._index()
    gmin, span, ng = idx["gmin"], idx["span"], idx["ng"]
    cell = tuple(np.clip(((x - gmin) / span * ng).astype(int), 0, ng - 1))
    candidates = idx["cells"].get(cell, [])
    best = None
    for t in candidates:
        lam = barycentric_coordinates(x, mesh.nodes[mesh.triangles[t]])
        if np.all(lam >= -tol):
            if best is None or t < best[0]:
                best = (t, lam)
    if best is None:
        return None
    return best[0], best[1]
