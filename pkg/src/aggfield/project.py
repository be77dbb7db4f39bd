"""Observation operators mapping mesh weights to data locations.

Point rows interpolate within the containing triangle (inverse-distance
weights by default, barycentric optionally); area rows are relative
population densities over the mesh nodes inside each area, built by
assigning every population-grid cell to its nearest in-area node.
"""

import csv
import json
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .mesh import locate_point


class ProjectionError(ValueError):
    """Invalid projector construction input."""


VERTEX_SNAP_DISTANCE = 1e-9


@dataclass(frozen=True)
class Projector:
    """Sparse row-stochastic map from mesh weights to observation units."""

    matrix: sp.csr_matrix
    kind: str  # "point" | "area" | "mixed"
    row_ids: tuple

    @property
    def n_rows(self):
        return self.matrix.shape[0]

    def row_sums(self):
        return np.asarray(self.matrix.sum(axis=1)).ravel()


@dataclass(frozen=True)
class PopulationGrid:
    """Grid-cell centroids with nonnegative population counts."""

    cells: np.ndarray  # (g, 2)
    counts: np.ndarray  # (g,)

    def __post_init__(self):
        cells = np.atleast_2d(np.asarray(self.cells, dtype=float))
        counts = np.asarray(self.counts, dtype=float).ravel()
        if cells.shape[0] != counts.shape[0]:
            raise ProjectionError("cells and counts must have equal length")
        if not np.all(np.isfinite(counts)) or np.any(counts < 0):
            raise ProjectionError("population counts must be finite and nonnegative")
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "counts", counts)


@dataclass(frozen=True)
class AreaPartition:
    """Disjoint areas, each a list of polygon rings (even-odd interior rule)."""

    ids: tuple
    rings: tuple  # per area: tuple of (k, 2) arrays

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise ProjectionError("area ids must be unique")
        if len(self.ids) != len(self.rings):
            raise ProjectionError("ids and rings must align")

    @property
    def n(self):
        return len(self.ids)


def _point_on_ring_boundary(pt, ring, tol):
    x, y = pt
    a = ring
    b = np.roll(ring, -1, axis=0)
    dx, dy = b[:, 0] - a[:, 0], b[:, 1] - a[:, 1]
    px, py = x - a[:, 0], y - a[:, 1]
    seg2 = dx * dx + dy * dy
    t = np.where(seg2 > 0, (px * dx + py * dy) / np.where(seg2 > 0, seg2, 1.0), 0.0)
    t = np.clip(t, 0.0, 1.0)
    d2 = (px - t * dx) ** 2 + (py - t * dy) ** 2
    return bool(np.any(d2 <= tol * tol))


def _ray_crossings(pt, ring):
    # standard half-open rule: count edges crossing the horizontal ray to +x
    x, y = pt
    a = ring
    b = np.roll(ring, -1, axis=0)
    cond = (a[:, 1] > y) != (b[:, 1] > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xint = a[:, 0] + (y - a[:, 1]) * (b[:, 0] - a[:, 0]) / (b[:, 1] - a[:, 1])
    return int(np.count_nonzero(cond & (x < xint)))


def point_in_area(partition, area_index, pt, boundary_tol=1e-12):
    """Even-odd containment; points within tolerance of a boundary count as inside."""
    crossings = 0
    for ring in partition.rings[area_index]:
        if _point_on_ring_boundary(pt, ring, boundary_tol):
            return True
        crossings += _ray_crossings(pt, ring)
    return crossings % 2 == 1


def _id_order(partition):
    return sorted(range(partition.n), key=lambda i: partition.ids[i])


def _area_bboxes(partition, pad=1e-9):
    boxes = []
    for rings in partition.rings:
        pts = np.vstack(rings)
        boxes.append((pts.min(axis=0) - pad, pts.max(axis=0) + pad))
    return boxes


def locate_area(partition, pt, _order=None, _boxes=None):
    """Index of the area containing ``pt``; boundary ties go to the lowest id.

    Returns None when the point is outside every area.
    """
    order = _id_order(partition) if _order is None else _order
    boxes = _area_bboxes(partition) if _boxes is None else _boxes
    pt = np.asarray(pt, dtype=float)
    for i in order:
        lo, hi = boxes[i]
        if np.any(pt < lo) or np.any(pt > hi):
            continue
        if point_in_area(partition, i, pt):
            return i
    return None


def point_projector(mesh, points, weighting="invdist"):
    """Sparse A matrix: one row per point over the containing triangle's vertices.

    Weights are proportional to inverse distance to the three vertices
    (``weighting="invdist"``, the default) or barycentric coordinates
    (``weighting="barycentric"``); points within 1e-9 of a mesh vertex get a
    single unit weight either way.
    """
    if weighting not in ("invdist", "barycentric"):
        raise ProjectionError(f"unknown weighting {weighting!r}")
    points = np.atleast_2d(np.asarray(points, dtype=float))
    rows, cols, vals = [], [], []
    for r, pt in enumerate(points):
        hit = locate_point(mesh, pt)
        if hit is None:
            raise ProjectionError(f"point {r} at {tuple(pt)} is outside the mesh hull")
        t, lam = hit
        verts = mesh.triangles[t]
        dists = np.linalg.norm(mesh.nodes[verts] - pt, axis=1)
        near = np.nonzero(dists < VERTEX_SNAP_DISTANCE)[0]
        if near.size:
            rows.append(r)
            cols.append(verts[near[0]])
            vals.append(1.0)
            continue
        if weighting == "invdist":
            w = 1.0 / dists
        else:
            w = np.maximum(lam, 0.0)
        w = w / w.sum()
        rows.extend([r] * 3)
        cols.extend(verts.tolist())
        vals.extend(w.tolist())
    mat = sp.csr_matrix((vals, (rows, cols)), shape=(len(points), mesh.n_nodes))
    return Projector(matrix=mat, kind="point", row_ids=tuple(range(len(points))))


def nodes_in_areas(mesh, partition):
    """Per-area arrays of mesh-node indices, by even-odd containment."""
    assignment = np.full(mesh.n_nodes, -1, dtype=int)
    boxes = _area_bboxes(partition)
    for i in _id_order(partition):
        lo, hi = boxes[i]
        todo = np.nonzero(
            (assignment < 0)
            & np.all(mesh.nodes >= lo, axis=1)
            & np.all(mesh.nodes <= hi, axis=1)
        )[0]
        for k in todo:
            if point_in_area(partition, i, mesh.nodes[k]):
                assignment[k] = i
    return [np.nonzero(assignment == i)[0] for i in range(partition.n)]


def area_projector(mesh, partition, grid):
    """Sparse D matrix of relative population densities, one row per area.

    Every grid cell's population goes to the nearest mesh node inside the
    same area; per-area totals are then normalized to sum to one.
    """
    node_lists = nodes_in_areas(mesh, partition)
    for i, nl in enumerate(node_lists):
        if nl.size == 0:
            raise ProjectionError(f"area {partition.ids[i]!r} contains no mesh node")
    weights = [np.zeros(nl.size) for nl in node_lists]
    order = _id_order(partition)
    boxes = _area_bboxes(partition)
    for cell, count in zip(grid.cells, grid.counts):
        i = locate_area(partition, cell, _order=order, _boxes=boxes)
        if i is None:
            continue
        nl = node_lists[i]
        d2 = np.sum((mesh.nodes[nl] - cell) ** 2, axis=1)
        weights[i][int(np.argmin(d2))] += count
    rows, cols, vals = [], [], []
    for i, (nl, w) in enumerate(zip(node_lists, weights)):
        total = w.sum()
        if total <= 0:
            raise ProjectionError(f"area {partition.ids[i]!r} received zero total population")
        rows.extend([i] * nl.size)
        cols.extend(nl.tolist())
        vals.extend((w / total).tolist())
    mat = sp.csr_matrix((vals, (rows, cols)), shape=(partition.n, mesh.n_nodes))
    mat.eliminate_zeros()
    return Projector(matrix=mat, kind="area", row_ids=tuple(partition.ids))


def stack_projectors(projectors):
    """Stack rows of several projectors over the same mesh (combined data)."""
    if not projectors:
        raise ProjectionError("nothing to stack")
    kinds = {p.kind for p in projectors}
    kind = kinds.pop() if len(kinds) == 1 else "mixed"
    mat = sp.vstack([p.matrix for p in projectors]).tocsr()
    ids = tuple(i for p in projectors for i in p.row_ids)
    return Projector(matrix=mat, kind=kind, row_ids=ids)


def load_population_grid(source, divisor=None):
    """Read population_grid.csv (x,y,count); optional scalar divisor on counts."""
    cells, counts = [], []
    with open(source, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["x", "y", "count"]:
            raise ProjectionError(f"{source}: expected header x,y,count, got {reader.fieldnames}")
        for r, row in enumerate(reader):
            try:
                cells.append((float(row["x"]), float(row["y"])))
                counts.append(float(row["count"]))
            except (TypeError, ValueError) as exc:
                raise ProjectionError(f"{source}: bad row {r}: {row}") from exc
    if not cells:
        raise ProjectionError(f"{source}: empty population grid")
    counts = np.asarray(counts)
    if np.any(counts < 0):
        raise ProjectionError(f"{source}: negative count")
    if divisor is not None:
        if divisor <= 0:
            raise ProjectionError(f"divisor must be positive, got {divisor}")
        counts = counts / divisor
    return PopulationGrid(cells=np.asarray(cells), counts=counts)


def save_population_grid(grid, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "count"])
        for (x, y), c in zip(grid.cells, grid.counts):
            w.writerow([repr(float(x)), repr(float(y)), repr(float(c))])


def _rings_from_geojson_coords(geom):
    gtype = geom.get("type")
    if gtype == "Polygon":
        polys = [geom["coordinates"]]
    elif gtype == "MultiPolygon":
        polys = geom["coordinates"]
    else:
        raise ProjectionError(f"unsupported geometry type {gtype!r} (Polygon/MultiPolygon only)")
    rings = []
    for poly in polys:
        for ring in poly:
            arr = np.asarray(ring, dtype=float)
            if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 3:
                raise ProjectionError(f"malformed ring of shape {arr.shape}")
            if np.allclose(arr[0], arr[-1]):
                arr = arr[:-1]  # stored closed; we treat rings as implicitly closed
            rings.append(arr)
    return tuple(rings)


def load_partition(source):
    """Read a minimal GeoJSON FeatureCollection of Polygon/MultiPolygon areas."""
    with open(source) as fh:
        doc = json.load(fh)
    if doc.get("type") != "FeatureCollection":
        raise ProjectionError(f"{source}: expected a FeatureCollection")
    ids, rings = [], []
    for k, feature in enumerate(doc.get("features", [])):
        props = feature.get("properties") or {}
        if "id" not in props:
            raise ProjectionError(f"{source}: feature {k} missing an 'id' property")
        ids.append(props["id"])
        rings.append(_rings_from_geojson_coords(feature.get("geometry") or {}))
    if not ids:
        raise ProjectionError(f"{source}: no features")
    return AreaPartition(ids=tuple(ids), rings=tuple(rings))


def save_partition(partition, path):
    features = []
    for aid, rings in zip(partition.ids, partition.rings):
        coords = [[[list(map(float, pt)) for pt in ring] + [list(map(float, ring[0]))]]
                  for ring in rings]
        geom = {"type": "MultiPolygon", "coordinates": coords}
        features.append({"type": "Feature", "properties": {"id": aid}, "geometry": geom})
    with open(path, "w") as fh:
        json.dump({"type": "FeatureCollection", "features": features}, fh)


def load_points(source):
    """Read points.csv (id,x,y) into ids and an (n, 2) coordinate array."""
    ids, pts = [], []
    with open(source, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["id", "x", "y"]:
            raise ProjectionError(f"{source}: expected header id,x,y, got {reader.fieldnames}")
        for r, row in enumerate(reader):
            try:
                ids.append(row["id"])
                pts.append((float(row["x"]), float(row["y"])))
            except (TypeError, ValueError) as exc:
                raise ProjectionError(f"{source}: bad row {r}: {row}") from exc
    if not ids:
        raise ProjectionError(f"{source}: no points")
    return ids, np.asarray(pts)
