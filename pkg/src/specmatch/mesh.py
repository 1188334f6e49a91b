"""Triangle meshes: loading, validation, mass/stiffness assembly, graph geodesics.

Conventions
-----------
* Vertices are float64 rows (n, 3); faces are int64 index triples (m, 3).
* The lumped (barycentric) mass is a diagonal: entry i is one third of the
  area of the triangles incident to vertex i.
* The cotangent stiffness W is symmetric positive semidefinite with zero row
  sums: W_ij = -(cot a_ij + cot b_ij)/2 on edges, W_ii = -sum_j W_ij.
* Geodesic distances are shortest paths over the edge graph weighted by
  Euclidean edge length (Dijkstra).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from .errors import (
    DegenerateMesh,
    DisconnectedMesh,
    IndexOutOfRange,
    ParseError,
)

# Faces with area below this fraction of the squared bounding-box diagonal
# are rejected: their cotangents are numerically hazardous.
DEGENERATE_AREA_FACTOR = 1e-12


class TriangleMesh:
    """Validated, immutable triangle mesh.

    Parameters
    ----------
    vertices : (n, 3) array_like of float
    faces : (m, 3) array_like of int

    Raises
    ------
    IndexOutOfRange
        If a face refers to a vertex outside [0, n).
    DegenerateMesh
        If a face repeats a vertex or has (near-)zero area.
    """

    def __init__(self, vertices, faces):
        v = np.ascontiguousarray(vertices, dtype=np.float64)
        f = np.ascontiguousarray(faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ParseError(f"vertices must be (n, 3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise ParseError(f"faces must be (m, 3), got {f.shape}")
        if not np.isfinite(v).all():
            raise ParseError("vertex coordinates contain NaN or infinity")
        if v.shape[0] < 3 or f.shape[0] < 1:
            raise DegenerateMesh("mesh needs at least 3 vertices and 1 face")
        if f.min() < 0 or f.max() >= v.shape[0]:
            raise IndexOutOfRange(
                f"face index out of range [0, {v.shape[0]}): "
                f"min {f.min()}, max {f.max()}"
            )
        if (
            (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
        ).any():
            raise DegenerateMesh("a face repeats a vertex index")

        self.vertices = v
        self.faces = f
        self.vertices.setflags(write=False)
        self.faces.setflags(write=False)

        areas = self.face_areas
        floor = DEGENERATE_AREA_FACTOR * self.bbox_diag**2
        if (areas <= floor).any():
            bad = int(np.argmin(areas))
            raise DegenerateMesh(
                f"face {bad} has area {areas[bad]:.3e} <= {floor:.3e}"
            )

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    @property
    def bbox_diag(self) -> float:
        try:
            return self._bbox_diag
        except AttributeError:
            ext = self.vertices.max(axis=0) - self.vertices.min(axis=0)
            self._bbox_diag = float(np.linalg.norm(ext))
            return self._bbox_diag

    @property
    def face_areas(self) -> np.ndarray:
        try:
            return self._face_areas
        except AttributeError:
            p0 = self.vertices[self.faces[:, 0]]
            p1 = self.vertices[self.faces[:, 1]]
            p2 = self.vertices[self.faces[:, 2]]
            cr = np.cross(p1 - p0, p2 - p0)
            self._face_areas = 0.5 * np.linalg.norm(cr, axis=1)
            return self._face_areas

    @property
    def total_area(self) -> float:
        return float(self.face_areas.sum())

    @property
    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted (e, 2) index pairs."""
        try:
            return self._edges
        except AttributeError:
            f = self.faces
            halfedges = np.concatenate(
                [f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0
            )
            halfedges.sort(axis=1)
            self._edges = np.unique(halfedges, axis=0)
            return self._edges

    @property
    def edge_lengths(self) -> np.ndarray:
        e = self.edges
        return np.linalg.norm(
            self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1
        )

    def vertex_normals(self) -> np.ndarray:
        """Area-weighted average of incident face normals, unit length."""
        p0 = self.vertices[self.faces[:, 0]]
        p1 = self.vertices[self.faces[:, 1]]
        p2 = self.vertices[self.faces[:, 2]]
        fn = np.cross(p1 - p0, p2 - p0)  # magnitude = 2 * face area
        nrm = np.zeros_like(self.vertices)
        for c in range(3):
            np.add.at(nrm, self.faces[:, c], fn)
        lens = np.linalg.norm(nrm, axis=1)
        lens[lens == 0.0] = 1.0
        return nrm / lens[:, None]

    def with_vertices(self, vertices) -> "TriangleMesh":
        """Same connectivity, new vertex positions (revalidated)."""
        return TriangleMesh(vertices, self.faces)


def load_mesh(path, format: str | None = None) -> TriangleMesh:
    """Load an ASCII OFF or Wavefront OBJ mesh.

    ``format`` is "OFF" or "OBJ"; when None it is inferred from the file
    extension. OFF face indices are 0-based, OBJ 1-based.
    """
    path = Path(path)
    if format is None:
        format = path.suffix.lstrip(".").upper()
    format = format.upper()
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    if format == "OFF":
        v, f = _parse_off(text, str(path))
    elif format == "OBJ":
        v, f = _parse_obj(text, str(path))
    else:
        raise ParseError(f"unsupported mesh format {format!r} for {path}")
    return TriangleMesh(v, f)


def _content_lines(text: str):
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            yield line


def _parse_off(text: str, name: str):
    lines = list(_content_lines(text))
    if not lines:
        raise ParseError(f"{name}: empty OFF file")
    head = lines[0]
    if head == "OFF":
        lines = lines[1:]
    elif head.startswith("OFF"):
        # counts on the header line
        lines[0] = head[3:].strip()
        if not lines[0]:
            lines = lines[1:]
    else:
        raise ParseError(f"{name}: missing OFF header")
    if not lines:
        raise ParseError(f"{name}: missing OFF counts line")
    counts = lines[0].split()
    if len(counts) < 2:
        raise ParseError(f"{name}: bad OFF counts line {lines[0]!r}")
    try:
        n, m = int(counts[0]), int(counts[1])
    except ValueError as exc:
        raise ParseError(f"{name}: bad OFF counts line {lines[0]!r}") from exc
    body = lines[1:]
    if len(body) < n + m:
        raise ParseError(f"{name}: OFF file truncated ({len(body)} < {n + m} lines)")
    try:
        verts = np.array(
            [[float(t) for t in body[i].split()[:3]] for i in range(n)],
            dtype=np.float64,
        )
    except (ValueError, IndexError) as exc:
        raise ParseError(f"{name}: bad OFF vertex line") from exc
    faces = []
    for i in range(n, n + m):
        toks = body[i].split()
        try:
            cnt = int(toks[0])
            idx = [int(t) for t in toks[1 : 1 + cnt]]
        except (ValueError, IndexError) as exc:
            raise ParseError(f"{name}: bad OFF face line {body[i]!r}") from exc
        if cnt != 3 or len(idx) != 3:
            raise ParseError(f"{name}: only triangle faces are supported")
        faces.append(idx)
    if verts.ndim != 2 or (n and verts.shape[1] != 3):
        raise ParseError(f"{name}: OFF vertices are not 3-D")
    return verts, np.array(faces, dtype=np.int64).reshape(m, 3)


def _parse_obj(text: str, name: str):
    verts, faces = [], []
    for line in _content_lines(text):
        toks = line.split()
        if toks[0] == "v":
            if len(toks) < 4:
                raise ParseError(f"{name}: bad OBJ vertex line {line!r}")
            try:
                verts.append([float(t) for t in toks[1:4]])
            except ValueError as exc:
                raise ParseError(f"{name}: bad OBJ vertex line {line!r}") from exc
        elif toks[0] == "f":
            if len(toks) != 4:
                raise ParseError(f"{name}: only triangle faces are supported")
            idx = []
            for t in toks[1:]:
                head = t.split("/", 1)[0]
                try:
                    i = int(head)
                except ValueError as exc:
                    raise ParseError(f"{name}: bad OBJ face token {t!r}") from exc
                if i < 1:
                    raise ParseError(f"{name}: OBJ indices must be positive")
                idx.append(i - 1)
            faces.append(idx)
        # vn / vt / o / g / s / usemtl / mtllib are ignored
    if not verts or not faces:
        raise ParseError(f"{name}: OBJ file has no vertices or no faces")
    return (
        np.array(verts, dtype=np.float64),
        np.array(faces, dtype=np.int64),
    )


def save_off(mesh: TriangleMesh, path) -> None:
    """Write an ASCII OFF file (atomic: temp file + rename)."""
    from .formats import atomic_write_text

    lines = ["OFF", f"{mesh.n_vertices} {mesh.n_faces} 0"]
    for p in mesh.vertices:
        lines.append(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}")
    for f in mesh.faces:
        lines.append(f"3 {f[0]} {f[1]} {f[2]}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def vertex_areas(mesh: TriangleMesh) -> np.ndarray:
    """Lumped per-vertex areas: entry i is (1/3) sum of incident face areas.

    Returns a strictly positive (n,) diagonal; the entries sum to the total
    surface area.
    """
    areas = np.zeros(mesh.n_vertices)
    third = mesh.face_areas / 3.0
    for c in range(3):
        np.add.at(areas, mesh.faces[:, c], third)
    if (areas <= 0.0).any():
        bad = int(np.argmin(areas))
        raise DegenerateMesh(f"vertex {bad} has no incident face area")
    return areas


def cotan_stiffness(mesh: TriangleMesh) -> sparse.csr_matrix:
    """Cotangent stiffness matrix W (symmetric PSD, zero row sums)."""
    v, f = mesh.vertices, mesh.faces
    ij = ((1, 2), (2, 0), (0, 1))  # corner c is opposite edge ij[c]
    rows, cols, vals = [], [], []
    corner_cot = []
    for c in range(3):
        a, b = ij[c]
        e1 = v[f[:, a]] - v[f[:, c]]
        e2 = v[f[:, b]] - v[f[:, c]]
        cr = np.linalg.norm(np.cross(e1, e2), axis=1)
        cot = np.einsum("ij,ij->i", e1, e2) / cr
        corner_cot.append(cot)
    if not np.isfinite(np.concatenate(corner_cot)).all():
        raise DegenerateMesh("undefined cotangent (zero-area corner)")
    for c in range(3):
        a, b = ij[c]
        w = -0.5 * corner_cot[c]
        rows.extend([f[:, a], f[:, b]])
        cols.extend([f[:, b], f[:, a]])
        vals.extend([w, w])
    n = mesh.n_vertices
    W = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    ).tocsr()
    W.sum_duplicates()
    diag = -np.asarray(W.sum(axis=1)).ravel()
    W = W + sparse.diags(diag)
    return W.tocsr()


def _edge_graph(mesh: TriangleMesh) -> sparse.csr_matrix:
    try:
        return mesh._graph
    except AttributeError:
        e, w = mesh.edges, mesh.edge_lengths
        n = mesh.n_vertices
        g = sparse.coo_matrix(
            (np.concatenate([w, w]), (np.concatenate([e[:, 0], e[:, 1]]),
                                      np.concatenate([e[:, 1], e[:, 0]]))),
            shape=(n, n),
        ).tocsr()
        mesh._graph = g
        return g


def geodesic_distances(mesh: TriangleMesh, source: int) -> np.ndarray:
    """Dijkstra distances from ``source`` over the Euclidean edge graph."""
    if not 0 <= source < mesh.n_vertices:
        raise IndexOutOfRange(f"source {source} not in [0, {mesh.n_vertices})")
    d = csgraph.dijkstra(_edge_graph(mesh), directed=False, indices=source)
    if np.isinf(d).any():
        raise DisconnectedMesh(
            f"{int(np.isinf(d).sum())} vertices unreachable from {source}"
        )
    return d


def geodesic_distances_multi(mesh: TriangleMesh, sources) -> np.ndarray:
    """Distances from several sources at once; rows follow ``sources``."""
    sources = np.asarray(sources, dtype=np.int64)
    if sources.size == 0:
        return np.zeros((0, mesh.n_vertices))
    if sources.min() < 0 or sources.max() >= mesh.n_vertices:
        raise IndexOutOfRange("geodesic source index out of range")
    d = csgraph.dijkstra(_edge_graph(mesh), directed=False, indices=sources)
    if np.isinf(d).any():
        raise DisconnectedMesh("mesh is not edge-connected")
    return np.atleast_2d(d)
