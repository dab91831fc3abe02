"""Simplicial 2D meshes: structured generation, file loading, geometry."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Local edges of a triangle (v0,v1,v2): edge j connects LOCAL_EDGES[j].
LOCAL_EDGES = ((0, 1), (1, 2), (2, 0))


class MeshFormatError(ValueError):
    """Raised when a mesh file cannot be parsed."""


class MeshTopologyError(ValueError):
    """Raised when element connectivity is not a valid simplicial mesh."""


@dataclass(frozen=True)
class Mesh:
    """Matching simplicial mesh of a 2D polygonal domain.

    Faces (edges in 2D) are derived from element connectivity and stored as
    sorted vertex pairs.  `element_faces[e, j]` is the global face id of the
    j-th local edge of element e, and `face_signs[e, j]` is +1 when the local
    edge direction agrees with the canonical (sorted) face direction.
    `face_elements[f]` holds the one or two adjacent elements (-1 padding).
    """

    vertices: np.ndarray      # (nv, 2) float
    elements: np.ndarray      # (ne, 3) int, positively oriented
    faces: np.ndarray         # (nf, 2) int, sorted pairs
    element_faces: np.ndarray  # (ne, 3) int
    face_signs: np.ndarray    # (ne, 3) int, +-1
    boundary: np.ndarray      # (nf,) bool
    face_elements: np.ndarray  # (nf, 2) int, -1 where absent

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_elements(self) -> int:
        return self.elements.shape[0]

    @property
    def num_faces(self) -> int:
        return self.faces.shape[0]


@dataclass(frozen=True)
class GeometryCache:
    """Per-entity measures, diameters, normals and distances for a Mesh.

    `normals[e, j]` is the unit normal of local edge j pointing out of
    element e; `d_perp[e, j]` is the distance of the centroid of e to the
    line containing that edge.
    """

    area: np.ndarray       # (ne,)
    diameter: np.ndarray   # (ne,) h_T
    centroid: np.ndarray   # (ne, 2)
    face_length: np.ndarray  # (nf,) |F| = h_F
    normals: np.ndarray    # (ne, 3, 2)
    d_perp: np.ndarray     # (ne, 3) d_TF
    h: float               # max_T h_T
    regularity: float      # max_T h_T / inradius_T

    @property
    def face_diameter(self) -> np.ndarray:
        return self.face_length


def _signed_areas(vertices: np.ndarray, elements: np.ndarray) -> np.ndarray:
    p = vertices[elements]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def _build_mesh(vertices: np.ndarray, elements: np.ndarray) -> Mesh:
    """Derive face connectivity from element connectivity and validate it."""
    vertices = np.ascontiguousarray(vertices, dtype=float)
    elements = np.ascontiguousarray(elements, dtype=np.int64)
    ne = elements.shape[0]
    if ne == 0:
        raise MeshTopologyError("mesh has no elements")
    if elements.min() < 0 or elements.max() >= len(vertices):
        raise MeshTopologyError("element refers to a vertex that does not exist")
    if np.any(
        (elements[:, 0] == elements[:, 1])
        | (elements[:, 1] == elements[:, 2])
        | (elements[:, 0] == elements[:, 2])
    ):
        raise MeshTopologyError("element with repeated vertex")

    key = np.sort(elements, axis=1)
    if len(np.unique(key, axis=0)) != ne:
        raise MeshTopologyError("duplicate element (same vertex set appears twice)")

    edges = elements[:, LOCAL_EDGES]                   # (ne, 3, 2)
    edges_sorted = np.sort(edges.reshape(-1, 2), axis=1)
    faces, inverse, counts = np.unique(
        edges_sorted, axis=0, return_inverse=True, return_counts=True
    )
    if counts.max() > 2:
        bad = faces[np.argmax(counts)]
        raise MeshTopologyError(
            f"edge {tuple(bad)} is shared by {counts.max()} elements"
        )
    element_faces = inverse.reshape(ne, 3)
    signs = np.where(edges[:, :, 0] < edges[:, :, 1], 1, -1).astype(np.int64)
    boundary = counts == 1

    face_elements = -np.ones((len(faces), 2), dtype=np.int64)
    order = np.argsort(element_faces.reshape(-1), kind="stable")
    flat_elems = np.repeat(np.arange(ne), 3)[order]
    flat_faces = element_faces.reshape(-1)[order]
    first = np.searchsorted(flat_faces, np.arange(len(faces)), side="left")
    face_elements[:, 0] = flat_elems[first]
    second = counts == 2
    face_elements[second, 1] = flat_elems[first[second] + 1]

    return Mesh(
        vertices=vertices,
        elements=elements,
        faces=faces,
        element_faces=element_faces,
        face_signs=signs,
        boundary=boundary,
        face_elements=face_elements,
    )


def generate_structured_mesh(n: int) -> Mesh:
    """Uniform triangulation of the unit square into 2*n^2 triangles.

    Each grid cell is cut along its lower-left to upper-right diagonal, so
    the mesh size is h = sqrt(2)/n.
    """
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise ValueError(f"n must be a positive integer, got {n!r}")
    ticks = np.arange(n + 1) / n
    xx, yy = np.meshgrid(ticks, ticks, indexing="xy")
    vertices = np.column_stack([xx.ravel(), yy.ravel()])

    def vid(i, j):
        return j * (n + 1) + i

    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
    ii, jj = ii.ravel(), jj.ravel()
    v00, v10 = vid(ii, jj), vid(ii + 1, jj)
    v01, v11 = vid(ii, jj + 1), vid(ii + 1, jj + 1)
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    elements = np.vstack([lower, upper])
    return _build_mesh(vertices, elements)


def load_mesh(text: str) -> Mesh:
    """Parse the line-oriented mesh format (see package README).

    Clockwise elements are reordered to positive orientation; faces are
    rebuilt from connectivity, never read from the file.
    """
    tokens: list[tuple[int, list[str]]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            tokens.append((lineno, line.split()))

    pos = 0

    def take(what: str) -> tuple[int, list[str]]:
        nonlocal pos
        if pos >= len(tokens):
            raise MeshFormatError(f"unexpected end of file while reading {what}")
        item = tokens[pos]
        pos += 1
        return item

    lineno, words = take("header")
    if words != ["meshdim", "2"]:
        raise MeshFormatError(f"line {lineno}: expected 'meshdim 2'")

    lineno, words = take("vertex count")
    if len(words) != 2 or words[0] != "vertices":
        raise MeshFormatError(f"line {lineno}: expected 'vertices N'")
    try:
        nv = int(words[1])
    except ValueError:
        raise MeshFormatError(f"line {lineno}: bad vertex count {words[1]!r}") from None

    vertices = np.empty((nv, 2))
    for i in range(nv):
        lineno, words = take("vertex")
        if len(words) != 2:
            raise MeshFormatError(f"line {lineno}: expected 'x y'")
        try:
            vertices[i] = [float(words[0]), float(words[1])]
        except ValueError:
            raise MeshFormatError(f"line {lineno}: bad vertex coordinates") from None

    lineno, words = take("element count")
    if len(words) != 2 or words[0] != "elements":
        raise MeshFormatError(f"line {lineno}: expected 'elements M'")
    try:
        ne = int(words[1])
    except ValueError:
        raise MeshFormatError(f"line {lineno}: bad element count {words[1]!r}") from None

    elements = np.empty((ne, 3), dtype=np.int64)
    for i in range(ne):
        lineno, words = take("element")
        if len(words) != 3:
            raise MeshFormatError(f"line {lineno}: expected 'i j k'")
        try:
            elements[i] = [int(w) for w in words]
        except ValueError:
            raise MeshFormatError(f"line {lineno}: bad vertex index") from None

    if pos != len(tokens):
        lineno = tokens[pos][0]
        raise MeshFormatError(f"line {lineno}: trailing content after element list")

    areas = _signed_areas(vertices, elements)
    flip = areas < 0
    elements[flip] = elements[flip][:, [0, 2, 1]]
    if np.any(_signed_areas(vertices, elements) <= 0):
        bad = int(np.argmin(_signed_areas(vertices, elements)))
        raise MeshTopologyError(f"element {bad} has zero area")
    return _build_mesh(vertices, elements)


def write_mesh(mesh: Mesh) -> str:
    """Serialize a mesh back to the text format accepted by load_mesh."""
    lines = ["meshdim 2", f"vertices {mesh.num_vertices}"]
    lines += [f"{float(x)!r} {float(y)!r}" for x, y in mesh.vertices]
    lines.append(f"elements {mesh.num_elements}")
    lines += [f"{i} {j} {k}" for i, j, k in mesh.elements]
    return "\n".join(lines) + "\n"


def compute_geometry(mesh: Mesh) -> GeometryCache:
    """Measures, diameters, outward normals, and centroid-face distances."""
    p = mesh.vertices[mesh.elements]          # (ne, 3, 2)
    area = _signed_areas(mesh.vertices, mesh.elements)
    centroid = p.mean(axis=1)

    edge_vec = p[:, [1, 2, 0], :] - p          # local edge j = LOCAL_EDGES[j]
    edge_len = np.linalg.norm(edge_vec, axis=2)
    diameter = edge_len.max(axis=1)
    if np.any(area <= 1e-14 * diameter**2):
        bad = int(np.argmin(area / diameter**2))
        raise ValueError(f"degenerate element {bad}: area {area[bad]:.3e}")

    # CCW orientation: rotating the directed edge by -90 degrees points outward.
    normals = np.stack([edge_vec[:, :, 1], -edge_vec[:, :, 0]], axis=2)
    normals /= edge_len[:, :, None]
    d_perp = np.einsum("ejd,ejd->ej", p - centroid[:, None, :], normals)

    face_pts = mesh.vertices[mesh.faces]
    face_length = np.linalg.norm(face_pts[:, 1] - face_pts[:, 0], axis=1)

    perimeter = edge_len.sum(axis=1)
    inradius = 2.0 * area / perimeter
    regularity = float((diameter / inradius).max())

    return GeometryCache(
        area=area,
        diameter=diameter,
        centroid=centroid,
        face_length=face_length,
        normals=normals,
        d_perp=d_perp,
        h=float(diameter.max()),
        regularity=regularity,
    )
