"""Two-dimensional polytopal meshes with explicit (possibly nonconforming) faces.

Elements are counter-clockwise vertex loops.  A geometric edge of an element
may be split into several faces by hanging vertices of its neighbours; the
loops stored on a :class:`PolytopalMesh` always contain those vertices, so the
faces of an element are exactly the consecutive vertex pairs of its loop.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linprog
from scipy.spatial import cKDTree

__all__ = [
    "MeshError",
    "ParseError",
    "GeometryError",
    "NonmanifoldError",
    "StarShapeError",
    "PolytopalMesh",
    "ElementSubmesh",
    "MeshFamilySpec",
    "FAMILIES",
    "generate",
    "load",
    "save",
    "from_polygons",
    "build_submesh",
    "validate",
]

FAMILIES = ("triangular", "cartesian", "hexagonal", "locally_refined")


class MeshError(Exception):
    pass


class ParseError(MeshError):
    pass


class GeometryError(MeshError):
    pass


class NonmanifoldError(MeshError):
    pass


class StarShapeError(MeshError):
    pass


def _signed_area(xy):
    # relative coordinates avoid cancellation on small cells far from the origin
    xy = xy - xy[0]
    x, y = xy[:, 0], xy[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _polygon_centroid(xy):
    origin = xy[0]
    xy = xy - origin
    x, y = xy[:, 0], xy[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    area = 0.5 * cross.sum()
    cx = ((x + xn) * cross).sum() / (6.0 * area)
    cy = ((y + yn) * cross).sum() / (6.0 * area)
    return np.array([cx, cy]) + origin


def _diameter(xy):
    d = xy[:, None, :] - xy[None, :, :]
    return float(np.sqrt((d**2).sum(-1)).max())


def _segments_cross(p1, p2, q1, q2):
    """Proper intersection of two segments (shared endpoints excluded)."""

    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1, d2 = orient(q1, q2, p1), orient(q1, q2, p2)
    d3, d4 = orient(p1, p2, q1), orient(p1, p2, q2)
    return d1 * d2 < 0 and d3 * d4 < 0


@dataclass(eq=False)
class PolytopalMesh:
    """Vertices, CCW element loops and faces with per-element outward normals.

    ``faces[f] = (v1, v2)``; ``face_elements[f] = (t1, t2)`` with ``t2 = -1``
    on the boundary.  ``element_faces[t]`` lists faces in loop order and
    ``element_normals[t]`` the matching outward unit normals.
    """

    vertices: np.ndarray
    elements: list
    faces: np.ndarray
    face_elements: np.ndarray
    element_faces: list
    element_normals: list
    areas: np.ndarray = field(init=False)
    centroids: np.ndarray = field(init=False)
    diameters: np.ndarray = field(init=False)
    face_lengths: np.ndarray = field(init=False)
    face_midpoints: np.ndarray = field(init=False)
    face_tangents: np.ndarray = field(init=False)

    def __post_init__(self):
        xy = self.vertices
        self.areas = np.array([_signed_area(xy[loop]) for loop in self.elements])
        self.centroids = np.array([_polygon_centroid(xy[loop]) for loop in self.elements])
        self.diameters = np.array([_diameter(xy[loop]) for loop in self.elements])
        a = xy[self.faces[:, 0]]
        b = xy[self.faces[:, 1]]
        self.face_lengths = np.linalg.norm(b - a, axis=1)
        self.face_midpoints = 0.5 * (a + b)
        self.face_tangents = (b - a) / self.face_lengths[:, None]

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def h(self) -> float:
        return float(self.diameters.max())

    @property
    def boundary_faces(self) -> np.ndarray:
        return np.flatnonzero(self.face_elements[:, 1] < 0)

    @property
    def interior_faces(self) -> np.ndarray:
        return np.flatnonzero(self.face_elements[:, 1] >= 0)

    def element_vertices(self, t: int) -> np.ndarray:
        return self.vertices[self.elements[t]]

    def face_endpoints(self, f: int):
        v1, v2 = self.faces[f]
        return self.vertices[v1], self.vertices[v2]

    def perimeter(self, t: int) -> float:
        return float(self.face_lengths[self.element_faces[t]].sum())


@dataclass(frozen=True)
class ElementSubmesh:
    """Face-based triangles ``P_TF`` sharing the apex ``star``."""

    element: int
    star: np.ndarray
    triangles: np.ndarray  # (n_faces, 3, 2): apex, face start, face end
    areas: np.ndarray
    distances: np.ndarray  # orthogonal distance d_TF from the star point to each face line

    @property
    def subfaces(self):
        """The three edges of each ``P_TF`` as (start, end) point pairs."""
        tri = self.triangles
        return [[(tri[i, 0], tri[i, 1]), (tri[i, 1], tri[i, 2]), (tri[i, 2], tri[i, 0])]
                for i in range(len(tri))]


@dataclass(frozen=True)
class MeshFamilySpec:
    family: str
    n: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown mesh family {self.family!r}; expected one of {FAMILIES}")
        if self.n < 0:
            raise ValueError("refinement index must be >= 0")


# ---------------------------------------------------------------------------
# construction from polygons


def _merge_vertices(points, tol):
    """Collapse points closer than ``tol``; returns (unique points, index map)."""
    tree = cKDTree(points)
    pairs = tree.query_pairs(tol, output_type="ndarray")
    parent = np.arange(len(points))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, j in pairs:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
    roots = np.array([find(i) for i in range(len(points))])
    uniq, inverse = np.unique(roots, return_inverse=True)
    return points[uniq], inverse


def _insert_hanging_vertices(vertices, loops, tol):
    """Split every loop edge at the vertices lying strictly inside it."""
    tree = cKDTree(vertices)
    out = []
    for loop in loops:
        new = []
        n = len(loop)
        for i in range(n):
            a, b = loop[i], loop[(i + 1) % n]
            new.append(a)
            pa, pb = vertices[a], vertices[b]
            length = float(np.linalg.norm(pb - pa))
            cand = tree.query_ball_point(0.5 * (pa + pb), 0.5 * length + tol)
            tau = (pb - pa) / length
            inner = []
            for c in cand:
                if c == a or c == b:
                    continue
                r = vertices[c] - pa
                s = float(r @ tau)
                if tol < s < length - tol and abs(r[0] * tau[1] - r[1] * tau[0]) <= tol:
                    inner.append((s, c))
            new.extend(c for _, c in sorted(inner))
        out.append(new)
    return out


def _build(vertices, loops, face_block=None):
    vertices = np.asarray(vertices, dtype=float)
    loops = [list(map(int, lp)) for lp in loops]
    if not loops:
        raise GeometryError("mesh has no elements")
    for t, loop in enumerate(loops):
        if len(loop) < 3 or len(set(loop)) != len(loop):
            raise GeometryError(f"element {t}: degenerate vertex loop {loop}")
        if min(loop) < 0 or max(loop) >= len(vertices):
            raise ParseError(f"element {t}: vertex index out of range")
        area = _signed_area(vertices[loop])
        diam = _diameter(vertices[loop])
        if abs(area) <= 1e-14 * diam**2:
            raise GeometryError(f"element {t}: zero area")
        if area < 0:
            loop.reverse()
        loops[t] = loop

    h = max(_diameter(vertices[lp]) for lp in loops)
    loops = _insert_hanging_vertices(vertices, loops, 1e-9 * h)

    for t, loop in enumerate(loops):
        xy = vertices[loop]
        n = len(loop)
        for i in range(n):
            for j in range(i + 2, n):
                if i == 0 and j == n - 1:
                    continue
                if _segments_cross(xy[i], xy[(i + 1) % n], xy[j], xy[(j + 1) % n]):
                    raise GeometryError(f"element {t}: self-intersecting boundary")

    key_to_face = {}
    faces, adj = [], []
    element_faces, element_normals = [], []
    for t, loop in enumerate(loops):
        fl, nl = [], []
        n = len(loop)
        for i in range(n):
            a, b = loop[i], loop[(i + 1) % n]
            key = (min(a, b), max(a, b))
            f = key_to_face.get(key)
            if f is None:
                f = len(faces)
                key_to_face[key] = f
                faces.append((a, b))
                adj.append([t])
            else:
                adj[f].append(t)
                if len(adj[f]) > 2:
                    raise NonmanifoldError(f"face {key} shared by more than two elements")
            d = vertices[b] - vertices[a]
            nrm = np.array([d[1], -d[0]]) / np.hypot(d[0], d[1])
            fl.append(f)
            nl.append(nrm)
        element_faces.append(fl)
        element_normals.append(np.array(nl))

    for f, ts in enumerate(adj):
        if len(ts) == 2 and ts[0] == ts[1]:
            raise GeometryError(f"face {faces[f]} appears twice in element {ts[0]}")

    faces = np.array(faces, dtype=np.int64)
    face_elements = np.array([ts + [-1] * (2 - len(ts)) for ts in adj], dtype=np.int64)

    if face_block is not None:
        faces, face_elements, element_faces = _reorder_faces(
            faces, face_elements, element_faces, face_block)

    return PolytopalMesh(vertices, loops, faces, face_elements, element_faces, element_normals)


def _reorder_faces(faces, face_elements, element_faces, face_block):
    """Adopt the face order of an explicit face block, checking consistency."""
    face_block = np.asarray(face_block, dtype=np.int64).reshape(-1, 4)
    if len(face_block) != len(faces):
        raise GeometryError(
            f"face block lists {len(face_block)} faces, connectivity yields {len(faces)}")
    derived = {(min(a, b), max(a, b)): i for i, (a, b) in enumerate(faces)}
    perm = np.empty(len(faces), dtype=np.int64)
    for new, (v1, v2, t1, t2) in enumerate(face_block):
        old = derived.get((min(v1, v2), max(v1, v2)))
        if old is None:
            raise GeometryError(f"face ({v1}, {v2}) is not an edge of any element")
        if sorted((t1, t2)) != sorted(face_elements[old].tolist()):
            raise GeometryError(f"face ({v1}, {v2}) has inconsistent adjacency")
        perm[new] = old
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    new_faces = face_block[:, :2].copy()
    new_adj = face_block[:, 2:4].copy()
    new_element_faces = [[int(inv[f]) for f in fl] for fl in element_faces]
    return new_faces, new_adj, new_element_faces


def from_polygons(vertices, elements, faces=None) -> PolytopalMesh:
    """Build a mesh from vertex coordinates and element vertex loops."""
    return _build(vertices, elements, faces)


# ---------------------------------------------------------------------------
# mesh families on the unit square


def _cartesian_polygons(m):
    xs = np.linspace(0.0, 1.0, m + 1)
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    verts = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):
        return i * (m + 1) + j

    cells = [[vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)]
             for j in range(m) for i in range(m)]
    return verts, cells


def _triangular_polygons(m):
    verts, cells = _cartesian_polygons(m)
    tris = []
    for c, (a, b, cc, d) in enumerate(cells):
        i, j = c % m, c // m
        if (i + j) % 2 == 0:
            tris += [[a, b, cc], [a, cc, d]]
        else:
            tris += [[a, b, d], [b, cc, d]]
    return verts, tris


def _clip_to_unit_square(poly):
    """Sutherland-Hodgman clipping of a convex polygon against [0,1]^2."""
    out = [np.asarray(p, dtype=float) for p in poly]
    for axis, value, keep_greater in ((0, 0.0, True), (0, 1.0, False),
                                      (1, 0.0, True), (1, 1.0, False)):
        src, out = out, []
        if not src:
            break
        for i, cur in enumerate(src):
            prev = src[i - 1]
            cin = cur[axis] >= value if keep_greater else cur[axis] <= value
            pin = prev[axis] >= value if keep_greater else prev[axis] <= value
            if cin != pin:
                s = (value - prev[axis]) / (cur[axis] - prev[axis])
                pt = prev + s * (cur - prev)
                pt[axis] = value
                out.append(pt)
            if cin:
                out.append(cur)
    return out


def _hexagonal_polygons(ncol):
    w = 1.0 / ncol
    nrow = max(1, int(round(2.0 * ncol / math.sqrt(3.0))))
    s = 1.0 / nrow
    offsets = np.array([[0.0, 2 * s / 3], [-w / 2, s / 3], [-w / 2, -s / 3],
                        [0.0, -2 * s / 3], [w / 2, -s / 3], [w / 2, s / 3]])
    polys = []
    for j in range(nrow + 1):
        if j % 2 == 0:
            centers = [(i * w, j * s) for i in range(ncol + 1)]
        else:
            centers = [((i + 0.5) * w, j * s) for i in range(ncol)]
        for c in centers:
            clipped = _clip_to_unit_square(np.asarray(c) + offsets)
            if len(clipped) >= 3:
                xy = np.array(clipped)
                if _signed_area(xy) > 1e-12 * w * s:
                    polys.append(xy)
    pts = np.concatenate(polys)
    verts, inv = _merge_vertices(pts, 1e-9 * w)
    cells, k = [], 0
    for xy in polys:
        ids = inv[k:k + len(xy)]
        k += len(xy)
        loop = [int(v) for i, v in enumerate(ids) if v != ids[i - 1]]
        cells.append(loop)
    return verts, cells


def _locally_refined_polygons(m):
    """Cartesian grid whose cells in the lower-left quadrant are split in four."""
    h = 1.0 / m
    polys = []
    for j in range(m):
        for i in range(m):
            x0, y0 = i * h, j * h
            if x0 + 0.5 * h < 0.5 and y0 + 0.5 * h < 0.5:
                g = 0.5 * h
                for b in range(2):
                    for a in range(2):
                        xa, ya = x0 + a * g, y0 + b * g
                        polys.append(np.array([[xa, ya], [xa + g, ya], [xa + g, ya + g], [xa, ya + g]]))
            else:
                polys.append(np.array([[x0, y0], [x0 + h, y0], [x0 + h, y0 + h], [x0, y0 + h]]))
    pts = np.concatenate(polys)
    verts, inv = _merge_vertices(pts, 1e-9 * h)
    cells = [list(map(int, inv[4 * c:4 * c + 4])) for c in range(len(polys))]
    return verts, cells


def generate(spec: MeshFamilySpec) -> PolytopalMesh:
    """Mesh of the unit square from one of the four refinement families.

    Level ``n`` uses ``2**(n+1)`` cells per side (hexagonal: columns), so ``h``
    roughly halves from one level to the next.
    """
    m = 2 ** (spec.n + 1)
    if spec.family == "cartesian":
        verts, cells = _cartesian_polygons(m)
    elif spec.family == "triangular":
        verts, cells = _triangular_polygons(m)
    elif spec.family == "hexagonal":
        verts, cells = _hexagonal_polygons(m)
    else:
        verts, cells = _locally_refined_polygons(m)
    return _build(verts, cells)


# ---------------------------------------------------------------------------
# polymesh v1 text format


def _tokens(path):
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            yield line.split()


def load(path, format: str = "polymesh") -> PolytopalMesh:
    if format != "polymesh":
        raise ParseError(f"unsupported mesh format {format!r}")
    try:
        lines = list(_tokens(path))
    except OSError as exc:
        raise ParseError(str(exc)) from exc
    try:
        it = iter(lines)
        head = next(it)
        if head[0] != "polymesh" or head[1] != "1" or head[2] != "2":
            raise ParseError(f"bad header {' '.join(head)!r}")
        tag, nv = next(it)
        if tag != "vertices":
            raise ParseError("expected 'vertices' block")
        verts = np.array([[float(x) for x in next(it)[:2]] for _ in range(int(nv))])
        tag, ne = next(it)
        if tag != "elements":
            raise ParseError("expected 'elements' block")
        cells = []
        for _ in range(int(ne)):
            row = [int(x) for x in next(it)]
            if row[0] != len(row) - 1:
                raise ParseError(f"element row {row}: count does not match")
            cells.append(row[1:])
        face_block = None
        rest = next(it, None)
        if rest is not None:
            if rest[0] != "faces":
                raise ParseError(f"unexpected block {rest[0]!r}")
            face_block = [[int(x) for x in next(it)[:4]] for _ in range(int(rest[1]))]
            if next(it, None) is not None:
                raise ParseError("trailing data after faces block")
    except (StopIteration, ValueError, IndexError) as exc:
        raise ParseError(f"malformed polymesh file {path}: {exc}") from exc
    return _build(verts, cells, face_block)


def save(mesh: PolytopalMesh, path) -> None:
    out = ["polymesh 1 2", f"vertices {mesh.n_vertices}"]
    out += [f"{x!r} {y!r}" for x, y in mesh.vertices.tolist()]
    out.append(f"elements {mesh.n_elements}")
    out += [" ".join(map(str, [len(lp)] + list(lp))) for lp in mesh.elements]
    out.append(f"faces {mesh.n_faces}")
    for (v1, v2), (t1, t2) in zip(mesh.faces.tolist(), mesh.face_elements.tolist()):
        out.append(f"{v1} {v2} {t1} {t2}")
    Path(path).write_text("\n".join(out) + "\n")


# ---------------------------------------------------------------------------
# submesh and validation


def _face_distances(mesh, t, x):
    a = mesh.vertices[mesh.faces[mesh.element_faces[t], 0]]
    return np.einsum("ij,ij->i", mesh.element_normals[t], a - x)


def build_submesh(mesh: PolytopalMesh, element: int, rho: float = 0.1) -> ElementSubmesh:
    """Face-based triangulation of ``element`` from a star point.

    The centroid is used when it is at distance at least ``rho * h_T`` from
    every face line; otherwise the point maximising the smallest face
    distance is found by a linear program over the face half-planes.
    """
    t = element
    hT = mesh.diameters[t]
    x = mesh.centroids[t]
    d = _face_distances(mesh, t, x)
    if d.min() < rho * hT:
        nrm = mesh.element_normals[t]
        a = mesh.vertices[mesh.faces[mesh.element_faces[t], 0]]
        # maximise s subject to n.(a - x) >= s  <=>  n.x + s <= n.a
        A = np.column_stack([nrm, np.ones(len(nrm))])
        b = np.einsum("ij,ij->i", nrm, a)
        res = linprog([0.0, 0.0, -1.0], A_ub=A, b_ub=b,
                      bounds=[(None, None), (None, None), (0.0, hT)], method="highs")
        if res.status != 0 or res.x[2] <= 1e-12 * hT:
            raise StarShapeError(f"element {t} is not star-shaped")
        if res.x[2] > d.min():
            x = res.x[:2]
            d = _face_distances(mesh, t, x)
    if d.min() <= 0:
        raise StarShapeError(f"element {t} is not star-shaped with respect to any point")
    fl = mesh.element_faces[t]
    loop = mesh.elements[t]
    n = len(loop)
    tri = np.empty((n, 3, 2))
    for i in range(n):
        tri[i, 0] = x
        tri[i, 1] = mesh.vertices[loop[i]]
        tri[i, 2] = mesh.vertices[loop[(i + 1) % n]]
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    areas = 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    assert len(fl) == n
    return ElementSubmesh(t, np.asarray(x, dtype=float), tri, areas, d)


def submeshes(mesh: PolytopalMesh, rho: float = 0.1) -> list:
    subs = [build_submesh(mesh, t, rho) for t in range(mesh.n_elements)]
    bad = [s.element for s in subs if s.distances.min() < rho * mesh.diameters[s.element]]
    if bad:
        warnings.warn(f"{len(bad)} element(s) violate d_TF >= {rho} h_T (first: {bad[0]})",
                      stacklevel=2)
    return subs


def validate(mesh: PolytopalMesh, domain_area: float | None = None, tol: float = 1e-12) -> None:
    """Raise :class:`GeometryError` when a structural invariant fails."""
    counts = (mesh.face_elements >= 0).sum(axis=1)
    if counts.min() < 1:
        raise GeometryError("face without adjacent element")
    if (mesh.areas <= 0).any():
        raise GeometryError("non-positive element area")
    for t in range(mesh.n_elements):
        fl = mesh.element_faces[t]
        xy = mesh.element_vertices(t)
        per = float(np.linalg.norm(np.roll(xy, -1, axis=0) - xy, axis=1).sum())
        if abs(mesh.face_lengths[fl].sum() - per) > tol * per:
            raise GeometryError(f"element {t}: faces do not partition the boundary")
        flux = (mesh.face_lengths[fl, None] * mesh.element_normals[t]).sum(axis=0)
        if np.abs(flux).max() > tol * per:
            raise GeometryError(f"element {t}: sum |F| n_TF = {flux} is not zero")
    if domain_area is not None:
        if abs(mesh.areas.sum() - domain_area) > tol * domain_area:
            raise GeometryError("element areas do not sum to the domain area")
