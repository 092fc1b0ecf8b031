"""
Triangle meshes and RWG basis functions.

Meshes come from the native ASCII format, Wavefront OBJ files or the built-in
generators (geodesic sphere, square plate, cube). Every mesh is validated on
construction: node indices in range, three distinct nodes and a positive area
per triangle, and no edge shared by more than two triangles.

Native format:
    # comment lines start with '#'
    N_nodes N_triangles
    x y z           (N_nodes lines, meters)
    i j k           (N_triangles lines, 0-based node indices)
"""

import enum
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from hpscatter.errors import (
    DegenerateTriangleError,
    EmptyBasisError,
    MeshError,
    MeshParseError,
    NonManifoldEdgeError,
)

logger = logging.getLogger(__name__)

MIN_TRIANGLE_AREA = 1e-12  # m^2


class SurfaceKind(enum.Enum):
    CLOSED = "closed"
    OPEN = "open"


@dataclass
class TriangleMesh:
    """Surface mesh with a derived edge table"""

    nodes: np.ndarray
    triangles: np.ndarray
    edges: np.ndarray = field(init=False, repr=False)
    edge_triangles: np.ndarray = field(init=False, repr=False)
    triangle_edges: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.nodes = np.ascontiguousarray(self.nodes, dtype=float).reshape(-1, 3)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        self._validate()
        self._build_edge_table()

    def _validate(self):
        n_nodes = len(self.nodes)
        if len(self.triangles) == 0:
            raise MeshError("Mesh has no triangles")
        if self.triangles.min() < 0 or self.triangles.max() >= n_nodes:
            raise MeshError(f"Triangle node index out of range 0..{n_nodes - 1}")
        t = self.triangles
        repeated = (t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])
        if repeated.any():
            idx = int(np.flatnonzero(repeated)[0])
            raise DegenerateTriangleError(f"Triangle {idx} repeats a node index: {t[idx].tolist()}", idx)
        areas = self.triangle_areas()
        small = areas < MIN_TRIANGLE_AREA
        if small.any():
            idx = int(np.flatnonzero(small)[0])
            raise DegenerateTriangleError(f"Triangle {idx} has area {areas[idx]:.3e} m^2 below {MIN_TRIANGLE_AREA}", idx)

    def _build_edge_table(self):
        t = self.triangles
        half_edges = np.stack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]], axis=1).reshape(-1, 2)
        keys = np.sort(half_edges, axis=1)
        edges, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
        inverse = inverse.reshape(-1)
        if (counts > 2).any():
            bad = edges[int(np.flatnonzero(counts > 2)[0])]
            raise NonManifoldEdgeError(
                f"Edge ({bad[0]}, {bad[1]}) is shared by more than two triangles", (int(bad[0]), int(bad[1]))
            )
        edge_triangles = np.full((len(edges), 2), -1, dtype=np.int64)
        order = np.argsort(inverse, kind="stable")
        owner = order // 3
        sorted_edges = inverse[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = sorted_edges[1:] != sorted_edges[:-1]
        edge_triangles[sorted_edges[first], 0] = owner[first]
        edge_triangles[sorted_edges[~first], 1] = owner[~first]
        self.edges = edges
        self.edge_triangles = edge_triangles
        self.triangle_edges = inverse.reshape(-1, 3)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def interior_edges(self) -> np.ndarray:
        return np.flatnonzero(self.edge_triangles[:, 1] >= 0)

    @property
    def boundary_edges(self) -> np.ndarray:
        return np.flatnonzero(self.edge_triangles[:, 1] < 0)

    def vertices(self) -> np.ndarray:
        """Triangle vertex coordinates, shape (T, 3, 3)"""
        return self.nodes[self.triangles]

    def triangle_areas(self) -> np.ndarray:
        v = self.nodes[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def triangle_normals(self) -> np.ndarray:
        v = self.nodes[self.triangles]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def triangle_centroids(self) -> np.ndarray:
        return self.nodes[self.triangles].mean(axis=1)

    def edge_lengths(self) -> np.ndarray:
        return np.linalg.norm(self.nodes[self.edges[:, 1]] - self.nodes[self.edges[:, 0]], axis=1)

    def max_edge_length(self) -> float:
        return float(self.edge_lengths().max())

    def is_consistently_oriented(self) -> bool:
        """True when the two triangles of every interior edge traverse it in opposite directions"""
        t = self.triangles
        directed = np.stack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]], axis=1).reshape(-1, 2)
        forward = directed[:, 0] < directed[:, 1]
        edge_ids = self.triangle_edges.reshape(-1)
        ups = np.bincount(edge_ids, weights=forward, minlength=self.n_edges)
        interior = self.edge_triangles[:, 1] >= 0
        return bool(np.all(ups[interior] == 1))

    def signed_volume(self) -> float:
        v = self.nodes[self.triangles]
        return float(np.einsum("td,td->t", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6.0)

    def translated(self, offset) -> "TriangleMesh":
        return TriangleMesh(self.nodes + np.asarray(offset, dtype=float), self.triangles.copy())


def classify_surface(mesh: TriangleMesh) -> SurfaceKind:
    """Closed iff every edge has exactly two adjacent triangles"""
    return SurfaceKind.CLOSED if len(mesh.boundary_edges) == 0 else SurfaceKind.OPEN


def load_mesh(path: str, mesh_format: Optional[str] = None) -> TriangleMesh:
    """Load a mesh file; format is 'tri' (native) or 'obj', guessed from the extension when omitted"""
    if not os.path.exists(path):
        raise MeshParseError(f"Mesh file not found: {path}")
    if mesh_format is None:
        mesh_format = "obj" if path.lower().endswith(".obj") else "tri"
    mesh_format = mesh_format.lower()
    with open(path, "r", encoding="utf-8") as handle:
        text = handle.read()
    if mesh_format == "tri":
        nodes, triangles = _parse_tri(text, path)
    elif mesh_format == "obj":
        nodes, triangles = _parse_obj(text, path)
    else:
        raise MeshParseError(f"Unknown mesh format '{mesh_format}'")
    mesh = TriangleMesh(nodes, triangles)
    logger.info(f"Loaded mesh {path}: {mesh.n_nodes} nodes, {mesh.n_triangles} triangles")
    return mesh


def _parse_tri(text: str, path: str) -> Tuple[np.ndarray, np.ndarray]:
    lines = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            lines.append(line)
    if not lines:
        raise MeshParseError(f"{path}: empty mesh file")
    try:
        n_nodes, n_triangles = (int(v) for v in lines[0].split())
    except ValueError:
        raise MeshParseError(f"{path}: header must be 'N_nodes N_triangles', got '{lines[0]}'")
    body = lines[1:]
    if len(body) != n_nodes + n_triangles:
        raise MeshParseError(f"{path}: expected {n_nodes + n_triangles} data lines, found {len(body)}")
    try:
        nodes = np.array([[float(v) for v in line.split()] for line in body[:n_nodes]], dtype=float)
        triangles = np.array([[int(v) for v in line.split()] for line in body[n_nodes:]], dtype=np.int64)
    except ValueError as e:
        raise MeshParseError(f"{path}: malformed data line ({e})")
    if nodes.shape != (n_nodes, 3) or triangles.shape != (n_triangles, 3):
        raise MeshParseError(f"{path}: node lines need 3 coordinates and triangle lines 3 indices")
    return nodes, triangles


def _parse_obj(text: str, path: str) -> Tuple[np.ndarray, np.ndarray]:
    nodes: List[List[float]] = []
    triangles: List[List[int]] = []
    for number, raw in enumerate(text.splitlines(), start=1):
        parts = raw.split("#", 1)[0].split()
        if not parts:
            continue
        try:
            if parts[0] == "v":
                nodes.append([float(v) for v in parts[1:4]])
            elif parts[0] == "f":
                polygon = [int(p.split("/")[0]) - 1 for p in parts[1:]]
                for i in range(1, len(polygon) - 1):
                    triangles.append([polygon[0], polygon[i], polygon[i + 1]])
        except ValueError as e:
            raise MeshParseError(f"{path}:{number}: {e}")
    if not nodes or not triangles:
        raise MeshParseError(f"{path}: no vertices or faces found")
    return np.array(nodes, dtype=float), np.array(triangles, dtype=np.int64)


def write_mesh(mesh: TriangleMesh, path: str) -> None:
    """Write a mesh in the native ASCII format"""
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(f"# hpscatter mesh: {mesh.n_nodes} nodes, {mesh.n_triangles} triangles\n")
        handle.write(f"{mesh.n_nodes} {mesh.n_triangles}\n")
        for x, y, z in mesh.nodes:
            handle.write(f"{x:.17g} {y:.17g} {z:.17g}\n")
        for i, j, k in mesh.triangles:
            handle.write(f"{i} {j} {k}\n")


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------

_GOLDEN = (1.0 + np.sqrt(5.0)) / 2.0
_ICOSAHEDRON_NODES = np.array(
    [
        [-1, _GOLDEN, 0], [1, _GOLDEN, 0], [-1, -_GOLDEN, 0], [1, -_GOLDEN, 0],
        [0, -1, _GOLDEN], [0, 1, _GOLDEN], [0, -1, -_GOLDEN], [0, 1, -_GOLDEN],
        [_GOLDEN, 0, -1], [_GOLDEN, 0, 1], [-_GOLDEN, 0, -1], [-_GOLDEN, 0, 1],
    ],
    dtype=float,
)
_ICOSAHEDRON_FACES = np.array(
    [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ],
    dtype=np.int64,
)


def _orient_outward(nodes: np.ndarray, triangles: np.ndarray, center: np.ndarray) -> np.ndarray:
    v = nodes[triangles]
    normal = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    inward = np.einsum("td,td->t", normal, v.mean(axis=1) - center) < 0
    triangles = triangles.copy()
    triangles[inward] = triangles[inward][:, [0, 2, 1]]
    return triangles


def _face_lattice(nu: int) -> Tuple[List[Tuple[int, int]], List[Tuple[Tuple[int, int], ...]]]:
    """Lattice points (i, j) of one subdivided face and its small triangles"""
    points = [(i, j) for i in range(nu + 1) for j in range(nu + 1 - i)]
    small = []
    for i in range(nu):
        for j in range(nu - i):
            small.append(((i, j), (i + 1, j), (i, j + 1)))
            if i + j < nu - 1:
                small.append(((i + 1, j), (i + 1, j + 1), (i, j + 1)))
    return points, small


def _geodesic_face_nodes(corners: np.ndarray, nu: int, lattice) -> Dict[Tuple[int, int], np.ndarray]:
    a, b, c = corners
    nodes = {}
    for i, j in lattice:
        p = ((nu - i - j) * a + i * b + j * c) / nu
        nodes[(i, j)] = p / np.linalg.norm(p)
    return nodes


def geodesic_max_edge(radius: float, nu: int) -> float:
    """Longest edge of the frequency-nu geodesic sphere (all icosahedron faces are congruent)"""
    lattice, small = _face_lattice(nu)
    face = _geodesic_face_nodes(_ICOSAHEDRON_NODES[_ICOSAHEDRON_FACES[0]], nu, lattice)
    longest = 0.0
    for tri in small:
        for k in range(3):
            longest = max(longest, float(np.linalg.norm(face[tri[k]] - face[tri[(k + 1) % 3]])))
    return radius * longest


def make_geodesic_sphere(radius: float, nu: int) -> TriangleMesh:
    """Class-I geodesic sphere: each icosahedron edge split into nu segments (N = 30 nu^2 edges)"""
    if radius <= 0 or nu < 1:
        raise ValueError(f"make_geodesic_sphere needs radius > 0 and nu >= 1 (got {radius}, {nu})")
    lattice, small = _face_lattice(nu)
    index: Dict[tuple, int] = {}
    nodes: List[np.ndarray] = []
    triangles: List[List[int]] = []
    for face in _ICOSAHEDRON_FACES:
        face_nodes = _geodesic_face_nodes(_ICOSAHEDRON_NODES[face], nu, lattice)
        local = {}
        for i, j in lattice:
            weights = {int(face[0]): nu - i - j, int(face[1]): i, int(face[2]): j}
            key = tuple(sorted((v, w) for v, w in weights.items() if w > 0))
            if key not in index:
                index[key] = len(nodes)
                nodes.append(face_nodes[(i, j)])
            local[(i, j)] = index[key]
        for tri in small:
            triangles.append([local[p] for p in tri])
    node_array = radius * np.array(nodes)
    tri_array = _orient_outward(node_array, np.array(triangles, dtype=np.int64), np.zeros(3))
    return TriangleMesh(node_array, tri_array)


def make_sphere(radius: float, target_edge: float) -> TriangleMesh:
    """Geodesic sphere with the coarsest subdivision whose longest edge is at most 1.5 * target_edge"""
    if radius <= 0 or not 0 < target_edge < radius:
        raise ValueError(f"make_sphere needs radius > 0 and 0 < target_edge < radius (got {radius}, {target_edge})")
    nu = 1
    while geodesic_max_edge(radius, nu) > 1.5 * target_edge:
        nu += 1
    mesh = make_geodesic_sphere(radius, nu)
    logger.debug(f"Sphere radius={radius} target_edge={target_edge}: nu={nu}, {mesh.n_triangles} triangles")
    return mesh


def make_plate(side: float, divisions: int) -> TriangleMesh:
    """Square plate in the z=0 plane centred at the origin, normals along +z"""
    if side <= 0 or divisions < 1:
        raise ValueError(f"make_plate needs side > 0 and divisions >= 1 (got {side}, {divisions})")
    d = divisions
    coords = side * (np.arange(d + 1) / d - 0.5)
    xx, yy = np.meshgrid(coords, coords, indexing="ij")
    nodes = np.column_stack([xx.ravel(), yy.ravel(), np.zeros(xx.size)])

    def node(i, j):
        return i * (d + 1) + j

    triangles = []
    for i in range(d):
        for j in range(d):
            triangles.append([node(i, j), node(i + 1, j), node(i + 1, j + 1)])
            triangles.append([node(i, j), node(i + 1, j + 1), node(i, j + 1)])
    return TriangleMesh(nodes, np.array(triangles, dtype=np.int64))


def make_cube(side: float, divisions: int) -> TriangleMesh:
    """Closed cube centred at the origin, outward oriented and symmetric under inversion"""
    if side <= 0 or divisions < 1:
        raise ValueError(f"make_cube needs side > 0 and divisions >= 1 (got {side}, {divisions})")
    d = divisions
    index: Dict[Tuple[int, int, int], int] = {}
    lattice: List[Tuple[int, int, int]] = []

    def node(p):
        if p not in index:
            index[p] = len(lattice)
            lattice.append(p)
        return index[p]

    triangles = []
    for axis in range(3):
        u_axis, v_axis = [a for a in range(3) if a != axis]
        for level in (0, d):
            for i in range(d):
                for j in range(d):
                    corners = []
                    for du, dv in ((0, 0), (1, 0), (1, 1), (0, 1)):
                        p = [0, 0, 0]
                        p[axis] = level
                        p[u_axis] = i + du
                        p[v_axis] = j + dv
                        corners.append(node(tuple(p)))
                    # split along the (min, min) -> (max, max) diagonal
                    triangles.append([corners[0], corners[1], corners[2]])
                    triangles.append([corners[0], corners[2], corners[3]])
    nodes = side * (np.array(lattice, dtype=float) / d - 0.5)
    tri_array = _orient_outward(nodes, np.array(triangles, dtype=np.int64), np.zeros(3))
    return TriangleMesh(nodes, tri_array)


# ---------------------------------------------------------------------------
# RWG basis
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RwgFunction:
    edge: int
    plus_triangle: int
    minus_triangle: int
    length: float
    plus_free_vertex: int
    minus_free_vertex: int


@dataclass
class RwgBasisSet:
    """
    RWG functions on the interior edges of a mesh.

    On the plus triangle f(r) = l/(2A+) (r - p+); on the minus triangle
    f(r) = -l/(2A-) (r - p-), where p are the free vertices.
    """

    mesh: TriangleMesh
    edge_ids: np.ndarray  # (N,)
    triangles: np.ndarray  # (N, 2) plus, minus
    free_vertices: np.ndarray  # (N, 2) node index
    free_local: np.ndarray  # (N, 2) local vertex slot 0..2 inside each triangle
    lengths: np.ndarray  # (N,)
    centroids: np.ndarray  # (N, 3) edge midpoints

    @property
    def n(self) -> int:
        return len(self.edge_ids)

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, m: int) -> RwgFunction:
        return RwgFunction(
            edge=int(self.edge_ids[m]),
            plus_triangle=int(self.triangles[m, 0]),
            minus_triangle=int(self.triangles[m, 1]),
            length=float(self.lengths[m]),
            plus_free_vertex=int(self.free_vertices[m, 0]),
            minus_free_vertex=int(self.free_vertices[m, 1]),
        )

    def __iter__(self) -> Iterator[RwgFunction]:
        for m in range(self.n):
            yield self[m]

    def coefficients(self) -> np.ndarray:
        """Signed scale s*l/(2A) per (basis, side), shape (N, 2)"""
        areas = self.mesh.triangle_areas()[self.triangles]
        signs = np.array([1.0, -1.0])
        return signs * self.lengths[:, None] / (2.0 * areas)

    def divergences(self) -> np.ndarray:
        """Surface divergence s*l/A per (basis, side)"""
        return 2.0 * self.coefficients()


def build_rwg(mesh: TriangleMesh) -> RwgBasisSet:
    """One RWG function per interior edge, ordered by the edge's (min node, max node) pair"""
    interior = mesh.interior_edges
    if len(interior) == 0:
        raise EmptyBasisError("Mesh has no interior edges, so no RWG basis functions exist")
    # np.unique already sorted the edge table lexicographically by (min, max)
    pair = np.sort(mesh.edge_triangles[interior], axis=1)
    edge_nodes = mesh.edges[interior]
    free_local = np.empty_like(pair)
    free_vertices = np.empty_like(pair)
    for side in range(2):
        tri_nodes = mesh.triangles[pair[:, side]]
        on_edge = (tri_nodes == edge_nodes[:, [0]]) | (tri_nodes == edge_nodes[:, [1]])
        free_local[:, side] = np.argmin(on_edge, axis=1)
        free_vertices[:, side] = tri_nodes[np.arange(len(pair)), free_local[:, side]]
    lengths = np.linalg.norm(mesh.nodes[edge_nodes[:, 1]] - mesh.nodes[edge_nodes[:, 0]], axis=1)
    centroids = 0.5 * (mesh.nodes[edge_nodes[:, 0]] + mesh.nodes[edge_nodes[:, 1]])
    basis = RwgBasisSet(
        mesh=mesh,
        edge_ids=interior,
        triangles=pair,
        free_vertices=free_vertices,
        free_local=free_local,
        lengths=lengths,
        centroids=centroids,
    )
    logger.debug(f"Built {basis.n} RWG functions on {mesh.n_triangles} triangles")
    return basis
