"""Static mesh topology: adjacency, k-rings, spiral orderings, mesh input.

Everything here is a pure function of immutable inputs (meshes and adjacency
are frozen after construction), so concurrent use is safe. The spiral ordering
is topology-only and deterministic: permuting face order never changes it.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import container


class MeshError(ValueError):
    """Invalid mesh topology or malformed mesh file."""


@dataclass(frozen=True)
class TriangleMesh:
    """Triangulated surface: vertices (V, 3) in mm, faces (F, 3) vertex indices."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vertices, dtype=np.float64))
        f = np.ascontiguousarray(np.asarray(self.faces, dtype=np.int64))
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must be (V, 3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise MeshError(f"faces must be (F, 3), got {f.shape}")
        if not np.isfinite(v).all():
            raise MeshError("vertices contain non-finite values")
        n = v.shape[0]
        bad = np.nonzero((f < 0) | (f >= n))[0]
        if bad.size:
            raise MeshError(f"face {bad[0]} references vertex out of range [0, {n})")
        degenerate = np.nonzero(
            (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
        )[0]
        if degenerate.size:
            raise MeshError(f"face {degenerate[0]} has repeated vertex indices")
        referenced = np.zeros(n, dtype=bool)
        referenced[f.ravel()] = True
        if not referenced.all():
            orphan = int(np.nonzero(~referenced)[0][0])
            raise MeshError(f"vertex {orphan} is not referenced by any face")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]


def topology_hash(mesh: TriangleMesh) -> str:
    """sha256 over vertex and face bytes; identifies a mesh exactly."""
    h = hashlib.sha256()
    h.update(mesh.vertices.tobytes())
    h.update(mesh.faces.tobytes())
    return h.hexdigest()


def connectivity_hash(mesh: TriangleMesh) -> str:
    """sha256 over vertex count and faces only; same for all meshes sharing
    one topology regardless of vertex positions (e.g. subject templates)."""
    h = hashlib.sha256()
    h.update(np.uint64(mesh.n_vertices).tobytes())
    h.update(mesh.faces.tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class AdjacencyMap:
    """Per-vertex sorted neighbor lists in CSR form (symmetric, no self-loops)."""

    indptr: np.ndarray
    indices: np.ndarray

    @property
    def n_vertices(self) -> int:
        return self.indptr.shape[0] - 1

    def neighbors(self, v: int) -> np.ndarray:
        return self.indices[self.indptr[v] : self.indptr[v + 1]]

    def degree(self, v: int) -> int:
        return int(self.indptr[v + 1] - self.indptr[v])


def build_adjacency(mesh: TriangleMesh) -> AdjacencyMap:
    """Adjacency from shared face edges, neighbor lists sorted ascending."""
    f = mesh.faces
    edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
    both = np.concatenate([edges, edges[:, ::-1]], axis=0)
    both = np.unique(both, axis=0)  # sorts lexicographically: per-row ascending
    counts = np.bincount(both[:, 0], minlength=mesh.n_vertices)
    indptr = np.zeros(mesh.n_vertices + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    return AdjacencyMap(indptr=indptr, indices=both[:, 1].copy())


def k_ring(adj: AdjacencyMap, v: int, k: int) -> set:
    """Vertices at graph distance exactly k from v (0-ring is {v} itself)."""
    if not 0 <= v < adj.n_vertices:
        raise IndexError(f"vertex {v} out of range [0, {adj.n_vertices})")
    if k < 0:
        raise ValueError("k must be >= 0")
    ring = {v}
    disk = {v}
    for _ in range(k):
        ring = _neighborhood(adj, ring) - disk
        disk |= ring
        if not ring:
            break
    return ring


def k_disk(adj: AdjacencyMap, v: int, k: int) -> set:
    """Union of i-rings for i = 0..k (BFS ball of radius k)."""
    if not 0 <= v < adj.n_vertices:
        raise IndexError(f"vertex {v} out of range [0, {adj.n_vertices})")
    if k < 0:
        raise ValueError("k must be >= 0")
    ring = {v}
    disk = {v}
    for _ in range(k):
        ring = _neighborhood(adj, ring) - disk
        disk |= ring
        if not ring:
            break
    return disk


def _neighborhood(adj: AdjacencyMap, vertices) -> set:
    out: set = set()
    for v in vertices:
        out.update(adj.neighbors(v).tolist())
    return out


def _order_ring(ring: set, adj: AdjacencyMap) -> list:
    """Deterministic in-ring order: start at the smallest index, walk along
    in-ring edges taking the smaller-index branch, fall back to ascending
    index when the walk dead-ends (open fans, non-manifold patches)."""
    if not ring:
        return []
    start = min(ring)
    ordered = [start]
    seen = {start}
    while len(seen) < len(ring):
        cur = ordered[-1]
        cands = [u for u in adj.neighbors(cur).tolist() if u in ring and u not in seen]
        if not cands:
            ordered.extend(sorted(ring - seen))
            break
        nxt = min(cands)
        ordered.append(nxt)
        seen.add(nxt)
    return ordered


def spiral_sequence(
    adj: AdjacencyMap,
    mesh: TriangleMesh,
    v: int,
    kernel_size: int,
    dilation: int = 1,
) -> list:
    """One spiral row: center, then ring-ordered neighbors, dilated, padded.

    With dilation d the concatenated ring sequence after the center is strided
    by d (center always kept). Exhausted disks pad with the sentinel index
    (== V), which reads as a zero feature downstream.
    """
    if kernel_size < 1:
        raise ValueError("kernel_size must be >= 1")
    if dilation < 1:
        raise ValueError("dilation must be >= 1")
    sentinel = mesh.n_vertices
    needed = (kernel_size - 1) * dilation
    tail: list = []
    ring = {v}
    disk = {v}
    while len(tail) < needed:
        ring = _neighborhood(adj, ring) - disk
        if not ring:
            break
        disk |= ring
        tail.extend(_order_ring(ring, adj))
    seq = [v] + tail[::dilation][: kernel_size - 1]
    seq.extend([sentinel] * (kernel_size - len(seq)))
    return seq


@dataclass(frozen=True)
class SpiralIndexTable:
    """V x kernel_size spiral orderings; sentinel slots mean 'zero feature'."""

    table: np.ndarray
    kernel_size: int
    dilation: int
    pad_sentinel: int

    def __post_init__(self):
        t = np.ascontiguousarray(np.asarray(self.table, dtype=np.int64))
        t.setflags(write=False)
        object.__setattr__(self, "table", t)

    @property
    def n_vertices(self) -> int:
        return self.table.shape[0]


def build_spiral_table(
    mesh: TriangleMesh, kernel_size: int, dilation: int = 1
) -> SpiralIndexTable:
    """Spiral row per vertex; generation is deterministic and cacheable."""
    adj = build_adjacency(mesh)
    rows = [
        spiral_sequence(adj, mesh, v, kernel_size, dilation)
        for v in range(mesh.n_vertices)
    ]
    return SpiralIndexTable(
        table=np.array(rows, dtype=np.int64),
        kernel_size=kernel_size,
        dilation=dilation,
        pad_sentinel=mesh.n_vertices,
    )


def save_spiral_table(path, table: SpiralIndexTable) -> None:
    container.write_container(
        path,
        container.MAGIC_SPIRAL_TABLE,
        {
            "table": table.table,
            "kernel_size": np.int64(table.kernel_size),
            "dilation": np.int64(table.dilation),
            "pad_sentinel": np.int64(table.pad_sentinel),
        },
    )


def load_spiral_table(path) -> SpiralIndexTable:
    _, _, sec = container.read_container(path, container.MAGIC_SPIRAL_TABLE)
    return SpiralIndexTable(
        table=sec["table"],
        kernel_size=int(sec["kernel_size"].item()),
        dilation=int(sec["dilation"].item()),
        pad_sentinel=int(sec["pad_sentinel"].item()),
    )


def icosphere(subdivisions: int = 2, radius: float = 1.0) -> TriangleMesh:
    """Subdivided icosahedron projected to a sphere (12, 42, 162, 642... vertices)."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=np.float64,
    )
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    verts = verts / np.linalg.norm(verts, axis=1, keepdims=True)
    for _ in range(subdivisions):
        verts_list = [v for v in verts]
        midpoint: dict = {}

        def mid(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            if key not in midpoint:
                m = verts_list[a] + verts_list[b]
                m = m / np.linalg.norm(m)
                midpoint[key] = len(verts_list)
                verts_list.append(m)
            return midpoint[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.array(verts_list)
        faces = np.array(new_faces, dtype=np.int64)
    return TriangleMesh(vertices=verts * radius, faces=faces)


# ---------------------------------------------------------------------------
# mesh file input (triangulated OBJ and OFF)
# ---------------------------------------------------------------------------

def load_mesh(path) -> TriangleMesh:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        return load_obj(path)
    if suffix == ".off":
        return load_off(path)
    raise MeshError(f"unsupported mesh format: {path.name}")


def load_obj(path) -> TriangleMesh:
    vertices = []
    faces = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        parts = raw.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            if len(parts) < 4:
                raise MeshError(f"{path}:{lineno}: malformed vertex line")
            vertices.append([float(parts[1]), float(parts[2]), float(parts[3])])
        elif parts[0] == "f":
            ids = parts[1:]
            if len(ids) != 3:
                raise MeshError(
                    f"{path}:{lineno}: only triangulated OBJ supported "
                    f"(face has {len(ids)} vertices)"
                )
            faces.append([int(tok.split("/")[0]) - 1 for tok in ids])
    if not vertices or not faces:
        raise MeshError(f"{path}: no vertices or faces found")
    return TriangleMesh(vertices=np.array(vertices), faces=np.array(faces))


def save_obj(path, mesh: TriangleMesh) -> None:
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def load_off(path) -> TriangleMesh:
    tokens: list = []
    for raw in Path(path).read_text().splitlines():
        stripped = raw.split("#", 1)[0].strip()
        if stripped:
            tokens.extend(stripped.split())
    if not tokens or tokens[0] != "OFF":
        raise MeshError(f"{path}: missing OFF header")
    nv, nf = int(tokens[1]), int(tokens[2])
    pos = 4  # skip edge count
    vertices = np.array(
        [float(t) for t in tokens[pos : pos + 3 * nv]], dtype=np.float64
    ).reshape(nv, 3)
    pos += 3 * nv
    faces = []
    for _ in range(nf):
        arity = int(tokens[pos])
        if arity != 3:
            raise MeshError(f"{path}: only triangulated OFF supported (face arity {arity})")
        faces.append([int(tokens[pos + 1]), int(tokens[pos + 2]), int(tokens[pos + 3])])
        pos += 4
    return TriangleMesh(vertices=vertices, faces=np.array(faces, dtype=np.int64))
