"""Mesh coarsening: quadric-error edge contraction plus pool/unpool maps.

Contraction uses subset placement (the surviving endpoint keeps its position),
so the coarse vertex set is a subset of the fine one. Pooling then selects the
kept vertex (weight 1), which makes pooled coordinate fields match coarse
positions exactly; unpooling sends removed vertices through barycentric
weights of their closest coarse triangle, so constant fields survive a
pool/unpool round trip exactly and both maps are linear.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from . import kernels
from .mesh_graph import MeshError, TriangleMesh, build_adjacency


class DecimationError(MeshError):
    """Decimation target unreachable or invalid."""


@dataclass(frozen=True)
class DownsampleMap:
    """Linear pool (fine->coarse) and unpool (coarse->fine) in CSR form.

    Pool rows are coarse vertices listing (fine index, weight) sources with
    non-negative weights summing to 1; unpool rows are fine vertices listing
    (coarse index, weight) barycentric sources, also summing to 1.
    """

    pool_indptr: np.ndarray
    pool_indices: np.ndarray
    pool_weights: np.ndarray
    unpool_indptr: np.ndarray
    unpool_indices: np.ndarray
    unpool_weights: np.ndarray
    n_fine: int
    n_coarse: int

    def __post_init__(self):
        sums = np.add.reduceat(self.pool_weights, self.pool_indptr[:-1])
        if np.any(np.diff(self.pool_indptr) < 1):
            raise MeshError("every coarse vertex needs at least one pooling source")
        if np.any(self.pool_weights < 0) or np.abs(sums - 1.0).max() > 1e-6:
            raise MeshError("pooling weights must be non-negative and sum to 1")

    def pool(self, x: np.ndarray) -> np.ndarray:
        """(n_fine, C) -> (n_coarse, C)."""
        return kernels.csr_matvec(
            self.pool_indptr, self.pool_indices, self.pool_weights, x
        )

    def pool_adjoint(self, g: np.ndarray) -> np.ndarray:
        return kernels.csr_matvec_adjoint(
            self.pool_indptr, self.pool_indices, self.pool_weights, g, self.n_fine
        )

    def unpool(self, y: np.ndarray) -> np.ndarray:
        """(n_coarse, C) -> (n_fine, C).

        Anchored on each row's first source so constant fields survive
        the round trip bit for bit.
        """
        return kernels.csr_anchored_mix(
            self.unpool_indptr, self.unpool_indices, self.unpool_weights, y
        )

    def unpool_adjoint(self, g: np.ndarray) -> np.ndarray:
        return kernels.csr_matvec_adjoint(
            self.unpool_indptr, self.unpool_indices, self.unpool_weights, g, self.n_coarse
        )


def _face_quadric(p0, p1, p2):
    n = np.cross(p1 - p0, p2 - p0)
    norm = np.linalg.norm(n)
    if norm < 1e-30:
        return np.zeros((4, 4))
    n = n / norm
    plane = np.array([n[0], n[1], n[2], -float(np.dot(n, p0))])
    return np.outer(plane, plane)


def _vertex_cost(quadric, p):
    h = np.array([p[0], p[1], p[2], 1.0])
    return float(h @ quadric @ h)


def downsample_mesh(mesh: TriangleMesh, keep_ratio: float):
    """Contract edges by quadric error until round(keep_ratio * V) vertices remain.

    Returns (coarse mesh, DownsampleMap). The contraction order is fully
    deterministic: heap ties resolve by (cost, vertex ids).
    """
    if not 0.0 < keep_ratio < 1.0:
        raise DecimationError(f"keep_ratio must be in (0, 1), got {keep_ratio}")
    n = mesh.n_vertices
    target = int(round(keep_ratio * n))
    if target < 4:
        raise DecimationError(
            f"keep_ratio {keep_ratio} on {n} vertices leaves {target} < 4 vertices"
        )

    pos = mesh.vertices
    quadrics = np.zeros((n, 4, 4))
    face_verts = {i: tuple(f) for i, f in enumerate(mesh.faces.tolist())}
    incidence = [set() for _ in range(n)]
    for fid, (a, b, c) in face_verts.items():
        q = _face_quadric(pos[a], pos[b], pos[c])
        for v in (a, b, c):
            quadrics[v] += q
            incidence[v].add(fid)

    adj = build_adjacency(mesh)
    neigh = [set(adj.neighbors(v).tolist()) for v in range(n)]
    alive = np.ones(n, dtype=bool)
    version = np.zeros(n, dtype=np.int64)
    parent = np.arange(n)

    def push_edge(heap, u, v):
        if u > v:
            u, v = v, u
        cost_u = _vertex_cost(quadrics[u] + quadrics[v], pos[u])
        cost_v = _vertex_cost(quadrics[u] + quadrics[v], pos[v])
        if cost_u <= cost_v:
            cost, keep, rem = cost_u, u, v
        else:
            cost, keep, rem = cost_v, v, u
        heapq.heappush(heap, (cost, u, v, int(version[u]), int(version[v]), keep, rem))

    heap: list = []
    for u in range(n):
        for v in neigh[u]:
            if u < v:
                push_edge(heap, u, v)

    n_alive = n
    while n_alive > target and heap:
        cost, u, v, ver_u, ver_v, keep, rem = heapq.heappop(heap)
        if not (alive[u] and alive[v]):
            continue
        if version[u] != ver_u or version[v] != ver_v:
            continue
        if v not in neigh[u]:
            continue

        shared = incidence[u] & incidence[v]
        third = {w for fid in shared for w in face_verts[fid] if w not in (u, v)}
        common = neigh[u] & neigh[v]
        if common != third:
            continue  # link condition: contraction would pinch the surface

        # normal-flip guard on faces that survive the contraction
        flipped = False
        for fid in incidence[rem] - shared:
            a, b, c = face_verts[fid]
            before = np.cross(pos[b] - pos[a], pos[c] - pos[a])
            ra, rb, rc = (keep if w == rem else w for w in (a, b, c))
            after = np.cross(pos[rb] - pos[ra], pos[rc] - pos[ra])
            if float(np.dot(before, after)) <= 0.0:
                flipped = True
                break
        if flipped:
            continue

        # contract rem into keep
        for fid in shared:
            for w in face_verts[fid]:
                incidence[w].discard(fid)
            del face_verts[fid]
        for fid in list(incidence[rem]):
            a, b, c = face_verts[fid]
            face_verts[fid] = tuple(keep if w == rem else w for w in (a, b, c))
            incidence[rem].discard(fid)
            incidence[keep].add(fid)
        for w in neigh[rem]:
            neigh[w].discard(rem)
            if w != keep:
                neigh[w].add(keep)
                neigh[keep].add(w)
        neigh[keep].discard(keep)
        neigh[rem] = set()
        quadrics[keep] += quadrics[rem]
        alive[rem] = False
        parent[rem] = keep
        version[keep] += 1
        version[rem] += 1
        n_alive -= 1

        for w in neigh[keep]:
            push_edge(heap, keep, w)

    if n_alive > target:
        raise DecimationError(
            f"no valid contractions left at {n_alive} vertices (target {target})"
        )

    return _finalize(mesh, alive, parent, face_verts)


def _resolve(parent, v):
    root = v
    while parent[root] != root:
        root = parent[root]
    while parent[v] != root:
        parent[v], v = root, parent[v]
    return root


def _finalize(mesh: TriangleMesh, alive, parent, face_verts):
    n = mesh.n_vertices
    kept = np.nonzero(alive)[0]
    coarse_of_fine = -np.ones(n, dtype=np.int64)
    coarse_of_fine[kept] = np.arange(kept.size)

    faces = []
    seen = set()
    for fid in sorted(face_verts):
        tri = tuple(coarse_of_fine[_resolve(parent, w)] for w in face_verts[fid])
        if len(set(tri)) < 3:
            continue
        key = tuple(sorted(tri))
        if key in seen:
            continue
        seen.add(key)
        faces.append(tri)
    if not faces:
        raise DecimationError("decimation removed all faces")
    coarse = TriangleMesh(vertices=mesh.vertices[kept], faces=np.array(faces, dtype=np.int64))

    # pool: each coarse vertex reads its kept fine vertex with weight 1
    pool_indptr = np.arange(kept.size + 1, dtype=np.int64)
    pool_indices = kept.astype(np.int64)
    pool_weights = np.ones(kept.size)

    # unpool: kept vertices map to themselves; removed vertices project
    # barycentrically onto their closest coarse triangle
    tri = coarse.faces
    A = coarse.vertices[tri[:, 0]]
    B = coarse.vertices[tri[:, 1]]
    C = coarse.vertices[tri[:, 2]]
    up_indptr = np.zeros(n + 1, dtype=np.int64)
    up_indices: list = []
    up_weights: list = []
    for v in range(n):
        if alive[v]:
            up_indices.append(np.array([coarse_of_fine[v]], dtype=np.int64))
            up_weights.append(np.array([1.0]))
        else:
            bary, fi = _closest_triangle_barycentric(mesh.vertices[v], A, B, C)
            # dominant corner first: the unpool kernel anchors on entry 0
            order = np.argsort(-bary, kind="stable")
            bary = bary[order]
            bary[0] = 1.0 - bary[1:].sum()
            up_indices.append(tri[fi][order].astype(np.int64))
            up_weights.append(bary)
        up_indptr[v + 1] = up_indptr[v] + up_indices[-1].size

    dmap = DownsampleMap(
        pool_indptr=pool_indptr,
        pool_indices=pool_indices,
        pool_weights=pool_weights,
        unpool_indptr=up_indptr,
        unpool_indices=np.concatenate(up_indices),
        unpool_weights=np.concatenate(up_weights),
        n_fine=n,
        n_coarse=kept.size,
    )
    return coarse, dmap


def _closest_triangle_barycentric(p, A, B, C):
    """Barycentric weights of the closest point to p over all triangles."""
    ab = B - A
    ac = C - A
    ap = p[None, :] - A
    d00 = np.einsum("ij,ij->i", ab, ab)
    d01 = np.einsum("ij,ij->i", ab, ac)
    d11 = np.einsum("ij,ij->i", ac, ac)
    d20 = np.einsum("ij,ij->i", ap, ab)
    d21 = np.einsum("ij,ij->i", ap, ac)
    denom = d00 * d11 - d01 * d01
    with np.errstate(divide="ignore", invalid="ignore"):
        v = (d11 * d20 - d01 * d21) / denom
        w = (d00 * d21 - d01 * d20) / denom
    u = 1.0 - v - w
    inside = np.isfinite(v) & np.isfinite(w) & (u >= 0) & (v >= 0) & (w >= 0)

    candidates = []
    bary_inside = np.stack([u, v, w], axis=1)
    pt_inside = u[:, None] * A + v[:, None] * B + w[:, None] * C
    d2 = np.einsum("ij,ij->i", pt_inside - p[None, :], pt_inside - p[None, :])
    d2 = np.where(inside, d2, np.inf)
    candidates.append((d2, bary_inside))

    for (P0, P1, i0, i1) in ((A, B, 0, 1), (B, C, 1, 2), (C, A, 2, 0)):
        seg = P1 - P0
        denom_seg = np.einsum("ij,ij->i", seg, seg)
        t = np.einsum("ij,ij->i", p[None, :] - P0, seg) / np.maximum(denom_seg, 1e-300)
        t = np.clip(t, 0.0, 1.0)
        pt = P0 + t[:, None] * seg
        d2e = np.einsum("ij,ij->i", pt - p[None, :], pt - p[None, :])
        bary = np.zeros((A.shape[0], 3))
        bary[:, i0] = 1.0 - t
        bary[:, i1] = t
        candidates.append((d2e, bary))

    dists = np.stack([c[0] for c in candidates], axis=0)  # (4, F)
    barys = np.stack([c[1] for c in candidates], axis=0)  # (4, F, 3)
    which = np.argmin(dists, axis=0)
    per_face_d2 = dists[which, np.arange(dists.shape[1])]
    per_face_bary = barys[which, np.arange(dists.shape[1])]
    fi = int(np.argmin(per_face_d2))
    bary = np.clip(per_face_bary[fi], 0.0, None)
    return bary / bary.sum(), fi
