"""Mesh pyramid: progressively decimated meshes with spiral tables and maps."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import container
from .decimation import DownsampleMap, downsample_mesh
from .mesh_graph import MeshError, SpiralIndexTable, TriangleMesh, build_spiral_table

DEFAULT_LEVELS = 4
DEFAULT_KEEP_RATIOS = (0.5, 0.5, 0.5)
DEFAULT_KERNEL_SIZE = 9
DEFAULT_DILATION = 2


@dataclass(frozen=True)
class MeshPyramid:
    """Ordered levels (finest first) with one DownsampleMap between neighbors."""

    meshes: tuple
    tables: tuple
    maps: tuple

    def __post_init__(self):
        counts = [m.n_vertices for m in self.meshes]
        if len(self.meshes) < 2:
            raise MeshError("pyramid needs at least 2 levels")
        if len(self.maps) != len(self.meshes) - 1:
            raise MeshError("pyramid needs exactly level_count - 1 maps")
        if any(a <= b for a, b in zip(counts, counts[1:])):
            raise MeshError(f"vertex counts must strictly decrease, got {counts}")

    @property
    def level_count(self) -> int:
        return len(self.meshes)

    @property
    def vertex_counts(self):
        return tuple(m.n_vertices for m in self.meshes)


def build_pyramid(
    mesh: TriangleMesh,
    level_count: int = DEFAULT_LEVELS,
    keep_ratios=DEFAULT_KEEP_RATIOS,
    kernel_size: int = DEFAULT_KERNEL_SIZE,
    dilation: int = DEFAULT_DILATION,
) -> MeshPyramid:
    if level_count < 2:
        raise MeshError(f"level_count must be >= 2, got {level_count}")
    keep_ratios = tuple(float(r) for r in keep_ratios)
    if len(keep_ratios) != level_count - 1:
        raise MeshError(
            f"need {level_count - 1} keep_ratios for {level_count} levels, "
            f"got {len(keep_ratios)}"
        )
    meshes = [mesh]
    maps = []
    for ratio in keep_ratios:
        coarse, dmap = downsample_mesh(meshes[-1], ratio)
        meshes.append(coarse)
        maps.append(dmap)
    tables = [build_spiral_table(m, kernel_size, dilation) for m in meshes]
    return MeshPyramid(meshes=tuple(meshes), tables=tuple(tables), maps=tuple(maps))


def pyramid_hash(pyr: MeshPyramid) -> str:
    """sha256 over every level and map; checkpoints must agree on this."""
    h = hashlib.sha256()
    for mesh, table in zip(pyr.meshes, pyr.tables):
        h.update(mesh.vertices.tobytes())
        h.update(mesh.faces.tobytes())
        h.update(table.table.tobytes())
        h.update(np.int64([table.kernel_size, table.dilation]).tobytes())
    for m in pyr.maps:
        for arr in (
            m.pool_indptr,
            m.pool_indices,
            m.pool_weights,
            m.unpool_indptr,
            m.unpool_indices,
            m.unpool_weights,
        ):
            h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def save_pyramid(path, pyr: MeshPyramid) -> None:
    sections: dict = {"meta/level_count": np.int64(pyr.level_count)}
    for i, (mesh, table) in enumerate(zip(pyr.meshes, pyr.tables)):
        sections[f"level{i}/vertices"] = mesh.vertices
        sections[f"level{i}/faces"] = mesh.faces
        sections[f"level{i}/spiral"] = table.table
        sections[f"level{i}/kernel_size"] = np.int64(table.kernel_size)
        sections[f"level{i}/dilation"] = np.int64(table.dilation)
        sections[f"level{i}/sentinel"] = np.int64(table.pad_sentinel)
    for i, m in enumerate(pyr.maps):
        sections[f"map{i}/pool_indptr"] = m.pool_indptr
        sections[f"map{i}/pool_indices"] = m.pool_indices
        sections[f"map{i}/pool_weights"] = m.pool_weights
        sections[f"map{i}/unpool_indptr"] = m.unpool_indptr
        sections[f"map{i}/unpool_indices"] = m.unpool_indices
        sections[f"map{i}/unpool_weights"] = m.unpool_weights
    container.write_container(path, container.MAGIC_PYRAMID, sections)


def load_pyramid(path) -> MeshPyramid:
    _, _, sec = container.read_container(path, container.MAGIC_PYRAMID)
    level_count = int(sec["meta/level_count"].item())
    meshes = []
    tables = []
    for i in range(level_count):
        mesh = TriangleMesh(
            vertices=sec[f"level{i}/vertices"], faces=sec[f"level{i}/faces"]
        )
        meshes.append(mesh)
        tables.append(
            SpiralIndexTable(
                table=sec[f"level{i}/spiral"],
                kernel_size=int(sec[f"level{i}/kernel_size"].item()),
                dilation=int(sec[f"level{i}/dilation"].item()),
                pad_sentinel=int(sec[f"level{i}/sentinel"].item()),
            )
        )
    maps = []
    for i in range(level_count - 1):
        maps.append(
            DownsampleMap(
                pool_indptr=sec[f"map{i}/pool_indptr"],
                pool_indices=sec[f"map{i}/pool_indices"],
                pool_weights=sec[f"map{i}/pool_weights"],
                unpool_indptr=sec[f"map{i}/unpool_indptr"],
                unpool_indices=sec[f"map{i}/unpool_indices"],
                unpool_weights=sec[f"map{i}/unpool_weights"],
                n_fine=meshes[i].n_vertices,
                n_coarse=meshes[i + 1].n_vertices,
            )
        )
    return MeshPyramid(meshes=tuple(meshes), tables=tuple(tables), maps=tuple(maps))
