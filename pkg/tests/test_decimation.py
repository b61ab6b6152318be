"""Quadric decimation and the pool/unpool linear maps."""

import numpy as np
import pytest

from spiraldiff.decimation import DecimationError, DownsampleMap, downsample_mesh
from spiraldiff.mesh_graph import MeshError, icosphere


@pytest.fixture(scope="module")
def coarse_and_map():
    mesh = icosphere(2)
    coarse, dmap = downsample_mesh(mesh, 0.5)
    return mesh, coarse, dmap


class TestDownsampleMesh:
    def test_target_vertex_count(self, coarse_and_map):
        mesh, coarse, dmap = coarse_and_map
        assert mesh.n_vertices == 162
        assert coarse.n_vertices == 81  # round(0.5 * 162)
        assert dmap.n_fine == 162
        assert dmap.n_coarse == 81

    def test_subset_placement(self, coarse_and_map):
        # surviving vertices keep their fine positions exactly
        mesh, coarse, _ = coarse_and_map
        fine_rows = {tuple(row) for row in mesh.vertices.tolist()}
        for row in coarse.vertices.tolist():
            assert tuple(row) in fine_rows

    def test_sphere_topology_survives(self, coarse_and_map):
        # link condition preserves genus: V - E + F stays 2
        _, coarse, _ = coarse_and_map
        edges = np.concatenate(
            [coarse.faces[:, [0, 1]], coarse.faces[:, [1, 2]], coarse.faces[:, [2, 0]]]
        )
        n_edges = len(np.unique(np.sort(edges, axis=1), axis=0))
        assert coarse.n_vertices - n_edges + coarse.n_faces == 2

    def test_deterministic(self):
        mesh = icosphere(1)
        c1, d1 = downsample_mesh(mesh, 0.5)
        c2, d2 = downsample_mesh(mesh, 0.5)
        assert np.array_equal(c1.vertices, c2.vertices)
        assert np.array_equal(c1.faces, c2.faces)
        assert np.array_equal(d1.unpool_weights, d2.unpool_weights)
        assert np.array_equal(d1.unpool_indices, d2.unpool_indices)

    def test_rejects_bad_ratio(self):
        mesh = icosphere(1)
        for ratio in (0.0, 1.0, -0.5, 2.0):
            with pytest.raises(DecimationError):
                downsample_mesh(mesh, ratio)
        with pytest.raises(DecimationError):
            downsample_mesh(icosphere(0), 0.25)  # target 3 < 4


class TestDownsampleMap:
    def test_pool_selects_kept_coordinates(self, coarse_and_map):
        mesh, coarse, dmap = coarse_and_map
        assert np.array_equal(dmap.pool(mesh.vertices), coarse.vertices)

    def test_pool_rows_are_single_unit_weights(self, coarse_and_map):
        _, _, dmap = coarse_and_map
        assert np.array_equal(np.diff(dmap.pool_indptr), np.ones(dmap.n_coarse))
        assert np.array_equal(dmap.pool_weights, np.ones(dmap.n_coarse))

    def test_unpool_weights_are_convex(self, coarse_and_map):
        _, _, dmap = coarse_and_map
        sums = np.add.reduceat(dmap.unpool_weights, dmap.unpool_indptr[:-1])
        assert np.abs(sums - 1.0).max() < 1e-12
        assert dmap.unpool_weights.min() > -1e-12

    def test_constant_field_round_trip_is_exact(self, coarse_and_map):
        _, _, dmap = coarse_and_map
        x = np.full((dmap.n_fine, 3), 0.1)  # 0.1 is not exactly representable
        back = dmap.unpool(dmap.pool(x))
        assert np.array_equal(back, x)

    def test_maps_are_linear(self, coarse_and_map):
        _, _, dmap = coarse_and_map
        rng = np.random.default_rng(5)
        x = rng.standard_normal((dmap.n_fine, 4))
        y = rng.standard_normal((dmap.n_fine, 4))
        lhs = dmap.pool(2.5 * x - 3.0 * y)
        assert np.allclose(lhs, 2.5 * dmap.pool(x) - 3.0 * dmap.pool(y), atol=1e-12)
        u = rng.standard_normal((dmap.n_coarse, 4))
        w = rng.standard_normal((dmap.n_coarse, 4))
        lhs = dmap.unpool(2.5 * u - 3.0 * w)
        assert np.allclose(lhs, 2.5 * dmap.unpool(u) - 3.0 * dmap.unpool(w), atol=1e-12)

    def test_adjoints_satisfy_inner_product_identity(self, coarse_and_map):
        _, _, dmap = coarse_and_map
        rng = np.random.default_rng(6)
        x = rng.standard_normal((dmap.n_fine, 2))
        g = rng.standard_normal((dmap.n_coarse, 2))
        assert np.isclose(np.sum(dmap.pool(x) * g), np.sum(x * dmap.pool_adjoint(g)))
        u = rng.standard_normal((dmap.n_coarse, 2))
        h = rng.standard_normal((dmap.n_fine, 2))
        assert np.isclose(np.sum(dmap.unpool(u) * h), np.sum(u * dmap.unpool_adjoint(h)))

    def test_validation_rejects_bad_pool_weights(self, coarse_and_map):
        _, _, dmap = coarse_and_map
        with pytest.raises(MeshError):
            DownsampleMap(
                pool_indptr=dmap.pool_indptr,
                pool_indices=dmap.pool_indices,
                pool_weights=dmap.pool_weights * 0.5,  # rows no longer sum to 1
                unpool_indptr=dmap.unpool_indptr,
                unpool_indices=dmap.unpool_indices,
                unpool_weights=dmap.unpool_weights,
                n_fine=dmap.n_fine,
                n_coarse=dmap.n_coarse,
            )
