import numpy as np
import pytest

from specmatch.errors import DistortionBoundExceeded, ShapeMismatch
from specmatch.fmap import gt_fmap
from specmatch.mesh import vertex_areas
from specmatch.synth import (
    DeformConfig,
    build_fmap_dataset,
    deform,
    make_template,
    maps_from_meshes,
    shape_basis,
    template_basis,
)


def euler_characteristic(mesh):
    return mesh.n_vertices - len(mesh.edges) + mesh.n_faces


class TestTemplates:
    @pytest.mark.parametrize("level,n", [(2, 162), (3, 642)])
    def test_icosphere_vertex_counts(self, level, n):
        m = make_template("icosphere", level)
        assert m.n_vertices == n  # 10 * 4^level + 2

    @pytest.mark.parametrize("kind", ["icosphere", "biped", "bumpy"])
    def test_watertight_genus_zero(self, kind):
        m = make_template(kind, 2)
        assert euler_characteristic(m) == 2
        f = m.faces
        he = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        he.sort(axis=1)
        _, counts = np.unique(he, axis=0, return_counts=True)
        assert set(counts.tolist()) == {2}

    def test_deterministic(self):
        a = make_template("biped", 2)
        b = make_template("biped", 2)
        assert a.vertices.tobytes() == b.vertices.tobytes()

    def test_unknown_kind(self):
        with pytest.raises(ShapeMismatch):
            make_template("plane", 2)


class TestDeform:
    def test_zero_epsilon_returns_template(self, bumpy2):
        cfg = DeformConfig(kind="bumpy", level=2, epsilon=0.0, seed=0)
        out = deform(bumpy2, cfg, 3)
        np.testing.assert_array_equal(out.vertices, bumpy2.vertices)

    def test_deterministic_given_cfg_and_seed(self, bumpy2):
        cfg = DeformConfig(kind="bumpy", level=2, epsilon=0.08, seed=5)
        a = deform(bumpy2, cfg, 9)
        b = deform(bumpy2, cfg, 9)
        assert a.vertices.tobytes() == b.vertices.tobytes()

    def test_connectivity_preserved(self, bumpy2):
        cfg = DeformConfig(kind="bumpy", level=2, epsilon=0.08, seed=5)
        out = deform(bumpy2, cfg, 0)
        assert np.array_equal(out.faces, bumpy2.faces)

    def test_distortion_bound_enforced(self, bumpy2):
        cfg = DeformConfig(kind="bumpy", level=2, epsilon=0.08, seed=2)
        old = bumpy2.edge_lengths
        for i in range(10):
            out = deform(bumpy2, cfg, i)
            new = out.edge_lengths
            assert (np.abs(new - old) / old).max() < 0.25

    def test_absurd_epsilon_raises(self, bumpy2):
        cfg = DeformConfig(kind="bumpy", level=2, epsilon=3.0, seed=0, retries=2)
        with pytest.raises(DistortionBoundExceeded):
            deform(bumpy2, cfg, 0)

    def test_band_concentration_of_gt_map(self, bumpy2):
        cfg = DeformConfig(kind="bumpy", level=2, epsilon=0.08, seed=7)
        k = 30
        bt = template_basis(bumpy2, k)
        shape = deform(bumpy2, cfg, 1)
        C = gt_fmap(bt, shape_basis(shape, k), np.arange(bumpy2.n_vertices),
                    vertex_areas(shape))
        i, j = np.indices((k, k))
        w = C**2
        assert w[np.abs(i - j) <= 3].sum() / w.sum() >= 0.7


class TestDatasetBuild:
    def test_self_pair_and_range(self):
        cfg = DeformConfig(kind="bumpy", level=2, epsilon=0.08, seed=3)
        ds = build_fmap_dataset(cfg, 12, 20)
        assert len(ds) == 12 and ds.n == 20
        assert np.abs(ds.maps[0] - np.eye(20)).max() < 1e-8  # |I| sanity row
        assert ds.maps.min() >= 0.0 and ds.maps.max() <= 1.1

    def test_determinism(self):
        cfg = DeformConfig(kind="bumpy", level=2, epsilon=0.08, seed=3)
        a = build_fmap_dataset(cfg, 6, 16)
        b = build_fmap_dataset(cfg, 6, 16)
        assert a.maps.tobytes() == b.maps.tobytes()

    def test_signed_with_sign_augment(self):
        cfg = DeformConfig(kind="bumpy", level=2, epsilon=0.08, seed=3)
        ds = build_fmap_dataset(cfg, 20, 16, absolute=False, sign_augment=True)
        diag = np.diagonal(ds.maps[1:], axis1=1, axis2=2)
        big = diag[np.abs(diag) > 0.5]
        assert (big > 0).any() and (big < 0).any()  # both signs present

    def test_maps_from_meshes_rejects_unregistered(self, bumpy2):
        other = make_template("icosphere", 1)
        with pytest.raises(ShapeMismatch):
            maps_from_meshes(bumpy2, [other], 10)

    def test_maps_from_meshes_matches_library_build(self, bumpy2):
        cfg = DeformConfig(kind="bumpy", level=2, epsilon=0.08, seed=3)
        ds = build_fmap_dataset(cfg, 4, 12)
        shapes = [deform(bumpy2, cfg, i) for i in range(1, 4)]
        ds2 = maps_from_meshes(bumpy2, shapes, 12)
        np.testing.assert_allclose(ds.maps, ds2.maps, atol=1e-12)
