import numpy as np
import pytest
from hypothesis import given, strategies as st

from specmatch.errors import (
    DegenerateMesh,
    DisconnectedMesh,
    IndexOutOfRange,
    ParseError,
)
from specmatch.mesh import (
    TriangleMesh,
    cotan_stiffness,
    geodesic_distances,
    load_mesh,
    save_off,
    vertex_areas,
)
from specmatch.synth import make_template

from conftest import grid_mesh


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestLoaders:
    def test_single_triangle_off(self, tmp_path):
        p = write(tmp_path, "tri.off", "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n")
        m = load_mesh(p)
        assert m.n_vertices == 3 and m.n_faces == 1

    def test_off_header_with_counts_inline(self, tmp_path):
        p = write(tmp_path, "tri.off", "OFF 3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n")
        assert load_mesh(p).n_faces == 1

    def test_off_index_out_of_range(self, tmp_path):
        p = write(
            tmp_path, "bad.off",
            "OFF\n4 2 0\n0 0 0\n1 0 0\n0 1 0\n1 1 0\n3 0 1 2\n3 1 7 3\n",
        )
        with pytest.raises(IndexOutOfRange):
            load_mesh(p)

    def test_icosphere_obj_subdivision_3(self, tmp_path):
        sphere = make_template("icosphere", 3)
        lines = ["# unit icosphere"]
        lines += [f"v {x} {y} {z}" for x, y, z in sphere.vertices]
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in sphere.faces]
        p = write(tmp_path, "sphere.obj", "\n".join(lines) + "\n")
        m = load_mesh(p)
        assert m.n_vertices == 642 and m.n_faces == 1280

    def test_obj_slash_tokens(self, tmp_path):
        p = write(
            tmp_path, "t.obj",
            "v 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\nf 1/1/1 2/2/1 3/3/1\n",
        )
        assert load_mesh(p).n_faces == 1

    @pytest.mark.parametrize(
        "text",
        [
            "3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n",  # missing OFF header
            "OFF\n3 1 0\n0 0 0\n1 0 0\n",  # truncated
            "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n4 0 1 2 0\n",  # quad face
            "OFF\nnope\n",  # bad counts
        ],
    )
    def test_off_parse_errors(self, tmp_path, text):
        with pytest.raises(ParseError):
            load_mesh(write(tmp_path, "bad.off", text))

    def test_obj_negative_index_rejected(self, tmp_path):
        p = write(tmp_path, "n.obj", "v 0 0 0\nv 1 0 0\nv 0 1 0\nf -1 -2 -3\n")
        with pytest.raises(ParseError):
            load_mesh(p)

    def test_unknown_format(self, tmp_path):
        p = write(tmp_path, "m.ply", "ply\n")
        with pytest.raises(ParseError):
            load_mesh(p)

    def test_save_off_roundtrip(self, tmp_path, bumpy2):
        path = tmp_path / "b.off"
        save_off(bumpy2, path)
        again = load_mesh(path)
        assert np.array_equal(again.faces, bumpy2.faces)
        np.testing.assert_allclose(again.vertices, bumpy2.vertices, rtol=0, atol=0)


class TestValidation:
    def test_degenerate_face_rejected(self):
        with pytest.raises(DegenerateMesh):
            TriangleMesh([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [[0, 1, 2]])

    def test_repeated_vertex_rejected(self):
        with pytest.raises(DegenerateMesh):
            TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 1]])

    def test_nan_vertex_rejected(self):
        with pytest.raises(ParseError):
            TriangleMesh([[0, 0, np.nan], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])

    def test_vertices_immutable(self, bumpy2):
        with pytest.raises(ValueError):
            bumpy2.vertices[0, 0] = 1.0


class TestVertexAreas:
    def test_equilateral_split(self):
        m = TriangleMesh(
            [[0, 0, 0], [1, 0, 0], [0.5, np.sqrt(3) / 2, 0]], [[0, 1, 2]]
        )
        areas = vertex_areas(m)
        np.testing.assert_allclose(areas, m.total_area / 3)

    def test_sum_is_total_area_sphere(self, icosphere3):
        total = vertex_areas(icosphere3).sum()
        assert abs(total - icosphere3.total_area) < 1e-9 * total
        assert abs(total - 4 * np.pi) < 0.02 * 4 * np.pi

    def test_unit_square_grid_sums_to_one(self, square25):
        assert abs(vertex_areas(square25).sum() - 1.0) < 1e-12

    def test_positive(self, bumpy2):
        assert (vertex_areas(bumpy2) > 0).all()


class TestCotanStiffness:
    def test_constants_in_kernel(self, bumpy2):
        W = cotan_stiffness(bumpy2)
        resid = np.abs(W @ np.ones(bumpy2.n_vertices)).max()
        assert resid < 1e-9 * np.abs(W.toarray()).max()

    def test_psd_on_random_vectors(self, bumpy2):
        W = cotan_stiffness(bumpy2)
        rng = np.random.default_rng(0)
        for _ in range(100):
            x = rng.standard_normal(bumpy2.n_vertices)
            assert x @ (W @ x) >= -1e-10

    def test_equilateral_off_diagonals(self):
        m = TriangleMesh(
            [[0, 0, 0], [1, 0, 0], [0.5, np.sqrt(3) / 2, 0]], [[0, 1, 2]]
        )
        W = cotan_stiffness(m).toarray()
        expected = -1.0 / (2 * np.sqrt(3))  # -cot(60 deg) / 2
        for i in range(3):
            for j in range(3):
                if i != j:
                    assert abs(W[i, j] - expected) < 1e-12

    def test_symmetry(self, bumpy2):
        W = cotan_stiffness(bumpy2)
        gap = np.abs((W - W.T).toarray()).max()
        assert gap < 1e-12 * np.abs(W.toarray()).max()


class TestGeodesics:
    def test_source_distance_zero(self, bumpy2):
        assert geodesic_distances(bumpy2, 5)[5] == 0.0

    def test_collinear_chain(self):
        m = TriangleMesh(
            [[0, 0, 0], [1, 0, 0], [2, 0, 0], [1, 1, 0]],
            [[0, 1, 3], [1, 2, 3]],
        )
        d = geodesic_distances(m, 0)
        assert abs(d[2] - 2.0) < 1e-12

    def test_sphere_pole_to_antipode(self, icosphere3):
        v = icosphere3.vertices
        anti = int(np.argmin(np.linalg.norm(v + v[0], axis=1)))
        d = geodesic_distances(icosphere3, 0)[anti]
        assert np.pi <= d <= 1.1 * np.pi

    def test_symmetric_both_ways(self, bumpy2):
        d_ab = geodesic_distances(bumpy2, 3)[77]
        d_ba = geodesic_distances(bumpy2, 77)[3]
        assert abs(d_ab - d_ba) < 1e-9

    def test_disconnected_raises(self):
        m = TriangleMesh(
            [[0, 0, 0], [1, 0, 0], [0, 1, 0],
             [10, 10, 0], [11, 10, 0], [10, 11, 0]],
            [[0, 1, 2], [3, 4, 5]],
        )
        with pytest.raises(DisconnectedMesh):
            geodesic_distances(m, 0)

    def test_source_out_of_range(self, bumpy2):
        with pytest.raises(IndexOutOfRange):
            geodesic_distances(bumpy2, bumpy2.n_vertices)

    @given(st.tuples(st.integers(0, 161), st.integers(0, 161), st.integers(0, 161)))
    def test_triangle_inequality(self, abc):
        mesh = make_template("bumpy", 2)
        a, b, c = abc
        da = geodesic_distances(mesh, a)
        db = geodesic_distances(mesh, b)
        assert da[c] <= da[b] + db[c] + 1e-9
