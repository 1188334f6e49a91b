import numpy as np
import pytest
from hypothesis import given, strategies as st

from specmatch.errors import KTooLarge, ShapeMismatch, SingularSystem
from specmatch.fmap import (
    bij_penalty,
    fmap_from_p2p,
    geodesic_error,
    gt_fmap,
    lap_commute_penalty,
    laplacian_mask,
    ortho_penalty,
    p2p_from_fmap,
    resolvent_mask,
    slanted_mask,
    solve_fmap,
    zoomout,
)
from specmatch.mesh import TriangleMesh, vertex_areas
from specmatch.synth import DeformConfig, deform, make_template, shape_basis

K = 30


@pytest.fixture(scope="module")
def template():
    return make_template("bumpy", 2)


@pytest.fixture(scope="module")
def t_basis(template):
    return shape_basis(template, 60)


@pytest.fixture(scope="module")
def pair(template, t_basis):
    cfg = DeformConfig(kind="bumpy", level=2, epsilon=0.08, seed=21)
    shape = deform(template, cfg, 0, basis=t_basis)
    return template, shape, t_basis, shape_basis(shape, 60)


def dense_lstsq_oracle(A1, A2, alpha, M, ridge=1e-9):
    """Global least squares over all k1*k2 unknowns (row-major vec)."""
    k1, d = A1.shape
    k2 = A2.shape[0]
    rv = ridge * np.trace(A1 @ A1.T)
    n_rows = k2 * d + 2 * k2 * k1
    D = np.zeros((n_rows, k2 * k1))
    r = np.zeros(n_rows)
    row = 0
    for i in range(k2):
        for j in range(d):
            D[row, i * k1 : (i + 1) * k1] = A1[:, j]
            r[row] = A2[i, j]
            row += 1
    for i in range(k2):
        for l in range(k1):
            D[row, i * k1 + l] = np.sqrt(alpha) * M[i, l]
            row += 1
    for i in range(k2):
        for l in range(k1):
            D[row, i * k1 + l] = np.sqrt(rv)
            row += 1
    x, *_ = np.linalg.lstsq(D, r, rcond=None)
    return x.reshape(k2, k1)


class TestGtFmap:
    def test_identity_pair(self, template, t_basis):
        S = vertex_areas(template)
        b = t_basis.truncated(K)
        C = gt_fmap(b, b, np.arange(template.n_vertices), S)
        assert np.abs(C - np.eye(K)).max() < 1e-8

    def test_near_isometric_orthogonality(self, pair):
        t, s, b1, b2 = pair
        C = gt_fmap(b1.truncated(K), b2.truncated(K), np.arange(t.n_vertices),
                    vertex_areas(s))
        assert np.linalg.norm(C @ C.T - np.eye(K)) / np.sqrt(K) < 0.1

    def test_global_scaling_doubles_map(self, pair):
        t, s, b1, _ = pair
        big = s.with_vertices(2.0 * s.vertices)
        b2 = shape_basis(s, K)
        b2_big = shape_basis(big, K)
        ident = np.arange(t.n_vertices)
        C = gt_fmap(b1.truncated(K), b2, ident, vertex_areas(s))
        C_big = gt_fmap(b1.truncated(K), b2_big, ident, vertex_areas(big))
        np.testing.assert_allclose(np.abs(C_big), 2.0 * np.abs(C), rtol=1e-6, atol=1e-9)

    def test_functoriality_on_triple(self, template, t_basis):
        cfg = DeformConfig(kind="bumpy", level=2, epsilon=0.08, seed=33)
        s2 = deform(template, cfg, 0, basis=t_basis)
        s3 = deform(template, cfg, 1, basis=t_basis)
        ident = np.arange(template.n_vertices)
        b1 = t_basis.truncated(K)
        b2 = shape_basis(s2, K)
        b3 = shape_basis(s3, K)
        C12 = gt_fmap(b1, b2, ident, vertex_areas(s2))
        C23 = gt_fmap(b2, b3, ident, vertex_areas(s3))
        C13 = gt_fmap(b1, b3, ident, vertex_areas(s3))
        assert np.linalg.norm(C23 @ C12 - C13) < 0.2 * np.linalg.norm(C13)


class TestMasks:
    def test_identical_spectra_zero_diagonal(self):
        lam = np.sort(np.random.default_rng(0).random(12)) * 5
        lam[0] = 0.0
        for mask in (laplacian_mask(lam, lam), resolvent_mask(lam, lam)):
            assert np.abs(np.diag(mask)).max() == 0.0

    def test_laplacian_scale_invariance(self):
        lam1 = np.array([0.0, 1.0, 2.5, 4.0])
        lam2 = np.array([0.0, 0.8, 2.0, 5.0])
        a = laplacian_mask(lam1, lam2)
        b = laplacian_mask(3.7 * lam1, 3.7 * lam2)
        np.testing.assert_allclose(a, b, atol=1e-15)

    @given(st.integers(0, 1000))
    def test_laplacian_monotone_in_gap(self, seed):
        rng = np.random.default_rng(seed)
        lam1 = np.sort(rng.random(8)); lam1[0] = 0
        lam2 = np.sort(rng.random(8)); lam2[0] = 0
        M = laplacian_mask(lam1, lam2)
        l1 = lam1 / lam1[-1]
        l2 = lam2 / lam2[-1]
        gap = np.abs(l2[:, None] - l1[None, :])
        order = np.argsort(gap.ravel())
        assert (np.diff(M.ravel()[order]) >= -1e-12).all()

    def test_resolvent_bounded_by_two(self):
        rng = np.random.default_rng(1)
        lam1 = np.sort(rng.random(20)) * 9; lam1[0] = 0
        lam2 = np.sort(rng.random(15)) * 2; lam2[0] = 0
        assert resolvent_mask(lam1, lam2).max() <= 2.0

    def test_resolvent_flatter_at_high_frequencies(self):
        lam = np.linspace(0, 10, K)
        lap = laplacian_mask(lam, lam)
        res = resolvent_mask(lam, lam)
        hi = slice(2 * K // 3, K)
        ratio_lap = lap[hi, hi].mean() / lap.max()
        ratio_res = res[hi, hi].mean() / res.max()
        assert ratio_res < ratio_lap

    def test_slanted_unit_slope_diagonal_zero(self):
        lam = np.arange(10.0)
        M = slanted_mask(lam, lam, slope=1.0)
        assert np.abs(np.diag(M)).max() == 0.0

    def test_slanted_far_corner_saturates(self):
        lam = np.arange(20.0)
        M = slanted_mask(lam, lam)
        assert M[0, -1] > 0.999 and M[-1, 0] > 0.999

    def test_slanted_monotone_in_distance(self):
        lam = np.arange(15.0)
        M = slanted_mask(lam, lam, slope=1.0)
        i, j = np.indices(M.shape)
        dist = np.abs(i - j) / np.sqrt(2.0)
        order = np.argsort(dist.ravel())
        assert (np.diff(M.ravel()[order]) >= -1e-12).all()


class TestSolveFmap:
    def test_identity_fit(self):
        rng = np.random.default_rng(2)
        A = rng.standard_normal((6, 10))
        C = solve_fmap(A, A, 0.0)
        assert np.abs(C - np.eye(6)).max() < 1e-6

    def test_huge_alpha_kills_map(self):
        rng = np.random.default_rng(3)
        A1 = rng.standard_normal((5, 7))
        A2 = rng.standard_normal((5, 7))
        C = solve_fmap(A1, A2, 1e12, np.ones((5, 5)))
        assert np.abs(C).max() < 1e-6

    @pytest.mark.parametrize("seed", range(6))
    def test_matches_dense_normal_equations(self, seed):
        rng = np.random.default_rng(seed)
        A1 = rng.standard_normal((4, 6))
        A2 = rng.standard_normal((6, 6))
        M = rng.random((6, 4))
        mine = solve_fmap(A1, A2, 0.5, M)
        oracle = dense_lstsq_oracle(A1, A2, 0.5, M)
        assert np.abs(mine - oracle).max() < 1e-8

    @given(st.integers(0, 10_000))
    def test_optimality_gradient_vanishes(self, seed):
        rng = np.random.default_rng(seed)
        A1 = rng.standard_normal((5, 9))
        A2 = rng.standard_normal((5, 9))
        M = rng.random((5, 5))
        alpha = float(rng.random())
        C = solve_fmap(A1, A2, alpha, M)
        grad = 2 * (C @ A1 - A2) @ A1.T + 2 * alpha * M * M * C
        obj = np.sum((C @ A1 - A2) ** 2) + alpha * np.sum((M * C) ** 2)
        assert np.linalg.norm(grad) < 1e-6 * max(obj, 1.0)

    def test_singular_without_ridge(self):
        A1 = np.zeros((4, 5))
        A2 = np.ones((4, 5))
        with pytest.raises(SingularSystem):
            solve_fmap(A1, A2, 0.0, ridge=None)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            solve_fmap(np.zeros((3, 4)), np.zeros((3, 5)))
        with pytest.raises(ShapeMismatch):
            solve_fmap(np.zeros((3, 4)), np.zeros((3, 4)), 1.0, np.zeros((2, 2)))


class TestPointMaps:
    def test_identity_map(self, template, t_basis):
        b = t_basis.truncated(K)
        pm = p2p_from_fmap(np.eye(K), b, b)
        assert (pm == np.arange(template.n_vertices)).all()

    def test_recovers_permutation(self, template, t_basis):
        rng = np.random.default_rng(4)
        perm = rng.permutation(template.n_vertices)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(template.n_vertices)
        permuted = TriangleMesh(template.vertices[perm], inv[template.faces])
        b1 = t_basis.truncated(K)
        b2 = shape_basis(permuted, K)
        C = gt_fmap(b1, b2, inv, vertex_areas(permuted))
        assert (p2p_from_fmap(C, b1, b2) == inv).all()

    def test_scaled_map_gives_similar_errors(self, pair):
        t, s, b1, b2 = pair
        gt = np.arange(t.n_vertices)
        C = gt_fmap(b1.truncated(K), b2.truncated(K), gt, vertex_areas(s))
        _, mean1 = geodesic_error(p2p_from_fmap(C, b1, b2), gt, s)
        _, mean2 = geodesic_error(p2p_from_fmap(0.8 * C, b1, b2), gt, s)
        edge = s.edge_lengths.mean() / np.sqrt(s.total_area)
        assert abs(mean1 - mean2) < 2 * edge

    def test_fmap_from_identity_p2p(self, template, t_basis):
        S = vertex_areas(template)
        C = fmap_from_p2p(np.arange(template.n_vertices), t_basis, t_basis, S, K)
        assert np.abs(C - np.eye(K)).max() < 1e-8

    def test_inverse_consistency_on_gt(self, pair):
        t, s, b1, b2 = pair
        gt = np.arange(t.n_vertices)
        C = fmap_from_p2p(gt, b1, b2, vertex_areas(s), K)
        pm = p2p_from_fmap(C, b1, b2)
        assert (pm == gt).mean() >= 0.95

    def test_order_one_map_is_area_ratio(self, pair):
        t, s, b1, b2 = pair
        C = fmap_from_p2p(np.arange(t.n_vertices), b1, b2, vertex_areas(s), 1)
        expected = np.sqrt(s.total_area / t.total_area)
        assert abs(C[0, 0] - expected) < 1e-6 * expected


class TestZoomout:
    def test_identity_grows_to_identity(self, t_basis, template):
        S = vertex_areas(template)
        Z = zoomout(np.eye(20), t_basis, t_basis, S, 45)
        assert np.abs(Z - np.eye(45)).max() < 1e-8

    def test_paper_growth_schedule(self, pair):
        t, s, b1, b2 = pair
        gt = np.arange(t.n_vertices)
        C = gt_fmap(b1.truncated(30), b2.truncated(30), gt, vertex_areas(s))
        Z = zoomout(C, b1, b2, vertex_areas(s), 40)
        assert Z.shape == (40, 40)

    def test_lambda_scaling_gives_same_map(self, pair):
        t, s, b1, b2 = pair
        gt = np.arange(t.n_vertices)
        S2 = vertex_areas(s)
        C = gt_fmap(b1.truncated(30), b2.truncated(30), gt, S2)
        base = p2p_from_fmap(zoomout(C, b1, b2, S2, 60), b1, b2)
        for lam in (0.5, 0.8):
            scaled = p2p_from_fmap(zoomout(lam * C, b1, b2, S2, 60), b1, b2)
            assert (scaled == base).mean() >= 0.95

    def test_properness_fixed_point(self, pair):
        t, s, b1, b2 = pair
        gt = np.arange(t.n_vertices)
        S2 = vertex_areas(s)
        C = gt_fmap(b1.truncated(30), b2.truncated(30), gt, S2)
        Z = zoomout(C, b1, b2, S2, 50)
        again = fmap_from_p2p(p2p_from_fmap(Z, b1, b2), b1, b2, S2, 50)
        assert np.abs(again - Z).max() < 1e-6

    def test_target_beyond_basis(self, t_basis, template):
        with pytest.raises(KTooLarge):
            zoomout(np.eye(20), t_basis, t_basis, vertex_areas(template), 100)

    def test_rectangular_rejected(self, t_basis, template):
        with pytest.raises(ShapeMismatch):
            zoomout(np.zeros((3, 4)), t_basis, t_basis, vertex_areas(template), 10)


class TestPenalties:
    def test_orthonormal_map_zero(self):
        rng = np.random.default_rng(5)
        Q, _ = np.linalg.qr(rng.standard_normal((8, 8)))
        assert ortho_penalty(Q) < 1e-20

    def test_bijective_pair_zero(self):
        rng = np.random.default_rng(6)
        C = rng.standard_normal((6, 6)) + 3 * np.eye(6)
        assert bij_penalty(C, np.linalg.inv(C)) < 1e-18

    def test_commute_zero_for_diagonal_equal_spectra(self):
        lam = np.linspace(0, 4, 9)
        C = np.diag(np.arange(1.0, 10.0))
        assert lap_commute_penalty(C, lam, lam) == 0.0


class TestGeodesicError:
    def test_exact_prediction_is_zero(self, pair):
        t, s, _, _ = pair
        gt = np.arange(t.n_vertices)
        errs, mean = geodesic_error(gt, gt, s)
        assert mean == 0.0 and errs.max() == 0.0

    def test_single_neighbor_swap(self, template):
        gt = np.arange(template.n_vertices)
        pred = gt.copy()
        e0 = template.edges[0]
        pred[e0[0]] = e0[1]
        edge_len = np.linalg.norm(
            template.vertices[e0[0]] - template.vertices[e0[1]]
        )
        _, mean = geodesic_error(pred, gt, template)
        expected = edge_len / (template.n_vertices * np.sqrt(template.total_area))
        assert abs(mean - expected) < 1e-12

    def test_random_map_matches_monte_carlo(self, icosphere3):
        rng = np.random.default_rng(8)
        n = icosphere3.n_vertices
        pred = rng.integers(0, n, size=n)
        gt = np.arange(n)
        _, mean = geodesic_error(pred, gt, icosphere3)
        # Monte-Carlo estimate of the expected normalized distance between
        # random vertex pairs, from an independent sample
        samp_a = rng.integers(0, n, size=4000)
        samp_b = rng.integers(0, n, size=4000)
        from specmatch.mesh import geodesic_distances_multi

        srcs, inv = np.unique(samp_a, return_inverse=True)
        d = geodesic_distances_multi(icosphere3, srcs)
        mc = (d[inv, samp_b] / np.sqrt(icosphere3.total_area)).mean()
        assert abs(mean - mc) < 0.1 * mc
