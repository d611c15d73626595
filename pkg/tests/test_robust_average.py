import numpy as np
import pytest

from sceneloc import robust_average as ra
from sceneloc.errors import ConfigInvalid, EmptyInput, StaleState


class TestForward:
    def test_identical_points_fixed_point(self):
        p = np.array([0.4, -0.1, 1.7])
        pts = np.tile(p, (5, 1))
        q, state = ra.gm_forward(pts)
        np.testing.assert_allclose(q, p, atol=1e-12)
        for it in state.iterates:
            np.testing.assert_allclose(it, p, atol=1e-12)

    def test_two_point_symmetry(self):
        pts = np.array([[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        q, _ = ra.gm_forward(pts)
        np.testing.assert_allclose(q, [0.0, 0.0, 0.0], atol=1e-12)

    def test_outlier_rejected(self):
        rng = np.random.default_rng(0)
        cluster = rng.normal(0.0, 0.003, (4, 3))
        pts = np.vstack([cluster, [[1.0, 1.0, 1.0]]])
        q, state = ra.gm_forward(pts)
        assert np.linalg.norm(q - cluster.mean(axis=0)) < 1e-2
        # Gaussian weight of a 1.7 m outlier under sigma=2.5 cm is immeasurable
        assert state.weights[-1, 4] < 1e-100

    def test_robustness_generic_fixture(self):
        rng = np.random.default_rng(1)
        cfg = ra.GMConfig()
        for _ in range(20):
            center = rng.uniform(-1, 1, 3)
            inliers = center + rng.uniform(-cfg.sigma / 4, cfg.sigma / 4, (4, 3))
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            outlier = center + direction * rng.uniform(11, 40) * cfg.sigma
            q, _ = ra.gm_forward(np.vstack([inliers, outlier[None]]), cfg)
            assert np.linalg.norm(q - inliers.mean(axis=0)) < cfg.sigma

    def test_extended_weiszfeld_matches_convex_oracle(self):
        scipy_opt = pytest.importorskip("scipy.optimize")
        rng = np.random.default_rng(2)
        cfg = ra.GMConfig(weiszfeld_iters=1000, meanshift_iters=0)
        for _ in range(10):
            pts = rng.uniform(-1, 1, (5, 3))
            q, _ = ra.gm_forward(pts, cfg)

            def cost(y):
                return np.linalg.norm(y - pts, axis=1).sum()

            ref = scipy_opt.minimize(
                cost, pts.mean(axis=0), method="Nelder-Mead",
                options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 20000},
            )
            assert np.linalg.norm(q - ref.x) < 1e-6
            assert cost(q) <= ref.fun + 1e-9

    def test_iterates_stay_in_bounding_box(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            pts = rng.uniform(-2, 2, (6, 3))
            _, state = ra.gm_forward(pts)
            lo, hi = pts.min(axis=0), pts.max(axis=0)
            assert np.all(state.iterates >= lo - 1e-12)
            assert np.all(state.iterates <= hi + 1e-12)

    def test_translation_equivariance(self):
        rng = np.random.default_rng(4)
        pts = rng.normal(0, 0.05, (5, 3))
        v = np.array([10.0, -3.0, 0.7])
        qa, _ = ra.gm_forward(pts)
        qb, _ = ra.gm_forward(pts + v)
        np.testing.assert_allclose(qb, qa + v, atol=1e-12)

    def test_rotation_equivariance(self):
        rng = np.random.default_rng(5)
        pts = rng.normal(0, 0.05, (5, 3))
        rot, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        if np.linalg.det(rot) < 0:
            rot[:, 0] *= -1
        qa, _ = ra.gm_forward(pts)
        qb, _ = ra.gm_forward(pts @ rot.T)
        np.testing.assert_allclose(qb, rot @ qa, atol=1e-12)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(6)
        pts = rng.normal(0, 0.05, (7, 3))
        qa, _ = ra.gm_forward(pts)
        qb, _ = ra.gm_forward(pts[rng.permutation(7)])
        np.testing.assert_allclose(qa, qb, atol=1e-12)

    def test_single_point(self):
        q, _ = ra.gm_forward(np.array([[1.0, 2.0, 3.0]]))
        np.testing.assert_allclose(q, [1.0, 2.0, 3.0])

    def test_empty_rejected(self):
        with pytest.raises(EmptyInput):
            ra.gm_forward(np.empty((0, 3)))

    def test_bad_config_rejected(self):
        with pytest.raises(ConfigInvalid):
            ra.GMConfig(sigma=0.0)
        with pytest.raises(ConfigInvalid):
            ra.GMConfig(weiszfeld_iters=-1)


def fd_jacobian(pts, config, step=1e-6):
    """Central finite-difference Jacobian dq/dpts, shape (3, T, 3)."""
    jac = np.zeros((3,) + pts.shape)
    for i in range(pts.shape[0]):
        for k in range(3):
            hi = pts.copy()
            hi[i, k] += step
            lo = pts.copy()
            lo[i, k] -= step
            qh, _ = ra.gm_forward(hi, config)
            ql, _ = ra.gm_forward(lo, config)
            jac[:, i, k] = (qh - ql) / (2 * step)
    return jac


def draw_fd_safe_points(rng, cfg, n_points=5, scale=0.02, margin=1e-3):
    """Random point set on which central differences are trustworthy: iterates
    keep clear of the weight kink at r -> 0, and the Gaussian phase stays
    contractive (a set spread far past sigma has third derivatives that
    swamp an h=1e-6 central difference regardless of gradient correctness)."""
    while True:
        pts = rng.normal(0, scale, (n_points, 3))
        _, state = ra.gm_forward(pts, cfg)
        gap = min(np.linalg.norm(it - pts, axis=1).min() for it in state.iterates)
        w = state.weights[cfg.weiszfeld_iters :]
        if gap > margin and (w.max(axis=1) < 50 * w.min(axis=1)).all():
            return pts, state


class TestBackward:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        cfg = ra.GMConfig()
        for _ in range(10):
            pts, state = draw_fd_safe_points(rng, cfg)
            want = fd_jacobian(pts, cfg)
            for row in range(3):
                e = np.zeros(3)
                e[row] = 1.0
                got = ra.gm_backward(state, e)
                denom = np.maximum(np.abs(want[row]), np.maximum(np.abs(got), 1e-8))
                rel = np.abs(got - want[row]) / denom
                assert rel.max() < 1e-4

    def test_fd_with_outlier_present(self):
        rng = np.random.default_rng(8)
        cfg = ra.GMConfig()
        pts = np.vstack([rng.normal(0, 0.01, (4, 3)), [[0.9, -0.8, 1.1]]])
        _, state = ra.gm_forward(pts, cfg)
        want = fd_jacobian(pts, cfg)
        for row in range(3):
            e = np.zeros(3)
            e[row] = 1.0
            got = ra.gm_backward(state, e)
            denom = np.maximum(np.abs(want[row]), np.maximum(np.abs(got), 1e-8))
            assert (np.abs(got - want[row]) / denom).max() < 1e-4

    def test_zero_upstream_gives_zero(self):
        rng = np.random.default_rng(9)
        pts = rng.normal(0, 0.05, (5, 3))
        _, state = ra.gm_forward(pts)
        np.testing.assert_array_equal(ra.gm_backward(state, np.zeros(3)), 0.0)

    def test_identical_points_jacobian_rows_sum_to_identity(self):
        pts = np.tile([0.2, 0.3, -0.4], (5, 1))
        _, state = ra.gm_forward(pts)
        total = np.zeros((3, 3))
        for row in range(3):
            e = np.zeros(3)
            e[row] = 1.0
            total[row] = ra.gm_backward(state, e).sum(axis=0)
        np.testing.assert_allclose(total, np.eye(3), atol=1e-9)

    def test_tampered_state_rejected(self):
        pts = np.random.default_rng(10).normal(0, 0.05, (5, 3))
        _, state = ra.gm_forward(pts)
        state.weights = state.weights[:-1]
        with pytest.raises(StaleState):
            ra.gm_backward(state, np.ones(3))


class TestApplyPgm:
    def test_matches_gm_forward_per_pixel(self):
        rng = np.random.default_rng(11)
        preds = rng.normal(0, 0.05, (40, 5, 3))
        cfg = ra.GMConfig()
        got = ra.apply_pgm(preds, cfg)
        for p in range(preds.shape[0]):
            want, _ = ra.gm_forward(preds[p], cfg)
            np.testing.assert_allclose(got[p], want, atol=1e-9)

    def test_identical_predictions_pass_through(self):
        preds = np.tile([0.5, 0.6, 0.7], (8, 5, 1))
        got = ra.apply_pgm(preds)
        np.testing.assert_allclose(got, np.tile([0.5, 0.6, 0.7], (8, 1)), atol=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(EmptyInput):
            ra.apply_pgm(np.empty((0, 5, 3)))
