import numpy as np
import pytest

from gramridge.glm import ResponseSpec, iwls_fit
from gramridge.linalg import (
    BlockedDesign,
    DesignError,
    GramSet,
    PenaltyConfig,
    RidgeContext,
    SolverError,
    assemble_gamma,
    cv_hat_matrix,
    gaussian_kernel,
    hat_matrix,
    hat_matrix_unpenalized,
    paired_param_transform,
    precompute_grams,
    predict_new,
    recover_coefficients,
    submatrix_gamma,
)
from oracles import (
    full_x,
    kron_paired_gamma,
    naive_hat,
    naive_ridge,
    penalty_diag,
    random_instance,
    triple_loop_gram,
)


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300)


class TestPrecomputeGrams:
    def test_identity_design(self):
        g = precompute_grams(BlockedDesign((np.eye(2),)))
        np.testing.assert_array_equal(g.sigmas[0], np.eye(2))

    def test_row_of_ones(self):
        g = precompute_grams(BlockedDesign((np.ones((1, 3)),)))
        np.testing.assert_array_equal(g.sigmas[0], [[3.0]])

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(1)
        x1, x2 = rng.standard_normal((4, 7)), rng.standard_normal((4, 3))
        g = precompute_grams(BlockedDesign((x1, x2)))
        np.testing.assert_allclose(g.sigmas[0], triple_loop_gram(x1), atol=1e-12)
        np.testing.assert_allclose(g.sigmas[1], triple_loop_gram(x2), atol=1e-12)
        assert g.sigma_q is None
        assert g.kernel_tags == ("linear", "linear")

    def test_row_mismatch_rejected(self):
        with pytest.raises(DesignError, match="rows"):
            BlockedDesign((np.ones((3, 2)), np.ones((4, 2))))

    def test_symmetric_psd(self):
        rng = np.random.default_rng(2)
        g = precompute_grams(BlockedDesign((rng.standard_normal((10, 40)),)))
        s = g.sigmas[0]
        assert np.array_equal(s, s.T)
        assert np.linalg.eigvalsh(s).min() >= -1e-8 * np.trace(s) / 10

    def test_swap_gram_only_when_paired(self):
        rng = np.random.default_rng(3)
        xa, xb = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
        g = precompute_grams(BlockedDesign((xa, xb), paired=(0, 1)))
        np.testing.assert_allclose(g.sigma_q, xa @ xb.T + xb @ xa.T, atol=1e-13)
        assert np.array_equal(g.sigma_q, g.sigma_q.T)

    def test_kernel_hook(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((6, 3))
        k = gaussian_kernel(1.5)
        g = precompute_grams(BlockedDesign((x,)), [k])
        d2 = ((x[:, None, :] - x[None, :, :]) ** 2).sum(-1)
        np.testing.assert_allclose(g.sigmas[0], np.exp(-d2 / (2 * 1.5**2)), atol=1e-14)
        assert g.kernel_tags == ("gaussian(1.5)",)


class TestAssembleGamma:
    def test_two_identities(self):
        g = GramSet((np.eye(2), np.eye(2)))
        np.testing.assert_allclose(assemble_gamma(g, PenaltyConfig([2.0, 4.0])), 0.75 * np.eye(2))

    def test_unit_penalty(self):
        s = np.array([[2.0, 1.0], [1.0, 3.0]])
        np.testing.assert_array_equal(assemble_gamma(GramSet((s,)), PenaltyConfig([1.0])), s)

    def test_paired_matches_kronecker(self):
        rng = np.random.default_rng(5)
        xa, xb = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
        pen = PenaltyConfig.paired_from([1.0, 1.0], (0, 1), (1.0, 2.0, 0.5))
        gamma = assemble_gamma(precompute_grams(BlockedDesign((xa, xb), paired=(0, 1))), pen)
        ref = kron_paired_gamma(xa, xb, pen.pair_block((0, 1)))
        assert rel_err(gamma, ref) <= 1e-10

    def test_zero_coupling_is_unpaired(self):
        rng = np.random.default_rng(6)
        xa, xb, xc = (rng.standard_normal((5, 4)) for _ in range(3))
        grams = precompute_grams(BlockedDesign((xa, xb, xc), paired=(0, 1)))
        paired = PenaltyConfig.paired_from([1.0, 1.0, 3.0], (0, 1), (1.5, 2.5, 0.0))
        plain = PenaltyConfig([1.5, 2.5, 3.0])
        np.testing.assert_array_equal(assemble_gamma(grams, paired), assemble_gamma(grams, plain))

    def test_nonpositive_penalty(self):
        with pytest.raises(DesignError, match="positive"):
            PenaltyConfig([1.0, 0.0])

    def test_paired_without_swap_gram(self):
        g = GramSet((np.eye(2), np.eye(2)), paired=(0, 1))
        with pytest.raises(DesignError, match="swap Gram"):
            assemble_gamma(g, PenaltyConfig([2.0, 2.0], cross=0.5))

    def test_count_mismatch(self):
        with pytest.raises(DesignError):
            assemble_gamma(GramSet((np.eye(2),)), PenaltyConfig([1.0, 2.0]))

    def test_omega_inverts_lambda_s(self):
        pen = PenaltyConfig.paired_from([1.0, 1.0], (0, 1), (0.7, 3.0, 2.0), "scaled")
        prod = pen.pair_inverse((0, 1)) @ pen.pair_block((0, 1))
        np.testing.assert_allclose(prod, np.eye(2), atol=1e-12)


class TestHatMatrix:
    def test_scalar(self):
        np.testing.assert_allclose(hat_matrix(np.array([[1.0]]), [1.0]).hat, [[0.5]])

    def test_zero_gamma(self):
        np.testing.assert_array_equal(hat_matrix(np.zeros((3, 3)), np.ones(3)).hat, np.zeros((3, 3)))

    def test_matches_naive(self):
        rng = np.random.default_rng(7)
        blocks = [rng.standard_normal((6, 8)), rng.standard_normal((6, 7))]
        lam = np.array([0.7, 3.0])
        w = rng.uniform(0.1, 1.0, 6)
        gamma = assemble_gamma(precompute_grams(BlockedDesign(tuple(blocks))), PenaltyConfig(lam))
        h = hat_matrix(gamma, w).hat
        ref = naive_hat(full_x(blocks), penalty_diag(blocks, lam), w)
        assert rel_err(h, ref) <= 1e-8
        assert np.max(np.abs(h - h.T)) <= 1e-10 * np.max(np.abs(h))

    def test_eigenvalues_in_unit_interval(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((9, 30))
        h = hat_matrix(x @ x.T / 2.0, np.ones(9)).hat
        ev = np.linalg.eigvalsh(h)
        assert ev.min() >= -1e-8 and ev.max() <= 1 + 1e-8

    def test_singular_system_raises(self):
        with pytest.raises(SolverError, match="condition"):
            hat_matrix(np.full((2, 2), 1e20), np.full(2, 1e10))

    def test_weights_floor(self):
        gamma = np.eye(2)
        h = hat_matrix(gamma, np.array([0.0, 1.0])).hat
        assert np.all(np.isfinite(h))
        # scalar identity: h = g / (1 + w g), with w clamped to 1e-10
        np.testing.assert_allclose(h[0, 0], 1.0 / (1.0 + 1e-10), rtol=1e-12)


class TestHatMatrixUnpenalized:
    def test_intercept_only_averages(self):
        n = 5
        fac = hat_matrix_unpenalized(np.zeros((n, n)), np.ones(n), np.ones((n, 1)))
        np.testing.assert_allclose(fac.hat, np.full((n, n), 1.0 / n), atol=1e-14)

    def test_empty_unpenalized_delegates(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((5, 4))
        w = rng.uniform(0.2, 1, 5)
        a = hat_matrix_unpenalized(x @ x.T, w, np.zeros((5, 0))).hat
        np.testing.assert_array_equal(a, hat_matrix(x @ x.T, w).hat)

    def test_matches_padded_naive(self):
        rng = np.random.default_rng(10)
        x1 = np.column_stack([np.ones(6), rng.standard_normal(6)])
        x2 = rng.standard_normal((6, 10))
        w = rng.uniform(0.1, 1.0, 6)
        fac = hat_matrix_unpenalized(x2 @ x2.T / 2.0, w, x1)
        ref = naive_hat(np.hstack([x1, x2]), np.r_[0.0, 0.0, np.full(10, 2.0)], w)
        assert rel_err(fac.hat, ref) <= 1e-8
        np.testing.assert_allclose(x1 @ fac.K + fac.gamma @ fac.M, fac.hat, atol=1e-12)

    def test_rank_deficient_names_columns(self):
        rng = np.random.default_rng(11)
        x1 = rng.standard_normal((6, 2))
        x1 = np.column_stack([x1, x1[:, 0] + x1[:, 1]])
        with pytest.raises(DesignError, match="offending columns"):
            BlockedDesign((rng.standard_normal((6, 3)),), x1)
        with pytest.raises(DesignError, match=r"offending columns: \[\d\]"):
            hat_matrix_unpenalized(np.eye(6), np.ones(6), x1)


class TestSubmatrix:
    def test_full_extraction(self):
        g = np.arange(9.0).reshape(3, 3)
        np.testing.assert_array_equal(submatrix_gamma(g, range(3), range(3)), g)

    def test_identity_offdiagonal(self):
        np.testing.assert_array_equal(submatrix_gamma(np.eye(3), [0], [1, 2]), np.zeros((1, 2)))

    def test_matches_recomputed(self):
        rng = np.random.default_rng(12)
        blocks = [rng.standard_normal((8, 5)), rng.standard_normal((8, 4))]
        lam = np.array([2.0, 0.5])
        gamma = assemble_gamma(precompute_grams(BlockedDesign(tuple(blocks))), PenaltyConfig(lam))
        out, inn = np.array([1, 4, 6]), np.array([0, 2, 3, 5, 7])
        ref = sum(b[out] @ b[inn].T / lmb for b, lmb in zip(blocks, lam))
        np.testing.assert_allclose(submatrix_gamma(gamma, out, inn), ref, atol=1e-12)

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            submatrix_gamma(np.eye(3), [3], [0])


class TestCvHatMatrix:
    def test_empty_out(self):
        assert cv_hat_matrix(np.eye(3), np.ones(2), [0, 1], []).shape == (0, 2)

    def test_identity(self):
        np.testing.assert_array_equal(cv_hat_matrix(np.eye(2), [1.0], [0], [1]), [[0.0]])

    def test_matches_naive_in_fold(self):
        rng = np.random.default_rng(13)
        x = rng.standard_normal((7, 12))
        lam = 1.7
        inn, out = np.array([0, 1, 3, 4, 6]), np.array([2, 5])
        w = rng.uniform(0.1, 1.0, 5)
        h = cv_hat_matrix(x @ x.T / lam, w, inn, out)
        xi = x[inn]
        ref = x[out] @ np.linalg.solve(lam * np.eye(12) + xi.T @ (w[:, None] * xi), xi.T)
        assert rel_err(h, ref) <= 1e-8

    def test_with_unpenalized(self):
        rng = np.random.default_rng(14)
        x1 = np.ones((9, 1))
        x2 = rng.standard_normal((9, 6))
        inn, out = np.arange(6), np.arange(6, 9)
        w = rng.uniform(0.2, 1.0, 6)
        h = cv_hat_matrix(x2 @ x2.T, w, inn, out, x1)
        xin = np.hstack([x1, x2])[inn]
        a = np.diag(np.r_[0.0, np.ones(6)]) + xin.T @ (w[:, None] * xin)
        ref = np.hstack([x1, x2])[out] @ np.linalg.solve(a, xin.T)
        assert rel_err(h, ref) <= 1e-8


class TestCoefficientsAndPrediction:
    def _fit(self, seed, p1=0, y=None):
        rng = np.random.default_rng(seed)
        blocks, lam, unpen = random_instance(rng, n=5, block_sizes=[5, 3], p1=p1)
        y = rng.standard_normal(5) if y is None else y
        ctx = RidgeContext.from_design(BlockedDesign(tuple(blocks), unpen))
        pen = PenaltyConfig(lam)
        return blocks, lam, unpen, y, ctx, pen, iwls_fit(ctx, pen, ResponseSpec.linear(y))

    def test_zero_response(self):
        *_, ctx, pen, fit = self._fit(15, y=np.zeros(5))
        np.testing.assert_array_equal(recover_coefficients(fit, ctx.design, pen), np.zeros(8))

    def test_direct_ridge(self):
        blocks, lam, _, y, ctx, pen, fit = self._fit(16)
        beta = recover_coefficients(fit, ctx.design, pen)
        ref = naive_ridge(full_x(blocks), penalty_diag(blocks, lam), y)
        assert rel_err(beta, ref) <= 1e-8
        np.testing.assert_allclose(full_x(blocks) @ beta, fit.eta, atol=1e-10)

    def test_intercept_weighted_mean(self):
        rng = np.random.default_rng(17)
        y = rng.standard_normal(6)
        ctx = RidgeContext.from_design(BlockedDesign((np.zeros((6, 2)),), np.ones((6, 1))))
        pen = PenaltyConfig([1.0])
        fit = iwls_fit(ctx, pen, ResponseSpec.linear(y))
        beta = recover_coefficients(fit, ctx.design, pen)
        np.testing.assert_allclose(beta[0], np.average(fit.linearized, weights=1 / fit.weights))
        np.testing.assert_allclose(beta[0], y.mean(), atol=1e-14)

    def test_not_converged_rejected(self):
        *_, ctx, pen, fit = self._fit(18)
        import dataclasses

        with pytest.raises(RuntimeError, match="converged"):
            recover_coefficients(dataclasses.replace(fit, converged=False), ctx.design, pen)

    def test_predict_training_row(self):
        blocks, *_, fit = self._fit(19)
        eta = predict_new(fit, [b[2:3] for b in blocks])
        np.testing.assert_allclose(eta, fit.eta[2:3], atol=1e-12)

    def test_predict_zero_blocks(self):
        blocks, *_, fit = self._fit(20)
        np.testing.assert_array_equal(predict_new(fit, [np.zeros((2, b.shape[1])) for b in blocks]),
                                      np.zeros(2))

    def test_predict_matches_coefficients(self):
        blocks, lam, unpen, y, ctx, pen, fit = self._fit(21, p1=2)
        rng = np.random.default_rng(99)
        new = [rng.standard_normal((3, b.shape[1])) for b in blocks]
        new_u = np.column_stack([np.ones(3), rng.standard_normal(3)])
        beta = fit.coefficients()
        np.testing.assert_allclose(predict_new(fit, new, new_u), full_x(new, new_u) @ beta,
                                   rtol=1e-8, atol=1e-12)

    def test_predict_column_mismatch(self):
        blocks, *_, fit = self._fit(22)
        with pytest.raises(DesignError, match="shape"):
            predict_new(fit, [np.zeros((2, 4)), np.zeros((2, 3))])

    def test_paired_coefficients(self):
        rng = np.random.default_rng(23)
        xa, xb = rng.standard_normal((6, 4)), rng.standard_normal((6, 4))
        y = rng.standard_normal(6)
        pen = PenaltyConfig.paired_from([1.0, 1.0], (0, 1), (1.0, 2.0, 0.5))
        ctx = RidgeContext.from_design(BlockedDesign((xa, xb), paired=(0, 1)))
        fit = iwls_fit(ctx, pen, ResponseSpec.linear(y))
        beta = fit.coefficients()
        lam_full = np.zeros((8, 8))
        l1, l2, l3 = pen.lambdas[0], pen.lambdas[1], pen.cross
        for j in range(4):
            lam_full[j, j], lam_full[4 + j, 4 + j] = l1, l2
            lam_full[j, 4 + j] = lam_full[4 + j, j] = -l3
        x = np.hstack([xa, xb])
        ref = np.linalg.solve(x.T @ x + lam_full, x.T @ y)
        assert rel_err(beta, ref) <= 1e-8


class TestParamTransform:
    def test_additive(self):
        assert paired_param_transform((1, 2, 3), "additive") == (4.0, 5.0, 3.0)

    @pytest.mark.parametrize("kind", ["additive", "scaled"])
    def test_zero_coupling(self, kind):
        assert paired_param_transform((1.5, 2.5, 0.0), kind) == (1.5, 2.5, 0.0)

    def test_scaled(self):
        np.testing.assert_allclose(paired_param_transform((1, 4, 0.5), "scaled"), (1.5, 6.0, 1.0))

    @pytest.mark.parametrize("kind", ["additive", "scaled"])
    def test_quadratic_form(self, kind):
        rng = np.random.default_rng(24)
        t1, t2, tc = 1.3, 0.4, 0.9
        l1, l2, l3 = paired_param_transform((t1, t2, tc), kind)
        lam_s = np.array([[l1, -l3], [-l3, l2]])
        for _ in range(20):
            b, bp = rng.standard_normal(2)
            if kind == "additive":
                direct = t1 * b**2 + t2 * bp**2 + tc * (b - bp) ** 2
            else:
                direct = t1 * b**2 + t2 * bp**2 + tc * (np.sqrt(t1) * b - np.sqrt(t2) * bp) ** 2
            v = np.array([b, bp])
            np.testing.assert_allclose(v @ lam_s @ v, direct, rtol=1e-12)
            np.testing.assert_allclose(l1 * b**2 + l2 * bp**2 - 2 * l3 * b * bp, direct, rtol=1e-12)

    def test_invalid(self):
        with pytest.raises(DesignError):
            paired_param_transform((1.0, -1.0, 0.0))
        with pytest.raises(DesignError):
            paired_param_transform((1.0, 1.0, -0.5))
        with pytest.raises(ValueError):
            paired_param_transform((1.0, 1.0, 0.5), "fused")
