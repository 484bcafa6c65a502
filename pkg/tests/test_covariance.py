import logging

import numpy as np
import pytest

from hdgcm.covariance import (
    PairSet,
    TemporalMoments,
    compute_annihilators,
    estimate_all,
    estimate_kappa,
    estimate_spatial_diag,
    estimate_spatial_offdiag,
    estimate_temporal,
    estimate_zeta,
    pair_floor,
    psd_repair,
    select_top_pairs,
)
from hdgcm.errors import EstimationError, RankDeficientError
from hdgcm.model import (
    CoefficientMatrix,
    CovarianceComponents,
    GrowthCurveDataset,
    build_growth_basis,
    center_responses,
)
from hdgcm.simulation import (
    GroundTruth,
    SimulationConfig,
    make_truth,
    replication_rng,
    sample_dataset,
)
from hdgcm.studies import run_consistency_study, run_replication_study

import oracles
from conftest import random_dataset


def _basis(*gs):
    g = np.asarray(gs, dtype=float)
    return build_growth_basis(GrowthCurveDataset(np.zeros((len(g), 1, g.shape[1])), g))


class TestSpatialOffdiag:
    def test_zero_responses(self):
        _, off = estimate_spatial_offdiag(np.zeros((5, 3, 4)))
        np.testing.assert_array_equal(off, 0.0)

    def test_hand_example(self):
        centered = np.array([[1.0, 2.0], [-1.0, -2.0]]).reshape(2, 2, 1)
        mom, off = estimate_spatial_offdiag(centered)
        np.testing.assert_allclose(mom.sigma1, [[1, 2], [2, 4]])
        np.testing.assert_allclose(off, [[0, 2], [2, 0]])

    def test_matches_loop_oracle(self, rng):
        d = random_dataset(rng, N=4, R=3, T=3)
        c = center_responses(d)
        mom, off = estimate_spatial_offdiag(c, keep_per_subject=True)
        np.testing.assert_allclose(mom.sigma1, oracles.sigma1(c), atol=1e-13)
        np.testing.assert_allclose(mom.per_subject.mean(axis=0), mom.sigma1, atol=1e-13)
        assert np.all(np.diag(off) == 0)

    def test_error_shrinks_with_sample_size(self):
        errs = {}
        for N in (100, 400):
            cfg = SimulationConfig(N=N, T=4, R=10, omega=0.0, xi_sparsity=0.0, seed=3)
            e = []
            for rep in range(8):
                rng = replication_rng(cfg.seed, rep)
                truth = make_truth(cfg, rng)
                _, off = estimate_spatial_offdiag(center_responses(sample_dataset(cfg, truth, rng)))
                true_off = truth.components.sigma_R - np.diag(np.diag(truth.components.sigma_R))
                e.append(np.abs(off - true_off).max())
            errs[N] = np.mean(e)
        # a quadrupled sample should roughly halve the error
        assert 0.3 < errs[400] / errs[100] < 0.75


class TestTopPairs:
    def test_sorting_example(self):
        off = np.zeros((3, 3))
        off[0, 1], off[0, 2], off[1, 2] = 0.5, 0.2, 0.4
        off = off + off.T
        ps = select_top_pairs(off, 2)
        assert ps.pairs.tolist() == [[0, 1], [1, 2]]
        np.testing.assert_allclose(ps.offdiag_values, [0.5, 0.4])
        assert ps.K == 2

    def test_ties_lexicographic(self):
        off = np.ones((4, 4)) - np.eye(4)
        assert select_top_pairs(off, 3).pairs.tolist() == [[0, 1], [0, 2], [0, 3]]

    def test_uses_absolute_value(self):
        off = np.array([[0, -0.9, 0.1], [-0.9, 0, 0.3], [0.1, 0.3, 0]])
        assert select_top_pairs(off, 1).pairs.tolist() == [[0, 1]]

    def test_too_many_pairs(self):
        with pytest.raises(ValueError):
            select_top_pairs(np.ones((3, 3)), 4)

    def test_default_K(self):
        assert select_top_pairs(np.ones((5, 5)) - np.eye(5)).K == 5
        assert select_top_pairs(np.ones((2, 2)) - np.eye(2)).K == 1

    def test_hub_truth_pairs_stay_within_groups(self):
        cfg = SimulationConfig(R=50, spatial_kind="hub")
        truth = make_truth(cfg, replication_rng(11, 0))
        S = truth.components.sigma_R
        ps = select_top_pairs(S - np.diag(np.diag(S)), 50)
        assert np.all(ps.pairs[:, 0] // 5 == ps.pairs[:, 1] // 5)
        assert oracles.top_pairs(S - np.diag(np.diag(S)), 50) == [tuple(p) for p in ps.pairs]


class TestTemporal:
    def test_exact_cancellation(self, rng):
        T, N = 3, 5
        a = rng.standard_normal((N, T))
        centered = np.stack([a, 3.0 * a], axis=1)
        M = a.T @ a / N
        ps = PairSet(np.array([[0, 1]]), np.array([3.0]))
        np.testing.assert_allclose(estimate_temporal(centered, ps), M, atol=1e-14)

    def test_single_pair_division(self):
        L = np.linalg.cholesky(np.array([[2.0, 1.0], [1.0, 2.0]]))
        rows = np.sqrt(2.0) * L.T
        centered = np.stack([rows, rows], axis=1)
        ps = PairSet(np.array([[0, 1]]), np.array([2.0]))
        np.testing.assert_allclose(estimate_temporal(centered, ps), [[1, 0.5], [0.5, 1]])

    def test_low_pairs_dropped_with_warning(self, rng, caplog):
        centered = rng.standard_normal((6, 3, 3))
        ps = PairSet(np.array([[0, 1], [0, 2]]), np.array([0.5, 1e-12]))
        diag = {}
        with caplog.at_level(logging.WARNING, logger="hdgcm.covariance"):
            out = estimate_temporal(centered, ps, floor=1e-6, diagnostics=diag)
        assert diag["dropped_pairs"] == [(0, 2)]
        assert "dropping 1 region pair" in caplog.text
        only = estimate_temporal(centered, PairSet(ps.pairs[:1], ps.offdiag_values[:1]))
        np.testing.assert_allclose(out, only)

    def test_all_pairs_dropped(self, rng):
        ps = PairSet(np.array([[0, 1]]), np.array([1e-12]))
        with pytest.raises(EstimationError):
            estimate_temporal(rng.standard_normal((4, 2, 3)), ps, floor=1e-6)

    def test_pair_floor(self):
        off = np.array([[0, 2.0, 4.0], [2.0, 0, 6.0], [4.0, 6.0, 0]])
        assert pair_floor(off) == pytest.approx(4e-3)
        assert pair_floor(np.zeros((3, 3))) == 1e-8

    def test_weighted_pooling(self, rng):
        c = rng.standard_normal((8, 3, 3))
        ps = PairSet(np.array([[0, 1], [1, 2]]), np.array([0.5, -2.0]))
        s = [oracles.sigma2(c, 0, 1), oracles.sigma2(c, 1, 2)]
        expected = (s[0] - s[1]) / 2.5
        np.testing.assert_allclose(estimate_temporal(c, ps, pooling="weighted"),
                                   (expected + expected.T) / 2, atol=1e-13)
        with pytest.raises(ValueError):
            estimate_temporal(c, ps, pooling="median")

    @pytest.mark.xfail(strict=True, reason="selection and ratio noise from the random effects "
                                           "keeps the max error near 0.5 at N=200; see README")
    def test_ar_design_accuracy(self):
        cfg = SimulationConfig(N=200, T=4, R=50, temporal_kind="autoregressive", seed=21)
        hits = 0
        for rep in range(100):
            rng = replication_rng(cfg.seed, rep)
            truth = make_truth(cfg, rng)
            comp = estimate_all(sample_dataset(cfg, truth, rng))
            hits += np.abs(comp.sigma_T - truth.components.sigma_T).max() < 0.15
        assert hits >= 95


class TestAnnihilators:
    def test_hand_example(self):
        ann = compute_annihilators(_basis([0, 1, 2]))
        np.testing.assert_allclose(ann.u[0], np.array([1, -2, 1]) / np.sqrt(6), atol=1e-12)
        np.testing.assert_allclose(ann.v1[0], [5 / 6, 1 / 3, -1 / 6], atol=1e-12)
        np.testing.assert_allclose(ann.v2[0], [-1 / 2, 0, 1 / 2], atol=1e-12)

    def test_repeated_time(self):
        ann = compute_annihilators(_basis([0, 0, 1]))
        np.testing.assert_allclose(ann.u[0], np.array([1, -1, 0]) / np.sqrt(2), atol=1e-12)

    def test_invariants(self, rng):
        g = np.sort(rng.uniform(size=(10, 5)), axis=1)
        basis = _basis(*g)
        ann = compute_annihilators(basis)
        G = basis.per_subject
        np.testing.assert_allclose(np.linalg.norm(ann.u, axis=1), 1.0, atol=1e-10)
        assert np.abs(np.einsum("nt,ntk->nk", ann.u, G)).max() < 1e-10
        np.testing.assert_allclose(np.einsum("ntj,ntk->njk", ann.v, G),
                                   np.broadcast_to(np.eye(2), (10, 2, 2)), atol=1e-10)

    def test_matches_cross_product_oracle(self, rng):
        g = rng.uniform(size=(6, 3))
        ann = compute_annihilators(_basis(*g))
        for i in range(6):
            np.testing.assert_allclose(ann.u[i], oracles.annihilator_T3(g[i]), atol=1e-12)
            np.testing.assert_allclose(ann.v[i], oracles.dual_vectors(g[i]), atol=1e-12)

    def test_rank_deficient(self):
        basis = build_growth_basis(GrowthCurveDataset(np.zeros((1, 1, 3)), [[0.0, 1.0, 2.0]]))
        bad = type(basis)(np.stack([np.ones((1, 3)), np.full((1, 3), 2.0)], axis=2))
        with pytest.raises(RankDeficientError):
            compute_annihilators(bad)


def _moments_from(blocks):
    return TemporalMoments(np.asarray(blocks, dtype=float))


class TestKappaAndZeta:
    def setup_method(self):
        self.g = np.array([[0.0, 1.0, 2.0], [0.1, 0.5, 0.7], [0.0, 0.3, 1.0]])
        self.basis = _basis(*self.g)
        self.ann = compute_annihilators(self.basis)
        B = np.array([[2.0, 0.3, 0.1], [0.3, 1.0, 0.2], [0.1, 0.2, 0.5]])
        self.sigmaT = B * 3 / np.trace(B)

    def test_kappa_proportional(self):
        m = _moments_from([2 * self.sigmaT] * 3)
        assert estimate_kappa(m, self.sigmaT, self.ann) == pytest.approx(2.0)

    def test_kappa_ignores_growth_terms(self):
        zeta = np.array([[1.5, 0.75], [0.75, 2.25]])
        G = self.basis.per_subject
        m = _moments_from(G @ zeta @ np.swapaxes(G, 1, 2) + 3 * self.sigmaT)
        assert estimate_kappa(m, self.sigmaT, self.ann) == pytest.approx(3.0, abs=1e-12)

    def test_kappa_nonpositive_denominator(self):
        m = _moments_from([np.eye(3)] * 3)
        with pytest.raises(EstimationError):
            estimate_kappa(m, -np.eye(3), self.ann)

    def test_zeta_zero(self):
        m = _moments_from([1.7 * self.sigmaT] * 3)
        z = estimate_zeta(m, self.sigmaT, 1.7, self.ann)
        np.testing.assert_allclose(z, 0.0, atol=1e-12)

    def test_zeta_extracts_matrix(self):
        M = np.diag([1.0, 2.0])
        G = self.basis.per_subject
        m = _moments_from(G @ M @ np.swapaxes(G, 1, 2) + 1.3 * self.sigmaT)
        np.testing.assert_allclose(estimate_zeta(m, self.sigmaT, 1.3, self.ann), M, atol=1e-12)

    def test_zeta_repair_recorded(self):
        M = np.diag([1.0, -2.0])
        G = self.basis.per_subject
        m = _moments_from(G @ M @ np.swapaxes(G, 1, 2) + self.sigmaT)
        diag = {}
        z = estimate_zeta(m, self.sigmaT, 1.0, self.ann, diagnostics=diag)
        assert diag["sigma_zeta_repaired"]
        np.testing.assert_allclose(z, np.diag([1.0, 0.0]), atol=1e-12)
        np.testing.assert_allclose(diag["sigma_zeta_raw"], M, atol=1e-12)

    def test_kappa_consistent(self):
        errs = {}
        for N in (200, 3000):
            cfg = SimulationConfig(N=N, T=4, R=50, omega=0.0, xi_sparsity=0.0, seed=8)
            e = []
            for rep in range(3):
                rng = replication_rng(cfg.seed, rep)
                comp = estimate_all(sample_dataset(cfg, make_truth(cfg, rng), rng))
                e.append(abs(comp.kappa - 1.0))
            errs[N] = np.mean(e)
        assert errs[3000] < 0.1
        assert errs[3000] < errs[200]

    @pytest.mark.xfail(strict=True, reason="kappa is over-estimated at N=200, which pulls the "
                                           "intercept variance of Sigma_zeta down; see README")
    def test_zeta_simulation_accuracy(self):
        cfg = SimulationConfig(N=200, T=4, R=50, seed=22)
        hits = 0
        for rep in range(100):
            rng = replication_rng(cfg.seed, rep)
            truth = make_truth(cfg, rng)
            comp = estimate_all(sample_dataset(cfg, truth, rng))
            hits += np.abs(comp.sigma_zeta - truth.components.sigma_zeta).max() < 0.3
        assert hits >= 90


class TestSpatialDiag:
    def _moments(self, s1):
        mom, _ = estimate_spatial_offdiag(np.zeros((2, len(s1), 1)))
        return type(mom)(np.asarray(s1, dtype=float))

    def test_scaled_identity(self):
        out = estimate_spatial_diag(self._moments(2 * np.eye(4)), 0.7)
        np.testing.assert_allclose(out, 0.7)

    def test_unchanged_when_mean_matches(self):
        s1 = np.diag([1.0, 2.0, 3.0])
        np.testing.assert_allclose(estimate_spatial_diag(self._moments(s1), 2.0), [1, 2, 3])

    def test_floor(self, caplog):
        s1 = np.diag([0.1, 5.0])
        diag = {}
        with caplog.at_level(logging.WARNING, logger="hdgcm.covariance"):
            out = estimate_spatial_diag(self._moments(s1), 0.5, diagnostics=diag)
        assert out[0] == 1e-6
        assert diag["floored_regions"] == [0]
        assert "flooring 1 region" in caplog.text


class TestPsdRepair:
    def test_clamps_negative(self):
        out = psd_repair(np.diag([2.0, -1.0]))
        np.testing.assert_allclose(out, np.diag([2.0, 0.0]))

    def test_passthrough(self):
        a = np.array([[2.0, 0.5], [0.5, 1.0]])
        assert np.array_equal(psd_repair(a), a)


class TestEstimateAll:
    @staticmethod
    def _recovers(sigma_R, N=500, names=("sigma_R", "sigma_T", "sigma_zeta")):
        R = len(sigma_R)
        cfg = SimulationConfig(N=N, T=4, R=R, p=1, q=1, omega=0.0, xi_sparsity=0.0)
        comp = CovarianceComponents(sigma_R, np.eye(4), np.zeros((2, 2)), np.trace(sigma_R) / R)
        truth = GroundTruth(comp, CoefficientMatrix(np.zeros((R, 5)), 1, 1),
                            np.ones((R, 4), dtype=bool), np.linalg.inv(sigma_R))
        rng = replication_rng(5, 0)
        est = estimate_all(sample_dataset(cfg, truth, rng))
        for name in names:
            assert np.abs(getattr(est, name) - getattr(comp, name)).max() < 0.1, name
        assert abs(est.kappa - comp.kappa) < 0.1

    @pytest.mark.xfail(strict=True, reason="with Sigma_R = I every region pair is pure noise, "
                                           "so the temporal covariance is not identified")
    def test_identity_truth(self):
        self._recovers(np.eye(5))

    def test_correlated_truth(self):
        # Sigma_zeta is left out: uniform visit times give some subjects nearly
        # collinear G_i, which makes its moment estimate heavy tailed
        self._recovers(0.5 * np.eye(5) + 0.5, N=4000, names=("sigma_R", "sigma_T"))

    def test_trace_and_kappa(self, rng):
        est = estimate_all(random_dataset(rng, N=30, R=6, T=4))
        assert np.trace(est.sigma_T) == pytest.approx(4.0, abs=1e-10)
        if not est.diagnostics.get("floored_regions"):
            assert est.kappa == pytest.approx(np.trace(est.sigma_R) / 6, abs=1e-8)

    def test_blocks_factor(self, rng):
        from hdgcm.model import assemble_all_blocks
        d = random_dataset(rng, N=30, R=6, T=4)
        np.linalg.cholesky(assemble_all_blocks(estimate_all(d), build_growth_basis(d)))

    def test_noise_free_intercepts_cannot_identify_temporal(self):
        y = np.broadcast_to(np.arange(3.0)[None, :, None], (5, 3, 3)).copy()
        g = np.tile([0.0, 1.0, 2.0], (5, 1))
        with pytest.raises(EstimationError) as info:
            estimate_all(GrowthCurveDataset(y, g))
        assert info.value.step.startswith("step 2")

    def test_matches_oracle(self, rng):
        for _ in range(5):
            d = random_dataset(rng, N=4, R=3, T=3)
            est = estimate_all(d)
            ref = oracles.estimate_all(np.array(d.responses), np.array(d.time_values))
            for key, val in ref.items():
                np.testing.assert_allclose(getattr(est, key), val, atol=1e-10, rtol=0)

    def test_paired_sample_size_improvement(self):
        cfg = SimulationConfig(N=200, T=4, R=50, seed=31)
        frac, _, _ = run_consistency_study(cfg, n_pairs=100, n_small=100)
        assert frac >= 0.9

    def test_bias_magnitude_comparable_to_reference(self):
        cfg = SimulationConfig(N=200, T=4, R=50, omega=0.05, seed=32)
        rep = run_replication_study(cfg, "bias", 20)
        assert 0.07 <= rep.metrics["cov_bias"] <= 0.16
