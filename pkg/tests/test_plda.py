import numpy as np
import pytest

from asvbackend import fourcov, synth
from asvbackend.data import Embedding, SpeakerGroup
from asvbackend.exceptions import DomainError, NumericalError, ParameterError
from asvbackend.plda import (
    PldaModel,
    chunked_enroll_averages,
    enroll_average,
    fit_preprocessor,
    identity_preprocessor,
    interpolate_plda,
    length_normalize,
    plda_llr,
    speaker_factor,
    train_plda,
)

from conftest import make_group, random_plda


class TestLengthNormalize:
    def test_three_four_five(self):
        np.testing.assert_allclose(length_normalize(np.array([3.0, 4.0])), [0.6, 0.8])

    def test_unit_vector_unchanged(self, rng):
        v = rng.standard_normal(6)
        u = length_normalize(v)
        np.testing.assert_allclose(length_normalize(u), u, atol=1e-15)

    def test_zero_vector_rejected(self):
        with pytest.raises(DomainError):
            length_normalize(np.zeros(3))

    def test_scale_invariance(self, rng):
        for _ in range(20):
            v = rng.standard_normal(5)
            c = float(rng.uniform(0.01, 100.0))
            np.testing.assert_allclose(length_normalize(c * v), length_normalize(v), atol=1e-12)


class TestPreprocessor:
    def test_whitened_covariance_near_identity(self, rng):
        mean = np.array([1.0, -2.0, 0.5, 3.0])
        chol = np.array(
            [[1.0, 0, 0, 0], [0.5, 1.2, 0, 0], [-0.3, 0.1, 0.8, 0], [0.2, -0.4, 0.3, 1.5]]
        )
        data = mean + rng.standard_normal((10000, 4)) @ chol.T
        pre = fit_preprocessor(data)
        white = pre.whiten(data)
        np.testing.assert_allclose(np.cov(white, rowvar=False), np.eye(4), atol=5e-2)
        # exact identity when measured with the same divisor as the fit
        centered = white - white.mean(axis=0)
        np.testing.assert_allclose(centered.T @ centered / (len(data) - 1), np.eye(4), atol=1e-6)

    def test_already_white_data_is_fixed_point(self, rng):
        data = rng.standard_normal((20000, 3))
        pre = fit_preprocessor(data)
        np.testing.assert_allclose(pre.mean, np.zeros(3), atol=5e-2)
        np.testing.assert_allclose(pre.whitener, np.eye(3), atol=5e-2)

    def test_too_few_vectors(self, rng):
        with pytest.raises(NumericalError, match="at least 5"):
            fit_preprocessor(rng.standard_normal((3, 4)))

    def test_singular_covariance_names_rank(self, rng):
        flat = rng.standard_normal((50, 1)) @ rng.standard_normal((1, 4))
        with pytest.raises(NumericalError, match="rank 1 < dimension 4"):
            fit_preprocessor(flat)

    def test_within_class_whitening_option(self, rng):
        # speaker means spread widely along axis 0; within-class noise is
        # isotropic, so within-class whitening must ignore the spread
        groups = []
        for i in range(40):
            center = np.array([10.0 * i, 0.0, 0.0])
            groups.append(make_group(f"s{i}", center + rng.standard_normal((50, 3))))
        stacked = np.vstack([g.matrix() for g in groups])
        pre = fit_preprocessor(stacked, within_groups=groups)
        whitened = [pre.whiten(g.matrix()) for g in groups]
        pooled_within = np.zeros((3, 3))
        count = 0
        for rows in whitened:
            centered = rows - rows.mean(axis=0)
            pooled_within += centered.T @ centered
            count += len(rows)
        pooled_within /= count - len(groups)
        np.testing.assert_allclose(pooled_within, np.eye(3), atol=1e-10)
        total = fit_preprocessor(stacked)
        assert not np.allclose(total.whitener, pre.whitener, atol=1e-3)


class TestEnrollAverage:
    def test_single_member_is_normalized_member(self, rng):
        pre = identity_preprocessor(4)
        v = rng.standard_normal(4)
        out = enroll_average(make_group("s", [v]), pre)
        np.testing.assert_allclose(out.vector, length_normalize(v), atol=1e-15)

    def test_identical_members_idempotent(self, rng):
        pre = identity_preprocessor(4)
        v = rng.standard_normal(4)
        out = enroll_average(make_group("s", [v, v]), pre)
        np.testing.assert_allclose(out.vector, length_normalize(v), atol=1e-15)

    def test_orthogonal_pair_bisects(self):
        pre = identity_preprocessor(2)
        out = enroll_average(make_group("s", [np.array([1.0, 0.0]), np.array([0.0, 1.0])]), pre)
        np.testing.assert_allclose(out.vector, [1 / np.sqrt(2), 1 / np.sqrt(2)])

    def test_average_then_normalize_variant(self, rng):
        pre = identity_preprocessor(3)
        rows = [rng.standard_normal(3) * 5.0, rng.standard_normal(3)]
        out = enroll_average(make_group("s", rows), pre, normalize_members=False)
        np.testing.assert_allclose(out.vector, length_normalize(np.mean(rows, axis=0)), atol=1e-12)

    def test_chunked_averages(self, rng):
        pre = identity_preprocessor(3)
        group = make_group("s", [rng.standard_normal(3) for _ in range(7)])
        agg = chunked_enroll_averages(group, pre, 3)
        assert len(agg.members) == 3  # 3 + 3 + remainder of 1
        first = enroll_average(SpeakerGroup("s", group.members[:3]), pre)
        np.testing.assert_allclose(agg.members[0].vector, first.vector)


class TestTrainPlda:
    def test_recovers_known_model(self, rng):
        cfg = synth.GenConfig(
            dim=8, enroll_rank=2, test_rank=2, n_speakers=500,
            enroll_segments=10, test_segments=1, seed=31,
        )
        groups, _, truth = synth.sample_dataset(cfg)
        model = train_plda(groups, rank=2, iterations=15)
        true_between = truth.enroll_loadings @ truth.enroll_loadings.T
        rel_b = np.linalg.norm(model.between_cov() - true_between) / np.linalg.norm(true_between)
        rel_g = np.linalg.norm(model.residual_cov - truth.enroll_noise_cov) / np.linalg.norm(
            truth.enroll_noise_cov
        )
        assert rel_b < 0.10
        assert rel_g < 0.10

    def test_loglik_monotone(self, rng):
        cfg = synth.GenConfig(
            dim=6, enroll_rank=2, test_rank=2, n_speakers=80,
            enroll_segments=5, test_segments=1, seed=7,
        )
        groups, _, _ = synth.sample_dataset(cfg)
        lls = []
        train_plda(groups, rank=2, iterations=10, callback=lambda i, ll: lls.append(ll))
        assert len(lls) == 10
        assert all(b - a >= -1e-8 for a, b in zip(lls, lls[1:]))

    def test_mean_is_data_mean(self, rng):
        cfg = synth.GenConfig(
            dim=5, enroll_rank=2, test_rank=2, n_speakers=40,
            enroll_segments=4, test_segments=1, seed=3,
        )
        groups, _, _ = synth.sample_dataset(cfg)
        model = train_plda(groups, rank=2, iterations=2)
        stacked = np.vstack([g.matrix() for g in groups])
        np.testing.assert_allclose(model.mean, stacked.mean(axis=0), atol=1e-12)

    def test_zero_iterations_rejected(self, rng):
        groups = [make_group(f"s{i}", rng.standard_normal((3, 4))) for i in range(10)]
        with pytest.raises(ParameterError, match="iterations"):
            train_plda(groups, rank=2, iterations=0)

    def test_rank_above_dim_rejected(self, rng):
        groups = [make_group(f"s{i}", rng.standard_normal((3, 4))) for i in range(10)]
        with pytest.raises(ParameterError, match="rank"):
            train_plda(groups, rank=5)

    def test_too_little_data_rejected(self, rng):
        groups = [make_group(f"s{i}", rng.standard_normal((2, 8))) for i in range(2)]
        with pytest.raises(ParameterError, match="d \\+ r"):
            train_plda(groups, rank=4)

    def test_side_bundle_round_trip(self, rng, tmp_path):
        from asvbackend.modelio import load_plda_side, save_plda_side

        model = random_plda(rng, 5, 2)
        pre = fit_preprocessor(rng.standard_normal((40, 5)))
        path = tmp_path / "side.npz"
        save_plda_side(path, model, pre)
        back, pre_back = load_plda_side(path)
        np.testing.assert_array_equal(back.mean, model.mean)
        np.testing.assert_array_equal(back.speaker_loadings, model.speaker_loadings)
        np.testing.assert_array_equal(back.residual_cov, model.residual_cov)
        np.testing.assert_array_equal(pre_back.whitener, pre.whitener)

    def test_degenerate_identical_vectors_warn_not_crash(self):
        v = np.array([1.0, 2.0, 3.0])
        groups = [SpeakerGroup(f"s{i}", (Embedding(f"s{i}-u0", v),)) for i in range(8)]
        with pytest.warns(RuntimeWarning):
            model = train_plda(groups, rank=1, iterations=2)
        assert np.all(np.isfinite(model.residual_cov))
        np.testing.assert_array_less(0.0, np.linalg.eigvalsh(model.residual_cov))


class TestSpeakerFactor:
    def test_sample_at_mean_gives_zero(self, rng):
        model = random_plda(rng, 4, 2)
        factor = speaker_factor(model, make_group("s", [model.mean.copy()]))
        np.testing.assert_allclose(factor, np.zeros(2), atol=1e-12)

    def test_scalar_case(self):
        model = PldaModel(np.zeros(1), np.ones((1, 1)), np.ones((1, 1)))
        factor = speaker_factor(model, make_group("s", [np.array([2.0])]))
        np.testing.assert_allclose(factor, [1.0])

    def test_matches_dense_formula(self, rng):
        model = random_plda(rng, 4, 2)
        rows = rng.standard_normal((3, 4)) + model.mean
        got = speaker_factor(model, make_group("s", rows))
        # direct dense evaluation
        gamma_inv = np.linalg.inv(model.residual_cov)
        phi = model.speaker_loadings
        precision = 3 * phi.T @ gamma_inv @ phi + np.eye(2)
        expected = np.linalg.inv(precision) @ phi.T @ gamma_inv @ (rows - model.mean).sum(axis=0)
        np.testing.assert_allclose(got, expected, atol=1e-10)

    def test_shrinkage_and_precision_growth(self, rng):
        model = random_plda(rng, 5, 2)
        w = model.mean + rng.standard_normal(5)
        posterior = speaker_factor(model, make_group("s", [w]))
        gamma_inv = np.linalg.inv(model.residual_cov)
        phi = model.speaker_loadings
        base = phi.T @ gamma_inv @ phi
        least_squares = np.linalg.solve(base, phi.T @ gamma_inv @ (w - model.mean))
        assert np.linalg.norm(posterior) <= np.linalg.norm(least_squares) + 1e-12
        for n in range(1, 5):
            step = (np.eye(2) + (n + 1) * base) - (np.eye(2) + n * base)
            assert np.linalg.eigvalsh(step).min() >= -1e-12


class TestPldaLlr:
    def test_centered_pair_scores_constant(self, rng):
        model = random_plda(rng, 3, 2)
        got = plda_llr(model, model.mean, model.mean)
        between = model.between_cov()
        marginal = between + model.residual_cov
        same = np.block([[marginal, between], [between, marginal]])
        sign, logdet_same = np.linalg.slogdet(same)
        assert sign > 0
        _, logdet_marginal = np.linalg.slogdet(marginal)
        expected = -0.5 * (logdet_same - 2.0 * logdet_marginal)
        np.testing.assert_allclose(got, expected, atol=1e-10)

    def test_matches_collapsed_two_sided_kernel(self, rng):
        model = random_plda(rng, 4, 2)
        kernel = fourcov.symmetric_kernel(model)
        for _ in range(100):
            a = model.mean + rng.standard_normal(4)
            b = model.mean + rng.standard_normal(4)
            assert abs(plda_llr(model, a, b) - fourcov.score_trial(kernel, a, b)) < 1e-9

    def test_targets_score_above_nontargets_on_average(self, rng):
        cfg = synth.GenConfig(
            dim=6, enroll_rank=2, test_rank=2, n_speakers=60,
            enroll_segments=2, test_segments=2, seed=17,
        )
        groups, _, truth = synth.sample_dataset(cfg)
        model = PldaModel(truth.enroll_mean, truth.enroll_loadings, truth.enroll_noise_cov)
        tar, non = [], []
        for i, g in enumerate(groups):
            a, b = g.members[0].vector, g.members[1].vector
            tar.append(plda_llr(model, a, b))
            other = groups[(i + 1) % len(groups)].members[1].vector
            non.append(plda_llr(model, a, other))
        assert np.mean(tar) > np.mean(non)


class TestInterpolate:
    def test_endpoints(self, rng):
        a = random_plda(rng, 4, 2)
        b = random_plda(rng, 4, 2)
        at_one = interpolate_plda(a, b, 1.0)
        np.testing.assert_allclose(at_one.between_cov(), a.between_cov(), atol=1e-10)
        np.testing.assert_allclose(at_one.residual_cov, a.residual_cov, atol=1e-10)
        at_zero = interpolate_plda(a, b, 0.0)
        np.testing.assert_allclose(at_zero.between_cov(), b.between_cov(), atol=1e-10)
        np.testing.assert_allclose(at_zero.residual_cov, b.residual_cov, atol=1e-10)

    def test_full_rank_half_mix_exact(self, rng):
        a = random_plda(rng, 4, 4)
        b = random_plda(rng, 4, 4)
        mixed = interpolate_plda(a, b, 0.5)
        expected = 0.5 * a.between_cov() + 0.5 * b.between_cov()
        np.testing.assert_allclose(mixed.between_cov(), expected, atol=1e-12)
        np.testing.assert_allclose(mixed.mean, 0.5 * (a.mean + b.mean), atol=1e-12)

    def test_psd_preserved_across_alphas(self, rng):
        a = random_plda(rng, 5, 2)
        b = random_plda(rng, 5, 2)
        for alpha in np.linspace(0.0, 1.0, 7):
            mixed = interpolate_plda(a, b, float(alpha))
            assert np.linalg.eigvalsh(mixed.between_cov()).min() >= -1e-10
            assert np.linalg.eigvalsh(mixed.residual_cov).min() > 0.0

    def test_alpha_out_of_range(self, rng):
        a = random_plda(rng, 3, 2)
        with pytest.raises(ParameterError, match="alpha"):
            interpolate_plda(a, a, 1.5)

    def test_total_covariance_preserved_at_lower_rank(self, rng):
        a = random_plda(rng, 6, 2)
        b = random_plda(rng, 6, 2)
        mixed = interpolate_plda(a, b, 0.3)
        want = 0.3 * (a.between_cov() + a.residual_cov) + 0.7 * (b.between_cov() + b.residual_cov)
        np.testing.assert_allclose(
            np.trace(mixed.between_cov() + mixed.residual_cov), np.trace(want), rtol=1e-10
        )
