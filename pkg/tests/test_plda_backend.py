from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import multivariate_normal

import plda_backend
from backend_errors import (
    DataError,
    DegenerateVectorError,
    EmptyInputError,
    InsufficientDataError,
    ParseError,
    ShapeError,
    SingularityError,
)
from conftest import pinned_1d_corpus, plain_model, random_spd, two_cov_corpus
from plda_backend import (
    EnrollStat,
    PreprocessChain,
    apply_preprocess,
    enroll,
    enroll_all,
    fit_plda_em,
    fit_preprocess,
    load_enroll_stats,
    load_model,
    save_enroll_stats,
    save_model,
    score_diagonal,
    score_stacked,
    score_trial,
    score_trials,
)
from trial_protocol import EmbeddingSet, TrialList


def brute_force_llr(model, e, t):
    r = model.dim
    total = model.phi_b + model.phi_w
    zero = np.zeros((r, r))
    z = np.concatenate([e, t])
    mean = np.concatenate([model.mu, model.mu])
    same = multivariate_normal(mean, np.block([[total, model.phi_b], [model.phi_b, total]])).logpdf(z)
    diff = multivariate_normal(mean, np.block([[total, zero], [zero, total]])).logpdf(z)
    return same - diff


def normalized(embeddings):
    x = embeddings.vectors - embeddings.vectors.mean(axis=0)
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def fisher_ratio(x, codes, projection):
    """trace(W^-1 B) of the projected scatters."""
    y = x @ projection.T
    means = np.vstack([y[codes == c].mean(axis=0) for c in np.unique(codes)])
    within = sum(((y[codes == c] - means[c]).T @ (y[codes == c] - means[c])) for c in np.unique(codes))
    counts = np.bincount(codes)
    offsets = means - y.mean(axis=0)
    between = (offsets * counts[:, None]).T @ offsets
    return float(np.trace(np.linalg.solve(within, between)))


class TestPreprocess:
    def test_lda_axis_follows_separation(self):
        points = [(-5, 1), (-5, -1), (-6, 1), (-6, -1), (5, 1), (5, -1), (6, 1), (6, -1)]
        speakers = ["a"] * 4 + ["b"] * 4
        embeddings = EmbeddingSet.from_records(2, [f"u{i}" for i in range(8)], points, speakers)
        chain = fit_preprocess(embeddings, target_dim=1)
        np.testing.assert_allclose(np.abs(chain.lda[0]), [1.0, 0.0], atol=1e-8)
        assert chain.output_dim == 1

    def test_too_few_speakers(self, rng):
        spk = [f"s{i // 2}" for i in range(40)]
        embeddings = EmbeddingSet.from_records(
            160, [f"u{i}" for i in range(40)], rng.standard_normal((40, 160)), spk,
        )
        with pytest.raises(InsufficientDataError, match="151 speakers"):
            fit_preprocess(embeddings, target_dim=150)

    def test_target_dim_above_input(self, small_corpus):
        with pytest.raises(ShapeError):
            fit_preprocess(small_corpus, target_dim=5)

    def test_lda_beats_random_projections(self, rng):
        phi_b = np.diag([4.0, 1.0, 0.5, 0.2, 0.1])
        corpus = two_cov_corpus(rng, phi_b, 0.3 * np.eye(5), n_speakers=3, utts_per_speaker=40, mu=np.full(5, 3.0))
        chain = fit_preprocess(corpus, target_dim=2)
        x = normalized(corpus)
        codes = np.repeat(np.arange(3), 40)
        best = fisher_ratio(x, codes, chain.lda)
        for _ in range(100):
            assert best >= fisher_ratio(x, codes, rng.standard_normal((2, 5))) * (1 - 1e-6)

    def test_identity_chain_unit_norm(self):
        chain = PreprocessChain(np.zeros(2), np.eye(2), length_norm=True)
        embeddings = EmbeddingSet.from_records(2, ["u1"], [[3.0, 4.0]])
        np.testing.assert_allclose(apply_preprocess(chain, embeddings).vectors, [[0.6, 0.8]], rtol=1e-15)

    def test_vector_at_global_mean(self):
        chain = PreprocessChain(np.array([1.0, 2.0]), np.eye(2), length_norm=True)
        embeddings = EmbeddingSet.from_records(2, ["ok", "flat"], [[0.0, 0.0], [1.0, 2.0]])
        with pytest.raises(DegenerateVectorError) as excinfo:
            apply_preprocess(chain, embeddings)
        assert excinfo.value.utt_id == "flat"

    def test_output_dim_and_labels(self, small_corpus):
        chain = fit_preprocess(small_corpus, target_dim=2)
        batch = small_corpus.subset(np.arange(10))
        projected = apply_preprocess(chain, batch)
        assert projected.vectors.shape == (10, chain.output_dim)
        assert projected.labels.equals(batch.labels)

    def test_dimension_mismatch(self, small_corpus):
        with pytest.raises(ShapeError):
            apply_preprocess(PreprocessChain.identity(3), small_corpus)


class TestEmTraining:
    def test_recovers_one_dim_parameters(self, rng):
        model = fit_plda_em(pinned_1d_corpus(rng), iters=20)
        assert model.phi_b[0, 0] == pytest.approx(2.0, abs=0.2)
        assert model.phi_w[0, 0] == pytest.approx(1.0, abs=0.1)

    def test_zero_iterations_is_moment_init(self, small_corpus):
        model = fit_plda_em(small_corpus, iters=0, eps_reg=0.0)
        x = small_corpus.vectors
        mu = x.mean(axis=0)
        speaker_means = x.reshape(60, 6, 4).mean(axis=1)
        offsets = speaker_means - mu
        residual = x - np.repeat(speaker_means, 6, axis=0)
        np.testing.assert_allclose(model.mu, mu, atol=1e-12)
        np.testing.assert_allclose(model.phi_b, offsets.T @ offsets / 60, atol=1e-12)
        np.testing.assert_allclose(model.phi_w, residual.T @ residual / 360, atol=1e-12)

    def test_all_singletons(self, rng):
        corpus = two_cov_corpus(rng, np.eye(2), np.eye(2), n_speakers=10, utts_per_speaker=1)
        with pytest.raises(InsufficientDataError):
            fit_plda_em(corpus)

    def test_single_speaker(self, rng):
        corpus = two_cov_corpus(rng, np.eye(2), np.eye(2), n_speakers=1, utts_per_speaker=5)
        with pytest.raises(InsufficientDataError):
            fit_plda_em(corpus)

    @pytest.mark.parametrize("dim,seed", [(2, 1), (2, 2), (8, 3), (8, 4), (16, 5)])
    def test_log_likelihood_never_decreases(self, dim, seed):
        rng = np.random.default_rng(seed)
        phi_b, phi_w = random_spd(rng, dim, 1.0), random_spd(rng, dim, 0.5)
        corpus = EmbeddingSet.concat([
            two_cov_corpus(rng, phi_b, phi_w, n_speakers=60, utts_per_speaker=3, prefix="a"),
            two_cov_corpus(rng, phi_b, phi_w, n_speakers=40, utts_per_speaker=8, prefix="b"),
            two_cov_corpus(rng, phi_b, phi_w, n_speakers=10, utts_per_speaker=1, prefix="c"),
        ])
        history = []
        model = fit_plda_em(corpus, iters=20, history=history)
        assert len(history) == 21
        assert all(b >= a - 1e-8 for a, b in zip(history, history[1:]))
        assert history[-1] == pytest.approx(plda_backend.plda_log_likelihood(model, corpus), abs=1e-6)

    def test_diag_cache_identities(self, small_corpus):
        model = fit_plda_em(small_corpus)
        transform, psi = model.diag_cache
        np.testing.assert_allclose(transform @ model.phi_w @ transform.T, np.eye(4), atol=1e-8)
        np.testing.assert_allclose(transform @ model.phi_b @ transform.T, np.diag(psi), atol=1e-8)


class TestEnroll:
    def test_single_utterance(self):
        model = plain_model(np.zeros(2), np.eye(2), np.eye(2))
        stat = enroll(model, [[0.3, -0.2]], "m1")
        np.testing.assert_array_equal(stat.mean_embedding, [0.3, -0.2])
        assert stat.n_sessions == 1

    def test_two_utterances(self):
        model = plain_model(np.zeros(2), np.eye(2), np.eye(2))
        stat = enroll(model, [[1.0, 0.0], [0.0, 1.0]], "m1")
        np.testing.assert_allclose(stat.mean_embedding, [0.5, 0.5])
        assert stat.n_sessions == 2

    def test_componentwise_mean(self, rng, random_model):
        x = rng.standard_normal((3, 8))
        np.testing.assert_allclose(enroll(random_model, x, "m").mean_embedding, x.mean(axis=0), rtol=1e-15)

    def test_empty(self, random_model):
        with pytest.raises(EmptyInputError):
            enroll(random_model, np.zeros((0, 8)), "m")

    def test_wrong_dimension(self, random_model):
        with pytest.raises(ShapeError):
            enroll(random_model, np.zeros((2, 3)), "m")

    def test_enroll_all_missing_utterance(self, random_model, rng):
        embeddings = EmbeddingSet.from_records(8, ["u1"], rng.standard_normal((1, 8)))
        with pytest.raises(DataError, match="not found"):
            enroll_all(random_model, embeddings, {"m": ["u1", "u2"]})


class TestScoring:
    def test_hand_value(self):
        model = plain_model([0.0], [[1.0]], [[1.0]])
        llr = score_trial(model, EnrollStat("m", [0.0], 1), [0.0])
        assert llr == pytest.approx(0.5 * np.log(4.0 / 3.0), abs=1e-12)
        assert llr == pytest.approx(0.143841, abs=1e-6)

    def test_zero_between_class_gives_zero(self, rng):
        model = plain_model(np.zeros(3), np.zeros((3, 3)), random_spd(rng, 3))
        for _ in range(10):
            e, t = rng.standard_normal(3), rng.standard_normal(3)
            assert score_trial(model, EnrollStat("m", e, 1), t) == pytest.approx(0.0, abs=1e-12)

    def test_matches_brute_force(self, rng, random_model):
        for _ in range(500):
            e = random_model.mu + rng.standard_normal(8)
            t = random_model.mu + rng.standard_normal(8)
            llr = score_trial(random_model, EnrollStat("m", e, 1), t)
            assert llr == pytest.approx(brute_force_llr(random_model, e, t), abs=1e-8)

    def test_symmetric_in_enroll_and_test(self, rng, random_model):
        e, t = rng.standard_normal(8), rng.standard_normal(8)
        forward = score_trial(random_model, EnrollStat("m", e, 1), t)
        backward = score_trial(random_model, EnrollStat("m", t, 1), e)
        assert forward == pytest.approx(backward, abs=1e-10)

    def test_diagonal_path_matches_stacked(self, rng, random_model):
        e, t = rng.standard_normal((200, 8)), rng.standard_normal((200, 8))
        np.testing.assert_allclose(score_diagonal(random_model, e, t), score_stacked(random_model, e, t), atol=1e-8)

    def test_recomputing_cache_keeps_scores(self, rng, random_model):
        e, t = rng.standard_normal((50, 8)), rng.standard_normal((50, 8))
        fresh = replace(random_model, diag_cache=None).with_diag_cache()
        np.testing.assert_allclose(score_diagonal(fresh, e, t), score_diagonal(random_model, e, t), atol=1e-10)

    def test_same_speaker_scores_higher(self, rng):
        phi_b, phi_w = np.diag([2.0, 1.0, 0.5]), 0.5 * np.eye(3)
        model = plain_model(np.zeros(3), phi_b, phi_w)
        speakers = rng.multivariate_normal(np.zeros(3), phi_b, size=1000)
        others = rng.multivariate_normal(np.zeros(3), phi_b, size=1000)

        def noise():
            return rng.multivariate_normal(np.zeros(3), phi_w, size=1000)

        enrolled = speakers + noise()
        same = score_stacked(model, enrolled, speakers + noise())
        diff = score_stacked(model, enrolled, others + noise())
        assert same.mean() > diff.mean()

    def test_singular_total_covariance(self):
        model = plain_model([0.0, 0.0], np.zeros((2, 2)), np.eye(2))
        broken = replace(model, phi_w=np.diag([1.0, 0.0]), diag_cache=None)
        with pytest.raises(SingularityError):
            score_trial(broken, EnrollStat("m", [0.0, 0.0], 1), [0.0, 0.0])


class TestScoreTrials:
    def _fixture(self, rng, model, n_models=5, n_tests=40):
        enroll_stats = {f"m{i}": EnrollStat(f"m{i}", rng.standard_normal(model.dim), 1) for i in range(n_models)}
        tests = EmbeddingSet.from_records(
            model.dim, [f"t{i:03d}" for i in range(n_tests)], rng.standard_normal((n_tests, model.dim)),
        )
        rows = [(f"m{i % n_models}", f"t{i:03d}", "target" if i % 3 else "nontarget", None) for i in range(n_tests)]
        return enroll_stats, tests, TrialList.from_rows(rows)

    def test_input_order_and_values(self, rng, random_model):
        enroll_stats, tests, trials = self._fixture(rng, random_model)
        scores = score_trials(random_model, enroll_stats, tests, trials)
        assert scores.table["test_utt"].tolist() == trials.table["test_utt"].tolist()
        index = tests.index_of()
        for row, score in zip(trials.table.itertuples(index=False), scores.scores):
            expected = score_trial(random_model, enroll_stats[row.model_id], tests.vectors[index[row.test_utt]])
            assert score == pytest.approx(expected, abs=1e-10)

    def test_threaded_chunks_match_sequential(self, rng, random_model, monkeypatch):
        monkeypatch.setattr(plda_backend, "BATCH_SIZE", 7)
        enroll_stats, tests, trials = self._fixture(rng, random_model)
        sequential = score_trials(random_model, enroll_stats, tests, trials, workers=1)
        threaded = score_trials(random_model, enroll_stats, tests, trials, workers=4)
        np.testing.assert_array_equal(sequential.scores, threaded.scores)

    def test_diagonal_method(self, rng, random_model):
        enroll_stats, tests, trials = self._fixture(rng, random_model)
        stacked = score_trials(random_model, enroll_stats, tests, trials, method="stacked")
        diagonal = score_trials(random_model, enroll_stats, tests, trials, method="diagonal")
        np.testing.assert_allclose(diagonal.scores, stacked.scores, atol=1e-8)

    def test_missing_model(self, rng, random_model):
        enroll_stats, tests, trials = self._fixture(rng, random_model)
        del enroll_stats["m0"]
        with pytest.raises(DataError, match="not enrolled"):
            score_trials(random_model, enroll_stats, tests, trials)


class TestModelFiles:
    def test_round_trip(self, tmp_path, small_corpus):
        chain = fit_preprocess(small_corpus, target_dim=3)
        model = fit_plda_em(apply_preprocess(chain, small_corpus), chain=chain)
        path = tmp_path / "model.plda"
        save_model(model, path)
        loaded = load_model(path)
        for name in ("mu", "phi_b", "phi_w"):
            np.testing.assert_array_equal(getattr(loaded, name), getattr(model, name))
        np.testing.assert_array_equal(loaded.chain.global_mean, chain.global_mean)
        np.testing.assert_array_equal(loaded.chain.lda, chain.lda)
        assert loaded.chain.length_norm is True

    def test_bad_magic(self, tmp_path, random_model):
        path = tmp_path / "model.plda"
        save_model(random_model, path)
        path.write_bytes(b"PLDA2" + path.read_bytes()[5:])
        with pytest.raises(ParseError, match="magic"):
            load_model(path)

    def test_truncated(self, tmp_path, random_model):
        path = tmp_path / "model.plda"
        save_model(random_model, path)
        path.write_bytes(path.read_bytes()[:-20])
        with pytest.raises(ParseError, match="truncated"):
            load_model(path)

    def test_trailing_bytes(self, tmp_path, random_model):
        path = tmp_path / "model.plda"
        save_model(random_model, path)
        path.write_bytes(path.read_bytes() + b"\0")
        with pytest.raises(ParseError, match="trailing"):
            load_model(path)

    def test_enroll_stats_round_trip(self, tmp_path, rng):
        stats = {m: EnrollStat(m, rng.standard_normal(4), n) for m, n in (("m1", 1), ("m2", 3))}
        path = tmp_path / "enroll.txt"
        save_enroll_stats(stats, path)
        loaded = load_enroll_stats(path)
        assert list(loaded) == ["m1", "m2"]
        for m in stats:
            np.testing.assert_array_equal(loaded[m].mean_embedding, stats[m].mean_embedding)
            assert loaded[m].n_sessions == stats[m].n_sessions

    def test_enroll_stats_empty_round_trip(self, tmp_path):
        path = tmp_path / "enroll.txt"
        save_enroll_stats({}, path)
        assert load_enroll_stats(path) == {}

    @pytest.mark.parametrize("content,location", [
        (b"dim four\nm1 1 0.5\n", "line 1"),
        (b"dim 1\nm1 1 0.5\nm\xff2 1 0.5\n", "line 3"),
    ])
    def test_enroll_stats_parse_errors(self, tmp_path, content, location):
        path = tmp_path / "enroll.txt"
        path.write_bytes(content)
        with pytest.raises(ParseError) as excinfo:
            load_enroll_stats(path)
        assert excinfo.value.location == location
