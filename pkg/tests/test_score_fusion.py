import numpy as np
import pandas as pd
import pytest
from scipy.stats import multivariate_normal

from asv_evaluation import ScoreFile, compute_eer
from backend_errors import ConfigError, InsufficientDataError, JoinError, ParseError
from score_fusion import (
    GaussianBackend,
    fit_gaussian_backend,
    fuse_batch,
    fuse_score,
    fuse_scores,
    load_backend,
    load_cm_scores,
    save_backend,
    write_cm_scores,
)


def backend_from(params, mix_alpha=0.5, eps_reg=0.0):
    return GaussianBackend(**params, mix_alpha=mix_alpha, eps_reg=eps_reg)


def sample_dev(rng, n, means, covs):
    rows = []
    for key, mean, cov in zip(("target", "nontarget", "spoof"), means, covs):
        for cm, asv in rng.multivariate_normal(mean, cov, size=n):
            rows.append((cm, asv, key))
    return rows


def random_params(rng):
    params = {}
    for name in ("tar", "non", "spf"):
        a = rng.standard_normal((2, 2))
        params[f"mean_{name}"] = rng.normal(0.0, 2.0, 2)
        params[f"cov_{name}"] = a @ a.T + 0.5 * np.eye(2)
    return params


class TestFit:
    def test_two_point_classes(self):
        rows = [(0.0, 0.0, k) for k in ("target", "nontarget", "spoof")]
        rows += [(2.0, 2.0, k) for k in ("target", "nontarget", "spoof")]
        backend = fit_gaussian_backend(rows)
        np.testing.assert_allclose(backend.mean_tar, [1.0, 1.0])
        np.testing.assert_allclose(backend.cov_spf, [[1.0, 1.0], [1.0, 1.0]])

    def test_missing_class(self):
        rows = [(0.0, 0.0, "target"), (1.0, 1.0, "target"), (0.0, 1.0, "nontarget"), (1.0, 0.0, "nontarget")]
        with pytest.raises(InsufficientDataError, match="spoof"):
            fit_gaussian_backend(rows)

    def test_recovers_parameters(self, rng):
        means = [(1.0, 2.0), (0.5, -2.0), (-2.0, 1.0)]
        covs = [np.eye(2), [[1.0, 0.3], [0.3, 0.5]], [[0.8, -0.2], [-0.2, 1.2]]]
        backend = fit_gaussian_backend(sample_dev(rng, 5000, means, covs))
        for name, mean, cov in zip(("tar", "non", "spf"), means, covs):
            np.testing.assert_allclose(getattr(backend, f"mean_{name}"), mean, atol=0.1)
            np.testing.assert_allclose(getattr(backend, f"cov_{name}"), cov, atol=0.1)

    @pytest.mark.parametrize("alpha", [0.0, 1.0, 1.5])
    def test_mix_alpha_range(self, rng, alpha):
        with pytest.raises(ConfigError):
            backend_from(random_params(rng), mix_alpha=alpha)


class TestFuseScore:
    def test_identical_classes_give_zero(self, rng):
        mean, cov = np.array([0.3, -0.1]), np.array([[1.0, 0.2], [0.2, 2.0]])
        params = {f"{p}_{n}": v for n in ("tar", "non", "spf") for p, v in (("mean", mean), ("cov", cov))}
        backend = backend_from(params)
        for s in rng.normal(0.0, 3.0, size=(20, 2)):
            assert fuse_score(backend, s) == pytest.approx(0.0, abs=1e-12)

    def test_symmetric_construction(self):
        backend = backend_from({
            "mean_tar": [1.0, 1.0], "mean_non": [-1.0, -1.0], "mean_spf": [1.0, -1.0],
            "cov_tar": np.eye(2), "cov_non": np.eye(2), "cov_spf": np.eye(2),
        })
        assert fuse_score(backend, [0.0, 0.0]) == pytest.approx(0.0, abs=1e-10)

    def test_matches_naive_density_arithmetic(self, rng):
        params = random_params(rng)
        backend = backend_from(params, mix_alpha=0.3)
        for s in rng.normal(0.0, 2.0, size=(100, 2)):
            tar = multivariate_normal(params["mean_tar"], params["cov_tar"]).pdf(s)
            non = multivariate_normal(params["mean_non"], params["cov_non"]).pdf(s)
            spf = multivariate_normal(params["mean_spf"], params["cov_spf"]).pdf(s)
            expected = np.log(tar) - np.log(0.3 * non + 0.7 * spf)
            assert fuse_score(backend, s) == pytest.approx(expected, abs=1e-10)

    def test_affine_invariance(self, rng):
        rows = sample_dev(rng, 300, [(1.0, 2.0), (0.0, -1.0), (-2.0, 1.5)], [np.eye(2)] * 3)
        m, c = np.array([[2.0, 0.5], [-0.3, 1.5]]), np.array([4.0, -7.0])
        moved = [(*(m @ [cm, asv] + c), key) for cm, asv, key in rows]
        plain = fit_gaussian_backend(rows, eps_reg=0.0)
        shifted = fit_gaussian_backend(moved, eps_reg=0.0)
        for s in rng.normal(0.0, 1.5, size=(20, 2)):
            assert fuse_score(shifted, m @ s + c) == pytest.approx(fuse_score(plain, s), abs=1e-8)

    def test_mix_alpha_limit_is_two_class_llr(self):
        params = {
            "mean_tar": np.array([1.0, 1.0]), "mean_non": np.array([-1.0, -1.0]), "mean_spf": np.array([1.0, -1.0]),
            "cov_tar": np.eye(2), "cov_non": np.array([[1.0, 0.3], [0.3, 0.8]]), "cov_spf": np.eye(2),
        }
        backend = backend_from(params, mix_alpha=1.0 - 1e-12)
        for s in [params["mean_tar"], params["mean_non"], np.zeros(2)]:
            two_class = (multivariate_normal(params["mean_tar"], params["cov_tar"]).logpdf(s)
                         - multivariate_normal(params["mean_non"], params["cov_non"]).logpdf(s))
            assert fuse_score(backend, s) == pytest.approx(two_class, abs=1e-6)

    def test_large_scores_stay_finite(self, rng):
        backend = backend_from(random_params(rng))
        for s in ([1e6, -1e6], [-1e6, 1e6], [1e6, 1e6]):
            assert np.isfinite(fuse_score(backend, s))

    def test_rejects_bad_input(self, rng):
        backend = backend_from(random_params(rng))
        with pytest.raises(ValueError):
            fuse_score(backend, [0.0, np.nan])
        with pytest.raises(ValueError):
            fuse_score(backend, [0.0, 1.0, 2.0])


class TestTandem:
    def test_fusion_lowers_spoofed_eer(self, rng):
        # cm: bonafide N(1, 1), spoof N(-1, 1); asv: spoofs almost as strong as targets
        means = [(1.0, 2.0), (1.0, -2.0), (-1.0, 1.5)]
        covs = [np.eye(2)] * 3
        backend = fit_gaussian_backend(sample_dev(rng, 2000, means, covs))
        evaluation = pd.DataFrame(sample_dev(rng, 2000, means, covs), columns=["cm", "asv", "key"])
        target = evaluation[evaluation["key"] == "target"]
        spoof = evaluation[evaluation["key"] == "spoof"]
        asv_eer, _ = compute_eer(target["asv"], spoof["asv"])
        fused_eer, _ = compute_eer(
            fuse_batch(backend, target[["cm", "asv"]].to_numpy()),
            fuse_batch(backend, spoof[["cm", "asv"]].to_numpy()),
        )
        assert fused_eer < asv_eer


class TestFiles:
    def test_backend_round_trip(self, tmp_path, rng):
        backend = backend_from(random_params(rng), mix_alpha=0.4, eps_reg=1e-6)
        path = tmp_path / "fusion.json"
        save_backend(backend, path)
        loaded = load_backend(path)
        assert loaded.mix_alpha == 0.4
        for name in ("tar", "non", "spf"):
            np.testing.assert_array_equal(getattr(loaded, f"mean_{name}"), getattr(backend, f"mean_{name}"))
            np.testing.assert_array_equal(getattr(loaded, f"cov_{name}"), getattr(backend, f"cov_{name}"))

    def test_bad_backend_file(self, tmp_path):
        path = tmp_path / "fusion.json"
        path.write_text("{not json", encoding="utf-8")
        with pytest.raises(ParseError):
            load_backend(path)

    def test_cm_round_trip(self, tmp_path, rng):
        cm = pd.Series(rng.standard_normal(3), index=["u1", "u2", "u3"])
        path = tmp_path / "cm.tsv"
        write_cm_scores(cm, path)
        loaded = load_cm_scores(path)
        assert loaded.index.tolist() == ["u1", "u2", "u3"]
        np.testing.assert_array_equal(loaded.to_numpy(), cm.to_numpy())

    def test_cm_duplicate(self, tmp_path):
        path = tmp_path / "cm.tsv"
        path.write_text("u1 0.5\nu1 0.7\n", encoding="utf-8")
        with pytest.raises(ParseError, match="line 2"):
            load_cm_scores(path)

    def test_cm_invalid_utf8(self, tmp_path):
        path = tmp_path / "cm.tsv"
        path.write_bytes(b"u1 0.5\nu2 0.7\n\xc3 0.1\n")
        with pytest.raises(ParseError, match="line 3"):
            load_cm_scores(path)

    def test_backend_invalid_utf8(self, tmp_path):
        path = tmp_path / "fusion.json"
        path.write_bytes(b'{"mix_alpha": "\xff"}')
        with pytest.raises(ParseError, match="UTF-8"):
            load_backend(path)

    def test_fuse_scores_keeps_order(self, rng):
        backend = backend_from(random_params(rng))
        asv = ScoreFile.from_columns(["m2", "m1", "m1"], ["u2", "u1", "u2"], [0.5, -1.0, 2.0])
        cm = pd.Series([0.1, 0.9], index=["u1", "u2"])
        fused = fuse_scores(backend, asv, cm)
        assert fused.table["model_id"].tolist() == ["m2", "m1", "m1"]
        assert fused.scores[0] == pytest.approx(fuse_score(backend, [0.9, 0.5]), abs=1e-12)
        assert fused.scores[1] == pytest.approx(fuse_score(backend, [0.1, -1.0]), abs=1e-12)

    def test_fuse_scores_missing_cm(self, rng):
        backend = backend_from(random_params(rng))
        asv = ScoreFile.from_columns(["m1"], ["u7"], [0.5])
        with pytest.raises(JoinError):
            fuse_scores(backend, asv, pd.Series([0.1], index=["u1"]))
