"""Shared fixtures: seeded generators and small two-covariance corpora."""
import numpy as np
import pytest

from plda_backend import PldaModel, PreprocessChain
from trial_protocol import EmbeddingSet, TrialKey, TrialList


def random_spd(rng, dim, floor=0.5):
    a = rng.standard_normal((dim, dim))
    return a @ a.T / dim + floor * np.eye(dim)


def two_cov_corpus(rng, phi_b, phi_w, n_speakers, utts_per_speaker, mu=None, prefix="s"):
    """Speaker-labelled vectors y_s + e with y_s ~ N(mu, phi_b), e ~ N(0, phi_w)."""
    phi_b = np.atleast_2d(phi_b)
    phi_w = np.atleast_2d(phi_w)
    dim = phi_b.shape[0]
    mu = np.zeros(dim) if mu is None else np.asarray(mu, dtype=np.float64)
    speakers = rng.multivariate_normal(mu, phi_b, size=n_speakers)
    noise = rng.multivariate_normal(np.zeros(dim), phi_w, size=n_speakers * utts_per_speaker)
    vectors = np.repeat(speakers, utts_per_speaker, axis=0) + noise
    spk = [f"{prefix}{s:04d}" for s in range(n_speakers) for _ in range(utts_per_speaker)]
    utt = [f"{prefix}{s:04d}_u{u:03d}" for s in range(n_speakers) for u in range(utts_per_speaker)]
    return EmbeddingSet.from_records(dim, utt, vectors, speaker_ids=spk)


def pinned_1d_corpus(rng, phi_b=2.0, phi_w=1.0, n_speakers=500, utts_per_speaker=10):
    """
    1-dim corpus whose balanced-design ML estimate is exactly (phi_b, phi_w).

    Speaker means get sample variance phi_b + phi_w / n and the residuals get
    pooled variance phi_w over S(n - 1) degrees of freedom.
    """
    n = utts_per_speaker
    z = rng.standard_normal(n_speakers)
    z = (z - z.mean()) / z.std()
    means = np.sqrt(phi_b + phi_w / n) * z
    e = rng.standard_normal((n_speakers, n))
    e -= e.mean(axis=1, keepdims=True)
    e *= np.sqrt(phi_w * n_speakers * (n - 1) / np.sum(e ** 2))
    vectors = (means[:, None] + e).reshape(-1, 1)
    spk = [f"s{s:04d}" for s in range(n_speakers) for _ in range(n)]
    utt = [f"s{s:04d}_u{u:03d}" for s in range(n_speakers) for u in range(n)]
    return EmbeddingSet.from_records(1, utt, vectors, speaker_ids=spk)


def plain_model(mu, phi_b, phi_w):
    mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
    return PldaModel(
        mu=mu, phi_b=np.atleast_2d(phi_b), phi_w=np.atleast_2d(phi_w),
        chain=PreprocessChain.identity(mu.shape[0]),
    ).with_diag_cache()


def table1_trials(counts=(5370, 33327, 63882), n_attacks=13):
    """Trial list with the given (target, nontarget, spoof) counts and unique pairs."""
    n_target, n_nontarget, n_spoof = counts
    rows = [(f"M{i % 67:03d}", f"T{i:06d}", TrialKey.TARGET.value, None) for i in range(n_target)]
    rows += [(f"M{i % 67:03d}", f"N{i:06d}", TrialKey.NONTARGET.value, None) for i in range(n_nontarget)]
    rows += [
        (f"M{i % 67:03d}", f"S{i:06d}", TrialKey.SPOOF.value, f"A{7 + i % n_attacks:02d}")
        for i in range(n_spoof)
    ]
    return TrialList.from_rows(rows)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def random_model(rng):
    """Seeded r=8 model with correlated covariances."""
    dim = 8
    return plain_model(rng.normal(size=dim), random_spd(rng, dim), random_spd(rng, dim))


@pytest.fixture
def small_corpus(rng):
    dim = 4
    phi_b = np.diag([3.0, 2.0, 1.0, 0.5])
    phi_w = 0.5 * np.eye(dim) + 0.1
    return two_cov_corpus(rng, phi_b, phi_w, n_speakers=60, utts_per_speaker=6)
