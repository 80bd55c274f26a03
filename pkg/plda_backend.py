#!/usr/bin/env python3
"""
Two-covariance PLDA back-end: preprocessing, EM training, enrollment, scoring.

OVERVIEW:
Speaker embeddings are centered, unit-length normalized and projected with
LDA (in that order). In the projected space a simplified PLDA models every
utterance as phi = y_s + e with speaker identity y_s ~ N(mu, Phi_b) and
channel noise e ~ N(0, Phi_w). The model stores the two full covariances
directly.

HOW IT WORKS:
1. fit_preprocess: global mean, length-norm, LDA from the generalized
   eigenproblem S_b v = lambda S_w v (top r directions, unit-norm rows)
2. fit_plda_em: moment initialization, then EM with a closed-form Gaussian
   posterior per speaker; the observed-data log-likelihood never decreases
3. enroll: average of the preprocessed enrollment utterances
4. score_trial: log N([e;t] | [mu;mu], [[T, Phi_b], [Phi_b, T]])
               - log N([e;t] | [mu;mu], [[T, 0], [0, T]]),  T = Phi_b + Phi_w
   A diagonalized path through `diag_cache` gives the same numbers faster.

MODEL FILE ("PLDA1", little-endian):
   magic "PLDA1", u32 r, f64 x r mu, f64 x r*r Phi_b (row-major), f64 x r*r Phi_w,
   u32 D, f64 x D global mean, u32 r, f64 x r*D LDA rows, u8 length_norm
"""
import logging
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
import pandas as pd
import scipy.linalg

from asv_evaluation import ScoreFile
from backend_errors import (
    ConfigError,
    DataError,
    DegenerateVectorError,
    EmptyInputError,
    InsufficientDataError,
    ParseError,
    ShapeError,
)
from plda_linalg import (
    EPS_REG,
    as_sym_matrix,
    check_floor,
    gauss_logpdf,
    regularize,
    simul_diag,
    sym_power,
    symmetrize,
    _apply_sign_convention,
)
from trial_protocol import EmbeddingSet, atomic_output, utf8_error

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"PLDA1"
DEFAULT_EM_ITERS = 10
DEFAULT_LDA_DIM = 150
BATCH_SIZE = 5000           # trials per scoring chunk
MIN_NORM = 1e-12


def _frozen(array):
    array = np.array(array, dtype=np.float64, copy=True)
    array.setflags(write=False)
    return array


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PreprocessChain:
    global_mean: np.ndarray   # (D,)
    lda: np.ndarray           # (r, D)
    length_norm: bool = True

    def __post_init__(self):
        mean = _frozen(np.atleast_1d(self.global_mean))
        lda = _frozen(np.atleast_2d(self.lda))
        if lda.shape[1] != mean.shape[0]:
            raise ShapeError(f"LDA has {lda.shape[1]} columns but the mean has {mean.shape[0]} entries")
        if lda.shape[0] > lda.shape[1]:
            raise ShapeError(f"LDA output dim {lda.shape[0]} exceeds input dim {lda.shape[1]}")
        object.__setattr__(self, "global_mean", mean)
        object.__setattr__(self, "lda", lda)
        object.__setattr__(self, "length_norm", bool(self.length_norm))

    @classmethod
    def identity(cls, dim, length_norm=False):
        return cls(np.zeros(dim), np.eye(dim), length_norm)

    @property
    def input_dim(self):
        return self.lda.shape[1]

    @property
    def output_dim(self):
        return self.lda.shape[0]


def _center_and_normalize(vectors, mean, utt_ids, length_norm=True):
    centered = vectors - mean
    if not length_norm:
        return centered
    norms = np.linalg.norm(centered, axis=1)
    degenerate = norms < MIN_NORM
    if degenerate.any():
        raise DegenerateVectorError(utt_ids[int(np.flatnonzero(degenerate)[0])])
    return centered / norms[:, None]


def _speaker_codes(embeddings):
    if not embeddings.has_speaker_labels:
        raise DataError("Training embeddings need speaker labels on every utterance")
    codes, speakers = pd.factorize(embeddings.labels["speaker_id"], sort=True)
    return codes, list(speakers)


def fit_preprocess(embeddings, target_dim=DEFAULT_LDA_DIM, eps_reg=EPS_REG):
    """Fit global mean and LDA on speaker-labelled embeddings."""
    if target_dim < 1:
        raise ConfigError(f"LDA dimension must be positive, got {target_dim}")
    if target_dim > embeddings.dim:
        raise ShapeError(f"LDA dimension {target_dim} exceeds embedding dimension {embeddings.dim}")
    if len(embeddings) < 2:
        raise InsufficientDataError(f"Need at least 2 utterances for LDA, got {len(embeddings)}")
    codes, speakers = _speaker_codes(embeddings)
    if len(speakers) < target_dim + 1:
        raise InsufficientDataError(
            f"LDA to {target_dim} dims needs at least {target_dim + 1} speakers, got {len(speakers)}"
        )

    global_mean = embeddings.vectors.mean(axis=0)
    x = _center_and_normalize(embeddings.vectors, global_mean, embeddings.utt_ids)
    n = x.shape[0]
    counts = np.bincount(codes)
    sums = np.zeros((len(speakers), x.shape[1]))
    np.add.at(sums, codes, x)
    class_means = sums / counts[:, None]

    within = x - class_means[codes]
    s_w = symmetrize(within.T @ within / n)
    offsets = class_means - x.mean(axis=0)
    s_b = symmetrize((offsets * counts[:, None]).T @ offsets / n)

    s_w = regularize(s_w, eps_reg)
    check_floor(scipy.linalg.eigvalsh(s_w), what="within-speaker scatter")
    values, vectors = scipy.linalg.eigh(s_b, s_w)
    top = np.argsort(values)[::-1][:target_dim]
    vectors = vectors[:, top]
    vectors = _apply_sign_convention(vectors / np.linalg.norm(vectors, axis=0))
    logger.info(
        f"✓ LDA {embeddings.dim} -> {target_dim} on {n} utterances / {len(speakers)} speakers "
        f"(top ratio {values[top[0]]:.3g})"
    )
    return PreprocessChain(global_mean, vectors.T, length_norm=True)


def apply_preprocess(chain, embeddings):
    if embeddings.dim != chain.input_dim:
        raise ShapeError(f"Embeddings have dim {embeddings.dim}, chain expects {chain.input_dim}")
    if len(embeddings) == 0:
        return EmbeddingSet(dim=chain.output_dim, labels=embeddings.labels.copy(),
                            vectors=np.zeros((0, chain.output_dim)))
    x = _center_and_normalize(embeddings.vectors, chain.global_mean, embeddings.utt_ids, chain.length_norm)
    return embeddings.with_vectors(x @ chain.lda.T)


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

class DiagCache(NamedTuple):
    transform: np.ndarray  # D_diag with D Phi_w D^T = I and D Phi_b D^T = diag(psi)
    psi: np.ndarray


@dataclass(frozen=True, eq=False)
class PldaModel:
    mu: np.ndarray
    phi_b: np.ndarray
    phi_w: np.ndarray
    chain: PreprocessChain
    diag_cache: Optional[DiagCache] = field(default=None)

    def __post_init__(self):
        mu = _frozen(np.atleast_1d(self.mu))
        r = mu.shape[0]
        phi_b = _frozen(as_sym_matrix(self.phi_b, "Phi_b"))
        phi_w = _frozen(as_sym_matrix(self.phi_w, "Phi_w"))
        if phi_b.shape != (r, r) or phi_w.shape != (r, r):
            raise ShapeError(f"Covariances must be {r}x{r}, got {phi_b.shape} and {phi_w.shape}")
        if self.chain.output_dim != r:
            raise ShapeError(f"Preprocess chain outputs {self.chain.output_dim} dims, model has {r}")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "phi_b", phi_b)
        object.__setattr__(self, "phi_w", phi_w)
        if self.diag_cache is not None:
            object.__setattr__(self, "diag_cache",
                               DiagCache(_frozen(self.diag_cache.transform), _frozen(self.diag_cache.psi)))

    @property
    def dim(self):
        return self.mu.shape[0]

    @property
    def total_cov(self):
        return symmetrize(self.phi_b + self.phi_w)

    def with_diag_cache(self):
        """Return a copy whose diag_cache simultaneously diagonalizes Phi_w and Phi_b."""
        b, psi = simul_diag(self.phi_w, self.phi_b)
        return replace(self, diag_cache=DiagCache(b.T, psi))

    def updated(self, mu=None, phi_b=None, phi_w=None):
        model = replace(
            self,
            mu=self.mu if mu is None else mu,
            phi_b=self.phi_b if phi_b is None else phi_b,
            phi_w=self.phi_w if phi_w is None else phi_w,
            diag_cache=None,
        )
        return model.with_diag_cache()


@dataclass(frozen=True, eq=False)
class EnrollStat:
    model_id: str
    mean_embedding: np.ndarray
    n_sessions: int

    def __post_init__(self):
        if self.n_sessions < 1:
            raise DataError(f"Model '{self.model_id}' needs at least one session")
        object.__setattr__(self, "mean_embedding", _frozen(np.atleast_1d(self.mean_embedding)))


# ---------------------------------------------------------------------------
# EM training
# ---------------------------------------------------------------------------

class _SpeakerStats(NamedTuple):
    n: int
    counts: np.ndarray       # (S,)
    sums: np.ndarray         # (S, r)
    scatter: np.ndarray      # sum_i x_i x_i^T
    within: np.ndarray       # sum_i (x_i - xbar_s)(x_i - xbar_s)^T
    mean: np.ndarray


def _accumulate(embeddings):
    codes, speakers = _speaker_codes(embeddings)
    x = embeddings.vectors
    counts = np.bincount(codes, minlength=len(speakers))
    sums = np.zeros((len(speakers), x.shape[1]))
    np.add.at(sums, codes, x)
    deviations = x - (sums / counts[:, None])[codes]
    return _SpeakerStats(
        n=x.shape[0],
        counts=counts,
        sums=sums,
        scatter=symmetrize(x.T @ x),
        within=symmetrize(deviations.T @ deviations),
        mean=x.mean(axis=0),
    )


def _log_likelihood(stats, mu, phi_b, phi_w):
    r = mu.shape[0]
    w_inv = sym_power(phi_w, -1)
    _, logdet_w = np.linalg.slogdet(phi_w)
    speakers = len(stats.counts)
    ll = -0.5 * stats.n * r * np.log(2 * np.pi)
    ll -= 0.5 * (stats.n - speakers) * logdet_w
    ll -= 0.5 * np.trace(w_inv @ stats.within)
    offsets = stats.sums / stats.counts[:, None] - mu
    for n_utts in np.unique(stats.counts):
        sel = stats.counts == n_utts
        g = symmetrize(phi_w + n_utts * phi_b)
        _, logdet_g = np.linalg.slogdet(g)
        g_inv = sym_power(g, -1)
        d = offsets[sel]
        ll -= 0.5 * sel.sum() * logdet_g
        ll -= 0.5 * n_utts * np.einsum("ij,jk,ik->", d, g_inv, d)
    return float(ll)


def plda_log_likelihood(model, embeddings):
    """Observed-data log-likelihood of speaker-labelled, preprocessed embeddings."""
    if embeddings.dim != model.dim:
        raise ShapeError(f"Embeddings have dim {embeddings.dim}, model has {model.dim}")
    return _log_likelihood(_accumulate(embeddings), model.mu, model.phi_b, model.phi_w)


def _em_step(stats, mu, phi_b, phi_w):
    b_inv = sym_power(phi_b, -1)
    w_inv = sym_power(phi_w, -1)
    speakers = len(stats.counts)
    r = mu.shape[0]
    post_means = np.zeros((speakers, r))
    post_cov_sum = np.zeros((r, r))
    weighted_cov_sum = np.zeros((r, r))
    prior_term = b_inv @ mu
    for n_utts in np.unique(stats.counts):
        sel = stats.counts == n_utts
        cov = sym_power(symmetrize(b_inv + n_utts * w_inv), -1)
        post_means[sel] = (prior_term + stats.sums[sel] @ w_inv) @ cov
        post_cov_sum += sel.sum() * cov
        weighted_cov_sum += n_utts * sel.sum() * cov

    offsets = post_means - mu
    new_phi_b = symmetrize((post_cov_sum + offsets.T @ offsets) / speakers)
    cross = stats.sums.T @ post_means
    new_phi_w = stats.scatter - cross - cross.T
    new_phi_w += weighted_cov_sum + (post_means * stats.counts[:, None]).T @ post_means
    new_phi_w = symmetrize(new_phi_w / stats.n)
    return new_phi_b, new_phi_w


def fit_plda_em(embeddings, iters=DEFAULT_EM_ITERS, eps_reg=EPS_REG, chain=None, history=None):
    """
    Train the two-covariance PLDA by EM on preprocessed, speaker-labelled embeddings.

    `history`, when a list, receives the observed-data log-likelihood before
    the first and after every iteration.
    """
    if iters < 0:
        raise ConfigError(f"EM iterations must be non-negative, got {iters}")
    start_time = time.time()
    stats = _accumulate(embeddings)
    speakers = len(stats.counts)
    if speakers < 2:
        raise InsufficientDataError(f"PLDA training needs at least 2 speakers, got {speakers}")
    if stats.counts.max() < 2:
        raise InsufficientDataError("Every speaker has a single utterance; within-class scatter is degenerate")
    chain = chain if chain is not None else PreprocessChain.identity(embeddings.dim)
    logger.info(f"▶ Training PLDA (r={embeddings.dim}) on {stats.n} utterances from {speakers} speakers")

    mu = stats.mean
    offsets = stats.sums / stats.counts[:, None] - mu
    phi_b = regularize(offsets.T @ offsets / speakers, eps_reg)
    phi_w = regularize(stats.within / stats.n, eps_reg)

    track = history is not None or logger.isEnabledFor(logging.DEBUG)
    if track:
        ll = _log_likelihood(stats, mu, phi_b, phi_w)
        if history is not None:
            history.append(ll)
    for iteration in range(1, iters + 1):
        phi_b, phi_w = _em_step(stats, mu, phi_b, phi_w)
        if track:
            ll = _log_likelihood(stats, mu, phi_b, phi_w)
            if history is not None:
                history.append(ll)
            logger.debug(f"EM iteration {iteration}/{iters}: log-likelihood {ll:.6f}")

    model = PldaModel(mu=mu, phi_b=phi_b, phi_w=phi_w, chain=chain).with_diag_cache()
    elapsed = time.time() - start_time
    logger.info(f"✔ Finished PLDA training ({iters} EM iterations) in {elapsed:.2f}s")
    return model


# ---------------------------------------------------------------------------
# Enrollment and scoring
# ---------------------------------------------------------------------------

def enroll(model, utterances, model_id):
    x = np.asarray(utterances, dtype=np.float64)
    if x.size == 0:
        raise EmptyInputError(f"No enrollment utterances for model '{model_id}'")
    x = np.atleast_2d(x)
    if x.shape[1] != model.dim:
        raise ShapeError(f"Enrollment vectors have dim {x.shape[1]}, model has {model.dim}")
    return EnrollStat(model_id=model_id, mean_embedding=x.mean(axis=0), n_sessions=x.shape[0])


def enroll_all(model, embeddings, enrollment_map):
    """Enroll every model of an enrollment map from preprocessed embeddings."""
    index = embeddings.index_of()
    missing = [u for utts in enrollment_map.values() for u in utts if u not in index]
    if missing:
        raise DataError(f"{len(missing)} enrollment utterance(s) not found, e.g. {missing[:10]}")
    return {
        model_id: enroll(model, embeddings.vectors[[index[u] for u in utts]], model_id)
        for model_id, utts in enrollment_map.items()
    }


def _stacked_covariances(model):
    t = model.total_cov
    zero = np.zeros_like(t)
    cov_target = np.block([[t, model.phi_b], [model.phi_b, t]])
    cov_impostor = np.block([[t, zero], [zero, t]])
    return cov_target, cov_impostor


def score_stacked(model, enroll_means, tests):
    """Batch LLRs through the explicit 2r-dim Gaussians."""
    enroll_means = np.atleast_2d(enroll_means)
    tests = np.atleast_2d(tests)
    if enroll_means.shape[1] != model.dim or tests.shape[1] != model.dim:
        raise ShapeError(f"Scoring vectors must have dim {model.dim}")
    cov_target, cov_impostor = _stacked_covariances(model)
    stacked_mean = np.concatenate([model.mu, model.mu])
    z = np.hstack([enroll_means, tests])
    llr = gauss_logpdf(z, stacked_mean, cov_target) - gauss_logpdf(z, stacked_mean, cov_impostor)
    return np.atleast_1d(llr)


def score_diagonal(model, enroll_means, tests):
    """Batch LLRs in the space where Phi_w = I and Phi_b = diag(psi)."""
    if model.diag_cache is None:
        model = model.with_diag_cache()
    transform, psi = model.diag_cache
    e = (np.atleast_2d(enroll_means) - model.mu) @ transform.T
    t = (np.atleast_2d(tests) - model.mu) @ transform.T
    total = psi + 1.0
    det_target = 2.0 * psi + 1.0
    quad_target = (total * (e ** 2 + t ** 2) - 2.0 * psi * e * t) / det_target
    quad_impostor = (e ** 2 + t ** 2) / total
    per_dim = -0.5 * np.log(det_target) + np.log(total) - 0.5 * quad_target + 0.5 * quad_impostor
    return per_dim.sum(axis=1)


SCORERS = {"stacked": score_stacked, "diagonal": score_diagonal}


def score_trial(model, enroll_stat, test):
    test = np.asarray(test, dtype=np.float64)
    if test.shape != (model.dim,) or enroll_stat.mean_embedding.shape != (model.dim,):
        raise ShapeError(f"Trial vectors must have dim {model.dim}")
    return float(score_stacked(model, enroll_stat.mean_embedding, test)[0])


def score_trials(model, enroll_stats, test_set, trials, method="stacked", workers=1):
    """Score every trial in input order against preprocessed test embeddings."""
    if method not in SCORERS:
        raise ConfigError(f"Unknown scoring method '{method}', expected one of {sorted(SCORERS)}")
    start_time = time.time()
    table = trials.table
    index = test_set.index_of()
    missing_models = sorted(set(table["model_id"]) - set(enroll_stats))
    if missing_models:
        raise DataError(f"{len(missing_models)} model(s) not enrolled, e.g. {missing_models[:10]}")
    missing_tests = sorted(set(table["test_utt"]) - set(index))
    if missing_tests:
        raise DataError(f"{len(missing_tests)} test utterance(s) not found, e.g. {missing_tests[:10]}")

    if len(table) == 0:
        return ScoreFile.from_columns([], [], [])
    enroll_means = np.vstack([enroll_stats[m].mean_embedding for m in table["model_id"]])
    tests = test_set.vectors[[index[u] for u in table["test_utt"]]]
    scorer = SCORERS[method]
    if method == "diagonal" and model.diag_cache is None:
        model = model.with_diag_cache()

    chunks = [slice(i, i + BATCH_SIZE) for i in range(0, len(table), BATCH_SIZE)]
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            parts = list(executor.map(lambda s: scorer(model, enroll_means[s], tests[s]), chunks))
    else:
        parts = [scorer(model, enroll_means[s], tests[s]) for s in chunks]
    scores = np.concatenate(parts)

    elapsed = time.time() - start_time
    logger.info(f"✓ Scored {len(scores)} trials ({method}) in {elapsed:.2f}s")
    return ScoreFile.from_columns(table["model_id"].tolist(), table["test_utt"].tolist(), scores)


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def save_model(model, path):
    r = model.dim
    chain = model.chain
    with atomic_output(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", r))
        fh.write(model.mu.astype("<f8").tobytes())
        fh.write(model.phi_b.astype("<f8").tobytes())
        fh.write(model.phi_w.astype("<f8").tobytes())
        fh.write(struct.pack("<I", chain.input_dim))
        fh.write(chain.global_mean.astype("<f8").tobytes())
        fh.write(struct.pack("<I", chain.output_dim))
        fh.write(chain.lda.astype("<f8").tobytes())
        fh.write(struct.pack("<B", 1 if chain.length_norm else 0))
    logger.info(f"✓ Saved PLDA model (r={r}) to '{path}'")


class _Reader:
    def __init__(self, buffer, path):
        self.buffer = buffer
        self.path = path
        self.offset = 0

    def take(self, size, what):
        if self.offset + size > len(self.buffer):
            raise ParseError(f"truncated while reading {what}", self.path, f"byte {self.offset}")
        chunk = self.buffer[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def f64(self, count, what):
        return np.frombuffer(self.take(8 * count, what), dtype="<f8").astype(np.float64)


def load_model(path):
    buffer = Path(path).read_bytes()
    if buffer[:len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise ParseError(f"bad magic {buffer[:len(MODEL_MAGIC)]!r}, expected {MODEL_MAGIC!r}", path, "header")
    reader = _Reader(buffer, path)
    reader.offset = len(MODEL_MAGIC)
    r = reader.u32("model dimension")
    mu = reader.f64(r, "mu")
    phi_b = reader.f64(r * r, "Phi_b").reshape(r, r)
    phi_w = reader.f64(r * r, "Phi_w").reshape(r, r)
    d = reader.u32("embedding dimension")
    global_mean = reader.f64(d, "global mean")
    lda_rows = reader.u32("LDA dimension")
    if lda_rows != r:
        raise ParseError(f"LDA has {lda_rows} rows but the model dimension is {r}", path, "chain")
    lda = reader.f64(lda_rows * d, "LDA").reshape(lda_rows, d)
    length_norm = reader.take(1, "length-norm flag")[0] != 0
    if reader.offset != len(buffer):
        raise ParseError(f"{len(buffer) - reader.offset} unexpected trailing bytes", path, f"byte {reader.offset}")
    chain = PreprocessChain(global_mean, lda, length_norm)
    model = PldaModel(mu=mu, phi_b=phi_b, phi_w=phi_w, chain=chain).with_diag_cache()
    logger.debug(f"Loaded PLDA model (r={r}, D={d}) from '{path}'")
    return model


def save_enroll_stats(enroll_stats, path):
    stats = list(enroll_stats.values())
    dim = stats[0].mean_embedding.shape[0] if stats else 0
    with atomic_output(path, "w") as fh:
        fh.write(f"dim {dim}\n")
        for stat in stats:
            numbers = " ".join(repr(float(v)) for v in stat.mean_embedding)
            fh.write(f"{stat.model_id} {stat.n_sessions} {numbers}\n")


def load_enroll_stats(path):
    enroll_stats = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().split()
            if len(header) != 2 or header[0] != "dim":
                raise ParseError("first line must be 'dim <r>'", path, "line 1")
            try:
                dim = int(header[1])
            except ValueError as e:
                raise ParseError(f"bad dimension '{header[1]}'", path, "line 1") from e
            if dim < 0:
                raise ParseError(f"dimension must not be negative, got {dim}", path, "line 1")
            for line_number, line in enumerate(fh, start=2):
                fields = line.split()
                if not fields:
                    continue
                if len(fields) != dim + 2:
                    raise ParseError(f"expected {dim + 2} fields, found {len(fields)}", path, f"line {line_number}")
                if fields[0] in enroll_stats:
                    raise ParseError(f"duplicate model '{fields[0]}'", path, f"line {line_number}")
                try:
                    n_sessions = int(fields[1])
                    mean = np.array([float(v) for v in fields[2:]])
                except ValueError as e:
                    raise ParseError(str(e), path, f"line {line_number}") from e
                enroll_stats[fields[0]] = EnrollStat(fields[0], mean, n_sessions)
    except UnicodeDecodeError as e:
        raise utf8_error(path, e) from e
    return enroll_stats
