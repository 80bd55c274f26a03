"""
Seeded synthetic corpus for the spoofing-aware back-end.

HOW IT WORKS:
1. Speaker identities y_s ~ N(0, Phi_b), bonafide utterances y_s + e with
   e ~ N(0, Phi_w). The out-of-domain (OOD) training set uses its own speakers.
2. In-domain data (adaptation pool and evaluation set) is generated the same
   way and then mapped x <- M x + b.
3. A spoofed utterance aimed at speaker s is
       (1 - pull) * y_attacker + pull * y_s + noise,  noise ~ N(0, scale * Phi_w)
   with a fresh attacker identity per utterance and attack ids A01..A0n.
   With pull = 0 and scale = 1 it is an ordinary zero-effort impostor.
4. Trials pair every evaluation speaker's model with its own bonafide test
   utterances (target), other speakers' bonafide test utterances (nontarget)
   and spoofs aimed at it (spoof). Counts follow a protocol profile scaled
   down by `trial_scale`.
5. Countermeasure scores: bonafide test utterances ~ N(cm_separation, 1),
   spoofed ones ~ N(0, 1).

Everything is drawn from one generator seeded with spec.seed, in a fixed
order, so equal specs give byte-identical files.
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.stats import special_ortho_group

from backend_errors import ConfigError
from plda_backend import PldaModel, PreprocessChain
from plda_linalg import as_sym_matrix, check_floor, sym_eig, sym_power
from score_fusion import write_cm_scores
from trial_protocol import (
    TRIAL_STATISTICS,
    EmbeddingFormat,
    EmbeddingSet,
    TrialKey,
    TrialList,
    write_embeddings,
    write_enrollment_map,
    write_trials,
)

logger = logging.getLogger(__name__)

# File names written by write_corpus
EMBEDDING_FILES = ("ood", "adapt_bonafide", "adapt_spoofed", "evaluation")
TABLE_FILES = {"enrollment": "enrollment.tsv", "trials": "trials.tsv", "cm_scores": "cm_scores.tsv"}
ATTACK_COUNTS = {"la": 6, "pa": 10}


def default_phi_b(dim):
    return np.diag(np.linspace(3.0, 0.5, dim))


def default_phi_w(dim):
    return np.eye(dim)


@dataclass(frozen=True, eq=False)
class SynthSpec:
    dim: int = 16
    n_speakers: int = 200
    utts_per_speaker: int = 10
    phi_b: Optional[np.ndarray] = None
    phi_w: Optional[np.ndarray] = None
    shift_matrix: Optional[np.ndarray] = None
    shift_offset: Optional[np.ndarray] = None
    spoof_pull: float = 0.8
    spoof_noise_scale: float = 1.0
    seed: int = 0
    n_adapt_speakers: int = 20
    adapt_utts_per_speaker: int = 10
    adapt_spoofs_per_cell: int = 6
    n_attacks: int = 6
    n_eval_speakers: int = 40
    enroll_utts: int = 3
    test_utts: int = 15
    trial_profile: Tuple[str, str] = ("la", "eval")
    trial_scale: float = 0.1
    cm_separation: float = 2.0

    def __post_init__(self):
        if self.dim < 1:
            raise ConfigError(f"dim must be positive, got {self.dim}")
        phi_b = default_phi_b(self.dim) if self.phi_b is None else as_sym_matrix(self.phi_b, "phi_b")
        phi_w = default_phi_w(self.dim) if self.phi_w is None else as_sym_matrix(self.phi_w, "phi_w")
        for name, cov in (("phi_b", phi_b), ("phi_w", phi_w)):
            if cov.shape != (self.dim, self.dim):
                raise ConfigError(f"{name} must be {self.dim}x{self.dim}, got {cov.shape}")
            check_floor(sym_eig(cov).values, what=name)
        object.__setattr__(self, "phi_b", phi_b)
        object.__setattr__(self, "phi_w", phi_w)
        if self.shift_matrix is not None:
            matrix = np.asarray(self.shift_matrix, dtype=np.float64)
            if matrix.shape != (self.dim, self.dim):
                raise ConfigError(f"shift_matrix must be {self.dim}x{self.dim}, got {matrix.shape}")
            object.__setattr__(self, "shift_matrix", matrix)
        if self.shift_offset is not None:
            offset = np.asarray(self.shift_offset, dtype=np.float64)
            if offset.shape != (self.dim,):
                raise ConfigError(f"shift_offset must have {self.dim} entries, got {offset.shape}")
            object.__setattr__(self, "shift_offset", offset)
        if not 0.0 <= self.spoof_pull <= 1.0:
            raise ConfigError(f"spoof_pull must lie in [0, 1], got {self.spoof_pull}")
        if not self.spoof_noise_scale > 0.0:
            raise ConfigError(f"spoof_noise_scale must be positive, got {self.spoof_noise_scale}")
        if self.trial_profile not in TRIAL_STATISTICS:
            raise ConfigError(f"Unknown trial profile {self.trial_profile}")
        if not 0.0 < self.trial_scale:
            raise ConfigError(f"trial_scale must be positive, got {self.trial_scale}")
        counts = {
            "n_speakers": self.n_speakers, "utts_per_speaker": self.utts_per_speaker,
            "n_adapt_speakers": self.n_adapt_speakers, "adapt_utts_per_speaker": self.adapt_utts_per_speaker,
            "n_attacks": self.n_attacks, "enroll_utts": self.enroll_utts, "test_utts": self.test_utts,
        }
        for name, value in counts.items():
            if value < 1:
                raise ConfigError(f"{name} must be positive, got {value}")
        if self.n_eval_speakers < 2:
            raise ConfigError(f"n_eval_speakers must be at least 2, got {self.n_eval_speakers}")
        if self.adapt_spoofs_per_cell < 0:
            raise ConfigError(f"adapt_spoofs_per_cell must be non-negative, got {self.adapt_spoofs_per_cell}")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")

    @property
    def trial_counts(self):
        profile = TRIAL_STATISTICS[self.trial_profile]
        return {TrialKey(key): int(round(n * self.trial_scale)) for key, n in profile.items()}

    @property
    def attack_ids(self):
        return [f"A{k:02d}" for k in range(1, self.n_attacks + 1)]

    def true_model(self):
        """The generating out-of-domain model with an identity preprocessing chain."""
        return PldaModel(
            mu=np.zeros(self.dim), phi_b=self.phi_b, phi_w=self.phi_w,
            chain=PreprocessChain.identity(self.dim),
        ).with_diag_cache()


def random_domain_shift(dim, rng, scale_range=(0.4, 2.5), offset_scale=1.5):
    """Random rotation, anisotropic per-axis scale and offset: (M, b)."""
    rotation = special_ortho_group.rvs(dim, random_state=rng) if dim > 1 else np.eye(1)
    scales = rng.uniform(scale_range[0], scale_range[1], size=dim)
    offset = rng.normal(scale=offset_scale, size=dim)
    return rotation * scales, offset


@dataclass(frozen=True, eq=False)
class SynthCorpus:
    spec: SynthSpec
    ood: EmbeddingSet
    ind_bonafide: EmbeddingSet
    ind_spoofed: EmbeddingSet
    trials: TrialList
    evaluation: EmbeddingSet
    enrollment: Dict[str, List[str]] = field(default_factory=dict)
    cm_scores: pd.Series = field(default_factory=lambda: pd.Series(dtype=np.float64))


class _Sampler:
    def __init__(self, spec, rng):
        self.spec = spec
        self.rng = rng
        self.b_colour = sym_power(spec.phi_b, 0.5)
        self.w_colour = sym_power(spec.phi_w, 0.5)

    def identities(self, n):
        return self.rng.standard_normal((n, self.spec.dim)) @ self.b_colour

    def channel(self, n, scale=1.0):
        return math.sqrt(scale) * self.rng.standard_normal((n, self.spec.dim)) @ self.w_colour

    def spoofs(self, target_identity, n):
        pull = self.spec.spoof_pull
        attackers = self.identities(n)
        return (1.0 - pull) * attackers + pull * target_identity + self.channel(n, self.spec.spoof_noise_scale)

    def in_domain(self, x):
        if self.spec.shift_matrix is not None:
            x = x @ self.spec.shift_matrix.T
        if self.spec.shift_offset is not None:
            x = x + self.spec.shift_offset
        return x


def _pairs(rng, candidates, count, key):
    if count > len(candidates):
        raise ConfigError(
            f"{count} {key.value} trials requested but only {len(candidates)} distinct pairs exist"
        )
    picks = np.sort(rng.choice(len(candidates), size=count, replace=False))
    return [(candidates[i][0], candidates[i][1], key.value, candidates[i][2]) for i in picks]


def synth_corpus(spec):
    """Generate OOD, adaptation, evaluation data, trials and CM scores from `spec`."""
    rng = np.random.default_rng(spec.seed)
    sampler = _Sampler(spec, rng)
    dim = spec.dim

    # OOD training set
    n = spec.utts_per_speaker
    ood_y = sampler.identities(spec.n_speakers)
    ood_x = np.repeat(ood_y, n, axis=0) + sampler.channel(spec.n_speakers * n)
    ood_spk = [f"ood_s{s:04d}" for s in range(spec.n_speakers) for _ in range(n)]
    ood_utt = [f"ood_s{s:04d}_u{u:03d}" for s in range(spec.n_speakers) for u in range(n)]
    ood = EmbeddingSet.from_records(dim, ood_utt, ood_x, speaker_ids=ood_spk)

    # In-domain adaptation pool
    n = spec.adapt_utts_per_speaker
    ind_y = sampler.identities(spec.n_adapt_speakers)
    ind_x = np.repeat(ind_y, n, axis=0) + sampler.channel(spec.n_adapt_speakers * n)
    ind_spk = [f"ind_s{s:04d}" for s in range(spec.n_adapt_speakers) for _ in range(n)]
    ind_utt = [f"{ind_spk[s * n]}_u{u:03d}" for s in range(spec.n_adapt_speakers) for u in range(n)]
    ind_bonafide = EmbeddingSet.from_records(dim, ind_utt, sampler.in_domain(ind_x), speaker_ids=ind_spk)

    k = spec.adapt_spoofs_per_cell
    spoof_rows, spoof_utt, spoof_spk, spoof_att = [], [], [], []
    for s in range(spec.n_adapt_speakers):
        for attack in spec.attack_ids:
            spoof_rows.append(sampler.spoofs(ind_y[s], k))
            spoof_utt += [f"ind_s{s:04d}_{attack}_u{u:03d}" for u in range(k)]
            spoof_spk += [f"ind_s{s:04d}"] * k
            spoof_att += [attack] * k
    spoof_x = np.vstack(spoof_rows) if spoof_utt else np.zeros((0, dim))
    ind_spoofed = EmbeddingSet.from_records(
        dim, spoof_utt, sampler.in_domain(spoof_x), speaker_ids=spoof_spk, attack_ids=spoof_att,
    )

    # Evaluation speakers: enrollment, bonafide tests and spoofs aimed at each speaker
    counts = spec.trial_counts
    n_eval = spec.n_eval_speakers
    spoofs_per_cell = math.ceil(counts[TrialKey.SPOOF] / (n_eval * spec.n_attacks))
    eval_y = sampler.identities(n_eval)
    utt, spk, att, rows = [], [], [], []
    enrollment, tests, spoof_tests = {}, {}, {}
    for s in range(n_eval):
        speaker = f"eval_s{s:04d}"
        enrol_ids = [f"{speaker}_e{u:02d}" for u in range(spec.enroll_utts)]
        test_ids = [f"{speaker}_t{u:03d}" for u in range(spec.test_utts)]
        rows.append(eval_y[s] + sampler.channel(spec.enroll_utts + spec.test_utts))
        utt += enrol_ids + test_ids
        spk += [speaker] * (spec.enroll_utts + spec.test_utts)
        att += [None] * (spec.enroll_utts + spec.test_utts)
        enrollment[speaker] = enrol_ids
        tests[speaker] = test_ids
        spoof_tests[speaker] = []
        for attack in spec.attack_ids:
            ids = [f"{speaker}_{attack}_t{u:03d}" for u in range(spoofs_per_cell)]
            rows.append(sampler.spoofs(eval_y[s], spoofs_per_cell))
            utt += ids
            spk += [speaker] * spoofs_per_cell
            att += [attack] * spoofs_per_cell
            spoof_tests[speaker] += [(i, attack) for i in ids]
    evaluation = EmbeddingSet.from_records(
        dim, utt, sampler.in_domain(np.vstack(rows)), speaker_ids=spk, attack_ids=att,
    )

    # Trials
    speakers = list(enrollment)
    target_pairs = [(m, t, None) for m in speakers for t in tests[m]]
    nontarget_pairs = [(m, t, None) for m in speakers for other in speakers if other != m for t in tests[other]]
    spoof_pairs = [(m, t, a) for m in speakers for t, a in spoof_tests[m]]
    rows = (
        _pairs(rng, target_pairs, counts[TrialKey.TARGET], TrialKey.TARGET)
        + _pairs(rng, nontarget_pairs, counts[TrialKey.NONTARGET], TrialKey.NONTARGET)
        + _pairs(rng, spoof_pairs, counts[TrialKey.SPOOF], TrialKey.SPOOF)
    )
    order = rng.permutation(len(rows))
    trials = TrialList.from_rows([rows[i] for i in order])

    # Countermeasure scores for every test utterance
    test_mask = ~evaluation.labels["utt_id"].isin([u for ids in enrollment.values() for u in ids]).to_numpy()
    test_ids = evaluation.labels["utt_id"].to_numpy()[test_mask]
    bonafide = evaluation.bonafide[test_mask]
    cm = rng.standard_normal(len(test_ids)) + np.where(bonafide, spec.cm_separation, 0.0)
    cm_scores = pd.Series(cm, index=test_ids, name="cm")

    logger.info(
        f"✓ Synthesized corpus (dim={dim}, seed={spec.seed}): {len(ood)} OOD, {len(ind_bonafide)} + "
        f"{len(ind_spoofed)} adaptation, {len(evaluation)} evaluation vectors, {len(trials)} trials"
    )
    return SynthCorpus(
        spec=spec, ood=ood, ind_bonafide=ind_bonafide, ind_spoofed=ind_spoofed, trials=trials,
        evaluation=evaluation, enrollment=enrollment, cm_scores=cm_scores,
    )


def write_corpus(corpus, out_dir, format=EmbeddingFormat.BINARY):
    """Write every corpus file into `out_dir`; returns name -> path."""
    format = EmbeddingFormat(format)
    out_dir = Path(out_dir)
    suffix = ".emb" if format is EmbeddingFormat.BINARY else ".txt"
    paths = {name: out_dir / f"{name}{suffix}" for name in EMBEDDING_FILES}
    paths.update({name: out_dir / filename for name, filename in TABLE_FILES.items()})
    write_embeddings(corpus.ood, paths["ood"], format)
    write_embeddings(corpus.ind_bonafide, paths["adapt_bonafide"], format)
    write_embeddings(corpus.ind_spoofed, paths["adapt_spoofed"], format)
    write_embeddings(corpus.evaluation, paths["evaluation"], format)
    write_enrollment_map(corpus.enrollment, paths["enrollment"])
    write_trials(corpus.trials, paths["trials"])
    write_cm_scores(corpus.cm_scores, paths["cm_scores"])
    logger.info(f"✓ Wrote synthetic corpus to '{out_dir}'")
    return paths
