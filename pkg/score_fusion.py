"""
Gaussian back-end fusion of countermeasure (CM) and ASV scores.

Every trial is the 2-vector s = [s_cm, s_asv]. Targets, zero-effort impostors
and spoofing attacks are each modelled by a bivariate Gaussian fitted by
maximum likelihood on a development list, and the fused score is

    log N(s | tar) - log( alpha N(s | non) + (1 - alpha) N(s | spf) )

Higher s_cm means more bonafide and higher s_asv means more target; no sign
flipping is done on load. CM scores are speaker independent and are joined to
trials on test_utt.
"""
import json
import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.special import logsumexp

from asv_evaluation import ScoreFile
from backend_errors import ConfigError, DataError, InsufficientDataError, JoinError, ParseError
from plda_linalg import EPS_REG, estimate_mean_cov, gauss_logpdf, regularize
from trial_protocol import TrialKey, atomic_output, read_text_table, utf8_error

logger = logging.getLogger(__name__)

CLASSES = ("tar", "non", "spf")
CLASS_KEYS = {"tar": TrialKey.TARGET, "non": TrialKey.NONTARGET, "spf": TrialKey.SPOOF}


@dataclass(frozen=True, eq=False)
class GaussianBackend:
    mean_tar: np.ndarray
    mean_non: np.ndarray
    mean_spf: np.ndarray
    cov_tar: np.ndarray
    cov_non: np.ndarray
    cov_spf: np.ndarray
    mix_alpha: float = 0.5
    eps_reg: float = EPS_REG

    def __post_init__(self):
        if not 0.0 < self.mix_alpha < 1.0:
            raise ConfigError(f"mix_alpha must lie in (0, 1), got {self.mix_alpha}")
        if not self.eps_reg >= 0.0:
            raise ConfigError(f"eps_reg must be non-negative, got {self.eps_reg}")
        for name in CLASSES:
            mean = np.asarray(getattr(self, f"mean_{name}"), dtype=np.float64)
            cov = np.asarray(getattr(self, f"cov_{name}"), dtype=np.float64)
            if mean.shape != (2,) or cov.shape != (2, 2):
                raise DataError(f"Class '{name}' needs a 2-vector mean and 2x2 covariance")
            object.__setattr__(self, f"mean_{name}", mean)
            object.__setattr__(self, f"cov_{name}", 0.5 * (cov + cov.T))

    def log_densities(self, points):
        """(n, 3) log densities of the target, nontarget and spoof classes."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        columns = [
            np.atleast_1d(gauss_logpdf(points, getattr(self, f"mean_{name}"),
                                       regularize(getattr(self, f"cov_{name}"), self.eps_reg)))
            for name in CLASSES
        ]
        return np.column_stack(columns)


def _dev_frame(dev_scores):
    frame = pd.DataFrame(dev_scores, columns=["cm", "asv", "key"])
    frame["key"] = [TrialKey(k).value for k in frame["key"]]
    return frame


def fit_gaussian_backend(dev_scores, mix_alpha=0.5, eps_reg=EPS_REG):
    """
    ML fit of the three classes from (s_cm, s_asv, key) rows.

    `dev_scores` is a list of tuples or a DataFrame with columns cm, asv, key.
    """
    frame = _dev_frame(dev_scores)
    params = {}
    for name in CLASSES:
        samples = frame.loc[frame["key"] == CLASS_KEYS[name].value, ["cm", "asv"]].to_numpy(dtype=np.float64)
        if len(samples) < 2:
            raise InsufficientDataError(
                f"Class '{CLASS_KEYS[name].value}' has {len(samples)} development sample(s), need at least 2"
            )
        params[f"mean_{name}"], params[f"cov_{name}"] = estimate_mean_cov(samples)
    backend = GaussianBackend(**params, mix_alpha=mix_alpha, eps_reg=eps_reg)
    logger.info(
        f"✓ Fitted Gaussian back-end on {len(frame)} development trials "
        f"(tar/non/spf means {backend.mean_tar.round(3)}, {backend.mean_non.round(3)}, {backend.mean_spf.round(3)})"
    )
    return backend


def fuse_batch(backend, points):
    logp = backend.log_densities(points)
    weights = np.array([backend.mix_alpha, 1.0 - backend.mix_alpha])
    return logp[:, 0] - logsumexp(logp[:, 1:], axis=1, b=weights)


def fuse_score(backend, s):
    s = np.asarray(s, dtype=np.float64)
    if s.shape != (2,):
        raise DataError(f"Fusion input must be [s_cm, s_asv], got shape {s.shape}")
    if not np.all(np.isfinite(s)):
        raise DataError(f"Fusion input must be finite, got {s}")
    return float(fuse_batch(backend, s)[0])


# ---------------------------------------------------------------------------
# Files and joins
# ---------------------------------------------------------------------------

def load_cm_scores(path):
    """CM scores TSV `test_utt score` as a float Series indexed by test_utt."""
    table = read_text_table(path, ["test_utt", "score"])
    if table is None:
        return pd.Series(dtype=np.float64)
    values = np.empty(len(table))
    for i, text in enumerate(table["score"]):
        try:
            values[i] = float(text)
        except ValueError:
            values[i] = np.nan
        if not np.isfinite(values[i]):
            raise ParseError("expected 'test_utt score' with a finite score", path, f"line {i + 1}")
    dup = table["test_utt"].duplicated().to_numpy()
    if dup.any():
        first = int(np.flatnonzero(dup)[0])
        raise ParseError(f"duplicate test_utt '{table['test_utt'].iloc[first]}'", path, f"line {first + 1}")
    return pd.Series(values, index=table["test_utt"].to_numpy(), name="cm")


def write_cm_scores(cm_scores, path):
    with atomic_output(path, "w") as fh:
        for test_utt, score in cm_scores.items():
            fh.write(f"{test_utt}\t{float(score)!r}\n")


def _attach_cm(table, cm_scores):
    joined = table.merge(cm_scores.rename("cm"), left_on="test_utt", right_index=True, how="left")
    missing = joined["cm"].isna().to_numpy()
    if missing.any():
        offenders = joined.loc[missing, ["model_id", "test_utt"]].itertuples(index=False, name=None)
        raise JoinError(list(offenders), int(missing.sum()))
    return joined


def fuse_scores(backend, asv_scores, cm_scores):
    """Fused ScoreFile in the order of `asv_scores`."""
    joined = _attach_cm(asv_scores.table, cm_scores)
    points = joined[["cm", "score"]].to_numpy(dtype=np.float64)
    fused = fuse_batch(backend, points) if len(points) else np.zeros(0)
    logger.info(f"✓ Fused {len(fused)} trial scores")
    return ScoreFile.from_columns(joined["model_id"], joined["test_utt"], fused)


def dev_scores_from_files(asv_scores, cm_scores, trials):
    """(s_cm, s_asv, key) rows for every trial of a development list."""
    merged = trials.table.merge(asv_scores.table, on=["model_id", "test_utt"], how="left")
    missing = merged["score"].isna().to_numpy()
    if missing.any():
        offenders = merged.loc[missing, ["model_id", "test_utt"]].itertuples(index=False, name=None)
        raise JoinError(list(offenders), int(missing.sum()))
    joined = _attach_cm(merged, cm_scores)
    return pd.DataFrame({"cm": joined["cm"].to_numpy(), "asv": joined["score"].to_numpy(), "key": joined["key"]})


def fit_gaussian_backend_from_files(asv_scores, cm_scores, trials, mix_alpha=0.5, eps_reg=EPS_REG):
    return fit_gaussian_backend(dev_scores_from_files(asv_scores, cm_scores, trials), mix_alpha, eps_reg)


def save_backend(backend, path):
    payload = {"mix_alpha": backend.mix_alpha, "eps_reg": backend.eps_reg}
    for name in CLASSES:
        payload[f"mean_{name}"] = getattr(backend, f"mean_{name}").tolist()
        payload[f"cov_{name}"] = getattr(backend, f"cov_{name}").tolist()
    with atomic_output(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_backend(path):
    with open(path, "r", encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except UnicodeDecodeError as e:
            raise utf8_error(path, e) from e
        except json.JSONDecodeError as e:
            raise ParseError(str(e), path, f"line {e.lineno}") from e
    try:
        return GaussianBackend(**payload)
    except TypeError as e:
        raise ParseError(f"unexpected fields: {e}", path) from e
