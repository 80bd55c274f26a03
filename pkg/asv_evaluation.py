"""
EER evaluation of ASV score files against trial lists.

The bonafide condition pits target trials against zero-effort impostors, the
spoofed condition pits the same target trials against spoofing attacks, and
the per-attack breakdown repeats the spoofed condition for each attack id with
the full target set.

EER convention: accept when score >= threshold. The threshold steps over the
distinct pooled scores plus a final reject-everything point, and the EER is
the linear interpolation between the two adjacent operating points that
bracket FRR == FAR.
"""
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Optional

import numpy as np
import pandas as pd

from backend_errors import DataError, DomainError, EmptyInputError, JoinError, ParseError
from trial_protocol import ABSENT, TrialKey, atomic_output, read_text_table

logger = logging.getLogger(__name__)

Z_95 = 1.96
SCORE_COLUMNS = ["model_id", "test_utt", "score"]


class ReportFormat(str, Enum):
    TSV = "tsv"
    MARKDOWN = "markdown"
    JSON = "json"


# ---------------------------------------------------------------------------
# Score files
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ScoreFile:
    """Scores as a DataFrame with columns model_id, test_utt, score (float64)."""
    table: pd.DataFrame

    def __post_init__(self):
        scores = self.table["score"].to_numpy(dtype=np.float64)
        if not np.all(np.isfinite(scores)):
            bad = self.table[~np.isfinite(scores)].iloc[0]
            raise DataError(f"Non-finite score for trial ({bad['model_id']}, {bad['test_utt']})")
        dup = self.table.duplicated(subset=["model_id", "test_utt"])
        if dup.any():
            bad = self.table[dup].iloc[0]
            raise DataError(f"Duplicate score for trial ({bad['model_id']}, {bad['test_utt']})")

    @classmethod
    def from_columns(cls, model_ids, test_utts, scores):
        table = pd.DataFrame({
            "model_id": pd.Series([str(m) for m in model_ids], dtype=object),
            "test_utt": pd.Series([str(t) for t in test_utts], dtype=object),
            "score": pd.Series(np.asarray(scores, dtype=np.float64)),
        })
        return cls(table)

    def __len__(self):
        return len(self.table)

    @property
    def scores(self):
        return self.table["score"].to_numpy(dtype=np.float64)


def load_scores(path):
    table = read_text_table(path, SCORE_COLUMNS)
    if table is None:
        return ScoreFile.from_columns([], [], [])
    incomplete = (table == "").any(axis=1).to_numpy()
    if incomplete.any():
        raise ParseError("expected 'model_id test_utt score'", path,
                         f"line {int(np.flatnonzero(incomplete)[0]) + 1}")
    values = np.empty(len(table))
    for i, text in enumerate(table["score"]):
        try:
            values[i] = float(text)
        except ValueError as e:
            raise ParseError(f"score '{text}' is not a number", path, f"line {i + 1}") from e
    return ScoreFile.from_columns(table["model_id"], table["test_utt"], values)


def write_scores(scores, path):
    with atomic_output(path, "w") as fh:
        for row in scores.table.itertuples(index=False):
            fh.write(f"{row.model_id}\t{row.test_utt}\t{float(row.score)!r}\n")


# ---------------------------------------------------------------------------
# EER and confidence interval
# ---------------------------------------------------------------------------

def operating_points(target_scores, impostor_scores):
    """Thresholds with their (FRR, FAR), the last row being reject-everything."""
    tar = np.sort(np.asarray(target_scores, dtype=np.float64).ravel())
    imp = np.sort(np.asarray(impostor_scores, dtype=np.float64).ravel())
    if tar.size == 0 or imp.size == 0:
        raise EmptyInputError(
            f"EER needs target and impostor scores, got {tar.size} and {imp.size}"
        )
    thresholds = np.unique(np.concatenate([tar, imp]))
    frr = np.searchsorted(tar, thresholds, side="left") / tar.size
    far = 1.0 - np.searchsorted(imp, thresholds, side="left") / imp.size
    thresholds = np.append(thresholds, thresholds[-1])
    frr = np.append(frr, 1.0)
    far = np.append(far, 0.0)
    return thresholds, frr, far


def compute_eer(target_scores, impostor_scores):
    """Return (eer, threshold)."""
    thresholds, frr, far = operating_points(target_scores, impostor_scores)
    gap = frr - far
    j = int(np.argmax(gap >= 0.0))
    # gap[0] == -1 at the lowest threshold, so j >= 1
    step = gap[j] - gap[j - 1]
    t = -gap[j - 1] / step
    eer = frr[j - 1] + t * (frr[j] - frr[j - 1])
    threshold = thresholds[j - 1] + t * (thresholds[j] - thresholds[j - 1])
    return float(eer), float(threshold)


def eer_confidence_interval(eer, n_target, n_impostor):
    """Half-width delta * Z of the parametric 95% interval, as a fraction."""
    if n_target < 1 or n_impostor < 1:
        raise DomainError(f"Trial counts must be positive, got {n_target} and {n_impostor}")
    if not 0.0 <= eer <= 1.0:
        raise DomainError(f"EER must lie in [0, 1], got {eer}")
    delta = 0.5 * np.sqrt(eer * (1.0 - eer) * (n_target + n_impostor) / (n_target * n_impostor))
    return float(delta * Z_95)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AttackResult:
    eer: float
    ci: float
    n_target: int
    n_spoof: int


@dataclass(frozen=True)
class EvalReport:
    eer_bonafide: Optional[float]
    ci_bonafide: Optional[float]
    eer_spoofed: Optional[float]
    ci_spoofed: Optional[float]
    n_target: int = 0
    n_nontarget: int = 0
    n_spoof: int = 0
    per_attack: Dict[str, AttackResult] = field(default_factory=dict)


def _eer_with_ci(target_scores, impostor_scores):
    eer, _ = compute_eer(target_scores, impostor_scores)
    return eer, eer_confidence_interval(eer, len(target_scores), len(impostor_scores))


def evaluate(scores, trials):
    """Bonafide, spoofed and per-attack EERs with confidence intervals."""
    merged = trials.table.merge(scores.table, on=["model_id", "test_utt"], how="left")
    missing = merged["score"].isna().to_numpy()
    if missing.any():
        offenders = merged.loc[missing, ["model_id", "test_utt"]].itertuples(index=False, name=None)
        raise JoinError(list(offenders), int(missing.sum()))
    extra = len(scores) - len(merged)
    if extra > 0:
        logger.warning(f"{extra} score(s) have no matching trial and were ignored")

    keys = merged["key"].to_numpy()
    values = merged["score"].to_numpy(dtype=np.float64)
    target = values[keys == TrialKey.TARGET.value]
    nontarget = values[keys == TrialKey.NONTARGET.value]
    spoof_mask = keys == TrialKey.SPOOF.value
    if target.size == 0:
        raise DomainError("Trial list has no target trials")
    if nontarget.size == 0 and not spoof_mask.any():
        raise DomainError("Trial list has no impostor class (nontarget or spoof)")

    eer_bonafide = ci_bonafide = eer_spoofed = ci_spoofed = None
    if nontarget.size:
        eer_bonafide, ci_bonafide = _eer_with_ci(target, nontarget)
    per_attack = {}
    if spoof_mask.any():
        eer_spoofed, ci_spoofed = _eer_with_ci(target, values[spoof_mask])
        attacks = merged.loc[spoof_mask, "attack_id"].to_numpy()
        for attack in sorted(set(attacks)):
            attack_scores = values[spoof_mask][attacks == attack]
            eer, ci = _eer_with_ci(target, attack_scores)
            per_attack[str(attack)] = AttackResult(eer, ci, int(target.size), int(attack_scores.size))

    report = EvalReport(
        eer_bonafide=eer_bonafide,
        ci_bonafide=ci_bonafide,
        eer_spoofed=eer_spoofed,
        ci_spoofed=ci_spoofed,
        n_target=int(target.size),
        n_nontarget=int(nontarget.size),
        n_spoof=int(spoof_mask.sum()),
        per_attack=per_attack,
    )
    logger.info(
        f"✓ Evaluated {len(merged)} trials: EER bonafide {_percent(eer_bonafide)}%, "
        f"spoofed {_percent(eer_spoofed)}%"
    )
    return report


def _percent(value):
    return ABSENT if value is None else f"{100.0 * value:.2f}"


SUMMARY_COLUMNS = ["eer_bonafide", "ci_bonafide", "eer_spoofed", "ci_spoofed", "n_target", "n_nontarget", "n_spoof"]
ATTACK_COLUMNS = ["attack", "eer", "ci", "n_target", "n_spoof"]


def _summary_rows(report):
    return [[
        _percent(report.eer_bonafide), _percent(report.ci_bonafide),
        _percent(report.eer_spoofed), _percent(report.ci_spoofed),
        str(report.n_target), str(report.n_nontarget), str(report.n_spoof),
    ]]


def _attack_rows(report):
    return [
        [attack, _percent(r.eer), _percent(r.ci), str(r.n_target), str(r.n_spoof)]
        for attack, r in sorted(report.per_attack.items())
    ]


def _tsv_table(columns, rows):
    return "".join("\t".join(cells) + "\n" for cells in [columns] + rows)


def _markdown_table(columns, rows):
    lines = ["| " + " | ".join(columns) + " |", "|" + "|".join("---" for _ in columns) + "|"]
    lines += ["| " + " | ".join(cells) + " |" for cells in rows]
    return "\n".join(lines) + "\n"


def report_to_dict(report):
    return {
        "eer_bonafide": report.eer_bonafide,
        "ci_bonafide": report.ci_bonafide,
        "eer_spoofed": report.eer_spoofed,
        "ci_spoofed": report.ci_spoofed,
        "n_target": report.n_target,
        "n_nontarget": report.n_nontarget,
        "n_spoof": report.n_spoof,
        "per_attack": {
            attack: {"eer": r.eer, "ci": r.ci, "n_target": r.n_target, "n_spoof": r.n_spoof}
            for attack, r in sorted(report.per_attack.items())
        },
    }


def report_from_json(text):
    try:
        data = json.loads(text)
        per_attack = {attack: AttackResult(**values) for attack, values in data.pop("per_attack", {}).items()}
        return EvalReport(**data, per_attack=per_attack)
    except (ValueError, TypeError) as e:
        raise ParseError(f"not a report: {e}") from e


def emit_report(report, format=ReportFormat.TSV):
    format = ReportFormat(format)
    if format is ReportFormat.JSON:
        return json.dumps(report_to_dict(report), sort_keys=True, indent=2) + "\n"
    table = _tsv_table if format is ReportFormat.TSV else _markdown_table
    text = table(SUMMARY_COLUMNS, _summary_rows(report))
    if report.per_attack:
        text += "\n" + table(ATTACK_COLUMNS, _attack_rows(report))
    return text


def _relative_change(value, baseline):
    if value is None or baseline is None or baseline == 0.0:
        return ABSENT
    return f"{100.0 * (value - baseline) / baseline:+.1f}%"


def emit_comparison(reports, format=ReportFormat.TSV):
    """
    Compare labelled systems; `reports` is a list of (label, EvalReport).

    The first system is the baseline for the relative-change columns.
    """
    format = ReportFormat(format)
    if not reports:
        raise DataError("Nothing to compare")
    _, baseline = reports[0]
    if format is ReportFormat.JSON:
        payload = [{"system": label, **report_to_dict(report)} for label, report in reports]
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    columns = ["system", "eer_bonafide", "ci_bonafide", "rel_bonafide", "eer_spoofed", "ci_spoofed", "rel_spoofed"]
    rows = []
    for i, (label, report) in enumerate(reports):
        rows.append([
            label,
            _percent(report.eer_bonafide), _percent(report.ci_bonafide),
            ABSENT if i == 0 else _relative_change(report.eer_bonafide, baseline.eer_bonafide),
            _percent(report.eer_spoofed), _percent(report.ci_spoofed),
            ABSENT if i == 0 else _relative_change(report.eer_spoofed, baseline.eer_spoofed),
        ])
    table = _tsv_table if format is ReportFormat.TSV else _markdown_table
    return table(columns, rows)


def plot_attack_breakdown(reports, path):
    """Grouped bars of per-attack EER (%) with CI error bars, one group per attack."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    attacks = sorted({attack for _, report in reports for attack in report.per_attack})
    if not attacks:
        raise DataError("No per-attack results to plot")
    width = 0.8 / len(reports)
    positions = np.arange(len(attacks))
    fig, ax = plt.subplots(figsize=(11.69, 4.5))
    for i, (label, report) in enumerate(reports):
        eers = [100.0 * report.per_attack[a].eer if a in report.per_attack else np.nan for a in attacks]
        cis = [100.0 * report.per_attack[a].ci if a in report.per_attack else 0.0 for a in attacks]
        ax.bar(positions + i * width, eers, width, yerr=cis, capsize=3, label=label)
    ax.set_xticks(positions + width * (len(reports) - 1) / 2)
    ax.set_xticklabels(attacks)
    ax.set_ylabel("EER (%)")
    ax.set_title("ASV EER per attack", fontsize=14, fontweight="bold")
    ax.legend()
    fig.tight_layout()
    with atomic_output(path, "wb") as fh:
        fig.savefig(fh, format=str(path).rsplit(".", 1)[-1].lower() if "." in str(path) else "pdf")
    plt.close(fig)
    logger.info(f"✓ Per-attack chart written to '{path}'")
