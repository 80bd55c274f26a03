#!/usr/bin/env python3
"""
Spoofing-aware speaker verification back-end: command-line entry point.

OVERVIEW:
Every subcommand maps onto one back-end operation and reads / writes the
plain file formats of the library modules:

    fit-backend        LDA + PLDA training on labelled out-of-domain embeddings
    adapt              CORAL / CORAL+ / APLDA adaptation with in-domain data
    enroll             enrollment statistics from an enrollment map
    score              PLDA LLR scores for a trial list
    evaluate           EER report (bonafide / spoofed / per attack), comparisons, charts
    fuse-fit           Gaussian back-end fit on development ASV + CM scores
    fuse-apply         fused tandem scores
    sample-adapt-set   balanced adaptation-set sampling
    synth              seeded synthetic corpus with every file the pipeline needs
    inspect-model      print (or diff) a PLDA model

CONFIGURATION (lowest to highest priority):
    RunConfig defaults < key = value config file (--config, or SPOOFAWARE_CONFIG
    from the environment / .env) < --preset la|pa < explicit flags

EXIT CODES:
    0 success, 1 usage or configuration error, 2 data / parse error, 3 numeric error

Diagnostics go to stderr; stdout only carries reports and inspect-model output.
"""
import argparse
import logging
import os
import sys
from dataclasses import dataclass, fields, replace

import numpy as np
from dotenv import dotenv_values, load_dotenv

from asv_evaluation import (
    ReportFormat,
    emit_comparison,
    emit_report,
    evaluate,
    load_scores,
    plot_attack_breakdown,
    write_scores,
)
from backend_errors import BackendError, ConfigError, NumericError, ShapeError
from plda_adaptation import PRESETS, AdaptConfig, AdaptMethod, CoralPlusMode, adapt_model
from plda_backend import (
    DEFAULT_EM_ITERS,
    DEFAULT_LDA_DIM,
    SCORERS,
    apply_preprocess,
    enroll_all,
    fit_plda_em,
    fit_preprocess,
    load_enroll_stats,
    load_model,
    save_enroll_stats,
    save_model,
    score_trials,
)
from plda_linalg import EPS_REG
from score_fusion import (
    fit_gaussian_backend_from_files,
    fuse_scores,
    load_backend,
    load_cm_scores,
    save_backend,
)
from synthetic_corpus import ATTACK_COUNTS, SynthSpec, random_domain_shift, synth_corpus, write_corpus
from trial_protocol import (
    EMBEDDING_MAGIC,
    TRIAL_STATISTICS,
    EmbeddingFormat,
    EmbeddingSet,
    SamplePlan,
    SampleStrategy,
    atomic_output,
    load_embeddings,
    load_enrollment_map,
    parse_trials,
    sample_adaptation_set,
    write_embeddings,
)

logger = logging.getLogger(__name__)

CONFIG_ENV_VAR = "SPOOFAWARE_CONFIG"
LOG_FORMAT = "%(asctime)s %(levelname)s %(message)s"
LOG_DATEFMT = "%Y-%m-%d %H:%M:%S"


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    lda_dim: int = DEFAULT_LDA_DIM
    em_iters: int = DEFAULT_EM_ITERS
    alpha_w: float = 0.25
    alpha_b: float = 0.0
    beta: float = 0.5
    lambda_w: float = 0.5
    coral_plus_mode: str = CoralPlusMode.UNCERTAINTY.value
    update_mean: bool = True
    mix_alpha: float = 0.5
    seed: int = 0
    eps_reg: float = EPS_REG
    workers: int = 1

    def validate(self):
        checks = [
            (self.lda_dim >= 1, "lda_dim must be at least 1"),
            (self.em_iters >= 0, "em_iters must be non-negative"),
            (0.0 <= self.beta <= 1.0, "beta must lie in [0, 1]"),
            (0.0 <= self.lambda_w <= 1.0, "lambda_w must lie in [0, 1]"),
            (self.alpha_w >= 0.0, "alpha_w must be non-negative"),
            (self.alpha_b >= 0.0, "alpha_b must be non-negative"),
            (0.0 < self.mix_alpha < 1.0, "mix_alpha must lie in (0, 1)"),
            (self.eps_reg >= 0.0, "eps_reg must be non-negative"),
            (self.workers >= 1, "workers must be at least 1"),
            (0 <= self.seed < 2 ** 64, "seed must be an unsigned 64-bit integer"),
            (self.coral_plus_mode in {m.value for m in CoralPlusMode},
             f"coral_plus_mode must be one of {sorted(m.value for m in CoralPlusMode)}"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        return self

    def adapt_config(self, method):
        return AdaptConfig(
            method=method, beta=self.beta, lambda_w=self.lambda_w, alpha_b=self.alpha_b,
            alpha_w=self.alpha_w, coral_plus_mode=self.coral_plus_mode,
            update_mean=self.update_mean, eps_reg=self.eps_reg,
        )


CONFIG_FIELDS = {f.name: f.type for f in fields(RunConfig)}


def _convert(key, raw):
    kind = CONFIG_FIELDS[key]
    if isinstance(raw, str):
        raw = raw.strip()
    try:
        if kind in (bool, "bool"):
            if isinstance(raw, bool):
                return raw
            lowered = raw.lower()
            if lowered not in {"true", "false", "1", "0", "yes", "no"}:
                raise ValueError(raw)
            return lowered in {"true", "1", "yes"}
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
        return str(raw)
    except ValueError as e:
        raise ConfigError(f"Config key '{key}' has invalid value '{raw}'") from e


def read_config_file(path):
    """Parse a flat `key = value` file into typed RunConfig overrides."""
    if not os.path.exists(path):
        raise ConfigError(f"Config file not found: {path}")
    try:
        values = dotenv_values(path, encoding="utf-8")
    except UnicodeDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid UTF-8: {e.reason}") from e
    overrides = {}
    for key, raw in values.items():
        name = key.strip().lower()
        if name not in CONFIG_FIELDS:
            raise ConfigError(f"Unknown config key '{key}' in {path}")
        if raw is None:
            raise ConfigError(f"Config key '{key}' in {path} has no value")
        overrides[name] = _convert(name, raw)
    return overrides


def resolve_config(config_path=None, preset=None, flags=None):
    config = RunConfig()
    config_path = config_path or os.getenv(CONFIG_ENV_VAR)
    if config_path:
        config = replace(config, **read_config_file(config_path))
        logger.info(f"✓ Loaded configuration from '{config_path}'")
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"Unknown preset '{preset}'")
        config = replace(config, **PRESETS[preset])
    if flags:
        config = replace(config, **flags)
    return config.validate()


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

class CliParser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors exit with code 1."""

    def error(self, message):
        self.print_help(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _config_parent():
    parent = argparse.ArgumentParser(add_help=False)
    group = parent.add_argument_group("configuration (overrides the config file)")
    group.add_argument("--config", help=f"flat key = value file (default: ${CONFIG_ENV_VAR})")
    group.add_argument("--preset", choices=sorted(PRESETS), help="scenario weights: la or pa")
    group.add_argument("--lda-dim", dest="lda_dim", type=int)
    group.add_argument("--em-iters", dest="em_iters", type=int)
    group.add_argument("--alpha-w", dest="alpha_w", type=float)
    group.add_argument("--alpha-b", dest="alpha_b", type=float)
    group.add_argument("--beta", type=float)
    group.add_argument("--lambda-w", dest="lambda_w", type=float)
    group.add_argument("--coral-plus-mode", dest="coral_plus_mode", choices=[m.value for m in CoralPlusMode])
    group.add_argument("--no-update-mean", dest="update_mean", action="store_const", const=False)
    group.add_argument("--mix-alpha", dest="mix_alpha", type=float)
    group.add_argument("--seed", type=int)
    group.add_argument("--eps-reg", dest="eps_reg", type=float)
    group.add_argument("--workers", type=int)
    verbosity = parent.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    return parent


def build_parser():
    parent = _config_parent()
    parser = CliParser(
        prog="spoofaware_backend.py",
        description="PLDA back-end with unsupervised domain adaptation for spoofing-aware speaker verification.",
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=CliParser)
    sub.required = True

    p = sub.add_parser("fit-backend", parents=[parent], help="train LDA + PLDA on labelled embeddings")
    p.add_argument("--train", required=True, help="speaker-labelled out-of-domain embeddings")
    p.add_argument("--model", required=True, help="output PLDA1 model file")

    p = sub.add_parser("adapt", parents=[parent], help="adapt a PLDA model to in-domain data")
    p.add_argument("--model", required=True)
    p.add_argument("--method", required=True, choices=[m.value for m in AdaptMethod])
    p.add_argument("--ind", required=True, help="in-domain bonafide embeddings")
    p.add_argument("--ind-spoofed", help="in-domain spoofed embeddings")
    p.add_argument("--data", default=SampleStrategy.BONAFIDE_ONLY.value,
                   choices=[s.value for s in SampleStrategy], help="adaptation-set composition")
    p.add_argument("--budget", type=int, default=1290, help="utterances for the balanced strategies")
    p.add_argument("--ood", help="out-of-domain training embeddings (coral and coral+)")
    p.add_argument("--out", required=True, help="output adapted model")

    p = sub.add_parser("enroll", parents=[parent], help="compute enrollment statistics")
    p.add_argument("--model", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--enrollment", required=True, help="TSV model_id utt_id")
    p.add_argument("--out", required=True)

    p = sub.add_parser("score", parents=[parent], help="score a trial list")
    p.add_argument("--model", required=True)
    p.add_argument("--enroll-stats", dest="enroll_stats", required=True)
    p.add_argument("--embeddings", required=True, help="test embeddings")
    p.add_argument("--trials", required=True)
    p.add_argument("--method", default="stacked", choices=sorted(SCORERS))
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", parents=[parent], help="EER report for one or more score files")
    p.add_argument("--scores", required=True, nargs="+")
    p.add_argument("--label", nargs="+", help="system labels, one per score file")
    p.add_argument("--trials", required=True)
    p.add_argument("--format", default=ReportFormat.TSV.value, choices=[f.value for f in ReportFormat])
    p.add_argument("--breakdown", default="none", choices=["none", "attack"])
    p.add_argument("--plot", help="per-attack chart (.pdf or .png)")
    p.add_argument("--out", help="write the report here instead of stdout")

    p = sub.add_parser("fuse-fit", parents=[parent], help="fit the Gaussian fusion back-end")
    p.add_argument("--scores", required=True, help="development ASV scores")
    p.add_argument("--cm", required=True, help="development CM scores (test_utt score)")
    p.add_argument("--fusion-dev", dest="fusion_dev", required=True, help="development trial list")
    p.add_argument("--out", required=True, help="output back-end JSON")

    p = sub.add_parser("fuse-apply", parents=[parent], help="fuse ASV and CM scores")
    p.add_argument("--backend", required=True)
    p.add_argument("--scores", required=True)
    p.add_argument("--cm", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("sample-adapt-set", parents=[parent], help="sample an adaptation set")
    p.add_argument("--bonafide", required=True)
    p.add_argument("--spoofed", required=True)
    p.add_argument("--strategy", required=True, choices=[s.value for s in SampleStrategy])
    p.add_argument("--budget", type=int, default=1290)
    p.add_argument("--emb-format", dest="emb_format", default=EmbeddingFormat.BINARY.value,
                   choices=[f.value for f in EmbeddingFormat])
    p.add_argument("--out", required=True)

    p = sub.add_parser("synth", parents=[parent], help="write a seeded synthetic corpus")
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--speakers", type=int, default=200, help="out-of-domain speakers")
    p.add_argument("--utts", type=int, default=10, help="utterances per out-of-domain speaker")
    p.add_argument("--adapt-speakers", dest="adapt_speakers", type=int, default=20)
    p.add_argument("--eval-speakers", dest="eval_speakers", type=int, default=40)
    p.add_argument("--spoof-pull", dest="spoof_pull", type=float, default=0.8)
    p.add_argument("--spoof-noise", dest="spoof_noise", type=float, default=1.0)
    p.add_argument("--shift", action="store_true", help="apply a random in-domain shift")
    p.add_argument("--profile", choices=[f"{a}-{b}" for a, b in sorted(TRIAL_STATISTICS)],
                   help="trial-count profile (default: <preset>-eval)")
    p.add_argument("--trial-scale", dest="trial_scale", type=float, default=0.1)
    p.add_argument("--emb-format", dest="emb_format", default=EmbeddingFormat.BINARY.value,
                   choices=[f.value for f in EmbeddingFormat])

    p = sub.add_parser("inspect-model", parents=[parent], help="print a model summary")
    p.add_argument("--model", required=True)
    p.add_argument("--diff", help="print the largest absolute differences to this model")
    p.add_argument("--full", action="store_true", help="print the full matrices")

    return parser


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def load_any_embeddings(path):
    """Load an embedding file, telling BINARY from TEXT by its magic."""
    with open(path, "rb") as fh:
        head = fh.read(len(EMBEDDING_MAGIC))
    fmt = EmbeddingFormat.BINARY if head == EMBEDDING_MAGIC else EmbeddingFormat.TEXT
    return load_embeddings(path, fmt)


def cmd_fit_backend(args, config):
    train = load_any_embeddings(args.train)
    chain = fit_preprocess(train, config.lda_dim, config.eps_reg)
    model = fit_plda_em(apply_preprocess(chain, train), iters=config.em_iters,
                        eps_reg=config.eps_reg, chain=chain)
    save_model(model, args.model)


def cmd_adapt(args, config):
    model = load_model(args.model)
    bonafide = load_any_embeddings(args.ind)
    plan = SamplePlan(args.data, args.budget, config.seed)
    if plan.strategy is SampleStrategy.BONAFIDE_ONLY:
        spoofed = EmbeddingSet.empty(bonafide.dim)
    elif args.ind_spoofed is None:
        raise ConfigError(f"--data {plan.strategy.value} needs --ind-spoofed")
    else:
        spoofed = load_any_embeddings(args.ind_spoofed)
    method = AdaptMethod(args.method)
    if method is not AdaptMethod.APLDA and args.ood is None:
        raise ConfigError(f"--method {method.value} needs --ood")

    ind = apply_preprocess(model.chain, sample_adaptation_set(bonafide, spoofed, plan))
    ood = apply_preprocess(model.chain, load_any_embeddings(args.ood)) if args.ood else None
    adapted = adapt_model(model, config.adapt_config(method), ind, ood, iters=config.em_iters)
    save_model(adapted, args.out)


def cmd_enroll(args, config):
    model = load_model(args.model)
    enrollment = load_enrollment_map(args.enrollment)
    embeddings = load_any_embeddings(args.embeddings)
    wanted = {u for utts in enrollment.values() for u in utts}
    embeddings = embeddings.subset(embeddings.labels["utt_id"].isin(list(wanted)).to_numpy())
    stats = enroll_all(model, apply_preprocess(model.chain, embeddings), enrollment)
    save_enroll_stats(stats, args.out)
    logger.info(f"✓ Enrolled {len(stats)} models")


def cmd_score(args, config):
    model = load_model(args.model)
    stats = load_enroll_stats(args.enroll_stats)
    trials = parse_trials(args.trials)
    tests = load_any_embeddings(args.embeddings)
    wanted = set(trials.table["test_utt"])
    tests = tests.subset(tests.labels["utt_id"].isin(list(wanted)).to_numpy())
    scores = score_trials(model, stats, apply_preprocess(model.chain, tests), trials,
                          method=args.method, workers=config.workers)
    write_scores(scores, args.out)


def cmd_evaluate(args, config):
    labels = args.label or [os.path.basename(path) for path in args.scores]
    if len(labels) != len(args.scores):
        raise ConfigError(f"{len(args.scores)} score files but {len(labels)} labels")
    trials = parse_trials(args.trials)
    reports = []
    for label, path in zip(labels, args.scores):
        report = evaluate(load_scores(path), trials)
        reports.append((label, report))
    if args.plot:
        plot_attack_breakdown(reports, args.plot)
    if args.breakdown == "none":
        reports = [(label, replace(report, per_attack={})) for label, report in reports]
    if len(reports) == 1:
        text = emit_report(reports[0][1], args.format)
    else:
        text = emit_comparison(reports, args.format)
    if args.out:
        with atomic_output(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_fuse_fit(args, config):
    backend = fit_gaussian_backend_from_files(
        load_scores(args.scores), load_cm_scores(args.cm), parse_trials(args.fusion_dev),
        mix_alpha=config.mix_alpha, eps_reg=config.eps_reg,
    )
    save_backend(backend, args.out)


def cmd_fuse_apply(args, config):
    backend = load_backend(args.backend)
    fused = fuse_scores(backend, load_scores(args.scores), load_cm_scores(args.cm))
    write_scores(fused, args.out)


def cmd_sample_adapt_set(args, config):
    plan = SamplePlan(args.strategy, args.budget, config.seed)
    sampled = sample_adaptation_set(load_any_embeddings(args.bonafide), load_any_embeddings(args.spoofed), plan)
    write_embeddings(sampled, args.out, args.emb_format)


def cmd_synth(args, config):
    scenario = args.preset or "la"
    profile = tuple(args.profile.split("-")) if args.profile else (scenario, "eval")
    shift_matrix = shift_offset = None
    if args.shift:
        shift_matrix, shift_offset = random_domain_shift(args.dim, np.random.default_rng([config.seed, 1]))
    spec = SynthSpec(
        dim=args.dim, n_speakers=args.speakers, utts_per_speaker=args.utts,
        shift_matrix=shift_matrix, shift_offset=shift_offset,
        spoof_pull=args.spoof_pull, spoof_noise_scale=args.spoof_noise, seed=config.seed,
        n_adapt_speakers=args.adapt_speakers, n_attacks=ATTACK_COUNTS[scenario],
        n_eval_speakers=args.eval_speakers, trial_profile=profile, trial_scale=args.trial_scale,
    )
    write_corpus(synth_corpus(spec), args.out_dir, args.emb_format)


def _format_matrix(m):
    return np.array2string(np.asarray(m), precision=6, suppress_small=True, max_line_width=160)


def cmd_inspect_model(args, config):
    model = load_model(args.model)
    chain = model.chain
    lines = [
        f"model\t{args.model}",
        f"dim\t{model.dim}",
        f"input_dim\t{chain.input_dim}",
        f"length_norm\t{chain.length_norm}",
        f"trace_phi_b\t{np.trace(model.phi_b)!r}",
        f"trace_phi_w\t{np.trace(model.phi_w)!r}",
        f"psi\t{' '.join(f'{v:.6g}' for v in model.diag_cache.psi)}",
    ]
    if args.full:
        for name in ("mu", "phi_b", "phi_w"):
            lines.append(f"{name}\n{_format_matrix(getattr(model, name))}")
    if args.diff:
        other = load_model(args.diff)
        pairs = {
            "mu": (model.mu, other.mu), "phi_b": (model.phi_b, other.phi_b), "phi_w": (model.phi_w, other.phi_w),
            "global_mean": (chain.global_mean, other.chain.global_mean), "lda": (chain.lda, other.chain.lda),
        }
        for name, (a, b) in pairs.items():
            if a.shape != b.shape:
                raise ShapeError(f"{name} shapes differ: {a.shape} vs {b.shape}")
            lines.append(f"max_abs_diff_{name}\t{float(np.max(np.abs(a - b))) if a.size else 0.0!r}")
    sys.stdout.write("\n".join(lines) + "\n")


COMMANDS = {
    "fit-backend": cmd_fit_backend,
    "adapt": cmd_adapt,
    "enroll": cmd_enroll,
    "score": cmd_score,
    "evaluate": cmd_evaluate,
    "fuse-fit": cmd_fuse_fit,
    "fuse-apply": cmd_fuse_apply,
    "sample-adapt-set": cmd_sample_adapt_set,
    "synth": cmd_synth,
    "inspect-model": cmd_inspect_model,
}


def configure_logging(verbose=False, quiet=False):
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT, datefmt=LOG_DATEFMT, stream=sys.stderr)
    logging.getLogger().setLevel(level)


def run_cli(argv=None):
    """Run one subcommand and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 0
    configure_logging(args.verbose, args.quiet)
    load_dotenv()

    flags = {name: getattr(args, name) for name in CONFIG_FIELDS if getattr(args, name, None) is not None}
    try:
        config = resolve_config(args.config, args.preset, flags)
        logger.info(f"▶ {args.command}")
        COMMANDS[args.command](args, config)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return 1
    except NumericError as e:
        logger.error(f"Numeric error: {e}")
        return 3
    except (BackendError, OSError) as e:
        logger.error(f"Data error: {e}")
        return 2
    logger.info(f"✅ {args.command} complete")
    return 0


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
