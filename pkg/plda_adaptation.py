"""
Unsupervised PLDA domain adaptation with an unlabeled in-domain set.

METHODS:
- CORAL   feature space: recolour the out-of-domain training embeddings to the
          in-domain covariance, then re-train the PLDA on them
- CORAL+  model space: move Phi_b and Phi_w toward their pseudo-in-domain
          counterparts, either by plain interpolation or by adding only the
          excess variance found through simultaneous diagonalization
- APLDA   model space: whiten the in-domain covariance with the model total
          covariance and add the variance that exceeds 1 along each
          eigen-direction, weighted by alpha_w / alpha_b

Inputs and outputs live in the model's preprocessed space. The input model is
never modified; every function returns a new PldaModel.
"""
import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np

from backend_errors import ConfigError, DataError, ShapeError
from plda_backend import DEFAULT_EM_ITERS, fit_plda_em
from plda_linalg import (
    EPS_REG,
    coral_transform,
    estimate_mean_cov,
    regularize,
    simul_diag,
    sym_eig,
    sym_power,
    symmetrize,
)

logger = logging.getLogger(__name__)


class AdaptMethod(str, Enum):
    CORAL = "coral"
    CORAL_PLUS = "coral+"
    APLDA = "aplda"


class CoralPlusMode(str, Enum):
    INTERP = "interp"
    UNCERTAINTY = "uncertainty"


# Scenario weights for APLDA
PRESETS = {
    "la": {"alpha_w": 0.25, "alpha_b": 0.0},
    "pa": {"alpha_w": 0.9, "alpha_b": 0.0},
}


@dataclass(frozen=True)
class AdaptConfig:
    method: AdaptMethod = AdaptMethod.CORAL_PLUS
    beta: float = 0.5
    lambda_w: float = 0.5
    alpha_b: float = 0.0
    alpha_w: float = 0.25
    coral_plus_mode: CoralPlusMode = CoralPlusMode.UNCERTAINTY
    update_mean: bool = True
    eps_reg: float = EPS_REG

    def __post_init__(self):
        try:
            object.__setattr__(self, "method", AdaptMethod(self.method))
            object.__setattr__(self, "coral_plus_mode", CoralPlusMode(self.coral_plus_mode))
        except ValueError as e:
            raise ConfigError(str(e)) from e
        for name in ("beta", "lambda_w"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {value}")
        for name in ("alpha_b", "alpha_w", "eps_reg"):
            value = getattr(self, name)
            if not value >= 0.0:
                raise ConfigError(f"{name} must be non-negative, got {value}")

    @classmethod
    def preset(cls, name, method=AdaptMethod.APLDA, **overrides):
        if name not in PRESETS:
            raise ConfigError(f"Unknown preset '{name}', expected one of {sorted(PRESETS)}")
        return cls(method=method, **{**PRESETS[name], **overrides})


def _check_dim(model, embeddings, what):
    if embeddings.dim != model.dim:
        raise ShapeError(f"{what} embeddings have dim {embeddings.dim}, model has {model.dim}")


def coral_recolour(ood, ind, eps_reg=EPS_REG):
    """OOD set mapped by A(x - m_o) + m_o so its covariance becomes the in-domain one."""
    ood_mean, c_out = estimate_mean_cov(ood.vectors)
    _, c_in = estimate_mean_cov(ind.vectors)
    transform = coral_transform(regularize(c_in, eps_reg), regularize(c_out, eps_reg))
    return ood.with_vectors((ood.vectors - ood_mean) @ transform.T + ood_mean)


def coral_adapt(model, ood, ind, cfg, iters=DEFAULT_EM_ITERS):
    """Recolour the OOD set to the in-domain covariance and re-train on it."""
    _check_dim(model, ood, "Out-of-domain")
    _check_dim(model, ind, "In-domain")
    logger.info(f"▶ CORAL: recolouring {len(ood)} OOD vectors to {len(ind)} in-domain vectors")
    recoloured = coral_recolour(ood, ind, cfg.eps_reg)
    adapted = fit_plda_em(recoloured, iters=iters, eps_reg=cfg.eps_reg, chain=model.chain)
    if cfg.update_mean:
        adapted = adapted.updated(mu=ind.vectors.mean(axis=0))
    return adapted


def _coral_plus_update(phi, pseudo, weight, mode):
    if weight == 0.0:
        return phi
    if mode is CoralPlusMode.INTERP:
        return symmetrize((1.0 - weight) * phi + weight * pseudo)
    basis, lam = simul_diag(phi, pseudo)
    unmix = np.linalg.inv(basis)
    boost = 1.0 + weight * np.maximum(lam - 1.0, 0.0)
    return symmetrize((unmix.T * boost) @ unmix)


def coral_plus_adapt(model, ood_cov, ind, cfg):
    """
    Interpolate the PLDA covariances toward A^T Phi A, A = coral_transform(C_I, C_o).

    In UNCERTAINTY mode only the variance the pseudo-in-domain covariance adds
    on top of the current one is blended in, so no direction ever shrinks.
    """
    _check_dim(model, ind, "In-domain")
    c_out = regularize(ood_cov, cfg.eps_reg)
    if c_out.shape != (model.dim, model.dim):
        raise ShapeError(f"OOD covariance is {c_out.shape}, model has dim {model.dim}")
    ind_mean, c_in = estimate_mean_cov(ind.vectors)
    transform = coral_transform(regularize(c_in, cfg.eps_reg), c_out)
    mode = cfg.coral_plus_mode
    logger.info(
        f"▶ CORAL+ ({mode.value}, beta={cfg.beta}, lambda_w={cfg.lambda_w}) on {len(ind)} in-domain vectors"
    )

    phi_b = _coral_plus_update(model.phi_b, transform.T @ model.phi_b @ transform, cfg.beta, mode)
    phi_w = _coral_plus_update(model.phi_w, transform.T @ model.phi_w @ transform, cfg.lambda_w, mode)
    return model.updated(mu=ind_mean if cfg.update_mean else None, phi_b=phi_b, phi_w=phi_w)


def aplda_excess(model, ind_cov):
    """Variance of `ind_cov` exceeding the model total covariance, as a matrix."""
    total = model.total_cov
    whiten = sym_power(total, -0.5)
    colour = sym_power(total, 0.5)
    values, vectors = sym_eig(symmetrize(whiten @ ind_cov @ whiten.T))
    excess = np.maximum(values - 1.0, 0.0)
    directions = colour @ vectors
    return symmetrize((directions * excess) @ directions.T)


def aplda_adapt(model, ind, cfg):
    _check_dim(model, ind, "In-domain")
    ind_mean, ind_cov = estimate_mean_cov(ind.vectors)
    logger.info(f"▶ APLDA (alpha_w={cfg.alpha_w}, alpha_b={cfg.alpha_b}) on {len(ind)} in-domain vectors")
    excess = aplda_excess(model, ind_cov)
    phi_w = model.phi_w if cfg.alpha_w == 0.0 else model.phi_w + cfg.alpha_w * excess
    phi_b = model.phi_b if cfg.alpha_b == 0.0 else model.phi_b + cfg.alpha_b * excess
    logger.debug(f"APLDA excess trace {np.trace(excess):.6g}")
    return model.updated(mu=ind_mean if cfg.update_mean else None, phi_b=phi_b, phi_w=phi_w)


def adapt_model(model, cfg, ind, ood=None, iters=DEFAULT_EM_ITERS):
    """Run the adaptation method selected by `cfg.method`."""
    if len(ind) < 2:
        raise DataError(f"Adaptation needs at least 2 in-domain vectors, got {len(ind)}")
    if cfg.method is AdaptMethod.APLDA:
        adapted = aplda_adapt(model, ind, cfg)
    else:
        if ood is None:
            raise ConfigError(f"{cfg.method.value} adaptation needs the out-of-domain training set")
        if cfg.method is AdaptMethod.CORAL:
            adapted = coral_adapt(model, ood, ind, cfg, iters=iters)
        else:
            _check_dim(model, ood, "Out-of-domain")
            _, ood_cov = estimate_mean_cov(ood.vectors)
            adapted = coral_plus_adapt(model, ood_cov, ind, cfg)
    logger.info(f"✓ Adaptation done: {describe(cfg)} (update_mean={cfg.update_mean})")
    return adapted


def describe(cfg):
    """One-line summary of the parameters that matter for `cfg.method`."""
    if cfg.method is AdaptMethod.APLDA:
        return f"aplda alpha_w={cfg.alpha_w} alpha_b={cfg.alpha_b}"
    if cfg.method is AdaptMethod.CORAL_PLUS:
        return f"coral+ {cfg.coral_plus_mode.value} beta={cfg.beta} lambda_w={cfg.lambda_w}"
    return "coral"
