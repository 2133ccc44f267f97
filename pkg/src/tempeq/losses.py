"""Scalar objectives and their gradients.

Each loss ``foo`` has a companion ``foo_grad`` returning the gradient(s) with
respect to its array argument(s). All batch reductions are means over rows.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .diffcore import ShapeError


class InsufficientBatchError(ValueError):
    pass


@dataclass
class VicregWeights:
    lambda_s: float = 15.0
    lambda_v: float = 25.0
    lambda_c: float = 5.0
    eps: float = 1e-4

    def validate(self) -> None:
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"vicreg.{k} must be >= 0")


@dataclass
class TcWeights:
    beta: float = 1.0
    upsilon: float = 0.5


@dataclass
class LossBreakdown:
    s_term: float
    v_term: float
    c_term: float
    contrastive: float
    equivariance: float
    regularization: float
    total: float


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")


def _need_two(z: np.ndarray) -> None:
    if z.shape[0] < 2:
        raise InsufficientBatchError("variance/covariance need at least 2 rows")


# invariance ---------------------------------------------------------------


def invariance_term(z: np.ndarray, z2: np.ndarray) -> float:
    _same_shape(z, z2)
    d = z - z2
    return float(np.mean(np.sum(d * d, axis=1)))


def invariance_grad(z: np.ndarray, z2: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    g = 2.0 * (z - z2) / z.shape[0]
    return g, -g


# variance -----------------------------------------------------------------


def variance_term(z: np.ndarray, eps: float = 1e-4) -> float:
    _need_two(z)
    std = np.sqrt(z.var(axis=0, ddof=1) + eps)
    return float(np.mean(np.maximum(0.0, 1.0 - std)))


def variance_grad(z: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    _need_two(z)
    n, d = z.shape
    zc = z - z.mean(axis=0)
    std = np.sqrt(z.var(axis=0, ddof=1) + eps)
    active = (std < 1.0).astype(np.float64)
    return -(active / (std * d)) * zc / (n - 1)


# covariance ---------------------------------------------------------------


def _off_diag_cov(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    zc = z - z.mean(axis=0)
    cov = zc.T @ zc / (z.shape[0] - 1)
    np.fill_diagonal(cov, 0.0)
    return zc, cov


def covariance_term(z: np.ndarray) -> float:
    _need_two(z)
    _, off = _off_diag_cov(z)
    return float(np.sum(off * off) / z.shape[1])


def covariance_grad(z: np.ndarray) -> np.ndarray:
    _need_two(z)
    n, d = z.shape
    zc, off = _off_diag_cov(z)
    return 4.0 * zc @ off / (d * (n - 1))


# VICReg -------------------------------------------------------------------


def vicreg_loss(z_a: np.ndarray, z_b: np.ndarray, w: VicregWeights) -> dict[str, float]:
    """Weighted VICReg objective; returns raw S, V, C sums and the weighted total."""
    s = invariance_term(z_a, z_b)
    v = variance_term(z_a, w.eps) + variance_term(z_b, w.eps)
    c = covariance_term(z_a) + covariance_term(z_b)
    return {
        "s_term": s,
        "v_term": v,
        "c_term": c,
        "contrastive": w.lambda_s * s + w.lambda_v * v + w.lambda_c * c,
    }


def vicreg_grad(z_a: np.ndarray, z_b: np.ndarray, w: VicregWeights) -> tuple[np.ndarray, np.ndarray]:
    ga, gb = invariance_grad(z_a, z_b)
    ga = w.lambda_s * ga + w.lambda_v * variance_grad(z_a, w.eps) + w.lambda_c * covariance_grad(z_a)
    gb = w.lambda_s * gb + w.lambda_v * variance_grad(z_b, w.eps) + w.lambda_c * covariance_grad(z_b)
    return ga, gb


# equivariance + displacement regularizer ----------------------------------


def equivariance_loss(target: np.ndarray, predicted: np.ndarray) -> float:
    _same_shape(target, predicted)
    d = target - predicted
    return float(np.mean(np.sum(d * d, axis=1)))


def equivariance_grad(target: np.ndarray, predicted: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradient flows into both the target and the prediction (no stop-gradient)."""
    g = 2.0 * (target - predicted) / target.shape[0]
    return g, -g


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def ranknet_pair_probability(s_ij: float) -> float:
    """Logistic probability that item i ranks above item j given score gap s_ij."""
    return float(sigmoid(s_ij))


def ranknet_cross_entropy(s_ij: float, y: float) -> float:
    """Pairwise RankNet loss -y log P - (1-y) log(1-P), via stable softplus."""
    return float(y * softplus(-s_ij) + (1.0 - y) * softplus(s_ij))


def dm_regularization(displacements: np.ndarray) -> float:
    """Mean of log(1 + exp(-||dm||)): the always-ranked-higher RankNet loss on DM norms."""
    norms = np.linalg.norm(np.atleast_2d(displacements), axis=1)
    return float(np.mean(softplus(-norms)))


def dm_regularization_grad(displacements: np.ndarray) -> np.ndarray:
    dm = np.atleast_2d(displacements)
    norms = np.linalg.norm(dm, axis=1)
    safe = np.where(norms > 0.0, norms, 1.0)
    # d/d||dm|| softplus(-||dm||) = -sigmoid(-||dm||); zero subgradient at dm = 0
    coef = np.where(norms > 0.0, -sigmoid(-norms) / safe, 0.0)
    return coef[:, None] * dm / dm.shape[0]


def total_loss(contrastive: float, equivariance: float, regularization: float, w: TcWeights) -> float:
    return contrastive + w.beta * (equivariance + w.upsilon * regularization)


LN2 = math.log(2.0)
