"""
Rigid coherent point drift: EM registration of a source cloud onto a
target cloud, with Gaussian mixture centroids at the transformed source
points and an optional uniform outlier component.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from errors import HarnessError
from geometry import RigidTransform
from logging_config import get_logger
from models import CpdConfig

logger = get_logger(__name__)

_SIGMA2_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class CpdResult:
    transform: RigidTransform  # source -> target
    log_likelihood: float  # mean per target point
    iterations: int
    converged: bool
    sigma2: float


def _log_posterior(target: np.ndarray, moved: np.ndarray, sigma2: float, w: float) -> Tuple[np.ndarray, float]:
    """log P(m | x_n) with shape (M, N), and the mean log-likelihood of the target."""
    n, m = len(target), len(moved)
    log_k = -cdist(moved, target, "sqeuclidean") / (2.0 * sigma2)
    log_norm = -1.5 * np.log(2.0 * np.pi * sigma2)
    log_comp = log_k + log_norm + np.log((1.0 - w) / m)
    if w > 0.0:
        # Uniform outlier density over the target's bounding volume.
        span = np.prod(np.maximum(np.ptp(target, axis=0), 1e-12))
        log_outlier = np.full((1, n), np.log(w / span))
        log_comp = np.concatenate([log_comp, log_outlier], axis=0)
    log_px = logsumexp(log_comp, axis=0)
    return log_comp[:m] - log_px, float(log_px.mean())


def cpd_rigid_register(
    source: np.ndarray,
    target: np.ndarray,
    config: Optional[CpdConfig] = None,
) -> CpdResult:
    """
    Align `source` to `target` without scale. Stops when the mean
    log-likelihood changes by less than `tol` or the variance reaches its
    floor; returns the last iterate with `converged` False after `max_iters`.
    """
    config = config or CpdConfig()
    y = np.asarray(source, dtype=float).reshape(-1, 3)
    x = np.asarray(target, dtype=float).reshape(-1, 3)
    if len(x) < 4 or len(y) < 4:
        raise HarnessError("coherent point drift needs at least 4 points in each cloud")
    n, m = len(x), len(y)

    rotation, translation = np.eye(3), np.zeros(3)
    sigma2 = float(cdist(y, x, "sqeuclidean").sum() / (3.0 * n * m))
    floor = _SIGMA2_FLOOR * max(sigma2, 1e-300)
    previous = -np.inf
    converged = False
    loglik = -np.inf
    iteration = 0

    for iteration in range(1, config.max_iters + 1):
        moved = y @ rotation.T + translation
        log_p, loglik = _log_posterior(x, moved, sigma2, config.w_outlier)
        p = np.exp(log_p)
        n_p = p.sum()
        if n_p <= 0.0:
            break
        mu_x = p.sum(axis=0) @ x / n_p
        mu_y = p.sum(axis=1) @ y / n_p
        xc, yc = x - mu_x, y - mu_y
        a = xc.T @ p.T @ yc
        u, _, vt = np.linalg.svd(a)
        d = np.sign(np.linalg.det(u @ vt))
        rotation = u @ np.diag([1.0, 1.0, d]) @ vt
        translation = mu_x - rotation @ mu_y
        sigma2 = float((p.sum(axis=0) @ (xc * xc).sum(axis=1) - np.trace(a.T @ rotation)) / (3.0 * n_p))
        logger.debug("CPD iteration %d: loglik %.8g sigma2 %.3g", iteration, loglik, sigma2)
        if sigma2 <= floor:
            sigma2 = floor
            converged = True
            break
        if abs(loglik - previous) < config.tol:
            converged = True
            break
        previous = loglik

    return CpdResult(
        transform=RigidTransform.from_rotation(rotation, translation),
        log_likelihood=loglik,
        iterations=iteration,
        converged=converged,
        sigma2=sigma2,
    )
