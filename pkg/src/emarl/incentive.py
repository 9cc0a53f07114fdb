"""Reward augmentation: the count-weighted episodic incentive, conventional
episodic-control regularization, its reward-side equivalent, an elliptical
state-novelty bonus, and a null mode."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

INCENTIVE_MODES = ("ei", "ec", "rec", "e3b", "none")


@dataclass(frozen=True)
class IncentiveConfig:
    mode: str = "ei"
    lambda_ec: float = 0.1
    beta_e3b: float = 0.01
    lambda_e3b: float = 0.1
    clamp: bool = True

    def __post_init__(self):
        if self.mode not in INCENTIVE_MODES:
            raise ValueError(f"unknown incentive mode {self.mode!r}")
        if self.lambda_ec < 0 or self.beta_e3b < 0:
            raise ValueError("scale factors must be nonnegative")
        if self.lambda_e3b <= 0:
            raise ValueError("lambda_e3b must be positive")


def _check_gamma(gamma: float) -> None:
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must be in [0, 1)")


def episodic_incentive(recall, target_max: float, gamma: float,
                       clamp: bool = True) -> float:
    """Count-weighted bonus for a recalled next state.

    Returns gamma * (N_xi / N_call) * max(0, H - target_max); zero on a miss
    or when the record has never closed a desirable episode. With clamp off
    the raw H - target_max gap is kept for ablation.
    """
    _check_gamma(gamma)
    if recall is None:
        return 0.0
    if recall.n_call == 0:
        if recall.n_xi > 0:
            raise ValueError("record has desirable hits but no calls")
        return 0.0
    if recall.n_xi == 0:
        return 0.0
    eta = recall.h - target_max
    if clamp:
        eta = max(0.0, eta)
    return gamma * (recall.n_xi / recall.n_call) * eta


def episodic_incentive_batch(hit: np.ndarray, h: np.ndarray, n_call: np.ndarray,
                             n_xi: np.ndarray, target_max: np.ndarray,
                             gamma: float, clamp: bool = True) -> np.ndarray:
    """Vectorized form over recall_batch outputs."""
    _check_gamma(gamma)
    hit = np.asarray(hit, dtype=bool)
    n_call = np.asarray(n_call, dtype=np.float64)
    n_xi = np.asarray(n_xi, dtype=np.float64)
    if np.any(hit & (n_call == 0) & (n_xi > 0)):
        raise ValueError("record has desirable hits but no calls")
    ratio = np.divide(n_xi, n_call, out=np.zeros_like(n_xi),
                      where=hit & (n_call > 0))
    eta = np.asarray(h, dtype=np.float64) - np.asarray(target_max,
                                                       dtype=np.float64)
    if clamp:
        eta = np.maximum(eta, 0.0)
    return np.where(hit, gamma * ratio * eta, 0.0)


def ec_target(r, gamma: float, h):
    """One-step memory target r + gamma * H(s')."""
    return r + gamma * np.asarray(h, dtype=np.float64)


def ec_loss_term(q_ec, q_tot, lam: float):
    """Regularizer lam * (Q_EC - Q_tot)^2; callers zero it on recall misses."""
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    d = np.asarray(q_ec, dtype=np.float64) - np.asarray(q_tot, dtype=np.float64)
    return lam * d * d


def reward_ec(r, gamma: float, h, q, lam: float):
    """Reward-side equivalent of the regularizer: lam * (r + gamma*H - Q),
    treated as a constant by the loss."""
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    return lam * (r + gamma * np.asarray(h, dtype=np.float64)
                  - np.asarray(q, dtype=np.float64))


class E3BState:
    """Per-episode running inverse covariance of visited embeddings."""

    def __init__(self, embed_dim: int, lambda_e3b: float):
        if lambda_e3b <= 0:
            raise ValueError("lambda_e3b must be positive")
        self.embed_dim = embed_dim
        self.lambda_e3b = lambda_e3b
        self.inv_cov = np.eye(embed_dim) / lambda_e3b

    def reset(self) -> None:
        self.inv_cov = np.eye(self.embed_dim) / self.lambda_e3b


def e3b_bonus(phi: np.ndarray, state: E3BState) -> float:
    """Elliptical bonus b = phi^T C^-1 phi; rank-one-updates C^-1 in place."""
    phi = np.asarray(phi, dtype=np.float64).reshape(-1)
    u = state.inv_cov @ phi
    b = float(phi @ u)
    state.inv_cov -= np.outer(u, u) / (1.0 + b)
    return b


def combined_reward(r, config: IncentiveConfig, *, r_p=0.0, r_ec=0.0,
                    bonus=0.0):
    """Reward actually regressed on, per mode. The ec mode keeps r unchanged
    (its term enters the loss, not the reward)."""
    if config.mode == "ei":
        return r + r_p
    if config.mode == "rec":
        return r + r_ec
    if config.mode == "e3b":
        return r + config.beta_e3b * bonus
    return r
