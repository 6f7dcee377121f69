"""Truncated generalized stick-breaking mixture of diagonal Gaussians.

Break fractions are Beta(alpha_k, beta_k) with unconstrained (raw) parameters
mapped through a floored softplus.  Mixture weights enter the objective as
their analytic expectations

    w_k = E[v_k] * prod_{j<k} E[1 - v_j],    k < K,

with the remainder mass assigned to the last component, so the weight vector
is an exact simplex for any raw parameters and gradients with respect to the
Beta parameters are available in closed form.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .numerics import RngStream

__all__ = [
    "ALPHA_FLOOR",
    "StickBreakingBase",
    "beta_params",
    "expected_weights",
    "component_log_density",
    "mixture_log_density",
    "init_base",
]

ALPHA_FLOOR = 1e-4
_LOG_2PI = float(np.log(2.0 * np.pi))
# softplus(RAW_UNIT) + ALPHA_FLOOR == 1, so fresh bases start at Beta(1, 1)
RAW_UNIT = float(np.log(np.expm1(1.0 - ALPHA_FLOOR)))


def beta_params(raw):
    """Map unconstrained reals to Beta parameters > ALPHA_FLOOR."""
    return ALPHA_FLOOR + ad.softplus(raw)


def expected_weights(raw_alpha, raw_beta):
    """Expected stick-breaking weights; exact simplex of length K.

    ``raw_alpha``/``raw_beta`` hold K-1 entries; component K-1 receives the
    remaining stick.
    """
    n_break = ad.val(raw_alpha).shape[0]
    if n_break == 0:
        return np.ones(1) if not isinstance(raw_alpha, ad.Node) else ad.as_node(np.ones(1))
    a = beta_params(raw_alpha)
    b = beta_params(raw_beta)
    mean = a / (a + b)
    frac = b / (a + b)
    logcp = ad.cumsum(ad.log(frac), axis=0)
    cp = ad.exp(logcp)
    if n_break == 1:
        prefix = np.ones(1)
    else:
        prefix = ad.concatenate([np.ones(1), cp[:-1]], axis=0)
    return ad.concatenate([mean * prefix, cp[-1:]], axis=0)


def component_log_density(mu_k, log_sigma_k, z):
    """Diagonal Gaussian log-density of rows of ``z`` under one component."""
    d = ad.val(mu_k).shape[-1]
    diff = (z - mu_k) * ad.exp(-log_sigma_k)
    quad = ad.sum_(ad.square(diff), axis=-1)
    return -0.5 * d * _LOG_2PI - ad.sum_(log_sigma_k) - 0.5 * quad


@dataclass
class StickBreakingBase:
    """Mixture parameters; K components in d dimensions."""

    mu: np.ndarray
    log_sigma: np.ndarray
    raw_alpha: np.ndarray
    raw_beta: np.ndarray

    def __post_init__(self):
        self.mu = np.atleast_2d(np.asarray(self.mu, dtype=float))
        self.log_sigma = np.atleast_2d(np.asarray(self.log_sigma, dtype=float))
        self.raw_alpha = np.asarray(self.raw_alpha, dtype=float)
        self.raw_beta = np.asarray(self.raw_beta, dtype=float)
        if self.mu.shape != self.log_sigma.shape:
            raise ValueError("mu and log_sigma must have matching shapes")
        if self.raw_alpha.shape != (self.K - 1,) or self.raw_beta.shape != (self.K - 1,):
            raise ValueError("need K-1 raw Beta parameter pairs")

    @property
    def K(self) -> int:
        return self.mu.shape[0]

    @property
    def dim(self) -> int:
        return self.mu.shape[1]

    def expected_weights(self) -> np.ndarray:
        return expected_weights(self.raw_alpha, self.raw_beta)

    def component_sample(self, k: int, n: int, rng):
        """Reparameterized draws from component k; the noise is returned so
        gradients can flow to the location/scale."""
        if not 0 <= k < self.K:
            raise IndexError(f"component index {k} out of range [0, {self.K})")
        gen = rng.generator() if isinstance(rng, RngStream) else rng
        eps = gen.standard_normal((n, self.dim))
        z = self.mu[k] + np.exp(self.log_sigma[k]) * eps
        return z, eps

    def component_log_density(self, k: int, z) -> np.ndarray:
        if not 0 <= k < self.K:
            raise IndexError(f"component index {k} out of range [0, {self.K})")
        return component_log_density(self.mu[k], self.log_sigma[k], ad.val(z))

    def mixture_log_density(self, z) -> np.ndarray:
        return mixture_log_density(self, z)

    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "d": self.dim,
            "mu": self.mu.tolist(),
            "log_sigma": self.log_sigma.tolist(),
            "raw_alpha": self.raw_alpha.tolist(),
            "raw_beta": self.raw_beta.tolist(),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "StickBreakingBase":
        return cls(
            mu=np.array(payload["mu"], dtype=float),
            log_sigma=np.array(payload["log_sigma"], dtype=float),
            raw_alpha=np.array(payload["raw_alpha"], dtype=float),
            raw_beta=np.array(payload["raw_beta"], dtype=float),
        )


def mixture_log_density(base: StickBreakingBase, z) -> np.ndarray:
    """Stabilized log of the expected-weight Gaussian mixture density."""
    z = np.atleast_2d(ad.val(z))
    w = ad.val(base.expected_weights())
    mu = base.mu[:, None, :]
    sig = np.exp(base.log_sigma)[:, None, :]
    quad = np.sum(((z[None] - mu) / sig) ** 2, axis=-1)
    comp = (-0.5 * base.dim * _LOG_2PI
            - np.sum(base.log_sigma, axis=-1)[:, None] - 0.5 * quad)
    stacked = np.log(w)[:, None] + comp
    m = np.max(stacked, axis=0)
    return m + np.log(np.sum(np.exp(stacked - m), axis=0))


def init_base(target, K: int, rng: RngStream, radius: float = 5.0,
              candidate_factor: int = 4) -> StickBreakingBase:
    """Candidate-ranked initialization.

    Draws ``candidate_factor * K`` points uniformly from a centered ball,
    ranks them by target log-density and keeps the best K as component
    means.  Scales start at one, Beta parameters at (1, 1).
    """
    d = target.dim
    gen = rng.generator()
    n_cand = candidate_factor * K
    direction = gen.standard_normal((n_cand, d))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radii = radius * gen.uniform(size=(n_cand, 1)) ** (1.0 / d)
    cand = direction * radii
    logp = np.asarray(target.log_density(cand), dtype=float)
    logp = np.where(np.isnan(logp), -np.inf, logp)
    order = np.argsort(-logp, kind="stable")[:K]
    return StickBreakingBase(
        mu=cand[order],
        log_sigma=np.zeros((K, d)),
        raw_alpha=np.full(K - 1, RAW_UNIT),
        raw_beta=np.full(K - 1, RAW_UNIT),
    )
