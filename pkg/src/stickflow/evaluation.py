"""Diagnostics (forward KL, normalized importance-sampling ESS, percentile
tables) and the adaptive random-walk Metropolis reference sampler."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import RngStream
from .vi import MixtureTailFlow, model_log_density, sample as model_sample

__all__ = [
    "DiagnosticsReport",
    "McmcChain",
    "forward_kl",
    "normalized_ess",
    "percentile_table",
    "adaptive_rwm",
    "evaluate_model",
]


@dataclass
class DiagnosticsReport:
    forward_kl: float | None
    forward_kl_sd: float | None
    ess_normalized: float
    ess_sd: float | None
    percentiles: dict
    n_eval: int
    n_seeds: int
    seeds: list

    def to_dict(self) -> dict:
        return {
            "kl_mean": self.forward_kl,
            "kl_sd": self.forward_kl_sd,
            "ess_mean": self.ess_normalized,
            "ess_sd": self.ess_sd,
            "percentiles": self.percentiles,
            "n_eval": self.n_eval,
            "n_seeds": self.n_seeds,
            "seeds": self.seeds,
        }


@dataclass
class McmcChain:
    draws: np.ndarray  # (T, d)
    log_densities: np.ndarray  # (T,)
    acceptance_rate: float
    cov_trace: list = field(default_factory=list)  # (step, trace) snapshots

    def __post_init__(self):
        if not 0.0 < self.acceptance_rate < 1.0:
            raise ValueError("acceptance rate must lie strictly inside (0, 1)")

    def retained(self) -> np.ndarray:
        """Draws after discarding the first half as burn-in."""
        return self.draws[self.draws.shape[0] // 2:]

    def summary(self) -> dict:
        """Mode draw and 99% equal-tail credible intervals after burn-in."""
        half = self.draws.shape[0] // 2
        draws, lp = self.draws[half:], self.log_densities[half:]
        best = int(np.argmax(lp))
        lo, hi = np.quantile(draws, [0.005, 0.995], axis=0)
        return {
            "mode": draws[best].tolist(),
            "interval_low": lo.tolist(),
            "interval_high": hi.tolist(),
            "mean": draws.mean(axis=0).tolist(),
            "sd": draws.std(axis=0).tolist(),
            "acceptance_rate": self.acceptance_rate,
        }


def forward_kl(target, model: MixtureTailFlow, n: int, rng: RngStream) -> float:
    """Monte Carlo estimate of KL(p || q) from exact target draws."""
    if target.exact_sampler is None:
        raise ValueError("forward KL needs a target with an exact sampler")
    if not target.normalized:
        raise ValueError("forward KL needs a normalized target density")
    z = target.sample(n, rng)
    lp = np.asarray(target.log_density(z), dtype=float)
    lq = np.asarray(model_log_density(model, z), dtype=float)
    return float(np.mean(lp - lq))


def normalized_ess(target, model: MixtureTailFlow, n: int, rng: RngStream) -> float:
    """(sum w)^2 / (n sum w^2) from importance weights w = p/q at model draws.

    Invariant to rescaling of an unnormalized target density.
    """
    x, _ = model_sample(model, n, rng)
    lp = np.asarray(target.log_density(x), dtype=float)
    lq = np.asarray(model_log_density(model, x), dtype=float)
    logw = lp - lq
    logw = logw[~np.isnan(logw)]
    finite = logw > -np.inf
    if not finite.any():
        raise ValueError("all importance weights are zero (support mismatch)")
    m = logw[finite].max()
    w = np.exp(logw - m, where=logw > -np.inf, out=np.zeros_like(logw))
    return float((w.sum() ** 2) / (n * np.sum(w * w)))


def percentile_table(samples, probs) -> dict:
    """Per-coordinate empirical quantiles (type-7 linear interpolation)."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    probs = np.asarray(probs, dtype=float)
    if np.any((probs <= 0) | (probs >= 1)):
        raise ValueError("probabilities must lie strictly inside (0, 1)")
    extreme = np.any((probs <= 0.001) | (probs >= 0.999))
    if extreme and samples.shape[0] < 10_000:
        raise ValueError("need at least 10^4 samples for 0.1%/99.9% estimates")
    q = np.quantile(samples, probs, axis=0)
    return {
        "probs": probs.tolist(),
        "values": {f"x{l + 1}": q[:, l].tolist() for l in range(samples.shape[1])},
    }


def adaptive_rwm(logp, init, n_iters: int, rng: RngStream,
                 cov_snapshots: int = 20) -> tuple[McmcChain, dict]:
    """Adaptive random-walk Metropolis with online covariance adaptation.

    Proposal N(0, s_d * Cov_t + 1e-8 I) with s_d = 2.38^2/d; the running
    covariance is updated with 1/t weights (diminishing adaptation) after a
    short fixed-proposal warm-up.  Returns the chain plus a summary with the
    mode draw and 99% equal-tail intervals computed after discarding the
    first half.
    """
    init = np.asarray(init, dtype=float)
    d = init.size
    lp0 = float(np.asarray(logp(init[None]))[0])
    if not np.isfinite(lp0):
        raise ValueError("log-density not finite at the initial point")
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    s_d = 2.38**2 / d
    eps = 1e-8
    warmup = min(500, max(100, n_iters // 100))
    draws = np.empty((n_iters, d))
    lps = np.empty(n_iters)
    mean = init.copy()
    cov = np.zeros((d, d))
    chol = np.linalg.cholesky(0.1**2 / d * np.eye(d))
    current, lp_cur = init.copy(), lp0
    accepted = 0
    stale = 0
    cov_trace = []
    snap_every = max(1, n_iters // cov_snapshots)
    for t in range(n_iters):
        prop = current + chol @ gen.standard_normal(d)
        lp_prop = float(np.asarray(logp(prop[None]))[0])
        if np.log(gen.uniform()) < lp_prop - lp_cur:
            current, lp_cur = prop, lp_prop
            accepted += 1
            stale = 0
        else:
            stale += 1
            if stale >= 10_000:
                raise RuntimeError("no acceptance over 10^4 consecutive steps")
        draws[t] = current
        lps[t] = lp_cur
        # running mean/covariance with diminishing 1/t adaptation weights
        n_obs = t + 1
        delta = current - mean
        mean = mean + delta / n_obs
        cov = cov * (n_obs - 1) / n_obs + np.outer(delta, current - mean) / n_obs
        if t >= warmup:
            chol = np.linalg.cholesky(s_d * cov + eps * np.eye(d))
        if t % snap_every == 0:
            cov_trace.append((t, float(np.trace(cov))))
    chain = McmcChain(draws=draws, log_densities=lps,
                      acceptance_rate=accepted / n_iters, cov_trace=cov_trace)
    return chain, chain.summary()


def evaluate_model(target, model: MixtureTailFlow, n: int, seeds, rng: RngStream,
                   percentile_samples: int = 10_000) -> DiagnosticsReport:
    """Repeated forward-KL/ESS evaluation plus a percentile table."""
    kls, esss = [], []
    seeds = list(seeds)
    for s in seeds:
        stream = rng.derive(f"eval.seed{s}")
        if target.exact_sampler is not None and target.normalized:
            kls.append(forward_kl(target, model, n, stream.derive("kl")))
        esss.append(normalized_ess(target, model, n, stream.derive("ess")))
    x, _ = model_sample(model, percentile_samples, rng.derive("eval.percentiles"))
    table = percentile_table(x, [0.001, 0.999])
    return DiagnosticsReport(
        forward_kl=float(np.mean(kls)) if kls else None,
        forward_kl_sd=float(np.std(kls, ddof=1)) if len(kls) > 1 else None,
        ess_normalized=float(np.mean(esss)),
        ess_sd=float(np.std(esss, ddof=1)) if len(esss) > 1 else None,
        percentiles=table,
        n_eval=n,
        n_seeds=len(seeds),
        seeds=seeds,
    )
