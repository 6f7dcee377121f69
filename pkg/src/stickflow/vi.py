"""Three-stage training: (1) stick-breaking base + shared backbone on the
weighted component-wise objective, (2) directional tail estimation at the
trained components, (3) per-component tail-transform attachment and
refinement.

The objective places the expected mixture weights outside the per-component
Monte Carlo expectations:

    sum_k w_k * mean_s [ log p(x_{k,s}) - log q(x_{k,s}) ],

with x_{k,s} the reparameterized component draws pushed through that
component's map (shared backbone, then its tail transform).  log q is the
exact mixture pushforward density, so gradients flow through the weights
both outside the expectation and inside the density.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import GraphError
from .backbone import FlowError, FlowStack
from .base_mixture import StickBreakingBase, component_log_density, expected_weights, init_base
from .numerics import RngStream
from .tail_estimator import TailIndexTable, build_table
from .tail_transform import LIGHT, SaturationError, TtfParams, ttf_forward, ttf_inverse

__all__ = [
    "STAGE_BASE",
    "STAGE_TAIL_FROZEN",
    "STAGE_REFINE",
    "ModelConfig",
    "TrainConfig",
    "MixtureTailFlow",
    "NumericalAbort",
    "model_log_density",
    "sample",
    "weighted_elbo",
    "train",
]

STAGE_BASE = "base_learning"
STAGE_TAIL_FROZEN = "tail_frozen"
STAGE_REFINE = "refinement"


class NumericalAbort(RuntimeError):
    """Training failed irrecoverably; carries the last good model."""

    def __init__(self, message, model=None, trace=None):
        super().__init__(message)
        self.model = model
        self.trace = trace or []


@dataclass
class ModelConfig:
    K: int = 20
    n_blocks: int = 2
    bins: int = 3
    hidden: int = 64
    bound: float = 10.0


@dataclass
class TrainConfig:
    iters_stage1: int = 450
    iters_stage3: int = 50
    mc_samples_per_component: int = 64
    learning_rate: float = 5e-3
    seed: int = 0
    tail_n: int = 200_000
    tail_j: int = 30
    tail_nu: float = 2.0
    weight_threshold: float = 1e-2
    entropy_prune: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    train_backbone_stage1: bool = True
    # fraction of stage-1 iterations with the backbone frozen at identity so
    # the mixture claims modes before the shared flow starts reshaping space
    backbone_warmup_fraction: float = 0.0
    init_radius: float = 5.0
    anchor_samples: int = 2000
    n_output_samples: int = 10_000
    # fraction of final iterations whose iterates are averaged at stage end
    # (tail averaging damps stochastic-gradient wobble in the returned model)
    average_final_fraction: float = 0.25

    def __post_init__(self):
        if min(self.iters_stage1, self.iters_stage3, self.mc_samples_per_component) <= 0:
            raise ValueError("iteration and sample counts must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")


@dataclass
class MixtureTailFlow:
    """Mixture base, shared backbone, per-component tail transforms."""

    base: StickBreakingBase
    backbone: FlowStack
    ttf: list = field(default_factory=list)  # per component: TtfParams or None
    stage: str = STAGE_BASE
    tail_table: TailIndexTable | None = None

    def __post_init__(self):
        if not self.ttf:
            self.ttf = [None] * self.base.K
        if self.stage == STAGE_BASE and any(t is not None for t in self.ttf):
            raise ValueError("tail transforms must be identity during base learning")

    @property
    def dim(self) -> int:
        return self.base.dim

    @property
    def K(self) -> int:
        return self.base.K

    def expected_weights(self):
        return self.base.expected_weights()

    def log_density(self, x):
        return model_log_density(self, x)

    def sample(self, n, rng):
        return sample(self, n, rng)

    def trainable_params(self, train_backbone: bool = True) -> dict:
        params = {
            "base.mu": self.base.mu,
            "base.log_sigma": self.base.log_sigma,
            "base.raw_alpha": self.base.raw_alpha,
            "base.raw_beta": self.base.raw_beta,
        }
        if train_backbone:
            params.update(self.backbone.params)
        return params

    def set_params(self, params: dict):
        self.base.mu = params["base.mu"]
        self.base.log_sigma = params["base.log_sigma"]
        self.base.raw_alpha = params["base.raw_alpha"]
        self.base.raw_beta = params["base.raw_beta"]
        for tag in self.backbone.params:
            if tag in params:
                self.backbone.params[tag] = params[tag]

    def copy_params(self) -> dict:
        return {k: v.copy() for k, v in self.trainable_params(True).items()}


def _base_param(pp, tag, fallback):
    if pp is not None and tag in pp:
        return pp[tag]
    return fallback


def _forward_components(model: MixtureTailFlow, z0_rows, comp_of_row, pp=None):
    """Push rows through the shared backbone and their component transforms."""
    y, logdet = model.backbone.forward(z0_rows, pp=pp)
    if all(t is None for t in model.ttf):
        return y, logdet
    cols = []
    lds = []
    for k in range(model.K):
        rows = np.where(comp_of_row == k)[0]
        if rows.size == 0:
            continue
        yk = y[rows] if isinstance(y, ad.Node) else y[rows]
        if model.ttf[k] is None:
            xk, ldk = yk, np.zeros(rows.size)
        else:
            xk, ldk = ttf_forward(model.ttf[k], yk)
        cols.append((rows, xk, ldk))
    n = ad.val(y).shape[0]
    if isinstance(y, ad.Node) or any(isinstance(c[1], ad.Node) for c in cols):
        order = np.argsort(np.concatenate([c[0] for c in cols]), kind="stable")
        x_all = ad.concatenate([c[1] for c in cols], axis=0)
        ld_all = ad.concatenate(
            [c[2] if isinstance(c[2], ad.Node) else ad.as_node(np.asarray(c[2], dtype=float))
             for c in cols], axis=0)
        x_all = x_all[order]
        ld_all = ld_all[order]
        return x_all, logdet + ld_all
    x = np.empty_like(ad.val(y))
    ld = np.zeros(n)
    for rows, xk, ldk in cols:
        x[rows] = xk
        ld[rows] += ldk
    return x, logdet + ld


def model_log_density(model: MixtureTailFlow, x, pp=None, prune: float = 0.0):
    """Exact mixture pushforward log-density via per-component inverses.

    Inverts each active component's tail transform, runs one batched inverse
    through the shared backbone and assembles a stabilized log-sum-exp of
    log w_k + log q_k(z_k) - log|det J_k|.  Components below ``prune``
    expected weight are dropped from the sum.  Components whose tail
    transform is the identity share a single backbone inverse.
    """
    xv = ad.val(x)
    if xv.ndim != 2 or xv.shape[1] != model.dim:
        raise ValueError(f"expected shape (n, {model.dim})")
    n = xv.shape[0]
    raw_a = _base_param(pp, "base.raw_alpha", model.base.raw_alpha)
    raw_b = _base_param(pp, "base.raw_beta", model.base.raw_beta)
    w = expected_weights(raw_a, raw_b)
    wv = ad.val(w)
    active = [k for k in range(model.K) if wv[k] > prune]
    if not active:
        active = [int(np.argmax(wv))]
    # one inverse block per tail transform; identity components share a block
    blocks = []  # (y, ld_ttf)
    block_of = {}
    identity_block = None
    for k in active:
        if model.ttf[k] is None:
            if identity_block is None:
                identity_block = len(blocks)
                blocks.append((x, np.zeros(n)))
            block_of[k] = identity_block
        else:
            block_of[k] = len(blocks)
            blocks.append(ttf_inverse(model.ttf[k], x))
    big = ad.concatenate([b[0] for b in blocks], axis=0) if len(blocks) > 1 else blocks[0][0]
    z0, ld_bb = model.backbone.inverse(big, pp=pp)
    mu = _base_param(pp, "base.mu", model.base.mu)
    ls = _base_param(pp, "base.log_sigma", model.base.log_sigma)
    terms = []
    for k in active:
        i = block_of[k]
        sl = slice(i * n, (i + 1) * n)
        comp = component_log_density(mu[k], ls[k], z0[sl])
        term = ad.log(w[k]) + comp + ld_bb[sl] + blocks[i][1]
        terms.append(term)
    stacked = ad.stack(terms, axis=0)
    return ad.logsumexp(stacked, axis=0)


def sample(model: MixtureTailFlow, n: int, rng: RngStream):
    """Ancestral draws with component labels."""
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    w = ad.val(model.expected_weights())
    labels = gen.choice(model.K, size=n, p=w / w.sum())
    eps = gen.standard_normal((n, model.dim))
    z0 = model.base.mu[labels] + np.exp(model.base.log_sigma[labels]) * eps
    x, _ = _forward_components(model, z0, labels)
    return x, labels


def weighted_elbo(model: MixtureTailFlow, target, config: TrainConfig, rng: RngStream,
                  pp=None):
    """Single-estimate weighted component-wise objective (scalar node/float)."""
    S = config.mc_samples_per_component
    K, d = model.K, model.dim
    mu = _base_param(pp, "base.mu", model.base.mu)
    ls = _base_param(pp, "base.log_sigma", model.base.log_sigma)
    raw_a = _base_param(pp, "base.raw_alpha", model.base.raw_alpha)
    raw_b = _base_param(pp, "base.raw_beta", model.base.raw_beta)
    w = expected_weights(raw_a, raw_b)

    eps_blocks = []
    comp_of_row = np.repeat(np.arange(K), S)
    for k in range(K):
        gen = rng.derive(f"elbo.k{k}").generator()
        eps_blocks.append(gen.standard_normal((S, d)))
    eps = np.concatenate(eps_blocks, axis=0)  # (K*S, d)
    z0 = mu[comp_of_row] + ad.exp(ls[comp_of_row]) * eps
    x, fwd_ld = _forward_components(model, z0, comp_of_row, pp=pp)
    logp = target.log_density_graph(x) if (isinstance(x, ad.Node) or pp is not None) \
        else target.log_density(x)
    if all(t is None for t in model.ttf):
        # With identity tails every density term inverts the shared backbone
        # at its own forward output, which cancels exactly (values and
        # gradients), so the entropy reuses z0 and the forward log-det.
        wv = ad.val(w)
        active = [k for k in range(K) if wv[k] > config.entropy_prune]
        if not active:
            active = [int(np.argmax(wv))]
        terms = [ad.log(w[k]) + component_log_density(mu[k], ls[k], z0) for k in active]
        logq = ad.logsumexp(ad.stack(terms, axis=0), axis=0) - fwd_ld
    else:
        logq = model_log_density(model, x, pp=pp, prune=config.entropy_prune)
    diff = logp - logq
    per_comp = ad.mean(ad.reshape(diff, (K, S)), axis=1)
    total = ad.sum_(w * per_comp)
    return total


_TAIL_ANCHOR_P = 0.99
_TAIL_ANCHOR_Z = 2.3263478740408408  # standard normal quantile at 0.99


def _component_pushforward_stats(model: MixtureTailFlow, k: int, n: int, rng: RngStream):
    """Robust location/scale of the mapped component plus the raw draws.

    Location is the median; the probe scale is IQR-based.  The raw mapped
    draws are returned so the transform anchors can later use side-specific
    tail scales.
    """
    z0, _ = model.base.component_sample(k, n, rng)
    y, _ = model.backbone.forward(z0)
    mu = np.median(y, axis=0)
    q75, q25 = np.quantile(y, [0.75, 0.25], axis=0)
    sigma = np.maximum((q75 - q25) / 1.349, 1e-6)
    return mu, sigma, y


def _side_tail_scale(y: np.ndarray, med: np.ndarray, sign: int) -> np.ndarray:
    """Effective Gaussian scale of one side of the mapped component.

    The transform turns Gaussian-at-anchor-scale decay into the prescribed
    polynomial tail, so the anchor must match the component's own upper
    (resp. lower) quantile spread; a bulk scale would change the effective
    decay power of the composition.
    """
    if sign > 0:
        q = np.quantile(y, _TAIL_ANCHOR_P, axis=0)
        return (q - med) / _TAIL_ANCHOR_Z
    q = np.quantile(y, 1.0 - _TAIL_ANCHOR_P, axis=0)
    return (med - q) / _TAIL_ANCHOR_Z


def estimate_tail_table(model: MixtureTailFlow, target, config: TrainConfig,
                        rng: RngStream) -> tuple[TailIndexTable, dict]:
    """Stage 2: pushforward component anchors + directional tail table."""
    w = ad.val(model.expected_weights())
    stats = []
    anchors = {}
    for k in range(model.K):
        if w[k] <= config.weight_threshold:
            continue
        mu, sigma, y = _component_pushforward_stats(
            model, k, config.anchor_samples, rng.derive(f"anchor.k{k}"))
        anchors[k] = (mu, sigma, y)
        stats.append((k, mu, sigma, w[k]))
    table = build_table(target.log_density, stats, n=config.tail_n, j=config.tail_j,
                        nu=config.tail_nu, rng=rng.derive("tails"),
                        weight_threshold=config.weight_threshold)
    return table, anchors


def _anchor_clusters(anchors: dict, dim: int) -> list:
    """Group components whose anchor boxes overlap in every coordinate.

    Components tiling the same local blob would otherwise each graft a
    full-constant tail onto the shared ridge, multiplying the aggregate tail
    mass by the cluster size.
    """
    keys = sorted(anchors)
    parent = {k: k for k in keys}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, ka in enumerate(keys):
        mu_a, sig_a, _ = anchors[ka]
        for kb in keys[i + 1:]:
            mu_b, sig_b, _ = anchors[kb]
            if np.all(np.abs(mu_a - mu_b) <= 2.0 * (sig_a + sig_b)):
                parent[find(ka)] = find(kb)
    clusters: dict = {}
    for k in keys:
        clusters.setdefault(find(k), []).append(k)
    return list(clusters.values())


def _calibrate_tail_levels(model: MixtureTailFlow, target, anchors: dict,
                           clusters: list, shared_sigma: dict, table: TailIndexTable,
                           weights, rng: RngStream):
    """Match each attached tail's level to the target along its probe ray.

    The learned bulk pins the unknown normalizer (median of log p - log q
    over model draws), the target's exact ray densities give the desired
    tail level, and the candidate model density is exact, so the anchor
    scale solves a monotone one-dimensional equation per cluster
    coordinate.  This removes the attachment-constant guesswork that the
    short refinement stage would otherwise have to repair.
    """
    assert all(t is None for t in model.ttf), "calibration runs before attachment"
    xb, _ = sample(model, 2048, rng.derive("cal.bulk"))
    chat = float(np.median(np.asarray(target.log_density(xb), dtype=float)
                           - model_log_density(model, xb)))

    def build(sigmas):
        ttf = [None] * model.K
        for k, (mu, _, _) in anchors.items():
            xi_pos, xi_neg = table.xi_arrays(k, model.dim)
            if np.isfinite(xi_pos).any() or np.isfinite(xi_neg).any():
                ttf[k] = TtfParams(mu=mu, sigma=np.maximum(sigmas[k], 1e-6),
                                   xi_pos=xi_pos, xi_neg=xi_neg)
        return ttf

    for cluster in clusters:
        w = np.array([weights[k] for k in cluster])
        w = w / w.sum()
        mu_bar = np.sum(w[:, None] * np.array([anchors[k][0] for k in cluster]), axis=0)
        for l in range(model.dim):
            signs = [s for s in (+1, -1)
                     if any(np.isfinite(table.xi(k, l, s)) for k in cluster)]
            if not signs:
                continue
            base_l = float(np.median([shared_sigma[k][l] for k in cluster]))
            pts, levels = [], []
            for s in signs:
                for mult in (50.0, 100.0, 200.0):
                    p = mu_bar.copy()
                    p[l] += s * mult * base_l
                    pts.append(p)
            pts = np.array(pts)
            lp = np.asarray(target.log_density(pts), dtype=float)
            if not np.all(np.isfinite(lp)):
                continue
            levels = lp - chat

            def resid(log2s):
                cand = {k: v.copy() for k, v in shared_sigma.items()}
                for k in cluster:
                    cand[k][l] = base_l * 2.0**log2s
                model.ttf = build(cand)
                lq = model_log_density(model, pts)
                model.ttf = [None] * model.K
                return float(np.mean(lq - levels))

            # The residual decreases in the scale: at a fixed deep probe a
            # larger anchor scale slides the inverse image further into the
            # component's own Gaussian shoulder, collapsing the candidate
            # density; bisect on log2 of the multiplier.
            lo, hi = -1.5, 1.5
            rlo, rhi = resid(lo), resid(hi)
            if rlo <= 0.0:
                best = lo
            elif rhi >= 0.0:
                best = hi
            else:
                for _ in range(16):
                    mid = 0.5 * (lo + hi)
                    if resid(mid) > 0.0:
                        lo = mid
                    else:
                        hi = mid
                best = 0.5 * (lo + hi)
            for k in cluster:
                shared_sigma[k][l] = base_l * 2.0**best


def attach_tail_transforms(model: MixtureTailFlow, table: TailIndexTable, anchors: dict,
                           weights=None, target=None, rng=None):
    """Attach per-component transforms with side-aware anchor scales.

    Per-component scales come from the mapped component's own tail
    quantiles; components in the same anchor cluster share a pooled scale
    so the cluster's aggregate tail carries one tail constant split in
    proportion to the weights; when the target and a stream are supplied
    the pooled scales are then level-calibrated along the probe rays.
    """
    if weights is None:
        weights = ad.val(model.expected_weights())
    raw_sigma = {}
    for k, (mu, probe_sigma, y) in anchors.items():
        xi_pos, xi_neg = table.xi_arrays(k, model.dim)
        up = _side_tail_scale(y, mu, +1)
        dn = _side_tail_scale(y, mu, -1)
        sigma = probe_sigma.copy()
        for l in range(model.dim):
            heavy_up, heavy_dn = np.isfinite(xi_pos[l]), np.isfinite(xi_neg[l])
            if heavy_up and heavy_dn:
                sigma[l] = 0.5 * (up[l] + dn[l])
            elif heavy_up:
                sigma[l] = up[l]
            elif heavy_dn:
                sigma[l] = dn[l]
        raw_sigma[k] = np.maximum(sigma, 1e-6)
    shared_sigma = {k: v.copy() for k, v in raw_sigma.items()}
    for cluster in _anchor_clusters(anchors, model.dim):
        if len(cluster) < 2:
            continue
        w = np.array([weights[k] for k in cluster])
        w = w / w.sum()
        for l in range(model.dim):
            xis = [table.xi(k, l, s) for k in cluster for s in (+1, -1)]
            if not any(np.isfinite(x) for x in xis):
                continue
            # weighted median of member scales: robust against stray
            # wide components that a power mean would let dominate
            sig = np.array([raw_sigma[k][l] for k in cluster])
            order = np.argsort(sig)
            cum = np.cumsum(w[order])
            pooled = float(sig[order][np.searchsorted(cum, 0.5)])
            for k in cluster:
                shared_sigma[k][l] = pooled
    if target is not None and rng is not None and anchors:
        _calibrate_tail_levels(model, target, anchors, _anchor_clusters(anchors, model.dim),
                               shared_sigma, table, weights, rng)
    ttf = [None] * model.K
    for k, (mu, probe_sigma, y) in anchors.items():
        xi_pos, xi_neg = table.xi_arrays(k, model.dim)
        if not (np.isfinite(xi_pos).any() or np.isfinite(xi_neg).any()):
            continue
        ttf[k] = TtfParams(mu=mu, sigma=shared_sigma[k], xi_pos=xi_pos, xi_neg=xi_neg)
    model.ttf = ttf
    model.tail_table = table


def _adam_update(params, grads, state, lr, cfg: TrainConfig, t: int):
    for tag, g in grads.items():
        m, v = state[tag]
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
        state[tag] = (m, v)
        mhat = m / (1.0 - cfg.beta1**t)
        vhat = v / (1.0 - cfg.beta2**t)
        params[tag] = params[tag] + lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)


def _optimize(model, target, cfg: TrainConfig, rng: RngStream, n_iters: int,
              stage: str, trace: list, train_backbone: bool, lr: float,
              t_start: float, iter_offset: int) -> int:
    params = {k: v.copy() for k, v in model.trainable_params(train_backbone).items()}
    state = {tag: (np.zeros_like(v), np.zeros_like(v)) for tag, v in params.items()}
    avg_start = n_iters - max(1, int(round(cfg.average_final_fraction * n_iters)))
    avg = None
    n_avg = 0
    prev_value = None
    prev_params = None
    step = 0
    retried = False
    it = 0
    while it < n_iters:
        stream = rng.derive(f"{stage}.iter{it}")
        pp = {tag: ad.Parameter(arr, tag) for tag, arr in params.items()}
        try:
            elbo_node = weighted_elbo(model, target, cfg, stream, pp=pp)
        except (GraphError, FlowError, SaturationError) as err:
            model.set_params(params)
            raise NumericalAbort(f"{stage} iteration {it}: {err}", model=model,
                                 trace=trace) from err
        value = float(ad.val(elbo_node))
        if prev_value is not None and value < prev_value - 1e3:
            if retried:
                model.set_params(prev_params)
                raise NumericalAbort(
                    f"{stage} iteration {it}: objective dropped by more than 1e3 nats "
                    "twice despite halving the step size", model=model, trace=trace)
            params = {k: v.copy() for k, v in prev_params.items()}
            lr *= 0.5
            retried = True
            continue
        retried = False
        grads = ad.grad(elbo_node, pp.values())
        prev_params = {k: v.copy() for k, v in params.items()}
        prev_value = value
        step += 1
        _adam_update(params, grads, state, lr, cfg, step)
        model.set_params(params)
        weight_sum = float(np.sum(ad.val(model.expected_weights())))
        assert abs(weight_sum - 1.0) < 1e-9, "expected weights left the simplex"
        trace.append((iter_offset + it, stage, value, time.perf_counter() - t_start))
        if it >= avg_start:
            if avg is None:
                avg = {k: v.copy() for k, v in params.items()}
            else:
                for k in avg:
                    avg[k] += params[k]
            n_avg += 1
        it += 1
    if avg is not None and n_avg > 1:
        params = {k: v / n_avg for k, v in avg.items()}
    model.set_params(params)
    return iter_offset + n_iters


def train(target, model_cfg: ModelConfig, config: TrainConfig):
    """Full three-stage run; returns (model, trace rows, tail table)."""
    root = RngStream(config.seed)
    base = init_base(target, model_cfg.K, root.derive("init.base"),
                     radius=config.init_radius)
    backbone = FlowStack(dim=target.dim, n_blocks=model_cfg.n_blocks,
                         bins=model_cfg.bins, hidden=model_cfg.hidden,
                         bound=model_cfg.bound, rng=root.derive("init.backbone"))
    model = MixtureTailFlow(base=base, backbone=backbone)
    trace: list = []
    t_start = time.perf_counter()

    warm = int(round(config.backbone_warmup_fraction * config.iters_stage1)) \
        if config.train_backbone_stage1 else 0
    offset = 0
    if warm > 0:
        offset = _optimize(model, target, config, root.derive("stage1.warm"),
                           warm, STAGE_BASE, trace, train_backbone=False,
                           lr=config.learning_rate, t_start=t_start, iter_offset=0)
    offset = _optimize(model, target, config, root.derive("stage1"),
                       config.iters_stage1 - warm, STAGE_BASE, trace,
                       train_backbone=config.train_backbone_stage1,
                       lr=config.learning_rate, t_start=t_start, iter_offset=offset)

    table, anchors = estimate_tail_table(model, target, config, root.derive("stage2"))
    model.stage = STAGE_TAIL_FROZEN
    attach_tail_transforms(model, table, anchors, target=target,
                           rng=root.derive("stage2.calibrate"))

    model.stage = STAGE_REFINE
    _optimize(model, target, config, root.derive("stage3"), config.iters_stage3,
              STAGE_REFINE, trace, train_backbone=True,
              lr=config.learning_rate, t_start=t_start, iter_offset=offset)
    return model, trace, table
