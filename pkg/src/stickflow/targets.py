"""Benchmark target log-densities with optional exact samplers.

All log-densities accept an (n, d) array and return n values; they are
written against the autodiff dispatch layer so the same code produces either
plain numpy values or differentiable graph nodes.  Targets flagged
``normalized`` carry exact constants (the two-moons component is normalized
numerically once and cached).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .numerics import RngStream, student_t_draw

__all__ = [
    "TargetDensity",
    "nig_target",
    "complex_mixture_target",
    "normal_target",
    "student_line_target",
    "make_target",
]

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class TargetDensity:
    """Unnormalized (or exact) log-density with optional exact sampler."""

    name: str
    dim: int
    log_density: Callable
    exact_sampler: Optional[Callable] = None
    normalized: bool = False
    # graph-safe variant (finite everywhere, barrier-extended outside support)
    log_density_graph: Optional[Callable] = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.log_density_graph is None:
            self.log_density_graph = self.log_density

    def sample(self, n: int, rng: RngStream) -> np.ndarray:
        if self.exact_sampler is None:
            raise ValueError(f"target '{self.name}' has no exact sampler")
        return self.exact_sampler(n, rng)


def _gen(rng):
    return rng.generator() if isinstance(rng, RngStream) else rng


def student_t_logpdf(x, nu: float, loc: float = 0.0, scale: float = 1.0):
    const = (math.lgamma((nu + 1.0) / 2.0) - math.lgamma(nu / 2.0)
             - 0.5 * math.log(nu * math.pi) - math.log(scale))
    z = (x - loc) / scale
    return const - 0.5 * (nu + 1.0) * ad.log1p(ad.square(z) / nu)


def normal_logpdf(x, loc: float = 0.0, scale: float = 1.0):
    z = (x - loc) / scale
    return -0.5 * _LOG_2PI - math.log(scale) - 0.5 * ad.square(z)


# ---------------------------------------------------------------------------
# standard normal (training sanity target)


def normal_target(dim: int = 2) -> TargetDensity:
    def logp(z):
        return ad.sum_(-0.5 * ad.square(z), axis=-1) - 0.5 * dim * _LOG_2PI

    def sampler(n, rng):
        return _gen(rng).standard_normal((n, dim))

    return TargetDensity("normal", dim, logp, sampler, normalized=True)


def student_line_target(nu: float, dim: int = 2) -> TargetDensity:
    """Student-t marginal on the first axis, standard normal on the rest."""

    def logp(z):
        out = student_t_logpdf(z[:, 0], nu)
        for l in range(1, dim):
            out = out + normal_logpdf(z[:, l])
        return out

    def sampler(n, rng):
        gen = _gen(rng)
        cols = [student_t_draw(nu, gen, size=n)[:, None]]
        if dim > 1:
            cols.append(gen.standard_normal((n, dim - 1)))
        return np.concatenate(cols, axis=1)

    return TargetDensity(f"t{nu}_line", dim, logp, sampler, normalized=True,
                         params={"nu": nu})


# ---------------------------------------------------------------------------
# Normal x Inverse-Gamma


_NIG_SHAPE = 3.0
_NIG_SCALE = 1.0
# training-mode barrier knee; true mass below it is ~1e-18 so the graph-mode
# density distortion is negligible while the continuation slope stays mild
_NIG_EPS = 0.05
_NIG_CONST = _NIG_SHAPE * math.log(_NIG_SCALE) - math.lgamma(_NIG_SHAPE)


def _invgamma_body(v):
    return _NIG_CONST - (_NIG_SHAPE + 1.0) * ad.log(v) - _NIG_SCALE / v


def nig_target() -> TargetDensity:
    """Product of a standard normal and an Inverse-Gamma(3, 1).

    The second coordinate has polynomial tail index 3; the density is exact
    (normalized) and -inf outside v > 0.  The graph variant continues the
    log-density linearly below a small epsilon so optimization stays finite
    while still being pushed back into the support.
    """

    def logp(z):
        z = np.atleast_2d(ad.val(z))
        b, v = z[:, 0], z[:, 1]
        ok = v > 0.0
        body = np.where(ok, _invgamma_body(np.where(ok, v, 1.0)), -np.inf)
        return normal_logpdf(b) + body

    barrier_value = _invgamma_body(_NIG_EPS)
    barrier_slope = -(_NIG_SHAPE + 1.0) / _NIG_EPS + _NIG_SCALE / _NIG_EPS**2

    def logp_graph(z):
        b = z[:, 0]
        v = z[:, 1]
        body = _invgamma_body(ad.clip_lower(v, _NIG_EPS))
        linear = barrier_value + barrier_slope * (v - _NIG_EPS)
        return normal_logpdf(b) + ad.where(ad.val(v) >= _NIG_EPS, body, linear)

    def sampler(n, rng):
        gen = _gen(rng)
        beta = gen.standard_normal(n)
        v = _NIG_SCALE / gen.standard_gamma(_NIG_SHAPE, n)
        return np.stack([beta, v], axis=1)

    return TargetDensity("nig", 2, logp, sampler, normalized=True,
                         log_density_graph=logp_graph)


# ---------------------------------------------------------------------------
# four-component heavy-tailed mixture


_MOON_RING_SCALE = 0.2
_MOON_LOBE_SCALE = 0.3
_moon_log_norm_cache: dict = {}


def _moons_energy(z1, z2):
    """Unnormalized two-moons log-density in centered coordinates."""
    rad = ad.sqrt(ad.square(z1) + ad.square(z2) + 1e-24)
    ring = -0.5 * ad.square((rad - 2.0) / _MOON_RING_SCALE)
    lobes = ad.logaddexp(-0.5 * ad.square((z1 - 2.0) / _MOON_LOBE_SCALE),
                       -0.5 * ad.square((z1 + 2.0) / _MOON_LOBE_SCALE))
    return ring + lobes


def _moons_log_norm() -> float:
    """log of the two-moons normalizing constant (computed once, cached)."""
    if "value" not in _moon_log_norm_cache:
        from scipy.integrate import simpson

        g = np.linspace(-4.0, 4.0, 2001)
        xx, yy = np.meshgrid(g, g, indexing="ij")
        vals = np.exp(_moons_energy(xx.ravel(), yy.ravel())).reshape(xx.shape)
        _moon_log_norm_cache["value"] = float(np.log(simpson(simpson(vals, x=g), x=g)))
    return _moon_log_norm_cache["value"]


def _moons_sample(n: int, gen) -> np.ndarray:
    """Rejection sampling from a bounding box; the unnormalized density is
    bounded by 1 + 1e-6."""
    out = np.empty((0, 2))
    bound = 1.0 + 1e-6
    while out.shape[0] < n:
        m = max(4 * (n - out.shape[0]), 4096)
        cand = gen.uniform(-4.0, 4.0, size=(m, 2))
        u = gen.uniform(size=m)
        accept = u * bound < np.exp(_moons_energy(cand[:, 0], cand[:, 1]))
        out = np.concatenate([out, cand[accept]], axis=0)
    return out[:n]


_MIX_WEIGHTS = np.array([0.2, 0.2, 0.1, 0.5])
_MIX_CENTERS = np.array([[6.0, 0.0], [0.0, 6.0], [-3.0, -4.0], [0.0, 0.0]])


def complex_mixture_target() -> TargetDensity:
    """Four-component 2-d target: Gaussian x t2 at (6,0), t3 x Gaussian at
    (0,6), a two-moons component at (-3,-4) and t2 x t3 at the origin, with
    weights (0.2, 0.2, 0.1, 0.5)."""
    moon_norm = _moons_log_norm()
    logw = np.log(_MIX_WEIGHTS)

    def logp(z):
        x, y = z[:, 0], z[:, 1]
        comp0 = normal_logpdf(x, loc=6.0) + student_t_logpdf(y, 2.0)
        comp1 = student_t_logpdf(x, 3.0) + normal_logpdf(y, loc=6.0)
        comp2 = _moons_energy(x + 3.0, y + 4.0) - moon_norm
        comp3 = student_t_logpdf(x, 2.0) + student_t_logpdf(y, 3.0)
        stacked = ad.stack([logw[0] + comp0, logw[1] + comp1,
                            logw[2] + comp2, logw[3] + comp3], axis=0)
        return ad.logsumexp(stacked, axis=0)

    def sampler(n, rng):
        gen = _gen(rng)
        labels = gen.choice(4, size=n, p=_MIX_WEIGHTS)
        out = np.empty((n, 2))
        idx = labels == 0
        m = int(idx.sum())
        out[idx, 0] = 6.0 + gen.standard_normal(m)
        out[idx, 1] = student_t_draw(2.0, gen, m)
        idx = labels == 1
        m = int(idx.sum())
        out[idx, 0] = student_t_draw(3.0, gen, m)
        out[idx, 1] = 6.0 + gen.standard_normal(m)
        idx = labels == 2
        m = int(idx.sum())
        out[idx] = _MIX_CENTERS[2] + _moons_sample(m, gen)
        idx = labels == 3
        m = int(idx.sum())
        out[idx, 0] = student_t_draw(2.0, gen, m)
        out[idx, 1] = student_t_draw(3.0, gen, m)
        return out

    return TargetDensity("complex_mixture", 2, logp, sampler, normalized=True,
                         params={"weights": _MIX_WEIGHTS.tolist(),
                                 "centers": _MIX_CENTERS.tolist()})


# ---------------------------------------------------------------------------
# registry


def make_target(name: str, **kwargs) -> TargetDensity:
    name = name.replace("-", "_")
    if name == "nig":
        return nig_target()
    if name in ("complex_mixture", "mixture"):
        return complex_mixture_target()
    if name in ("normal", "normal2d"):
        return normal_target(dim=int(kwargs.get("dim", 2)))
    if name == "student_line":
        return student_line_target(float(kwargs["nu"]), dim=int(kwargs.get("dim", 2)))
    if name == "wind":
        from . import wind

        return wind.wind_target_from_config(**kwargs)
    raise ValueError(f"unknown target '{name}'")
