"""Special functions, splittable RNG streams, and order-statistics helpers.

Everything here is deterministic given an explicit :class:`RngStream`; no
global random state is touched anywhere in the package.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy import special as _special

__all__ = [
    "RngStream",
    "OrderedMagnitudes",
    "erfc",
    "erfcinv",
    "log_erfc",
    "student_t_draw",
    "top_magnitudes",
]


def _purpose_id(purpose: str) -> int:
    """Map a purpose string to a stable 63-bit stream id."""
    digest = hashlib.blake2b(purpose.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


@dataclass(frozen=True)
class RngStream:
    """A named, splittable random stream.

    Identical ``(seed, stream_id)`` pairs always reproduce the same draw
    sequence; distinct stream ids are independent by construction (the pair
    seeds a ``SeedSequence`` spawn key).
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this stream."""
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,))
        return np.random.Generator(np.random.PCG64(ss))

    def derive(self, purpose: str) -> "RngStream":
        """Child stream keyed by a purpose string (order-independent)."""
        mixed = _purpose_id(purpose) ^ (self.stream_id * 0x9E3779B97F4A7C15 & (2**63 - 1))
        return RngStream(self.seed, mixed)


def _as_generator(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError(f"expected RngStream or numpy Generator, got {type(rng)!r}")


@dataclass(frozen=True)
class OrderedMagnitudes:
    """Magnitudes sorted in decreasing order with their source indices."""

    values: np.ndarray
    source_indices: np.ndarray

    def __post_init__(self):
        if np.any(np.diff(self.values) > 0):
            raise ValueError("magnitudes must be non-increasing")


def erfc(x):
    """Complementary error function, elementwise."""
    return _special.erfc(x)


def erfcinv(p):
    """Inverse of :func:`erfc` on (0, 2)."""
    p = np.asarray(p, dtype=float)
    if np.any(p <= 0.0) or np.any(p >= 2.0):
        raise ValueError("erfcinv requires arguments in the open interval (0, 2)")
    out = _special.erfcinv(p)
    return out if out.ndim else float(out)


def log_erfc(x):
    """log(erfc(x)), stable for large positive x via the scaled erfcx."""
    x = np.asarray(x, dtype=float)
    out = np.where(x > 0.0, np.log(_special.erfcx(np.maximum(x, 0.0))) - x * x,
                   np.log(_special.erfc(np.minimum(x, 0.0))))
    return out if out.ndim else float(out)


def student_t_draw(nu: float, rng, size=None):
    """Student's-t draws with ``nu`` degrees of freedom.

    Sampled as normal / sqrt(chi^2 / nu), which is exact for every real
    nu > 0 (the chi-square comes from a gamma draw, so non-integer nu is
    fine).
    """
    if not nu > 0:
        raise ValueError(f"degrees of freedom must be positive, got {nu}")
    gen = _as_generator(rng)
    z = gen.standard_normal(size)
    chi2 = 2.0 * gen.standard_gamma(nu / 2.0, size)
    return z / np.sqrt(chi2 / nu)


def top_magnitudes(xs, j: int) -> OrderedMagnitudes:
    """The j+1 largest |x| in decreasing order.

    Ties are broken by ascending source index so results are identical
    across platforms.
    """
    xs = np.asarray(xs, dtype=float)
    if xs.ndim != 1:
        raise ValueError("expected a 1-d sequence")
    if j < 1:
        raise ValueError("j must be a positive integer")
    if xs.size < j + 1:
        raise ValueError(f"need at least {j + 1} samples, got {xs.size}")
    mags = np.abs(xs)
    # stable sort on -|x| keeps ascending source order within ties
    order = np.argsort(-mags, kind="stable")[: j + 1]
    return OrderedMagnitudes(values=mags[order], source_indices=order)
