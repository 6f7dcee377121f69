"""Monte-Carlo directional tail-index estimation for unnormalized densities.

The estimator probes an unnormalized log-density along a ray mu + r * (sigma
* u) at the extreme order statistics of |t_nu| proposal draws and averages
log-density difference quotients against log-radius spacings.  For a density
with polynomial directional decay rate 1 + xi the estimate converges to xi;
Gaussian-like directions diverge (caught by the cap) and rays leaving the
support or violating monotone decay are flagged LIGHT.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .numerics import RngStream, student_t_draw, top_magnitudes
from .tail_transform import LIGHT, XI_CAP, XI_MIN

__all__ = [
    "TailEntry",
    "TailIndexTable",
    "EstimationError",
    "NonFiniteProbeError",
    "DegenerateSpacingError",
    "MonotonicityViolation",
    "estimate_directional",
    "build_table",
]


class EstimationError(RuntimeError):
    pass


class NonFiniteProbeError(EstimationError):
    """A probed log-density value was NaN or -Inf (support boundary)."""


class DegenerateSpacingError(EstimationError):
    """Tied proposal magnitudes made a log spacing vanish."""


class MonotonicityViolation(EstimationError):
    """The log-density increased between extreme probe radii."""


@dataclass
class TailEntry:
    raw: float
    xi: float  # clamped value actually used, or LIGHT
    flag: str = ""  # "", "floor", "cap", "boundary", "nonmonotone"


@dataclass
class TailIndexTable:
    """Per (component, coordinate, sign) tail indices with clamp provenance."""

    entries: dict = field(default_factory=dict)  # (k, l, sign) -> TailEntry
    n_used: int = 0
    j_used: int = 0
    proposal_nu: float = 2.0

    def xi(self, k: int, l: int, sign: int) -> float:
        entry = self.entries.get((k, l, sign))
        return LIGHT if entry is None else entry.xi

    def xi_arrays(self, k: int, dim: int):
        xi_pos = np.array([self.xi(k, l, +1) for l in range(dim)])
        xi_neg = np.array([self.xi(k, l, -1) for l in range(dim)])
        return xi_pos, xi_neg

    def components(self):
        return sorted({k for (k, _, _) in self.entries})

    def to_csv(self, path, config_hash: str | None = None):
        with open(path, "w", newline="") as fh:
            if config_hash is not None:
                fh.write(f"# config_sha256: {config_hash}\n")
            writer = csv.writer(fh)
            writer.writerow(["component", "coordinate", "sign", "xi", "clamped_flag"])
            for (k, l, sign) in sorted(self.entries):
                entry = self.entries[(k, l, sign)]
                xi_str = "inf" if not np.isfinite(entry.xi) else repr(float(entry.xi))
                writer.writerow([k, l, sign, xi_str, entry.flag])

    @classmethod
    def from_csv(cls, path) -> "TailIndexTable":
        table = cls()
        with open(path) as fh:
            rows = [r for r in csv.reader(line for line in fh if not line.startswith("#"))]
        for row in rows[1:]:
            k, l, sign = int(row[0]), int(row[1]), int(row[2])
            xi = float(row[3])
            table.entries[(k, l, sign)] = TailEntry(raw=np.nan, xi=xi, flag=row[4])
        return table


def estimate_directional(logp, mu, sigma, u, n: int, j: int, nu: float,
                         rng: RngStream) -> float:
    """Raw directional tail-index estimate (no clamping).

    ``logp`` maps an (m, d) array of points to m log-density values
    (unnormalized allowed).  Raises if a probe is non-finite, if proposal
    magnitudes tie, or if the density increases outward along the ray.
    """
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    u = np.asarray(u, dtype=float)
    if n < j + 1 or j < 1:
        raise ValueError("need n >= j + 1 and j >= 1")
    if abs(np.linalg.norm(u) - 1.0) > 1e-8:
        raise ValueError("direction must have unit norm")
    if np.any(sigma <= 0):
        raise ValueError("sigma must be strictly positive")
    draws = student_t_draw(nu, rng, size=n)
    mags = top_magnitudes(draws, j)
    r = mags.values  # descending, length j+1
    points = mu[None, :] + r[:, None] * (sigma * u)[None, :]
    lp = np.asarray(logp(points), dtype=float)
    if not np.all(np.isfinite(lp)):
        raise NonFiniteProbeError(
            f"non-finite log-density at probe radii {r[~np.isfinite(lp)][:3]}")
    # Monotone decay check over the probed extreme radii (largest first).
    increases = np.diff(lp[::-1]) > 1e-8
    if np.any(increases):
        raise MonotonicityViolation("log-density increased between extreme probe radii")
    dlog = np.log(r[:j]) - np.log(r[j])
    if np.any(dlog < 1e-12):
        raise DegenerateSpacingError("degenerate log spacing between order statistics")
    quotients = (lp[:j] - lp[j]) / dlog
    return float(-np.mean(quotients) - 1.0)


def build_table(logp, component_stats, n: int, j: int, nu: float, rng: RngStream,
                weight_threshold: float = 1e-2, xi_min: float = XI_MIN,
                xi_cap: float = XI_CAP) -> TailIndexTable:
    """Axis-wise tail table over mixture components above the weight threshold.

    ``component_stats`` is a sequence of (k, mu, sigma, weight).  Entries that
    diverge past ``xi_cap``, leave the support, or violate monotone decay are
    stored as LIGHT with an explanatory flag.
    """
    table = TailIndexTable(n_used=n, j_used=j, proposal_nu=nu)
    for (k, mu, sigma, weight) in component_stats:
        if weight <= weight_threshold:
            continue
        dim = len(mu)
        for l in range(dim):
            for sign in (+1, -1):
                u = np.zeros(dim)
                u[l] = float(sign)
                stream = rng.derive(f"tails.k{k}.l{l}.s{sign}")
                try:
                    raw = estimate_directional(logp, mu, sigma, u, n, j, nu, stream)
                except NonFiniteProbeError:
                    table.entries[(k, l, sign)] = TailEntry(np.inf, LIGHT, "boundary")
                    continue
                except MonotonicityViolation:
                    warnings.warn(
                        f"monotone-decay assumption violated for component {k}, "
                        f"coordinate {l}, sign {sign:+d}; marking LIGHT")
                    table.entries[(k, l, sign)] = TailEntry(np.inf, LIGHT, "nonmonotone")
                    continue
                except EstimationError as err:
                    raise EstimationError(
                        f"component {k}, coordinate {l}, sign {sign:+d}: {err}") from err
                if raw > xi_cap:
                    entry = TailEntry(raw, LIGHT, "cap")
                elif max(raw, 0.0) < xi_min:
                    entry = TailEntry(raw, xi_min, "floor")
                else:
                    entry = TailEntry(raw, raw, "")
                table.entries[(k, l, sign)] = entry
    return table
