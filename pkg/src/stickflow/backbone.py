"""Shared invertible backbone: autoregressive rational-quadratic spline blocks
interleaved with LU-parameterized linear mixing layers.

Each block is (spline, LU-linear).  Splines act per coordinate with a one
hidden layer conditioner on the preceding coordinates, are identity at
initialization (zeroed output heads), and continue linearly outside
[-bound, bound] so the whole stack stays bi-Lipschitz.  The LU layer uses a
fixed reversal permutation with unit-lower L and positive-diagonal U.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import GraphError

__all__ = ["FlowStack", "FlowError"]

# softplus(raw + _DERIV_SHIFT) == 1 at raw == 0, so zero heads start at identity
_DERIV_SHIFT = float(np.log(np.e - 1.0))
_MIN_BIN = 1e-3


class FlowError(RuntimeError):
    """Non-finite intermediate inside a flow layer."""


def _softmax(x):
    m = np.max(ad.val(x), axis=-1, keepdims=True)
    e = ad.exp(x - m)
    return e / ad.sum_(e, axis=-1, keepdims=True)


def _transpose(m):
    if isinstance(m, ad.Node):
        return ad.Node(m.value.T, parents=(m,), vjps=(lambda g: g.T,), op="transpose")
    return m.T


def _column(x):
    return ad.reshape(x, (-1, 1)) if isinstance(x, ad.Node) else ad.val(x)[:, None]


class FlowStack:
    """A stack of (autoregressive spline, LU-linear) blocks."""

    def __init__(self, dim: int, n_blocks: int = 2, bins: int = 3, hidden: int = 64,
                 bound: float = 10.0, prefix: str = "backbone.", rng=None):
        self.dim = dim
        self.n_blocks = n_blocks
        self.bins = bins
        self.hidden = hidden
        self.bound = float(bound)
        self.prefix = prefix
        self.params: dict[str, np.ndarray] = {}
        gen = rng.generator() if hasattr(rng, "generator") else rng
        n_out = 3 * bins - 1
        for i in range(n_blocks):
            for l in range(dim):
                scale = 0.5 / np.sqrt(max(l, 1))
                w1 = (gen.standard_normal((l, hidden)) * scale if gen is not None
                      else np.zeros((l, hidden)))
                self.params[f"{prefix}b{i}.sp{l}.w1"] = w1
                self.params[f"{prefix}b{i}.sp{l}.b1"] = np.zeros(hidden)
                # zero heads: every spline starts as the identity map
                self.params[f"{prefix}b{i}.sp{l}.w2"] = np.zeros((hidden, n_out))
                self.params[f"{prefix}b{i}.sp{l}.b2"] = np.zeros(n_out)
            self.params[f"{prefix}b{i}.lu.lower"] = np.zeros((dim, dim))
            self.params[f"{prefix}b{i}.lu.upper"] = np.zeros((dim, dim))
            self.params[f"{prefix}b{i}.lu.logdiag"] = np.zeros(dim)
        self._perm = np.eye(dim)[::-1].copy()
        self._lower_mask = np.tril(np.ones((dim, dim)), k=-1)
        self._upper_mask = np.triu(np.ones((dim, dim)), k=1)
        self._eye = np.eye(dim)

    # -- parameter resolution --------------------------------------------

    def _g(self, pp, name):
        full = self.prefix + name
        if pp is not None and full in pp:
            return pp[full]
        return self.params[full]

    # -- spline machinery --------------------------------------------------

    def _knots(self, pp, block, coord, inputs):
        """Knot positions, bin sizes and knot derivatives for one coordinate.

        Returns arrays of shape (n, .) for coord >= 1 and (1, .) for the
        unconditioned first coordinate.
        """
        bins, bnd = self.bins, self.bound
        b1 = self._g(pp, f"b{block}.sp{coord}.b1")
        w2 = self._g(pp, f"b{block}.sp{coord}.w2")
        b2 = self._g(pp, f"b{block}.sp{coord}.b2")
        if coord == 0:
            hid = ad.reshape(ad.tanh(b1), (1, self.hidden))
            raw = ad.matmul(hid, w2) + b2
        else:
            w1 = self._g(pp, f"b{block}.sp{coord}.w1")
            hid = ad.tanh(ad.matmul(inputs, w1) + b1)
            raw = ad.matmul(hid, w2) + b2
        raw_w = raw[:, :bins]
        raw_h = raw[:, bins:2 * bins]
        raw_d = raw[:, 2 * bins:]
        widths = (_MIN_BIN + (1.0 - _MIN_BIN * bins) * _softmax(raw_w)) * (2 * bnd)
        heights = (_MIN_BIN + (1.0 - _MIN_BIN * bins) * _softmax(raw_h)) * (2 * bnd)
        n_rows = ad.val(widths).shape[0]
        edge = np.full((n_rows, 1), -bnd)
        kx = ad.concatenate([edge, -bnd + ad.cumsum(widths, axis=1)], axis=1)
        ky = ad.concatenate([edge, -bnd + ad.cumsum(heights, axis=1)], axis=1)
        ones = np.ones((n_rows, 1))
        # boundary derivatives pinned to 1 for C1 linear continuation
        derivs = ad.concatenate([ones, ad.softplus(raw_d + _DERIV_SHIFT), ones], axis=1)
        return kx, ky, widths, heights, derivs

    @staticmethod
    def _gather(arr, idx):
        """Row-wise gather supporting both (n, k) and broadcast (1, k) tables."""
        if ad.val(arr).shape[0] == 1:
            return arr[0, idx]
        out = ad.take_along(arr, idx[:, None], axis=1)
        return out[:, 0]

    def _spline_coord(self, pp, block, coord, inputs, x_col, inverse):
        """Transform one coordinate; returns (output column, log-deriv column)."""
        bnd = self.bound
        kx, ky, widths, heights, derivs = self._knots(pp, block, coord, inputs)
        xv = ad.val(x_col)
        inside = np.abs(xv) <= bnd
        safe = ad.where(inside, x_col, np.zeros(()))
        kref = ad.val(ky if inverse else kx)
        if kref.shape[0] == 1:
            idx = np.sum(ad.val(safe)[:, None] >= kref[0, 1:self.bins][None, :], axis=1)
        else:
            idx = np.sum(ad.val(safe)[:, None] >= kref[:, 1:self.bins], axis=1)
        xk = self._gather(kx, idx)
        yk = self._gather(ky, idx)
        wk = self._gather(widths, idx)
        hk = self._gather(heights, idx)
        dk = self._gather(derivs, idx)
        dk1 = self._gather(derivs, idx + 1)
        s = hk / wk
        mix = dk1 + dk - 2.0 * s
        if not inverse:
            t = (safe - xk) / wk
        else:
            delta = safe - yk
            a = hk * (s - dk) + delta * mix
            b = hk * dk - delta * mix
            c = -s * delta
            disc = ad.clip_lower(b * b - 4.0 * a * c, 0.0)
            t = (2.0 * c) / (-b - ad.sqrt(disc))
            # one Newton polish on the closed-form rational map: the stable
            # quadratic root alone can leave ~1e-7 residuals in flat bins
            omt0 = 1.0 - t
            den0 = s + mix * t * omt0
            y0 = yk + hk * (s * t * t + dk * t * omt0) / den0
            slope0 = s * s * (dk1 * t * t + 2.0 * s * t * omt0 + dk * omt0 * omt0) \
                / (den0 * den0)
            t = t - (y0 - safe) / (slope0 * wk)
        omt = 1.0 - t
        den = s + mix * t * omt
        deriv = s * s * (dk1 * t * t + 2.0 * s * t * omt + dk * omt * omt) / (den * den)
        if not inverse:
            y_in = yk + hk * (s * t * t + dk * t * omt) / den
            out = ad.where(inside, y_in, x_col)
            logd = ad.where(inside, ad.log(deriv), np.zeros(()))
        else:
            z_in = xk + t * wk
            out = ad.where(inside, z_in, x_col)
            logd = ad.where(inside, -ad.log(deriv), np.zeros(()))
        return out, logd

    # -- block-level passes --------------------------------------------------

    def _spline_forward(self, pp, block, z):
        cols, total = [], None
        for l in range(self.dim):
            inputs = z[:, :l] if l > 0 else None
            x_col, ld = self._spline_coord(pp, block, l, inputs, z[:, l], inverse=False)
            cols.append(_column(x_col))
            total = ld if total is None else total + ld
        return ad.concatenate(cols, axis=1), total

    def _spline_inverse(self, pp, block, x):
        cols, total = [], None
        for l in range(self.dim):
            inputs = ad.concatenate(cols, axis=1) if l > 0 else None
            z_col, ld = self._spline_coord(pp, block, l, inputs, x[:, l], inverse=True)
            cols.append(_column(z_col))
            total = ld if total is None else total + ld
        return ad.concatenate(cols, axis=1), total

    def _lu_matrix(self, pp, block):
        lower = self._g(pp, f"b{block}.lu.lower")
        upper = self._g(pp, f"b{block}.lu.upper")
        logdiag = self._g(pp, f"b{block}.lu.logdiag")
        lmat = self._eye + lower * self._lower_mask
        umat = upper * self._upper_mask + self._eye * ad.exp(logdiag)
        w = ad.matmul(ad.matmul(self._perm, lmat) if isinstance(lmat, ad.Node)
                      else self._perm @ lmat, umat)
        return w, ad.sum_(logdiag)

    # -- public API ------------------------------------------------------------

    def forward(self, z, pp=None):
        """Push base points through the stack; returns (x, per-row log-det)."""
        z = self._check_input(z)
        n = ad.val(z).shape[0]
        logdet = np.zeros(n)
        out = z
        for i in range(self.n_blocks):
            try:
                out, ld1 = self._spline_forward(pp, i, out)
                w, ld2 = self._lu_matrix(pp, i)
                out = ad.matmul(out, _transpose(w))
            except GraphError as e:
                raise FlowError(f"forward failed in block {i}: {e}") from e
            if not isinstance(out, ad.Node) and not np.isfinite(out).all():
                raise FlowError(f"non-finite output of block {i} (forward)")
            logdet = logdet + ld1 + ld2
        return out, logdet

    def inverse(self, x, pp=None):
        """Invert the stack; returns (z, per-row log-det of the inverse map)."""
        x = self._check_input(x)
        n = ad.val(x).shape[0]
        logdet = np.zeros(n)
        out = x
        for i in reversed(range(self.n_blocks)):
            try:
                w, ld2 = self._lu_matrix(pp, i)
                out = ad.matmul(out, _transpose(ad.matinv(w)))
                out, ld1 = self._spline_inverse(pp, i, out)
            except GraphError as e:
                raise FlowError(f"inverse failed in block {i}: {e}") from e
            if not isinstance(out, ad.Node) and not np.isfinite(ad.val(out)).all():
                raise FlowError(f"non-finite output of block {i} (inverse)")
            logdet = logdet + ld1 - ld2
        return out, logdet

    def _check_input(self, z):
        v = ad.val(z)
        if v.ndim != 2 or v.shape[1] != self.dim:
            raise ValueError(f"expected shape (n, {self.dim}), got {v.shape}")
        if not isinstance(z, ad.Node) and not np.isfinite(v).all():
            raise FlowError("non-finite input to flow stack")
        return z
