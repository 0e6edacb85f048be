"""Quantized cumulative frequency tables (16-bit precision)."""

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ..density import SYMBOL_MAX, laplace_log_pmf
from ..errors import InvalidArgumentError

PRECISION = 16
TOTAL = 1 << PRECISION
LAPLACE_TAIL_SCALES = 12


@dataclass(frozen=True)
class CdfTable:
    """Frequencies for symbols ``offset .. offset + len(freq) - 1`` and an
    optional trailing escape symbol. ``cum`` has one more entry than
    ``freq`` and ends at ``TOTAL``.
    """

    freq: np.ndarray
    cum: np.ndarray
    offset: int
    escape: bool
    golomb_order: int = 0

    def __post_init__(self):
        object.__setattr__(self, "cum_list", self.cum.tolist())
        object.__setattr__(self, "freq_list", self.freq.tolist())

    @property
    def window(self):
        return len(self.freq) - (1 if self.escape else 0)

    @property
    def escape_index(self):
        return len(self.freq) - 1 if self.escape else None

    def index_of(self, symbol):
        i = symbol - self.offset
        if 0 <= i < self.window:
            return i
        if not self.escape:
            raise InvalidArgumentError(f"symbol {symbol} outside table window and no escape")
        return self.escape_index

    def probabilities(self):
        return self.freq / TOTAL


def build_table(pmf, escape_mass=0.0, offset=0, escape=True, golomb_order=0):
    """Quantize ``pmf`` (plus escape mass) to integer frequencies summing to 2^16.

    Every entry receives one count up front; the remaining counts are shared
    in proportion to probability with largest-remainder rounding (ties to the
    lower index).
    """
    pmf = np.asarray(pmf, dtype=np.float64)
    if pmf.ndim != 1 or pmf.size == 0:
        raise InvalidArgumentError("empty probability window")
    if not np.all(np.isfinite(pmf)) or np.any(pmf < 0) or not np.isfinite(escape_mass) or escape_mass < 0:
        raise InvalidArgumentError("probabilities must be finite and non-negative")
    p = np.append(pmf, escape_mass) if escape else pmf
    n = p.size
    if n > TOTAL:
        raise InvalidArgumentError(f"{n} symbols do not fit in {PRECISION}-bit precision")
    spare = TOTAL - n
    total = p.sum()
    share = p / total * spare if total > 0 else np.full(n, spare / n)
    base = np.floor(share)
    left = spare - int(base.sum())
    if left > 0:
        order = np.argsort(-(share - base), kind="stable")[:left]
        base[order] += 1
    freq = (base + 1).astype(np.int64)
    cum = np.concatenate(([0], np.cumsum(freq)))
    return CdfTable(freq=freq, cum=cum, offset=int(offset), escape=escape, golomb_order=golomb_order)


def laplace_half_width(b):
    return int(min(SYMBOL_MAX, math.ceil(float(b) * LAPLACE_TAIL_SCALES)))


@lru_cache(maxsize=8192)
def _laplace_table_cached(b):
    w = laplace_half_width(b)
    k = np.arange(-w, w + 1, dtype=np.float64)
    pmf = np.exp(laplace_log_pmf(k, float(b)))
    return build_table(pmf, max(0.0, 1.0 - pmf.sum()), offset=-w, golomb_order=exp_golomb_order(b))


def laplace_table(b):
    """Residual table for a zero-mean Laplacian of scale ``b``."""
    return _laplace_table_cached(float(b))


def exp_golomb_order(b):
    """Exp-Golomb order used for escaped Laplacian residuals of scale ``b``."""
    return max(0, int(math.floor(math.log2(max(1.0, float(b) * math.log(2.0))))))


def factorized_tables(model):
    """Per-channel hyperprior tables for ``model``, cached until ``refresh()``.

    The window covers every offset whose bin lies inside the central
    ``1 - 1e-6`` mass; anything beyond escapes.
    """
    cached = model.__dict__.get("_hyper_tables")
    if cached is not None:
        return cached
    fd = model.factorized
    m = model.medians().astype(np.float64)
    lo_q = fd.quantile(5e-7)
    hi_q = fd.quantile(1.0 - 5e-7)
    tables = []
    for c in range(fd.channels):
        lo = int(max(-SYMBOL_MAX, math.floor(lo_q[c] - m[c])))
        hi = int(min(SYMBOL_MAX, math.ceil(hi_q[c] - m[c])))
        hi = max(hi, lo)
        if hi - lo + 2 > TOTAL:
            hi = lo + TOTAL - 2
        offsets = np.arange(lo, hi + 1, dtype=np.float64)
        grid = np.zeros((offsets.size, fd.channels))
        grid[:, c] = offsets
        cdf_hi = fd.cdf(m + grid + 0.5)[:, c]
        cdf_lo = fd.cdf(m + grid - 0.5)[:, c]
        pmf = np.maximum(cdf_hi - cdf_lo, 0.0)
        tables.append(build_table(pmf, max(0.0, 1.0 - pmf.sum()), offset=lo))
    model.__dict__["_hyper_tables"] = tables
    return tables
