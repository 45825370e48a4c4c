"""Sparsification modeled as a perturbation ``delta = H(x) - x``.

Three hard-threshold operators ``H``:

* toward-mean: the least significant entries (smallest ``|x - mean(x)|``)
  are moved onto the block mean, so full sparsity leaves the mean behind
  instead of zeros;
* zero-mask baseline: the smallest ``|x|`` entries are zeroed;
* structured M:N: in every group of N consecutive entries only the M
  largest ``|x|`` survive.

Every function operates along the last axis and accepts a stack of blocks.
Rankings are stable, so ties go to the lower index.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .tensor import as_array


class SparsityMode(str, enum.Enum):
    TOWARD_MEAN = "toward-mean"
    ZERO = "zero-mask-baseline"
    STRUCTURED = "structured-mn"


@dataclass(frozen=True)
class SparsityConfig:
    mode: SparsityMode = SparsityMode.TOWARD_MEAN
    fraction: Optional[float] = None
    m: Optional[int] = None
    n: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "mode", SparsityMode(self.mode))
        if self.mode is SparsityMode.STRUCTURED:
            if self.fraction is not None:
                raise ValueError("structured mode takes m and n, not fraction")
            if self.m is None or self.n is None or not 1 <= self.m <= self.n:
                raise ValueError(f"structured mode needs 1 <= m <= n, got {self.m}:{self.n}")
        else:
            if self.m is not None or self.n is not None:
                raise ValueError(f"{self.mode.value} takes a fraction, not m:n")
            if self.fraction is None or not 0.0 <= self.fraction <= 1.0:
                raise ValueError(f"fraction must be in [0, 1], got {self.fraction}")

    @classmethod
    def toward_mean(cls, fraction: float) -> "SparsityConfig":
        return cls(SparsityMode.TOWARD_MEAN, fraction=fraction)

    @classmethod
    def zero(cls, fraction: float) -> "SparsityConfig":
        return cls(SparsityMode.ZERO, fraction=fraction)

    @classmethod
    def structured(cls, m: int, n: int) -> "SparsityConfig":
        return cls(SparsityMode.STRUCTURED, m=m, n=n)

    def label(self) -> str:
        if self.mode is SparsityMode.STRUCTURED:
            return f"{self.m}:{self.n}"
        return f"{self.mode.value}@{self.fraction:g}"


@dataclass
class SparsityPattern:
    kept: np.ndarray
    replaced_value: Union[float, np.ndarray]
    delta: np.ndarray

    @property
    def num_replaced(self) -> int:
        return int(np.size(self.kept) - np.count_nonzero(self.kept))


def replace_count(fraction: float, n: int) -> int:
    # round away binary noise such as 0.29 * 100 = 28.999999999999996 before flooring
    return math.floor(round(fraction * n, 9))


def _replace_smallest(x: np.ndarray, score: np.ndarray, count: int, value: np.ndarray):
    kept = np.ones(x.shape, dtype=bool)
    if count:
        order = np.argsort(score, axis=-1, kind="stable")[..., :count]
        np.put_along_axis(kept, order, False, axis=-1)
    delta = np.where(kept, 0.0, value - x)
    # y is defined through delta so that y == x + delta holds bit for bit
    return x + delta, SparsityPattern(kept, value, delta)


def sparsify_toward_mean(x, fraction: float):
    """Move the ``floor(fraction * N)`` entries closest to the block mean onto it."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")
    x = as_array(x)
    mean = x.mean(axis=-1, keepdims=True)
    y, pattern = _replace_smallest(x, np.abs(x - mean), replace_count(fraction, x.shape[-1]), mean)
    if x.ndim == 1:
        pattern.replaced_value = float(mean[0])
    return y, pattern


def sparsify_zero_baseline(x, fraction: float):
    """Zero the ``floor(fraction * N)`` smallest-magnitude entries (multiplicative mask)."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")
    x = as_array(x)
    count = replace_count(fraction, x.shape[-1])
    y, pattern = _replace_smallest(x, np.abs(x), count, np.zeros_like(x))
    pattern.replaced_value = 0.0
    return y, pattern


def _group_keep(x: np.ndarray, keep: int) -> np.ndarray:
    """Mask keeping the ``keep`` largest |x| per trailing group."""
    kept = np.zeros(x.shape, dtype=bool)
    if keep:
        # stable descending order by |x| with ties to the lower index
        order = np.argsort(-np.abs(x), axis=-1, kind="stable")[..., :keep]
        np.put_along_axis(kept, order, True, axis=-1)
    return kept


def tail_keep(m: int, n: int, g: int) -> int:
    """Survivors in a trailing group of ``g < n`` entries."""
    return math.ceil(m * g / n)


def structured_mask(x, m: int, n: int) -> np.ndarray:
    if not 1 <= m <= n:
        raise ValueError(f"need 1 <= m <= n, got {m}:{n}")
    x = as_array(x)
    length = x.shape[-1]
    full = length // n * n
    lead = x.shape[:-1]
    parts = []
    if full:
        groups = x[..., :full].reshape(*lead, full // n, n)
        parts.append(_group_keep(groups, m).reshape(*lead, full))
    if length - full:
        parts.append(_group_keep(x[..., full:], tail_keep(m, n, length - full)))
    return np.concatenate(parts, axis=-1)


def sparsify_structured(x, m: int, n: int):
    """Keep the ``m`` largest-magnitude entries of every ``n`` consecutive ones."""
    x = as_array(x)
    kept = structured_mask(x, m, n)
    delta = np.where(kept, 0.0, -x)
    return x + delta, SparsityPattern(kept, 0.0, delta)


def sparsify(x, cfg: SparsityConfig):
    if cfg.mode is SparsityMode.TOWARD_MEAN:
        return sparsify_toward_mean(x, cfg.fraction)
    if cfg.mode is SparsityMode.ZERO:
        return sparsify_zero_baseline(x, cfg.fraction)
    return sparsify_structured(x, cfg.m, cfg.n)


def ternarize(y, lam: float = 0.01):
    """Sign codes plus a bias-free ridge scale: ``a = mean(q*y) / (mean(q**2) + lam)``.

    Returns ``(q, a, degenerate)``; ``degenerate`` is set when every code is
    zero and ``lam == 0``, in which case ``a = 0``.
    """
    y = as_array(y)
    q = np.sign(y).astype(np.int8)
    num = np.mean(q * y, axis=-1)
    den = np.mean(q.astype(np.float64) ** 2, axis=-1) + lam
    degenerate = den <= 0
    a = np.where(degenerate, 0.0, num / np.where(degenerate, 1.0, den))
    if y.ndim == 1:
        return q, float(a), bool(degenerate)
    return q, a, degenerate


def bits_per_element(sparsity: SparsityConfig, bits: int = 1) -> float:
    """Average storage per weight for M:N codes, excluding reconstruction coefficients.

    For groups of four with sign (ternary) codes this is the index cost of
    the survivors, ``m * log2(n) / n``: 0.5, 1.0 and 1.5 bits for 1:4, 2:4
    and 3:4. Any other layout is charged the entropy of the kept-position
    pattern plus ``bits`` per survivor, ``log2(C(n, m)) / n + m * bits / n``.
    """
    if sparsity.mode is not SparsityMode.STRUCTURED:
        raise ValueError("bits_per_element is defined for structured M:N sparsity")
    m, n = sparsity.m, sparsity.n
    if n == 4 and bits == 1:
        return m * math.log2(n) / n
    return math.log2(math.comb(n, m)) / n + m * bits / n
