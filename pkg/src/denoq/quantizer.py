"""Blockwise min-max quantization with ridge-regression reconstruction.

Each block goes through three steps:

1. ``affine_forward``: min-max scale ``x`` onto ``[0, 2**bits - 1]``.
2. ``inject_perturbation``: round to integer codes ``q``; the residual
   ``delta = q - scaled`` is bounded by 0.5 and never clipped.
3. ``ridge_solve`` + ``reconstruct``: fit ``r = a*q + b`` by least squares
   with an L2 penalty ``lam * a**2 / 2`` on the scale, which gives::

       a = Cov(x, q) / (Var(q) + lam),   b = mean(x) - a * mean(q)

   Large ``lam`` shrinks every block toward its mean (a piecewise-constant
   backbone); ``lam = 0`` with unperturbed codes is an exact inverse.

All moments are population moments (divide by N). Block math runs in
float64 regardless of the input dtype.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .floatfmt import round_e5m2
from .tensor import BlockPartition, as_array, from_rows, normalize_axis, partition, to_rows


class Rounding(str, enum.Enum):
    HALF_EVEN = "half-to-even"
    HALF_AWAY = "half-away-from-zero"


class CoeffPrecision(str, enum.Enum):
    FULL = "full"
    E5M2 = "e5m2-simulated"


COEFF_BITS = {CoeffPrecision.FULL: 64, CoeffPrecision.E5M2: 16}


@dataclass(frozen=True)
class QuantConfig:
    bits: int = 4
    block_size: int = 128
    lam: float = 0.01
    epsilon: float = 1e-6
    rounding: Rounding = Rounding.HALF_EVEN
    coeff_precision: CoeffPrecision = CoeffPrecision.FULL

    def __post_init__(self):
        object.__setattr__(self, "rounding", Rounding(self.rounding))
        object.__setattr__(self, "coeff_precision", CoeffPrecision(self.coeff_precision))
        if not 1 <= int(self.bits) <= 8:
            raise ValueError(f"bits must be in [1, 8], got {self.bits}")
        if int(self.block_size) < 1:
            raise ValueError(f"block_size must be >= 1, got {self.block_size}")
        if not (self.lam >= 0 and math.isfinite(self.lam)):
            raise ValueError(f"lambda must be finite and >= 0, got {self.lam}")
        if not (self.epsilon > 0 and math.isfinite(self.epsilon)):
            raise ValueError(f"epsilon must be finite and > 0, got {self.epsilon}")

    @property
    def levels(self) -> int:
        return (1 << self.bits) - 1

    @property
    def coeff_bits(self) -> int:
        return COEFF_BITS[self.coeff_precision]

    def replace(self, **changes) -> "QuantConfig":
        return QuantConfig(**{**self.__dict__, **changes})


@dataclass(frozen=True)
class ReconstructionStats:
    x_mean: float
    q_mean: float
    var_q: float
    cov_xq: float
    kappa: float
    mse: float
    max_abs_delta: float = 0.0
    degenerate: bool = False


@dataclass(frozen=True)
class QuantizedBlock:
    q: np.ndarray
    a: float
    b: float

    @property
    def n(self) -> int:
        return int(self.q.size)

    def dequantize(self) -> np.ndarray:
        return reconstruct(self.q, self.a, self.b)


# ---------------------------------------------------------------------------
# Vectorized kernels: every function below works along the last axis, so the
# same code serves a single block (shape (N,)) and a stack of blocks.
# ---------------------------------------------------------------------------


def _affine(x, bits, epsilon):
    x_min = x.min(axis=-1, keepdims=True)
    x_max = x.max(axis=-1, keepdims=True)
    scaled = (x - x_min) / (x_max - x_min + epsilon) * ((1 << bits) - 1)
    return scaled, x_min, x_max


def _round(scaled, rounding):
    if Rounding(rounding) is Rounding.HALF_EVEN:
        return np.rint(scaled)
    floor = np.floor(scaled)
    return floor + (scaled - floor >= 0.5)


def _moments(x, q, lam):
    """Ridge solution and intermediate moments, keepdims along the last axis."""
    x_mean = x.mean(axis=-1, keepdims=True)
    q_mean = q.mean(axis=-1, keepdims=True)
    qc = q - q_mean
    var_q = np.mean(qc * qc, axis=-1, keepdims=True)
    cov = np.mean((x - x_mean) * qc, axis=-1, keepdims=True)
    denom = var_q + lam
    degenerate = denom <= 0
    safe = np.where(degenerate, 1.0, denom)
    a = np.where(degenerate, 0.0, cov / safe)
    # a pinned to 0 on degenerate blocks does not react to the data at all
    kappa = np.where(degenerate, 0.0, 1.0 / safe)
    b = x_mean - a * q_mean
    return dict(a=a, b=b, x_mean=x_mean, q_mean=q_mean, var_q=var_q, cov=cov,
                kappa=kappa, degenerate=degenerate)


def _coeffs(a, b, cfg: QuantConfig):
    if cfg.coeff_precision is CoeffPrecision.E5M2:
        return np.asarray(round_e5m2(a)), np.asarray(round_e5m2(b))
    return a, b


def quantize_blocks(x: np.ndarray, cfg: QuantConfig, delta: Optional[np.ndarray] = None) -> dict:
    """Run the whole pipeline on a stack of equal-length blocks (last axis).

    If ``delta`` is given it replaces the rounding residual, so
    ``q = scaled + delta`` need not be integral. This is the hook used to
    evaluate the smooth surrogate with the perturbation held fixed.
    """
    scaled, x_min, x_max = _affine(x, cfg.bits, cfg.epsilon)
    if delta is None:
        q = _round(scaled, cfg.rounding)
        delta = q - scaled
    else:
        q = scaled + delta
    out = _moments(x, q, cfg.lam)
    a, b = _coeffs(out["a"], out["b"], cfg)
    r = a * q + b
    out.update(scaled=scaled, x_min=x_min, x_max=x_max, q=q, delta=delta, a=a, b=b, r=r)
    return out


# ---------------------------------------------------------------------------
# Single-block API
# ---------------------------------------------------------------------------


def _block(x) -> np.ndarray:
    x = as_array(x).reshape(-1)
    if x.size == 0:
        raise ValueError("empty block")
    if not np.all(np.isfinite(x)):
        raise ValueError("block contains non-finite values")
    return x


def affine_forward(x, bits: int, epsilon: float = 1e-6) -> tuple[np.ndarray, float, float]:
    """Min-max scale a block onto ``[0, 2**bits - 1]``."""
    x = _block(x)
    scaled, x_min, x_max = _affine(x, bits, epsilon)
    return scaled, float(x_min[0]), float(x_max[0])


def inject_perturbation(scaled, rounding=Rounding.HALF_EVEN) -> tuple[np.ndarray, np.ndarray]:
    """Round to the nearest integer code; return ``(q, q - scaled)``."""
    scaled = as_array(scaled)
    q = _round(scaled, rounding)
    return q.astype(np.int64), q - scaled


def ridge_solve(x, q, lam: float, delta=None) -> tuple[float, float, ReconstructionStats]:
    """Closed-form ridge fit of ``x ~ a*q + b`` with penalty on ``a`` only.

    When ``Var(q) + lam == 0`` the fit is 0/0; the block then falls back to
    ``a = 0, b = mean(x)`` and ``stats.degenerate`` is set.
    """
    x = _block(x)
    q = as_array(q).reshape(-1)
    if q.shape != x.shape:
        raise ValueError(f"x and q lengths differ: {x.size} vs {q.size}")
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    m = _moments(x, q, lam)
    a, b = float(m["a"][0]), float(m["b"][0])
    r = a * q + b
    stats = ReconstructionStats(
        x_mean=float(m["x_mean"][0]),
        q_mean=float(m["q_mean"][0]),
        var_q=float(m["var_q"][0]),
        cov_xq=float(m["cov"][0]),
        kappa=float(m["kappa"][0]),
        mse=float(np.mean((r - x) ** 2)),
        max_abs_delta=0.0 if delta is None else float(np.max(np.abs(delta))),
        degenerate=bool(m["degenerate"][0]),
    )
    return a, b, stats


def reconstruct(q, a: float, b: float) -> np.ndarray:
    return a * as_array(q) + b


def quantize_block(x, cfg: QuantConfig = QuantConfig()) -> tuple[QuantizedBlock, ReconstructionStats]:
    x = _block(x)
    out = quantize_blocks(x, cfg)
    r = out["r"]
    stats = ReconstructionStats(
        x_mean=float(out["x_mean"][0]),
        q_mean=float(out["q_mean"][0]),
        var_q=float(out["var_q"][0]),
        cov_xq=float(out["cov"][0]),
        kappa=float(out["kappa"][0]),
        mse=float(np.mean((r - x) ** 2)),
        max_abs_delta=float(np.max(np.abs(out["delta"]))),
        degenerate=bool(out["degenerate"][0]),
    )
    block = QuantizedBlock(out["q"].astype(np.int64), float(out["a"][0]), float(out["b"][0]))
    return block, stats


# ---------------------------------------------------------------------------
# Tensors
# ---------------------------------------------------------------------------


def split_blocks(rows: np.ndarray, part: BlockPartition) -> list[np.ndarray]:
    """View ``rows`` (R x L) as [full blocks (R, nf, B), ragged tail (R, 1, t)]."""
    pieces = []
    full = part.num_full * part.block_size
    if part.num_full:
        pieces.append(rows[:, :full].reshape(rows.shape[0], part.num_full, part.block_size))
    if part.tail:
        pieces.append(rows[:, full:].reshape(rows.shape[0], 1, part.tail))
    return pieces


def join_blocks(pieces: list[np.ndarray]) -> np.ndarray:
    return np.concatenate([p.reshape(p.shape[0], -1) for p in pieces], axis=1)


def join_coeffs(pieces: list[np.ndarray]) -> np.ndarray:
    """Concatenate per-block (R, nb, 1) values into (R, nblocks)."""
    return np.concatenate([p[..., 0] for p in pieces], axis=1)


@dataclass
class QuantizedTensor:
    """Codes and per-block coefficients of a tensor blocked along ``axis``.

    ``codes`` is (rows x axis_len) with ``axis`` moved last; ``scale`` and
    ``bias`` are (rows x num_blocks).
    """

    shape: tuple[int, ...]
    axis: int
    config: QuantConfig
    codes: np.ndarray
    scale: np.ndarray
    bias: np.ndarray
    sparsity: Optional[object] = None
    kept: Optional[np.ndarray] = None

    @property
    def partition(self) -> BlockPartition:
        return partition(self.shape[self.axis], self.config.block_size)

    @property
    def rows(self) -> int:
        return self.codes.shape[0]

    @property
    def num_blocks(self) -> int:
        return self.scale.size

    def moved_shape(self) -> tuple[int, ...]:
        return tuple(np.moveaxis(np.empty(self.shape, dtype=np.uint8), self.axis, -1).shape)

    def blocks(self) -> list[QuantizedBlock]:
        out = []
        for row in range(self.rows):
            for j, sl in enumerate(self.partition.slices()):
                out.append(QuantizedBlock(
                    self.codes[row, sl].astype(np.int64),
                    float(self.scale[row, j]),
                    float(self.bias[row, j]),
                ))
        return out

    def expand_coeffs(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-element scale and bias, (rows x axis_len)."""
        lengths = [length for _, length in self.partition]
        return np.repeat(self.scale, lengths, axis=1), np.repeat(self.bias, lengths, axis=1)

    def dequantize_rows(self) -> np.ndarray:
        a, b = self.expand_coeffs()
        return a * self.codes + b

    def dequantize(self) -> np.ndarray:
        return from_rows(self.dequantize_rows(), self.moved_shape(), self.axis)

    def effective_bits(self) -> float:
        return effective_bits(self.config, self.num_blocks, self.codes.size)


def effective_bits(cfg: QuantConfig, num_blocks: int, num_elements: int) -> float:
    """Code bits plus amortized coefficient storage per element."""
    return cfg.bits + cfg.coeff_bits * num_blocks / num_elements


@dataclass
class TensorSummary:
    mse: float
    max_abs_err: float
    mean_kappa: float
    max_kappa: float
    effective_bits: float
    num_blocks: int
    degenerate_blocks: int
    max_abs_delta: float
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "extra"}
        d.update(self.extra)
        return d


def quantize_tensor(t, axis: int = -1, cfg: QuantConfig = QuantConfig(), sparsity=None):
    """Quantize every (row, block) of ``t`` independently along ``axis``.

    With ``sparsity`` set, each block is sparsified first and the quantizer
    (including its min/max) sees the sparsified block; errors are still
    measured against the original values.

    Returns ``(QuantizedTensor, TensorSummary)``.
    """
    arr = as_array(t)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    axis = normalize_axis(axis, arr.ndim)
    rows, _ = to_rows(arr, axis)
    part = partition(rows.shape[1], cfg.block_size)

    codes, scale, bias, kappa, degen, recon, kept, max_delta = [], [], [], [], [], [], [], 0.0
    for piece in split_blocks(rows, part):
        if sparsity is not None:
            from .sparsifier import sparsify

            piece, pattern = sparsify(piece, sparsity)
            kept.append(pattern.kept)
        out = quantize_blocks(piece, cfg)
        codes.append(out["q"])
        recon.append(out["r"])
        scale.append(out["a"])
        bias.append(out["b"])
        kappa.append(out["kappa"])
        degen.append(out["degenerate"])
        max_delta = max(max_delta, float(np.max(np.abs(out["delta"]))))

    qt = QuantizedTensor(
        shape=tuple(arr.shape), axis=axis, config=cfg,
        codes=join_blocks(codes).astype(np.uint8),
        scale=join_coeffs(scale), bias=join_coeffs(bias),
        sparsity=sparsity, kept=join_blocks(kept) if kept else None,
    )
    err = join_blocks(recon) - rows
    kappa = join_coeffs(kappa)
    summary = TensorSummary(
        mse=float(np.mean(err**2)),
        max_abs_err=float(np.max(np.abs(err))),
        mean_kappa=float(np.mean(kappa)),
        max_kappa=float(np.max(kappa)),
        effective_bits=qt.effective_bits(),
        num_blocks=qt.num_blocks,
        degenerate_blocks=int(join_coeffs(degen).sum()),
        max_abs_delta=max_delta,
    )
    return qt, summary


def fake_quantize(t, axis: int = -1, cfg: QuantConfig = QuantConfig(), sparsity=None) -> np.ndarray:
    """Quantize then reconstruct, returning an array shaped like ``t``."""
    qt, _ = quantize_tensor(t, axis, cfg, sparsity)
    return qt.dequantize()


def dequantize_step(x_min: float, x_max: float, bits: int) -> float:
    """Worst-case rounding error mapped back to input units under plain inverse scaling."""
    return (x_max - x_min) / (1 << bits)
