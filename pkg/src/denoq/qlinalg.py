"""Sub-channel blockwise quantized matrix multiplication.

``Y = X @ W`` is quantized by cutting the contraction dimension into blocks:
each row of ``X`` and each column of ``W`` carries its own codes and
``(a, b)`` per block. Two paths compute the product:

* ``fake_quant_matmul`` reconstructs both operands block by block and sums
  the partial float products;
* ``integer_expand_matmul`` keeps the codes integral. Per block ``s`` of
  length ``n_s`` the product expands into::

      (aX aW^T) * (QX QW)                 integer GEMM, rescaled
    + bX (colsum(QW) * aW)^T              rank-1
    + (aX * rowsum(QX)) bW^T              rank-1
    + n_s bX bW^T                         rank-1

Both reduce over blocks in a fixed order.
"""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass
from typing import Iterable, Optional

import numpy as np

from .quantizer import QuantConfig, QuantizedTensor, quantize_tensor
from .tensor import as_array


@dataclass
class MatmulReport:
    bits: int
    block_size: int
    lam: float
    max_abs_err: float
    rel_frobenius_err: float
    effective_bits_x: float
    effective_bits_w: float

    def to_dict(self) -> dict:
        return asdict(self)


def _check_inner(X: np.ndarray, W: np.ndarray):
    if X.ndim not in (2, 3) or W.ndim != 2:
        raise ValueError(f"expected X of rank 2 or 3 and W of rank 2, got {X.shape} and {W.shape}")
    if X.shape[-1] != W.shape[0]:
        raise ValueError(f"inner dimensions differ: {X.shape} @ {W.shape}")


def quantize_matrix(M, contraction_axis: int, cfg: QuantConfig) -> QuantizedTensor:
    """Quantize a 2-D operand with blocks along its contraction axis (1 for X, 0 for W)."""
    M = as_array(M)
    if M.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {M.shape}")
    qt, _ = quantize_tensor(M, axis=contraction_axis, cfg=cfg)
    return qt


def _operand_blocks(qt: QuantizedTensor):
    """Yield (codes, a, b) per block as (vectors x n_s), (vectors,), (vectors,)."""
    for j, sl in enumerate(qt.partition.slices()):
        yield qt.codes[:, sl], qt.scale[:, j], qt.bias[:, j]


def _check_pair(Xq: QuantizedTensor, Wq: QuantizedTensor):
    if len(Xq.shape) != 2 or len(Wq.shape) != 2 or Xq.axis != 1 or Wq.axis != 0:
        raise ValueError("X must be blocked along columns and W along rows")
    if Xq.partition != Wq.partition:
        raise ValueError(
            f"contraction partitions differ: {Xq.partition.blocks} vs {Wq.partition.blocks}"
        )


def fake_quant_matmul_q(Xq: QuantizedTensor, Wq: QuantizedTensor) -> np.ndarray:
    """Reconstruct-then-multiply on already quantized operands."""
    _check_pair(Xq, Wq)
    Y = np.zeros((Xq.shape[0], Wq.shape[1]))
    for (qx, ax, bx), (qw, aw, bw) in zip(_operand_blocks(Xq), _operand_blocks(Wq)):
        Xr = ax[:, None] * qx + bx[:, None]
        Wr = (aw[:, None] * qw + bw[:, None]).T
        Y += Xr @ Wr
    return Y


def integer_expand_matmul(Xq: QuantizedTensor, Wq: QuantizedTensor) -> np.ndarray:
    """Four-term expansion with an integer-only code product per block."""
    _check_pair(Xq, Wq)
    Y = np.zeros((Xq.shape[0], Wq.shape[1]))
    for (qx, ax, bx), (qw, aw, bw) in zip(_operand_blocks(Xq), _operand_blocks(Wq)):
        QX = qx.astype(np.int64)
        QW = qw.astype(np.int64).T  # (n_s x o)
        n_s = QX.shape[1]
        Y += np.outer(ax, aw) * (QX @ QW)
        Y += np.outer(bx, QW.sum(axis=0) * aw)
        Y += np.outer(ax * QX.sum(axis=1), bw)
        Y += n_s * np.outer(bx, bw)
    return Y


def fake_quant_matmul(X, W, cfg_x: Optional[QuantConfig] = None, cfg_w: Optional[QuantConfig] = None):
    """Blockwise quantize ``X`` (per row) and ``W`` (per column), then multiply.

    ``X`` may carry a leading batch dimension. A ``None`` config leaves that
    operand in full precision. Both configs must use the same block size.
    """
    X, W = as_array(X), as_array(W)
    _check_inner(X, W)
    if cfg_x is not None and cfg_w is not None and cfg_x.block_size != cfg_w.block_size:
        raise ValueError("operands must share the contraction block size")
    if X.ndim == 3:
        return np.stack([fake_quant_matmul(x, W, cfg_x, cfg_w) for x in X])
    if cfg_x is None and cfg_w is None:
        return X @ W
    Xq = quantize_matrix(X, 1, cfg_x) if cfg_x is not None else None
    Wq = quantize_matrix(W, 0, cfg_w) if cfg_w is not None else None
    if Xq is not None and Wq is not None:
        return fake_quant_matmul_q(Xq, Wq)
    Xr = Xq.dequantize() if Xq is not None else X
    Wr = Wq.dequantize() if Wq is not None else W
    return Xr @ Wr


def quantized_matmul(X, W, cfg_x: QuantConfig, cfg_w: QuantConfig) -> np.ndarray:
    """Quantize both operands and multiply through the integer expansion."""
    X, W = as_array(X), as_array(W)
    _check_inner(X, W)
    if X.ndim == 3:
        return np.stack([quantized_matmul(x, W, cfg_x, cfg_w) for x in X])
    return integer_expand_matmul(quantize_matrix(X, 1, cfg_x), quantize_matrix(W, 0, cfg_w))


def backbone_matmul(X, W, block_size: int) -> np.ndarray:
    """Product of the piecewise-constant operands (every block replaced by its mean)."""
    X, W = as_array(X), as_array(W)
    _check_inner(X, W)
    Y = np.zeros((X.shape[0], W.shape[1]))
    for start in range(0, X.shape[1], block_size):
        sl = slice(start, start + block_size)
        n_s = X[:, sl].shape[1]
        Y += n_s * np.outer(X[:, sl].mean(axis=1), W[sl].mean(axis=0))
    return Y


def _errors(Y, ref):
    diff = Y - ref
    denom = np.linalg.norm(ref)
    rel = float(np.linalg.norm(diff) / denom) if denom > 0 else float(np.linalg.norm(diff))
    return float(np.max(np.abs(diff))), rel


def matmul_report(X, W, cfg_x: QuantConfig, cfg_w: QuantConfig) -> MatmulReport:
    X, W = as_array(X), as_array(W)
    Xq, Wq = quantize_matrix(X, 1, cfg_x), quantize_matrix(W, 0, cfg_w)
    max_err, rel = _errors(integer_expand_matmul(Xq, Wq), X @ W)
    return MatmulReport(
        bits=cfg_w.bits,
        block_size=cfg_w.block_size,
        lam=cfg_w.lam,
        max_abs_err=max_err,
        rel_frobenius_err=rel,
        effective_bits_x=Xq.effective_bits(),
        effective_bits_w=Wq.effective_bits(),
    )


def matmul_sweep(
    X,
    W,
    bits_list: Iterable[int],
    block_sizes: Iterable[int],
    lambdas: Iterable[float],
    base: QuantConfig = QuantConfig(),
) -> list[MatmulReport]:
    """One report per (bits, block size, lambda), same settings on both operands."""
    reports = []
    for bits, block, lam in itertools.product(list(bits_list), list(block_sizes), list(lambdas)):
        cfg = base.replace(bits=bits, block_size=block, lam=lam)
        reports.append(matmul_report(X, W, cfg, cfg))
    return reports
