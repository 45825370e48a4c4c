"""Desk-scale quantization-aware training with fake-quantized linear layers.

The quantizer is applied in the forward pass only. For backpropagation the
rounding residual ``delta`` is frozen, which turns each block into the
smooth map::

    r(x) = a(x) * (q(x) - mean(q(x))) + mean(x),   q(x) = f(x) + delta

where ``f`` is the min-max affine transform and ``a(x)`` the ridge scale.
The gradient differentiates through every block statistic (min, max,
means, Cov, Var); min and max route their gradient to the first argmin and
argmax.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .quantizer import QuantConfig, join_blocks, split_blocks
from .sparsifier import SparsityConfig, sparsify
from .tensor import partition

TASKS = ("synthetic-regression", "two-moons-classification")


# ---------------------------------------------------------------------------
# Fake quantization with a frozen-delta backward pass
# ---------------------------------------------------------------------------


@dataclass
class FakeQuantCache:
    pieces: list
    cfg: QuantConfig


def fake_quant_forward(rows: np.ndarray, cfg: QuantConfig, delta: Optional[np.ndarray] = None):
    """Blockwise quantize-reconstruct along the last axis of a 2-D array.

    Returns ``(r, cache)``; ``cache.pieces`` holds the per-block
    intermediates, and ``frozen_delta(cache)`` the residual to pass back in
    as ``delta`` when evaluating the surrogate elsewhere.
    """
    from .quantizer import quantize_blocks

    part = partition(rows.shape[1], cfg.block_size)
    deltas = split_blocks(delta, part) if delta is not None else [None] * len(split_blocks(rows, part))
    pieces = []
    for piece, d in zip(split_blocks(rows, part), deltas):
        out = quantize_blocks(piece, cfg, delta=d)
        out["x"] = piece
        pieces.append(out)
    return join_blocks([p["r"] for p in pieces]), FakeQuantCache(pieces, cfg)


def frozen_delta(cache: FakeQuantCache) -> np.ndarray:
    return join_blocks([p["delta"] for p in cache.pieces])


def codes(cache: FakeQuantCache) -> np.ndarray:
    return join_blocks([p["q"] for p in cache.pieces])


def _piece_backward(p: dict, g: np.ndarray, cfg: QuantConfig) -> np.ndarray:
    x, q, s = p["x"], p["q"], p["scaled"]
    n = x.shape[-1]
    total = g.sum(axis=-1, keepdims=True)
    grad_x = np.broadcast_to(total / n, x.shape).copy()

    live = ~p["degenerate"]
    denom = np.where(live, p["var_q"] + cfg.lam, 1.0)
    a = np.where(live, p["cov"] / denom, 0.0)
    qc = q - p["q_mean"]
    xc = x - p["x_mean"]
    g_a = np.sum(g * qc, axis=-1, keepdims=True)
    da_dcov = np.where(live, 1.0 / denom, 0.0)
    da_dvar = np.where(live, -p["cov"] / denom**2, 0.0)

    # Cov depends on x through the centered x
    grad_x += g_a * da_dcov * qc / n
    grad_qc = a * g + g_a * (da_dcov * xc / n + 2.0 * da_dvar * qc / n)
    grad_s = grad_qc - grad_qc.mean(axis=-1, keepdims=True)

    # s = (x - x_min) * c,  c = levels / (x_max - x_min + eps)
    width = p["x_max"] - p["x_min"] + cfg.epsilon
    c = cfg.levels / width
    grad_x += c * grad_s
    weighted = np.sum(grad_s * s, axis=-1, keepdims=True) / width
    grad_min = -c * grad_s.sum(axis=-1, keepdims=True) + weighted
    grad_max = -weighted
    lead = np.indices(x.shape[:-1])
    grad_x[(*lead, np.argmin(x, axis=-1))] += grad_min[..., 0]
    grad_x[(*lead, np.argmax(x, axis=-1))] += grad_max[..., 0]
    return grad_x


def fake_quant_backward(cache: FakeQuantCache, grad_r: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of ``fake_quant_forward`` with delta held fixed."""
    part_lengths = [p["x"].shape for p in cache.pieces]
    grads, start = [], 0
    for p, shape in zip(cache.pieces, part_lengths):
        width = shape[1] * shape[2]
        g = grad_r[:, start : start + width].reshape(shape)
        grads.append(_piece_backward(p, g, cache.cfg))
        start += width
    return join_blocks(grads)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


class QuantLinearLayer:
    """``y = fq(x) @ fq(W) + bias`` with weights blocked along the input axis."""

    def __init__(
        self,
        weight: np.ndarray,
        bias: np.ndarray,
        weight_cfg: Optional[QuantConfig] = None,
        act_cfg: Optional[QuantConfig] = None,
        sparsity: Optional[SparsityConfig] = None,
    ):
        weight = np.asarray(weight, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if weight.ndim != 2 or bias.shape != (weight.shape[1],):
            raise ValueError(f"inconsistent shapes: weight {weight.shape}, bias {bias.shape}")
        self.weight = weight
        self.bias = bias
        self.weight_cfg = weight_cfg
        self.act_cfg = act_cfg
        self.sparsity = sparsity
        self._cache = None
        self.grad_bias = None

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: np.random.Generator, **cfgs) -> "QuantLinearLayer":
        w = rng.standard_normal((n_in, n_out)) * math.sqrt(2.0 / n_in)
        return cls(w, np.zeros(n_out), **cfgs)

    def effective_weight(self) -> np.ndarray:
        wt = self.weight.T
        if self.sparsity is not None:
            wt = self._sparsify(wt)
        if self.weight_cfg is None:
            return wt.T
        r, _ = fake_quant_forward(wt, self.weight_cfg)
        return r.T

    def _sparsify(self, wt: np.ndarray) -> np.ndarray:
        block = self.weight_cfg.block_size if self.weight_cfg else wt.shape[1]
        part = partition(wt.shape[1], block)
        return join_blocks([sparsify(p, self.sparsity)[0] for p in split_blocks(wt, part)])

    def forward(self, x: np.ndarray, mode: str = "train", deltas=None) -> np.ndarray:
        """Quantization is identical in both modes; ``train`` keeps the backward cache.

        ``deltas`` optionally fixes the (activation, weight) residuals.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.weight.shape[0]:
            raise ValueError(f"input shape {x.shape} does not match weight {self.weight.shape}")
        d_x, d_w = deltas if deltas is not None else (None, None)
        x_cache = w_cache = None
        xr = x
        if self.act_cfg is not None:
            xr, x_cache = fake_quant_forward(x, self.act_cfg, d_x)
        wt = self.weight.T
        if self.sparsity is not None:
            wt = self._sparsify(wt)
        wr = wt
        if self.weight_cfg is not None:
            wr, w_cache = fake_quant_forward(wt, self.weight_cfg, d_w)
        wr = wr.T
        if mode == "train":
            self._cache = (xr, wr, x_cache, w_cache)
        return xr @ wr + self.bias

    def frozen_deltas(self):
        _, _, x_cache, w_cache = self._cache
        return (
            frozen_delta(x_cache) if x_cache is not None else None,
            frozen_delta(w_cache) if w_cache is not None else None,
        )

    def backward(self, grad_y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(grad_w, grad_x)``; the bias gradient lands in ``grad_bias``."""
        if self._cache is None:
            raise RuntimeError("backward called without a cached training forward pass")
        xr, wr, x_cache, w_cache = self._cache
        self.grad_bias = grad_y.sum(axis=0)
        grad_wr = xr.T @ grad_y
        grad_xr = grad_y @ wr.T
        grad_w = grad_wr if w_cache is None else fake_quant_backward(w_cache, grad_wr.T).T
        grad_x = grad_xr if x_cache is None else fake_quant_backward(x_cache, grad_xr)
        return grad_w, grad_x


class MLP:
    """Two quantized linear layers with a ReLU in between."""

    def __init__(self, widths: Sequence[int], rng: np.random.Generator,
                 weight_cfg=None, act_cfg=None, sparsity=None):
        if len(widths) != 3:
            raise ValueError("MLP expects widths (in, hidden, out)")
        cfgs = dict(weight_cfg=weight_cfg, act_cfg=act_cfg, sparsity=sparsity)
        self.l1 = QuantLinearLayer.init(widths[0], widths[1], rng, **cfgs)
        self.l2 = QuantLinearLayer.init(widths[1], widths[2], rng, **cfgs)
        self._h = None

    @property
    def layers(self):
        return (self.l1, self.l2)

    def forward(self, x, mode="train"):
        h = self.l1.forward(x, mode)
        self._h = h
        return self.l2.forward(np.maximum(h, 0.0), mode)

    def backward(self, grad_out):
        grad_w2, grad_a = self.l2.backward(grad_out)
        grad_h = grad_a * (self._h > 0)
        grad_w1, _ = self.l1.backward(grad_h)
        return [(grad_w1, self.l1.grad_bias), (grad_w2, self.l2.grad_bias)]


@dataclass
class OptimizerState:
    """SGD with momentum and optional decoupled weight decay."""

    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    buffers: list = field(default_factory=list)

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if not self.buffers:
            self.buffers = [np.zeros_like(p) for p in params]
        for p, g, buf in zip(params, grads, self.buffers):
            if buf.shape != p.shape:
                raise ValueError("optimizer buffer does not match parameter shape")
            buf *= self.momentum
            buf += g
            if self.weight_decay:
                p -= self.lr * self.weight_decay * p
            p -= self.lr * buf


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------


@dataclass
class TrainRunReport:
    label: str
    seed: int
    config: dict
    losses: list
    finite: bool
    initial_loss: float
    final_loss: float

    def to_dict(self) -> dict:
        """JSON-ready dict; non-finite floats become None."""
        d = asdict(self)
        d["losses"] = [_finite_or_none(v) for v in self.losses]
        d["initial_loss"] = _finite_or_none(self.initial_loss)
        d["final_loss"] = _finite_or_none(self.final_loss)
        return d


def _finite_or_none(v):
    return float(v) if math.isfinite(v) else None


def make_task(task: str, rng: np.random.Generator, n_samples: int = 256, n_features: int = 16):
    """Seeded synthetic data: ``(inputs, targets, loss_kind)``."""
    if task == "synthetic-regression":
        x = rng.standard_normal((n_samples, n_features))
        teacher = rng.standard_normal((n_features, 8)) / math.sqrt(n_features)
        readout = rng.standard_normal((8, 1))
        y = np.tanh(2.0 * x @ teacher) @ readout
        y = (y - y.mean()) / y.std()
        return x, y, "mse"
    if task == "two-moons-classification":
        t = rng.uniform(0.0, math.pi, n_samples)
        label = rng.integers(0, 2, n_samples)
        pts = np.stack([np.cos(t), np.sin(t)], axis=1)
        pts[label == 1] = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)[label == 1]
        pts += 0.1 * rng.standard_normal(pts.shape)
        # lift the 2-D points into n_features with a fixed random projection
        lift = rng.standard_normal((2, n_features))
        x = np.tanh(pts @ lift)
        return x, label[:, None].astype(np.float64), "bce"
    raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")


def _loss(out, y, kind):
    if kind == "mse":
        diff = out - y
        return float(np.mean(diff**2)), 2.0 * diff / diff.size
    # numerically stable binary cross-entropy on logits
    loss = np.mean(np.maximum(out, 0) - out * y + np.log1p(np.exp(-np.abs(out))))
    prob = 1.0 / (1.0 + np.exp(-out))
    return float(loss), (prob - y) / y.size


def train_run(
    task: str,
    weight_cfg: Optional[QuantConfig],
    act_cfg: Optional[QuantConfig],
    steps: int,
    seed: int,
    lr: float = 0.02,
    widths=(16, 32, 1),
    label: str = "",
    sparsity: Optional[SparsityConfig] = None,
) -> TrainRunReport:
    """Full-batch training; stops early and records ``finite=False`` on the first non-finite loss."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    data_rng = np.random.default_rng(seed)
    x, y, kind = make_task(task, data_rng, n_features=widths[0])
    model = MLP(widths, np.random.default_rng([seed, 1]), weight_cfg, act_cfg, sparsity)
    params = [model.l1.weight, model.l1.bias, model.l2.weight, model.l2.bias]
    opt = OptimizerState(lr=lr)
    losses = []
    finite = True
    with np.errstate(all="ignore"):
        for _ in range(steps):
            out = model.forward(x)
            loss, grad = _loss(out, y, kind)
            losses.append(loss)
            if not math.isfinite(loss):
                finite = False
                break
            (gw1, gb1), (gw2, gb2) = model.backward(grad)
            grads = [gw1, gb1, gw2, gb2]
            if not all(np.all(np.isfinite(g)) for g in grads):
                finite = False
                break
            opt.step(params, grads)
    config = dict(
        task=task,
        act_bits=act_cfg.bits if act_cfg else None,
        weight_bits=weight_cfg.bits if weight_cfg else None,
        lam=weight_cfg.lam if weight_cfg else None,
        block_size=weight_cfg.block_size if weight_cfg else None,
        steps=steps,
        lr=lr,
        widths=list(widths),
        sparsity=sparsity.label() if sparsity else None,
    )
    return TrainRunReport(
        label=label,
        seed=seed,
        config=config,
        losses=losses,
        finite=finite,
        initial_loss=losses[0],
        final_loss=losses[-1] if finite else float("nan"),
    )


def run_experiment(
    task: str = "synthetic-regression",
    precision: tuple[int, int] = (1, 1),
    lambda_values: Sequence[float] = (0.0, 0.01, 1.0),
    steps: int = 2000,
    seed: int = 0,
    block_size: int = 128,
    lr: float = 0.02,
    include_baseline: bool = True,
) -> list[TrainRunReport]:
    """One run per lambda at ``precision = (act_bits, weight_bits)``, plus a float baseline."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    act_bits, weight_bits = precision
    reports = []
    if include_baseline:
        reports.append(train_run(task, None, None, steps, seed, lr, label="float"))
    for lam in lambda_values:
        w_cfg = QuantConfig(bits=weight_bits, block_size=block_size, lam=lam)
        a_cfg = QuantConfig(bits=act_bits, block_size=block_size, lam=lam)
        reports.append(train_run(task, w_cfg, a_cfg, steps, seed, lr,
                                 label=f"A{act_bits}W{weight_bits} lambda={lam:g}"))
    return reports


def reports_to_json(reports: Sequence[TrainRunReport], path) -> None:
    with open(path, "w") as fh:
        json.dump([r.to_dict() for r in reports], fh, indent=2)


def losses_to_csv(reports: Sequence[TrainRunReport], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "seed", "step", "loss"])
        for r in reports:
            for step, loss in enumerate(r.losses):
                writer.writerow([r.label, r.seed, step, loss])
