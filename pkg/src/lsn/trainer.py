"""Deep-supervised SGD training, iterative span training, checkpoints."""
from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import container
from . import tensor as T
from .datakit import Sample
from .model import NetworkSpec, build_graph, init_params, param_groups, prepare_image

logger = logging.getLogger(__name__)

BASE_LR = 1e-6
# from-scratch training on small images; the base rate assumes a pretrained backbone
DEFAULT_LR_MULTIPLIER = 10.0


class Divergence(RuntimeError):
    """Loss became non-finite; ``checkpoint`` holds the last good state."""

    def __init__(self, message: str, checkpoint: "Checkpoint", trace: list):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.trace = trace


@dataclass
class TrainConfig:
    base_lr: float = BASE_LR
    lr_multiplier: float = DEFAULT_LR_MULTIPLIER
    momentum: float = 0.9
    weight_decay: float = 0.002
    batch_size: int = 1
    lr_decay_period: int = 10000
    loss_weights: dict[str, float] = field(default_factory=dict)
    max_iters: int = 5000
    seed: int = 0
    strategy: str = "end-to-end"     # or "iterative(n)"

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight decay must be >= 0, got {self.weight_decay}")
        if any(w < 0 for w in self.loss_weights.values()):
            raise ValueError("loss weights must be >= 0")
        if self.batch_size != 1:
            raise ValueError("only mini-batches of one image are supported")
        if self.max_iters < 0 or self.lr_decay_period < 1:
            raise ValueError("max_iters must be >= 0 and lr_decay_period >= 1")
        self.outer_iterations()  # validates the strategy string

    def outer_iterations(self) -> int:
        if self.strategy == "end-to-end":
            return 0
        s = self.strategy
        if s.startswith("iterative(") and s.endswith(")") and s[10:-1].isdigit() and int(s[10:-1]) >= 1:
            return int(s[10:-1])
        raise ValueError(f"strategy must be 'end-to-end' or 'iterative(n)' with n >= 1, got {s!r}")

    def fingerprint(self, spec: NetworkSpec | None = None) -> str:
        items = [f"{f.name}={getattr(self, f.name)!r}" for f in fields(self)]
        if spec is not None:
            items += [f"{k}={v}" for k, v in sorted(spec.to_config().items())]
        return hashlib.md5("\n".join(items).encode()).hexdigest()


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    iteration: int = 0
    fingerprint: str = "0" * 32

    def copy(self) -> "Checkpoint":
        return Checkpoint({k: v.copy() for k, v in self.params.items()},
                          {k: v.copy() for k, v in self.buffers.items()}, self.iteration, self.fingerprint)

    def save(self, path: Path | str) -> None:
        tensors = dict(self.params)
        tensors.update({f"momentum.{k}": v for k, v in self.buffers.items()})
        container.save(path, tensors, self.iteration, self.fingerprint)

    @classmethod
    def load(cls, path: Path | str) -> "Checkpoint":
        tensors, iteration, fp = container.load(path)
        params = {k: v for k, v in tensors.items() if not k.startswith("momentum.")}
        buffers = {k[len("momentum."):]: v for k, v in tensors.items() if k.startswith("momentum.")}
        return cls(params, buffers, iteration or 0, fp or "0" * 32)


# ---------------------------------------------------------------------------
# loss


def _class_weights(gt: np.ndarray) -> tuple[float, float]:
    n = gt.size
    pos = float(gt.sum())
    if pos == 0 or pos == n:
        return 1.0, 1.0
    return (n - pos) / n, pos / n


def balanced_bce(logits: np.ndarray, gt: np.ndarray, reduction: str = "mean") -> tuple[float, np.ndarray]:
    """Class-balanced sigmoid cross-entropy, averaged (or summed) over pixels.

    Positives are weighted by |Y-|/|Y| and negatives by |Y+|/|Y|; a mask
    with a single class falls back to unit weights. Returns the loss and
    its gradient with respect to ``logits``.
    """
    if reduction not in ("mean", "sum"):
        raise ValueError(f"reduction must be 'mean' or 'sum', got {reduction!r}")
    logits = np.asarray(logits)
    gt = np.asarray(gt, dtype=logits.dtype)
    if logits.shape != gt.shape:
        raise ValueError(f"logit shape {logits.shape} differs from mask shape {gt.shape}")
    w_pos, w_neg = _class_weights(gt)
    # softplus(-x) = -log sigmoid(x), softplus(x) = -log(1 - sigmoid(x))
    sp_pos = np.logaddexp(0, -logits)
    sp_neg = np.logaddexp(0, logits)
    norm = gt.size if reduction == "mean" else 1
    loss = (w_pos * gt * sp_pos + w_neg * (1 - gt) * sp_neg).sum() / norm
    e = np.exp(-np.abs(logits))
    sig = np.where(logits >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    grad = (w_pos * gt * (sig - 1) + w_neg * (1 - gt) * sig) / norm
    return float(loss), grad.astype(logits.dtype)


class BalancedBCE(T.Op):
    name = "balanced_bce"

    def forward(self, inputs, reduction="mean"):
        logits, gt = inputs
        loss, grad = balanced_bce(logits, gt, reduction)
        return np.full((1, 1, 1, 1), loss, dtype=logits.dtype), grad

    def backward(self, grad, inputs, out, ctx, reduction="mean"):
        return grad.reshape(()) * ctx, None


BCE = BalancedBCE()


def head_loss(logits: T.Node, gt: T.Node) -> T.Node:
    """Training loss of one supervision point: summed over pixels, so the gradient
    scale does not shrink with image size relative to weight decay."""
    return logits.graph.apply(BCE, [logits, gt], reduction="sum")


def weighted_loss(heads: dict[str, T.Node], gt: T.Node, weights: dict[str, float],
                  active: Sequence[str]) -> tuple[T.Node, dict[str, T.Node]]:
    per_head = {name: head_loss(heads[name], gt) for name in active}
    terms = [T.scale(node, weights.get(name, 1.0)) for name, node in per_head.items()]
    return T.add(terms), per_head


# ---------------------------------------------------------------------------
# optimisation


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    """Step schedule: one decade down every ``lr_decay_period`` iterations."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    return cfg.base_lr * cfg.lr_multiplier / 10 ** (iteration // cfg.lr_decay_period)


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], buffers: dict[str, np.ndarray],
             lr: float, momentum: float, weight_decay: float, names: Sequence[str] | None = None) -> None:
    """In place: ``buf = momentum*buf + grad + weight_decay*param; param -= lr*buf``."""
    names = list(params) if names is None else list(names)
    for name in names:
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise T.ShapeError(f"gradient shape {g.shape} vs parameter {name!r} shape {params[name].shape}")
    for name in names:
        p = params[name]
        buf = buffers.get(name)
        if buf is None:
            buf = buffers[name] = np.zeros_like(p)
        buf *= p.dtype.type(momentum)
        buf += grads[name].astype(p.dtype, copy=False)
        if weight_decay:
            buf += p.dtype.type(weight_decay) * p
        p -= p.dtype.type(lr) * buf


# ---------------------------------------------------------------------------
# training loop


def sample_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch])).permutation(n)


@dataclass
class Phase:
    name: str
    start: int
    stop: int
    trainable: tuple[str, ...]
    heads: tuple[str, ...]


def plan_phases(spec: NetworkSpec, cfg: TrainConfig, freeze: bool = True) -> list[Phase]:
    everything = tuple(init_params(spec, 0))
    n_outer = cfg.outer_iterations()
    if n_outer == 0:
        return [Phase("end-to-end", 0, cfg.max_iters, everything, spec.supervision)]
    groups = param_groups(spec)
    n_phases = 1 + n_outer
    bounds = [cfg.max_iters * i // n_phases for i in range(n_phases + 1)]
    phases = []
    for i in range(n_phases):
        if not freeze:
            trainable, heads = everything, spec.supervision
        elif i == 0:
            trainable = tuple(groups["backbone"] + groups["feature"] + groups["alignment"])
            heads = tuple(h for h in spec.supervision if not h.startswith("subspace"))
        else:
            # fine-tune from the snapshot with the alignment LSUs held fixed
            frozen = set(groups["alignment"])
            trainable, heads = tuple(n for n in everything if n not in frozen), spec.supervision
        phases.append(Phase("span-alignment" if i == 0 else f"subspace-{i}", bounds[i], bounds[i + 1], trainable, heads))
    return phases


def _trace_row(it: int, lr: float, total: float, per_head: dict[str, float], heads: Sequence[str]) -> list:
    return [it, lr, total] + [per_head.get(h, float("nan")) for h in heads]


def train(spec: NetworkSpec, dataset: Sequence[Sample], cfg: TrainConfig,
          checkpoint: Checkpoint | None = None, freeze: bool = True,
          on_iteration: Callable[[int, float, Checkpoint], None] | None = None) -> tuple[Checkpoint, list[list]]:
    """Run ``cfg.max_iters`` supervised steps (resuming from ``checkpoint`` if given).

    Returns the final checkpoint and the loss trace (one row per iteration:
    iteration, lr, total loss, then one loss per supervision point).
    ``on_iteration`` sees the live checkpoint after each step; copy it to keep it.
    """
    if not dataset:
        raise ValueError("training needs a non-empty dataset")
    fp = cfg.fingerprint(spec)
    if checkpoint is None:
        checkpoint = Checkpoint(init_params(spec, cfg.seed), {}, 0, fp)
    else:
        checkpoint = checkpoint.copy()
        checkpoint.fingerprint = fp
    params, buffers = checkpoint.params, checkpoint.buffers
    images = [prepare_image(s.image) for s in dataset]
    masks = [np.asarray(s.gt, np.float32)[None, None] for s in dataset]
    trace: list[list] = []
    phases = plan_phases(spec, cfg, freeze)
    n = len(dataset)
    order_epoch, order = -1, None
    last_good: Checkpoint | None = None
    for phase in phases:
        if checkpoint.iteration >= phase.stop:
            continue
        logger.info("phase %s: iterations %d..%d, %d trainable tensors, %d heads",
                    phase.name, max(phase.start, checkpoint.iteration), phase.stop, len(phase.trainable), len(phase.heads))
        for it in range(max(phase.start, checkpoint.iteration), phase.stop):
            epoch = it // n
            if epoch != order_epoch:
                order, order_epoch = sample_order(n, cfg.seed, epoch), epoch
            k = order[it % n]
            g = T.Graph(params)
            heads = build_graph(spec, g, g.input(images[k]))
            loss, per_head = weighted_loss(heads, g.constant(masks[k]), cfg.loss_weights, phase.heads)
            total = float(loss.value.sum())
            lr = lr_at(it, cfg)
            if not math.isfinite(total):
                raise Divergence(f"loss became {total} at iteration {it}", last_good or checkpoint.copy(), trace)
            grads = T.backward(g, loss)
            last_good = checkpoint.copy()
            try:
                sgd_step(params, grads, buffers, lr, cfg.momentum, cfg.weight_decay, phase.trainable)
            except FloatingPointError as exc:
                raise Divergence(f"iteration {it}: {exc}", last_good, trace) from exc
            checkpoint.iteration = it + 1
            trace.append(_trace_row(it, lr, total, {h: float(v.value.sum()) for h, v in per_head.items()}, spec.supervision))
            if on_iteration is not None:
                on_iteration(it, total, checkpoint)
    return checkpoint, trace


def train_iterative(spec: NetworkSpec, dataset: Sequence[Sample], cfg: TrainConfig, n_outer: int,
                    freeze: bool = True, checkpoint: Checkpoint | None = None) -> tuple[Checkpoint, list[list]]:
    """Alternate span/alignment tuning and subspace tuning, ``n_outer`` subspace rounds."""
    if n_outer < 1:
        raise ValueError("n_outer must be >= 1")
    cfg = TrainConfig(**{f.name: getattr(cfg, f.name) for f in fields(cfg)} | {"strategy": f"iterative({n_outer})"})
    return train(spec, dataset, cfg, checkpoint, freeze)


def trace_csv(trace: Sequence[Sequence], heads: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iter", "lr", "total_loss", *heads])
    for row in trace:
        w.writerow([row[0], repr(row[1]), *(repr(float(v)) for v in row[2:])])
    return buf.getvalue()
