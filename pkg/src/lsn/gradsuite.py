"""Finite-difference gradient suite: every primitive op plus a miniature LSN_3."""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .model import build_variant, build_graph, init_params
from .trainer import BCE, weighted_loss

TOLERANCE = 1e-4
EPSILON = 1e-6


def _probe(node: T.Node, rng: np.random.Generator) -> T.Node:
    """Scalar loss with non-uniform upstream gradients: random 1x1 mix, balanced BCE vs a random mask."""
    g = node.graph
    c = node.shape[1]
    g.params["probe.w"] = rng.standard_normal((1, c, 1, 1))
    mixed = T.conv2d(node, g.param("probe.w"))
    mask = (rng.random(mixed.shape) < 0.3).astype(np.float64)
    return g.apply(BCE, [mixed, g.constant(mask)])


def _case(build: Callable[[T.Graph, np.random.Generator], T.Node], seed: int) -> float:
    rng = np.random.default_rng(seed)
    g = T.Graph(precision="verification")
    out = build(g, rng)
    loss = _probe(out, rng)
    errs = T.grad_check(g, loss, epsilon=EPSILON, names=[n for n in g.params if n != "probe.w"])
    return max(errs.values(), default=0.0)


def _p(g: T.Graph, name: str, value: np.ndarray) -> T.Node:
    g.params[name] = np.asarray(value, dtype=np.float64)
    return g.param(name)


def _op_cases() -> dict[str, Callable[[T.Graph, np.random.Generator], T.Node]]:
    def x(g, rng, shape=(1, 2, 8, 8), name="x"):
        return _p(g, name, rng.standard_normal(shape))

    return {
        "conv2d": lambda g, r: T.conv2d(x(g, r), _p(g, "w", r.standard_normal((3, 2, 3, 3))),
                                        _p(g, "b", r.standard_normal((1, 3, 1, 1))), pad=1),
        "conv2d(stride 2)": lambda g, r: T.conv2d(x(g, r), _p(g, "w", r.standard_normal((2, 2, 3, 3))), stride=2),
        "relu": lambda g, r: T.relu(x(g, r)),
        "sigmoid": lambda g, r: T.sigmoid(T.scale(x(g, r), 3.0)),
        "maxpool2": lambda g, r: T.maxpool2(x(g, r)),
        "concat": lambda g, r: T.concat([x(g, r), x(g, r, (1, 3, 8, 8), "y")]),
        "slice": lambda g, r: T.slice(x(g, r, (1, 5, 8, 8)), (2, 3))[1],
        "upsample(fixed)": lambda g, r: T.upsample(x(g, r, (1, 2, 4, 4)), 4, mode="fixed-bilinear"),
        "upsample(learned)": lambda g, r: T.upsample(
            x(g, r, (1, 2, 4, 4)), 2, kernel=_p(g, "k", T.bilinear_kernel(2, 2, np.float64) + 0.1 * r.standard_normal((2, 1, 4, 4)))),
        "add": lambda g, r: T.add([x(g, r), x(g, r, name="y"), x(g, r, name="z")]),
        "scale": lambda g, r: T.scale(x(g, r), -1.7),
        "balanced_bce": lambda g, r: x(g, r, (1, 1, 8, 8)),
    }


def _mini_lsn3(seed: int) -> float:
    rng = np.random.default_rng(seed)
    spec = build_variant(3, widths=(2, 3, 3, 4, 4))
    params = {k: v.astype(np.float64) for k, v in init_params(spec, seed).items()}
    # move every LSU and kernel off its structured initial value
    for k, v in params.items():
        params[k] = v + 0.1 * rng.standard_normal(v.shape)
    g = T.Graph(params, precision="verification")
    image = g.input(rng.uniform(-0.5, 0.5, (1, 1, 32, 32)))
    heads = build_graph(spec, g, image)
    gt = g.constant((rng.random((1, 1, 32, 32)) < 0.1).astype(np.float64))
    loss, _ = weighted_loss(heads, gt, {}, spec.supervision)
    total = T.total(loss) if loss.shape != (1, 1, 1, 1) else loss
    errs = T.grad_check(g, total, epsilon=EPSILON, max_entries=12, seed=seed)
    return max(errs.values())


def run_suite(seed: int = 0) -> dict[str, float]:
    """Worst relative error per op, and for the whole miniature network."""
    report = {name: _case(build, seed) for name, build in _op_cases().items()}
    report["mini LSN_3"] = _mini_lsn3(seed)
    return report


@contextlib.contextmanager
def corrupted_backward(op: type[T.Op], factor: float = 1.01) -> Iterator[None]:
    """Test hook: scale the gradients returned by ``op.backward``."""
    original = op.backward

    def bad(self, *args, **kwargs):
        return tuple(None if gi is None else gi * factor for gi in original(self, *args, **kwargs))

    op.backward = bad
    try:
        yield
    finally:
        op.backward = original
