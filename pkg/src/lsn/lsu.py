"""Linear Span Unit: concat -> 1x1 convolution -> slice.

An LSU takes ``m`` feature tensors, stacks their channels, and emits ``n``
spanned maps, each a per-pixel linear combination of the input channels
plus a bias. It has no nonlinearity.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T


@dataclass
class LsuParams:
    """Reconstruction weights of one unit.

    ``weight`` has shape (n, C_total, 1, 1), one 1x1 kernel per spanned
    output; ``bias`` has shape (1, n, 1, 1).
    """

    weight: np.ndarray
    bias: np.ndarray
    input_sizes: tuple[int, ...]
    output_sizes: tuple[int, ...]

    def __post_init__(self):
        self.input_sizes = tuple(int(s) for s in self.input_sizes)
        self.output_sizes = tuple(int(s) for s in self.output_sizes)
        n, c = self.weight.shape[:2]
        if self.weight.shape[2:] != (1, 1):
            raise T.ShapeError(f"LSU weight must be (n, C, 1, 1), got {self.weight.shape}")
        if c != sum(self.input_sizes):
            raise T.ShapeError(f"LSU weight has {c} input channels but input sizes {self.input_sizes} sum to {sum(self.input_sizes)}")
        if n != sum(self.output_sizes) or self.bias.size != n:
            raise T.ShapeError(f"LSU with {n} outputs has output sizes {self.output_sizes} and {self.bias.size} biases")

    @property
    def n_outputs(self) -> int:
        return self.weight.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.weight.shape[1]

    @classmethod
    def init(cls, input_sizes: Sequence[int], output_sizes: Sequence[int] | int = 1,
             rng: np.random.Generator | None = None, identity: bool = False,
             average: bool = False) -> "LsuParams":
        """Zero bias; weights uniform in [-1/C, 1/C], the identity map, or the channel mean."""
        if isinstance(output_sizes, int):
            output_sizes = (1,) * output_sizes
        c, n = sum(input_sizes), sum(output_sizes)
        if identity:
            if c != n:
                raise ValueError("identity initialisation needs as many outputs as input channels")
            w = np.eye(n, dtype=np.float32)
        elif average:
            w = np.full((n, c), 1.0 / c, dtype=np.float32)
        else:
            rng = rng or np.random.default_rng(0)
            w = rng.uniform(-1.0 / c, 1.0 / c, size=(n, c)).astype(np.float32)
        return cls(w.reshape(n, c, 1, 1), np.zeros((1, n, 1, 1), np.float32), tuple(input_sizes), tuple(output_sizes))

    def named(self, uid: str) -> dict[str, np.ndarray]:
        return {f"lsu.{uid}.lambda": self.weight, f"lsu.{uid}.bias": self.bias}

    @classmethod
    def from_named(cls, params: dict[str, np.ndarray], uid: str, input_sizes, output_sizes) -> "LsuParams":
        return cls(params[f"lsu.{uid}.lambda"], params[f"lsu.{uid}.bias"], input_sizes, output_sizes)


def lsu_nodes(inputs: Sequence[T.Node], uid: str, output_sizes: Sequence[int] | None = None) -> list[T.Node]:
    """Apply the unit ``uid`` (parameters ``lsu.<uid>.*`` of the graph) to ``inputs``."""
    if not inputs:
        raise ValueError("an LSU needs at least one input")
    ref = inputs[0].shape
    for i, node in enumerate(inputs):
        if (node.shape[0], node.shape[2], node.shape[3]) != (ref[0], ref[2], ref[3]):
            raise T.ShapeError(f"LSU {uid}: input {i} has shape {node.shape}, expected batch/spatial {ref[0]}x{ref[2]}x{ref[3]}")
    g = inputs[0].graph
    stacked = T.concat(inputs)
    spanned = T.conv2d(stacked, g.param(f"lsu.{uid}.lambda"), g.param(f"lsu.{uid}.bias"))
    if output_sizes is None:
        output_sizes = (1,) * spanned.shape[1]
    return T.slice(spanned, output_sizes)


def lsu_forward(inputs: Sequence[np.ndarray], params: LsuParams) -> list[np.ndarray]:
    sizes = tuple(np.shape(x)[1] for x in inputs)
    if sizes != params.input_sizes:
        raise T.ShapeError(f"LSU inputs have channel counts {sizes}, parameters expect {params.input_sizes}")
    precision = "verification" if params.weight.dtype == np.float64 else "standard"
    g = T.Graph(params.named("u"), precision=precision)
    nodes = [g.input(x) for x in inputs]
    return [n.value for n in lsu_nodes(nodes, "u", params.output_sizes)]


def lsu_span_dim(params: LsuParams, tol: float = 1e-8) -> int:
    """Numerical rank of the (n, C_total) weight matrix, relative tolerance ``tol``."""
    sv = np.linalg.svd(params.weight.reshape(params.n_outputs, -1).astype(np.float64), compute_uv=False)
    if sv.size == 0 or sv[0] == 0.0:
        return 0
    return int((sv > tol * sv[0]).sum())
