"""Numerical checks of the linear-span view of side-output fusion.

Everything here runs in float64. A :class:`VectorStack` holds spanning
vectors as matrix columns; the ground truth ``y`` is a flattened {0, 1}
mask.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

RANK_TOL = 1e-8


@dataclass
class VectorStack:
    vectors: np.ndarray                          # (length, n_columns)
    labels: list[str] = field(default_factory=list)

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2:
            raise ValueError(f"a stack is a 2-D matrix of columns, got shape {v.shape}")
        self.vectors = v
        if not self.labels:
            self.labels = [str(i) for i in range(v.shape[1])]
        if len(self.labels) != v.shape[1]:
            raise ValueError(f"{len(self.labels)} labels for {v.shape[1]} columns")

    @property
    def length(self) -> int:
        return self.vectors.shape[0]

    @property
    def n_columns(self) -> int:
        return self.vectors.shape[1]

    @classmethod
    def empty(cls, length: int) -> "VectorStack":
        return cls(np.zeros((length, 0)), [])

    def append(self, other: "VectorStack") -> "VectorStack":
        if other.length != self.length:
            raise ValueError(f"column length {other.length} vs {self.length}")
        return VectorStack(np.hstack([self.vectors, other.vectors]), self.labels + other.labels)


def least_squares(stack: VectorStack, y: np.ndarray) -> tuple[np.ndarray, float]:
    """Minimum-norm least-squares weights and the residual norm ``||F lambda - y||``.

    Solved by SVD-based ``lstsq``; the residual is recomputed from the
    solution rather than taken from the solver.
    """
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.size != stack.length:
        raise ValueError(f"target length {y.size} vs column length {stack.length}")
    if stack.n_columns == 0:
        return np.zeros(0), float(np.linalg.norm(y))
    lam = np.linalg.lstsq(stack.vectors, y, rcond=None)[0]
    return lam, float(np.linalg.norm(stack.vectors @ lam - y))


def numerical_rank(stack: VectorStack | np.ndarray, tol: float = RANK_TOL) -> int:
    """Singular values above ``tol`` times the largest one."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    m = stack.vectors if isinstance(stack, VectorStack) else np.asarray(stack, dtype=np.float64)
    if m.size == 0:
        return 0
    sv = np.linalg.svd(m, compute_uv=False)
    if sv[0] == 0.0:
        return 0
    return int((sv > tol * sv[0]).sum())


def orthonormal_basis(stack: VectorStack | np.ndarray, tol: float = RANK_TOL) -> np.ndarray:
    m = stack.vectors if isinstance(stack, VectorStack) else np.asarray(stack, dtype=np.float64)
    if m.size == 0:
        return np.zeros((m.shape[0], 0))
    u, sv, _ = np.linalg.svd(m, full_matrices=False)
    if sv[0] == 0.0:
        return np.zeros((m.shape[0], 0))
    return u[:, sv > tol * sv[0]]


@dataclass
class DimSum:
    dim_u: int
    dim_v: int
    dim_intersection: int    # dim U + dim V - dim (U + V)
    dim_sum: int
    paired_intersection: int  # from the nullspace of [Qu, -Qv]
    holds: bool


def dim_sum_check(u: VectorStack, v: VectorStack, tol: float = RANK_TOL) -> DimSum:
    """Checks dim(U+V) = dim U + dim V - dim(U n V).

    The intersection is also measured directly: null vectors ``(a, b)`` of
    ``[Qu, -Qv]`` pair up ``Qu a = Qv b``, and the rank of those images is
    the intersection dimension.
    """
    if u.length != v.length:
        raise ValueError(f"vector lengths differ: {u.length} vs {v.length}")
    du, dv = numerical_rank(u, tol), numerical_rank(v, tol)
    ds = numerical_rank(u.append(v), tol)
    qu, qv = orthonormal_basis(u, tol), orthonormal_basis(v, tol)
    paired = 0
    if qu.shape[1] and qv.shape[1]:
        pair = np.hstack([qu, -qv])
        _, sv, vt = np.linalg.svd(pair)
        # columns are orthonormal within each block, so singular values lie in [0, sqrt 2]
        null = vt[np.r_[sv, np.zeros(vt.shape[0] - sv.size)] <= np.sqrt(tol) * np.sqrt(2.0)]
        if null.size:
            images = qu @ null[:, : qu.shape[1]].T
            paired = numerical_rank(images, tol) if images.size else 0
    dw = du + dv - ds
    return DimSum(du, dv, dw, ds, paired, dw == paired)


@dataclass
class ResidualProfile:
    labels: list[str]
    per_stage: list[float]
    cumulative: list[float]
    cumulative_rank: list[int]
    stage_rank: list[int]


def residual_profile(stacks: Sequence[VectorStack], y: np.ndarray, labels: Sequence[str] | None = None,
                     tol: float = RANK_TOL) -> ResidualProfile:
    """Residual of ``y`` against each stack alone and against each running union."""
    if not stacks:
        raise ValueError("need at least one stack")
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    labels = list(labels) if labels is not None else [str(i) for i in range(len(stacks))]
    per, cum, cum_rank, st_rank = [], [], [], []
    union = VectorStack.empty(stacks[0].length)
    for s in stacks:
        per.append(least_squares(s, y)[1])
        st_rank.append(numerical_rank(s, tol))
        union = union.append(s)
        cum.append(least_squares(union, y)[1])
        cum_rank.append(numerical_rank(union, tol))
    return ResidualProfile(labels, per, cum, cum_rank, st_rank)


def is_consistent(stack: VectorStack, y: np.ndarray, tol: float = RANK_TOL) -> bool:
    """Rank test: ``F lambda = y`` is solvable iff rank([F y]) == rank(F)."""
    aug = stack.append(VectorStack(np.asarray(y, dtype=np.float64).reshape(-1, 1), ["y"]))
    return numerical_rank(aug, tol) == numerical_rank(stack, tol)


def stage_of(head: str) -> int:
    """Pyramid level a supervision point belongs to.

    Feature heads belong to their stage, alignment heads to the level they
    land on, subspace heads to their anchor stage.
    """
    if head.startswith("feature"):
        return int(head[len("feature"):])
    if head.startswith("align"):
        return int(head[len("align"):].split(".")[0])
    if head.startswith("subspace"):
        return int(head[len("subspace"):])
    raise ValueError(f"not a supervision point: {head!r}")


def stacks_from_heads(heads: Mapping[str, np.ndarray], order: Sequence[int] = (5, 4, 3, 2, 1)
                      ) -> tuple[list[VectorStack], list[str]]:
    """Group flattened head maps by level, deepest first (the order they are spanned in)."""
    by_level: dict[int, list[tuple[str, np.ndarray]]] = {}
    for name, m in heads.items():
        if name == "final":
            continue
        by_level.setdefault(stage_of(name), []).append((name, np.asarray(m, np.float64).reshape(-1)))
    stacks, labels = [], []
    for level in order:
        cols = by_level.get(level, [])
        if not cols:
            continue
        stacks.append(VectorStack(np.stack([c for _, c in cols], axis=1), [n for n, _ in cols]))
        labels.append(str(level))
    return stacks, labels


def extract_features(spec, params, image: np.ndarray) -> tuple[list[VectorStack], list[str]]:
    """Run the network and stack every supervision point's pre-sigmoid map by level."""
    from .model import forward

    out = forward(spec, params, image, precision="verification")
    h, w = image.shape[-2:]
    for name, m in out.heads.items():
        if m.shape[-2:] != (h, w):
            raise RuntimeError(f"head {name} has resolution {m.shape[-2:]} after alignment, expected {(h, w)}")
    return stacks_from_heads(out.heads)
