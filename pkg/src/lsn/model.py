"""LSN_k network wiring: backbone, feature span, resolution alignment, subspace span.

Levels are numbered 1..5 from the shallowest (input resolution) to the
deepest stage; level ``l`` has resolution ``input / 2**(l-1)``.

* Feature span: one LSU per stage reads the stage's last feature tensor and
  emits a single map ``s<l>``.
* Subspace span: for every anchor stage ``c`` (deep to shallow) the window
  ``[c - (k-1)//2, c + k//2]``, truncated to the pyramid, names the stages
  whose feature-span maps are fused; windows with fewer than two stages are
  dropped. A group is fused at its shallowest level, and it also receives
  the output of the previous (deeper) group, so the last group spans the
  sum of every subspace.
* Resolution alignment: bridge ``b`` lifts every map that must travel from
  level ``b+1`` to a level ``<= b``: learned 2x upsampling followed by an
  LSU mixing the carried maps, then a slice back into one map per carried
  input. Each bridge output is supervised.

All supervision points are read out at input resolution through fixed
bilinear upsampling.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import tensor as T
from .lsu import LsuParams, lsu_nodes

BASE_WIDTHS = (16, 32, 64, 128, 128)
N_STAGES = 5
ALIGNMENT_MODES = ("supervised", "unsupervised", "plain")


@dataclass(frozen=True)
class StageSpec:
    convs: int
    width: int
    pooled: bool


@dataclass(frozen=True)
class Bridge:
    level: int                  # destination level; source is level + 1
    carried: tuple[str, ...]    # map names lifted across this bridge


@dataclass(frozen=True)
class SubspaceGroup:
    anchor: int
    window: tuple[int, ...]
    level: int
    inputs: tuple[str, ...]     # feature maps in the window, then the previous group output


@dataclass(frozen=True)
class NetworkSpec:
    variant: int
    width_multiplier: float
    stages: tuple[StageSpec, ...]
    groups: tuple[SubspaceGroup, ...]
    bridges: tuple[Bridge, ...]
    alignment: str = "supervised"
    upsample_mode: str = "learned-transposed"
    supervision: tuple[str, ...] = field(default=())

    @property
    def span_window(self) -> int:
        return self.variant

    @property
    def final(self) -> str:
        return f"subspace{self.groups[-1].anchor}" if self.groups else "final"

    def to_config(self) -> dict[str, str]:
        return {
            "variant": f"lsn{self.variant}",
            "width_multiplier": repr(float(self.width_multiplier)),
            "stages": ",".join(str(s.width) for s in self.stages),
        }

    def map_level(self, name: str) -> int:
        if name.startswith("s"):
            return int(name[1:])
        return next(g.level for g in self.groups if f"o{g.anchor}" == name)


def span_windows(k: int, n_stages: int = N_STAGES) -> list[tuple[int, tuple[int, ...]]]:
    """(anchor, window) pairs, deepest anchor first."""
    out, seen = [], set()
    for c in range(n_stages, 0, -1):
        lo, hi = max(1, c - (k - 1) // 2), min(n_stages, c + k // 2)
        window = tuple(range(lo, hi + 1))
        if len(window) >= 2 and window not in seen:
            seen.add(window)
            out.append((c, window))
    return out


def build_variant(k: int, width_multiplier: float = 1.0, alignment: str = "supervised",
                  upsample_mode: str = "learned-transposed", widths: tuple[int, ...] | None = None) -> NetworkSpec:
    """Wiring of LSN_k; ``k`` is the number of subspaces fused per group."""
    if k not in (1, 2, 3, 4):
        raise ValueError(f"variant k must be in 1..4, got {k}")
    if alignment not in ALIGNMENT_MODES:
        raise ValueError(f"alignment must be one of {ALIGNMENT_MODES}, got {alignment!r}")
    if widths is None:
        widths = tuple(max(1, int(round(w * width_multiplier))) for w in BASE_WIDTHS)
    if len(widths) != N_STAGES:
        raise ValueError(f"the backbone has {N_STAGES} stages, got widths {widths}")
    stages = tuple(StageSpec(2, int(w), i > 0) for i, w in enumerate(widths))

    groups, prev = [], None
    for anchor, window in span_windows(k):
        inputs = tuple(f"s{j}" for j in window) + ((prev,) if prev else ())
        groups.append(SubspaceGroup(anchor, window, min(window), inputs))
        prev = f"o{anchor}"

    level = {f"s{i}": i for i in range(1, N_STAGES + 1)}
    level.update({f"o{g.anchor}": g.level for g in groups})
    lowest_need: dict[str, int] = {}
    for g in groups:
        for m in g.inputs:
            lowest_need[m] = min(lowest_need.get(m, g.level), g.level)
    bridges = []
    if alignment != "plain":
        for b in range(N_STAGES - 1, 0, -1):
            carried = tuple(m for m in lowest_need if lowest_need[m] <= b < level[m])
            if carried:
                bridges.append(Bridge(b, carried))

    heads = [f"feature{i}" for i in range(1, N_STAGES + 1)]
    if alignment == "supervised":
        heads += [f"align{br.level}.{m}" for br in bridges for m in br.carried]
    heads += [f"subspace{g.anchor}" for g in groups]
    return NetworkSpec(k, float(width_multiplier), stages, tuple(groups), tuple(bridges),
                       alignment, upsample_mode, tuple(heads))


def spec_from_config(cfg: Mapping[str, str]) -> NetworkSpec:
    variant = str(cfg.get("variant", "lsn3")).lower()
    if not variant.startswith("lsn") or not variant[3:].isdigit():
        raise ValueError(f"variant must look like lsn1..lsn4, got {variant!r}")
    wm = float(cfg.get("width_multiplier", 1.0))
    widths = None
    if cfg.get("stages"):
        widths = tuple(int(w) for w in str(cfg["stages"]).split(","))
    return build_variant(int(variant[3:]), wm, widths=widths)


def init_params(spec: NetworkSpec, seed: int = 0) -> dict[str, np.ndarray]:
    """He-normal backbone, small uniform feature LSUs, averaging subspace LSUs,
    identity alignment LSUs, bilinear upsampling kernels. All float32."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    c_in = 1
    for i, st in enumerate(spec.stages, start=1):
        for j in range(1, st.convs + 1):
            std = np.sqrt(2.0 / (c_in * 9))
            params[f"backbone.s{i}.conv{j}.weight"] = (rng.standard_normal((st.width, c_in, 3, 3)) * std).astype(np.float32)
            params[f"backbone.s{i}.conv{j}.bias"] = np.zeros((1, st.width, 1, 1), np.float32)
            c_in = st.width
        params.update(LsuParams.init((st.width,), 1, rng).named(f"feature{i}"))
    for br in spec.bridges:
        c = len(br.carried)
        params[f"up.align{br.level}.kernel"] = T.bilinear_kernel(2, c)
        params.update(LsuParams.init((1,) * c, c, identity=True).named(f"align{br.level}"))
    for g in spec.groups:
        params.update(LsuParams.init((1,) * len(g.inputs), 1, average=True).named(f"subspace{g.anchor}"))
    return params


def param_groups(spec: NetworkSpec) -> dict[str, list[str]]:
    """Parameter names by role: backbone, feature, alignment, subspace."""
    names = init_params(spec, 0).keys()
    out = {"backbone": [], "feature": [], "alignment": [], "subspace": []}
    for n in names:
        if n.startswith("backbone."):
            out["backbone"].append(n)
        elif n.startswith("lsu.feature"):
            out["feature"].append(n)
        elif n.startswith("lsu.subspace"):
            out["subspace"].append(n)
        else:
            out["alignment"].append(n)
    return out


def count_params(spec: NetworkSpec) -> int:
    return sum(v.size for v in init_params(spec, 0).values())


def prepare_image(raster: np.ndarray, precision: str = "standard") -> np.ndarray:
    """8-bit grayscale (H, W) raster -> centred 1x1xHxW tensor."""
    x = np.asarray(raster, dtype=np.float64) / 255.0 - 0.5
    return T.as_tensor(x[None, None], precision)


def check_input_size(spec: NetworkSpec, shape) -> None:
    div = 2 ** (len(spec.stages) - 1)
    h, w = shape[-2], shape[-1]
    if h % div or w % div:
        raise T.ShapeError(f"input size {h}x{w} must be divisible by {div}")


def _readout(node: T.Node, level: int) -> T.Node:
    return node if level == 1 else T.upsample(node, 2 ** (level - 1), mode="fixed-bilinear")


def build_graph(spec: NetworkSpec, graph: T.Graph, image: T.Node,
                keep: str = "heads") -> dict[str, T.Node]:
    """Add the network to ``graph``; returns head logits at input resolution keyed by
    supervision-point name, plus ``final``.

    ``keep="levels"`` instead returns every named map at its native level
    (``s3``, ``o4``, ``s5@3`` ...), which is what the reference tests compose.
    """
    check_input_size(spec, image.shape)
    g = graph
    feats = {}
    x = image
    for i, st in enumerate(spec.stages, start=1):
        if st.pooled:
            x = T.maxpool2(x)
        for j in range(1, st.convs + 1):
            x = T.relu(T.conv2d(x, g.param(f"backbone.s{i}.conv{j}.weight"), g.param(f"backbone.s{i}.conv{j}.bias"), pad=1))
        feats[i] = lsu_nodes([x], f"feature{i}")[0]

    maps: dict[str, T.Node] = {f"s{i}": feats[i] for i in feats}
    heads: dict[str, T.Node] = {f"feature{i}": _readout(feats[i], i) for i in feats}
    bridges = {br.level: br for br in spec.bridges}

    def at(name: str, level: int) -> T.Node:
        src = spec.map_level(name)
        if src == level:
            return maps[name]
        if spec.alignment == "plain":
            return T.upsample(maps[name], 2 ** (src - level), mode="fixed-bilinear")
        return maps[f"{name}@{level}"]

    for level in range(len(spec.stages), 0, -1):
        br = bridges.get(level)
        if br is not None:
            lifted = T.concat([at(m, level + 1) for m in br.carried])
            if spec.upsample_mode == "fixed-bilinear":
                up = T.upsample(lifted, 2, mode="fixed-bilinear")
            else:
                up = T.upsample(lifted, 2, kernel=g.param(f"up.align{level}.kernel"))
            outs = lsu_nodes([up], f"align{level}")
            for m, node in zip(br.carried, outs):
                maps[f"{m}@{level}"] = node
                if spec.alignment == "supervised":
                    heads[f"align{level}.{m}"] = _readout(node, level)
        for grp in spec.groups:
            if grp.level != level:
                continue
            out = lsu_nodes([at(m, level) for m in grp.inputs], f"subspace{grp.anchor}")[0]
            maps[f"o{grp.anchor}"] = out
            heads[f"subspace{grp.anchor}"] = _readout(out, level)

    if keep == "levels":
        return maps
    if spec.groups:
        heads["final"] = heads[spec.final]
    else:
        # feature span only: average the side outputs
        heads["final"] = T.scale(T.add([heads[f"feature{i}"] for i in feats]), 1.0 / len(feats))
    return heads


@dataclass
class SideOutputs:
    heads: dict[str, np.ndarray]
    final: str = "final"

    @property
    def final_map(self) -> np.ndarray:
        return self.heads[self.final]


def forward(spec: NetworkSpec, params: Mapping[str, np.ndarray], image: np.ndarray,
            precision: str = "standard") -> SideOutputs:
    g = T.Graph(dict(params), precision=precision)
    nodes = build_graph(spec, g, g.input(image))
    return SideOutputs({k: v.value for k, v in nodes.items()})


def infer(spec: NetworkSpec, params: Mapping[str, np.ndarray], image: np.ndarray,
          threshold: float = 0.5) -> np.ndarray:
    """Binary mask: sigmoid(final) strictly above ``threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    prob = probability(spec, params, image)
    return prob > threshold


def probability(spec: NetworkSpec, params: Mapping[str, np.ndarray], image: np.ndarray) -> np.ndarray:
    logits = forward(spec, params, image).final_map
    g = T.Graph(precision="verification")
    return T.sigmoid(g.input(logits.astype(np.float64))).value[0, 0]
