"""Query-point proposal mechanisms.

Three kinds are supported: ``gaussian`` (fixed standard-normal draws, no
trainable state), ``mlp`` (a pointwise network), and ``gnn`` (message
passing over a kNN graph of the points, so each point sees where its
neighbours sit on the discrepancy surface).

The trained kinds never add raw residuals to the points. They emit a
per-coordinate fraction delta in (-1, 1) and apply

    t' = t * (1 + alpha * delta)

so a coordinate changes by at most ``alpha`` of its own magnitude, keeps its
sign, and an exact zero stays exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeError, Tensor, concat, matmul, tanh
from .cf import STABILIZER, ComplexGrid, QueryPoints

__all__ = [
    "KINDS",
    "AugmentedPoints",
    "Graph",
    "SamplerParams",
    "apply_sampler",
    "augment_with_loss",
    "augment_with_signal",
    "build_knn_graph",
    "gnn_forward",
    "init_sampler",
    "mlp_forward",
    "propose",
    "sample_base_points",
]

KINDS = ("gaussian", "mlp", "gnn")


@dataclass
class Graph:
    """Directed kNN adjacency: row i lists i's neighbours, nearest first."""

    num_nodes: int
    k: int
    edges: np.ndarray
    directed: bool = True


@dataclass(frozen=True)
class AugmentedPoints:
    """Query points with a trailing nonnegative signal column.

    The signal (the per-point discrepancy, or a proxy for it) is treated as
    an observation: the features carry no gradient history, so sampler
    training never differentiates through the signal's origin.
    """

    features: Tensor

    def __post_init__(self):
        feats = self.features.data
        if feats.ndim != 2 or feats.shape[1] < 2:
            raise ShapeError(f"AugmentedPoints need shape (b, m+1), got {feats.shape}")
        if (feats[:, -1] < 0.0).any():
            raise ShapeError("AugmentedPoints signal column must be nonnegative")


@dataclass
class SamplerParams:
    """Trainable state of one proposal mechanism (empty for gaussian)."""

    kind: str
    alpha: float = 0.5
    k: int = 8
    layers: int = 2
    hidden: int = 64
    weights: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown sampler kind: {self.kind!r}")
        if self.kind == "gaussian" and self.weights:
            raise ValueError("gaussian sampler has no trainable parameters")


def init_sampler(kind, dim, seed, *, alpha=0.5, k=8, layers=2, hidden=64) -> SamplerParams:
    """Build sampler parameters for ``dim``-dimensional query points."""
    params = SamplerParams(kind=kind, alpha=alpha, k=k, layers=layers, hidden=hidden)
    if kind == "gaussian":
        return params
    rng = np.random.default_rng(seed)
    weights: dict[str, Tensor] = {}
    fan_in = dim + 1
    for i in range(layers):
        width_in = 2 * fan_in if kind == "gnn" else fan_in
        scale = 1.0 / np.sqrt(width_in)
        weights[f"w{i}"] = Tensor(rng.uniform(-scale, scale, (width_in, hidden)), requires_grad=True)
        weights[f"b{i}"] = Tensor(np.zeros(hidden), requires_grad=True)
        fan_in = hidden
    scale = 1.0 / np.sqrt(hidden)
    weights["wh"] = Tensor(rng.uniform(-scale, scale, (hidden, dim)), requires_grad=True)
    weights["bh"] = Tensor(np.zeros(dim), requires_grad=True)
    params.weights = weights
    return params


def sample_base_points(b_t: int, dim: int, seed) -> QueryPoints:
    """``b_t`` i.i.d. standard Gaussian points in R^dim, deterministic per seed."""
    if b_t < 2 or dim < 1:
        raise ShapeError(f"sample_base_points: need b_t >= 2 and dim >= 1, got {b_t}, {dim}")
    rng = np.random.default_rng(seed)
    return QueryPoints(Tensor(rng.standard_normal((b_t, dim))))


def build_knn_graph(points: QueryPoints, k: int) -> Graph:
    """Directed kNN graph under Euclidean distance.

    Neighbour lists are sorted by ascending distance with ties broken by
    ascending node index, so construction is fully deterministic. ``k`` is
    clamped to ``b_t - 1``.
    """
    if points.batch < 2:
        raise ShapeError("build_knn_graph: need at least two points")
    if k < 1:
        raise ShapeError(f"build_knn_graph: k must be >= 1, got {k}")
    pts = points.points.data
    n = pts.shape[0]
    k_eff = min(k, n - 1)
    sq = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
    edges = np.empty((n, k_eff), dtype=np.intp)
    index = np.arange(n)
    for i in range(n):
        order = np.lexsort((index, sq[i]))
        edges[i] = order[order != i][:k_eff]
    return Graph(num_nodes=n, k=k_eff, edges=edges)


def augment_with_loss(points: QueryPoints, ecf_x: ComplexGrid, ecf_y: ComplexGrid) -> AugmentedPoints:
    """Append each point's ECF discrepancy as a final feature column."""
    if len(ecf_x) != len(ecf_y) or len(ecf_x) != points.batch:
        raise ShapeError(
            f"augment_with_loss: got {points.batch} points, grids of {len(ecf_x)} and {len(ecf_y)}"
        )
    dre = ecf_x.re.data - ecf_y.re.data
    dim = ecf_x.im.data - ecf_y.im.data
    discrepancy = np.sqrt(dre * dre + dim * dim + STABILIZER)
    return augment_with_signal(points, discrepancy)


def augment_with_signal(points: QueryPoints, values: np.ndarray) -> AugmentedPoints:
    """Append an arbitrary nonnegative per-point signal (e.g. a density proxy)."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (points.batch,):
        raise ShapeError(f"augment_with_signal: signal shape {values.shape} != ({points.batch},)")
    features = np.concatenate([points.points.data, values[:, None]], axis=1)
    return AugmentedPoints(Tensor(features))


def _fraction_update(points: QueryPoints, delta: Tensor, alpha: float) -> QueryPoints:
    return QueryPoints(points.points * (delta * alpha + 1.0))


def gnn_forward(points: QueryPoints, graph: Graph, aug: AugmentedPoints, params: SamplerParams) -> QueryPoints:
    """Message-passing update of the query points.

    Each layer maps a node to tanh(W [self || mean of neighbours] + b); a
    linear head squashed through tanh yields the per-coordinate fraction.
    """
    if params.kind != "gnn":
        raise ValueError(f"gnn_forward: params are of kind {params.kind!r}")
    if graph.num_nodes != points.batch:
        raise ShapeError(f"gnn_forward: graph has {graph.num_nodes} nodes for {points.batch} points")
    if aug.features.shape != (points.batch, points.dim + 1):
        raise ShapeError(
            f"gnn_forward: features {aug.features.shape} do not match points ({points.batch}, {points.dim + 1})"
        )
    n = graph.num_nodes
    agg = np.zeros((n, n))
    agg[np.arange(n)[:, None], graph.edges] = 1.0 / graph.edges.shape[1]
    neighbour_mean = Tensor(agg)

    h = aug.features
    for i in range(params.layers):
        messages = matmul(neighbour_mean, h)
        h = tanh(matmul(concat((h, messages)), params.weights[f"w{i}"]) + params.weights[f"b{i}"])
    delta = tanh(matmul(h, params.weights["wh"]) + params.weights["bh"])
    return _fraction_update(points, delta, params.alpha)


def mlp_forward(aug: AugmentedPoints, params: SamplerParams) -> QueryPoints:
    """Pointwise update: same fraction rule, no neighbour information."""
    if params.kind != "mlp":
        raise ValueError(f"mlp_forward: params are of kind {params.kind!r}")
    feats = aug.features
    dim = feats.shape[1] - 1
    h = feats
    for i in range(params.layers):
        h = tanh(matmul(h, params.weights[f"w{i}"]) + params.weights[f"b{i}"])
    delta = tanh(matmul(h, params.weights["wh"]) + params.weights["bh"])
    points = QueryPoints(Tensor(feats.data[:, :dim].copy()))
    return _fraction_update(points, delta, params.alpha)


def apply_sampler(points: QueryPoints, aug: AugmentedPoints | None, params: SamplerParams,
                  graph: Graph | None = None) -> QueryPoints:
    """Forward one sampler on prebuilt inputs; gaussian returns the points."""
    if params.kind == "gaussian":
        return points
    if aug is None:
        raise ShapeError(f"apply_sampler: {params.kind} sampler needs augmented features")
    if params.kind == "mlp":
        return mlp_forward(aug, params)
    if params.kind == "gnn":
        if graph is None:
            graph = build_knn_graph(points, params.k)
        return gnn_forward(points, graph, aug, params)
    raise ValueError(f"unknown sampler kind: {params.kind!r}")


def propose(points: QueryPoints, ecf_x: ComplexGrid | None, ecf_y: ComplexGrid | None,
            params: SamplerParams) -> QueryPoints:
    """Full proposal: augment the points with their discrepancy, then move them."""
    if params.kind == "gaussian":
        return points
    if params.kind not in KINDS:
        raise ValueError(f"unknown sampler kind: {params.kind!r}")
    aug = augment_with_loss(points, ecf_x, ecf_y)
    return apply_sampler(points, aug, params)
