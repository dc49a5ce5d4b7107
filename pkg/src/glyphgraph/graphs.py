"""Typed reasoning graph: visual, component, and semantic nodes.

Node features live in one N x d tensor split into three contiguous ranges;
edges are typed sets (component-component, visual-component,
component-semantic) carrying learned edge features of width ``edge_dim``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .nn import Linear, Module
from .tensor import Parameter
from .vision import spatial_adjacency

EDGE_TYPES = ("cc", "vc", "cs")


@dataclass
class EdgeSet:
    src: np.ndarray  # global node indices
    dst: np.ndarray
    feats: T.Tensor  # E x edge_dim

    def count(self):
        return int(self.src.size)

    def pairs(self):
        return list(zip(self.src.tolist(), self.dst.tolist()))


@dataclass
class HeteroGraph:
    features: T.Tensor  # N x d
    n_visual: int
    n_component: int
    n_semantic: int
    edges: dict  # edge type -> EdgeSet
    step: int = 0
    last_alphas: dict = field(default_factory=dict)  # (etype, src, dst) -> mean alpha
    consistency: tuple | None = None  # (prev_features, prev_edges, next_features)

    @property
    def n_nodes(self):
        return self.n_visual + self.n_component + self.n_semantic

    def component_range(self):
        return self.n_visual, self.n_visual + self.n_component

    def semantic_range(self):
        return self.n_visual + self.n_component, self.n_nodes

    def component_features(self):
        return T.narrow(self.features, 0, self.n_visual, self.n_component)

    def semantic_features(self):
        return T.narrow(self.features, 0, self.n_visual + self.n_component, self.n_semantic)

    def validate(self):
        if not np.all(np.isfinite(self.features.data)):
            raise ShapeError("graph features contain non-finite values")
        c0, c1 = self.component_range()
        s0, s1 = self.semantic_range()
        bounds = {
            "cc": ((c0, c1), (c0, c1)),
            "vc": ((0, self.n_visual), (c0, c1)),
            "cs": ((c0, c1), (s0, s1)),
        }
        for etype, es in self.edges.items():
            (src_lo, src_hi), (dst_lo, dst_hi) = bounds[etype]
            if es.count():
                if es.src.min() < src_lo or es.src.max() >= src_hi:
                    raise ShapeError(f"{etype} edge source out of its type range")
                if es.dst.min() < dst_lo or es.dst.max() >= dst_hi:
                    raise ShapeError(f"{etype} edge destination out of its type range")
            pairs = es.pairs()
            if len(pairs) != len(set(pairs)):
                raise ShapeError(f"duplicate (src, dst) pair in {etype} edges")
            if es.feats.data.shape[0] != es.count():
                raise ShapeError(f"{etype} edge features count {es.feats.data.shape[0]} != {es.count()}")
            if not np.all(np.isfinite(es.feats.data)):
                raise ShapeError(f"{etype} edge features contain non-finite values")
        return self


def cosine_matrix(a, b):
    """Row-by-row cosine similarity; zero rows yield zero similarity."""
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        sims = (a @ b.T) / (na * nb.T)
    sims[~np.isfinite(sims)] = 0.0
    low = (na < 1e-12).reshape(-1, 1) | (nb < 1e-12).reshape(1, -1)
    sims[low] = 0.0
    return sims


class GraphBuilder(Module):
    """Builds the typed graph from pyramid summaries and fused components.

    Semantic nodes come from a learned embedding table. Initial
    component-semantic wiring takes the top-2 cosine matches per component;
    edge features embed the edge type plus normalized geometric offsets
    (zeros for non-spatial edges).
    """

    def __init__(self, d, edge_dim, semantic_vocab_size, rng, reach=0.75):
        super().__init__()
        self.reach = reach
        self.sem_embed = Parameter(rng.uniform(-0.5, 0.5, (semantic_vocab_size, d)))
        self.type_embed = Parameter(rng.uniform(-0.5, 0.5, (len(EDGE_TYPES), edge_dim)))
        self.edge_proj = Linear(edge_dim + 2, edge_dim, rng)

    def edge_features(self, etype, offsets):
        """Project [type embedding || offsets] rows to edge_dim features."""
        n = offsets.shape[0]
        if n == 0:
            return T.zeros((0, self.type_embed.data.shape[1]))
        type_rows = T.gather_rows(self.type_embed.tensor, [EDGE_TYPES.index(etype)] * n)
        return self.edge_proj(T.concat([type_rows, T.const(offsets)], axis=1))

    def build(self, pyramid, fused, regions):
        """Assemble the graph; ``fused`` is the k x d component feature block."""
        summaries = [T.mean(level, axis=0, keepdims=True) for _, _, level in pyramid.levels]
        vis = T.concat(summaries, axis=0) if len(summaries) > 1 else summaries[0]
        n_visual = vis.data.shape[0]
        k = fused.data.shape[0]
        n_semantic = self.sem_embed.data.shape[0]
        features = T.concat([vis, fused, self.sem_embed.tensor], axis=0)

        grid_h, grid_w, _ = pyramid.levels[0]
        local_edges = spatial_adjacency(regions, grid_h, grid_w, self.reach)
        cc_src = np.array([n_visual + s for s, _ in local_edges], dtype=np.int64)
        cc_dst = np.array([n_visual + d_ for _, d_ in local_edges], dtype=np.int64)
        cc_offsets = np.zeros((len(local_edges), 2))
        for row, (s, d_) in enumerate(local_edges):
            (r_s, c_s), (r_d, c_d) = regions[s].centroid(), regions[d_].centroid()
            cc_offsets[row] = ((r_d - r_s) / grid_h, (c_d - c_s) / grid_w)

        vc_pairs = [(vi, n_visual + cj) for vi in range(n_visual) for cj in range(k)]
        vc_src = np.array([p[0] for p in vc_pairs], dtype=np.int64)
        vc_dst = np.array([p[1] for p in vc_pairs], dtype=np.int64)

        sims = cosine_matrix(fused.data, self.sem_embed.data)
        cs_pairs = []
        top = min(2, n_semantic)
        for cj in range(k):
            order = np.argsort(-sims[cj], kind="stable")[:top]
            for sk in sorted(int(v) for v in order):
                cs_pairs.append((n_visual + cj, n_visual + k + sk))
        cs_src = np.array([p[0] for p in cs_pairs], dtype=np.int64)
        cs_dst = np.array([p[1] for p in cs_pairs], dtype=np.int64)

        edges = {
            "cc": EdgeSet(cc_src, cc_dst, self.edge_features("cc", cc_offsets)),
            "vc": EdgeSet(vc_src, vc_dst, self.edge_features("vc", np.zeros((len(vc_pairs), 2)))),
            "cs": EdgeSet(cs_src, cs_dst, self.edge_features("cs", np.zeros((len(cs_pairs), 2)))),
        }
        return HeteroGraph(
            features=features,
            n_visual=n_visual,
            n_component=k,
            n_semantic=n_semantic,
            edges=edges,
        ).validate()


def export_dot(graph):
    """Reasoned graph as a DOT digraph; edges labeled with final-step alpha."""
    lines = ["digraph reasoning {", "  rankdir=LR;"]
    c0, _ = graph.component_range()
    s0, _ = graph.semantic_range()

    def node_name(idx):
        if idx < c0:
            return f"v{idx}"
        if idx < s0:
            return f"c{idx - c0}"
        return f"s{idx - s0}"

    for i in range(graph.n_visual):
        lines.append(f'  v{i} [label="visual {i}"];')
    for i in range(graph.n_component):
        lines.append(f'  c{i} [label="component {i}"];')
    for i in range(graph.n_semantic):
        lines.append(f'  s{i} [label="semantic {i}"];')
    for etype in EDGE_TYPES:
        es = graph.edges[etype]
        for s, d_ in es.pairs():
            alpha = graph.last_alphas.get((etype, s, d_))
            label = f"{etype} {alpha:.3f}" if alpha is not None else f"{etype} -"
            lines.append(f'  {node_name(s)} -> {node_name(d_)} [label="{label}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"
