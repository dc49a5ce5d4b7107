"""Message passing over the typed graph with gated recurrent updates.

Each reasoning step: per-edge messages from a type-specific MLP, attention
coefficients from per-head additive scoring over every node's incoming
edges, per-head aggregation averaged across heads, then a shared GRU update.
Updates are synchronous: every new feature is computed from step-t features.
Component-semantic edges are re-thresholded after each step when dynamic
edges are enabled; a hysteresis band keeps borderline edges untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .graphs import EDGE_TYPES, EdgeSet, HeteroGraph, cosine_matrix
from .nn import GRUCell, Linear, Module
from .tensor import Parameter
from .vision import segment_softmax


@dataclass
class ReasonerConfig:
    steps: int = 3
    heads: int = 8
    tau_add: float = 0.5
    tau_prune: float = 0.3
    dynamic_edges: bool = True
    leaky_slope: float = 0.2

    def validate(self):
        if self.steps < 1:
            raise ContractError("reasoning needs at least one step")
        if not (0.0 <= self.tau_prune < self.tau_add <= 1.0):
            raise ContractError(f"need 0 <= tau_prune < tau_add <= 1, got {self.tau_prune}, {self.tau_add}")
        return self


class MessageMLP(Module):
    """Two-layer message function on [h_src || h_dst || e]."""

    def __init__(self, d, edge_dim, rng):
        super().__init__()
        self.lin1 = Linear(2 * d + edge_dim, d, rng)
        self.lin2 = Linear(d, d, rng)

    def __call__(self, h_src, h_dst, e):
        return self.lin2(T.gelu(self.lin1(T.concat([h_src, h_dst, e], axis=1))))


class Reasoner(Module):
    def __init__(self, d, edge_dim, cfg, rng):
        super().__init__()
        if d % cfg.heads != 0:
            raise ContractError(f"width {d} not divisible by {cfg.heads} heads")
        self.cfg = cfg.validate()
        self.d = d
        self.head_dim = d // cfg.heads
        self.msg = {etype: MessageMLP(d, edge_dim, rng) for etype in EDGE_TYPES}
        self.att_w = [Parameter(_glorot(rng, d, self.head_dim)) for _ in range(cfg.heads)]
        self.att_a = [Parameter(rng.uniform(-0.2, 0.2, 2 * self.head_dim)) for _ in range(cfg.heads)]
        self.gru = GRUCell(d, rng)

    # the dict of MessageMLPs is not auto-discovered; expose it explicitly
    def named_parameters(self, prefix=""):
        for etype in EDGE_TYPES:
            yield from self.msg[etype].named_parameters(f"{prefix}msg.{etype}.")
        for i, p in enumerate(self.att_w):
            yield f"{prefix}att_w.{i}", p
        for i, p in enumerate(self.att_a):
            yield f"{prefix}att_a.{i}", p
        yield from self.gru.named_parameters(f"{prefix}gru.")

    def train(self, flag=True):
        self.training = flag
        for etype in EDGE_TYPES:
            self.msg[etype].train(flag)
        self.gru.train(flag)
        return self

    def message(self, h_src, h_dst, e, etype="cc"):
        """Message for a single edge; inputs are 1 x d, 1 x d, 1 x edge_dim."""
        return self.msg[etype](h_src, h_dst, e)

    def attention_coeffs(self, h_dst, neighbor_feats, head=0):
        """Single-node coefficients over its in-neighbors for one head."""
        n = neighbor_feats.data.shape[0]
        if n == 0:
            raise ContractError("attention over an empty neighbor set")
        w = self.att_w[head].tensor
        a_col = T.reshape(self.att_a[head].tensor, (-1, 1))
        a_dst = T.narrow(a_col, 0, 0, self.head_dim)
        a_src = T.narrow(a_col, 0, self.head_dim, self.head_dim)
        wh_dst = T.matmul(h_dst, w)
        wh_src = T.matmul(neighbor_feats, w)
        logits = T.leaky_relu(
            T.add(T.matmul(wh_src, a_src), T.matmul(wh_dst, a_dst)), self.cfg.leaky_slope
        )
        return T.softmax(T.transpose(logits), axis=1)

    def step(self, graph):
        """One synchronous update; nodes without incoming edges keep h."""
        n = graph.n_nodes
        all_src, all_dst, typed = [], [], []
        messages = []
        for etype in EDGE_TYPES:
            es = graph.edges[etype]
            if es.count() == 0:
                continue
            h_src = T.gather_rows(graph.features, es.src)
            h_dst = T.gather_rows(graph.features, es.dst)
            messages.append(self.msg[etype](h_src, h_dst, es.feats))
            all_src.append(es.src)
            all_dst.append(es.dst)
            typed.extend((etype, s, d_) for s, d_ in es.pairs())
        if not messages:
            return self._carry(graph, graph.features, {})
        m = T.concat(messages, axis=0) if len(messages) > 1 else messages[0]
        src = np.concatenate(all_src)
        dst = np.concatenate(all_dst)

        # a_h . (W_h x) = x . (W_h a_h): stack the per-head projected score
        # vectors into two d x heads matrices so scoring is two matmuls
        dst_cols, src_cols = [], []
        for h in range(self.cfg.heads):
            a_col = T.reshape(self.att_a[h].tensor, (-1, 1))
            dst_cols.append(T.matmul(self.att_w[h].tensor, T.narrow(a_col, 0, 0, self.head_dim)))
            src_cols.append(T.matmul(self.att_w[h].tensor, T.narrow(a_col, 0, self.head_dim, self.head_dim)))
        c_dst = T.concat(dst_cols, axis=1) if self.cfg.heads > 1 else dst_cols[0]
        c_src = T.concat(src_cols, axis=1) if self.cfg.heads > 1 else src_cols[0]
        s_dst = T.matmul(graph.features, c_dst)
        s_src = T.matmul(graph.features, c_src)
        logits = T.leaky_relu(
            T.add(T.gather_rows(s_src, src), T.gather_rows(s_dst, dst)), self.cfg.leaky_slope
        )
        alpha = segment_softmax(logits, dst, n)
        # messages are shared across heads, so averaging alphas first equals
        # averaging the per-head aggregates
        alpha_mean = T.mean(alpha, axis=1, keepdims=True)
        aggregate = T.segment_sum(T.mul(alpha_mean, m), dst, n)
        updated = self.gru(graph.features, aggregate)
        indeg = np.bincount(dst, minlength=n).reshape(-1, 1)
        mask = T.const((indeg > 0).astype(np.float64))
        keep = T.const((indeg == 0).astype(np.float64))
        new_features = T.add(T.mul(mask, updated), T.mul(keep, graph.features))

        alphas = {
            key: float(alpha_mean.data[row, 0]) for row, key in enumerate(typed)
        }
        return self._carry(graph, new_features, alphas)

    def _carry(self, graph, features, alphas):
        return HeteroGraph(
            features=features,
            n_visual=graph.n_visual,
            n_component=graph.n_component,
            n_semantic=graph.n_semantic,
            edges=dict(graph.edges),
            step=graph.step + 1,
            last_alphas=alphas,
            consistency=graph.consistency,
        )

    def dynamic_update(self, graph, builder):
        """Re-threshold component-semantic edges from feature similarity.

        Adds edges with similarity above tau_add, prunes below tau_prune,
        leaves the hysteresis band untouched, and never prunes a component's
        highest-similarity edge, so every component keeps at least one.
        """
        cfg = self.cfg
        c0, _ = graph.component_range()
        s0, _ = graph.semantic_range()
        comps = graph.features.data[c0:c0 + graph.n_component]
        sems = graph.features.data[s0:s0 + graph.n_semantic]
        sims = cosine_matrix(comps, sems)

        existing = set(graph.edges["cs"].pairs())
        new_pairs = []
        for cj in range(graph.n_component):
            src = c0 + cj
            present = sorted(d_ for s, d_ in existing if s == src)
            protected = None
            if present:
                best = max(present, key=lambda d_: (sims[cj, d_ - s0], -d_))
                protected = best
            for sk in range(graph.n_semantic):
                dst = s0 + sk
                sim = sims[cj, sk]
                if (src, dst) in existing:
                    if sim < cfg.tau_prune and dst != protected:
                        continue  # pruned
                    new_pairs.append((src, dst))
                elif sim > cfg.tau_add:
                    new_pairs.append((src, dst))
        new_pairs.sort()
        cs_src = np.array([p[0] for p in new_pairs], dtype=np.int64)
        cs_dst = np.array([p[1] for p in new_pairs], dtype=np.int64)
        feats = builder.edge_features("cs", np.zeros((len(new_pairs), 2)))
        edges = dict(graph.edges)
        edges["cs"] = EdgeSet(cs_src, cs_dst, feats)
        return HeteroGraph(
            features=graph.features,
            n_visual=graph.n_visual,
            n_component=graph.n_component,
            n_semantic=graph.n_semantic,
            edges=edges,
            step=graph.step,
            last_alphas=graph.last_alphas,
            consistency=graph.consistency,
        )

    def reason(self, graph, builder):
        """Run the configured number of steps with optional edge updates.

        Records a consistency snapshot around the final step: the features
        and edges feeding it plus the features it produced, for the
        structural loss recomputation.
        """
        for t in range(self.cfg.steps):
            final = t == self.cfg.steps - 1
            if final:
                prev_features = graph.features
                prev_edges = dict(graph.edges)
            graph = self.step(graph)
            if final:
                graph.consistency = (prev_features, prev_edges, graph.features)
            if self.cfg.dynamic_edges:
                graph = self.dynamic_update(graph, builder)
        return graph

    def step_features(self, features, edges, shape_like):
        """Recompute one step's output features from a snapshot."""
        graph = HeteroGraph(
            features=features,
            n_visual=shape_like.n_visual,
            n_component=shape_like.n_component,
            n_semantic=shape_like.n_semantic,
            edges=edges,
        )
        return self.step(graph).features


def _glorot(rng, fan_in, fan_out):
    import math

    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, (fan_in, fan_out))
