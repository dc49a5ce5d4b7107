"""The full recognizer: vision pipeline, graph reasoning, linear readouts."""

from __future__ import annotations

import fnmatch
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .graphs import GraphBuilder
from .losses import (
    LossWeights,
    align_adjacency,
    loss_char,
    loss_comp,
    loss_sem,
    loss_struct,
    loss_total,
    match_components,
)
from .nn import Linear, Module
from .reasoning import Reasoner, ReasonerConfig
from .tensor import Parameter
from .vision import VisionModule, glyph_from_pixels


class ReadoutHeads(Module):
    """Linear classification surfaces over the reasoned graph.

    Character logits read the concatenated means of component and semantic
    features; component logits are shared across component nodes; semantic
    logits are scalar per concept node; the adjacency prediction is a
    sigmoid of a symmetrized bilinear form over component features.
    """

    def __init__(self, d, n_chars, n_categories, rng):
        super().__init__()
        self.char = Linear(2 * d, n_chars, rng)
        self.comp = Linear(d, max(n_categories, 1), rng)
        self.sem = Linear(d, 1, rng)
        self.adj_form = Parameter(rng.uniform(-0.1, 0.1, (d, d)))

    def __call__(self, graph):
        comp_feats = graph.component_features()
        sem_feats = graph.semantic_features()
        char_in = T.concat(
            [T.mean(comp_feats, axis=0, keepdims=True), T.mean(sem_feats, axis=0, keepdims=True)],
            axis=1,
        )
        char_logits = self.char(char_in)
        comp_logits = self.comp(comp_feats)
        sem_logits = self.sem(sem_feats)
        sym = T.scale(T.add(self.adj_form.tensor, T.transpose(self.adj_form.tensor)), 0.5)
        adj_pred = T.sigmoid(T.matmul(T.matmul(comp_feats, sym), T.transpose(comp_feats)))
        return char_logits, comp_logits, sem_logits, adj_pred


@dataclass
class ModelOutput:
    char_logits: T.Tensor  # 1 x |chars|
    comp_logits: T.Tensor  # k x |categories|
    sem_logits: T.Tensor  # |semantics| x 1
    adj_pred: T.Tensor  # k x k
    regions: list
    graph: object
    vision: object


class GlyphModel(Module):
    """End-to-end model over one glyph image."""

    def __init__(self, cfg, vocab, seed=None):
        super().__init__()
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        self.cfg = cfg
        self.vocab = vocab
        self.vision = VisionModule(cfg, rng)
        self.builder = GraphBuilder(cfg.d, cfg.edge_dim, len(vocab.semantics), rng, reach=cfg.region_reach)
        self.reasoner = Reasoner(
            cfg.d,
            cfg.edge_dim,
            ReasonerConfig(
                steps=cfg.reasoning_steps,
                heads=cfg.heads,
                tau_add=cfg.tau_add,
                tau_prune=cfg.tau_prune,
                dynamic_edges=cfg.dynamic_edges,
                leaky_slope=cfg.leaky_slope,
            ),
            rng,
        )
        self.heads = ReadoutHeads(cfg.d, len(vocab.chars), len(vocab.categories), rng)
        self.assign_names()

    def forward(self, pixels, rng=None):
        image = glyph_from_pixels(pixels)
        vout = self.vision(image, rng)
        graph = self.builder.build(vout.pyramid, vout.fused, vout.regions)
        if vout.pooled is not None:
            # pooled summary joins reasoning through the visual node features
            pool_mean = T.mean(vout.pooled, axis=0, keepdims=True)
            pad = T.zeros((graph.n_nodes - graph.n_visual, self.cfg.d))
            graph.features = T.add(graph.features, T.concat([pool_mean] * graph.n_visual + [pad], axis=0))
        graph = self.reasoner.reason(graph, self.builder)
        char_logits, comp_logits, sem_logits, adj_pred = self.heads(graph)
        return ModelOutput(
            char_logits=char_logits,
            comp_logits=comp_logits,
            sem_logits=sem_logits,
            adj_pred=adj_pred,
            regions=vout.regions,
            graph=graph,
            vision=vout,
        )

    __call__ = forward

    def sample_losses(self, output, sample, weights=None):
        """All four loss terms for one sample; returns (parts, total, info)."""
        weights = weights or LossWeights.from_config(self.cfg)
        cfg = self.cfg
        grid = cfg.input_size // cfg.patch_size
        pred_boxes = [r.normalized_bbox(grid, grid) for r in output.regions]
        pairs, unmatched = match_components(pred_boxes, sample.component_bboxes, cfg.iou_threshold)

        parts = {}
        parts["char"] = loss_char(output.char_logits, sample.char_label)
        parts["comp"] = loss_comp(
            output.comp_logits, pairs, sample.component_categories, unmatched, len(self.vocab.categories)
        )
        prev_feats, prev_edges, next_feats = output.graph.consistency
        recomputed = self.reasoner.step_features(prev_feats, prev_edges, output.graph)
        a_true = None
        if sample.adjacency is not None:
            a_true = align_adjacency(sample.adjacency, pairs, len(output.regions))
        parts["struct"], adj_skipped = loss_struct(
            recomputed, next_feats, output.adj_pred, a_true, weights.beta
        )
        parts["sem"] = loss_sem(output.sem_logits, sample.semantic_active)
        total = loss_total(parts, weights)
        info = {"matched": len(pairs), "unmatched_gt": unmatched, "adj_skipped": adj_skipped}
        return parts, total, info

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.trainable]

    def set_trainable(self, patterns):
        """Freeze everything, then unfreeze parameters matching any pattern.

        Every pattern must match at least one parameter (catches typos).
        """
        named = list(self.named_parameters())
        for _, p in named:
            p.trainable = False
        for pattern in patterns:
            hits = 0
            for name, p in named:
                if fnmatch.fnmatchcase(name, pattern):
                    p.trainable = True
                    hits += 1
            if hits == 0:
                raise ConfigError(f"trainable pattern {pattern!r} matches no parameter")
        return sum(1 for _, p in named if p.trainable)

    def parameter_state(self):
        """Snapshot of parameter values for change audits."""
        return {name: p.tensor.data.copy() for name, p in self.named_parameters()}
