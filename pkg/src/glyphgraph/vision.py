"""Hierarchical visual pipeline: patches -> adapters -> pyramid -> regions.

Character level: a small trainable patch-transformer produces P x d features
which lightweight adapter layers refine. Component level: a feature pyramid
feeds a thresholded-norm region proposer and per-region attention. Structure
level: regions become nodes of a spatial graph processed by one multi-head
graph-attention layer. A gating unit fuses the three levels per component.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, ShapeError
from .nn import Dropout, FeedForward, LayerNorm, Linear, Module, MultiHeadAttention
from .tensor import Parameter


@dataclass
class GlyphImage:
    """Square grayscale image with intensities in [0, 1]."""

    width: int
    height: int
    pixels: np.ndarray

    def validate(self, expected_size):
        if self.width != expected_size or self.height != expected_size:
            raise DataError(f"image is {self.width}x{self.height}, expected {expected_size}x{expected_size}")
        if self.pixels.shape != (self.height, self.width):
            raise DataError(f"pixel array {self.pixels.shape} does not match {self.height}x{self.width}")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise DataError("pixel intensities outside [0, 1]")
        return self


def glyph_from_pixels(pixels):
    arr = np.asarray(pixels, dtype=np.float64)
    return GlyphImage(width=arr.shape[1], height=arr.shape[0], pixels=arr)


class TransformerBlock(Module):
    """Post-norm residual block; dropout only when a rate is configured."""

    def __init__(self, d, heads, rng, dropout_rate=0.0):
        super().__init__()
        self.mha = MultiHeadAttention(d, heads, rng)
        self.ln1 = LayerNorm(d)
        self.ffn = FeedForward(d, 2 * d, rng)  # slim hidden width keeps desk-scale steps cheap
        self.ln2 = LayerNorm(d)
        self.drop = Dropout(dropout_rate)

    def __call__(self, x, rng=None):
        x = self.ln1(T.add(x, self.drop(self.mha(x), rng)))
        return self.ln2(T.add(x, self.drop(self.ffn(x), rng)))


class PatchEncoder(Module):
    """Trainable patch-transformer producing P x d features from a glyph.

    Stands in for a large frozen backbone: blocks are individually freezable
    through the parameter naming scheme (``blocks.<i>.``). The patch
    projection bias starts at zero, so an all-zero image embeds to the
    positional table alone.
    """

    def __init__(self, input_size, patch_size, d, n_blocks, heads, rng):
        super().__init__()
        if input_size % patch_size != 0:
            raise ConfigError(f"input size {input_size} not divisible by patch size {patch_size}")
        self.input_size = input_size
        self.patch_size = patch_size
        self.grid = input_size // patch_size
        self.num_patches = self.grid * self.grid
        self.proj = Linear(patch_size * patch_size, d, rng)
        self.pos = Parameter(rng.uniform(-0.02, 0.02, (self.num_patches, d)))
        self.blocks = [TransformerBlock(d, heads, rng) for _ in range(n_blocks)]

    def embed(self, image):
        image.validate(self.input_size)
        g, ps = self.grid, self.patch_size
        patches = image.pixels.reshape(g, ps, g, ps).transpose(0, 2, 1, 3).reshape(g * g, ps * ps)
        return T.add(self.proj(T.const(patches)), self.pos.tensor)

    def __call__(self, image):
        x = self.embed(image)
        for block in self.blocks:
            x = block(x)
        return x


class AdapterLayer(Module):
    """Residual adaptation: x' = LN(x + Drop(MHA(x))); out = LN(x' + Drop(FFN(x')))."""

    def __init__(self, d, heads, rng, dropout_rate):
        super().__init__()
        self.mha = MultiHeadAttention(d, heads, rng)
        self.ln1 = LayerNorm(d)
        self.ffn = FeedForward(d, 2 * d, rng)
        self.ln2 = LayerNorm(d)
        self.drop = Dropout(dropout_rate)

    def __call__(self, x, rng=None):
        x = self.ln1(T.add(x, self.drop(self.mha(x), rng)))
        return self.ln2(T.add(x, self.drop(self.ffn(x), rng)))


class AdapterStack(Module):
    def __init__(self, d, heads, n_layers, rng, dropout_rate=0.1):
        super().__init__()
        self.layers = [AdapterLayer(d, heads, rng, dropout_rate) for _ in range(n_layers)]

    def __call__(self, x, rng=None):
        for layer in self.layers:
            x = layer(x, rng)
        return x


class QueryPool(Module):
    """Learned-query cross-attention pooling: FFN(MHA(Q, K=V, V=V))."""

    def __init__(self, d, heads, n_queries, rng):
        super().__init__()
        self.queries = Parameter(rng.uniform(-0.02, 0.02, (n_queries, d)))
        self.mha = MultiHeadAttention(d, heads, rng)
        self.ffn = FeedForward(d, 2 * d, rng)

    def __call__(self, features):
        return self.ffn(self.mha(self.queries.tensor, features))


@dataclass
class FeaturePyramid:
    """Ordered multi-scale feature maps; extents strictly decrease."""

    levels: list  # of (height, width, Tensor[(h*w) x d])

    def validate(self):
        widths = {t.data.shape[1] for _, _, t in self.levels}
        if len(widths) != 1:
            raise ShapeError(f"pyramid channel widths differ: {widths}")
        extents = [(h, w) for h, w, _ in self.levels]
        for (h0, w0), (h1, w1) in zip(extents, extents[1:]):
            if not (h1 < h0 and w1 < w0):
                raise ShapeError(f"pyramid extents must strictly decrease, got {extents}")
        return self


def _pool_matrix(src_h, src_w, dst_h, dst_w):
    """Adaptive-average pooling as a row-stochastic (dst x src) matrix."""
    m = np.zeros((dst_h * dst_w, src_h * src_w))
    for i in range(dst_h):
        r0 = (i * src_h) // dst_h
        r1 = -(-(i + 1) * src_h // dst_h)  # ceil
        for j in range(dst_w):
            c0 = (j * src_w) // dst_w
            c1 = -(-(j + 1) * src_w // dst_w)
            cells = [(r, c) for r in range(r0, r1) for c in range(c0, c1)]
            for r, c in cells:
                m[i * dst_w + j, r * src_w + c] = 1.0 / len(cells)
    return m


def build_pyramid(x, n_levels=3):
    """Grid-reshape P x d features, then halve the extent per level."""
    p = x.data.shape[0]
    g = int(math.isqrt(p))
    if g * g != p:
        raise ShapeError(f"{p} patch rows do not form a square grid")
    levels = [(g, g, x)]
    size = g
    while len(levels) < n_levels and size > 1:
        nxt = max(1, size // 2)
        pool = T.const(_pool_matrix(size, size, nxt, nxt))
        levels.append((nxt, nxt, T.matmul(pool, levels[-1][2])))
        size = nxt
    return FeaturePyramid(levels=levels).validate()


@dataclass
class Region:
    """Bounding box in feature-grid cells (inclusive), with a salience score."""

    bbox: tuple  # (row0, col0, row1, col1), inclusive
    score: float

    def cells(self, grid_w):
        r0, c0, r1, c1 = self.bbox
        return [r * grid_w + c for r in range(r0, r1 + 1) for c in range(c0, c1 + 1)]

    def centroid(self):
        r0, c0, r1, c1 = self.bbox
        return ((r0 + r1) / 2.0, (c0 + c1) / 2.0)

    def normalized_bbox(self, grid_h, grid_w):
        r0, c0, r1, c1 = self.bbox
        return (c0 / grid_w, r0 / grid_h, (c1 + 1) / grid_w, (r1 + 1) / grid_h)


def propose_regions(pyramid, max_regions=4, threshold=1.5):
    """Thresholded-norm connected components on pyramid level 0.

    Cells with L2 feature norm above ``threshold x mean`` form 4-connected
    components; each component's bounding box becomes a region scored by its
    summed norm. Falls back to one whole-grid region when nothing passes.
    """
    if max_regions < 1:
        raise ConfigError(f"max_regions must be >= 1, got {max_regions}")
    h, w, feats = pyramid.levels[0]
    norms = np.linalg.norm(feats.data, axis=1).reshape(h, w)
    cut = threshold * norms.mean()
    mask = norms > cut
    regions = []
    seen = np.zeros_like(mask, dtype=bool)
    for r in range(h):
        for c in range(w):
            if not mask[r, c] or seen[r, c]:
                continue
            stack = [(r, c)]
            seen[r, c] = True
            cells = []
            while stack:
                cr, cc = stack.pop()
                cells.append((cr, cc))
                for nr, nc in ((cr - 1, cc), (cr + 1, cc), (cr, cc - 1), (cr, cc + 1)):
                    if 0 <= nr < h and 0 <= nc < w and mask[nr, nc] and not seen[nr, nc]:
                        seen[nr, nc] = True
                        stack.append((nr, nc))
            rs = [p[0] for p in cells]
            cs = [p[1] for p in cells]
            score = float(sum(norms[p] for p in cells))
            regions.append(Region(bbox=(min(rs), min(cs), max(rs), max(cs)), score=score))
    if not regions:
        return [Region(bbox=(0, 0, h - 1, w - 1), score=float(norms.sum()))]
    regions.sort(key=lambda reg: -reg.score)
    return regions[:max_regions]


class RegionAttention(Module):
    """Self-attention over a region's cells, mean-pooled to one vector.

    Single head over the full width, logits scaled by 1/sqrt(d); the learned
    projections have no bias so a zero region stays zero.
    """

    def __init__(self, d, rng):
        super().__init__()
        self.w_q = Parameter(np.asarray(_glorot_like(rng, d, d)))
        self.w_k = Parameter(np.asarray(_glorot_like(rng, d, d)))
        self.w_v = Parameter(np.asarray(_glorot_like(rng, d, d)))
        self.last_attn = None

    def __call__(self, level0_feats, region, grid_w):
        cells = region.cells(grid_w)
        f_r = T.gather_rows(level0_feats, cells)
        q = T.matmul(f_r, self.w_q.tensor)
        k = T.matmul(f_r, self.w_k.tensor)
        v = T.matmul(f_r, self.w_v.tensor)
        attended, weights = T.mha_core(q, k, v, 1)  # one full-width head: 1/sqrt(d) scaling
        self.last_attn = weights[0].copy()
        return T.mean(attended, axis=0, keepdims=True)


def _glorot_like(rng, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, (fan_in, fan_out))


def spatial_adjacency(regions, grid_h, grid_w, reach=0.75):
    """Directed edges (src, dst) between regions whose centroids lie within
    ``reach`` of the grid diagonal; self-loops always present."""
    diag = math.hypot(grid_h, grid_w)
    edges = []
    for i, a in enumerate(regions):
        for j, b in enumerate(regions):
            if i == j:
                edges.append((i, j))
                continue
            (ra, ca), (rb, cb) = a.centroid(), b.centroid()
            if math.hypot(ra - rb, ca - cb) <= reach * diag:
                edges.append((i, j))
    return edges


class SpatialRelationEncoder(Module):
    """One multi-head graph-attention layer over the component graph.

    Per head: out_i = sum_j alpha_ij (W_h h_j) with alpha from softmaxed
    LeakyReLU(a . [W h_i || W h_j]) over i's in-neighbors; head outputs are
    concatenated and projected back to width d.
    """

    def __init__(self, d, heads, rng, leaky_slope=0.2, reach=0.75):
        super().__init__()
        if d % heads != 0:
            raise ConfigError(f"width {d} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = d // heads
        self.slope = leaky_slope
        self.reach = reach
        self.w = [Parameter(_glorot_like(rng, d, self.head_dim)) for _ in range(heads)]
        self.a = [Parameter(rng.uniform(-0.2, 0.2, 2 * self.head_dim)) for _ in range(heads)]
        self.proj = Linear(heads * self.head_dim, d, rng)
        self.last_alpha = None

    def __call__(self, feats, regions, grid_h, grid_w):
        edges = spatial_adjacency(regions, grid_h, grid_w, self.reach)
        src = np.array([e[0] for e in edges], dtype=np.int64)
        dst = np.array([e[1] for e in edges], dtype=np.int64)
        n = feats.data.shape[0]
        # head-partitioned columns: wh[:, h*p:(h+1)*p] is head h's projection
        wh = T.matmul(feats, T.concat([w.tensor for w in self.w], axis=1))
        dst_cols, src_cols = [], []
        for h in range(self.heads):
            a_col = T.reshape(self.a[h].tensor, (-1, 1))
            dst_cols.append(T.matmul(self.w[h].tensor, T.narrow(a_col, 0, 0, self.head_dim)))
            src_cols.append(T.matmul(self.w[h].tensor, T.narrow(a_col, 0, self.head_dim, self.head_dim)))
        s_dst = T.matmul(feats, T.concat(dst_cols, axis=1) if self.heads > 1 else dst_cols[0])
        s_src = T.matmul(feats, T.concat(src_cols, axis=1) if self.heads > 1 else src_cols[0])
        logits = T.leaky_relu(
            T.add(T.gather_rows(s_dst, dst), T.gather_rows(s_src, src)), self.slope
        )
        alpha = segment_softmax(logits, dst, n)
        weighted = T.mul(T.repeat_cols(alpha, self.head_dim), T.gather_rows(wh, src))
        out = T.segment_sum(weighted, dst, n)
        self.last_alpha = {
            "edges": edges,
            "per_head": [alpha.data[:, h].copy() for h in range(self.heads)],
        }
        return self.proj(out)


def segment_softmax(logits, segments, num_segments):
    """Column-wise softmax within segments; max-shifted for stability."""
    seg = np.asarray(segments, dtype=np.int64)
    maxes = np.full((num_segments, logits.data.shape[1]), -np.inf)
    np.maximum.at(maxes, seg, logits.data)
    shifted = T.sub(logits, T.const(maxes[seg]))
    e = T.exp(shifted)
    denom = T.segment_sum(e, seg, num_segments)
    return T.div(e, T.gather_rows(denom, seg))


class GatedFusion(Module):
    """Sigmoid-gated pointwise fusion of the three per-component features.

    gate = sigmoid(W_g [raw || attended || structural]); the fused component
    vector is gate * proj(same concatenation); the character-level feature
    is the sum over components.
    """

    def __init__(self, d, rng):
        super().__init__()
        self.gate = Linear(3 * d, d, rng)
        self.proj = Linear(3 * d, d, rng)
        self.last_gate = None

    def __call__(self, raw, attended, structural):
        if not raw.data.shape == attended.data.shape == structural.data.shape:
            raise ShapeError(
                f"fusion inputs disagree: {raw.data.shape}, {attended.data.shape}, {structural.data.shape}"
            )
        cat = T.concat([raw, attended, structural], axis=1)
        gate = T.sigmoid(self.gate(cat))
        self.last_gate = gate.data.copy()
        fused = T.mul(gate, self.proj(cat))
        return fused, T.sum_(fused, axis=0, keepdims=True)


@dataclass
class VisionOutput:
    adapted: T.Tensor
    pyramid: FeaturePyramid
    regions: list
    region_means: T.Tensor  # k x d
    attended: T.Tensor  # k x d
    structural: T.Tensor  # k x d
    fused: T.Tensor  # k x d
    char_feature: T.Tensor  # 1 x d
    pooled: T.Tensor | None = None  # M x d when query pooling is enabled


class VisionModule(Module):
    """End-to-end visual feature extraction for one glyph image."""

    def __init__(self, cfg, rng):
        super().__init__()
        self.cfg = cfg
        self.encoder = PatchEncoder(
            cfg.input_size, cfg.patch_size, cfg.d, cfg.encoder_blocks, cfg.heads, rng
        )
        self.adapters = AdapterStack(cfg.d, cfg.heads, cfg.adapter_layers, rng, cfg.dropout)
        self.pool = QueryPool(cfg.d, cfg.heads, cfg.queries, rng) if cfg.use_query_pool else None
        self.region_attention = RegionAttention(cfg.d, rng)
        self.spatial = SpatialRelationEncoder(
            cfg.d, cfg.heads, rng, leaky_slope=cfg.leaky_slope, reach=cfg.region_reach
        )
        self.fusion = GatedFusion(cfg.d, rng)

    def __call__(self, image, rng=None):
        x = self.adapters(self.encoder(image), rng)
        pooled = self.pool(x) if self.pool is not None else None
        pyramid = build_pyramid(x, self.cfg.pyramid_levels)
        regions = propose_regions(pyramid, self.cfg.max_regions, self.cfg.region_threshold)
        h, w, level0 = pyramid.levels[0]
        means = []
        attended = []
        for region in regions:
            means.append(T.mean(T.gather_rows(level0, region.cells(w)), axis=0, keepdims=True))
            attended.append(self.region_attention(level0, region, w))
        region_means = T.concat(means, axis=0) if len(means) > 1 else means[0]
        attended_mat = T.concat(attended, axis=0) if len(attended) > 1 else attended[0]
        structural = self.spatial(attended_mat, regions, h, w)
        fused, char_feature = self.fusion(region_means, attended_mat, structural)
        return VisionOutput(
            adapted=x,
            pyramid=pyramid,
            regions=regions,
            region_means=region_means,
            attended=attended_mat,
            structural=structural,
            fused=fused,
            char_feature=char_feature,
            pooled=pooled,
        )
