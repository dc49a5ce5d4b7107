"""Procedural glyph generator with exact ground truth for every loss term.

Characters are (motif pair, layout) combinations rendered as white strokes on
a black 64x64 canvas. Each rendered component tracks its own ink mask, so the
stored bounding box (the union over a record's renderings) covers every ink
pixel of that component. Rendering is deterministic given the seed.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

MOTIFS = ("arc", "box", "cross", "dot-cluster", "zigzag")
LAYOUTS = ("vstack", "hpair", "enclose")

# Unit-space stroke geometry per motif: list of polylines plus optional dots.
_MOTIF_STROKES = {
    "box": {
        "lines": [[(0.05, 0.05), (0.95, 0.05), (0.95, 0.95), (0.05, 0.95), (0.05, 0.05)]],
        "dots": [],
    },
    "cross": {
        "lines": [[(0.5, 0.02), (0.5, 0.98)], [(0.02, 0.5), (0.98, 0.5)]],
        "dots": [],
    },
    "arc": {
        "lines": [[(0.05 + 0.9 * (0.5 - 0.5 * math.cos(t / 8 * math.pi)),
                    0.95 - 0.85 * math.sin(t / 8 * math.pi)) for t in range(9)]],
        "dots": [],
    },
    "zigzag": {
        "lines": [[(0.02, 0.25), (0.27, 0.8), (0.52, 0.25), (0.77, 0.8), (0.98, 0.25)]],
        "dots": [],
    },
    "dot-cluster": {
        "lines": [],
        "dots": [(0.25, 0.3), (0.75, 0.3), (0.5, 0.62), (0.3, 0.88), (0.7, 0.88)],
    },
}

# Layout slots as (x0, y0, x1, y1) in canvas-normalized coordinates.
_LAYOUT_SLOTS = {
    "vstack": [(0.15, 0.06, 0.85, 0.46), (0.15, 0.54, 0.85, 0.94)],
    "hpair": [(0.06, 0.15, 0.46, 0.85), (0.54, 0.15, 0.94, 0.85)],
    "enclose": [(0.06, 0.06, 0.94, 0.94), (0.32, 0.32, 0.68, 0.68)],
}


@dataclass
class SyntheticGlyphSpec:
    """Jitter and sizing knobs for the generator; zeros make it rigid."""

    seed: int = 0
    size: int = 64
    translate_px: float = 3.0
    rotate_deg: float = 10.0
    stroke_min: int = 1
    stroke_max: int = 2
    noise_rate: float = 0.02

    def __post_init__(self):
        if not 0.0 <= self.noise_rate <= 0.02:
            raise DataError(f"noise rate must be in [0, 0.02], got {self.noise_rate}")
        if self.translate_px > 3.0 or self.rotate_deg > 10.0:
            raise DataError("jitter beyond limits: translation <= 3 px, rotation <= 10 deg")
        if not 1 <= self.stroke_min <= self.stroke_max <= 2:
            raise DataError("stroke widths must satisfy 1 <= min <= max <= 2")


def character_inventory():
    """All distinct (motif-set, layout) combinations, deterministically ordered."""
    pairs = [(a, b) for a, b in itertools.combinations_with_replacement(MOTIFS, 2)]
    return [(pair, layout) for pair in pairs for layout in LAYOUTS]


def char_id_for(pair, layout):
    return f"{pair[0]}_{pair[1]}_{layout}"


def _stamp_disc(mask, cx, cy, radius):
    h, w = mask.shape
    r0 = max(0, int(math.floor(cy - radius)))
    r1 = min(h - 1, int(math.ceil(cy + radius)))
    c0 = max(0, int(math.floor(cx - radius)))
    c1 = min(w - 1, int(math.ceil(cx + radius)))
    r2 = radius * radius
    for r in range(r0, r1 + 1):
        for c in range(c0, c1 + 1):
            dx = c - cx
            dy = r - cy
            if dx * dx + dy * dy <= r2:
                mask[r, c] = True


def _draw_segment(mask, p0, p1, width):
    x0, y0 = p0
    x1, y1 = p1
    length = math.hypot(x1 - x0, y1 - y0)
    steps = max(1, int(length / 0.3))
    radius = max(0.5, width / 2.0)
    for s in range(steps + 1):
        t = s / steps
        _stamp_disc(mask, x0 + t * (x1 - x0), y0 + t * (y1 - y0), radius)


def render_component(size, motif, slot, dx, dy, theta, width):
    """Render one motif into its slot; returns the component's boolean ink mask."""
    mask = np.zeros((size, size), dtype=bool)
    x0, y0, x1, y1 = slot
    sw = (x1 - x0) * size
    sh = (y1 - y0) * size
    cx = (x0 + x1) / 2.0 * size + dx
    cy = (y0 + y1) / 2.0 * size + dy
    cos_t, sin_t = math.cos(theta), math.sin(theta)

    def to_canvas(p):
        ux = (p[0] - 0.5) * sw
        uy = (p[1] - 0.5) * sh
        return (cx + ux * cos_t - uy * sin_t, cy + ux * sin_t + uy * cos_t)

    geom = _MOTIF_STROKES[motif]
    for line in geom["lines"]:
        pts = [to_canvas(p) for p in line]
        for a, b in zip(pts, pts[1:]):
            _draw_segment(mask, a, b, width)
    for dot in geom["dots"]:
        px, py = to_canvas(dot)
        _stamp_disc(mask, px, py, max(1.0, width))
    return mask


@dataclass
class RenderedGlyph:
    levels: np.ndarray  # uint8 canvas
    component_masks: list = field(default_factory=list)


def render_glyph(spec, pair, layout, rng):
    """One jittered rendering; component masks exclude the pixel noise."""
    size = spec.size
    masks = []
    for motif, slot in zip(pair, _LAYOUT_SLOTS[layout]):
        dx = rng.uniform(-spec.translate_px, spec.translate_px) if spec.translate_px else 0.0
        dy = rng.uniform(-spec.translate_px, spec.translate_px) if spec.translate_px else 0.0
        theta = math.radians(rng.uniform(-spec.rotate_deg, spec.rotate_deg)) if spec.rotate_deg else 0.0
        width = int(rng.integers(spec.stroke_min, spec.stroke_max + 1))
        masks.append(render_component(size, motif, slot, dx, dy, theta, width))
    canvas = np.zeros((size, size), dtype=np.uint8)
    for m in masks:
        canvas[m] = 255
    if spec.noise_rate > 0:
        flips = rng.random((size, size)) < spec.noise_rate
        canvas[flips] = 255 - canvas[flips]
    return RenderedGlyph(levels=canvas, component_masks=masks)


def mask_bbox(mask, size):
    """Normalized (x0, y0, x1, y1) covering every true pixel of the mask."""
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        return None
    return (
        float(cols.min()) / size,
        float(rows.min()) / size,
        float(cols.max() + 1) / size,
        float(rows.max() + 1) / size,
    )


def _union_bbox(boxes):
    boxes = [b for b in boxes if b is not None]
    if not boxes:
        return None
    return (
        min(b[0] for b in boxes),
        min(b[1] for b in boxes),
        max(b[2] for b in boxes),
        max(b[3] for b in boxes),
    )


def generate(spec, n_chars, imgs_per_char):
    """Render ``n_chars`` characters, ``imgs_per_char`` images each.

    Returns a list of dicts: char metadata plus rendered glyphs. Raises on
    combinatorial exhaustion of the (motif-set, layout) inventory.
    """
    inventory = character_inventory()
    if n_chars > len(inventory):
        raise DataError(
            f"requested {n_chars} characters but the inventory has only {len(inventory)} combinations"
        )
    if n_chars < 1 or imgs_per_char < 1:
        raise DataError("need at least one character and one image per character")
    rng = np.random.default_rng(spec.seed)
    out = []
    for pair, layout in inventory[:n_chars]:
        renders = [render_glyph(spec, pair, layout, rng) for _ in range(imgs_per_char)]
        per_component_boxes = []
        for ci in range(len(pair)):
            per_component_boxes.append(
                _union_bbox([mask_bbox(r.component_masks[ci], spec.size) for r in renders])
            )
        out.append(
            {
                "char_id": char_id_for(pair, layout),
                "motifs": list(pair),
                "layout": layout,
                "renders": renders,
                "component_bboxes": per_component_boxes,
                "adjacency": [[0, 1], [1, 0]],
            }
        )
    return out
