"""Annotation schema, dataset loading/validation/splitting, corpus assembly.

The annotation file is a single UTF-8 JSON document:

    {"oraclesem-schema": 1, "records": [ ... ]}

with snake_case record fields as defined by :class:`AnnotationRecord`.
Image paths are relative to the annotation file; images are 64x64 PGM.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import pgm, synth
from .errors import DataError

SCHEMA_KEY = "oraclesem-schema"
SCHEMA_VERSION = 1

_RECORD_FIELDS = {
    "char_id",
    "modern_char",
    "pictographic_description",
    "components",
    "component_adjacency",
    "semantic_tags",
    "evolution_notes",
    "images",
}
_COMPONENT_FIELDS = {"category", "bbox", "note"}


@dataclass
class Component:
    category: str
    bbox: tuple | None = None  # normalized (x0, y0, x1, y1)
    note: str = ""


@dataclass
class AnnotationRecord:
    char_id: str
    modern_char: str = ""
    pictographic_description: str = ""
    components: list = field(default_factory=list)
    component_adjacency: list | None = None
    semantic_tags: list = field(default_factory=list)
    evolution_notes: str = ""
    images: list = field(default_factory=list)


def validate_record(record):
    """Raise DataError naming the record (and component index) on violation."""
    rid = record.char_id
    if not rid:
        raise DataError("record with empty char_id")
    if len(record.images) < 1:
        raise DataError(f"record {rid!r}: needs at least one image")
    for i, comp in enumerate(record.components):
        if not comp.category:
            raise DataError(f"record {rid!r} component {i}: empty category")
        if comp.bbox is not None:
            x0, y0, x1, y1 = comp.bbox
            ok = 0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0
            if not ok:
                raise DataError(
                    f"record {rid!r} component {i}: bbox {comp.bbox} violates "
                    "0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1"
                )
    adj = record.component_adjacency
    if adj is not None:
        k = len(record.components)
        if len(adj) != k or any(len(row) != k for row in adj):
            raise DataError(f"record {rid!r}: adjacency must be {k}x{k}")
        for i in range(k):
            if adj[i][i] != 0:
                raise DataError(f"record {rid!r}: adjacency diagonal must be zero")
            for j in range(k):
                if adj[i][j] not in (0, 1):
                    raise DataError(f"record {rid!r}: adjacency entries must be 0/1")
                if adj[i][j] != adj[j][i]:
                    raise DataError(f"record {rid!r}: adjacency must be symmetric")


def record_to_dict(record):
    return {
        "char_id": record.char_id,
        "modern_char": record.modern_char,
        "pictographic_description": record.pictographic_description,
        "components": [
            {"category": c.category, "bbox": list(c.bbox) if c.bbox else None, "note": c.note}
            for c in record.components
        ],
        "component_adjacency": record.component_adjacency,
        "semantic_tags": list(record.semantic_tags),
        "evolution_notes": record.evolution_notes,
        "images": list(record.images),
    }


def record_from_dict(obj, index):
    if not isinstance(obj, dict):
        raise DataError(f"record {index}: not an object")
    unknown = set(obj) - _RECORD_FIELDS
    if unknown:
        raise DataError(f"record {index}: unknown fields {sorted(unknown)}")
    comps = []
    for ci, c in enumerate(obj.get("components", [])):
        unknown_c = set(c) - _COMPONENT_FIELDS
        if unknown_c:
            raise DataError(f"record {index} component {ci}: unknown fields {sorted(unknown_c)}")
        bbox = c.get("bbox")
        comps.append(
            Component(
                category=c.get("category", ""),
                bbox=tuple(float(v) for v in bbox) if bbox is not None else None,
                note=c.get("note", ""),
            )
        )
    return AnnotationRecord(
        char_id=obj.get("char_id", ""),
        modern_char=obj.get("modern_char", ""),
        pictographic_description=obj.get("pictographic_description", ""),
        components=comps,
        component_adjacency=obj.get("component_adjacency"),
        semantic_tags=list(obj.get("semantic_tags", [])),
        evolution_notes=obj.get("evolution_notes", ""),
        images=list(obj.get("images", [])),
    )


def save_annotations(records, path):
    doc = {SCHEMA_KEY: SCHEMA_VERSION, "records": [record_to_dict(r) for r in records]}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, ensure_ascii=False)
        fh.write("\n")


def load_annotations(path, check_images=True):
    """Parse and fully validate an annotation file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: parse error at line {e.lineno} column {e.colno}: {e.msg}") from None
    except OSError as e:
        raise DataError(f"{path}: {e}") from None
    if not isinstance(doc, dict) or doc.get(SCHEMA_KEY) != SCHEMA_VERSION:
        raise DataError(f"{path}: missing or unsupported '{SCHEMA_KEY}' version (need {SCHEMA_VERSION})")
    records = [record_from_dict(obj, i) for i, obj in enumerate(doc.get("records", []))]
    base = os.path.dirname(os.path.abspath(path))
    for r in records:
        validate_record(r)
        if check_images:
            for img in r.images:
                full = os.path.join(base, img)
                if not os.path.isfile(full):
                    raise DataError(f"record {r.char_id!r}: missing image file {full}")
    return records


# ---------------------------------------------------------------------------
# splits


@dataclass
class DatasetSplit:
    train: list  # (record_index, image_index)
    test: list
    mode: str


def split_dataset(records, mode="instance", seed=0):
    """9:1 split; ``instance`` stratifies images per character,
    ``character`` keeps whole characters disjoint across the sides."""
    rng = np.random.default_rng(seed)
    if mode == "instance":
        total = sum(len(r.images) for r in records)
        if total < 10:
            raise DataError(f"instance split needs >= 10 images, got {total}")
        train, test = [], []
        for ri, rec in enumerate(records):
            n = len(rec.images)
            order = rng.permutation(n)
            # 10% per stratum, at least one test image once a character has two
            n_test = min(max(int(n * 0.1 + 0.5), 1), n - 1) if n >= 2 else 0
            for pos, ii in enumerate(order):
                (test if pos < n_test else train).append((ri, int(ii)))
        return DatasetSplit(train=train, test=test, mode=mode)
    if mode == "character":
        if len(records) < 10:
            raise DataError(f"character split needs >= 10 characters, got {len(records)}")
        order = rng.permutation(len(records))
        n_test = max(1, int(len(records) * 0.1 + 0.5))
        test_chars = set(int(i) for i in order[:n_test])
        train, test = [], []
        for ri, rec in enumerate(records):
            bucket = test if ri in test_chars else train
            for ii in range(len(rec.images)):
                bucket.append((ri, ii))
        return DatasetSplit(train=train, test=test, mode=mode)
    raise DataError(f"unknown split mode {mode!r}")


# ---------------------------------------------------------------------------
# corpus assembly for training


@dataclass
class Vocabulary:
    chars: list
    categories: list
    semantics: list  # union of categories and semantic tags

    @property
    def char_index(self):
        return {c: i for i, c in enumerate(self.chars)}

    @property
    def category_index(self):
        return {c: i for i, c in enumerate(self.categories)}

    @property
    def semantic_index(self):
        return {c: i for i, c in enumerate(self.semantics)}


def build_vocabulary(records):
    chars = sorted({r.char_id for r in records})
    categories = sorted({c.category for r in records for c in r.components})
    tags = {t for r in records for t in r.semantic_tags}
    semantics = sorted(set(categories) | tags)
    if not semantics:
        semantics = ["concept"]  # graphs need at least one semantic node
    return Vocabulary(chars=chars, categories=categories, semantics=semantics)


@dataclass
class Sample:
    record_index: int
    image_index: int
    char_id: str
    pixels: np.ndarray  # HxW float64 in [0, 1]
    char_label: int
    component_categories: list
    component_bboxes: list
    adjacency: np.ndarray | None
    semantic_active: np.ndarray  # 0/1 per semantic-vocabulary concept


def materialize(records, pairs, vocab, base_dir, expected_size=64):
    """Load the referenced images for (record, image) pairs into Samples."""
    ci = vocab.char_index
    cat_i = vocab.category_index
    sem_i = vocab.semantic_index
    samples = []
    for ri, ii in pairs:
        rec = records[ri]
        path = os.path.join(base_dir, rec.images[ii])
        with open(path, "rb") as fh:
            pixels = pgm.parse(fh.read(), expected_size=expected_size)
        active = np.zeros(len(vocab.semantics))
        for tag in rec.semantic_tags:
            if tag in sem_i:
                active[sem_i[tag]] = 1.0
        adjacency = np.array(rec.component_adjacency, dtype=np.float64) if rec.component_adjacency else None
        samples.append(
            Sample(
                record_index=ri,
                image_index=ii,
                char_id=rec.char_id,
                pixels=pixels,
                char_label=ci[rec.char_id],
                component_categories=[cat_i[c.category] for c in rec.components],
                component_bboxes=[c.bbox for c in rec.components],
                adjacency=adjacency,
                semantic_active=active,
            )
        )
    return samples


# ---------------------------------------------------------------------------
# synthetic corpus emission


def write_synthetic_corpus(out_dir, n_chars, imgs_per_char, seed, spec=None):
    """Render a corpus to ``out_dir``: images/ plus annotations.json.

    Semantic tags are exactly the motif names of each character; component
    categories are the motifs; adjacency comes from the layout grammar.
    """
    import dataclasses

    spec = spec or synth.SyntheticGlyphSpec(seed=seed)
    if spec.seed != seed:
        spec = dataclasses.replace(spec, seed=seed)
    generated = synth.generate(spec, n_chars, imgs_per_char)
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    records = []
    for item in generated:
        rel_paths = []
        for i, render in enumerate(item["renders"]):
            rel = os.path.join("images", f"{item['char_id']}_{i:02d}.pgm")
            with open(os.path.join(out_dir, rel), "wb") as fh:
                fh.write(pgm.rasterize(render.levels, binary=True))
            rel_paths.append(rel)
        comps = [
            Component(category=motif, bbox=bbox, note=f"{motif} drawn in a {item['layout']} arrangement")
            for motif, bbox in zip(item["motifs"], item["component_bboxes"])
        ]
        records.append(
            AnnotationRecord(
                char_id=item["char_id"],
                modern_char="",
                pictographic_description=(
                    f"a {item['motifs'][0]} and a {item['motifs'][1]} arranged as {item['layout']}"
                ),
                components=comps,
                component_adjacency=item["adjacency"],
                semantic_tags=sorted(set(item["motifs"])),
                evolution_notes="synthetic rendering; no historic lineage",
                images=rel_paths,
            )
        )
    ann_path = os.path.join(out_dir, "annotations.json")
    save_annotations(records, ann_path)
    return records, ann_path
