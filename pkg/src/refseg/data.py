"""Synthetic referring-segmentation scenes.

Scenes place 2-4 flat-colored shapes (circle / square / triangle in one of
four colors) on distinct cells of a G x G layout grid over a gray canvas.
Expressions come in two forms:

* relation-free:  "the red circle", "a blue square"
* relational:     "the red circle left of the blue square",
                  "the green triangle that is above the red circle",
                  "the yellow square to the right of the green circle"

Relation semantics are grid-based and row/column independent: A is "left
of" B iff A's column index is smaller, "above" iff A's row index is
smaller.  Every emitted expression is checked by exhaustive matching to
identify exactly one object in its scene.

Rendering is integer rasterisation (no anti-aliasing) followed by a single
division by 255, so images and masks are bit-reproducible and the mask is
the exact footprint of the referent.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .seeds import numpy_rng
from .vocab import COLORS, MAX_LEN, SHAPES, Vocabulary, build_vocabulary, tokenize

BACKGROUND = (128, 128, 128)
COLOR_RGB = {
    "red": (220, 40, 40),
    "green": (40, 180, 40),
    "blue": (40, 40, 220),
    "yellow": (230, 210, 40),
}

RELATIONS = ("left", "right", "above", "below")

# surface realisations of each relation; "that is" may prefix the short ones
_REL_PHRASES = {
    "left": (("left", "of"), ("to", "the", "left", "of")),
    "right": (("right", "of"), ("to", "the", "right", "of")),
    "above": (("above",),),
    "below": (("below",),),
}


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    cell: tuple[int, int]  # (row, col) on the layout grid


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple[SceneObject, ...]
    referent: int
    relation: str | None = None  # None for relation-free expressions
    anchor: int | None = None

    def to_dict(self) -> dict:
        return {
            "objects": [
                {"shape": o.shape, "color": o.color, "cell": list(o.cell)}
                for o in self.objects
            ],
            "referent": self.referent,
            "relation": self.relation,
            "anchor": self.anchor,
        }

    @staticmethod
    def from_dict(d: dict) -> "SceneSpec":
        objs = tuple(
            SceneObject(o["shape"], o["color"], tuple(o["cell"])) for o in d["objects"]
        )
        return SceneSpec(objs, d["referent"], d["relation"], d["anchor"])


@dataclass
class Sample:
    id: int
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    tokens: np.ndarray  # int64, length MAX_LEN
    mask: np.ndarray  # H x W uint8 in {0, 1}
    spec: SceneSpec
    expression: list[str] = field(default_factory=list)
    centroid: tuple[float, float] = (0.0, 0.0)  # (cx, cy), normalized


# ---------------------------------------------------------------------------
# expression semantics


def relation_holds(relation: str, a: SceneObject, b: SceneObject) -> bool:
    (ar, ac), (br, bc) = a.cell, b.cell
    if relation == "left":
        return ac < bc
    if relation == "right":
        return ac > bc
    if relation == "above":
        return ar < br
    if relation == "below":
        return ar > br
    raise ValueError(f"unknown relation {relation!r}")


def matching_objects(spec: SceneSpec) -> list[int]:
    """Indices of all objects the spec's expression could refer to.

    Exhaustive evaluation of the expression semantics against every object;
    the generator only keeps scenes where exactly one index comes back.
    """
    objects = spec.objects
    ref = spec.objects[spec.referent]
    hits = []
    for i, obj in enumerate(objects):
        if (obj.color, obj.shape) != (ref.color, ref.shape):
            continue
        if spec.relation is None:
            hits.append(i)
            continue
        anchor = spec.objects[spec.anchor]
        for j, other in enumerate(objects):
            if j == i:
                continue
            if (other.color, other.shape) == (anchor.color, anchor.shape) and relation_holds(
                spec.relation, obj, other
            ):
                hits.append(i)
                break
    return hits


def render_expression(spec: SceneSpec, rng: np.random.Generator) -> list[str]:
    ref = spec.objects[spec.referent]
    if spec.relation is None:
        article = "a" if rng.random() < 0.3 else "the"
        return [article, ref.color, ref.shape]
    anchor = spec.objects[spec.anchor]
    phrases = _REL_PHRASES[spec.relation]
    phrase = list(phrases[rng.integers(len(phrases))])
    lead = ["that", "is"] if len(phrase) <= 2 and rng.random() < 0.4 else []
    return (
        ["the", ref.color, ref.shape]
        + lead
        + phrase
        + ["the", anchor.color, anchor.shape]
    )


# ---------------------------------------------------------------------------
# rasterisation (pure integer tests; exact footprints)


def _cell_box(cell: tuple[int, int], grid: int, size: int) -> tuple[int, int, int, int]:
    r, c = cell
    y0, y1 = r * size // grid, (r + 1) * size // grid
    x0, x1 = c * size // grid, (c + 1) * size // grid
    return y0, y1, x0, x1


def _shape_footprint(shape: str, box, size: int) -> np.ndarray:
    """Boolean H x W footprint of `shape` centered in the cell box."""
    y0, y1, x0, x1 = box
    h, w = y1 - y0, x1 - x0
    radius2 = 2 * (min(h, w) // 2) - 2  # twice the radius, leaves a margin
    cy2, cx2 = y0 + y1 - 1, x0 + x1 - 1  # twice the center coordinates
    ys = np.arange(size)[:, None]
    xs = np.arange(size)[None, :]
    dy2 = 2 * ys - cy2
    dx2 = 2 * xs - cx2
    if shape == "circle":
        return dy2 * dy2 + dx2 * dx2 <= radius2 * radius2
    if shape == "square":
        return (np.abs(dy2) <= radius2) & (np.abs(dx2) <= radius2)
    if shape == "triangle":
        # apex at the top, base at the bottom; half-width grows linearly
        rows = np.clip(dy2 + radius2, 0, None)  # 0 at apex .. 2*radius2 at base
        halfwidth2 = rows // 2
        return (dy2 >= -radius2) & (dy2 <= radius2) & (np.abs(dx2) <= halfwidth2)
    raise ValueError(f"unknown shape {shape!r}")


def render_scene(spec: SceneSpec, grid: int, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Render (image, referent_mask); image float32 in [0,1], mask uint8."""
    canvas = np.empty((size, size, 3), dtype=np.uint8)
    canvas[:] = BACKGROUND
    mask = np.zeros((size, size), dtype=np.uint8)
    for i, obj in enumerate(spec.objects):
        footprint = _shape_footprint(obj.shape, _cell_box(obj.cell, grid, size), size)
        canvas[footprint] = COLOR_RGB[obj.color]
        if i == spec.referent:
            mask[footprint] = 1
    return canvas.astype(np.float32) / 255.0, mask


def mask_centroid(mask: np.ndarray) -> tuple[float, float]:
    """Foreground centroid of a binary mask, normalized to [0, 1]^2.

    cx averages column indices over W-1, cy averages row indices over H-1.
    """
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise ValueError("mask_centroid: mask has no foreground pixels")
    h, w = mask.shape
    cx = float(cols.mean() / (w - 1)) if w > 1 else 0.0
    cy = float(rows.mean() / (h - 1)) if h > 1 else 0.0
    return cx, cy


# ---------------------------------------------------------------------------
# scene sampling


def _sample_scene(rng: np.random.Generator, grid: int) -> tuple[SceneObject, ...]:
    n = int(rng.integers(2, min(4, grid * grid) + 1))
    cells = rng.choice(grid * grid, size=n, replace=False)
    return tuple(
        SceneObject(
            shape=SHAPES[rng.integers(len(SHAPES))],
            color=COLORS[rng.integers(len(COLORS))],
            cell=(int(c) // grid, int(c) % grid),
        )
        for c in cells
    )


def _try_build_spec(
    objects: tuple[SceneObject, ...], relational: bool, rng: np.random.Generator
) -> SceneSpec | None:
    order = rng.permutation(len(objects))
    if not relational:
        for r in order:
            spec = SceneSpec(objects, int(r))
            if matching_objects(spec) == [int(r)]:
                return spec
        return None
    for r in order:
        anchors = [a for a in rng.permutation(len(objects)) if a != r]
        for a in anchors:
            rels = [
                rel for rel in RELATIONS if relation_holds(rel, objects[r], objects[a])
            ]
            for rel in rng.permutation(len(rels)):
                spec = SceneSpec(objects, int(r), rels[rel], int(a))
                if matching_objects(spec) == [int(r)]:
                    return spec
    return None


def generate_dataset(
    seed: int,
    count: int,
    grid: int = 3,
    image_size: int = 64,
    stream: str = "dataset.train",
) -> list[Sample]:
    """Deterministically generate `count` samples for a fixed seed.

    Both expression forms are always present for count >= 2: sample 0 is
    relation-free and sample 1 relational; later samples draw the form at
    random.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if grid < 2:
        raise ValueError(f"grid must be >= 2 (relations are undefinable below), got {grid}")
    if image_size % 16 != 0:
        raise ValueError(f"image_size must be divisible by 16, got {image_size}")

    rng = numpy_rng(seed, stream)
    vocab = build_vocabulary()
    samples = []
    for i in range(count):
        relational = i == 1 if i < 2 else bool(rng.random() < 0.5)
        spec = None
        while spec is None:
            objects = _sample_scene(rng, grid)
            spec = _try_build_spec(objects, relational, rng)
        words = render_expression(spec, rng)
        image, mask = render_scene(spec, grid, image_size)
        samples.append(
            Sample(
                id=i,
                image=image,
                tokens=np.asarray(tokenize(words, vocab), dtype=np.int64),
                mask=mask,
                spec=spec,
                expression=words,
                centroid=mask_centroid(mask),
            )
        )
    return samples


# ---------------------------------------------------------------------------
# on-disk format: samples.jsonl + lossless PNGs (documented in README)


def export_dataset(samples: list[Sample], outdir: str | Path) -> Path:
    outdir = Path(outdir)
    (outdir / "images").mkdir(parents=True, exist_ok=True)
    (outdir / "masks").mkdir(parents=True, exist_ok=True)
    with open(outdir / "samples.jsonl", "w") as fh:
        for s in samples:
            row = {
                "id": s.id,
                "expression": s.expression,
                "token_ids": [int(t) for t in s.tokens],
                "centroid": [s.centroid[0], s.centroid[1]],
                "spec": s.spec.to_dict(),
            }
            fh.write(json.dumps(row) + "\n")
            img = Image.fromarray((s.image * 255.0 + 0.5).astype(np.uint8))
            img.save(outdir / "images" / f"{s.id:05d}.png")
            Image.fromarray(s.mask * 255).save(outdir / "masks" / f"{s.id:05d}.png")
    return outdir


def load_dataset(indir: str | Path) -> list[Sample]:
    indir = Path(indir)
    samples = []
    with open(indir / "samples.jsonl") as fh:
        for line in fh:
            row = json.loads(line)
            sid = row["id"]
            image = np.asarray(
                Image.open(indir / "images" / f"{sid:05d}.png"), dtype=np.float32
            ) / 255.0
            mask = (
                np.asarray(Image.open(indir / "masks" / f"{sid:05d}.png")) > 127
            ).astype(np.uint8)
            samples.append(
                Sample(
                    id=sid,
                    image=image,
                    tokens=np.asarray(row["token_ids"], dtype=np.int64),
                    mask=mask,
                    spec=SceneSpec.from_dict(row["spec"]),
                    expression=row["expression"],
                    centroid=tuple(row["centroid"]),
                )
            )
    return samples
