"""Deterministic synthetic referring-segmentation scenes.

Each sample is a grid of cells holding colored block-art shapes, a target
object, the shortest expression from the grammar

    <color> <shape> [<relation> <color> <shape>]

that picks out exactly that object, and the target's pixel mask. Shapes
are rasterized on an 8-pixel block lattice so that a stride-8 mask head
can represent every ground-truth mask exactly; cells are 32px, which is a
4x4 block canvas per shape. Everything is a pure function of
(seed, data spec), so any sample can be regenerated bitwise.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .config import Config
from .encoders import TokenSeq
from .errors import ContractError, DimensionError, GenerationError
from .rng import Stream, derive_key

VOCAB = [
    "<g>", "<pad>",
    "red", "green", "blue", "yellow",
    "circle", "square", "triangle",
    "left", "right", "above", "below", "of",
]
VOCAB_SIZE = len(VOCAB)
TOKEN_ID = {word: i for i, word in enumerate(VOCAB)}

COLORS = ["red", "green", "blue", "yellow"]
SHAPES = ["circle", "square", "triangle"]
RELATIONS = ["left", "right", "above", "below"]

COLOR_RGB = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.75, 0.15),
    "blue": (0.15, 0.25, 0.90),
    "yellow": (0.90, 0.85, 0.10),
}
BACKGROUND = 0.15
BLOCK = 8          # mask lattice pitch in pixels
CELL = 32          # cell side; 4x4 blocks per cell

# Shape silhouettes as block offsets on the 4x4 per-cell canvas.
_SHAPE_BLOCKS = {
    "square": [(r, c) for r in range(4) for c in range(4)],
    "circle": [(r, c) for r in range(4) for c in range(4)
               if (r, c) not in {(0, 0), (0, 3), (3, 0), (3, 3)}],
    "triangle": [(r, c) for r in range(4) for c in range(r + 1)],
}


@dataclass(frozen=True)
class PlacedObject:
    color: str
    shape: str
    row: int
    col: int


@dataclass
class SampleRecord:
    image: np.ndarray       # [H, W, 3] float32 in [0, 1]
    tokens: TokenSeq
    gt_mask: np.ndarray     # [H, W] uint8 in {0, 1}
    seed: int
    scene: list[PlacedObject]
    target_index: int
    text: str


@dataclass(frozen=True)
class Expression:
    color: str
    shape: str
    relation: str | None = None
    anchor_color: str | None = None
    anchor_shape: str | None = None

    def words(self) -> list[str]:
        out = [self.color, self.shape]
        if self.relation is not None:
            out.append(self.relation)
            if self.relation in ("left", "right"):
                out.append("of")
            out += [self.anchor_color, self.anchor_shape]
        return out

    def text(self) -> str:
        return " ".join(self.words())


def _relation_holds(relation: str, subject: PlacedObject, anchor: PlacedObject) -> bool:
    if relation == "left":
        return subject.col < anchor.col
    if relation == "right":
        return subject.col > anchor.col
    if relation == "above":
        return subject.row < anchor.row
    if relation == "below":
        return subject.row > anchor.row
    raise ContractError(f"unknown relation {relation!r}")


def referents(expression: Expression, scene: list[PlacedObject]) -> list[int]:
    """Indices of scene objects the expression describes (brute force)."""
    out = []
    for i, obj in enumerate(scene):
        if obj.color != expression.color or obj.shape != expression.shape:
            continue
        if expression.relation is None:
            out.append(i)
            continue
        anchored = any(
            other.color == expression.anchor_color
            and other.shape == expression.anchor_shape
            and _relation_holds(expression.relation, obj, other)
            for j, other in enumerate(scene) if j != i
        )
        if anchored:
            out.append(i)
    return out


def _shortest_expression(scene: list[PlacedObject], target_index: int) -> Expression | None:
    target = scene[target_index]
    plain = Expression(target.color, target.shape)
    if referents(plain, scene) == [target_index]:
        return plain
    anchor_types = sorted({(o.color, o.shape) for i, o in enumerate(scene) if i != target_index})
    for relation in RELATIONS:
        for anchor_color, anchor_shape in anchor_types:
            candidate = Expression(target.color, target.shape, relation, anchor_color, anchor_shape)
            if referents(candidate, scene) == [target_index]:
                return candidate
    return None


def _render(scene: list[PlacedObject], target_index: int, image_size: int,
            stream: Stream) -> tuple[np.ndarray, np.ndarray]:
    image = np.full((image_size, image_size, 3), BACKGROUND, dtype=np.float32)
    mask = np.zeros((image_size, image_size), dtype=np.uint8)
    for i, obj in enumerate(scene):
        shade = float(stream.uniform((), 0.85, 1.0))
        rgb = np.array(COLOR_RGB[obj.color], dtype=np.float32) * shade
        oy, ox = obj.row * CELL, obj.col * CELL
        for br, bc in _SHAPE_BLOCKS[obj.shape]:
            y0, x0 = oy + br * BLOCK, ox + bc * BLOCK
            image[y0:y0 + BLOCK, x0:x0 + BLOCK] = rgb
            if i == target_index:
                mask[y0:y0 + BLOCK, x0:x0 + BLOCK] = 1
    return image, mask


def gen_sample(seed: int, config: Config, max_attempts: int = 64) -> SampleRecord:
    """Generate one scene whose expression picks out exactly one object."""
    if config.image_size != config.grid_cells * CELL:
        raise DimensionError(
            f"image_size {config.image_size} must equal grid_cells*{CELL} "
            f"({config.grid_cells * CELL}) for the block-art renderer")
    base = Stream.from_seed(seed)
    for attempt in range(max_attempts):
        stream = base.split(attempt)
        count = stream.integers(config.min_objects, config.max_objects + 1)
        cells = [(r, c) for r in range(config.grid_cells) for c in range(config.grid_cells)]
        cells = stream.shuffle(cells)[:count]
        scene = [
            PlacedObject(color=stream.choice(COLORS), shape=stream.choice(SHAPES),
                         row=r, col=c)
            for r, c in cells
        ]
        target_index = stream.integers(0, count)
        expression = _shortest_expression(scene, target_index)
        if expression is None:
            continue
        image, mask = _render(scene, target_index, config.image_size, stream)
        tokens = TokenSeq.from_ids([TOKEN_ID[w] for w in expression.words()], config.max_len)
        return SampleRecord(image=image, tokens=tokens, gt_mask=mask, seed=seed,
                            scene=scene, target_index=target_index, text=expression.text())
    raise GenerationError(f"no unambiguous scene found for seed {seed} "
                          f"after {max_attempts} attempts")


def sample_seed(data_seed: int, split: str, index: int) -> int:
    """Per-sample seed derived from the data seed and split identity."""
    split_id = {"train": 0, "val": 1, "test": 2, "overfit": 3}.get(split)
    if split_id is None:
        raise ContractError(f"unknown split {split!r}")
    return derive_key(data_seed, split_id, index)


def gen_split(config: Config, split: str, size: int) -> list[SampleRecord]:
    return [gen_sample(sample_seed(config.data_seed, split, i), config) for i in range(size)]


# ---------------------------------------------------------------------------
# on-disk dataset format
# ---------------------------------------------------------------------------

def _write_pnm(path: str, magic: bytes, payload: np.ndarray, width: int, height: int):
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (width, height))
        fh.write(payload.tobytes())


def _read_pnm(path: str) -> tuple[bytes, int, int, bytes]:
    with open(path, "rb") as fh:
        blob = fh.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    pos += 1  # single whitespace after maxval
    magic, width, height, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ContractError(f"{path}: expected 8-bit data, got maxval {maxval}")
    return magic, width, height, blob[pos:]


def export_split(samples: list[SampleRecord], out_dir: str):
    """Write images (P6 color), masks (P5, 0/255) and an expressions manifest.

    Image files keep the NNN.pgm naming with P6 color payloads.
    """
    images_dir = os.path.join(out_dir, "images")
    masks_dir = os.path.join(out_dir, "masks")
    os.makedirs(images_dir, exist_ok=True)
    os.makedirs(masks_dir, exist_ok=True)
    manifest = os.path.join(out_dir, "expressions.jsonl")
    with open(manifest, "w", encoding="utf-8") as fh:
        for i, sample in enumerate(samples):
            stem = str(i).zfill(3) + ".pgm"
            h, w = sample.gt_mask.shape
            rgb = np.clip(np.rint(sample.image * 255.0), 0, 255).astype(np.uint8)
            _write_pnm(os.path.join(images_dir, stem), b"P6", rgb, w, h)
            _write_pnm(os.path.join(masks_dir, stem), b"P5", sample.gt_mask * np.uint8(255), w, h)
            record = {
                "id": i,
                "token_ids": [int(t) for t in sample.tokens.ids[:sample.tokens.length]],
                "text": sample.text,
                "seed": int(sample.seed),
            }
            fh.write(json.dumps(record) + "\n")


def load_split(split_dir: str, max_len: int = 20) -> list[SampleRecord]:
    """Read back a split exported by `export_split`."""
    manifest = os.path.join(split_dir, "expressions.jsonl")
    if not os.path.exists(manifest):
        raise ContractError(f"not a dataset split (no expressions.jsonl): {split_dir}")
    samples = []
    with open(manifest, "r", encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            stem = str(rec["id"]).zfill(3) + ".pgm"
            magic, w, h, payload = _read_pnm(os.path.join(split_dir, "images", stem))
            if magic != b"P6":
                raise ContractError(f"image {stem} is not a P6 stream")
            image = np.frombuffer(payload, dtype=np.uint8, count=h * w * 3).reshape(h, w, 3)
            magic, w2, h2, payload = _read_pnm(os.path.join(split_dir, "masks", stem))
            if magic != b"P5":
                raise ContractError(f"mask {stem} is not a P5 stream")
            mask = np.frombuffer(payload, dtype=np.uint8, count=h2 * w2).reshape(h2, w2)
            word_ids = rec["token_ids"][1:]  # position 0 is the global slot
            samples.append(SampleRecord(
                image=(image.astype(np.float32) / 255.0),
                tokens=TokenSeq.from_ids(word_ids, max_len),
                gt_mask=(mask > 127).astype(np.uint8),
                seed=int(rec["seed"]),
                scene=[],
                target_index=-1,
                text=rec["text"],
            ))
    return samples
