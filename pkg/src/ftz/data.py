"""Deterministic synthetic shape scenes with caption / count / exist questions."""
from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .mllm import COLORS, SHAPES, Tokenizer
from .rng import Rng, derive_seed

IMAGE_SIZE = 32
BACKGROUND = (24, 24, 24)
PALETTE = {
    "red": (230, 40, 40),
    "green": (40, 200, 60),
    "blue": (50, 80, 235),
    "yellow": (235, 225, 40),
    "magenta": (220, 50, 220),
    "cyan": (40, 220, 225),
}
TASKS = ("caption", "count", "exist")
RADII = (3, 4, 5)
MAX_PLACEMENT_TRIES = 1000
_SPLIT_CODES = {"train": 1, "eval": 2}
FORMAT = "ftz-synth-1"


class GenerationError(ValueError):
    """A shape does not fit inside the raster."""


@dataclass(frozen=True)
class Shape:
    kind: str
    color: str
    cx: int
    cy: int
    radius: int

    def to_dict(self):
        return {"kind": self.kind, "color": self.color, "cx": self.cx, "cy": self.cy, "radius": self.radius}


@dataclass
class SyntheticSample:
    image: np.ndarray  # [32, 32, 3] uint8
    question_ids: list
    answer_ids: list
    task: str
    meta: list = field(default_factory=list)

    def text_ids(self, tokenizer: Tokenizer) -> list:
        return [tokenizer.bos, *self.question_ids, *self.answer_ids, tokenizer.eos]


@dataclass
class SyntheticDataset:
    samples: list
    seed: int
    split: str
    vocab_fingerprint: str

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.samples]) if self.samples else np.zeros((0, IMAGE_SIZE, IMAGE_SIZE, 3), np.uint8)

    def subset(self, idx) -> "SyntheticDataset":
        return SyntheticDataset([self.samples[i] for i in idx], self.seed, self.split, self.vocab_fingerprint)


# ---------------------------------------------------------------------------
# rendering


def shape_mask(shape: Shape, size: int = IMAGE_SIZE) -> np.ndarray:
    """Pixel mask of a shape inscribed in the disc of ``radius`` around its center."""
    ys, xs = np.mgrid[0:size, 0:size]
    dx, dy = xs - shape.cx, ys - shape.cy
    r = shape.radius
    if shape.kind == "circle":
        return dx * dx + dy * dy <= r * r
    if shape.kind == "square":
        # half side r/sqrt(2): 2*dx^2 <= r^2 per axis
        return (2 * dx * dx <= r * r) & (2 * dy * dy <= r * r)
    if shape.kind == "triangle":
        # upward equilateral triangle with circumradius r; three half-plane tests
        h = math.sqrt(3.0) / 2.0
        verts = [(0.0, -r), (-h * r, r / 2.0), (h * r, r / 2.0)]
        inside = np.ones((size, size), dtype=bool)
        for (x0, y0), (x1, y1) in zip(verts, verts[1:] + verts[:1]):
            cross = (x1 - x0) * (dy - y0) - (y1 - y0) * (dx - x0)
            inside &= cross <= 1e-9
        return inside
    raise GenerationError(f"unknown shape kind {shape.kind!r}")


def render(meta, size: int = IMAGE_SIZE) -> np.ndarray:
    """Rasterize shapes over a uniform background; no anti-aliasing."""
    img = np.empty((size, size, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    for s in meta:
        if isinstance(s, dict):
            s = Shape(**s)
        if s.cx - s.radius < 0 or s.cy - s.radius < 0 or s.cx + s.radius >= size or s.cy + s.radius >= size:
            raise GenerationError(f"shape {s} exceeds the {size}x{size} raster")
        img[shape_mask(s, size)] = PALETTE[s.color]
    return img


# ---------------------------------------------------------------------------
# scenes and questions


def _place_scene(rng: Rng, n_shapes: int):
    shapes = []
    for _ in range(n_shapes):
        for _try in range(MAX_PLACEMENT_TRIES):
            r = rng.choice(RADII)
            cx = r + rng.integers(IMAGE_SIZE - 2 * r)
            cy = r + rng.integers(IMAGE_SIZE - 2 * r)
            if all((cx - o.cx) ** 2 + (cy - o.cy) ** 2 > (r + o.radius) ** 2 for o in shapes):
                shapes.append(Shape(rng.choice(SHAPES), rng.choice(COLORS), cx, cy, r))
                break
        else:
            return None
    return shapes


def make_scene(seed: int):
    """Place 1-6 non-overlapping shapes; retries with a fresh sub-seed if placement fails."""
    attempt = 0
    while True:
        rng = Rng(derive_seed(seed, "scene", attempt))
        n_shapes = 1 + rng.integers(6)
        shapes = _place_scene(rng, n_shapes)
        if shapes is not None:
            return shapes, rng
        attempt += 1


def count_kind(meta, kind: str) -> int:
    return sum(1 for s in meta if s.kind == kind)


def caption_target(meta):
    """(color, kind, count) of the largest shape's group; first listed wins ties."""
    big = max(meta, key=lambda s: s.radius)
    n = sum(1 for s in meta if s.kind == big.kind and s.color == big.color)
    return big.color, big.kind, n


def scene_slots(meta, tokenizer: Tokenizer, grid: int, num_slots: int, vocab_size: int,
                offset: int = 0, size: int = IMAGE_SIZE) -> np.ndarray:
    """Bag-of-tokens matrix [num_slots, vocab_size] placing each shape's color and kind ids
    in the slot of the patch holding its center.

    Slots are spread evenly when ``num_slots`` is a multiple of the patch
    count (e.g. two tokens per patch); ``offset`` skips leading slots.
    """
    out = np.zeros((num_slots, vocab_size), dtype=np.float64)
    stride = max(1, (num_slots - offset) // (grid * grid))
    cell = size // grid
    for s in meta:
        p = offset + stride * ((s.cy // cell) * grid + s.cx // cell)
        if p < num_slots:
            out[p, tokenizer.ids[s.color]] += 1.0
            out[p, tokenizer.ids[s.kind]] += 1.0
    return out


def make_question(task: str, meta, rng: Rng, exist_yes: bool | None = None):
    if task == "caption":
        color, kind, n = caption_target(meta)
        return "describe ?", f"there are {n} {color} {kind}"
    if task == "count":
        kind = rng.choice(SHAPES)
        return f"how many {kind} ?", str(count_kind(meta, kind))
    if task == "exist":
        present = sorted({(s.color, s.kind) for s in meta})
        if exist_yes:
            color, kind = present[rng.integers(len(present))]
        else:
            absent = [(c, k) for c in COLORS for k in SHAPES if (c, k) not in present]
            color, kind = absent[rng.integers(len(absent))]
        return f"is there a {color} {kind} ?", "yes" if exist_yes else "no"
    raise ConfigError(f"unknown task {task!r}")


def make_sample(seed: int, split: str, index: int, tokenizer: Tokenizer, tasks=TASKS) -> SyntheticSample:
    """Sample ``index`` of a split: task cycles through ``tasks``; exist answers alternate yes/no."""
    tasks = tuple(tasks)
    if split not in _SPLIT_CODES:
        raise ConfigError(f"split must be 'train' or 'eval', got {split!r}")
    sub = derive_seed(seed, "split", _SPLIT_CODES[split], "sample", index)
    meta, rng = make_scene(sub)
    task = tasks[index % len(tasks)]
    exist_yes = None
    if task == "exist":
        cycles, rem = divmod(index, len(tasks))
        exist_rank = cycles * tasks.count("exist") + tasks[:rem].count("exist")
        exist_yes = exist_rank % 2 == 0
    q, a = make_question(task, meta, rng, exist_yes)
    return SyntheticSample(render(meta), tokenizer.encode(q), tokenizer.encode(a), task, meta)


def generate_dataset(seed: int, n: int, split: str, tokenizer: Tokenizer | None = None, tasks=TASKS) -> SyntheticDataset:
    """Pure function of (seed, n, split, tasks)."""
    if n < 1:
        raise ConfigError("dataset size n must be >= 1")
    tokenizer = tokenizer or Tokenizer()
    tasks = tuple(tasks)
    for t in tasks:
        if t not in TASKS:
            raise ConfigError(f"unknown task {t!r}")
    samples = [make_sample(seed, split, i, tokenizer, tasks) for i in range(n)]
    return SyntheticDataset(samples, int(seed), split, tokenizer.fingerprint)


# ---------------------------------------------------------------------------
# file format: JSON lines, header first


def save_dataset(ds: SyntheticDataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        header = {"format": FORMAT, "seed": ds.seed, "split": ds.split, "n": len(ds),
                  "vocab_sha256": ds.vocab_fingerprint}
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for s in ds.samples:
            rec = {
                "task": s.task,
                "question_ids": [int(i) for i in s.question_ids],
                "answer_ids": [int(i) for i in s.answer_ids],
                "meta": [m.to_dict() for m in s.meta],
                "image": base64.b64encode(np.ascontiguousarray(s.image).tobytes()).decode("ascii"),
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_dataset(path) -> SyntheticDataset:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != FORMAT:
            raise ConfigError(f"{path}: not a {FORMAT} dataset")
        samples = []
        for line in fh:
            rec = json.loads(line)
            img = np.frombuffer(base64.b64decode(rec["image"]), dtype=np.uint8).reshape(IMAGE_SIZE, IMAGE_SIZE, 3)
            samples.append(SyntheticSample(img.copy(), rec["question_ids"], rec["answer_ids"], rec["task"],
                                           [Shape(**m) for m in rec["meta"]]))
    return SyntheticDataset(samples, header["seed"], header["split"], header["vocab_sha256"])
