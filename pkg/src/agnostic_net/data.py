"""Synthetic confounded images: shapes (the target concept) drawn over
procedural textures (the protected/contextual concept).

Target examples carry a shape label (0 = filled disc, 1 = filled square), a
background label (0 = horizontal stripes, 1 = checkerboard) and an exact
object mask.  Context-only examples are bare backgrounds with a background
label and no target label.  ``rho`` is the probability that a shape of
class k sits on background k.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .pgm import read_pgm, write_pgm
from .tensor import Tensor

SPLITS = ("target_train", "context_train", "target_test_iid", "target_test_swapped", "context_test")
NO_LABEL = -1


@dataclass(frozen=True)
class DatasetSpec:
    n_target_per_class: int = 500
    n_context_per_class: int = 1000
    n_test_per_class: int = 50
    rho: float = 1.0
    image_size: int = 40
    crop_size: int = 32
    noise_level: float = 0.05
    min_radius: float = 6.0
    max_radius: float = 10.0
    texture_contrast: float = 0.08
    fill_low: float = 0.9
    seed: int = 7

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")
        if self.crop_size > self.image_size:
            raise ValueError("crop_size cannot exceed image_size")
        if not 0 < self.min_radius <= self.max_radius:
            raise ValueError("need 0 < min_radius <= max_radius")


@dataclass
class Example:
    image: np.ndarray  # 1 x H x W, values in [0, 1]
    protected_label: int
    target_label: int | None = None
    mask: np.ndarray | None = None  # H x W bool


@dataclass
class Split:
    """Column-wise storage for one split; ``target_labels`` is -1 where absent."""

    images: np.ndarray
    target_labels: np.ndarray
    protected_labels: np.ndarray
    masks: np.ndarray

    def __len__(self) -> int:
        return len(self.protected_labels)

    def __getitem__(self, i: int) -> Example:
        t = int(self.target_labels[i])
        return Example(self.images[i][None], int(self.protected_labels[i]),
                       None if t == NO_LABEL else t, self.masks[i])

    def __iter__(self) -> Iterator[Example]:
        return (self[i] for i in range(len(self)))

    @property
    def has_targets(self) -> bool:
        return bool(len(self)) and bool(np.all(self.target_labels != NO_LABEL))

    @classmethod
    def empty(cls, size: int) -> Split:
        return cls(np.zeros((0, size, size)), np.zeros(0, np.int64), np.zeros(0, np.int64),
                   np.zeros((0, size, size), bool))

    @classmethod
    def from_examples(cls, examples: list[Example], size: int) -> Split:
        if not examples:
            return cls.empty(size)
        images = np.stack([e.image.reshape(size, size) for e in examples])
        targets = np.array([NO_LABEL if e.target_label is None else e.target_label for e in examples])
        protected = np.array([e.protected_label for e in examples])
        masks = np.stack([np.zeros((size, size), bool) if e.mask is None else e.mask.astype(bool)
                          for e in examples])
        return cls(images, targets.astype(np.int64), protected.astype(np.int64), masks)


@dataclass
class Dataset:
    splits: dict[str, Split]
    spec: DatasetSpec | None = None
    image_size: int = 40
    crop_size: int = 32
    extra: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> Split:
        return self.splits[name]

    def __len__(self) -> int:
        return sum(len(s) for s in self.splits.values())


# ----------------------------------------------------------------- drawing


def background(kind: int, size: int, contrast: float, phase: int) -> np.ndarray:
    yy, xx = np.mgrid[:size, :size]
    if kind == 0:
        pattern = (yy + phase) % 2
    else:
        pattern = (yy + xx + phase) % 2
    return 0.5 + contrast * (2.0 * pattern - 1.0)


def shape_mask(kind: int, size: int, cy: float, cx: float, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[:size, :size]
    if kind == 0:
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
    return (np.abs(yy - cy) <= radius) & (np.abs(xx - cx) <= radius)


def _draw(spec: DatasetSpec, rng: np.random.Generator, bg: int, shape: int | None):
    s = spec.image_size
    img = background(bg, s, spec.texture_contrast, int(rng.integers(2)))
    mask = np.zeros((s, s), bool)
    if shape is not None:
        # keep the object inside every possible crop window
        lo, hi = s - spec.crop_size, spec.crop_size - 1
        r = rng.uniform(spec.min_radius, spec.max_radius)
        cy, cx = rng.uniform(lo + r, hi - r, size=2)
        mask = shape_mask(shape, s, cy, cx, r)
        img = np.where(mask, rng.uniform(spec.fill_low, 1.0), img)
    img = img + spec.noise_level * rng.standard_normal((s, s))
    return np.clip(img, 0.0, 1.0), mask


def _target_split(spec: DatasetSpec, rng: np.random.Generator, n_per_class: int, match: float) -> Split:
    shapes, bgs = [], []
    n_match = int(round(match * n_per_class))
    for k in (0, 1):
        shapes += [k] * n_per_class
        bgs += [k] * n_match + [1 - k] * (n_per_class - n_match)
    order = rng.permutation(len(shapes))
    shapes, bgs = np.array(shapes)[order], np.array(bgs)[order]
    drawn = [_draw(spec, rng, int(b), int(k)) for k, b in zip(shapes, bgs)]
    s = spec.image_size
    images = np.stack([d[0] for d in drawn]) if drawn else np.zeros((0, s, s))
    masks = np.stack([d[1] for d in drawn]) if drawn else np.zeros((0, s, s), bool)
    return Split(images, shapes.astype(np.int64), bgs.astype(np.int64), masks)


def _context_split(spec: DatasetSpec, rng: np.random.Generator, n_per_class: int) -> Split:
    bgs = rng.permutation(np.repeat([0, 1], n_per_class))
    drawn = [_draw(spec, rng, int(b), None) for b in bgs]
    s = spec.image_size
    images = np.stack([d[0] for d in drawn]) if drawn else np.zeros((0, s, s))
    return Split(images, np.full(len(bgs), NO_LABEL, np.int64), bgs.astype(np.int64),
                 np.zeros((len(bgs), s, s), bool))


def generate(spec: DatasetSpec) -> Dataset:
    """Build all five splits; a pure function of ``spec``."""
    too_big = 2 * spec.max_radius + 1 > 2 * spec.crop_size - spec.image_size
    if too_big:
        raise ValueError(f"shapes of radius {spec.max_radius} do not fit the "
                         f"{2 * spec.crop_size - spec.image_size}px region shared by all crops")
    seeds = np.random.SeedSequence(spec.seed).spawn(len(SPLITS))
    rngs = dict(zip(SPLITS, (np.random.default_rng(s) for s in seeds)))
    splits = {
        "target_train": _target_split(spec, rngs["target_train"], spec.n_target_per_class, spec.rho),
        "context_train": _context_split(spec, rngs["context_train"], spec.n_context_per_class),
        "target_test_iid": _target_split(spec, rngs["target_test_iid"], spec.n_test_per_class, spec.rho),
        "target_test_swapped": _target_split(spec, rngs["target_test_swapped"], spec.n_test_per_class,
                                             1.0 - spec.rho),
        "context_test": _context_split(spec, rngs["context_test"], spec.n_test_per_class),
    }
    return Dataset(splits, spec, spec.image_size, spec.crop_size)


# ------------------------------------------------------------ augmentation


def crop_images(images: np.ndarray, masks: np.ndarray | None, out_size: int,
                rng: np.random.Generator | None = None):
    """Random crop + horizontal flip when ``rng`` is given, centre crop otherwise.

    ``images`` is M x S x S; returns (M x out x out images, masks or None).
    """
    m, s = images.shape[0], images.shape[-1]
    if out_size > s:
        raise ValueError(f"crop size {out_size} exceeds image size {s}")
    if rng is None:
        o = (s - out_size) // 2
        sl = (slice(None), slice(o, o + out_size), slice(o, o + out_size))
        return images[sl].copy(), None if masks is None else masks[sl].copy()
    oy = rng.integers(0, s - out_size + 1, size=m)
    ox = rng.integers(0, s - out_size + 1, size=m)
    flip = rng.random(m) < 0.5
    out = np.empty((m, out_size, out_size))
    out_masks = None if masks is None else np.empty((m, out_size, out_size), bool)
    for i in range(m):
        win = (slice(oy[i], oy[i] + out_size), slice(ox[i], ox[i] + out_size))
        img = images[i][win]
        out[i] = img[:, ::-1] if flip[i] else img
        if masks is not None:
            mk = masks[i][win]
            out_masks[i] = mk[:, ::-1] if flip[i] else mk
    return out, out_masks


def augment(ex: Example, out_size: int, rng: np.random.Generator | None = None) -> Example:
    """Crop (random in train mode, centre when ``rng`` is None) and maybe flip."""
    mask = ex.mask if ex.mask is not None else np.zeros(ex.image.shape[-2:], bool)
    img, mk = crop_images(ex.image.reshape(1, *ex.image.shape[-2:]), mask[None], out_size, rng)
    return Example(img, ex.protected_label, ex.target_label, mk[0])


def hflip(ex: Example) -> Example:
    return Example(ex.image[..., ::-1].copy(), ex.protected_label, ex.target_label,
                   None if ex.mask is None else ex.mask[:, ::-1].copy())


# ---------------------------------------------------------------- batching


@dataclass
class LabeledBatch:
    """Target-labelled rows come first; ``target_labels`` covers only those."""

    images: Tensor
    target_labels: np.ndarray
    protected_labels: np.ndarray

    @property
    def n_target(self) -> int:
        return len(self.target_labels)

    def __len__(self) -> int:
        return len(self.protected_labels)


def batch_indices(n_target: int, n_context: int, batch_size: int, seed: int, epoch: int):
    """Stratified shuffled index pairs (target_idx, context_idx) per batch."""
    total = n_target + n_context
    if total == 0:
        return []
    rng = np.random.default_rng([seed, epoch])
    t_perm, c_perm = rng.permutation(n_target), rng.permutation(n_context)
    out = []
    t_prev = 0
    for start in range(0, total, batch_size):
        end = min(start + batch_size, total)
        t_next = int(round(n_target * end / total))
        t_idx = t_perm[t_prev:t_next]
        c_idx = c_perm[start - t_prev:end - t_next]
        out.append((t_idx, c_idx))
        t_prev = t_next
    return out


def batches(dataset: Dataset, batch_size: int, seed: int, epoch: int, augment: bool = True,
            crop_size: int | None = None) -> list[LabeledBatch]:
    """Seeded, stratified mini-batches over target_train + context_train."""
    tgt, ctx = dataset["target_train"], dataset["context_train"]
    crop = crop_size or dataset.crop_size
    aug_rng = np.random.default_rng([seed, epoch, 1]) if augment else None
    out = []
    for t_idx, c_idx in batch_indices(len(tgt), len(ctx), batch_size, seed, epoch):
        images = np.concatenate([tgt.images[t_idx], ctx.images[c_idx]])
        images, _ = crop_images(images, None, crop, aug_rng)
        out.append(LabeledBatch(
            Tensor(images[:, None]),
            tgt.target_labels[t_idx].copy(),
            np.concatenate([tgt.protected_labels[t_idx], ctx.protected_labels[c_idx]]),
        ))
    return out


def eval_images(split: Split, crop_size: int) -> np.ndarray:
    """Centre-cropped N x 1 x c x c array for evaluation."""
    return crop_images(split.images, None, crop_size)[0][:, None]


# ----------------------------------------------------------------------- io

MANIFEST = "manifest.csv"


def save_dataset(dataset: Dataset, root) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for name in SPLITS:
        split = dataset.splits.get(name)
        if split is None or not len(split):
            continue
        (root / name).mkdir(exist_ok=True)
        for i in range(len(split)):
            rel = f"{name}/{i:05d}.pgm"
            write_pgm(root / rel, split.images[i])
            t = int(split.target_labels[i])
            if t != NO_LABEL:
                write_pgm(root / rel.replace(".pgm", ".mask.pgm"), split.masks[i].astype(float))
            rows.append([rel, "-" if t == NO_LABEL else str(t), str(int(split.protected_labels[i])), name])
    with open(root / MANIFEST, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["filename", "target_label", "protected_label", "split"])
        w.writerows(rows)
    meta = {"image_size": dataset.image_size, "crop_size": dataset.crop_size}
    if dataset.spec is not None:
        meta["spec"] = asdict(dataset.spec)
    (root / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_dataset(root) -> Dataset:
    """Inverse of :func:`save_dataset`; an empty directory gives an empty dataset."""
    root = Path(root)
    meta = {}
    if (root / "dataset.json").exists():
        meta = json.loads((root / "dataset.json").read_text())
    spec = DatasetSpec(**meta["spec"]) if "spec" in meta else None
    size = meta.get("image_size", 40)
    crop = meta.get("crop_size", 32)
    examples: dict[str, list[Example]] = {name: [] for name in SPLITS}
    manifest = root / MANIFEST
    if manifest.exists():
        with open(manifest, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is not None and [h.strip() for h in header] != ["filename", "target_label",
                                                                       "protected_label", "split"]:
                raise ValueError(f"{manifest}:1: unexpected header {header}")
            for lineno, row in enumerate(reader, 2):
                if not row:
                    continue
                try:
                    fname, target, protected, split = (c.strip() for c in row)
                    t = None if target == "-" else int(target)
                    p = int(protected)
                except ValueError:
                    raise ValueError(f"{manifest}:{lineno}: malformed row {row}") from None
                if split not in examples:
                    raise ValueError(f"{manifest}:{lineno}: unknown split {split!r}")
                image = read_pgm(root / fname)
                size = image.shape[0]
                mask_path = root / fname.replace(".pgm", ".mask.pgm")
                mask = read_pgm(mask_path) > 0.5 if mask_path.exists() else np.zeros(image.shape, bool)
                examples[split].append(Example(image[None], p, t, mask))
    splits = {name: Split.from_examples(ex, size) for name, ex in examples.items()}
    return Dataset(splits, spec, size, crop)
