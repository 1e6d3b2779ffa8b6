"""Labeled face-attribute data: ingestion, skewed/balanced composition,
synthetic biased images and mini-batch iteration.

Images are held as ``uint8`` arrays of shape ``[N, 3, 64, 64]`` and converted
to float tensors in ``[-1, 1]`` only when a batch is drawn.
"""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch

from .errors import (
    CorruptAnnotation,
    EmptyDataset,
    InsufficientRecords,
    InvalidSpec,
    MissingImageFile,
    MissingLabel,
    UnknownAttribute,
)

IMAGE_SIZE = 64
CELLS = ((1, 1), (1, 0), (0, 1), (0, 0))
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class AttributePair:
    """Target/protected attribute names plus the raw value that maps to 1."""

    target_name: str
    protected_name: str
    target_positive: int = 1
    protected_positive: int = 1

    def __post_init__(self):
        if self.target_name == self.protected_name:
            raise InvalidSpec(
                f"target and protected attribute must differ, got {self.target_name!r} twice"
            )
        for v in (self.target_positive, self.protected_positive):
            if v not in (0, 1):
                raise InvalidSpec(f"polarity must be 0 or 1, got {v!r}")


# pairs studied on CelebA, as (target, protected)
CELEBA_PAIRS = (
    AttributePair("Attractive", "Male"),
    AttributePair("Wavy_Hair", "Male"),
    AttributePair("Attractive", "Young"),
    AttributePair("Big_Nose", "Young"),
)


@dataclass(frozen=True)
class Record:
    record_id: str
    target: int
    protected: int
    path: Optional[Path] = None


@dataclass
class CompositionSpec:
    """Per-cell record counts keyed by ``(target, protected)``."""

    train: dict
    val: dict
    test: dict
    seed: int = 0

    def __post_init__(self):
        for name in SPLITS:
            counts = getattr(self, name)
            counts = {tuple(int(v) for v in k): int(n) for k, n in counts.items()}
            for cell in CELLS:
                counts.setdefault(cell, 0)
            if set(counts) != set(CELLS):
                raise InvalidSpec(f"{name}: unknown cells {sorted(set(counts) - set(CELLS))}")
            if any(n < 0 for n in counts.values()):
                raise InvalidSpec(f"{name}: negative cell count")
            if name != "train" and len(set(counts.values())) > 1:
                raise InvalidSpec(f"{name} split must be balanced, got {counts}")
            setattr(self, name, counts)

    def cell_total(self, cell) -> int:
        return sum(getattr(self, name)[cell] for name in SPLITS)

    @classmethod
    def skewed(cls, n_major: int, n_minor: int, n_eval_cell: int,
               agree_major: bool = True, seed: int = 0) -> "CompositionSpec":
        """Train cells where target and protected agree get ``n_major`` records
        (or disagree, when ``agree_major`` is false); eval cells are balanced."""
        hi, lo = (n_major, n_minor) if agree_major else (n_minor, n_major)
        train = {(1, 1): hi, (0, 0): hi, (1, 0): lo, (0, 1): lo}
        ev = {c: n_eval_cell for c in CELLS}
        return cls(train=train, val=dict(ev), test=dict(ev), seed=seed)

    @classmethod
    def utk(cls, target: str = "ethnicity", seed: int = 0) -> "CompositionSpec":
        """UTK Face composition; protected attribute is gender.

        Caucasians are mostly male, young people mostly female.
        """
        if target not in ("ethnicity", "age"):
            raise InvalidSpec(f"UTK target must be 'ethnicity' or 'age', got {target!r}")
        return cls.skewed(4000, 1000, 600, agree_major=(target == "ethnicity"), seed=seed)

    def to_dict(self) -> dict:
        fmt = lambda counts: {f"{t}{p}": counts[(t, p)] for t, p in CELLS}
        return {"train": fmt(self.train), "val": fmt(self.val), "test": fmt(self.test),
                "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "CompositionSpec":
        parse = lambda counts: {(int(k[0]), int(k[1])): v for k, v in counts.items()}
        try:
            return cls(train=parse(d["train"]), val=parse(d["val"]), test=parse(d["test"]),
                       seed=int(d.get("seed", 0)))
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise InvalidSpec(f"malformed composition section: {exc}") from exc


def _order_key(seed: int, record_id: str) -> bytes:
    return hashlib.blake2b(f"{seed}:{record_id}".encode(), digest_size=16).digest()


def compose_split(records: Sequence[Record], spec: CompositionSpec):
    """Draw train/val/test record lists with exact per-cell counts.

    Records of each cell are ordered by a seeded hash of their id and taken
    as consecutive prefixes (train, then val, then test). The result does not
    depend on input order, and growing the record pool keeps the relative
    order of the records it already had.
    """
    by_cell = {c: [] for c in CELLS}
    for rec in records:
        if rec.target is None or rec.protected is None:
            raise MissingLabel(f"record {rec.record_id!r} lacks a label")
        cell = (int(rec.target), int(rec.protected))
        if cell not in by_cell:
            raise MissingLabel(f"record {rec.record_id!r} has non-binary labels {cell}")
        by_cell[cell].append(rec)

    out = {name: [] for name in SPLITS}
    for cell, recs in by_cell.items():
        need = spec.cell_total(cell)
        if len(recs) < need:
            raise InsufficientRecords(
                f"cell (target={cell[0]}, protected={cell[1]}) has {len(recs)} records, "
                f"{need} required"
            )
        recs = sorted(recs, key=lambda r: _order_key(spec.seed, r.record_id))
        start = 0
        for name in SPLITS:
            n = getattr(spec, name)[cell]
            out[name].extend(recs[start:start + n])
            start += n
    for name in SPLITS:
        out[name].sort(key=lambda r: _order_key(spec.seed + 1, r.record_id))
    return out["train"], out["val"], out["test"]


# ---------------------------------------------------------------------------
# on-disk datasets


def _read_csv(path: Path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CorruptAnnotation(f"{path}: empty file (line 1)")
    return rows[0], rows[1:]


def load_attribute_dataset(root, pair: AttributePair, split: Optional[str] = None) -> list:
    """Read ``<root>/annotations.csv`` into records for one attribute pair.

    When ``split`` is given, ``<root>/partition.csv`` (columns ``file,split``)
    selects the records of that partition.
    """
    if pair.target_name == pair.protected_name:
        raise InvalidSpec("target and protected attribute must differ")
    root = Path(root)
    header, rows = _read_csv(root / "annotations.csv")
    header = [h.strip() for h in header]
    if not header or header[0] != "file":
        raise CorruptAnnotation(f"{root / 'annotations.csv'}: header must start with 'file' (line 1)")
    cols = {}
    for name in (pair.target_name, pair.protected_name):
        if name not in header:
            raise UnknownAttribute(f"attribute {name!r} not in annotation header")
        cols[name] = header.index(name)

    wanted = None
    if split is not None:
        if split not in SPLITS:
            raise InvalidSpec(f"split must be one of {SPLITS}, got {split!r}")
        part_path = root / "partition.csv"
        if not part_path.exists():
            raise CorruptAnnotation(f"{part_path}: missing, cannot select split {split!r}")
        _, prow = _read_csv(part_path)
        wanted = set()
        for lineno, row in enumerate(prow, start=2):
            if len(row) != 2 or row[1].strip() not in SPLITS:
                raise CorruptAnnotation(f"{part_path}: bad row at line {lineno}: {row}")
            if row[1].strip() == split:
                wanted.add(row[0].strip())

    records = []
    for lineno, row in enumerate(rows, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise CorruptAnnotation(
                f"{root / 'annotations.csv'}: expected {len(header)} fields at line {lineno}, got {len(row)}"
            )
        fname = row[0].strip()
        if wanted is not None and fname not in wanted:
            continue
        labels = []
        for name, pos in ((pair.target_name, pair.target_positive),
                          (pair.protected_name, pair.protected_positive)):
            raw = row[cols[name]].strip()
            if raw not in ("0", "1"):
                raise CorruptAnnotation(
                    f"{root / 'annotations.csv'}: value {raw!r} for {name} at line {lineno} not in {{0,1}}"
                )
            labels.append(int(int(raw) == pos))
        path = root / "images" / fname
        if not path.is_file():
            raise MissingImageFile(f"{path} (annotation line {lineno})")
        records.append(Record(fname, labels[0], labels[1], path))
    return records


def load_image(path: Path) -> np.ndarray:
    """Center-crop to a square, bilinear-resize to 64x64; uint8 ``[3, 64, 64]``."""
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("RGB")
        w, h = im.size
        s = min(w, h)
        left, top = (w - s) // 2, (h - s) // 2
        im = im.crop((left, top, left + s, top + s))
        im = im.resize((IMAGE_SIZE, IMAGE_SIZE), Image.BILINEAR)
        return np.asarray(im, dtype=np.uint8).transpose(2, 0, 1).copy()


# ---------------------------------------------------------------------------
# in-memory datasets


@dataclass(frozen=True)
class ImageDataset:
    """Immutable image collection with binary target/protected labels."""

    images: np.ndarray  # uint8 [N, 3, 64, 64]
    target: np.ndarray  # int64 [N]
    protected: np.ndarray  # int64 [N]
    ids: tuple = field(default=())

    def __post_init__(self):
        n = len(self.images)
        if self.images.shape[1:] != (3, IMAGE_SIZE, IMAGE_SIZE) or self.images.dtype != np.uint8:
            raise InvalidSpec(f"images must be uint8 [N,3,64,64], got {self.images.dtype} {self.images.shape}")
        if len(self.target) != n or len(self.protected) != n:
            raise InvalidSpec("label vectors must match image count")
        for arr in (self.target, self.protected):
            if n and not np.isin(arr, (0, 1)).all():
                raise InvalidSpec("labels must be 0/1")
        if not self.ids:
            object.__setattr__(self, "ids", tuple(str(i) for i in range(n)))
        for arr in (self.images, self.target, self.protected):
            arr.setflags(write=False)

    def __len__(self):
        return len(self.images)

    @classmethod
    def from_records(cls, records: Sequence[Record]) -> "ImageDataset":
        images = np.zeros((len(records), 3, IMAGE_SIZE, IMAGE_SIZE), dtype=np.uint8)
        for i, rec in enumerate(records):
            if rec.path is None or not Path(rec.path).is_file():
                raise MissingImageFile(f"record {rec.record_id!r}: {rec.path}")
            images[i] = load_image(rec.path)
        return cls(
            images,
            np.array([r.target for r in records], dtype=np.int64),
            np.array([r.protected for r in records], dtype=np.int64),
            tuple(r.record_id for r in records),
        )

    def subset(self, idx) -> "ImageDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return ImageDataset(self.images[idx].copy(), self.target[idx].copy(),
                            self.protected[idx].copy(), tuple(self.ids[i] for i in idx))

    def save(self, path) -> None:
        np.savez_compressed(path, images=self.images, target=self.target,
                            protected=self.protected, ids=np.array(self.ids))

    @classmethod
    def load(cls, path) -> "ImageDataset":
        with np.load(path) as f:
            return cls(f["images"], f["target"], f["protected"], tuple(str(s) for s in f["ids"]))


def to_float_images(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(images.astype(np.float32) / 127.5 - 1.0)


@dataclass
class LabeledImageBatch:
    images: torch.Tensor  # float32 [B, 3, 64, 64] in [-1, 1]
    target: torch.Tensor  # float32 [B] of 0/1
    protected: torch.Tensor  # float32 [B] of 0/1
    index: np.ndarray  # positions in the source dataset

    def __len__(self):
        return self.images.shape[0]


def make_batch(dataset: ImageDataset, idx) -> LabeledImageBatch:
    idx = np.asarray(idx, dtype=np.int64)
    return LabeledImageBatch(
        to_float_images(dataset.images[idx]),
        torch.from_numpy(dataset.target[idx].astype(np.float32)),
        torch.from_numpy(dataset.protected[idx].astype(np.float32)),
        idx,
    )


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_stream(dataset: ImageDataset, batch_size: int, seed: int, drop_last: bool = True,
                 epoch: int = 0) -> Iterator[LabeledImageBatch]:
    """Yield the batches of one epoch in a permutation fixed by ``(seed, epoch)``."""
    if batch_size < 1:
        raise InvalidSpec(f"batch_size must be >= 1, got {batch_size}")
    n = len(dataset)
    if n == 0:
        raise EmptyDataset("cannot iterate an empty dataset")
    perm = epoch_permutation(n, seed, epoch)
    stop = n - n % batch_size if drop_last else n
    for start in range(0, stop, batch_size):
        yield make_batch(dataset, perm[start:start + batch_size])


def sequential_batches(dataset: ImageDataset, batch_size: int = 256) -> Iterator[LabeledImageBatch]:
    for start in range(0, len(dataset), batch_size):
        yield make_batch(dataset, np.arange(start, min(start + batch_size, len(dataset))))


# ---------------------------------------------------------------------------
# synthetic biased images


@dataclass
class SyntheticSpec:
    """Square-vs-circle (target) on a red-vs-blue tinted background (protected).

    ``rho`` is the probability that target and protected labels agree in the
    training split; validation and test splits are exactly balanced.
    """

    n_train: int = 4000
    n_val: int = 800
    n_test: int = 1200
    rho: float = 0.8
    seed: int = 0
    size_range: tuple = (10.0, 16.0)  # circle radius = square half-side, pixels
    noise: float = 0.08
    hue_jitter: float = 0.12

    def validate(self) -> None:
        if not 0.0 <= self.rho <= 1.0:
            raise InvalidSpec(f"rho must be in [0, 1], got {self.rho}")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise InvalidSpec("split sizes must be non-negative")
        if self.n_val % 4 or self.n_test % 4:
            raise InvalidSpec("n_val and n_test must be divisible by 4 (balanced cells)")
        lo, hi = self.size_range
        if not 1.0 <= lo <= hi <= 20.0:
            raise InvalidSpec(f"size_range must satisfy 1 <= lo <= hi <= 20, got {self.size_range}")
        if self.noise < 0 or self.hue_jitter < 0:
            raise InvalidSpec("noise and hue_jitter must be non-negative")

    def to_dict(self) -> dict:
        return {"n_train": self.n_train, "n_val": self.n_val, "n_test": self.n_test,
                "rho": self.rho, "seed": self.seed, "size_range": list(self.size_range),
                "noise": self.noise, "hue_jitter": self.hue_jitter}

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        if "size_range" in d:
            d["size_range"] = tuple(float(v) for v in d["size_range"])
        try:
            spec = cls(**d)
        except TypeError as exc:
            raise InvalidSpec(str(exc)) from exc
        spec.validate()
        return spec


_BASE_COLORS = np.array([[0.25, 0.35, 0.85],   # protected = 0: blue band
                         [0.85, 0.35, 0.25]])  # protected = 1: red band


def render_images(target: np.ndarray, protected: np.ndarray, rng: np.random.Generator,
                  spec: SyntheticSpec) -> np.ndarray:
    n = len(target)
    out = np.empty((n, 3, IMAGE_SIZE, IMAGE_SIZE), dtype=np.uint8)
    grid = np.arange(IMAGE_SIZE, dtype=np.float32) + 0.5
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    lo, hi = spec.size_range
    for start in range(0, n, 512):
        sl = slice(start, min(start + 512, n))
        m = sl.stop - sl.start
        size = rng.uniform(lo, hi, m).astype(np.float32)
        cx = rng.uniform(hi + 2, IMAGE_SIZE - hi - 2, m).astype(np.float32)
        cy = rng.uniform(hi + 2, IMAGE_SIZE - hi - 2, m).astype(np.float32)
        bg = _BASE_COLORS[protected[sl]] + rng.uniform(-spec.hue_jitter, spec.hue_jitter, (m, 3))
        fg = rng.uniform(0.75, 1.0, m)
        dx = xx[None] - cx[:, None, None]
        dy = yy[None] - cy[:, None, None]
        circle = dx ** 2 + dy ** 2 <= size[:, None, None] ** 2
        half = size[:, None, None]  # circumscribing square: corners distinguish the classes
        square = (np.abs(dx) <= half) & (np.abs(dy) <= half)
        mask = np.where(target[sl].astype(bool)[:, None, None], square, circle)
        img = np.broadcast_to(bg[:, :, None, None], (m, 3, IMAGE_SIZE, IMAGE_SIZE)).copy()
        img = np.where(mask[:, None], fg[:, None, None, None], img)
        img += rng.normal(0.0, spec.noise, img.shape)
        out[sl] = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return out


def _balanced_labels(n: int, rng: np.random.Generator):
    cells = np.repeat(np.arange(4), n // 4)
    rng.shuffle(cells)
    return (cells // 2).astype(np.int64), (cells % 2).astype(np.int64)


def generate_synthetic(spec: SyntheticSpec):
    """Return ``(train, val, test)`` ImageDatasets, deterministic in ``spec.seed``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    splits = []
    for name, n in (("train", spec.n_train), ("val", spec.n_val), ("test", spec.n_test)):
        if name == "train":
            protected = rng.integers(0, 2, n).astype(np.int64)
            agree = rng.random(n) < spec.rho
            target = np.where(agree, protected, 1 - protected).astype(np.int64)
        else:
            target, protected = _balanced_labels(n, rng)
        images = render_images(target, protected, rng, spec)
        ids = tuple(f"{name}-{i:06d}" for i in range(n))
        splits.append(ImageDataset(images, target, protected, ids))
    return tuple(splits)


# ---------------------------------------------------------------------------
# raw dataset conversion into the <root>/images + annotations.csv layout

UTK_YOUNG_MAX_AGE = 35


def _link_or_copy(src: Path, dst: Path) -> None:
    import shutil

    if dst.exists() or dst.is_symlink():
        dst.unlink()
    try:
        dst.symlink_to(src.resolve())
    except OSError:
        shutil.copyfile(src, dst)


def convert_utk(raw_dir, out_root) -> int:
    """Annotate UTK Face files named ``age_gender_race_*.jpg``.

    Columns: Male (gender 0), Caucasian (race 0), Young (age <= 35).
    Files whose names do not parse are skipped.
    """
    raw_dir, out_root = Path(raw_dir), Path(out_root)
    (out_root / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for path in sorted(raw_dir.iterdir()):
        if path.suffix.lower() not in (".jpg", ".jpeg", ".png"):
            continue
        parts = path.name.split("_")
        try:
            age, gender, race = int(parts[0]), int(parts[1]), int(parts[2])
        except (IndexError, ValueError):
            continue
        if gender not in (0, 1):
            continue
        rows.append((path.name, int(gender == 0), int(race == 0), int(age <= UTK_YOUNG_MAX_AGE)))
        _link_or_copy(path, out_root / "images" / path.name)
    with open(out_root / "annotations.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["file", "Male", "Caucasian", "Young"])
        w.writerows(rows)
    return len(rows)


def convert_celeba(raw_dir, out_root) -> int:
    """Convert ``list_attr_celeba.txt`` (+/-1 labels) and
    ``list_eval_partition.txt`` into annotations.csv and partition.csv."""
    raw_dir, out_root = Path(raw_dir), Path(out_root)
    attr_path = raw_dir / "list_attr_celeba.txt"
    part_path = raw_dir / "list_eval_partition.txt"
    img_dir = raw_dir / "img_align_celeba"
    if not img_dir.is_dir():
        img_dir = raw_dir / "images"
    lines = attr_path.read_text().splitlines()
    if len(lines) < 2:
        raise CorruptAnnotation(f"{attr_path}: truncated header (line 2)")
    names = lines[1].split()
    (out_root / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for lineno, line in enumerate(lines[2:], start=3):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != len(names) + 1 or any(v not in ("1", "-1") for v in parts[1:]):
            raise CorruptAnnotation(f"{attr_path}: malformed row at line {lineno}")
        src = img_dir / parts[0]
        if not src.is_file():
            raise MissingImageFile(f"{src} (attribute line {lineno})")
        _link_or_copy(src, out_root / "images" / parts[0])
        rows.append([parts[0]] + ["1" if v == "1" else "0" for v in parts[1:]])
    with open(out_root / "annotations.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["file", *names])
        w.writerows(rows)
    split_names = {"0": "train", "1": "val", "2": "test"}
    with open(out_root / "partition.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["file", "split"])
        for lineno, line in enumerate(part_path.read_text().splitlines(), start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 2 or parts[1] not in split_names:
                raise CorruptAnnotation(f"{part_path}: malformed row at line {lineno}")
            w.writerow([parts[0], split_names[parts[1]]])
    return len(rows)
