"""Corpus ingestion, class balancing, stratified splits and batch loading.

A corpus on disk is one directory per class holding PNG/JPEG images.  The
manifest produced here is the single source of truth downstream: class order
is lexicographic over directory names and every record carries its split
assignment.  Images load as grayscale, scaled to [0, 1], bilinearly resized,
and replicated to three channels unless the single-channel policy is chosen.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")
SPLITS = ("train", "validation", "test")
CHANNEL_POLICIES = ("gray1", "replicate3")

SYNTHETIC_CLASSES = ("covid", "normal", "viral_pneumonia")
# fractional (x, y) centers of the bright blob that defines each class
_BLOB_CENTERS = {
    "covid": (0.28, 0.30),
    "normal": (0.50, 0.74),
    "viral_pneumonia": (0.74, 0.32),
}


class CorpusError(RuntimeError):
    """The on-disk corpus or a split request is unusable."""


@dataclass(frozen=True)
class Record:
    path: str
    label: str
    split: str = "unassigned"


@dataclass
class DatasetManifest:
    class_names: list[str]
    records: list[Record]
    skipped: int = 0  # unreadable files dropped at ingest; not serialized

    def by_split(self, split: str) -> list[Record]:
        if split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
        return [r for r in self.records if r.split == split]

    def by_class(self, label: str) -> list[Record]:
        return [r for r in self.records if r.label == label]

    def counts(self) -> dict[str, int]:
        out = {c: 0 for c in self.class_names}
        for r in self.records:
            out[r.label] += 1
        return out

    def to_json(self) -> dict:
        return {
            "class_names": list(self.class_names),
            "records": [{"path": r.path, "label": r.label, "split": r.split}
                        for r in self.records],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "DatasetManifest":
        records = [Record(r["path"], r["label"], r["split"]) for r in doc["records"]]
        return cls(list(doc["class_names"]), records)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class SplitSpec:
    """Stratified split sizes: either fractions or exact per-class counts.

    ``test_fraction`` is taken of each class first (round half up), then
    ``validation_fraction`` of what remains; with ``counts`` the per-class
    (train, validation, test) sizes are used verbatim.
    """

    seed: int
    test_fraction: float | None = None
    validation_fraction: float | None = None
    counts: tuple[int, int, int] | None = None

    def __post_init__(self):
        if self.counts is not None:
            if self.test_fraction is not None or self.validation_fraction is not None:
                raise ValueError("give either fractions or counts, not both")
            if len(self.counts) != 3 or any(c < 0 for c in self.counts):
                raise ValueError(f"counts must be three non-negative ints, got {self.counts}")
        else:
            for name, frac in (("test_fraction", self.test_fraction),
                               ("validation_fraction", self.validation_fraction)):
                if frac is None or not (0 < frac < 1):
                    raise ValueError(f"{name} must lie in (0, 1), got {frac}")

    def to_json(self) -> dict:
        if self.counts is not None:
            return {"seed": self.seed, "counts": list(self.counts)}
        return {"seed": self.seed, "test_fraction": self.test_fraction,
                "validation_fraction": self.validation_fraction}


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _readable_image(path: Path) -> bool:
    try:
        with Image.open(path) as im:
            im.verify()
        return True
    except Exception:
        return False


def ingest(root) -> DatasetManifest:
    """Scan a folder-per-class corpus into an unassigned manifest.

    Unreadable image files are skipped with a logged warning and counted in
    ``manifest.skipped``; an empty class directory is an error.
    """
    root = Path(root)
    if not root.is_dir():
        raise CorpusError(f"corpus root {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise CorpusError(f"corpus root {root} contains no class directories")
    records: list[Record] = []
    skipped = 0
    for class_dir in class_dirs:
        files = sorted(p for p in class_dir.iterdir()
                       if p.suffix.lower() in IMAGE_EXTENSIONS)
        kept = 0
        for f in files:
            if _readable_image(f):
                records.append(Record(str(f), class_dir.name))
                kept += 1
            else:
                skipped += 1
                log.warning("skipping unreadable image %s", f)
        if kept == 0:
            raise CorpusError(f"class directory {class_dir} holds no readable images")
    if skipped:
        log.warning("ingest skipped %d unreadable file(s) under %s", skipped, root)
    return DatasetManifest([d.name for d in class_dirs], records, skipped)


def balance(manifest: DatasetManifest, seed: int) -> DatasetManifest:
    """Downsample every class to the smallest class size, without replacement.

    Classes already at the minimum keep their membership untouched.
    """
    counts = manifest.counts()
    if not counts:
        raise CorpusError("cannot balance an empty manifest")
    target = min(counts.values())
    rng = np.random.default_rng(seed)
    records: list[Record] = []
    for label in manifest.class_names:
        members = manifest.by_class(label)
        if len(members) > target:
            keep = np.sort(rng.choice(len(members), size=target, replace=False))
            members = [members[i] for i in keep]
        records.extend(members)
    return DatasetManifest(list(manifest.class_names), records)


def split(manifest: DatasetManifest, spec: SplitSpec) -> DatasetManifest:
    """Assign train/validation/test per class with a seeded shuffle."""
    rng = np.random.default_rng(spec.seed)
    records: list[Record] = []
    for label in manifest.class_names:
        members = manifest.by_class(label)
        n = len(members)
        if spec.counts is not None:
            n_train, n_val, n_test = spec.counts
            if n_train + n_val + n_test != n:
                raise CorpusError(
                    f"explicit counts {spec.counts} sum to {n_train + n_val + n_test} "
                    f"but class {label!r} has {n} records"
                )
        else:
            n_test = _round_half_up(n * spec.test_fraction)
            remaining = n - n_test
            n_val = _round_half_up(remaining * spec.validation_fraction)
            n_train = remaining - n_val
        perm = rng.permutation(n)
        assignment = {}
        for i in perm[:n_test]:
            assignment[i] = "test"
        for i in perm[n_test : n_test + n_val]:
            assignment[i] = "validation"
        for i in perm[n_test + n_val :]:
            assignment[i] = "train"
        records.extend(replace(m, split=assignment[i]) for i, m in enumerate(members))
    return DatasetManifest(list(manifest.class_names), records)


def load_image(path, target_size=(256, 256), channel_policy: str = "replicate3") -> np.ndarray:
    """One image as float32 HWC in [0, 1], bilinearly resized.

    The source is converted to 8-bit grayscale first; ``replicate3`` then
    copies that channel three times, ``gray1`` keeps a single channel.
    """
    if channel_policy not in CHANNEL_POLICIES:
        raise ValueError(f"channel_policy must be one of {CHANNEL_POLICIES}, got {channel_policy!r}")
    th, tw = target_size
    try:
        with Image.open(path) as im:
            im = im.convert("L")
            if im.size != (tw, th):
                im = im.resize((tw, th), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except Exception as exc:
        raise CorpusError(f"failed to load image '{path}': {exc}") from exc
    arr = arr[:, :, None]
    if channel_policy == "replicate3":
        arr = np.repeat(arr, 3, axis=2)
    return arr


def one_hot(labels: list[str], class_names: list[str]) -> np.ndarray:
    index = {c: i for i, c in enumerate(class_names)}
    out = np.zeros((len(labels), len(class_names)), dtype=np.float32)
    for row, label in enumerate(labels):
        out[row, index[label]] = 1.0
    return out


def load_batch(records: list[Record], class_names: list[str], target_size=(256, 256),
               channel_policy: str = "replicate3"):
    """Stack records into ``(images, one_hot_labels)`` float32 arrays."""
    images = np.stack([load_image(r.path, target_size, channel_policy) for r in records])
    return images, one_hot([r.label for r in records], class_names)


def generate_synthetic(out_dir, num_per_class: int = 100, image_size: int = 64,
                       seed: int = 0) -> Path:
    """Write a 3-class corpus whose classes differ by bright-blob location.

    Deterministic for a fixed seed, byte for byte.  Returns the corpus root.
    """
    if num_per_class < 1 or image_size < 8:
        raise ValueError("need num_per_class >= 1 and image_size >= 8")
    root = Path(out_dir)
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    sigma = 0.11 * image_size
    for label in SYNTHETIC_CLASSES:
        class_dir = root / label
        class_dir.mkdir(parents=True, exist_ok=True)
        cx_frac, cy_frac = _BLOB_CENTERS[label]
        for i in range(num_per_class):
            cx = (cx_frac + rng.uniform(-0.04, 0.04)) * image_size
            cy = (cy_frac + rng.uniform(-0.04, 0.04)) * image_size
            blob = 0.75 * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma**2))
            noise = rng.normal(0.0, 0.05, (image_size, image_size))
            img = np.clip(0.12 + noise + blob, 0.0, 1.0)
            Image.fromarray((img * 255).round().astype(np.uint8), mode="L").save(
                class_dir / f"{label}_{i:04d}.png")
    return root
