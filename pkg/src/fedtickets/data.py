"""Synthetic image classification data and backdoor trigger injection.

Images are float64 arrays in [0, 1] with shape (N, H, W, C). Each class is a
Gaussian blob at a class-specific location, so small networks separate the
classes quickly while leaving enough headroom for pruning and poisoning
effects to be measurable.

Triggers are dense pixel patches stamped into a corner. A trigger stores 0.0
as "leave the image alone" at every pixel it does not own, so stamping is a
single elementwise select and is idempotent.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EmptyAsrSetError, EmptyDatasetError, ShapeMismatchError

CORNERS = ("lower-left", "lower-right", "upper-left", "upper-right")
TRIGGER_KINDS = ("white-square", "random-square")

DATA_FORMAT = "fedtickets-dataset"
DATA_VERSION = 1


@dataclass
class ImageDataset:
    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    classes: int = 0

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        if self.images.ndim != 4:
            raise ShapeMismatchError("images", "(N, H, W, C)", self.images.shape)
        if len(self.labels) != len(self.images):
            raise ShapeMismatchError("labels", (len(self.images),), self.labels.shape)
        if self.classes <= 0 and len(self.labels):
            self.classes = int(self.labels.max()) + 1

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx, split: str | None = None) -> "ImageDataset":
        return ImageDataset(
            images=self.images[idx].copy(),
            labels=self.labels[idx].copy(),
            split=self.split if split is None else split,
            classes=self.classes,
        )

    def copy(self) -> "ImageDataset":
        return self.subset(slice(None))


def generate_dataset(
    num_classes: int,
    samples_per_class: int,
    image_size: int,
    seed: int,
    channels: int = 3,
    split: str = "train",
    noise: float = 0.12,
    jitter: float = 1.5,
) -> ImageDataset:
    """Blob-per-class synthetic images; deterministic in all arguments.

    Class c's blob sits on a circle around the image center at angle
    2*pi*c/num_classes, with per-sample center jitter and uniform pixel
    noise. Labels interleave (sample i has label i % num_classes) so any
    prefix is close to class-balanced.
    """
    if num_classes < 2:
        raise ConfigError("dataset.classes", "need at least 2 classes")
    if samples_per_class < 1:
        raise ConfigError("dataset.samples_per_class", "need at least 1 sample per class")
    if image_size < 8:
        raise ConfigError("dataset.image_size", "images must be at least 8x8")
    if channels < 1:
        raise ConfigError("dataset.channels", "need at least 1 channel")
    rng = np.random.default_rng(seed)
    n = num_classes * samples_per_class
    s = image_size
    center = (s - 1) / 2.0
    radius = s / 3.2
    sigma = s / 8.0
    yy, xx = np.mgrid[0:s, 0:s]
    images = np.empty((n, s, s, channels))
    labels = np.arange(n) % num_classes
    # per-class base hue so channels carry class signal too
    hues = 0.35 + 0.6 * rng.random((num_classes, channels))
    for i in range(n):
        c = labels[i]
        ang = 2 * math.pi * c / num_classes
        cy = center + radius * math.sin(ang) + rng.uniform(-jitter, jitter)
        cx = center + radius * math.cos(ang) + rng.uniform(-jitter, jitter)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        img = blob[:, :, None] * hues[c][None, None, :]
        img = img + rng.uniform(0, noise, size=img.shape)
        images[i] = img
    np.clip(images, 0.0, 1.0, out=images)
    return ImageDataset(images=images, labels=labels, split=split, classes=num_classes)


@dataclass(frozen=True)
class TriggerPattern:
    """Trigger image where 0.0 pixels mean "keep the original pixel"."""

    pixels: np.ndarray
    kind: str
    size: int
    corner: str

    def __post_init__(self):
        if self.pixels.ndim != 3:
            raise ShapeMismatchError("trigger.pixels", "(H, W, C)", self.pixels.shape)


def _corner_slices(corner: str, image_size: int, size: int):
    s, k = image_size, size
    rows = {"lower-left": slice(s - k, s), "lower-right": slice(s - k, s),
            "upper-left": slice(0, k), "upper-right": slice(0, k)}[corner]
    cols = {"lower-left": slice(0, k), "upper-left": slice(0, k),
            "lower-right": slice(s - k, s), "upper-right": slice(s - k, s)}[corner]
    return rows, cols


def make_trigger(
    kind: str,
    size: int,
    image_size: int,
    channels: int = 3,
    corner: str = "lower-left",
    seed: int = 0,
) -> TriggerPattern:
    """Build a square stamp. Random-square values are drawn from (0, 1] so no
    owned pixel collides with the 0.0 "transparent" sentinel."""
    if kind not in TRIGGER_KINDS:
        raise ConfigError("trigger.kind", f"unknown kind {kind!r}")
    if corner not in CORNERS:
        raise ConfigError("trigger.corner", f"unknown corner {corner!r}")
    if size < 1 or size > image_size:
        raise ConfigError("trigger.size", f"size must lie in [1, {image_size}]")
    pixels = np.zeros((image_size, image_size, channels))
    rows, cols = _corner_slices(corner, image_size, size)
    if kind == "white-square":
        pixels[rows, cols, :] = 1.0
    else:
        rng = np.random.default_rng(seed)
        patch = 1.0 - rng.random((size, size, channels))  # (0, 1]
        pixels[rows, cols, :] = patch
    return TriggerPattern(pixels=pixels, kind=kind, size=size, corner=corner)


def apply_trigger(image: np.ndarray, trigger: TriggerPattern) -> np.ndarray:
    """Stamp the trigger into a fresh copy: pixels the trigger owns replace
    the originals, everything else passes through. Idempotent."""
    image = np.asarray(image, dtype=float)
    if image.shape != trigger.pixels.shape:
        raise ShapeMismatchError("image", trigger.pixels.shape, image.shape)
    return np.where(trigger.pixels == 0.0, image, trigger.pixels)


@dataclass(frozen=True)
class PoisonSpec:
    trigger: TriggerPattern
    alpha: float
    target: int
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("poison.alpha", "poisoning rate must lie in [0, 1]")
        if self.target < 0:
            raise ConfigError("poison.target", "target class must be nonnegative")


def poison_count(alpha: float, n: int) -> int:
    """ceil(alpha * n) under decimal semantics (0.05 * 100 is exactly 5)."""
    return int(math.ceil(round(alpha * n, 9)))


def poison_dataset(dataset: ImageDataset, spec: PoisonSpec) -> tuple:
    """Replace ceil(alpha*N) samples, chosen without replacement by spec.seed,
    with their triggered versions labeled spec.target. Returns the new
    dataset plus the sorted poisoned indices. Train split only."""
    if dataset.split != "train":
        raise ConfigError("poison", f"can only poison the train split, got {dataset.split!r}")
    if len(dataset) == 0:
        raise EmptyDatasetError("cannot poison an empty dataset")
    if spec.target >= dataset.classes:
        raise ConfigError("poison.target", f"target {spec.target} outside {dataset.classes} classes")
    n = poison_count(spec.alpha, len(dataset))
    out = dataset.copy()
    if n == 0:
        return out, np.zeros(0, dtype=int)
    rng = np.random.default_rng(spec.seed)
    idx = np.sort(rng.choice(len(dataset), size=n, replace=False))
    for i in idx:
        out.images[i] = apply_trigger(out.images[i], spec.trigger)
    out.labels[idx] = spec.target
    return out, idx


def make_asr_testset(test: ImageDataset, trigger: TriggerPattern, target: int) -> ImageDataset:
    """Triggered copies of every test sample whose true label is not the
    target, all labeled target. Used for attack success measurement."""
    keep = np.flatnonzero(test.labels != target)
    if len(keep) == 0:
        raise EmptyAsrSetError("no test samples outside the target class")
    images = np.stack([apply_trigger(test.images[i], trigger) for i in keep])
    labels = np.full(len(keep), target, dtype=int)
    return ImageDataset(images=images, labels=labels, split="asr", classes=test.classes)


def dataset_digest(dataset: ImageDataset) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(dataset.images).tobytes())
    h.update(np.ascontiguousarray(dataset.labels.astype(np.int64)).tobytes())
    return h.hexdigest()


def save_dataset(dataset: ImageDataset, out_dir, seed: int = 0, poison_doc=None) -> None:
    """Write manifest.json + raw float64/int64 blobs + a labels.csv preview."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    n, h, w, c = dataset.images.shape
    manifest = {
        "format": DATA_FORMAT,
        "version": DATA_VERSION,
        "split": dataset.split,
        "classes": dataset.classes,
        "shape": [n, h, w, c],
        "seed": seed,
        "poison": poison_doc,
        "digest": dataset_digest(dataset),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "images.f64"), "wb") as fh:
        fh.write(np.ascontiguousarray(dataset.images).tobytes())
    with open(os.path.join(out_dir, "labels.i64"), "wb") as fh:
        fh.write(np.ascontiguousarray(dataset.labels.astype(np.int64)).tobytes())
    with open(os.path.join(out_dir, "labels.csv"), "w") as fh:
        fh.write("index,label\n")
        for i, lab in enumerate(dataset.labels):
            fh.write(f"{i},{int(lab)}\n")


def load_dataset(in_dir) -> ImageDataset:
    import os

    path = os.path.join(in_dir, "manifest.json")
    try:
        with open(path) as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(path, "dataset manifest not found")
    if manifest.get("format") != DATA_FORMAT:
        raise ConfigError(path, "not a dataset directory")
    n, h, w, c = manifest["shape"]
    images = np.frombuffer(
        open(os.path.join(in_dir, "images.f64"), "rb").read(), dtype=np.float64
    ).reshape(n, h, w, c).copy()
    labels = np.frombuffer(
        open(os.path.join(in_dir, "labels.i64"), "rb").read(), dtype=np.int64
    ).copy()
    ds = ImageDataset(images=images, labels=labels, split=manifest["split"], classes=manifest["classes"])
    if dataset_digest(ds) != manifest["digest"]:
        raise ConfigError(path, "dataset blobs do not match manifest digest")
    return ds
