"""Dataset ingestion: directory-per-class trees or explicit list files.

Unreadable or undecodable images are skipped with a logged warning and
counted separately; they never abort an evaluation run.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass

import numpy as np

log = logging.getLogger("fcl.dataset")

IMAGE_EXTENSIONS = (".png", ".ppm", ".pgm", ".jpg", ".jpeg", ".bmp")


@dataclass
class DatasetManifest:
    root: str
    layout: str = "directory"          # "directory" | "list"
    list_file: str | None = None
    classes_file: str | None = None

    def __post_init__(self):
        if self.layout not in ("directory", "list"):
            raise ValueError(f"unknown dataset layout {self.layout!r}")
        if self.layout == "list" and not self.list_file:
            raise ValueError("list layout requires list_file")


def load_image(path: str) -> np.ndarray:
    """Decode to float64 RGB in [0, 1]."""
    from PIL import Image

    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def read_class_names(manifest: DatasetManifest) -> list[str]:
    if manifest.classes_file:
        with open(manifest.classes_file) as f:
            names = [line.strip() for line in f if line.strip()]
        if not names:
            raise ValueError(f"empty class-names file {manifest.classes_file}")
        return names
    if manifest.layout == "directory":
        names = sorted(d for d in os.listdir(manifest.root)
                       if os.path.isdir(os.path.join(manifest.root, d)))
        if not names:
            raise ValueError(f"no class directories under {manifest.root}")
        return names
    raise ValueError("list layout requires an explicit class-names file")


def _directory_entries(manifest: DatasetManifest, names: list[str]):
    for cls_index, name in enumerate(names):
        cls_dir = os.path.join(manifest.root, name)
        if not os.path.isdir(cls_dir):
            continue
        for fname in sorted(os.listdir(cls_dir)):
            if fname.lower().endswith(IMAGE_EXTENSIONS):
                yield (f"{name}/{fname}", os.path.join(cls_dir, fname),
                       cls_index)


def _list_entries(manifest: DatasetManifest, names: list[str]):
    index = {n: i for i, n in enumerate(names)}
    with open(manifest.list_file) as f:
        for row in csv.reader(f):
            if not row or row[0].lstrip().startswith("#"):
                continue
            if len(row) < 2:
                raise ValueError(
                    f"list file rows need 'image-path,class-name': {row!r}")
            rel, cls = row[0].strip(), row[1].strip()
            if cls not in index:
                raise ValueError(f"class {cls!r} not in the class-names file")
            path = rel if os.path.isabs(rel) else os.path.join(manifest.root, rel)
            yield rel, path, index[cls]


class DatasetLoader:
    """Ordered lazy iteration over (image_id, image, label) with skip count."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self.class_names = read_class_names(manifest)
        self.n_skipped = 0

    def __iter__(self):
        entries = (_directory_entries(self.manifest, self.class_names)
                   if self.manifest.layout == "directory"
                   else _list_entries(self.manifest, self.class_names))
        for image_id, path, label in entries:
            try:
                image = load_image(path)
            except (OSError, ValueError) as exc:
                log.warning("skipping unreadable image %s: %s", path, exc)
                self.n_skipped += 1
                continue
            yield image_id, image, label


def load_dataset(manifest: DatasetManifest):
    """Materialize the dataset; returns (items, class_names, n_skipped)."""
    loader = DatasetLoader(manifest)
    items = list(loader)
    return items, loader.class_names, loader.n_skipped
