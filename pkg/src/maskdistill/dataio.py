"""Image-folder ingestion, synthetic corpus generation, and batch iteration."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from PIL import Image

from maskdistill.errors import DatasetError

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")


@dataclass
class ImageRecord:
    id: str
    pixels: np.ndarray  # H x W x C float in [0, 1]
    label: Optional[int] = None


@dataclass
class DatasetManifest:
    root: Path
    records: list[tuple[str, str, Optional[int]]]  # (id, relative path, label)
    class_names: Optional[list[str]] = None
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.records)

    def labels(self) -> list[Optional[int]]:
        return [label for _, _, label in self.records]


@dataclass
class SyntheticSpec:
    num_images: int
    image_size: int = 64
    num_classes: int = 4
    shapes_per_image: tuple[int, int] = (1, 2)
    radius_range: tuple[float, float] = (0.22, 0.36)
    noise: float = 0.03
    seed: int = 0


def _read_labels_csv(path: Path) -> dict[str, int]:
    labels: dict[str, int] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "id" not in reader.fieldnames or "label" not in reader.fieldnames:
            raise DatasetError(f"{path}: expected header 'id,label'")
        for row in reader:
            labels[row["id"]] = int(row["label"])
    return labels


def scan_folder(root: str | os.PathLike) -> DatasetManifest:
    """List all decodable images under root, attaching labels.csv when present."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")

    labels: dict[str, int] = {}
    csv_path = root / "labels.csv"
    if csv_path.exists():
        labels = _read_labels_csv(csv_path)

    records = []
    skipped = 0
    for path in sorted(root.rglob("*")):
        if path.suffix.lower() not in IMAGE_EXTENSIONS:
            continue
        rec_id = path.stem
        try:
            with Image.open(path) as img:
                img.verify()
        except Exception:
            skipped += 1
            continue
        records.append((rec_id, str(path.relative_to(root)), labels.get(rec_id)))
    records.sort(key=lambda r: r[0])
    if not records:
        raise DatasetError(f"no decodable images under {root}")
    return DatasetManifest(root=root, records=records, skipped=skipped)


# synthetic corpus: class identity = shape type x color family, so neither
# cue alone identifies the class once num_classes > 2
_SHAPES = ("disk", "square", "triangle", "cross")
_WARM = np.array([[0.85, 0.25, 0.15], [0.95, 0.60, 0.10], [0.80, 0.15, 0.45]])
_COOL = np.array([[0.15, 0.35, 0.85], [0.10, 0.70, 0.65], [0.35, 0.20, 0.80]])


def _draw_shape(canvas: np.ndarray, shape: str, cx: float, cy: float, r: float,
                color: np.ndarray) -> None:
    size = canvas.shape[0]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if shape == "disk":
        mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    elif shape == "square":
        mask = (np.abs(xx - cx) <= r) & (np.abs(yy - cy) <= r)
    elif shape == "triangle":
        mask = (yy >= cy - r) & (yy <= cy + r) & (np.abs(xx - cx) <= (yy - (cy - r)) / 2)
    else:  # cross
        arm = max(r / 3.0, 1.0)
        mask = ((np.abs(xx - cx) <= arm) & (np.abs(yy - cy) <= r)) | \
               ((np.abs(yy - cy) <= arm) & (np.abs(xx - cx) <= r))
    canvas[mask] = color


def class_rule(class_id: int, num_classes: int) -> tuple[str, np.ndarray]:
    """Shape-type x color-family cross: with <= 4 classes the grid is
    2 shapes x 2 families, so neither cue alone identifies the class.
    Disk and cross are paired because they differ the most in local
    statistics (compact blob vs thin high-perimeter arms)."""
    if num_classes <= 4:
        shape = ("disk", "cross")[class_id % 2]
        family = _WARM if (class_id // 2) % 2 == 0 else _COOL
    else:
        shape = _SHAPES[class_id % len(_SHAPES)]
        family = _WARM if (class_id // len(_SHAPES)) % 2 == 0 else _COOL
    return shape, family


def render_synthetic_image(spec: SyntheticSpec, class_id: int,
                           rng: np.random.Generator) -> np.ndarray:
    size = spec.image_size
    shape, family = class_rule(class_id, spec.num_classes)
    canvas = np.full((size, size, 3), rng.uniform(0.05, 0.25), dtype=np.float64)
    n_shapes = rng.integers(spec.shapes_per_image[0], spec.shapes_per_image[1] + 1)
    for _ in range(n_shapes):
        color = family[rng.integers(len(family))]
        r = rng.uniform(*spec.radius_range) * size
        cx = rng.uniform(r, size - r)
        cy = rng.uniform(r, size - r)
        _draw_shape(canvas, shape, cx, cy, r, color)
    canvas += rng.normal(0.0, spec.noise, canvas.shape)
    return np.clip(canvas, 0.0, 1.0)


def make_synthetic(spec: SyntheticSpec, out: str | os.PathLike) -> DatasetManifest:
    """Write a labeled PNG corpus; bit-identical for a fixed spec.seed."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    width = max(5, len(str(max(spec.num_images - 1, 0))))
    records = []
    rows = []
    for idx in range(spec.num_images):
        class_id = int(rng.integers(spec.num_classes))
        pixels = render_synthetic_image(spec, class_id, rng)
        rec_id = f"img{idx:0{width}d}"
        rel = f"{rec_id}.png"
        arr = (pixels * 255.0 + 0.5).astype(np.uint8)
        Image.fromarray(arr).save(out / rel)
        records.append((rec_id, rel, class_id))
        rows.append((rec_id, class_id))
    with open(out / "labels.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label"])
        writer.writerows(rows)
    class_names = [f"class{i}" for i in range(spec.num_classes)]
    return DatasetManifest(root=out, records=records, class_names=class_names)


def load_record(manifest: DatasetManifest, index: int, resize_to: int | None = None) -> ImageRecord:
    rec_id, rel, label = manifest.records[index]
    with Image.open(manifest.root / rel) as img:
        img = img.convert("RGB")
        if resize_to is not None and img.size != (resize_to, resize_to):
            img = img.resize((resize_to, resize_to), Image.BILINEAR)
        pixels = np.asarray(img, dtype=np.float64) / 255.0
    return ImageRecord(id=rec_id, pixels=pixels, label=label)


def batches(manifest: DatasetManifest, batch_size: int, rng: np.random.Generator,
            resize_to: int, epochs: int = 1) -> Iterator[list[ImageRecord]]:
    """Yield shuffled epochs of decoded batches; partial final batch dropped."""
    if batch_size < 1:
        raise DatasetError("batch_size must be >= 1")
    n = len(manifest.records)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            batch = []
            for i in order[start:start + batch_size]:
                try:
                    batch.append(load_record(manifest, int(i), resize_to))
                except OSError:
                    manifest.skipped += 1
            if len(batch) == batch_size:
                yield batch
