"""In-memory multimodal dataset assembled from an image directory and metadata."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .imaging import load_image, sr_path_for
from .metadata import (EncodedMeta, Imputer, MetadataRecord, MetadataSchema, SplitAssignment,
                       encode, labels_of)


@dataclass
class MultimodalDataset:
    ids: List[str]
    images: np.ndarray          # N×H×W×3 float32 in [0, 1]
    meta: np.ndarray            # N×D float32, already imputed
    labels: np.ndarray          # N int64
    class_names: List[str]
    sr_images: Optional[np.ndarray] = None  # N×2H×2W×3 when SR targets come from files

    def __len__(self):
        return len(self.ids)

    def subset(self, indices: Sequence[int]) -> "MultimodalDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return MultimodalDataset(
            [self.ids[i] for i in idx], self.images[idx], self.meta[idx], self.labels[idx],
            list(self.class_names), None if self.sr_images is None else self.sr_images[idx])

    def partition(self, split: SplitAssignment, name: str) -> "MultimodalDataset":
        return self.subset([i for i, sid in enumerate(self.ids) if split.assignment[sid] == name])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=len(self.class_names))


def image_path(image_dir, sample_id: str) -> Path:
    """Image file for a sample id (ids may or may not carry the extension)."""
    image_dir = Path(image_dir)
    direct = image_dir / sample_id
    if direct.suffix.lower() in (".png", ".ppm") and direct.exists():
        return direct
    for ext in (".png", ".ppm"):
        candidate = image_dir / (Path(sample_id).stem + ext)
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"no image for sample {sample_id!r} in {image_dir}")


def assemble(records: Sequence[MetadataRecord], schema: MetadataSchema, image_dir,
             imputer: Imputer, load_sr: bool = False) -> MultimodalDataset:
    encoded: List[EncodedMeta] = imputer.transform([encode(r, schema) for r in records])
    ids = [r.values[schema.id_column] for r in records]
    paths = [image_path(image_dir, sid) for sid in ids]
    images = np.stack([load_image(p) for p in paths]).astype(np.float32)
    sr = np.stack([load_image(sr_path_for(p)) for p in paths]).astype(np.float32) if load_sr else None
    meta = np.stack([e.vector for e in encoded]).astype(np.float32) if encoded \
        else np.zeros((0, schema.encoded_length), np.float32)
    return MultimodalDataset(ids, images, meta, labels_of(records, schema), schema.class_names, sr)
