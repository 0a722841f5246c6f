"""Seeded synthetic multimodal dataset where neither modality alone suffices.

Class ``c`` draws image pattern ``c % P`` and metadata token ``c // P``, so
with ``P < n_classes`` an image-only classifier can separate at most ``P``
groups and a metadata-only one at most ``ceil(n_classes / P)``.

The on-disk layout is the one the real data uses::

    <out>/images/<img_id>.png
    <out>/metadata.csv
    <out>/schema.json
    <out>/labels.csv        ground truth, sample_id,label
    <out>/synth.json        generator configuration (read by the oracle)
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np

from .errors import ConfigError
from .imaging import load_image, save_image
from .metadata import Column, MetadataSchema

PATTERNS = ("square", "hbar", "vbar", "cross", "frame", "dots")
PAD_CLASSES = ["ACK", "BCC", "MEL", "NEV", "SCC", "SEK"]
SKIN = np.array([0.82, 0.62, 0.52])


@dataclass
class SynthConfig:
    n_classes: int = 6
    n_patterns: int = 3
    samples_per_class: int = 100
    image_size: int = 32
    intensity: float = 0.6
    noise: float = 0.05
    color_cast: float = 0.1
    missing_rate: float = 0.05
    lesions_per_patient: int = 2
    seed: int = 0

    def validate(self) -> "SynthConfig":
        if not 2 <= self.n_classes:
            raise ConfigError("n_classes must be >= 2")
        if not 1 <= self.n_patterns <= min(self.n_classes, len(PATTERNS)):
            raise ConfigError(f"n_patterns must lie in [1, {min(self.n_classes, len(PATTERNS))}]")
        if self.image_size < 8 or self.samples_per_class < 1:
            raise ConfigError("image_size must be >= 8 and samples_per_class >= 1")
        if not 0 <= self.missing_rate < 1 or self.noise < 0 or not 0 < self.intensity <= 1:
            raise ConfigError("invalid noise / intensity / missing_rate")
        return self

    @property
    def n_tokens(self) -> int:
        return -(-self.n_classes // self.n_patterns)

    def class_names(self) -> List[str]:
        if self.n_classes == len(PAD_CLASSES):
            return list(PAD_CLASSES)
        return [f"C{i}" for i in range(self.n_classes)]


def pattern_extent(size: int) -> int:
    return size // 2


def jitter_range(size: int) -> int:
    return max(1, size // 8)


def pattern_mask(kind: str, size: int, dy: int = 0, dx: int = 0) -> np.ndarray:
    """Boolean mask of an axis-aligned pattern, centred and shifted by (dy, dx)."""
    s = pattern_extent(size)
    t = max(2, s // 3)
    m = np.zeros((s, s), dtype=bool)
    mid = (s - t) // 2
    if kind == "square":
        m[:] = True
    elif kind == "hbar":
        m[mid:mid + t, :] = True
    elif kind == "vbar":
        m[:, mid:mid + t] = True
    elif kind == "cross":
        m[mid:mid + t, :] = True
        m[:, mid:mid + t] = True
    elif kind == "frame":
        m[:] = True
        m[t:s - t, t:s - t] = False
    elif kind == "dots":
        m[:t, :t] = m[:t, -t:] = m[-t:, :t] = m[-t:, -t:] = True
    else:
        raise ConfigError(f"unknown pattern {kind!r}")
    full = np.zeros((size, size), dtype=bool)
    top = (size - s) // 2 + dy
    left = (size - s) // 2 + dx
    full[top:top + s, left:left + s] = m
    return full


def pattern_color(index: int, n_patterns: int, intensity: float) -> np.ndarray:
    # darker, browner lesions; depends only on the pattern so colour carries no token
    depth = intensity * (0.7 + 0.3 * index / max(1, n_patterns - 1))
    return SKIN * (1 - depth) + np.array([0.25, 0.1, 0.05]) * depth


def render(cfg: SynthConfig, pattern: int, rng: np.random.Generator) -> np.ndarray:
    size = cfg.image_size
    j = jitter_range(size)
    dy, dx = rng.integers(-j, j + 1, size=2)
    gains = 1 + cfg.color_cast * (2 * rng.random(3) - 1)
    noise = rng.normal(0.0, cfg.noise, (size, size, 3)) if cfg.noise > 0 else 0.0
    img = np.broadcast_to(SKIN, (size, size, 3)).copy()
    mask = pattern_mask(PATTERNS[pattern], size, int(dy), int(dx))
    img[mask] = pattern_color(pattern, cfg.n_patterns, cfg.intensity)
    return np.clip(img * gains + noise, 0.0, 1.0)


def synth_schema(cfg: SynthConfig) -> MetadataSchema:
    cols = [
        Column("img_id", "identifier"),
        Column("patient_id", "identifier"),
        Column("token", "categorical", [f"T{i}" for i in range(cfg.n_tokens)]),
        Column("smoke", "categorical", ["True", "False"]),
        Column("region", "categorical", ["ARM", "FACE", "BACK"]),
        Column("age", "numeric", bounds=[0.0, 100.0]),
        Column("diagnostic", "label", cfg.class_names()),
    ]
    return MetadataSchema(cols, "img_id", "diagnostic", "patient_id", ["", "UNK"])


def generate(cfg: SynthConfig, out_dir) -> Path:
    """Write the dataset; byte-identical for identical configurations."""
    cfg.validate()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    labels = np.repeat(np.arange(cfg.n_classes), cfg.samples_per_class)
    labels = labels[rng.permutation(len(labels))]
    schema = synth_schema(cfg)
    names = cfg.class_names()
    rows = []
    for i, c in enumerate(labels):
        sample_rng = np.random.default_rng([cfg.seed, 1, i])
        sid = f"syn_{i:05d}.png"
        save_image(render(cfg, int(c) % cfg.n_patterns, sample_rng), out / "images" / sid)
        extra = sample_rng.random(4)
        smoke = "True" if extra[0] < 0.3 else "False"
        region = ["ARM", "FACE", "BACK"][int(extra[1] * 3)]
        age = str(int(20 + 70 * extra[2]))
        missing = sample_rng.random(3) < cfg.missing_rate
        rows.append({
            "img_id": sid,
            "patient_id": f"PAT_{i // cfg.lesions_per_patient:05d}",
            "token": f"T{int(c) // cfg.n_patterns}",
            "smoke": "UNK" if missing[0] else smoke,
            "region": "" if missing[1] else region,
            "age": "UNK" if missing[2] else age,
            "diagnostic": names[c],
        })
    with open(out / "metadata.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=[c.name for c in schema.columns], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    with open(out / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "label"])
        for row in rows:
            w.writerow([row["img_id"], row["diagnostic"]])
    schema.save(out / "schema.json")
    (out / "synth.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")
    return out


def _best_pattern(img: np.ndarray, cfg: SynthConfig) -> int:
    """Brute force over every pattern and placement: the two-level
    (inside/outside) piecewise-constant fit with the least squared residual."""
    size = cfg.image_size
    j = jitter_range(size)
    best, best_sse = 0, np.inf
    total = img.reshape(-1, 3)
    for p in range(cfg.n_patterns):
        for dy in range(-j, j + 1):
            for dx in range(-j, j + 1):
                m = pattern_mask(PATTERNS[p], size, dy, dx).reshape(-1)
                inside, outside = total[m], total[~m]
                sse = ((inside - inside.mean(axis=0)) ** 2).sum() + \
                    ((outside - outside.mean(axis=0)) ** 2).sum()
                if sse < best_sse - 1e-12:
                    best, best_sse = p, sse
    return best


def load_config(data_dir) -> SynthConfig:
    return SynthConfig(**json.loads((Path(data_dir) / "synth.json").read_text()))


def oracle_classify(data_dir, use_image: bool = True, use_metadata: bool = True,
                    ids: Optional[List[str]] = None) -> np.ndarray:
    """Template matching on the image plus token lookup in the metadata.

    A disabled modality contributes its first option (pattern 0 / token 0),
    which yields the single-modality ceiling.
    """
    data_dir = Path(data_dir)
    cfg = load_config(data_dir)
    with open(data_dir / "metadata.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    if ids is not None:
        by_id = {r["img_id"]: r for r in rows}
        rows = [by_id[i] for i in ids]
    out = np.empty(len(rows), dtype=np.int64)
    for i, r in enumerate(rows):
        pattern = _best_pattern(load_image(data_dir / "images" / r["img_id"]), cfg) if use_image else 0
        token = int(r["token"][1:]) if use_metadata else 0
        out[i] = min(token * cfg.n_patterns + pattern, cfg.n_classes - 1)
    return out


def true_labels(data_dir) -> np.ndarray:
    data_dir = Path(data_dir)
    names = load_config(data_dir).class_names()
    with open(data_dir / "labels.csv", newline="") as fh:
        return np.array([names.index(r["label"]) for r in csv.DictReader(fh)], dtype=np.int64)
