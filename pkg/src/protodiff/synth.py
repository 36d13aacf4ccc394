"""Synthetic labeled token datasets for training and acceptance runs.

Normal tokens are drawn around per-category centroids assigned to grid cells
by a fixed spatial hash, which gives each category a multi-modal "normal"
structure for the prototypes to learn. Anomalous records shift one random
token rectangle by a per-category direction of norm ``anomaly_offset`` and
emit the matching upsampled pixel mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .features import LABEL_ANOMALOUS, LABEL_NORMAL, Dataset, FeatureRecord
from .rng import Rng, _mix

_HASH_A = np.uint64(0x6C62272E07BB0142)
_HASH_B = np.uint64(0x100000001B3)


@dataclass
class SynthSpec:
    """Generator knobs; defaults match the end-to-end acceptance dataset."""

    num_categories: int = 5
    centroids_per_category: int = 3
    grid: tuple[int, int] = (14, 14)
    channels: int = 16
    layers: int = 3
    centroid_scale: float = 1.0
    token_noise: float = 0.25
    anomaly_offset: float = 1.5
    anomaly_rect_range: tuple[int, int] = (2, 5)
    train_per_category: int = 200
    test_normal_per_category: int = 40
    test_anomalous_per_category: int = 40
    image_scale: int = 4
    seed: int = 0

    def validate(self) -> None:
        if self.num_categories < 1 or self.centroids_per_category < 1:
            raise ConfigError("need at least one category and one centroid")
        if min(self.train_per_category, self.test_normal_per_category,
               self.test_anomalous_per_category) < 1:
            raise ConfigError("all per-split counts must be >= 1")
        if self.anomaly_offset < 3.0 * self.token_noise:
            raise ConfigError(
                f"anomaly_offset {self.anomaly_offset} < 3 * token_noise {self.token_noise}; "
                "anomalies would not be separable by construction")
        lo, hi = self.anomaly_rect_range
        h, w = self.grid
        if not (1 <= lo <= hi <= min(h, w)):
            raise ConfigError(f"anomaly_rect_range {self.anomaly_rect_range} does not fit grid {self.grid}")
        if self.image_scale < 1 or self.layers < 1 or self.channels < 1:
            raise ConfigError("image_scale, layers and channels must be >= 1")

    @property
    def image_dims(self) -> tuple[int, int]:
        return (self.grid[0] * self.image_scale, self.grid[1] * self.image_scale)


def _cell_centroid_idx(category: int, row: int, col: int, n_centroids: int) -> int:
    """Fixed spatial hash assigning a centroid to each (category, cell)."""
    with np.errstate(over="ignore"):
        key = (np.uint64(category) * _HASH_A) ^ (np.uint64(row) * _HASH_B) ^ np.uint64(col)
        return int(_mix(key) % np.uint64(n_centroids))


def _centroid_map(spec: SynthSpec, centroids: np.ndarray, category: int) -> np.ndarray:
    h, w = spec.grid
    idx = np.array([[_cell_centroid_idx(category, r, c, spec.centroids_per_category)
                     for c in range(w)] for r in range(h)])
    return centroids[category, idx.reshape(-1)]  # (h*w, C)


def _make_record(spec: SynthSpec, rng: Rng, base: np.ndarray, category: int,
                 direction: np.ndarray, anomalous: bool) -> FeatureRecord:
    h, w = spec.grid
    layers = []
    for _ in range(spec.layers):
        tok = base + spec.token_noise * rng.normals(base.shape)
        layers.append(tok)
    mask = np.zeros(spec.image_dims, dtype=np.uint8)
    if anomalous:
        lo, hi = spec.anomaly_rect_range
        sh = rng.randint(lo, hi)
        sw = rng.randint(lo, hi)
        r0 = rng.randint(0, h - sh)
        c0 = rng.randint(0, w - sw)
        cell_mask = np.zeros((h, w), dtype=bool)
        cell_mask[r0:r0 + sh, c0:c0 + sw] = True
        flat = cell_mask.reshape(-1)
        for layer in layers:
            layer[flat] += direction
        s = spec.image_scale
        mask = np.kron(cell_mask, np.ones((s, s), dtype=np.uint8))
    layers = [np.ascontiguousarray(t, dtype=np.float32) for t in layers]
    return FeatureRecord(category_id=category,
                         label=LABEL_ANOMALOUS if anomalous else LABEL_NORMAL,
                         grid=spec.grid, channels=spec.channels, layers=layers,
                         image_dims=spec.image_dims, mask=mask)


def generate_synthetic_dataset(spec: SynthSpec) -> tuple[Dataset, Dataset]:
    """Deterministic (train, test) pair; train is all-normal."""
    spec.validate()
    root = Rng(spec.seed)
    setup = root.spawn(0)
    centroids = spec.centroid_scale * setup.normals(
        (spec.num_categories, spec.centroids_per_category, spec.channels))
    directions = np.zeros((spec.num_categories, spec.channels))
    for cat in range(spec.num_categories):
        u = setup.normals((spec.channels,))
        norm = np.linalg.norm(u)
        if spec.anomaly_offset > 0.0 and norm > 0.0:
            directions[cat] = spec.anomaly_offset * u / norm

    train_rng = root.spawn(1)
    test_rng = root.spawn(2)
    train_records, test_records = [], []
    for cat in range(spec.num_categories):
        base = _centroid_map(spec, centroids, cat)
        for _ in range(spec.train_per_category):
            train_records.append(_make_record(spec, train_rng, base, cat, directions[cat], False))
        for _ in range(spec.test_normal_per_category):
            test_records.append(_make_record(spec, test_rng, base, cat, directions[cat], False))
        for _ in range(spec.test_anomalous_per_category):
            test_records.append(_make_record(spec, test_rng, base, cat, directions[cat], True))
    return (Dataset(split="train", records=train_records),
            Dataset(split="test", records=test_records))
