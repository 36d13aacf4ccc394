"""Token-feature records, the DPFT on-disk format, and cross-layer aggregation.

Features arrive pre-extracted: each record carries L per-layer token arrays of
shape (h*w, C) plus a pixel-level ground-truth mask. The DPFT format is a
little-endian binary container with a per-record CRC32; the exporter contract
is documented in the README so features from any backbone can be ingested.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import CorruptionError, DataValidationError, FormatError

MAGIC = b"DPFT"
VERSION = 1

LABEL_NORMAL = 0
LABEL_ANOMALOUS = 1

_HEADER = struct.Struct("<4sII")
_RECORD_HEAD = struct.Struct("<IBHHHBHH")
_CRC = struct.Struct("<I")


@dataclass
class FeatureRecord:
    """Per-image token features with label and pixel mask."""

    category_id: int
    label: int
    grid: tuple[int, int]
    channels: int
    layers: list[np.ndarray]  # each (h*w, C) float32
    image_dims: tuple[int, int]
    mask: np.ndarray  # (H_img, W_img) uint8

    @property
    def is_anomalous(self) -> bool:
        return self.label == LABEL_ANOMALOUS

    @property
    def num_tokens(self) -> int:
        return self.grid[0] * self.grid[1]

    def validate(self) -> None:
        h, w = self.grid
        n = h * w
        if self.label not in (LABEL_NORMAL, LABEL_ANOMALOUS):
            raise DataValidationError(f"unknown label {self.label}")
        if not self.layers:
            raise DataValidationError("record has no layers")
        for i, layer in enumerate(self.layers):
            if layer.shape != (n, self.channels):
                raise DataValidationError(
                    f"layer {i} shape {layer.shape} != ({n}, {self.channels})")
            if not np.all(np.isfinite(layer)):
                raise DataValidationError(f"layer {i} contains non-finite values")
        if self.mask.shape != self.image_dims:
            raise DataValidationError(
                f"mask shape {self.mask.shape} != image dims {self.image_dims}")
        if self.label == LABEL_NORMAL and self.mask.any():
            raise DataValidationError("normal record carries a nonzero mask")


@dataclass
class Dataset:
    """Ordered record collection for one split."""

    split: str
    records: list[FeatureRecord]
    category_index: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.category_index:
            ids = sorted({r.category_id for r in self.records})
            self.category_index = {cid: f"cat{cid:02d}" for cid in ids}
        if self.split == "train":
            for i, r in enumerate(self.records):
                if r.label != LABEL_NORMAL:
                    raise DataValidationError(f"anomalous record {i} in train split")

    def __len__(self) -> int:
        return len(self.records)


def aggregate_layers(record: FeatureRecord, selection=None) -> Tensor:
    """Cross-layer mean pooling over the selected layer indices.

    ``selection=None`` selects every layer present in the record.
    """
    if selection is None:
        selection = range(len(record.layers))
    selection = sorted(set(int(i) for i in selection))
    if not selection:
        raise ValueError("aggregate_layers: empty layer selection")
    for i in selection:
        if not 0 <= i < len(record.layers):
            raise ValueError(f"layer index {i} out of range (L={len(record.layers)})")
    acc = np.zeros((record.num_tokens, record.channels), dtype=np.float64)
    for i in selection:
        acc += record.layers[i]
    return Tensor(acc / len(selection))


def aggregate_dataset(dataset: Dataset, selection=None) -> np.ndarray:
    """Stacked aggregated tokens, shape (n_records, h*w, C). Requires one common grid."""
    grids = {r.grid for r in dataset.records}
    if len(grids) > 1:
        raise DataValidationError(f"mixed grids in dataset: {sorted(grids)}")
    return np.stack([aggregate_layers(r, selection).data for r in dataset.records])


# ---------------------------------------------------------------------------
# DPFT serialization
# ---------------------------------------------------------------------------


def _record_payload(r: FeatureRecord) -> bytes:
    h, w = r.grid
    hi, wi = r.image_dims
    parts = [_RECORD_HEAD.pack(r.category_id, r.label, h, w, r.channels,
                               len(r.layers), hi, wi)]
    for layer in r.layers:
        parts.append(np.ascontiguousarray(layer, dtype="<f4").tobytes())
    parts.append(np.ascontiguousarray(r.mask, dtype=np.uint8).tobytes())
    return b"".join(parts)


def write_feature_file(dataset: Dataset, path) -> None:
    """Serialize a Dataset to DPFT."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(dataset.records)))
        for r in dataset.records:
            payload = _record_payload(r)
            fh.write(payload)
            fh.write(_CRC.pack(zlib.crc32(payload)))


def load_feature_file(path, split: str = "test") -> Dataset:
    """Parse a DPFT file, validating checksums and record invariants."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise CorruptionError(f"truncated header at byte {len(blob)}")
    magic, version, count = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported DPFT version {version}")
    offset = _HEADER.size
    records = []
    for idx in range(count):
        start = offset
        if offset + _RECORD_HEAD.size > len(blob):
            raise CorruptionError(f"truncated record {idx} header at byte {offset}")
        cat, label, h, w, c, n_layers, hi, wi = _RECORD_HEAD.unpack_from(blob, offset)
        offset += _RECORD_HEAD.size
        feat_bytes = n_layers * h * w * c * 4
        mask_bytes = hi * wi
        end = offset + feat_bytes + mask_bytes
        if end + _CRC.size > len(blob):
            raise CorruptionError(f"truncated record {idx} payload at byte {len(blob)}")
        flat = np.frombuffer(blob, dtype="<f4", count=n_layers * h * w * c, offset=offset)
        layers = [flat[i * h * w * c:(i + 1) * h * w * c].reshape(h * w, c).copy()
                  for i in range(n_layers)]
        offset += feat_bytes
        mask = np.frombuffer(blob, dtype=np.uint8, count=mask_bytes, offset=offset).reshape(hi, wi).copy()
        offset += mask_bytes
        (crc,) = _CRC.unpack_from(blob, offset)
        offset += _CRC.size
        if crc != zlib.crc32(blob[start:start + _RECORD_HEAD.size + feat_bytes + mask_bytes]):
            raise CorruptionError(f"CRC mismatch in record {idx} at byte {start}")
        rec = FeatureRecord(category_id=cat, label=label, grid=(h, w), channels=c,
                            layers=layers, image_dims=(hi, wi), mask=mask)
        rec.validate()
        records.append(rec)
    if offset != len(blob):
        raise FormatError(f"{len(blob) - offset} trailing bytes after last record")
    return Dataset(split=split, records=records)
