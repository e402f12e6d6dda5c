"""Dataset ingestion, few-shot subsetting, patch extraction and normalization.

Samples are held as ``H x W x C`` float arrays.  Complex-valued data uses two
real channels (real, imaginary).  Labels ride along for evaluation but the
training code only ever sees :meth:`SampleRecord.without_label` copies.

Manifest format (whitespace separated, ``#`` starts a comment)::

    path label domain
    slices/a.npy 3 target
    slices/b.npy - target

Paths are resolved relative to the manifest's directory; ``-`` marks a
missing label.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ._random import make_rng, stable_key
from .errors import CapacityError, DataError, DimensionError, LoadError, ParameterError, SchemaError

MANIFEST_HEADER = ("path", "label", "domain")


@dataclass(frozen=True, eq=False)
class SampleRecord:
    id: str
    tensor: np.ndarray
    label: Optional[int] = None
    domain: str = ""

    def __post_init__(self):
        t = np.asarray(self.tensor)
        if t.ndim != 3:
            raise DimensionError(f"sample {self.id!r}: expected H x W x C tensor, got shape {t.shape}")
        if not np.all(np.isfinite(t)):
            raise DataError(f"sample {self.id!r} contains non-finite values")
        if self.label is not None and self.label < 0:
            raise DataError(f"sample {self.id!r} has negative label {self.label}")
        object.__setattr__(self, "tensor", t)

    @property
    def shape(self):
        return self.tensor.shape

    def with_tensor(self, tensor):
        return dataclasses.replace(self, tensor=tensor)

    def without_label(self):
        return dataclasses.replace(self, label=None)


@dataclass(frozen=True)
class FewShotSpec:
    class_ids: tuple
    per_class: int
    seed: int = 0

    def __post_init__(self):
        ids = tuple(int(c) for c in self.class_ids)
        if not ids:
            raise ParameterError("class_ids must be non-empty")
        if len(set(ids)) != len(ids):
            raise ParameterError(f"class_ids must be distinct, got {ids}")
        if self.per_class < 1:
            raise ParameterError(f"per_class must be >= 1, got {self.per_class}")
        object.__setattr__(self, "class_ids", ids)


@dataclass(frozen=True)
class PatchSpec:
    patch_size: int
    patches_per_slice: int
    seed: int = 0

    def __post_init__(self):
        if self.patch_size < 1 or self.patches_per_slice < 1:
            raise ParameterError("patch_size and patches_per_slice must be positive")


def _as_hwc(arr):
    if np.iscomplexobj(arr):
        if arr.ndim != 2:
            raise SchemaError(f"complex arrays must be 2-D, got shape {arr.shape}")
        return np.stack([arr.real, arr.imag], axis=-1).astype(np.float64)
    if arr.ndim == 2:
        arr = arr[..., None]
    return np.asarray(arr, dtype=np.float64)


def read_manifest(manifest_path):
    """Parse a manifest into ``(path, label, domain)`` tuples."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise LoadError(f"manifest not found: {manifest_path}")
    rows = []
    lines = [ln.split("#", 1)[0].strip() for ln in manifest_path.read_text().splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines or tuple(lines[0].split()) != MANIFEST_HEADER:
        raise SchemaError(f"{manifest_path}: first line must be the header {' '.join(MANIFEST_HEADER)!r}")
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split()
        if len(fields) != 3:
            raise SchemaError(f"{manifest_path}:{lineno}: expected 3 fields, got {len(fields)}")
        path, label, domain = fields
        if label == "-":
            label = None
        else:
            try:
                label = int(label)
            except ValueError:
                raise SchemaError(f"{manifest_path}:{lineno}: label {label!r} is not an integer") from None
        rows.append((manifest_path.parent / path, label, domain))
    return rows


def load_dataset(manifest_path) -> list[SampleRecord]:
    """Load every sample listed in a manifest, in manifest order."""
    manifest_path = Path(manifest_path)
    records = []
    channels = None
    for path, label, domain in read_manifest(manifest_path):
        if not path.is_file():
            raise LoadError(f"sample file not found: {path}")
        try:
            arr = np.load(path, allow_pickle=False)
        except (OSError, ValueError) as exc:
            raise LoadError(f"cannot read {path}: {exc}") from exc
        arr = _as_hwc(arr)
        if channels is None:
            channels = arr.shape[-1]
        elif arr.shape[-1] != channels:
            raise SchemaError(
                f"{path}: has {arr.shape[-1]} channels but the dataset started with {channels}"
            )
        sample_id = path.relative_to(manifest_path.parent).with_suffix("").as_posix()
        records.append(SampleRecord(id=sample_id, tensor=arr, label=label, domain=domain))
    return records


def write_manifest(manifest_path, records, subdir="samples"):
    """Write records as ``.npy`` files plus a manifest; inverse of :func:`load_dataset`."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    (root / subdir).mkdir(parents=True, exist_ok=True)
    lines = [" ".join(MANIFEST_HEADER)]
    for rec in records:
        rel = Path(subdir) / (rec.id.replace("/", "__") + ".npy")
        np.save(root / rel, rec.tensor)
        label = "-" if rec.label is None else str(rec.label)
        lines.append(f"{rel.as_posix()} {label} {rec.domain or '-'}")
    manifest_path.write_text("\n".join(lines) + "\n")
    return manifest_path


def subset_few_shot(records: Sequence[SampleRecord], spec: FewShotSpec) -> list[SampleRecord]:
    """Pick ``spec.per_class`` records for each requested class.

    Each class draws from its own stream keyed on ``(seed, class_id)``.
    Output is grouped by ``spec.class_ids`` order and keeps input order
    within a class, which makes the operation idempotent.
    """
    out = []
    for cid in spec.class_ids:
        members = [r for r in records if r.label == cid]
        if len(members) < spec.per_class:
            raise CapacityError(
                f"class {cid} has {len(members)} labeled records, {spec.per_class} requested"
            )
        rng = make_rng(spec.seed, cid)
        picked = np.sort(rng.choice(len(members), size=spec.per_class, replace=False))
        out.extend(members[k] for k in picked)
    return out


def extract_patches(slice_: SampleRecord, spec: PatchSpec) -> list[SampleRecord]:
    """Cut square patches at uniformly drawn top-left corners."""
    h, w, _ = slice_.shape
    p = spec.patch_size
    if p > min(h, w):
        raise DimensionError(f"patch_size {p} exceeds slice {slice_.id!r} of size {h}x{w}")
    rng = make_rng(spec.seed, stable_key(slice_.id))
    tops = rng.integers(0, h - p + 1, size=spec.patches_per_slice)
    lefts = rng.integers(0, w - p + 1, size=spec.patches_per_slice)
    patches = []
    for k, (top, left) in enumerate(zip(tops, lefts)):
        patch = slice_.tensor[top : top + p, left : left + p, :].copy()
        patches.append(
            SampleRecord(id=f"{slice_.id}/p{k}", tensor=patch, label=slice_.label, domain=slice_.domain)
        )
    return patches


def _check_stats(record, mean, std):
    mean = np.asarray(mean, dtype=np.float64).reshape(-1)
    std = np.asarray(std, dtype=np.float64).reshape(-1)
    c = record.shape[-1]
    if mean.size != c or std.size != c:
        raise DimensionError(f"stats have {mean.size}/{std.size} channels, sample has {c}")
    if np.any(std <= 0):
        raise ParameterError(f"standard deviations must be positive, got {std.tolist()}")
    return mean, std


def normalize(record: SampleRecord, mean, std) -> SampleRecord:
    mean, std = _check_stats(record, mean, std)
    return record.with_tensor((record.tensor - mean) / std)


def denormalize(record: SampleRecord, mean, std) -> SampleRecord:
    mean, std = _check_stats(record, mean, std)
    return record.with_tensor(record.tensor * std + mean)


def channel_stats(records):
    """Per-channel mean and standard deviation over all pixels of ``records``."""
    stacked = np.stack([r.tensor for r in records])
    mean = stacked.mean(axis=(0, 1, 2))
    std = stacked.std(axis=(0, 1, 2))
    return mean, np.where(std > 0, std, 1.0)


def stack_tensors(records):
    """``N x C x H x W`` float array, the layout the networks consume."""
    return np.stack([r.tensor for r in records]).transpose(0, 3, 1, 2)


def magnitude(record):
    """Per-pixel modulus of a two-channel complex record, ``H x W``."""
    if record.shape[-1] != 2:
        raise SchemaError(f"sample {record.id!r} is not complex (C={record.shape[-1]})")
    return np.hypot(record.tensor[..., 0], record.tensor[..., 1])
