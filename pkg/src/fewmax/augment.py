"""CutMix blending and complex-valued augmentations.

All randomness comes from an explicit ``numpy.random.Generator``; callers
own the stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import SampleRecord
from .errors import CapacityError, DimensionError, ParameterError, SchemaError


@dataclass(frozen=True, eq=False)
class MixMask:
    """Binary keep-mask: ``True`` where the source image survives."""

    mask: np.ndarray
    realized_lambda: float
    box: tuple  # (top, left, height, width)


@dataclass(frozen=True, eq=False)
class BlendResult:
    mixed: np.ndarray
    lam: float
    partner: int
    mask: MixMask


@dataclass(frozen=True)
class AugPolicy:
    alpha: float = 1.0
    M: int = 4
    mri_mag_range: tuple = (0.5, 1.5)
    seed: int = 0
    # apply random magnitude scaling / phase rotation to complex samples
    complex_aug: bool = False

    def __post_init__(self):
        if not self.alpha > 0:
            raise ParameterError(f"alpha must be positive, got {self.alpha}")
        if self.M < 1:
            raise ParameterError(f"M must be >= 1, got {self.M}")
        low, high = self.mri_mag_range
        if not 0 < low <= high:
            raise ParameterError(f"mri_mag_range must satisfy 0 < low <= high, got {self.mri_mag_range}")
        object.__setattr__(self, "mri_mag_range", (float(low), float(high)))


def sample_lambda(alpha, rng) -> float:
    if not alpha > 0:
        raise ParameterError(f"alpha must be positive, got {alpha}")
    return float(rng.beta(alpha, alpha))


def make_mask(h, w, lam, rng) -> MixMask:
    """Rectangular cut with sides scaled by ``sqrt(1 - lam)`` and a uniform center.

    The box is clipped at the borders and the returned lambda is recomputed
    from the clipped area.
    """
    if not 0.0 <= lam <= 1.0:
        raise ParameterError(f"lam must lie in [0, 1], got {lam}")
    if h < 1 or w < 1:
        raise DimensionError(f"mask size must be positive, got {h}x{w}")
    cut = math.sqrt(1.0 - lam)
    cut_h, cut_w = int(h * cut), int(w * cut)
    cy, cx = int(rng.integers(h)), int(rng.integers(w))
    top, left = cy - cut_h // 2, cx - cut_w // 2
    y0, y1 = max(top, 0), min(top + cut_h, h)
    x0, x1 = max(left, 0), min(left + cut_w, w)
    bh, bw = max(y1 - y0, 0), max(x1 - x0, 0)
    mask = np.ones((h, w), dtype=bool)
    mask[y0 : y0 + bh, x0 : x0 + bw] = False
    return MixMask(mask=mask, realized_lambda=1.0 - (bh * bw) / (h * w), box=(y0, x0, bh, bw))


def apply_mask(x_i, x_j, mask: MixMask):
    """Pixels outside the box from ``x_i``, inside from ``x_j`` (``H x W x C``)."""
    return np.where(mask.mask[..., None], x_i, x_j)


def cutmix(x_i, x_j, lam, rng, partner=-1) -> BlendResult:
    x_i, x_j = np.asarray(x_i), np.asarray(x_j)
    if x_i.shape != x_j.shape:
        raise DimensionError(f"cannot blend shapes {x_i.shape} and {x_j.shape}")
    mm = make_mask(x_i.shape[0], x_i.shape[1], lam, rng)
    return BlendResult(mixed=apply_mask(x_i, x_j, mm), lam=mm.realized_lambda, partner=partner, mask=mm)


def blend_set(batch, i, policy: AugPolicy, rng) -> list[BlendResult]:
    """``policy.M`` independent CutMix blends of ``batch[i]`` with in-batch partners."""
    n = len(batch)
    if n < 2:
        raise CapacityError("blending needs a batch of at least 2 samples")
    if not 0 <= i < n:
        raise ParameterError(f"index {i} outside batch of size {n}")
    out = []
    for _ in range(policy.M):
        j = int(rng.integers(n - 1))
        if j >= i:
            j += 1
        lam = sample_lambda(policy.alpha, rng)
        out.append(cutmix(batch[i], batch[j], lam, rng, partner=j))
    return out


def blend_plan(batch, policy: AugPolicy, rng):
    """Blend sets for every sample of a batch, as stacked arrays.

    Returns ``(partners, lams, keep)`` with shapes ``(B, M)``, ``(B, M)`` and
    ``(B, M, H, W)``.  Consumes ``rng`` exactly as calling :func:`blend_set`
    for ``i = 0 .. B-1`` in order.
    """
    sets = [blend_set(batch, i, policy, rng) for i in range(len(batch))]
    partners = np.array([[b.partner for b in s] for s in sets], dtype=np.int64)
    lams = np.array([[b.lam for b in s] for s in sets], dtype=np.float64)
    keep = np.stack([np.stack([b.mask.mask for b in s]) for s in sets])
    return partners, lams, keep


def complex_scale_rotate(tensor, scale, phase):
    """Multiply a two-channel complex field by ``scale * exp(1j * phase)``."""
    tensor = np.asarray(tensor)
    if tensor.shape[-1] != 2:
        raise SchemaError(f"complex scaling needs 2 channels, got {tensor.shape[-1]}")
    z = (tensor[..., 0] + 1j * tensor[..., 1]) * (scale * np.exp(1j * phase))
    return np.stack([z.real, z.imag], axis=-1)


def mri_augment(patch: SampleRecord, policy: AugPolicy, rng) -> SampleRecord:
    """Random magnitude scaling and global phase rotation of a complex patch."""
    if patch.shape[-1] != 2:
        raise SchemaError(f"sample {patch.id!r} is not complex (C={patch.shape[-1]})")
    low, high = policy.mri_mag_range
    scale = rng.uniform(low, high)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    return patch.with_tensor(complex_scale_rotate(patch.tensor, scale, phase))
