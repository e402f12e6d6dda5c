"""Procedural datasets for offline experiments and tests.

``shapes`` renders small RGB images of geometric primitives (one class per
primitive) in two visual styles:

* domain ``"A"``: flat bright shapes on a dark, clean background;
* domain ``"B"``: warm-tinted shapes over a cool, smoothly textured
  background with sensor-like noise.

``phantom_slices`` renders complex-valued slices (two real channels) made of
ellipses with a smooth background phase, in an elongated ``"knee"`` style or
a nested ``"brain"`` style.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ._random import make_rng
from .data import PatchSpec, SampleRecord, extract_patches, write_manifest

SHAPES = ("disk", "square", "triangle", "cross", "ring", "hbar", "vbar", "diamond")


def _grid(size):
    c = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    return np.meshgrid(c, c, indexing="ij")  # yy, xx in [-1, 1]


def shape_mask(kind, size, cy, cx, r, angle=0.0):
    yy, xx = _grid(size)
    y, x = yy - cy, xx - cx
    ca, sa = np.cos(angle), np.sin(angle)
    u, v = ca * x + sa * y, -sa * x + ca * y
    if kind == "disk":
        m = u**2 + v**2 <= r**2
    elif kind == "square":
        m = (np.abs(u) <= r * 0.85) & (np.abs(v) <= r * 0.85)
    elif kind == "triangle":
        m = (v <= r * 0.7) & (v >= -r * 0.9 + 1.7 * np.abs(u))
    elif kind == "cross":
        t = r * 0.3
        m = ((np.abs(u) <= t) & (np.abs(v) <= r)) | ((np.abs(v) <= t) & (np.abs(u) <= r))
    elif kind == "ring":
        rr = np.sqrt(u**2 + v**2)
        m = (rr <= r) & (rr >= r * 0.55)
    elif kind == "hbar":
        m = (np.abs(u) <= r * 1.2) & (np.abs(v) <= r * 0.3)
    elif kind == "vbar":
        m = (np.abs(v) <= r * 1.2) & (np.abs(u) <= r * 0.3)
    elif kind == "diamond":
        m = np.abs(u) + np.abs(v) <= r
    else:
        raise ValueError(f"unknown shape {kind!r}")
    return m.astype(np.float64)


def _smooth_field(rng, size, n_waves=4):
    yy, xx = _grid(size)
    f = np.zeros((size, size))
    for _ in range(n_waves):
        ky, kx = rng.normal(0, 2.0, size=2)
        f += np.cos(np.pi * (ky * yy + kx * xx) + rng.uniform(0, 2 * np.pi))
    return f / n_waves


def render_shape(label, domain, rng, size=16):
    """One ``size x size x 3`` image of primitive ``SHAPES[label]`` in ``domain`` style."""
    kind = SHAPES[label]
    cy, cx = rng.uniform(-0.25, 0.25, size=2)
    r = rng.uniform(0.45, 0.65)
    angle = rng.uniform(-0.3, 0.3)
    m = shape_mask(kind, size, cy, cx, r, angle)[..., None]
    if domain == "A":
        color = np.full(3, 0.9) + rng.normal(0, 0.02, size=3)
        bg = np.full(3, 0.05)
        img = m * color + (1 - m) * bg + rng.normal(0, 0.02, size=(size, size, 3))
    elif domain == "B":
        color = np.array([0.85, 0.55, 0.3]) + rng.normal(0, 0.06, size=3)
        tex = _smooth_field(rng, size)[..., None] * 0.08 + np.array([0.2, 0.3, 0.45])
        img = m * color + (1 - m) * tex
        img = img + rng.normal(0, 0.04, size=(size, size, 3))
    else:
        raise ValueError(f"unknown domain {domain!r}")
    # rough per-domain standardization so both domains sit near zero mean, unit scale
    return (img - 0.4) / 0.3


def shapes(domain, per_class, classes=None, seed=0, size=16, prefix=None):
    """Labeled records of ``domain``; ``per_class`` samples of each class in ``classes``."""
    classes = range(len(SHAPES)) if classes is None else classes
    prefix = prefix or f"{domain}"
    out = []
    for c in classes:
        rng = make_rng(seed, ord(domain[0]), c)
        for k in range(per_class):
            out.append(
                SampleRecord(id=f"{prefix}/c{c}_{k:04d}", tensor=render_shape(c, domain, rng, size), label=c, domain=domain)
            )
    return out


def phantom_slice(style, rng, size=48):
    """Complex slice: sum of ellipses times a smooth phase, as ``size x size x 2``."""
    yy, xx = _grid(size)
    mag = np.zeros((size, size))
    if style == "brain":
        a, b = rng.uniform(0.75, 0.9), rng.uniform(0.6, 0.75)
        mag += 0.8 * (((yy / a) ** 2 + (xx / b) ** 2) <= 1)
        for _ in range(rng.integers(4, 8)):
            cy, cx = rng.uniform(-0.45, 0.45, size=2)
            ea, eb = rng.uniform(0.06, 0.25, size=2)
            th = rng.uniform(0, np.pi)
            u = np.cos(th) * (xx - cx) + np.sin(th) * (yy - cy)
            v = -np.sin(th) * (xx - cx) + np.cos(th) * (yy - cy)
            mag += rng.uniform(-0.5, 0.6) * (((u / ea) ** 2 + (v / eb) ** 2) <= 1)
    elif style == "knee":
        th0 = rng.uniform(-0.3, 0.3)
        for _ in range(rng.integers(3, 6)):
            c = rng.uniform(-0.6, 0.6)
            w = rng.uniform(0.08, 0.3)
            u = np.cos(th0) * xx + np.sin(th0) * yy
            mag += rng.uniform(0.3, 0.9) * (np.abs(u - c) <= w) * (np.abs(yy) <= rng.uniform(0.5, 0.95))
        mag += 0.15 * (np.sin(8 * np.pi * (np.cos(th0) * yy - np.sin(th0) * xx)) > 0.7)
    else:
        raise ValueError(f"unknown style {style!r}")
    mag = np.clip(mag, 0, None) + 0.02 * np.abs(rng.normal(size=(size, size)))
    phase = np.pi * _smooth_field(rng, size, n_waves=2) + rng.uniform(0, 2 * np.pi)
    z = mag * np.exp(1j * phase)
    return np.stack([z.real, z.imag], axis=-1)


def phantom_patches(style, n_slices, patch_spec: PatchSpec, seed=0, size=48):
    """Patches cut from ``n_slices`` phantom slices of ``style``."""
    out = []
    for s in range(n_slices):
        rng = make_rng(seed, ord(style[0]), s)
        sl = SampleRecord(id=f"{style}/s{s:04d}", tensor=phantom_slice(style, rng, size), domain=style)
        out.extend(extract_patches(sl, patch_spec))
    return out


def write_shapes_fixture(root, seed=0, source_per_class=64, target_per_class=10, probe_per_class=40, test_per_class=40):
    """Write manifests for an A -> B adaptation experiment under ``root``.

    Returns a dict of manifest paths: source, target, probe_train, test.
    """
    root = Path(root)
    sets = {
        "source": shapes("A", source_per_class, seed=seed, prefix="src"),
        "target": shapes("B", target_per_class, seed=seed + 1, prefix="tgt"),
        "probe_train": shapes("B", probe_per_class, seed=seed + 2, prefix="probe"),
        "test": shapes("B", test_per_class, seed=seed + 3, prefix="test"),
    }
    return {name: write_manifest(root / name / "manifest.txt", recs) for name, recs in sets.items()}


def write_phantom_fixture(root, seed=0, patch_size=16, source_slices=40, target_slices=10, test_slices=20):
    root = Path(root)
    spec = PatchSpec(patch_size=patch_size, patches_per_slice=10, seed=seed)
    sets = {
        "source": phantom_patches("knee", source_slices, spec, seed=seed),
        "target": phantom_patches("brain", target_slices, spec, seed=seed + 1),
        "test": phantom_patches("brain", test_slices, spec, seed=seed + 2),
    }
    return {name: write_manifest(root / name / "manifest.txt", recs) for name, recs in sets.items()}
