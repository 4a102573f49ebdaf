"""Procedural stand-in for the histopathology corpus.

Each subclass gets its own texture recipe: tissue colour, stripe frequency
and orientation, and a density of dark "nuclei" blobs. Magnification is
simulated by scaling feature size. ``separation`` pulls every recipe toward
the shared average, so 1.0 gives easily separable classes and smaller
values give overlapping ones.
"""

import os
from dataclasses import dataclass

import numpy as np

from .data import MAGNIFICATIONS, SUBCLASSES, CORPUS_COUNTS, DatasetManifest, SampleRecord, save_manifest
from .errors import InputError
from .imaging import to_uint8, write_ppm


@dataclass(frozen=True)
class TextureSpec:
    color: tuple  # RGB in [0, 1]
    frequency: float  # stripe cycles per image at 100X
    orientation: float  # degrees
    blobs: float  # expected nuclei per image at 100X


DEFAULT_TEXTURES = {
    "A": TextureSpec((0.88, 0.58, 0.72), 2.0, 0.0, 2.0),
    "F": TextureSpec((0.74, 0.44, 0.78), 4.0, 45.0, 4.0),
    "TA": TextureSpec((0.93, 0.74, 0.82), 3.0, 90.0, 3.0),
    "PT": TextureSpec((0.68, 0.62, 0.88), 5.0, 135.0, 5.0),
    "DC": TextureSpec((0.52, 0.28, 0.58), 6.0, 22.5, 12.0),
    "LC": TextureSpec((0.66, 0.38, 0.52), 2.5, 112.5, 9.0),
    "MC": TextureSpec((0.82, 0.78, 0.92), 3.5, 67.5, 7.0),
    "PC": TextureSpec((0.58, 0.50, 0.66), 4.5, 157.5, 10.0),
}

MAGNIFICATION_SCALE = {40: 0.6, 100: 1.0, 200: 1.4, 400: 1.9}


def _blend(spec, mean, separation):
    s = separation
    return TextureSpec(
        tuple(s * c + (1 - s) * m for c, m in zip(spec.color, mean.color)),
        s * spec.frequency + (1 - s) * mean.frequency,
        spec.orientation,
        s * spec.blobs + (1 - s) * mean.blobs,
    )


def _mean_spec(textures):
    specs = list(textures.values())
    return TextureSpec(
        tuple(np.mean([s.color for s in specs], axis=0)),
        float(np.mean([s.frequency for s in specs])),
        0.0,
        float(np.mean([s.blobs for s in specs])),
    )


def render_texture(spec, image_size, magnification, rng, noise=0.04, jitter=0.05):
    """One (H, W, 3) float image in [0, 1]."""
    scale = MAGNIFICATION_SCALE[magnification]
    yy, xx = np.mgrid[0:image_size, 0:image_size] / image_size
    theta = np.deg2rad(spec.orientation + rng.normal(0.0, 8.0))
    freq = spec.frequency / scale * (1.0 + rng.normal(0.0, jitter))
    phase = rng.uniform(0.0, 2 * np.pi)
    wave = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    color = np.clip(np.asarray(spec.color) + rng.normal(0.0, jitter, 3), 0.0, 1.0)
    img = color * (1.0 + 0.18 * wave[..., None])

    n_blobs = rng.poisson(spec.blobs / scale)
    radius = 0.045 * scale * image_size
    nucleus = np.array([0.30, 0.15, 0.45])
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0, image_size, 2)
        r = radius * rng.uniform(0.7, 1.3)
        d2 = ((yy * image_size - cy) ** 2 + (xx * image_size - cx) ** 2) / (r * r)
        weight = np.exp(-d2)[..., None]
        img = img * (1 - weight) + nucleus * weight
    img = img + rng.normal(0.0, noise, img.shape)
    return np.clip(img, 0.0, 1.0)


def uniform_counts(per_class, magnifications=MAGNIFICATIONS, subclasses=SUBCLASSES):
    return {(s, m): per_class for s in subclasses for m in magnifications}


def corpus_counts(total=None, scale=None, minimum=1):
    """Counts proportional to the public corpus; give ``scale`` or a target ``total``."""
    grand = sum(sum(row.values()) for row in CORPUS_COUNTS.values())
    if scale is None:
        scale = 1.0 if total is None else total / grand
    return {(s, m): max(minimum, int(round(CORPUS_COUNTS[m][s] * scale)))
            for m in MAGNIFICATIONS for s in SUBCLASSES}


def generate_synthetic(out_dir, counts=None, per_class=50, image_size=32, seed=0,
                       textures=None, separation=1.0, noise=0.04, jitter=0.05,
                       patients_per_subclass=3, prefix=""):
    """Write images plus ``manifest.txt`` under ``out_dir``; return the manifest.

    ``counts`` maps (subclass, magnification) to an image count and defaults
    to ``per_class`` for every subclass at every magnification. Output is a
    pure function of the arguments.
    """
    if counts is None:
        counts = uniform_counts(per_class)
    textures = dict(textures or DEFAULT_TEXTURES)
    if not 0.0 <= separation <= 1.0:
        raise InputError("separation must lie in [0, 1]")
    mean = _mean_spec(textures)
    try:
        os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
    records = []
    for (sub, mag) in sorted(counts, key=lambda k: (SUBCLASSES.index(k[0]), k[1])):
        spec = _blend(textures[sub], mean, separation)
        for i in range(counts[(sub, mag)]):
            rng = np.random.default_rng([int(seed), SUBCLASSES.index(sub), mag, i])
            img = render_texture(spec, image_size, mag, rng, noise=noise, jitter=jitter)
            sid = f"{prefix}{sub}-{mag}-{i:04d}"
            rel = os.path.join("images", f"{sid}.ppm")
            write_ppm(os.path.join(out_dir, rel), to_uint8(img))
            records.append(SampleRecord(sid, rel, sub, mag, f"{sub}-P{i % patients_per_subclass}"))
    manifest = DatasetManifest(records, root=os.path.abspath(out_dir))
    save_manifest(manifest, os.path.join(out_dir, "manifest.txt"))
    return manifest
