"""Datasets (synthetic patterns, CIFAR-10 binary batches) and the distortion environment."""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import ops

DATASET_HEADER = b"PIPEFORGE-DS-v1\n"
CIFAR_RECORD = 3073

SEQUENCE_KINDS = ("exposure_then_noise", "noise_then_exposure", "exposure_only", "noise_only", "none")
DISTORTED_KINDS = SEQUENCE_KINDS[:4]
EXPOSURE_LEVELS = ("under", "well", "over")
NOISE_LEVELS = ("none", "low", "mid", "high")

DISTORTION_GAMMA = {"under": 2.2, "well": 1.0, "over": 0.45}
NOISE_SIGMA = {"none": 0.0, "low": 0.05, "mid": 0.15, "high": 0.30}

STAGE_PLANS = {
    "exposure_then_noise": ("denoising", "exposure_correction", "classification"),
    "noise_then_exposure": ("exposure_correction", "denoising", "classification"),
    "exposure_only": ("exposure_correction", "classification"),
    "noise_only": ("denoising", "classification"),
    "none": ("classification",),
}

PATTERNS = ("horizontal_stripes", "vertical_stripes", "checkerboard", "disk",
            "diagonal_gradient", "ring")


class DataFormatError(ValueError):
    pass


@dataclass
class LabeledImage:
    image: np.ndarray
    label: int


@dataclass(frozen=True)
class DistortionSpec:
    sequence_kind: str = "none"
    exposure_level: str = "well"
    noise_level: str = "none"

    def __post_init__(self):
        if self.sequence_kind not in SEQUENCE_KINDS:
            raise ValueError(f"unknown sequence kind {self.sequence_kind!r}")
        if self.exposure_level not in EXPOSURE_LEVELS or self.noise_level not in NOISE_LEVELS:
            raise ValueError(f"bad levels {self.exposure_level!r}/{self.noise_level!r}")
        if self.sequence_kind == "exposure_only" and self.noise_level != "none":
            raise ValueError("exposure_only requires noise_level none")
        if self.sequence_kind == "noise_only" and self.exposure_level != "well":
            raise ValueError("noise_only requires exposure_level well")
        if self.sequence_kind == "none" and (self.noise_level, self.exposure_level) != ("none", "well"):
            raise ValueError("sequence none carries no distortion")

    @property
    def label(self) -> str:
        return f"{self.sequence_kind}/{self.exposure_level}/{self.noise_level}"

    @property
    def is_distorted(self) -> bool:
        return self.sequence_kind != "none"


@dataclass
class EpisodeSpec:
    distorted: np.ndarray
    clean: np.ndarray
    label: int
    spec: DistortionSpec
    stage_plan: tuple[str, ...]


@dataclass
class Curriculum:
    """Distribution over sequence kinds, with level distributions used when a kind
    involves that channel."""
    sequences: dict = field(default_factory=lambda: {k: 0.25 for k in DISTORTED_KINDS})
    exposure: dict = field(default_factory=lambda: {"under": 0.5, "over": 0.5})
    noise: dict = field(default_factory=lambda: {"low": 1 / 3, "mid": 1 / 3, "high": 1 / 3})

    def __post_init__(self):
        for name, dist, keys in (("sequences", self.sequences, SEQUENCE_KINDS),
                                 ("exposure", self.exposure, EXPOSURE_LEVELS),
                                 ("noise", self.noise, NOISE_LEVELS)):
            if not dist or set(dist) - set(keys):
                raise ValueError(f"curriculum {name}: invalid keys {sorted(dist)}")
            vals = np.array(list(dist.values()), dtype=float)
            if (vals < 0).any() or abs(vals.sum() - 1.0) > 1e-6:
                raise ValueError(f"curriculum {name}: probabilities must be >= 0 and sum to 1")

    @classmethod
    def with_clean(cls, clean_fraction: float = 0.2) -> "Curriculum":
        w = (1 - clean_fraction) / 4
        return cls(sequences={**{k: w for k in DISTORTED_KINDS}, "none": clean_fraction})

    def to_dict(self) -> dict:
        return {"sequences": dict(self.sequences), "exposure": dict(self.exposure),
                "noise": dict(self.noise)}


def _choice(rng, dist: dict) -> str:
    keys = list(dist)
    p = np.array([dist[k] for k in keys], dtype=float)
    return keys[int(rng.choice(len(keys), p=p / p.sum()))]


def sample_distortion(rng: np.random.Generator, curriculum: Curriculum | None = None) -> DistortionSpec:
    c = curriculum or Curriculum()
    kind = _choice(rng, c.sequences)
    exposure = _choice(rng, c.exposure) if "exposure" in kind else "well"
    noise = _choice(rng, c.noise) if "noise" in kind else "none"
    return DistortionSpec(kind, exposure, noise)


def distort(img, spec: DistortionSpec, rng: np.random.Generator) -> np.ndarray:
    img = ops.as_image(img)
    g = DISTORTION_GAMMA[spec.exposure_level]
    sigma = NOISE_SIGMA[spec.noise_level]

    def expose(x):
        return ops.apply_gamma(x, g) if g != 1.0 else x

    def noise(x):
        return ops.add_gaussian_noise(x, sigma, rng)

    if spec.sequence_kind == "noise_then_exposure":
        out = expose(noise(img))
    else:
        out = noise(expose(img))
    return out


def make_episode(sample: LabeledImage, spec: DistortionSpec, rng: np.random.Generator) -> EpisodeSpec:
    return EpisodeSpec(distort(sample.image, spec, rng), sample.image, sample.label, spec,
                       STAGE_PLANS[spec.sequence_kind])


def stream_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for one (seed, phase, index, ...) coordinate."""
    return np.random.default_rng([int(seed), *(int(k) for k in keys)])


# -- synthetic dataset ------------------------------------------------------------

def _pattern(kind: str, n: int, rng: np.random.Generator) -> np.ndarray:
    y, x = np.mgrid[0:n, 0:n].astype(float)
    if kind in ("horizontal_stripes", "vertical_stripes"):
        period = rng.uniform(4.0, 8.0)
        phase = rng.uniform(0.0, period)
        t = y if kind == "horizontal_stripes" else x
        return np.where(np.sin(2 * np.pi * (t + phase) / period) >= 0, 1.0, -1.0)
    if kind == "checkerboard":
        cell = rng.uniform(2.5, 4.5)
        px, py = rng.uniform(0.0, 2 * cell, size=2)
        return np.where(np.sin(np.pi * (x + px) / cell) * np.sin(np.pi * (y + py) / cell) >= 0,
                        1.0, -1.0)
    cy, cx = (n - 1) / 2 + rng.uniform(-n / 8, n / 8, size=2)
    r = np.hypot(x - cx, y - cy)
    if kind == "disk":
        radius = rng.uniform(n / 5, n / 3)
        return np.where(r <= radius, 1.0, -1.0)
    if kind == "ring":
        radius = rng.uniform(n / 4, n / 2.5)
        width = rng.uniform(1.0, 2.0)
        return np.where(np.abs(r - radius) <= width, 1.0, -1.0)
    if kind == "diagonal_gradient":
        slope = rng.uniform(0.7, 1.0)
        return np.clip(slope * ((x + y) / (n - 1) - 1.0), -1.0, 1.0)
    raise ValueError(kind)


def gen_synthetic(count: int, size: int, class_count: int, rng: np.random.Generator,
                  contrast=(0.08, 0.16), brightness_band: float | None = 0.1) -> list[LabeledImage]:
    """Balanced grayscale pattern dataset, one pattern family per class.

    Base intensity lies in [0.35, 0.65].  With ``brightness_band`` set, each
    class draws its base from a band around its own center, so brightness is a
    (non-essential) class cue the way color statistics are in natural images;
    ``None`` draws every base uniformly.
    """
    if size < 8:
        raise ValueError("size must be >= 8")
    if not 2 <= class_count <= 6:
        raise ValueError("class_count must be in 2..6")
    if count < 1:
        raise ValueError("count must be positive")
    labels = np.arange(count) % class_count
    rng.shuffle(labels)
    out = []
    for label in labels:
        pat = _pattern(PATTERNS[label], size, rng)
        if brightness_band is None:
            base = rng.uniform(0.35, 0.65)
        else:
            center = 0.35 + 0.3 * (label + 0.5) / class_count
            base = rng.uniform(max(0.35, center - brightness_band), min(0.65, center + brightness_band))
        amp = rng.uniform(*contrast)
        img = np.clip(base + amp * pat, 0.0, 1.0)[:, :, None]
        out.append(LabeledImage(img, int(label)))
    return out


# -- CIFAR-10 binary --------------------------------------------------------------

def parse_cifar10_bytes(data: bytes) -> list[LabeledImage]:
    if len(data) % CIFAR_RECORD != 0:
        raise DataFormatError(f"size {len(data)} is not a multiple of {CIFAR_RECORD}")
    raw = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = raw[:, 0]
    if (labels > 9).any():
        raise DataFormatError(f"label byte {int(labels.max())} > 9")
    # planes R, G, B each 32x32 row-major -> HxWxC
    pix = raw[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1) / 255.0
    return [LabeledImage(pix[i].copy(), int(labels[i])) for i in range(len(raw))]


def load_cifar10_batch(path) -> list[LabeledImage]:
    with open(path, "rb") as fh:
        return parse_cifar10_bytes(fh.read())


# -- dataset cache ----------------------------------------------------------------

def save_dataset(path, samples: list[LabeledImage], class_count: int) -> None:
    if not samples:
        raise ValueError("empty dataset")
    h, w, c = samples[0].image.shape
    if h != w:
        raise ValueError("cache holds square images only")
    pixels = np.stack([s.image for s in samples]).astype("<f8")
    labels = np.array([s.label for s in samples], dtype="<u1")
    payload = DATASET_HEADER + struct.pack("<IIII", len(samples), h, class_count, c)
    payload += pixels.tobytes() + labels.tobytes()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def load_dataset(path) -> tuple[list[LabeledImage], int]:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(DATASET_HEADER):
        raise DataFormatError(f"{path}: missing {DATASET_HEADER!r} header")
    off = len(DATASET_HEADER)
    count, size, class_count, channels = struct.unpack_from("<IIII", data, off)
    off += 16
    npix = count * size * size * channels
    expected = off + 8 * npix + count
    if len(data) != expected:
        raise DataFormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    pixels = np.frombuffer(data, dtype="<f8", count=npix, offset=off)
    pixels = pixels.reshape(count, size, size, channels)
    labels = np.frombuffer(data, dtype="<u1", count=count, offset=off + 8 * npix)
    return [LabeledImage(pixels[i].copy(), int(labels[i])) for i in range(count)], class_count


def split(samples: list, fractions=(0.6, 0.2, 0.2)) -> tuple[list, ...]:
    n = len(samples)
    cuts = np.cumsum([int(round(f * n)) for f in fractions[:-1]])
    parts, start = [], 0
    for c in cuts:
        parts.append(samples[start:c])
        start = c
    parts.append(samples[start:])
    return tuple(parts)
