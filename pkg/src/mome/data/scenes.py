"""Procedural image-caption pairs.

A :class:`LatentScene` fixes a shape, colour, quadrant and size. The image draws
that shape in that quadrant and adds Gaussian pixel noise; the caption lists the
attributes in a fixed order, with a few filler words picked by the scene seed.
"""
import itertools
from dataclasses import asdict, dataclass

import numpy as np

SHAPES = ("square", "circle", "triangle", "cross", "diamond", "ring", "stripe", "column")
COLORS = ("red", "green", "blue", "yellow", "cyan", "magenta", "white", "orange")
POSITIONS = ("top left", "top right", "bottom left", "bottom right")
SIZES = ("small", "large")

RGB = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
    "white": (1.0, 1.0, 1.0),
    "orange": (1.0, 0.5, 0.0),
}

IMAGE_SIZE = 16
CHANNELS = 3
NOISE_STD = 0.05

_PREFIXES = ("a", "one")
_PREPOSITIONS = ("in", "at")
_SUFFIXES = ("", " corner")


@dataclass(frozen=True)
class LatentScene:
    shape: int
    color: int
    position: int
    size: int
    seed: int = 0

    @property
    def attributes(self):
        return (self.shape, self.color, self.position, self.size)

    def to_record(self):
        return asdict(self)

    @classmethod
    def from_record(cls, record):
        return cls(**{k: int(record[k]) for k in ("shape", "color", "position", "size", "seed")})


def all_attribute_tuples():
    return list(itertools.product(range(len(SHAPES)), range(len(COLORS)), range(len(POSITIONS)), range(len(SIZES))))


def _shape_mask(shape, s):
    i, j = np.mgrid[0:s, 0:s]
    c = (s - 1) / 2.0
    name = SHAPES[shape]
    if name == "square":
        return np.ones((s, s), dtype=bool)
    if name == "circle":
        return (i - c) ** 2 + (j - c) ** 2 <= (s / 2.0) ** 2 - 0.5
    if name == "triangle":
        return np.abs(j - c) <= (i + 0.5) / 2.0
    if name == "cross":
        return (np.abs(i - c) < 1.0) | (np.abs(j - c) < 1.0)
    if name == "diamond":
        return np.abs(i - c) + np.abs(j - c) <= s / 2.0
    if name == "ring":
        return (i == 0) | (j == 0) | (i == s - 1) | (j == s - 1)
    if name == "stripe":
        return np.broadcast_to(np.abs(i - c) < 1.0, (s, s))
    if name == "column":
        return np.broadcast_to(np.abs(j - c) < 1.0, (s, s))
    raise ValueError(name)


def render(latent, image_size=IMAGE_SIZE, noise_std=NOISE_STD):
    """H x W x 3 float32 image of ``latent`` plus seeded noise."""
    half = image_size // 2
    box = half if SIZES[latent.size] == "large" else half - 2
    offset = (half - box) // 2
    row0 = (latent.position // 2) * half + offset
    col0 = (latent.position % 2) * half + offset
    image = np.zeros((image_size, image_size, CHANNELS), dtype=np.float32)
    mask = _shape_mask(latent.shape, box)
    region = image[row0:row0 + box, col0:col0 + box]
    region[mask] = RGB[COLORS[latent.color]]
    rng = np.random.default_rng([latent.seed, 0])
    image += rng.normal(0.0, noise_std, size=image.shape).astype(np.float32)
    return image


def describe(latent):
    rng = np.random.default_rng([latent.seed, 1])
    prefix = _PREFIXES[rng.integers(len(_PREFIXES))]
    prep = _PREPOSITIONS[rng.integers(len(_PREPOSITIONS))]
    suffix = _SUFFIXES[rng.integers(len(_SUFFIXES))]
    return (f"{prefix} {SIZES[latent.size]} {COLORS[latent.color]} {SHAPES[latent.shape]} "
            f"{prep} the {POSITIONS[latent.position]}{suffix}")


def gen_pair(latent, image_size=IMAGE_SIZE):
    return render(latent, image_size), describe(latent)


def sample_latents(n, seed, exclude=()):
    """``n`` scenes over shuffled attribute tuples, each with its own noise seed.

    Tuples are distinct until the 512 combinations (minus ``exclude``) run out,
    after which the cycle repeats with fresh seeds.
    """
    rng = np.random.default_rng(seed)
    pool = [t for t in all_attribute_tuples() if t not in set(exclude)]
    out = []
    while len(out) < n:
        order = rng.permutation(len(pool))
        for k in order[: n - len(out)]:
            out.append(LatentScene(*pool[k], seed=int(rng.integers(2**31))))
    return out
