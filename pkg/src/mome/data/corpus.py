"""Paired corpus generation and on-disk layout.

Directory layout::

    images.bin     uint32 LE header (count, H, W, C) + float32 LE pixels, row-major
    captions.txt   one caption per line; line i pairs with image i
    latents.jsonl  one scene record per line
    vocab.txt      one token per line; line number is the id
"""
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import DataIntegrityError
from .scenes import CHANNELS, IMAGE_SIZE, LatentScene, gen_pair, sample_latents
from .tokenizer import VOCAB

_HEADER = struct.Struct("<4I")


@dataclass
class Corpus:
    images: np.ndarray
    captions: list
    latents: list = field(default_factory=list)

    def __len__(self):
        return len(self.captions)

    def subset(self, idx):
        idx = list(idx)
        return Corpus(self.images[idx], [self.captions[i] for i in idx],
                      [self.latents[i] for i in idx] if self.latents else [])


def build_corpus(latents, image_size=IMAGE_SIZE):
    images = np.zeros((len(latents), image_size, image_size, CHANNELS), dtype=np.float32)
    captions = []
    for i, latent in enumerate(latents):
        images[i], caption = gen_pair(latent, image_size)
        captions.append(caption)
    return Corpus(images, captions, list(latents))


def generate_corpus(n, seed, exclude=(), image_size=IMAGE_SIZE):
    if n < 0:
        raise ValueError("corpus size must be non-negative")
    return build_corpus(sample_latents(n, seed, exclude), image_size)


def _atomic_write(path, data):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_corpus(corpus, directory, vocab=VOCAB):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    n = len(corpus)
    h, w, c = corpus.images.shape[1:] if n else (IMAGE_SIZE, IMAGE_SIZE, CHANNELS)
    payload = np.ascontiguousarray(corpus.images, dtype="<f4").tobytes()
    _atomic_write(d / "images.bin", _HEADER.pack(n, h, w, c) + payload)
    _atomic_write(d / "captions.txt", "".join(f"{c}\n" for c in corpus.captions).encode())
    lines = "".join(json.dumps(l.to_record(), sort_keys=True) + "\n" for l in corpus.latents)
    _atomic_write(d / "latents.jsonl", lines.encode())
    _atomic_write(d / "vocab.txt", "".join(f"{t}\n" for t in vocab).encode())


def load_corpus(directory):
    d = Path(directory)
    try:
        raw = (d / "images.bin").read_bytes()
        captions = (d / "captions.txt").read_text().splitlines()
    except FileNotFoundError as exc:
        raise DataIntegrityError(f"corpus file missing: {exc.filename}") from exc
    if len(raw) < _HEADER.size:
        raise DataIntegrityError("images.bin shorter than its header")
    n, h, w, c = _HEADER.unpack_from(raw)
    expected = _HEADER.size + 4 * n * h * w * c
    if len(raw) != expected:
        raise DataIntegrityError(f"images.bin has {len(raw)} bytes, header implies {expected}")
    if len(captions) != n:
        raise DataIntegrityError(f"{len(captions)} captions for {n} images")
    images = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(n, h, w, c).astype(np.float32)
    latents = []
    lpath = d / "latents.jsonl"
    if lpath.exists():
        latents = [LatentScene.from_record(json.loads(line)) for line in lpath.read_text().splitlines() if line]
        if latents and len(latents) != n:
            raise DataIntegrityError(f"{len(latents)} latent records for {n} images")
    vpath = d / "vocab.txt"
    if vpath.exists() and tuple(vpath.read_text().splitlines()) != VOCAB:
        raise DataIntegrityError("vocab.txt does not match the built-in vocabulary")
    return Corpus(images, captions, latents)
