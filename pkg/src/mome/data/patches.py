"""Image <-> patch-sequence reshaping."""
from dataclasses import dataclass

import numpy as np

from ..errors import DimensionError


@dataclass
class PatchGrid:
    patches: np.ndarray  # (N, P*P*C)
    H: int
    W: int
    C: int
    P: int

    @property
    def num_patches(self):
        return self.patches.shape[0]


def _check(h, w, p):
    if p <= 0 or h % p or w % p:
        raise DimensionError(f"patch size {p} does not divide image {h}x{w}")


def patchify_batch(images, p):
    """(B, H, W, C) -> (B, H*W/P^2, P*P*C), patches in row-major block order."""
    b, h, w, c = images.shape
    _check(h, w, p)
    x = images.reshape(b, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(b, (h // p) * (w // p), p * p * c))


def unpatchify_batch(patches, h, w, c, p):
    b = patches.shape[0]
    _check(h, w, p)
    x = patches.reshape(b, h // p, w // p, p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(b, h, w, c))


def patchify(image, p):
    h, w, c = image.shape
    return PatchGrid(patchify_batch(image[None], p)[0], h, w, c, p)


def unpatchify(grid):
    return unpatchify_batch(grid.patches[None], grid.H, grid.W, grid.C, grid.P)[0]
