"""Whole-word text masking and block-wise patch masking."""
import numpy as np

from ..errors import ContractError
from .tokenizer import MASK_ID, NO_WORD, TokenSequence

IGNORE_INDEX = -100
_FIRST_WORD_ID = 4  # ids below are specials


def whole_word_mask(tokens, prob=0.15, rng=None, corrupt=False, vocab_size=64):
    """Select words independently with probability ``prob`` and mask all their pieces.

    Returns ``(masked, labels)``: ``labels`` holds the original id at masked
    positions and ``IGNORE_INDEX`` elsewhere. With ``corrupt`` the BERT 80/10/10
    rule applies per selected word (mask / random token / keep); by default
    every selected piece becomes ``[MASK]``.
    """
    if not 0.0 <= prob <= 1.0:
        raise ContractError(f"mask probability {prob} outside [0, 1]")
    rng = np.random.default_rng() if rng is None else rng
    ids = tokens.ids.copy()
    labels = np.full(ids.shape, IGNORE_INDEX, dtype=np.int64)
    words = np.unique(tokens.word_ids[tokens.word_ids != NO_WORD])
    if words.size == 0:
        return TokenSequence(ids, tokens.word_ids.copy()), labels
    chosen = words[rng.random(words.size) < prob]
    for w in chosen:
        pos = np.nonzero(tokens.word_ids == w)[0]
        labels[pos] = tokens.ids[pos]
        if corrupt:
            u = rng.random()
            if u < 0.8:
                ids[pos] = MASK_ID
            elif u < 0.9:
                ids[pos] = rng.integers(_FIRST_WORD_ID, vocab_size, size=pos.size)
        else:
            ids[pos] = MASK_ID
    return TokenSequence(ids, tokens.word_ids.copy()), labels


def block_patch_mask(grid_h, grid_w, ratio, rng, max_block=3):
    """Boolean (grid_h * grid_w,) mask with ``round(ratio * N)`` cells set in rectangular blocks."""
    n = grid_h * grid_w
    target = int(round(ratio * n))
    if target < 1:
        raise ContractError("block_patch_mask needs at least one masked patch")
    mask = np.zeros((grid_h, grid_w), dtype=bool)
    count = 0
    while count < target:
        bh = int(rng.integers(1, min(max_block, grid_h) + 1))
        bw = int(rng.integers(1, min(max_block, grid_w) + 1))
        r = int(rng.integers(0, grid_h - bh + 1))
        c = int(rng.integers(0, grid_w - bw + 1))
        block = np.zeros_like(mask)
        block[r:r + bh, c:c + bw] = True
        fresh = np.flatnonzero(block & ~mask)
        take = fresh[: target - count]
        mask.reshape(-1)[take] = True
        count += take.size
    return mask.reshape(-1)
