"""Batch assembly with simulated worker partitioning."""
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError
from .masking import IGNORE_INDEX, whole_word_mask
from .tokenizer import PAD_ID


@dataclass
class MultimodalBatch:
    patches: np.ndarray      # (B, N, P*P*C)
    token_ids: np.ndarray    # (B, T) unmasked, PAD-padded
    text_mask: np.ndarray    # (B, T) True at real tokens
    mlm_ids: np.ndarray      # (B, T) after whole-word masking
    mlm_labels: np.ndarray   # (B, T) original ids at masked slots, IGNORE_INDEX elsewhere
    pair_index: np.ndarray   # (B,) image i pairs with text pair_index[i]
    worker_ids: np.ndarray   # (B,)
    num_workers: int

    def __len__(self):
        return len(self.pair_index)

    def worker_rows(self, worker):
        return np.nonzero(self.worker_ids == worker)[0]


def pad_ids(seqs, pad=PAD_ID):
    length = max(len(s) for s in seqs)
    out = np.full((len(seqs), length), pad, dtype=np.int64)
    mask = np.zeros((len(seqs), length), dtype=bool)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
        mask[i, : len(s)] = True
    return out, mask


def worker_partition(batch_size, num_workers):
    """Round-robin worker id per example."""
    if num_workers < 1 or batch_size % num_workers:
        raise ConfigError(f"batch size {batch_size} is not divisible by {num_workers} workers")
    return np.arange(batch_size) % num_workers


def make_batch(pairs, num_workers=1, mask_prob=0.15, rng=None, corrupt=False):
    """Assemble ``pairs`` of ``(patches, TokenSequence)`` into a batch.

    Example i is the positive pair (image i, text i) and lives on worker
    ``i % num_workers``.
    """
    workers = worker_partition(len(pairs), num_workers)
    rng = np.random.default_rng(0) if rng is None else rng
    patches = np.stack([p for p, _ in pairs])
    tokens = [t for _, t in pairs]
    masked, labels = zip(*(whole_word_mask(t, mask_prob, rng, corrupt) for t in tokens))
    ids, text_mask = pad_ids([t.ids for t in tokens])
    mlm_ids, _ = pad_ids([m.ids for m in masked])
    mlm_labels, _ = pad_ids(labels, pad=IGNORE_INDEX)
    return MultimodalBatch(patches, ids, text_mask, mlm_ids, mlm_labels,
                           np.arange(len(pairs)), workers, num_workers)
