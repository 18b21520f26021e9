"""Closed-vocabulary word tokenizer.

The vocabulary has 64 ids: 4 specials, 48 whole words, and 6 longer words that
are split into two pieces each. Pieces of one word share a word index, which is
what whole-word masking keys on.
"""
from dataclasses import dataclass

import numpy as np

from ..errors import VocabularyError

PAD, MASK, T_CLS, T_SEP = "[PAD]", "[MASK]", "[T_CLS]", "[T_SEP]"
SPECIALS = (PAD, MASK, T_CLS, T_SEP)
PAD_ID, MASK_ID, CLS_ID, SEP_ID = range(4)
NO_WORD = -1

BASE_WORDS = (
    # shapes, colours, positions, sizes
    "square", "circle", "cross", "ring", "stripe", "column",
    "red", "green", "blue", "cyan", "white",
    "top", "bottom", "left", "right",
    "small", "large",
    # caption grammar
    "a", "one", "in", "at", "the", "corner",
    # questions and statements
    "what", "where", "is", "color", "shape", "size", "it", "of", "and", "both",
    "images", "show", "there", "this", "on", "with", "side", "sits", "placed",
    "an", "two", "same", "does", "are", "scene",
)

SPLIT_WORDS = {
    "triangle": ("tri", "##angle"),
    "diamond": ("dia", "##mond"),
    "yellow": ("yel", "##low"),
    "magenta": ("mag", "##enta"),
    "orange": ("or", "##ange"),
    "picture": ("pic", "##ture"),
}

VOCAB = SPECIALS + BASE_WORDS + tuple(p for pieces in SPLIT_WORDS.values() for p in pieces)
assert len(BASE_WORDS) == 48 and len(VOCAB) == 64


@dataclass
class TokenSequence:
    ids: np.ndarray
    word_ids: np.ndarray

    def __len__(self):
        return len(self.ids)


class Tokenizer:
    def __init__(self, vocab=VOCAB, max_len=24):
        self.vocab = tuple(vocab)
        self.index = {tok: i for i, tok in enumerate(self.vocab)}
        self.max_len = max_len

    def __len__(self):
        return len(self.vocab)

    def encode(self, text, max_len=None):
        """Whitespace-split ``text``; prepend T_CLS, append T_SEP, truncate keeping T_SEP."""
        max_len = self.max_len if max_len is None else max_len
        ids = [CLS_ID]
        word_ids = [NO_WORD]
        for w, word in enumerate(text.split()):
            if word in SPLIT_WORDS:
                pieces = SPLIT_WORDS[word]
            elif word in self.index and word not in SPECIALS:
                pieces = (word,)
            else:
                raise VocabularyError(f"word {word!r} is not in the vocabulary")
            for piece in pieces:
                ids.append(self.index[piece])
                word_ids.append(w)
        ids = ids[: max_len - 1] + [SEP_ID]
        word_ids = word_ids[: max_len - 1] + [NO_WORD]
        return TokenSequence(np.array(ids, dtype=np.int64), np.array(word_ids, dtype=np.int64))

    def decode(self, ids):
        words = []
        for i in ids:
            tok = self.vocab[int(i)]
            if tok in (PAD, T_CLS, T_SEP):
                continue
            if tok.startswith("##") and words:
                words[-1] += tok[2:]
            else:
                words.append(tok)
        return " ".join(words)
