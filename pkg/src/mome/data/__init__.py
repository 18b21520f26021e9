"""Synthetic paired corpus, tokenizer, patching, masking and batching."""
from .batching import MultimodalBatch, make_batch, pad_ids, worker_partition
from .corpus import Corpus, build_corpus, generate_corpus, load_corpus, save_corpus
from .masking import IGNORE_INDEX, block_patch_mask, whole_word_mask
from .patches import PatchGrid, patchify, patchify_batch, unpatchify, unpatchify_batch
from .scenes import COLORS, POSITIONS, SHAPES, SIZES, LatentScene, describe, gen_pair, render, sample_latents
from .tokenizer import CLS_ID, MASK_ID, PAD_ID, SEP_ID, VOCAB, TokenSequence, Tokenizer
