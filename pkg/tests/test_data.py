import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mome.data import (
    CLS_ID, COLORS, IGNORE_INDEX, MASK_ID, SEP_ID, VOCAB, LatentScene, Tokenizer, block_patch_mask,
    describe, gen_pair, generate_corpus, load_corpus, make_batch, patchify,
    sample_latents, save_corpus, unpatchify, whole_word_mask, worker_partition,
)
from mome.data.scenes import all_attribute_tuples
from mome.errors import ConfigError, DataIntegrityError, DimensionError, VocabularyError


# -- scenes -------------------------------------------------------------------
def test_gen_pair_deterministic():
    lat = LatentScene(2, 3, 1, 0, seed=99)
    (a, ca), (b, cb) = gen_pair(lat), gen_pair(lat)
    assert a.tobytes() == b.tobytes() and ca == cb


def test_color_change_changes_only_the_color_word():
    for c in range(1, len(COLORS)):
        a = describe(LatentScene(1, 0, 2, 1, seed=5)).split()
        b = describe(LatentScene(1, c, 2, 1, seed=5)).split()
        diff = [(x, y) for x, y in zip(a, b) if x != y]
        assert len(a) == len(b) and diff == [(COLORS[0], COLORS[c])]


def test_512_distinct_latents_give_distinct_captions():
    assert len(all_attribute_tuples()) == 512
    caps = generate_corpus(512, seed=3).captions
    assert len(set(caps)) == 512


def test_sample_latents_respects_exclusion():
    excluded = all_attribute_tuples()[:100]
    lat = sample_latents(600, 0, exclude=excluded)
    assert not {l.attributes for l in lat} & set(excluded)


def test_image_shows_the_colour():
    img, _ = gen_pair(LatentScene(0, 0, 0, 1, seed=1))  # large red square, top left
    quad = img[:8, :8]
    assert quad[..., 0].mean() > quad[..., 2].mean() + 0.3


# -- patches ------------------------------------------------------------------
def test_patchify_shapes():
    g = patchify(np.zeros((16, 16, 3)), 4)
    assert g.patches.shape == (16, 48)
    assert patchify(np.zeros((224, 224, 3)), 16).num_patches == 196
    with pytest.raises(DimensionError):
        patchify(np.zeros((15, 15, 3)), 4)


def test_patch_order_is_row_major_blocks():
    img = np.arange(16 * 16 * 3, dtype=float).reshape(16, 16, 3)
    g = patchify(img, 4)
    np.testing.assert_array_equal(g.patches[1], img[0:4, 4:8].reshape(-1))
    np.testing.assert_array_equal(g.patches[4], img[4:8, 0:4].reshape(-1))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.sampled_from([1, 2, 4]))
def test_patchify_round_trip(gh, gw, c, p):
    img = np.random.default_rng(gh * 7 + gw).standard_normal((gh * p, gw * p, c))
    np.testing.assert_array_equal(unpatchify(patchify(img, p)), img)


# -- tokenizer ----------------------------------------------------------------
def test_tokenizer_examples():
    tok = Tokenizer()
    empty = tok.encode("")
    assert list(empty.ids) == [CLS_ID, SEP_ID]
    three = tok.encode("a red square")
    assert len(three) == 5 and list(three.word_ids) == [-1, 0, 1, 2, -1]
    long = tok.encode(" ".join(["red"] * 40))
    assert len(long) == 24 and long.ids[-1] == SEP_ID
    with pytest.raises(VocabularyError):
        tok.encode("a purple square")


def test_split_word_pieces_share_word_id():
    seq = Tokenizer().encode("a yellow triangle")
    assert list(seq.word_ids) == [-1, 0, 1, 1, 2, 2, -1]
    assert Tokenizer().decode(seq.ids) == "a yellow triangle"


def test_vocab_layout():
    assert len(VOCAB) == 64 and len(set(VOCAB)) == 64


# -- masking ------------------------------------------------------------------
def test_mask_prob_extremes():
    seq = Tokenizer().encode("a small yellow triangle in the top left")
    masked, labels = whole_word_mask(seq, 0.0, np.random.default_rng(0))
    assert np.all(labels == IGNORE_INDEX) and np.array_equal(masked.ids, seq.ids)
    masked, labels = whole_word_mask(seq, 1.0, np.random.default_rng(0))
    assert masked.ids[0] == CLS_ID and masked.ids[-1] == SEP_ID
    assert np.all(masked.ids[1:-1] == MASK_ID)
    np.testing.assert_array_equal(labels[1:-1], seq.ids[1:-1])


def test_mask_rate_monte_carlo():
    tok = Tokenizer()
    rng = np.random.default_rng(0)
    seq = tok.encode("a small yellow triangle in the top left corner")
    words = chosen = 0
    while words < 10_000:
        _, labels = whole_word_mask(seq, 0.15, rng)
        hit = np.unique(seq.word_ids[labels != IGNORE_INDEX])
        chosen += hit.size
        words += 9
    assert abs(chosen / words - 0.15) < 0.01


def test_whole_word_masking_covers_all_pieces():
    seq = Tokenizer().encode("a yellow diamond and a magenta ring")
    rng = np.random.default_rng(1)
    for _ in range(200):
        masked, labels = whole_word_mask(seq, 0.5, rng)
        for w in np.unique(seq.word_ids[seq.word_ids >= 0]):
            pos = seq.word_ids == w
            assert len(set(masked.ids[pos] == MASK_ID)) == 1


def test_corrupt_mode_uses_random_and_kept_tokens():
    seq = Tokenizer().encode("a small red square in the top left corner")
    rng = np.random.default_rng(4)
    kinds = set()
    for _ in range(300):
        masked, labels = whole_word_mask(seq, 1.0, rng, corrupt=True)
        sel = labels != IGNORE_INDEX
        kinds |= {"mask" if m == MASK_ID else ("keep" if m == o else "random")
                  for m, o in zip(masked.ids[sel], seq.ids[sel])}
    assert kinds == {"mask", "keep", "random"}


def test_block_patch_mask_ratio():
    rng = np.random.default_rng(0)
    for _ in range(50):
        m = block_patch_mask(4, 4, 0.4, rng)
        assert m.sum() == round(0.4 * 16)


# -- batching -----------------------------------------------------------------
def test_worker_partition():
    w = worker_partition(32, 4)
    assert [int((w == k).sum()) for k in range(4)] == [8] * 4
    assert np.all(worker_partition(8, 1) == 0)
    assert np.bincount(worker_partition(1024, 32)).tolist() == [32] * 32
    with pytest.raises(ConfigError):
        worker_partition(30, 4)


def test_make_batch_keeps_pairing(pairs64):
    patches, tokens = pairs64
    b = make_batch(list(zip(patches[:8], tokens[:8])), 2, 0.15, np.random.default_rng(0))
    np.testing.assert_array_equal(b.patches, patches[:8])
    for i in range(8):
        n = len(tokens[i])
        np.testing.assert_array_equal(b.token_ids[i, :n], tokens[i].ids)
        assert b.text_mask[i].sum() == n
    assert list(b.worker_rows(1)) == [1, 3, 5, 7]


# -- corpus files -------------------------------------------------------------
def test_corpus_round_trip(tmp_path, corpus64):
    save_corpus(corpus64, tmp_path / "c")
    back = load_corpus(tmp_path / "c")
    assert back.images.tobytes() == corpus64.images.tobytes()
    assert back.captions == corpus64.captions and back.latents == corpus64.latents


def test_empty_corpus_round_trip(tmp_path):
    save_corpus(generate_corpus(0, 0), tmp_path / "e")
    assert len(load_corpus(tmp_path / "e")) == 0


def test_corpus_integrity_errors(tmp_path, corpus64):
    d = tmp_path / "c"
    save_corpus(corpus64.subset(range(4)), d)
    raw = (d / "images.bin").read_bytes()
    (d / "images.bin").write_bytes(raw[:-4])
    with pytest.raises(DataIntegrityError):
        load_corpus(d)
    (d / "images.bin").write_bytes(raw)
    (d / "captions.txt").write_text("only one\n")
    with pytest.raises(DataIntegrityError):
        load_corpus(d)
    with pytest.raises(DataIntegrityError):
        load_corpus(tmp_path / "missing")
