import numpy as np
import pytest

from mome import tasks
from mome.backbone import ModelConfig, MoMETransformer
from mome.data import generate_corpus
from mome.errors import ContractError, DimensionError
from mome.numerics.tensor import Tensor
from mome.tasks import (
    ClassifierHead, RetrievalIndex, build_index, classify_pair, classify_two_images, rank_scores,
    recall_at_k, recall_report, score_and_rank,
)
from mome.training import StagePlan, train_stage


def unit(rng, n, d=16):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


# -- ranking and recall -------------------------------------------------------
def test_recall_identity_and_anti_identity():
    n = 8
    eye = rank_scores(np.eye(n))
    for k in range(1, n + 1):
        assert recall_at_k(eye.i2t, np.arange(n), k) == 1.0
    anti = rank_scores(-np.eye(n))  # positive strictly last
    for k in range(1, n):
        assert recall_at_k(anti.i2t, np.arange(n), k) == 0.0
    assert recall_at_k(anti.i2t, np.arange(n), n) == 1.0


def test_recall_k_bounds():
    r = rank_scores(np.eye(4))
    with pytest.raises(ContractError):
        recall_at_k(r.i2t, np.arange(4), 5)
    with pytest.raises(ContractError):
        recall_at_k(r.i2t, np.arange(4), 0)


def test_recall_monotone_in_k():
    rng = np.random.default_rng(0)
    r = rank_scores(rng.standard_normal((20, 20)))
    vals = [recall_at_k(r.i2t, np.arange(20), k) for k in range(1, 21)]
    assert all(a <= b for a, b in zip(vals, vals[1:])) and vals[-1] == 1.0


def test_random_embeddings_null_model():
    # R@1 of N independent random queries: mean 1/N, sd sqrt(p(1-p)/N) per seed
    n, seeds = 64, 100
    vals = []
    for s in range(seeds):
        rng = np.random.default_rng(s)
        r = score_and_rank(RetrievalIndex(unit(rng, n), unit(rng, n), np.arange(n), np.arange(n)))
        vals.append(recall_at_k(r.i2t, np.arange(n), 1))
    p = 1 / n
    sigma = np.sqrt(p * (1 - p) / n / seeds)
    assert abs(np.mean(vals) - p) < 3 * sigma


def test_ties_go_to_lower_id():
    r = rank_scores(np.zeros((3, 3)))
    assert r.i2t.tolist() == [[0, 1, 2]] * 3


def test_identical_tables_and_orthonormal_pairs():
    rng = np.random.default_rng(1)
    e = unit(rng, 10).astype(np.float32)
    r = score_and_rank(RetrievalIndex(e, e, np.arange(10), np.arange(10)))
    assert np.array_equal(r.scores, r.scores.T)
    np.testing.assert_allclose(np.diag(r.scores), 1.0, atol=1e-6)
    q, _ = np.linalg.qr(rng.standard_normal((16, 16)))
    r = score_and_rank(RetrievalIndex(q[:10], q[:10], np.arange(10), np.arange(10)))
    rep = recall_report(r, ks=(1,))
    assert rep == {"i2t_r1": 1.0, "t2i_r1": 1.0}


# -- index over the model -----------------------------------------------------
def test_build_index_counts_and_norms(model, pairs64):
    patches, tokens = pairs64
    idx = build_index(model, patches, tokens)
    assert idx.forwards == 128
    np.testing.assert_allclose(np.linalg.norm(idx.image_emb, axis=1), 1, atol=1e-5)
    np.testing.assert_allclose(np.linalg.norm(idx.text_emb, axis=1), 1, atol=1e-5)
    r = score_and_rank(idx)
    for i in range(64):
        for j in range(64):
            assert tasks.pair_score(idx.image_emb[i], idx.text_emb[j]) == r.scores[i, j]
    np.testing.assert_allclose(r.scores, idx.image_emb @ idx.text_emb.T, rtol=1e-5, atol=1e-6)


def test_fusion_demo_counts(model, pairs64):
    patches, tokens = pairs64
    rep = tasks.evaluate_retrieval(model, patches[:8], tokens[:8], mode="fusion-demo")
    assert rep["forwards"] == 64 and rep["mode"] == "fusion-demo"
    dual = tasks.evaluate_retrieval(model, patches[:8], tokens[:8], mode="dual")
    assert dual["forwards"] == 16


# -- classification heads -----------------------------------------------------
def test_zero_head_gives_zero_logits(model, pairs64):
    patches, tokens = pairs64
    head = ClassifierHead(Tensor(np.zeros((64, 3), np.float32)), Tensor(np.zeros(3, np.float32)))
    out = classify_pair(model, patches[:4], tokens[:4], head)
    assert out.shape == (4, 3) and not out.data.any()
    with pytest.raises(DimensionError):
        classify_pair(model, patches[:4], tokens[:4], ClassifierHead.create(32, 3))


def test_two_image_blocks(model, pairs64):
    patches, tokens = pairs64
    d = 64
    ident = ClassifierHead(Tensor(np.eye(2 * d, dtype=np.float32)), Tensor(np.zeros(2 * d, np.float32)))
    ab = classify_two_images(model, patches[:3], patches[3:6], tokens[:3], ident).data
    ba = classify_two_images(model, patches[3:6], patches[:3], tokens[:3], ident).data
    np.testing.assert_allclose(ab[:, :d], ba[:, d:], atol=1e-6)
    np.testing.assert_allclose(ab[:, d:], ba[:, :d], atol=1e-6)
    same = classify_two_images(model, patches[:3], patches[:3], tokens[:3], ident).data
    np.testing.assert_array_equal(same[:, :d], same[:, d:])
    with pytest.raises(DimensionError):
        classify_two_images(model, patches[:3], patches[3:6], tokens[:3], ClassifierHead.create(d, 2))


def test_block_symmetric_head_is_swap_invariant(model, pairs64):
    patches, tokens = pairs64
    w = np.random.default_rng(0).standard_normal((64, 2)).astype(np.float32)
    head = ClassifierHead(Tensor(np.vstack([w, w])), Tensor(np.zeros(2, np.float32)))
    ab = classify_two_images(model, patches[:3], patches[3:6], tokens[:3], head).data
    ba = classify_two_images(model, patches[3:6], patches[:3], tokens[:3], head).data
    np.testing.assert_allclose(ab, ba, atol=1e-5)


def test_toy_task_builders(corpus64, tiny_config):
    vqa = tasks.vqa_data(corpus64, tiny_config)
    assert vqa.classes == 22 and len(vqa) == 64 and vqa.labels.max() < 22
    match = tasks.matching_data(corpus64, tiny_config)
    assert set(match.labels) <= {0, 1}
    two = tasks.two_image_data(corpus64, tiny_config)
    assert two.patches_b is not None and 0 < two.labels.mean() < 1


# -- fine-tuning contracts ----------------------------------------------------
@pytest.fixture(scope="module")
def short_pretrained():
    corpus = generate_corpus(64, seed=4)
    ckpt = train_stage(StagePlan("vision", 20, batch_size=16), corpus, seed=0)
    ckpt = train_stage(StagePlan("text", 20, batch_size=16), corpus, ckpt, seed=0)
    return corpus, train_stage(StagePlan("vl", 20, batch_size=16), corpus, ckpt, seed=0)


def test_finetune_retrieval_touches_only_dual_paths(short_pretrained, monkeypatch):
    corpus, ckpt = short_pretrained
    seen = []
    real = MoMETransformer.encode

    def spy(self, mode, *a, **kw):
        seen.append(mode)
        return real(self, mode, *a, **kw)

    monkeypatch.setattr(MoMETransformer, "encode", spy)
    records = []
    out = tasks.finetune_retrieval(ckpt, corpus, epochs=2, batch_size=16, seed=0, on_step=records.append)
    assert set(seen) == {"image", "text"}
    assert out.stage == "retrieval"
    for n in ckpt.params:
        same = out.params[n].tobytes() == ckpt.params[n].tobytes()
        if n.startswith(("itm.", "mlm.", "mim.")) or ".ffn_vl." in n:
            assert same, n
    assert any(out.params[n].tobytes() != ckpt.params[n].tobytes() for n in ckpt.params if ".attn" in n)


@pytest.mark.slow
def test_finetune_retrieval_loss_decreases():
    drops = []
    for seed in range(3):
        corpus = generate_corpus(64, seed=seed)
        ckpt = train_stage(StagePlan("vision", 10, batch_size=16), corpus, seed=seed)
        ckpt = train_stage(StagePlan("text", 10, batch_size=16), corpus, ckpt, seed=seed)
        ckpt = train_stage(StagePlan("vl", 10, batch_size=16), corpus, ckpt, seed=seed)
        recs = []
        tasks.finetune_retrieval(ckpt, corpus, epochs=10, lr=5e-4, batch_size=16, seed=seed, on_step=recs.append)
        loss = [r["loss"] for r in recs]
        drops.append(np.mean(loss[:4]) - np.mean(loss[-4:]))
    assert np.mean(drops) > 0, drops


@pytest.fixture(scope="module")
def classification_runs():
    from mome.experiment import toy_corpora
    runs = []
    for seed in range(3):
        train, held = toy_corpora(seed, train_pairs=256, heldout_pairs=64)
        ckpt = train_stage(StagePlan("vision", 30, batch_size=32), train, seed=seed)
        ckpt = train_stage(StagePlan("text", 30, batch_size=32), train, ckpt, seed=seed)
        ckpt = train_stage(StagePlan("vl", 150, batch_size=32), train, ckpt, seed=seed)
        runs.append((seed, train, held, ckpt))
    return runs


def _classify(runs, builder):
    out = []
    for seed, train, held, ckpt in runs:
        cfg = ModelConfig.from_dict(ckpt.config)
        data = getattr(tasks, builder)(train, cfg, seed)
        test = getattr(tasks, builder)(held, cfg, seed + 100)
        recs = []
        model, head = tasks.finetune_classifier(ckpt, data, epochs=20, lr=5e-4, seed=seed, on_step=recs.append)
        loss = [r["loss"] for r in recs]
        out.append(dict(
            held=tasks.classification_accuracy(model, head, test),
            held_majority=np.bincount(test.labels).max() / len(test),
            train=tasks.classification_accuracy(model, head, data),
            train_majority=np.bincount(data.labels).max() / len(data),
            drop=np.mean(loss[:5]) - np.mean(loss[-5:]),
        ))
    return {k: np.mean([r[k] for r in out]) for k in out[0]}


@pytest.mark.slow
@pytest.mark.parametrize("builder, margin", [("vqa_data", 0.15), ("matching_data", 0.0)])
def test_toy_classification_beats_majority(classification_runs, builder, margin):
    r = _classify(classification_runs, builder)
    assert r["drop"] > 0 and r["held"] > r["held_majority"] + margin, r


@pytest.mark.slow
def test_two_image_head_fits_training_data(classification_runs):
    r = _classify(classification_runs, "two_image_data")
    assert r["drop"] > 0 and r["train"] > r["train_majority"], r
