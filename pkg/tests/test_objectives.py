import math

import numpy as np
import pytest

from mome.errors import ContractError
from mome.numerics import tensor as T
from mome.numerics.gradcheck import check_function
from mome.numerics.tensor import Tensor, backward
from mome.objectives import (
    LossSwitches, SimilarityMatrix, combined_pretrain_loss, gather_candidates, itc_loss, itm_labels,
    itm_loss, mine_hard_negatives, mlm_loss, sample_hard_negatives,
)


def unit(rng, n, d=8):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


# -- contrastive loss ---------------------------------------------------------
def test_itc_uniform_case():
    e = Tensor(np.tile([[0.6, 0.8]], (2, 1)))
    assert itc_loss(e, e, 1.0).data == pytest.approx(math.log(2), abs=1e-12)


def test_itc_orthogonal_case():
    e = Tensor(np.eye(2))
    assert itc_loss(e, e, 1.0).data == pytest.approx(math.log1p(math.exp(-1.0)), abs=1e-12)
    assert itc_loss(e, e, 1e-3).data < 1e-100


def test_itc_needs_two_pairs():
    with pytest.raises(ContractError):
        itc_loss(Tensor(np.ones((1, 2))), Tensor(np.ones((1, 2))), 1.0)


def test_itc_permutation_equivariance():
    rng = np.random.default_rng(0)
    a, b = unit(rng, 6), unit(rng, 6)
    perm = rng.permutation(6)
    base = itc_loss(Tensor(a), Tensor(b), 0.1).data
    assert itc_loss(Tensor(a[perm]), Tensor(b[perm]), 0.1).data == pytest.approx(base, rel=1e-12)


def test_itc_sigma_gradient_and_fd():
    rng = np.random.default_rng(1)
    a, b = leaf(unit(rng, 5)), leaf(unit(rng, 5))
    log_sigma = leaf(np.log(0.2))
    res = check_function("itc", lambda: itc_loss(a, b, T.exp(log_sigma)), [a, b, log_sigma])
    assert res.passed
    backward(itc_loss(a, b, T.exp(log_sigma)))
    assert abs(float(log_sigma.grad)) > 1e-6


def test_similarity_transpose_duality():
    rng = np.random.default_rng(2)
    sim = SimilarityMatrix.from_embeddings(unit(rng, 7), unit(rng, 7))
    assert sim.t2i.tobytes() == np.ascontiguousarray(sim.i2t.T).tobytes()
    assert np.all(np.abs(sim.i2t) <= 1 + 1e-12)


# -- gather and mining --------------------------------------------------------
def test_gather_candidates():
    parts = [leaf(np.full((8, 2), w)) for w in range(4)]
    pool = gather_candidates(parts, local_worker=1)
    assert pool.shape == (32, 2)
    np.testing.assert_array_equal(pool.data[:8], 0)
    backward(T.tsum(pool))
    assert parts[1].grad is not None and all(parts[w].grad is None for w in (0, 2, 3))
    one = leaf(np.ones((5, 3)))
    assert gather_candidates([one], 0).data.tobytes() == one.data.tobytes()
    assert gather_candidates([leaf(np.zeros((32, 4)))] * 32).shape == (1024, 4)


def test_dominant_candidate_is_almost_always_sampled():
    s = np.zeros((4, 4))
    s[0, 2] = 1000.0
    sim = SimilarityMatrix(s, s.T.copy(), np.zeros(4, int))
    rng = np.random.default_rng(0)
    picks = [sample_hard_negatives(sim, 1.0, "global", rng).neg_text[0] for _ in range(10_000)]
    assert np.mean(np.array(picks) == 2) > 0.999


@pytest.mark.parametrize("seed", range(5))
def test_positive_never_sampled(seed):
    rng = np.random.default_rng(seed)
    e = unit(rng, 16)
    sim = SimilarityMatrix.from_embeddings(e, e, np.arange(16) % 4)
    for _ in range(625):  # 10^4 draws per direction
        a = sample_hard_negatives(sim, 0.05, "global", rng)
        assert not np.any(a.neg_text == np.arange(16)) and not np.any(a.neg_image == np.arange(16))


def test_local_mode_stays_on_worker():
    rng = np.random.default_rng(3)
    wid = np.arange(32) % 4
    sim = SimilarityMatrix.from_embeddings(unit(rng, 32), unit(rng, 32), wid)
    for _ in range(200):
        a = sample_hard_negatives(sim, 0.1, "local", rng)
        assert np.all(wid[a.neg_text] == wid) and np.all(wid[a.neg_image] == wid)
        assert np.all(a.pool_sizes == 7)
    assert np.all(sample_hard_negatives(sim, 0.1, "global", rng).pool_sizes == 31)


def test_local_equals_global_with_one_worker():
    rng = np.random.default_rng(4)
    sim = SimilarityMatrix.from_embeddings(unit(rng, 8), unit(rng, 8))
    a = sample_hard_negatives(sim, 0.1, "local", np.random.default_rng(9))
    b = sample_hard_negatives(sim, 0.1, "global", np.random.default_rng(9))
    assert np.array_equal(a.neg_text, b.neg_text) and np.array_equal(a.neg_image, b.neg_image)


def test_pool_of_one_is_an_error():
    sim = SimilarityMatrix.from_embeddings(np.eye(4), np.eye(4), np.arange(4))
    with pytest.raises(ContractError):
        sample_hard_negatives(sim, 0.1, "local", np.random.default_rng(0))


def test_hardest_strategy_is_argmax():
    rng = np.random.default_rng(5)
    sim = SimilarityMatrix.from_embeddings(unit(rng, 6), unit(rng, 6))
    a = sample_hard_negatives(sim, 0.1, "global", rng, strategy="hardest")
    masked = np.where(np.eye(6, dtype=bool), -np.inf, sim.i2t)
    np.testing.assert_array_equal(a.neg_text, masked.argmax(1))


def test_mine_maps_back_to_batch_order():
    rng = np.random.default_rng(6)
    img, txt = unit(rng, 8), unit(rng, 8)
    wid = np.arange(8) % 2
    a, sim = mine_hard_negatives(Tensor(img), Tensor(txt), 0.05, wid, "local", rng, "hardest")
    np.testing.assert_allclose(sim.i2t, img @ txt.T)
    assert np.all(wid[a.neg_text] == wid)


# -- matching and masked language modelling -----------------------------------
def test_itm_examples():
    n = 3
    labels = itm_labels(n)
    assert labels.tolist() == [1, 1, 1, 0, 0, 0, 0, 0, 0]
    params = {"itm.weight": Tensor(np.zeros((4, 2))), "itm.bias": Tensor(np.zeros(2))}
    assert itm_loss(Tensor(np.ones((9, 4))), labels, params).data == pytest.approx(math.log(2))
    cls = np.zeros((9, 4))
    cls[:, 0] = np.where(labels == 1, 1.0, -1.0)
    params["itm.weight"] = Tensor(np.array([[-500.0, 500.0], [0, 0], [0, 0], [0, 0]]))
    assert itm_loss(Tensor(cls), labels, params).data < 1e-12


def _mlm_params(d=4, vocab=64, zero=True):
    rng = np.random.default_rng(0)
    return {
        "mlm.dense.weight": Tensor(rng.standard_normal((d, d))), "mlm.dense.bias": Tensor(np.zeros(d)),
        "mlm.ln.weight": Tensor(np.ones(d)), "mlm.ln.bias": Tensor(np.zeros(d)),
        "mlm.decoder.weight": Tensor(np.zeros((d, vocab)) if zero else rng.standard_normal((d, vocab))),
        "mlm.decoder.bias": Tensor(np.zeros(vocab)),
    }


def test_mlm_examples():
    states = Tensor(np.random.default_rng(1).standard_normal((2, 5, 4)))
    labels = np.full((2, 5), -100)
    loss, flag = mlm_loss(states, labels, _mlm_params())
    assert loss.data == 0 and not flag
    labels[0, 2], labels[1, 4] = 7, 30
    loss, flag = mlm_loss(states, labels, _mlm_params())
    assert flag and loss.data == pytest.approx(math.log(64), abs=1e-12)
    p = _mlm_params()
    p["mlm.decoder.bias"] = Tensor(np.where(np.arange(64) == 7, 1e4, 0.0))
    labels[1, 4] = 7
    assert mlm_loss(states, labels, p)[0].data < 1e-12


def test_mlm_ignores_unmasked_content():
    rng = np.random.default_rng(2)
    states = Tensor(rng.standard_normal((1, 6, 4)))
    labels = np.array([[-100, 5, -100, -100, 9, -100]])
    p = _mlm_params(zero=False)
    base = mlm_loss(states, labels, p)[0].data
    other = states.data.copy()
    other[0, [0, 2, 3, 5]] = rng.standard_normal((4, 4))
    assert mlm_loss(Tensor(other), labels, p)[0].data == base


# -- combined loss ------------------------------------------------------------
def test_combined_is_unweighted_sum(model, batch8):
    total, parts = combined_pretrain_loss(model, batch8, np.random.default_rng(0))
    assert parts["total"] == pytest.approx(parts["itc"] + parts["itm"] + parts["mlm"], rel=1e-6)
    assert float(total.data) == parts["total"]
    assert parts["sigma"] == pytest.approx(0.07, rel=1e-6)
    assert -1 <= parts["hardneg_sim"] <= 1


def test_switches(model, batch8):
    _, parts = combined_pretrain_loss(model, batch8, np.random.default_rng(0), LossSwitches(itm=False, mlm=False))
    assert parts["itm"] == 0 and parts["mlm"] == 0 and parts["total"] == parts["itc"]
    with pytest.raises(ContractError):
        combined_pretrain_loss(model, batch8, None, LossSwitches(False, False, False))


def test_gradient_of_sum_is_sum_of_gradients(model, batch8):
    model = model.astype(np.float64)
    rng = np.random.default_rng(0)
    img = model.project_cls(model.encode("image", patches=batch8.patches).image_cls, "image")
    txt = model.project_cls(model.encode("text", token_ids=batch8.token_ids,
                                         text_mask=batch8.text_mask).text_cls, "text")
    assign, _ = mine_hard_negatives(img, txt, 0.07, batch8.worker_ids, "global", rng)
    grads = {}
    for name, sw in [("all", LossSwitches()), ("itc", LossSwitches(True, False, False)),
                     ("itm", LossSwitches(False, True, False)), ("mlm", LossSwitches(False, False, True))]:
        model.zero_grad()
        loss, _ = combined_pretrain_loss(model, batch8, None, sw, assignment=assign)
        backward(loss)
        grads[name] = {n: (0 if t.grad is None else t.grad.copy()) for n, t in dict.items(model.params)}
    for n in grads["all"]:
        np.testing.assert_allclose(grads["all"][n], grads["itc"][n] + grads["itm"][n] + grads["mlm"][n],
                                   rtol=1e-9, atol=1e-12)
