"""Pretraining losses and hard-negative mining.

* image-text contrast over temperature-scaled in-batch similarities,
* masked language modelling on the fused image-text encoding,
* image-text matching on the fused ``T_CLS`` vector, trained against
  negatives sampled from the contrastive similarities either inside one
  simulated worker ("local") or over the batch gathered from all workers
  ("global").
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .data.masking import IGNORE_INDEX
from .numerics import functional as F
from .numerics import tensor as T
from .numerics.tensor import Tensor, no_grad

MINING_MODES = ("local", "global")
MINING_STRATEGIES = ("sample", "hardest")


@dataclass
class SimilarityMatrix:
    i2t: np.ndarray
    t2i: np.ndarray
    worker_ids: np.ndarray

    @classmethod
    def from_embeddings(cls, img_emb, txt_emb, worker_ids=None):
        img = img_emb.data if isinstance(img_emb, Tensor) else np.asarray(img_emb)
        txt = txt_emb.data if isinstance(txt_emb, Tensor) else np.asarray(txt_emb)
        i2t = img @ txt.T
        wid = np.zeros(len(i2t), dtype=np.int64) if worker_ids is None else np.asarray(worker_ids)
        return cls(i2t, i2t.T.copy(), wid)


@dataclass
class HardNegativeAssignment:
    neg_text: np.ndarray    # for image i, index of its negative text
    neg_image: np.ndarray   # for text i, index of its negative image
    mode: str
    pool_sizes: np.ndarray = field(default=None)  # candidates available per anchor


def itc_loss(img_emb, txt_emb, sigma):
    """Symmetric in-batch contrastive loss; ``sigma`` is a scalar Tensor or float."""
    n = img_emb.shape[0]
    if n < 2:
        raise ContractError("image-text contrast needs at least 2 pairs")
    if not isinstance(sigma, Tensor):
        sigma = Tensor(np.asarray(sigma, dtype=img_emb.dtype))
    logits = T.div(T.matmul(img_emb, T.transpose(txt_emb)), sigma)
    targets = np.arange(n)
    i2t = F.cross_entropy(logits, targets)
    t2i = F.cross_entropy(T.transpose(logits), targets)
    return (i2t + t2i) * 0.5


def gather_candidates(partitions, local_worker=None):
    """Concatenate per-worker tensors in worker order.

    Rows from workers other than ``local_worker`` are detached: gradient only
    flows through the local partition, as with a non-differentiable all-gather.
    """
    parts = [p if w == local_worker else p.detach() for w, p in enumerate(partitions)]
    return T.concat(parts, axis=0)


def _row_softmax(logits):
    m = np.max(logits, axis=1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=1, keepdims=True)


def _draw(scores, allowed, sigma, rng, strategy):
    logits = np.where(allowed, scores / sigma, -np.inf)
    if strategy == "hardest":
        return np.argmax(logits, axis=1)
    probs = _row_softmax(logits)
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(len(scores))[:, None] * cdf[:, -1:]
    pick = (cdf <= u).sum(axis=1)
    # guard against round-off pushing the pick onto a disallowed slot
    last_allowed = allowed.shape[1] - 1 - np.argmax(allowed[:, ::-1], axis=1)
    pick = np.minimum(pick, last_allowed)
    bad = ~allowed[np.arange(len(pick)), pick]
    if bad.any():
        pick[bad] = np.argmax(np.where(allowed, probs, -1.0), axis=1)[bad]
    return pick


def candidate_mask(worker_ids, mode):
    worker_ids = np.asarray(worker_ids)
    n = len(worker_ids)
    if mode not in MINING_MODES:
        raise ContractError(f"mining mode must be one of {MINING_MODES}")
    allowed = ~np.eye(n, dtype=bool)
    if mode == "local":
        allowed &= worker_ids[:, None] == worker_ids[None, :]
    return allowed


def sample_hard_negatives(sim, sigma, mode="global", rng=None, strategy="sample"):
    """Draw one negative text per image and one negative image per text.

    Negatives follow ``softmax(similarity / sigma)`` over the candidate pool,
    excluding the positive. ``mode="local"`` limits the pool to the anchor's
    own worker; ``strategy="hardest"`` takes the argmax instead of sampling.
    """
    if strategy not in MINING_STRATEGIES:
        raise ContractError(f"mining strategy must be one of {MINING_STRATEGIES}")
    rng = np.random.default_rng() if rng is None else rng
    allowed = candidate_mask(sim.worker_ids, mode)
    pool = allowed.sum(axis=1)
    if len(pool) < 2 or pool.min() < 1:
        raise ContractError("hard-negative mining needs a candidate pool of at least 2")
    sigma = float(sigma)
    neg_text = _draw(sim.i2t, allowed, sigma, rng, strategy)
    neg_image = _draw(sim.t2i, allowed, sigma, rng, strategy)
    return HardNegativeAssignment(neg_text, neg_image, mode, pool)


def mine_hard_negatives(img_emb, txt_emb, sigma, worker_ids, mode="global", rng=None, strategy="sample"):
    """Mine per simulated worker over gathered embeddings; indices refer to batch order."""
    worker_ids = np.asarray(worker_ids)
    workers = np.unique(worker_ids)
    rows = [np.nonzero(worker_ids == w)[0] for w in workers]
    with no_grad():
        img_parts = [img_emb[r] for r in rows]
        txt_parts = [txt_emb[r] for r in rows]
        order = np.concatenate(rows)
        pool_img = gather_candidates(img_parts).data
        pool_txt = gather_candidates(txt_parts).data
    # similarities in gathered (worker-major) order, mapped back to batch order
    inv = np.empty_like(order)
    inv[order] = np.arange(len(order))
    sim = SimilarityMatrix.from_embeddings(pool_img[inv], pool_txt[inv], worker_ids)
    return sample_hard_negatives(sim, sigma, mode, rng, strategy), sim


def itm_logits(cls, params):
    return T.linear(cls, params["itm.weight"], params["itm.bias"])


def itm_labels(n):
    """Layout ``[positives, (image, negative text), (negative image, text)]``; class 1 = matched."""
    return np.concatenate([np.ones(n, dtype=np.int64), np.zeros(2 * n, dtype=np.int64)])


def itm_loss(cls, labels, params):
    return F.cross_entropy(itm_logits(cls, params), labels)


def mlm_logits(states, params, eps=1e-6):
    h = F.gelu(T.linear(states, params["mlm.dense.weight"], params["mlm.dense.bias"]))
    h = F.layer_norm(h, params["mlm.ln.weight"], params["mlm.ln.bias"], eps)
    return T.linear(h, params["mlm.decoder.weight"], params["mlm.decoder.bias"])


def mlm_loss(text_states, labels, params):
    """Cross-entropy over the vocabulary at masked positions only.

    Returns ``(loss, has_masked)``; with no masked position the loss is a
    constant zero and ``has_masked`` is False.
    """
    labels = np.asarray(labels)
    flat = labels.reshape(-1)
    rows = np.nonzero(flat != IGNORE_INDEX)[0]
    if rows.size == 0:
        return Tensor(np.zeros((), dtype=text_states.dtype)), False
    d = text_states.shape[-1]
    picked = T.reshape(text_states, (-1, d))[rows]
    return F.cross_entropy(mlm_logits(picked, params), flat[rows]), True


@dataclass
class LossSwitches:
    itc: bool = True
    itm: bool = True
    mlm: bool = True
    hardneg_mode: str = "global"
    hardneg_strategy: str = "sample"


def combined_pretrain_loss(model, batch, rng, switches=None, assignment=None):
    """Unweighted ``itc + itm + mlm`` for one batch.

    Returns ``(total, parts)`` where ``parts`` has float values of each
    component plus ``sigma`` and ``hardneg_sim`` (mean similarity of mined
    negatives). A fixed ``assignment`` skips mining, which keeps the loss a
    smooth function of the parameters for finite-difference checks.
    """
    sw = switches or LossSwitches()
    p = model.params
    n = len(batch)
    img_enc = model.encode("image", patches=batch.patches)
    txt_enc = model.encode("text", token_ids=batch.token_ids, text_mask=batch.text_mask)
    img_emb = model.project_cls(img_enc.image_cls, "image")
    txt_emb = model.project_cls(txt_enc.text_cls, "text")
    sigma = model.sigma()
    terms = []
    parts = {"itc": 0.0, "itm": 0.0, "mlm": 0.0, "sigma": float(sigma.data), "hardneg_sim": float("nan")}
    if sw.itc:
        loss = itc_loss(img_emb, txt_emb, sigma)
        terms.append(loss)
        parts["itc"] = float(loss.data)

    patches, ids, masks = [], [], []
    if sw.itm:
        assign, sim = mine_hard_negatives(img_emb, txt_emb, parts["sigma"], batch.worker_ids,
                                          sw.hardneg_mode, rng, sw.hardneg_strategy)
        if assignment is not None:
            assign = assignment
        idx = np.arange(n)
        parts["hardneg_sim"] = float(np.mean(np.concatenate(
            [sim.i2t[idx, assign.neg_text], sim.t2i[idx, assign.neg_image]])))
        patches += [batch.patches, batch.patches, batch.patches[assign.neg_image]]
        ids += [batch.token_ids, batch.token_ids[assign.neg_text], batch.token_ids]
        masks += [batch.text_mask, batch.text_mask[assign.neg_text], batch.text_mask]
    if sw.mlm:
        patches.append(batch.patches)
        ids.append(batch.mlm_ids)
        masks.append(batch.text_mask)
    if patches:
        enc = model.encode("pair", patches=np.concatenate(patches), token_ids=np.concatenate(ids),
                           text_mask=np.concatenate(masks))
        offset = 0
        if sw.itm:
            loss = itm_loss(enc.text_cls[: 3 * n], itm_labels(n), p)
            terms.append(loss)
            parts["itm"] = float(loss.data)
            offset = 3 * n
        if sw.mlm:
            states = enc.hidden[offset:, : enc.text_len]
            loss, has_masked = mlm_loss(states, batch.mlm_labels, p)
            if has_masked:
                terms.append(loss)
            parts["mlm"] = float(loss.data)
    if not terms:
        raise ContractError("every pretraining loss is switched off")
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    parts["total"] = float(total.data)
    return total, parts
