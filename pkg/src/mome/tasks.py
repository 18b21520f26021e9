"""Downstream use: dual-encoder retrieval and fusion-encoder classification.

Retrieval encodes images and texts separately and ranks by dot product of the
contrastive embeddings, so scoring N images against M texts costs N + M
backbone passes. The fusion path (``fusion_scores``) runs every image-text
pair jointly and exists to show the N * M alternative.
"""
import time
from dataclasses import dataclass

import numpy as np

from .backbone import ModelConfig, MoMETransformer, truncated_normal
from .checkpoint import Checkpoint
from .data import COLORS, POSITIONS, SHAPES, SIZES, Tokenizer, pad_ids
from .errors import ContractError, DimensionError
from .numerics import functional as F
from .numerics import tensor as T
from .numerics.optim import AdamW
from .numerics.tensor import Tensor, backward, no_grad
from .objectives import itc_loss, itm_logits, SimilarityMatrix
from .training import prepare_pairs


def model_from_checkpoint(ckpt):
    return MoMETransformer.from_arrays(ModelConfig.from_dict(ckpt.config), ckpt.params, dtype=np.float32)


def _chunks(n, size):
    for s in range(0, n, size):
        yield slice(s, min(n, s + size))


def _pad_tokens(tokens):
    return pad_ids([t.ids for t in tokens])


# -- retrieval ----------------------------------------------------------------
@dataclass
class RetrievalIndex:
    image_emb: np.ndarray
    text_emb: np.ndarray
    image_ids: np.ndarray
    text_ids: np.ndarray
    forwards: int = 0


@dataclass
class Ranking:
    scores: np.ndarray   # (N_img, N_txt)
    i2t: np.ndarray      # per image, text ids best first
    t2i: np.ndarray      # per text, image ids best first


def encode_images(model, patches, batch_size=64):
    out = []
    with no_grad():
        for sl in _chunks(len(patches), batch_size):
            enc = model.encode("image", patches=patches[sl])
            out.append(model.project_cls(enc.image_cls, "image").data)
    return np.concatenate(out) if out else np.zeros((0, model.config.itc_dim), model.dtype)


def encode_texts(model, tokens, batch_size=64):
    out = []
    with no_grad():
        for sl in _chunks(len(tokens), batch_size):
            ids, mask = _pad_tokens(tokens[sl])
            enc = model.encode("text", token_ids=ids, text_mask=mask)
            out.append(model.project_cls(enc.text_cls, "text").data)
    return np.concatenate(out) if out else np.zeros((0, model.config.itc_dim), model.dtype)


def build_index(model, patches, tokens, batch_size=64):
    """Embed every image and every text once; ``forwards`` counts backbone passes."""
    start = model.forward_count
    img = encode_images(model, patches, batch_size)
    txt = encode_texts(model, tokens, batch_size)
    return RetrievalIndex(img, txt, np.arange(len(img)), np.arange(len(txt)), model.forward_count - start)


def rank_scores(scores):
    """Stable descending sort per row and per column; lower id wins ties."""
    i2t = np.argsort(-scores, axis=1, kind="stable")
    t2i = np.argsort(-scores.T, axis=1, kind="stable")
    return Ranking(scores, i2t, t2i)


def pair_score(image_emb, text_emb):
    """Dot product of one image and one text embedding."""
    return np.multiply(image_emb, text_emb).sum(axis=-1)


def score_table(image_emb, text_emb, rows=256):
    """All pairwise scores with the same per-pair reduction as :func:`pair_score`.

    A BLAS product would reorder the additions, so a single pair recomputed
    on its own could differ in the last bit.
    """
    out = np.empty((len(image_emb), len(text_emb)), dtype=np.result_type(image_emb, text_emb))
    for sl in _chunks(len(image_emb), rows):
        out[sl] = pair_score(image_emb[sl, None, :], text_emb[None, :, :])
    return out


def score_and_rank(index):
    return rank_scores(score_table(index.image_emb, index.text_emb))


def recall_at_k(rankings, ground_truth, k):
    """Fraction of queries whose positive is among the first ``k`` candidates."""
    rankings = np.asarray(rankings)
    if k < 1:
        raise ContractError("k must be >= 1")
    if k > rankings.shape[1]:
        raise ContractError(f"k={k} exceeds the {rankings.shape[1]} candidates")
    if len(rankings) == 0:
        return 0.0
    hits = (rankings[:, :k] == np.asarray(ground_truth)[:, None]).any(axis=1)
    return float(hits.mean())


def recall_report(ranking, ks=(1, 5, 10)):
    n_img, n_txt = ranking.scores.shape
    gt_i = np.arange(n_img)
    gt_t = np.arange(n_txt)
    out = {}
    for k in ks:
        if k <= n_txt:
            out[f"i2t_r{k}"] = recall_at_k(ranking.i2t, gt_i, k)
        if k <= n_img:
            out[f"t2i_r{k}"] = recall_at_k(ranking.t2i, gt_t, k)
    return out


def match_probability(model, patches, tokens):
    """ITM probability of "matched" for aligned lists of images and texts."""
    with no_grad():
        ids, mask = _pad_tokens(tokens)
        enc = model.encode("pair", patches=patches, token_ids=ids, text_mask=mask)
        logits = itm_logits(enc.text_cls, model.params)
        return F.softmax(logits, axis=-1).data[:, 1]


def fusion_scores(model, patches, tokens, batch_size=256):
    """Score all N x M pairs with the matching head: N * M backbone passes."""
    n, m = len(patches), len(tokens)
    scores = np.zeros((n, m), dtype=np.float64)
    ii, jj = np.meshgrid(np.arange(n), np.arange(m), indexing="ij")
    ii, jj = ii.reshape(-1), jj.reshape(-1)
    for sl in _chunks(len(ii), batch_size):
        scores[ii[sl], jj[sl]] = match_probability(model, patches[ii[sl]], [tokens[j] for j in jj[sl]])
    return scores


def evaluate_retrieval(model, patches, tokens, mode="dual", ks=(1, 5, 10)):
    """Recall report for image i <-> text i, with backbone pass count and wall time."""
    if mode not in ("dual", "fusion-demo"):
        raise ContractError(f"unknown retrieval mode {mode!r}")
    start = model.forward_count
    t0 = time.perf_counter()
    if mode == "dual":
        ranking = score_and_rank(build_index(model, patches, tokens))
    else:
        ranking = rank_scores(fusion_scores(model, patches, tokens))
    elapsed = time.perf_counter() - t0
    report = recall_report(ranking, ks)
    report.update(mode=mode, forwards=model.forward_count - start, seconds=elapsed)
    return report


def finetune_retrieval(ckpt, corpus, epochs=5, lr=2e-4, batch_size=32, seed=0, on_step=None, warmup=0.1):
    """Contrastive-only fine-tuning through the unimodal routes."""
    model = model_from_checkpoint(ckpt)
    patches, tokens = prepare_pairs(corpus, model.config)
    n = len(tokens)
    if n < 2:
        raise ContractError("retrieval fine-tuning needs at least 2 pairs")
    batch_size = min(batch_size, n)
    per_epoch = n // batch_size
    steps = epochs * per_epoch
    warm = int(round(warmup * steps))
    opt = AdamW(dict(model.params))
    rng = np.random.default_rng([seed, 11])
    step = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for b in range(per_epoch):
            idx = order[b * batch_size:(b + 1) * batch_size]
            step += 1
            cur = lr * step / warm if step <= warm else lr * (steps - step) / max(steps - warm, 1)
            model.zero_grad()
            ids, mask = _pad_tokens([tokens[i] for i in idx])
            img = model.project_cls(model.encode("image", patches=patches[idx]).image_cls, "image")
            txt = model.project_cls(model.encode("text", token_ids=ids, text_mask=mask).text_cls, "text")
            loss = itc_loss(img, txt, model.sigma())
            backward(loss)
            opt.step(cur)
            if on_step is not None:
                on_step({"stage": "retrieval", "step": step, "lr": cur, "loss": float(loss.data)})
    extra = dict(ckpt.extra)
    extra["history"] = list(extra.get("history", [])) + [{"stage": "retrieval", "steps": step}]
    return Checkpoint(ckpt.config, model.arrays(), "retrieval", step, seed, extra)


def hard_negative_pairs(model, patches, tokens):
    """Each item contributes its positive and one hardest negative.

    Even items take their most similar non-matching text, odd items their
    most similar non-matching image. Returns ``(patches, tokens, labels)``.
    """
    n = len(tokens)
    if n < 2:
        raise ContractError("hard negatives need at least 2 pairs")
    sim = SimilarityMatrix.from_embeddings(encode_images(model, patches), encode_texts(model, tokens))
    off = ~np.eye(n, dtype=bool)
    best_txt = np.argmax(np.where(off, sim.i2t, -np.inf), axis=1)
    best_img = np.argmax(np.where(off, sim.t2i, -np.inf), axis=1)
    img_idx, txt_idx, labels = [], [], []
    for i in range(n):
        img_idx.append(i); txt_idx.append(i); labels.append(1)
        if i % 2 == 0:
            img_idx.append(i); txt_idx.append(best_txt[i])
        else:
            img_idx.append(best_img[i]); txt_idx.append(i)
        labels.append(0)
    return patches[img_idx], [tokens[j] for j in txt_idx], np.array(labels)


def itm_accuracy(model, patches, tokens, batch_size=128):
    """Matched-vs-hardest-negative accuracy of the matching head (threshold 0.5)."""
    p, t, y = hard_negative_pairs(model, patches, tokens)
    probs = np.concatenate([match_probability(model, p[sl], t[sl]) for sl in _chunks(len(y), batch_size)])
    return float(np.mean((probs > 0.5) == (y == 1)))


# -- classification -----------------------------------------------------------
@dataclass
class ClassifierHead:
    weight: Tensor
    bias: Tensor

    @classmethod
    def create(cls, input_dim, classes, seed=0, dtype=np.float32):
        rng = np.random.default_rng([seed, 13])
        return cls(Tensor(truncated_normal(rng, (input_dim, classes)).astype(dtype), requires_grad=True),
                   Tensor(np.zeros(classes, dtype=dtype), requires_grad=True))

    @property
    def input_dim(self):
        return self.weight.shape[0]

    @property
    def classes(self):
        return self.weight.shape[1]

    def __call__(self, x):
        if x.shape[-1] != self.input_dim:
            raise DimensionError(f"head expects {self.input_dim} features, got {x.shape[-1]}")
        return T.linear(x, self.weight, self.bias)


def _fused_cls(model, patches, tokens):
    ids, mask = _pad_tokens(tokens)
    return model.encode("pair", patches=patches, token_ids=ids, text_mask=mask).text_cls


def classify_pair(model, patches, tokens, head):
    """Logits from the fused ``T_CLS`` of each (image, text) pair."""
    if head.input_dim != model.config.hidden:
        raise DimensionError(f"pair head needs input dim {model.config.hidden}, has {head.input_dim}")
    return head(_fused_cls(model, patches, tokens))


def classify_two_images(model, patches_a, patches_b, tokens, head):
    """Encode (a, text) and (b, text), concatenate the two ``T_CLS`` in that order, classify."""
    d = model.config.hidden
    if head.input_dim != 2 * d:
        raise DimensionError(f"two-image head needs input dim {2 * d}, has {head.input_dim}")
    n = len(tokens)
    both = _fused_cls(model, np.concatenate([patches_a, patches_b]), list(tokens) + list(tokens))
    return head(T.concat([both[:n], both[n:]], axis=1))


@dataclass
class ClassificationData:
    patches: np.ndarray          # (n, N, P*P*C)
    tokens: list
    labels: np.ndarray
    patches_b: np.ndarray = None  # second image for two-image tasks
    classes: int = 2

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        idx = np.asarray(idx)
        return ClassificationData(self.patches[idx], [self.tokens[i] for i in idx], self.labels[idx],
                                  None if self.patches_b is None else self.patches_b[idx], self.classes)


VQA_QUESTIONS = (
    ("what color is the shape", "color", COLORS),
    ("what shape is it", "shape", SHAPES),
    ("where is the shape", "position", POSITIONS),
    ("what size is it", "size", SIZES),
)
VQA_ANSWERS = tuple(f"{attr}:{v}" for _, attr, values in VQA_QUESTIONS for v in values)


def vqa_data(corpus, config, seed=0):
    """One templated attribute question per image; 22 answer classes."""
    rng = np.random.default_rng([seed, 17])
    tok = Tokenizer(max_len=config.max_text_len)
    patches, _ = prepare_pairs(corpus, config)
    tokens, labels = [], []
    for latent in corpus.latents:
        q, attr, values = VQA_QUESTIONS[rng.integers(len(VQA_QUESTIONS))]
        tokens.append(tok.encode(q))
        labels.append(VQA_ANSWERS.index(f"{attr}:{values[getattr(latent, attr)]}"))
    return ClassificationData(patches, tokens, np.array(labels), classes=len(VQA_ANSWERS))


def matching_data(corpus, config, seed=0):
    """Each image with its own caption (label 1) or another scene's caption (label 0)."""
    rng = np.random.default_rng([seed, 19])
    patches, tokens = prepare_pairs(corpus, config)
    n = len(tokens)
    labels = rng.integers(0, 2, size=n)
    texts = []
    for i in range(n):
        if labels[i]:
            texts.append(tokens[i])
        else:
            j = (i + 1 + rng.integers(n - 1)) % n
            texts.append(tokens[j])
            if corpus.latents and corpus.latents[j].attributes == corpus.latents[i].attributes:
                labels[i] = 1
    return ClassificationData(patches, texts, labels)


def two_image_data(corpus, config, seed=0):
    """Statement "both images show a <color> <shape>"; true iff it holds for both images."""
    rng = np.random.default_rng([seed, 23])
    tok = Tokenizer(max_len=config.max_text_len)
    patches, _ = prepare_pairs(corpus, config)
    lat = corpus.latents
    n = len(lat)
    by_key = {}
    for i, l in enumerate(lat):
        by_key.setdefault((l.color, l.shape), []).append(i)
    a_idx, b_idx, texts, labels = [], [], [], []
    for i in range(n):
        want_true = rng.random() < 0.5
        key = (lat[i].color, lat[i].shape)
        partners = [j for j in by_key[key] if j != i]
        if want_true and partners:
            j = partners[rng.integers(len(partners))]
            color, shape = key
        else:
            j = int(rng.integers(n))
            # statement true of image i only, or of neither
            if rng.random() < 0.5:
                color, shape = key
            else:
                color, shape = int(rng.integers(len(COLORS))), int(rng.integers(len(SHAPES)))
        truth = all((lat[k].color, lat[k].shape) == (color, shape) for k in (i, j))
        a, b = (i, j) if rng.random() < 0.5 else (j, i)
        a_idx.append(a); b_idx.append(b)
        texts.append(tok.encode(f"both images show a {COLORS[color]} {SHAPES[shape]}"))
        labels.append(int(truth))
    return ClassificationData(patches[a_idx], texts, np.array(labels), patches[b_idx])


def _logits(model, data, head, idx):
    tokens = [data.tokens[i] for i in idx]
    if data.patches_b is None:
        return classify_pair(model, data.patches[idx], tokens, head)
    return classify_two_images(model, data.patches[idx], data.patches_b[idx], tokens, head)


def finetune_classifier(ckpt, data, epochs=5, lr=2e-4, head_lr=2e-3, batch_size=32, seed=0, on_step=None):
    """Fine-tune backbone and a fresh head; returns ``(model, head)``."""
    model = model_from_checkpoint(ckpt)
    d = model.config.hidden
    head = ClassifierHead.create(2 * d if data.patches_b is not None else d, data.classes, seed)
    opt = AdamW(dict(model.params))
    head_opt = AdamW({"head.weight": head.weight, "head.bias": head.bias})
    rng = np.random.default_rng([seed, 29])
    n = len(data)
    batch_size = min(batch_size, n)
    steps = epochs * (n // batch_size)
    step = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for b in range(n // batch_size):
            idx = order[b * batch_size:(b + 1) * batch_size]
            step += 1
            frac = 1.0 - (step - 1) / max(steps, 1)
            model.zero_grad()
            head_opt.zero_grad()
            loss = F.cross_entropy(_logits(model, data, head, idx), data.labels[idx])
            backward(loss)
            opt.step(lr * frac)
            head_opt.step(head_lr * frac)
            if on_step is not None:
                on_step({"stage": "classify", "step": step, "loss": float(loss.data)})
    return model, head


def classification_accuracy(model, head, data, batch_size=128):
    preds = []
    with no_grad():
        for sl in _chunks(len(data), batch_size):
            preds.append(np.argmax(_logits(model, data, head, np.arange(sl.start, sl.stop)).data, axis=1))
    return float(np.mean(np.concatenate(preds) == data.labels)) if preds else 0.0
