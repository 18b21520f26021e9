"""Whole-model finite-difference check of the pretraining losses (float64)."""
import numpy as np

from .backbone import ModelConfig, MoMETransformer
from .data import generate_corpus, make_batch
from .numerics.gradcheck import CheckResult, check_function
from .objectives import LossSwitches, combined_pretrain_loss, mine_hard_negatives
from .numerics.tensor import no_grad
from .training import TrainSettings, _vision_loss, mim_targets, prepare_pairs


def _perturbed_model(config, seed):
    """Fresh float64 model with non-trivial norms, biases and temperature."""
    model = MoMETransformer(config, seed=seed, dtype=np.float64)
    rng = np.random.default_rng([seed, 3])
    for name, t in dict.items(model.params):
        if name.endswith(".bias") or "ln.weight" in name or name == "itc.log_sigma":
            t.data += 0.1 * rng.standard_normal(t.shape)
        else:
            t.data *= 10.0  # std 0.2 so attention is far from uniform
    return model


def check_model(seed=0, batch_size=4, workers=2, coords_per_tensor=2, config=None):
    """Check ``itc + itm + mlm`` and the masked-patch loss of a tiny model.

    ``coords_per_tensor`` coordinates are sampled from every parameter
    tensor. Negatives are mined once and then held fixed.
    """
    config = config or ModelConfig()
    model = _perturbed_model(config, seed)
    corpus = generate_corpus(batch_size, seed)
    patches, tokens = prepare_pairs(corpus, config)
    rng = np.random.default_rng([seed, 5])
    batch = make_batch(list(zip(patches.astype(np.float64), tokens)), workers, 0.5, rng)
    sw = LossSwitches()
    with no_grad():
        img = model.project_cls(model.encode("image", patches=batch.patches).image_cls, "image")
        txt = model.project_cls(
            model.encode("text", token_ids=batch.token_ids, text_mask=batch.text_mask).text_cls, "text")
        assign, _ = mine_hard_negatives(img, txt, float(model.sigma().data), batch.worker_ids, "global", rng)

    def pretrain_loss():
        return combined_pretrain_loss(model, batch, None, sw, assignment=assign)[0]

    params = list(dict.values(model.params))
    results = [check_function("model:itc+itm+mlm", pretrain_loss, params, coords_per_tensor,
                              np.random.default_rng([seed, 7]))]

    vis_patches = patches.astype(np.float64)
    targets = mim_targets(vis_patches)
    settings = TrainSettings()

    def mim():
        return _vision_loss(model, vis_patches, targets, settings, np.random.default_rng([seed, 9]))[0]

    mim_params = [t for n, t in dict.items(model.params)
                  if n.startswith(("img.", "mim.", "final_ln.")) or ".attn" in n or ".ffn_v." in n]
    results.append(check_function("model:mim", mim, mim_params, coords_per_tensor,
                                  np.random.default_rng([seed, 8])))
    return results


def summarize(results):
    worst = max((r.max_rel_error for r in results), default=0.0)
    return CheckResult("all", worst, sum(r.checked for r in results), all(r.passed for r in results))
