"""Toy end-to-end run: corpus, three pretraining stages, retrieval fine-tuning, evaluation."""
import time
from dataclasses import dataclass, field

import numpy as np

from .data import build_corpus, sample_latents
from .data.scenes import all_attribute_tuples
from .tasks import evaluate_retrieval, finetune_retrieval, itm_accuracy, model_from_checkpoint
from .training import DEFAULT_STEPS, STAGES, StagePlan, prepare_pairs, train_stage

TRAIN_PAIRS = 512
HELDOUT_PAIRS = 64


def toy_corpora(seed, train_pairs=TRAIN_PAIRS, heldout_pairs=HELDOUT_PAIRS):
    """Training and held-out corpora over disjoint attribute combinations.

    ``heldout_pairs`` combinations are reserved; the training corpus cycles
    through the remaining ones with fresh render noise until it has
    ``train_pairs`` pairs.
    """
    rng = np.random.default_rng([seed, 31])
    tuples = all_attribute_tuples()
    held = [tuples[i] for i in rng.choice(len(tuples), size=heldout_pairs, replace=False)]
    train = build_corpus(sample_latents(train_pairs, seed, exclude=held))
    held_latents = sample_latents(heldout_pairs, seed + 10_000, exclude=sorted(set(tuples) - set(held)))
    return train, build_corpus(held_latents)


@dataclass
class ToyRun:
    seed: int
    checkpoints: dict = field(default_factory=dict)
    metrics: list = field(default_factory=list)
    seconds: dict = field(default_factory=dict)
    report: dict = field(default_factory=dict)


def run_toy_pipeline(seed, steps=None, config=None, settings=None, finetune_epochs=5, finetune_lr=2e-4,
                     batch_size=32, train=None, heldout=None, evaluate=True):
    steps = dict(DEFAULT_STEPS if steps is None else steps)
    if train is None or heldout is None:
        train, heldout = toy_corpora(seed)
    run = ToyRun(seed)
    ckpt = None
    for stage in STAGES:
        t0 = time.perf_counter()
        plan = StagePlan.default(stage, steps=steps[stage], batch_size=batch_size)
        ckpt = train_stage(plan, train, ckpt, seed=seed, config=config, settings=settings,
                           on_step=run.metrics.append)
        run.checkpoints[stage] = ckpt
        run.seconds[stage] = time.perf_counter() - t0
    t0 = time.perf_counter()
    run.checkpoints["retrieval"] = finetune_retrieval(ckpt, train, epochs=finetune_epochs, lr=finetune_lr,
                                                      batch_size=batch_size, seed=seed,
                                                      on_step=run.metrics.append)
    run.seconds["retrieval"] = time.perf_counter() - t0
    if evaluate:
        patches, tokens = prepare_pairs(heldout, model_from_checkpoint(ckpt).config)
        run.report["itm_accuracy"] = itm_accuracy(model_from_checkpoint(ckpt), patches, tokens)
        run.report.update(evaluate_retrieval(model_from_checkpoint(run.checkpoints["retrieval"]), patches, tokens))
    return run
