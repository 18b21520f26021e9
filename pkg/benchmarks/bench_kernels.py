"""Compiled kernels vs the NumPy fallback, per op and for one training step.

    python benchmarks/bench_kernels.py [--repeat 20] [--json out.json]
"""
import argparse
import json
import timeit

import numpy as np

from mome.numerics import kernels

# shapes seen in the tiny model at batch 32: 17 image positions, ~40 pair positions
ROWS, HIDDEN, FFN, HEADS, SEQ = 32 * 40, 64, 256, 4, 40


def op_cases(rng):
    x = rng.standard_normal((ROWS, FFN)).astype(np.float32)
    h = rng.standard_normal((ROWS, HIDDEN)).astype(np.float32)
    gamma = np.ones(HIDDEN, np.float32)
    beta = np.zeros(HIDDEN, np.float32)
    scores = rng.standard_normal((32 * HEADS * SEQ, SEQ)).astype(np.float32)
    y, xhat, rstd = kernels.layer_norm_forward(h, gamma, beta, 1e-6)
    probs, _ = kernels.softmax_forward(scores)
    return {
        "gelu_forward": lambda: kernels.gelu_forward(x),
        "gelu_backward": lambda: kernels.gelu_backward(x, x),
        "layer_norm_forward": lambda: kernels.layer_norm_forward(h, gamma, beta, 1e-6),
        "layer_norm_backward": lambda: kernels.layer_norm_backward(h, xhat, rstd, gamma),
        "softmax_forward": lambda: kernels.softmax_forward(scores),
        "softmax_backward": lambda: kernels.softmax_backward(probs, scores),
    }


def step_case():
    from mome.data import generate_corpus
    from mome.training import StagePlan, TrainSettings, train_stage

    corpus = generate_corpus(64, seed=0)
    init = train_stage(StagePlan("vision", 1, batch_size=32), corpus, seed=0)
    init = train_stage(StagePlan("text", 1, batch_size=32), corpus, init, seed=0)
    plan = StagePlan("vl", 3, batch_size=32, warmup_steps=1)
    return lambda: train_stage(plan, corpus, init, seed=0, settings=TrainSettings(workers=4))


def best_of(fn, repeat):
    fn()
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json")
    args = ap.parse_args()
    backends = sorted(kernels.available_backends())
    results = {}
    for name in backends:
        kernels.use_backend(name)
        cases = op_cases(np.random.default_rng(0))
        results[name] = {op: best_of(fn, args.repeat) for op, fn in cases.items()}
        results[name]["vl_step_x3"] = best_of(step_case(), max(2, args.repeat // 10))
    print(f"{'op':22s}" + "".join(f"{b:>12s}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for op in results[backends[0]]:
        row = "".join(f"{results[b][op] * 1e3:10.3f}ms" for b in backends)
        if "cython" in results and "python" in results:
            row += f"{results['python'][op] / results['cython'][op]:11.2f}x"
        print(f"{op:22s}{row}")
    if args.json:
        with open(args.json, "w") as f:
            json.dump(results, f, indent=2)


if __name__ == "__main__":
    main()
