"""Command-line entry point: ``mome <command> ...``.

Exit codes: 0 success, 2 usage, 3 config, 4 data integrity, 5 check failure.
Errors are reported on stderr as a single line::

    error code=<name> exit=<n> message="..."
"""
import argparse
import json
import sys
import warnings
from pathlib import Path


from . import tasks
from .backbone import ModelConfig, _param_shapes
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config, resolve_seed
from .data import generate_corpus, load_corpus, save_corpus
from .errors import CheckFailure, ConfigError, MomeError, UsageError
from .experiment import toy_corpora
from .metrics import MetricsWriter
from .training import canonical_stage, prepare_pairs, train_stage

HEAD_PREFIX = "head."
CLASSIFY_TASKS = ("classify", "vqa", "nlvr2")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _config(args):
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    return cfg, resolve_seed(getattr(args, "seed", None), cfg.seed)


def _writer(args, cfg):
    return MetricsWriter(getattr(args, "metrics", None), cfg.hash(), sys.stdout if not args.quiet else None)


# -- commands -----------------------------------------------------------------
def cmd_gen_data(args):
    if args.pairs < 0:
        raise UsageError("--pairs must be non-negative")
    if args.split == "all":
        corpus = generate_corpus(args.pairs, args.seed)
    else:
        train, held = toy_corpora(args.seed, train_pairs=args.pairs if args.split == "train" else 0,
                                  heldout_pairs=args.heldout_pairs if args.split == "train" else args.pairs)
        corpus = train if args.split == "train" else held
    save_corpus(corpus, args.out)
    print(json.dumps({"kind": "gen-data", "out": str(args.out), "pairs": len(corpus), "seed": args.seed}))
    return 0


def cmd_pretrain(args):
    cfg, seed = _config(args)
    stage = canonical_stage(args.stage)
    changes = {}
    if args.hardneg:
        changes["hardneg"] = args.hardneg
    if args.workers:
        changes["workers"] = args.workers
    if changes:
        cfg = cfg.replace(**changes)
    init = load_checkpoint(args.init) if args.init else None
    if stage == "text" and init is None:
        raise UsageError("--stage text requires --init with a vision-stage checkpoint")
    corpus = load_corpus(args.data)
    plan = cfg.plan(stage, args.steps)
    out = Path(args.out)
    with _writer(args, cfg) as log:
        log.write("config", stage=stage, **{**vars(cfg), "seed": seed})

        def periodic(ckpt):
            save_checkpoint(ckpt, out.with_name(f"{out.name}.step{ckpt.step}"))

        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            ckpt = train_stage(plan, corpus, init, seed=seed, config=None if init else cfg.model_config(),
                               settings=cfg.settings(), on_step=log.step,
                               checkpoint_every=cfg.checkpoint_every, on_checkpoint=periodic)
        for w in caught:
            log.write("warning", message=str(w.message))
        save_checkpoint(ckpt, out)
        log.write("checkpoint", path=str(out), stage=ckpt.stage, step=ckpt.step)
    return 0


def _split_head(ckpt):
    cfg = ModelConfig.from_dict(ckpt.config)
    expected = _param_shapes(cfg)
    backbone = {n: a for n, a in ckpt.params.items() if n in expected}
    head = {n[len(HEAD_PREFIX):]: a for n, a in ckpt.params.items() if n.startswith(HEAD_PREFIX)}
    return Checkpoint(ckpt.config, backbone, ckpt.stage, ckpt.step, ckpt.seed, ckpt.extra), head


def _task_data(task, corpus, config, seed):
    if not corpus.latents:
        raise ConfigError(f"task {task} needs latents.jsonl in the data directory")
    build = {"classify": tasks.matching_data, "vqa": tasks.vqa_data, "nlvr2": tasks.two_image_data}[task]
    return build(corpus, config, seed)


def _head_dim(task, cfg, model_config):
    need = 2 * model_config.hidden if task == "nlvr2" else model_config.hidden
    if cfg.head_input_dim and cfg.head_input_dim != need:
        raise ConfigError(f"task {task} needs head_input_dim={need}, config has {cfg.head_input_dim}")
    return need


def cmd_finetune(args):
    cfg, seed = _config(args)
    ckpt, _ = _split_head(load_checkpoint(args.ckpt))
    corpus = load_corpus(args.data)
    model_config = ModelConfig.from_dict(ckpt.config)
    with _writer(args, cfg) as log:
        if args.task == "retrieval":
            out = tasks.finetune_retrieval(ckpt, corpus, cfg.finetune_epochs, cfg.finetune_lr,
                                           cfg.batch_size, seed, on_step=log.step)
        else:
            _head_dim(args.task, cfg, model_config)
            data = _task_data(args.task, corpus, model_config, seed)
            model, head = tasks.finetune_classifier(ckpt, data, cfg.finetune_epochs, cfg.finetune_lr,
                                                    batch_size=cfg.batch_size, seed=seed, on_step=log.step)
            params = model.arrays()
            params[HEAD_PREFIX + "weight"] = head.weight.data.copy()
            params[HEAD_PREFIX + "bias"] = head.bias.data.copy()
            extra = dict(ckpt.extra, task=args.task)
            out = Checkpoint(ckpt.config, params, f"finetune-{args.task}", ckpt.step, seed, extra)
        save_checkpoint(out, args.out)
        log.write("checkpoint", path=str(args.out), stage=out.stage, task=args.task)
    return 0


def cmd_eval(args):
    cfg, seed = _config(args)
    ckpt, head_arrays = _split_head(load_checkpoint(args.ckpt))
    model = tasks.model_from_checkpoint(ckpt)
    corpus = load_corpus(args.data)
    with _writer(args, cfg) as log:
        if args.task == "retrieval":
            patches, tokens = prepare_pairs(corpus, model.config)
            report = tasks.evaluate_retrieval(model, patches, tokens, args.mode)
            for key, value in sorted(report.items()):
                if key.startswith(("i2t_r", "t2i_r")):
                    direction, k = key.split("_r")
                    log.write("eval", task="retrieval", mode=args.mode, metric=f"{direction}_recall",
                              k=int(k), value=value, seeds=[seed])
            log.write("eval", task="retrieval", mode=args.mode, metric="forwards", k=None,
                      value=report["forwards"], seeds=[seed])
            log.write("eval", task="retrieval", mode=args.mode, metric="seconds", k=None,
                      value=report["seconds"], seeds=[seed])
            return 0
        if ckpt.extra.get("task") != args.task or not head_arrays:
            raise ConfigError(f"checkpoint was not fine-tuned for task {args.task}")
        _head_dim(args.task, cfg, model.config)
        head = tasks.ClassifierHead(tasks.Tensor(head_arrays["weight"]), tasks.Tensor(head_arrays["bias"]))
        data = _task_data(args.task, corpus, model.config, seed)
        acc = tasks.classification_accuracy(model, head, data)
        log.write("eval", task=args.task, metric="accuracy", k=None, value=acc, seeds=[seed])
    return 0


def cmd_gradcheck(args):
    from .numerics.gradcheck import op_names, run_op_checks
    from .numerics.tensor import corrupt_gradient
    from .diagnostics import check_model

    seed = resolve_seed(args.seed, 0)
    if args.corrupt and args.corrupt not in op_names():
        raise UsageError(f"unknown op {args.corrupt!r}")

    def run():
        if args.scope == "op":
            return run_op_checks(seed)
        return check_model(seed)

    if args.corrupt:
        with corrupt_gradient(args.corrupt, 1.5):
            results = run()
    else:
        results = run()
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise CheckFailure(f"gradient check failed for: {', '.join(failed)}")
    return 0


# -- parser -------------------------------------------------------------------
def build_parser():
    p = _Parser(prog="mome", description="Mixture-of-modality-experts toy pretraining.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-data", help="write a synthetic paired corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--pairs", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--split", choices=("all", "train", "heldout"), default="all",
                   help="train/heldout draw from disjoint attribute combinations")
    g.add_argument("--heldout-pairs", type=int, default=64)
    g.set_defaults(func=cmd_gen_data)

    def common(q):
        q.add_argument("--config")
        q.add_argument("--seed", type=int)
        q.add_argument("--metrics", help="append JSON-lines records to this file")
        q.add_argument("--quiet", action="store_true", help="do not echo records to stdout")

    t = sub.add_parser("pretrain", help="run one pretraining stage")
    t.add_argument("--stage", required=True, choices=("vision", "text", "vl", "vision-language"))
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--init")
    t.add_argument("--hardneg", choices=("local", "global"))
    t.add_argument("--workers", type=int)
    t.add_argument("--steps", type=int, help="override the stage's step count")
    common(t)
    t.set_defaults(func=cmd_pretrain)

    f = sub.add_parser("finetune", help="fine-tune a pretrained checkpoint")
    f.add_argument("--task", required=True, choices=("retrieval",) + CLASSIFY_TASKS)
    f.add_argument("--ckpt", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--out", required=True)
    common(f)
    f.set_defaults(func=cmd_finetune)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--task", required=True, choices=("retrieval",) + CLASSIFY_TASKS)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--mode", choices=("dual", "fusion-demo"), default="dual")
    common(e)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference gradient checks in float64")
    c.add_argument("--scope", choices=("op", "model"), default="op")
    c.add_argument("--seed", type=int)
    c.add_argument("--corrupt", metavar="OP", help="self-test: scale OP's backward by 1.5")
    c.set_defaults(func=cmd_gradcheck)
    return p


def _report(exc):
    message = str(exc).replace("\n", " ").replace('"', "'")
    print(f'error code={exc.code} exit={exc.exit_code} message="{message}"', file=sys.stderr)
    return exc.exit_code


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except MomeError as exc:
        return _report(exc)
    except OSError as exc:
        err = MomeError(f"{exc.strerror}: {exc.filename}")
        err.exit_code, err.code = 4, "io"
        return _report(err)


if __name__ == "__main__":
    sys.exit(main())
