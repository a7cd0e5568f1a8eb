"""Command-line entry point: convert, synth, train, compress, eval, inspect, selfcheck.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from . import graph_algebra as ga
from .corpus import (
    LABEL_NAMES,
    CorpusError,
    FeatureContainer,
    FeatureSet,
    Sentence,
    StaticTable,
    SyntheticContextual,
    SyntheticStaticTable,
    convert_google_records,
    iter_json_objects,
    load_corpus,
    save_corpus,
    synthetic_parenthetical_corpus,
    vocabulary,
)
from .metrics import evaluate
from .model import CheckpointError, ModelConfig, SlahanModel, StepTrace, load_checkpoint
from .numerics import NumericalError, check_gradients, kernels
from .trainer import TrainConfig, head_accuracy, per_sentence_accuracy, train

log = logging.getLogger("slahan")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- config handling -------------------------------------------------------------

# key -> (argparse dest, converter); keys double as config-file keys
TRAIN_KEYS = {
    "variant": str,
    "lambda": float,
    "orders": str,
    "hidden": int,
    "depth": int,
    "dropout": float,
    "seed": int,
    "features": str,
    "dev_features": str,
    "max_epochs": int,
    "batch": int,
    "lr": float,
    "clip": float,
    "clip_mode": str,
    "stop_at_accuracy": float,
    "train": str,
    "dev": str,
    "out": str,
}
TRAIN_DEFAULTS = {
    "variant": "slahan",
    "lambda": 1.0,
    "orders": "1,2,3,4",
    "hidden": 200,
    "depth": 2,
    "dropout": 0.3,
    "seed": 0,
    "max_epochs": 20,
    "batch": 16,
    "lr": 0.001,
    "clip": 5.0,
    "clip_mode": "global",
}


def read_config_file(path):
    """``key = value`` lines; ``#`` starts a comment; dashes in keys become underscores."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key = value")
            key, value = (p.strip() for p in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in TRAIN_KEYS:
                raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
            if len(value) >= 2 and value[0] == value[-1] and value[0] in "\"'":
                value = value[1:-1]
            try:
                out[key] = TRAIN_KEYS[key](value)
            except ValueError:
                raise UsageError(f"{path}:{lineno}: bad value for {key}: {value!r}") from None
    return out


def resolve_train_options(args):
    opts = dict(TRAIN_DEFAULTS)
    if args.config:
        opts.update(read_config_file(args.config))
    for key in TRAIN_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            opts[key] = value
    for key in ("train", "dev", "out", "features"):
        if not opts.get(key):
            raise UsageError(f"missing required option --{key.replace('_', '-')}")
    return opts


def parse_orders(text):
    try:
        orders = tuple(int(x) for x in str(text).split(",") if x.strip())
    except ValueError:
        raise UsageError(f"bad --orders {text!r}") from None
    if not orders or min(orders) < 1:
        raise UsageError("--orders needs positive integers")
    return orders


def parse_features(text):
    """Comma list of sources.

    ``glove:PATH`` word-vector text file; ``static-synth:DIM`` hashed random
    vectors; ``ctx:MANIFEST`` on-disk contextual container;
    ``ctx-synth:NAME:LAYERS:DIM`` random contextual features.
    """
    static = None
    ctx = []
    for item in (p.strip() for p in text.split(",")):
        if not item:
            continue
        kind, _, rest = item.partition(":")
        try:
            if kind == "glove":
                src = StaticTable.from_text(rest)
            elif kind == "static-synth":
                src = SyntheticStaticTable(int(rest))
            elif kind == "ctx":
                ctx.append(FeatureContainer(rest))
                continue
            elif kind == "ctx-synth":
                name, layers, dim = rest.split(":")
                ctx.append(SyntheticContextual(name, int(layers), int(dim)))
                continue
            else:
                raise UsageError(f"unknown feature source {item!r}")
        except ValueError:
            raise UsageError(f"malformed feature source {item!r}") from None
        if static is not None:
            raise UsageError("at most one static feature source")
        static = src
    if static is None and not ctx:
        raise UsageError("no feature sources given")
    return FeatureSet(static=static, contextual=tuple(ctx))


def check_features_match(config, features):
    sig = features.signature()
    want = {"static_dim": config.static_dim, "contextual": [list(c) for c in config.contextual]}
    if sig != want:
        raise CorpusError(f"features {sig} do not match the checkpoint's {want}")


def _load(path, fmt="jsonl"):
    if not os.path.exists(path):
        raise CorpusError(f"{path}: no such file")
    return load_corpus(path, format=fmt)


# -- commands ----------------------------------------------------------------------


def cmd_convert(args):
    if not os.path.exists(args.input):
        raise CorpusError(f"{args.input}: no such file")
    sentences, stats = convert_google_records(iter_json_objects(args.input))
    save_corpus(sentences, args.output)
    print(json.dumps(stats))
    return EXIT_OK


def cmd_synth(args):
    corpus = synthetic_parenthetical_corpus(args.num, seed=args.seed)
    save_corpus(corpus, args.output)
    print(f"wrote {len(corpus)} sentences to {args.output}")
    return EXIT_OK


def cmd_train(args):
    opts = resolve_train_options(args)
    train_corpus = _load(opts["train"])
    dev_corpus = _load(opts["dev"])
    features = parse_features(opts["features"])
    dev_features = parse_features(opts["dev_features"]) if opts.get("dev_features") else features
    sig = features.signature()
    lam = opts["lambda"] if opts["variant"] != "base" else 0.0
    try:
        config = ModelConfig(
            variant=opts["variant"],
            orders=parse_orders(opts["orders"]),
            hidden_dim=opts["hidden"],
            lstm_depth=opts["depth"],
            dropout=opts["dropout"],
            syntax_lambda=lam,
            static_dim=sig["static_dim"],
            contextual=tuple(tuple(c) for c in sig["contextual"]),
        )
        tconf = TrainConfig(
            lr=opts["lr"],
            clip_threshold=opts["clip"],
            clip_mode=opts["clip_mode"],
            max_epochs=opts["max_epochs"],
            batch_size=opts["batch"],
            seed=opts["seed"],
            stop_at_accuracy=opts.get("stop_at_accuracy"),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if lam > 0 and any(s.heads is None for s in train_corpus):
        raise CorpusError("training with --lambda > 0 needs gold trees on every sentence")
    out = opts["out"]
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.json"), "w", encoding="utf-8") as fh:
        json.dump({"options": opts, "model": config.to_dict()}, fh, indent=2, sort_keys=True)
    model = SlahanModel(config, seed=opts["seed"])
    result = train(
        train_corpus, dev_corpus, model, features, dev_features, tconf, out_dir=out,
        progress=lambda r: log.info("epoch %(epoch)d loss %(train_loss).4f dev %(dev_accuracy).4f", r),
        vocab_hash=features.identity(),
    )
    print(f"best dev accuracy {result.best_accuracy:.4f} at epoch {result.best_epoch}")
    print(f"checkpoint: {result.checkpoint_path}")
    return EXIT_OK


def _load_model(path, features):
    if not os.path.exists(path):
        raise CorpusError(f"{path}: no such checkpoint")
    model, header = load_checkpoint(path)
    check_features_match(model.config, features)
    return model, header


def decode_corpus(model, corpus, features):
    return [model.greedy_decode(s, features.for_sentence(i, s))[0] for i, s in enumerate(corpus)]


def cmd_compress(args):
    corpus = _load(args.corpus)
    features = parse_features(args.features)
    model, _ = _load_model(args.checkpoint, features)
    with open(args.output, "w", encoding="utf-8") as fh:
        for s, labels in zip(corpus, decode_corpus(model, corpus, features)):
            rec = {
                "tokens": s.words,
                "labels": [LABEL_NAMES[y] for y in labels],
                "compression": " ".join(s.compress(labels)),
            }
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
    print(f"compressed {len(corpus)} sentences to {args.output}")
    return EXIT_OK


def _read_system(path, gold):
    labels = [s.labels for s in _load(path)]
    if len(labels) != len(gold):
        raise CorpusError(f"{path}: {len(labels)} outputs for {len(gold)} gold sentences")
    for k, (s, y) in enumerate(zip(gold, labels)):
        if y is None or len(y) != s.n:
            raise CorpusError(f"{path}: output {k + 1} does not align with its gold sentence")
    return labels


def cmd_eval(args):
    gold = _load(args.gold)
    if any(s.labels is None for s in gold):
        raise CorpusError(f"{args.gold}: gold labels missing")
    if args.system:
        system = _read_system(args.system, gold)
    elif args.checkpoint:
        if not args.features:
            raise UsageError("--checkpoint needs --features")
        features = parse_features(args.features)
        model, _ = _load_model(args.checkpoint, features)
        system = decode_corpus(model, gold, features)
    else:
        raise UsageError("give --system or --checkpoint")
    baseline = _read_system(args.baseline, gold) if args.baseline else None
    report = evaluate(gold, system, baseline, samples=args.samples, seed=args.seed)
    out = os.path.join(args.out, "eval")
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "report.json"), "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
    text = report.to_text()
    with open(os.path.join(out, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    sys.stdout.write(text)
    return EXIT_OK


def _matrix(a):
    return np.round(a, 6).tolist()


def cmd_inspect(args):
    words = args.sentence.split()
    heads = None
    if args.heads:
        try:
            heads = [int(h) for h in args.heads.split(",")]
        except ValueError:
            raise UsageError(f"bad --heads {args.heads!r}") from None
    sentence = Sentence.from_words(words, heads)
    orders = parse_orders(args.orders)
    dump = {"tokens": list(sentence.tokens)}
    if args.gold_tree:
        if heads is None:
            raise UsageError("--gold-tree needs --heads")
        A1 = ga.hard_head_matrix(sentence.heads)
        parents = ga.compose_parent_graphs(A1, orders)
        children = ga.child_graphs_from_parent(parents)
        dump["parent_graphs"] = {str(d): _matrix(A) for d, A in parents.items()}
        dump["child_graphs"] = {str(d): _matrix(B) for d, B in children.items()}
    else:
        if not args.checkpoint or not args.features:
            raise UsageError("inspect needs --gold-tree, or --checkpoint with --features")
        features = parse_features(args.features)
        model, _ = _load_model(args.checkpoint, features)
        if not model.config.graph:
            raise UsageError("the base variant has no graphs to inspect")
        trace = StepTrace()
        labels, compressed = model.greedy_decode(sentence, features.for_sentence(0, sentence), trace=trace)
        dump["labels"] = [LABEL_NAMES[y] for y in labels]
        dump["compression"] = " ".join(compressed)
        dump["parent_graphs"] = {str(d): _matrix(A) for d, A in trace.parent_graphs.items()}
        dump["child_graphs"] = {str(d): _matrix(B) for d, B in trace.child_graphs.items()}
        dump["steps"] = [
            {
                "t": t,
                "gate": _matrix(trace.gate[t - 1]),
                "eta_parent": None if trace.eta_parent[t - 1] is None else _matrix(trace.eta_parent[t - 1]),
                "eta_child": None if trace.eta_child[t - 1] is None else _matrix(trace.eta_child[t - 1]),
                "label_probs": _matrix(trace.label_probs[t - 1]),
            }
            for t in range(1, sentence.n + 1)
        ]
    text = json.dumps(dump, indent=1)
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return EXIT_OK


def run_selfcheck(seed=0, instances=30):
    """Returns ``[(name, ok, detail)]`` for the built-in consistency checks."""
    rng = np.random.default_rng(seed)
    results = []

    worst = 0.0
    constraint_ok = transpose_ok = True
    for _ in range(instances):
        n = int(rng.integers(1, 6))
        A1 = ga.constrained_head_distribution(rng.normal(0, 2, (n + 1, n + 1)))
        try:
            ga.check_head_distribution(A1)
        except AssertionError:
            constraint_ok = False
        parents = ga.compose_parent_graphs(A1, (1, 2, 3, 4))
        children = ga.child_graphs_from_parent(parents)
        for d, Ad in parents.items():
            transpose_ok &= np.array_equal(children[d], Ad.T)
            for t in range(n + 1):
                for j in range(n + 1):
                    worst = max(worst, abs(Ad[j, t] - ga.path_sum_oracle(A1, d, t, j)))
    results.append(("head constraints", constraint_ok, ""))
    results.append(("graph powers vs path oracle", worst < 1e-10, f"max abs err {worst:.2e}"))
    results.append(("child graphs are transposes", bool(transpose_ok), ""))

    corpus = synthetic_parenthetical_corpus(1, seed=seed, min_words=3, max_words=3, paren_prob=0.0)
    sent = corpus[0]
    fs = FeatureSet(static=SyntheticStaticTable(3, seed=seed), contextual=(SyntheticContextual("ctx", 2, 2, seed=seed),))
    cfg = ModelConfig(variant="slahan", orders=(1, 2), hidden_dim=2, lstm_depth=1, dropout=0.0,
                      static_dim=3, contextual=(("ctx", 2, 2),))
    model = SlahanModel(cfg, seed=seed)
    feats = fs.for_sentence(0, sent)
    report = check_gradients(lambda tape: model.sentence_loss(tape, sent, feats), model.params)
    g = max(report.values())
    results.append(("gradient check", g < 1e-4, f"max rel err {g:.2e}"))

    if kernels.compiled_available():
        X = rng.normal(size=(5, 3))
        W = rng.normal(size=(8, 5))
        b = rng.normal(size=8)
        outs = {}
        previous = kernels.BACKEND
        for name in ("python", "compiled"):
            kernels.set_backend(name)
            outs[name] = kernels.lstm_sequence_forward(W, b, X, np.zeros(2), np.zeros(2), False)[0]
        kernels.set_backend(previous)
        diff = float(np.max(np.abs(outs["python"] - outs["compiled"])))
        results.append(("kernel backend parity", diff < 1e-12, f"max abs diff {diff:.1e}"))
    return results


def cmd_selfcheck(args):
    results = run_selfcheck(seed=args.seed)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else ""))
    print(f"backend: {kernels.BACKEND}")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_NUMERIC


def cmd_score(args):
    """Per-sentence accuracy and head accuracy of a checkpoint on a labelled corpus."""
    corpus = _load(args.corpus)
    features = parse_features(args.features)
    model, _ = _load_model(args.checkpoint, features)
    out = {"per_sentence_accuracy": per_sentence_accuracy(model, corpus, features)}
    if model.config.graph and all(s.heads is not None for s in corpus):
        out["head_accuracy"] = head_accuracy(model, corpus, features)
    out["vocabulary"] = len(vocabulary(corpus))
    print(json.dumps(out))
    return EXIT_OK


# -- parser ------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="slahan", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    c = sub.add_parser("convert", parents=[common], help="public compression dataset JSON -> canonical JSONL")
    c.add_argument("input")
    c.add_argument("output")
    c.set_defaults(func=cmd_convert)

    c = sub.add_parser("synth", parents=[common], help="write the synthetic parenthesis-deletion corpus")
    c.add_argument("output")
    c.add_argument("--num", type=int, default=50)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_synth)

    c = sub.add_parser("train", parents=[common], help="train a model")
    c.add_argument("--config", help="key = value file; flags override it")
    c.add_argument("--train")
    c.add_argument("--dev")
    c.add_argument("--out")
    c.add_argument("--variant", choices=("base", "parent", "child", "slahan"))
    c.add_argument("--lambda", dest="lambda", type=float)
    c.add_argument("--orders")
    c.add_argument("--hidden", type=int)
    c.add_argument("--depth", type=int)
    c.add_argument("--dropout", type=float)
    c.add_argument("--seed", type=int)
    c.add_argument("--features", help=parse_features.__doc__.splitlines()[0])
    c.add_argument("--dev-features", dest="dev_features")
    c.add_argument("--max-epochs", dest="max_epochs", type=int)
    c.add_argument("--batch", type=int)
    c.add_argument("--lr", type=float)
    c.add_argument("--clip", type=float)
    c.add_argument("--clip-mode", dest="clip_mode", choices=("global", "value"))
    c.add_argument("--stop-at-accuracy", dest="stop_at_accuracy", type=float)
    c.set_defaults(func=cmd_train)

    c = sub.add_parser("compress", parents=[common], help="greedy-decode a corpus with a checkpoint")
    c.add_argument("checkpoint")
    c.add_argument("corpus")
    c.add_argument("--features", required=True)
    c.add_argument("-o", "--output", required=True)
    c.set_defaults(func=cmd_compress)

    c = sub.add_parser("eval", parents=[common], help="score system output against gold")
    c.add_argument("--gold", required=True)
    c.add_argument("--system", help="JSONL with tokens and labels, e.g. from compress")
    c.add_argument("--checkpoint")
    c.add_argument("--features")
    c.add_argument("--baseline", help="second system for paired bootstrap tests")
    c.add_argument("--samples", type=int, default=100_000)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_eval)

    c = sub.add_parser("score", parents=[common], help="per-sentence and head accuracy of a checkpoint")
    c.add_argument("checkpoint")
    c.add_argument("corpus")
    c.add_argument("--features", required=True)
    c.set_defaults(func=cmd_score)

    c = sub.add_parser("inspect", parents=[common], help="dump parent/child graphs and per-step gates for a sentence")
    c.add_argument("--sentence", required=True, help="space-separated words")
    c.add_argument("--heads", help="comma list of 1-based heads, 0 = root")
    c.add_argument("--gold-tree", action="store_true", help="use the given heads as a hard tree")
    c.add_argument("--checkpoint")
    c.add_argument("--features")
    c.add_argument("--orders", default="1,2,3,4")
    c.add_argument("-o", "--output")
    c.set_defaults(func=cmd_inspect)

    c = sub.add_parser("selfcheck", parents=[common], help="run oracle, constraint, gradient and parity checks")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_selfcheck)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if not getattr(args, "func", None):
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    started = time.perf_counter()
    try:
        code = args.func(args)
    except UsageError as exc:
        print(f"slahan: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"slahan: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CorpusError, CheckpointError, OSError) as exc:
        print(f"slahan: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    log.info("%s finished in %.1fs", args.command, time.perf_counter() - started)
    return code


if __name__ == "__main__":
    sys.exit(main())
