"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--scaling]

Prints the best-of-``repeat`` time per call for each hot kernel and for a
full training step, then the speedup. ``--scaling`` adds a breakdown of
inference time against sentence length (graph preparation vs decoding).
"""

import argparse
import timeit

import numpy as np

from slahan.corpus import FeatureSet, Sentence, SyntheticContextual, synthetic_parenthetical_corpus
from slahan.model import ModelConfig, SlahanModel
from slahan.numerics import Tape, kernels


def kernel_cases(rng, hidden, n):
    W = rng.normal(size=(4 * hidden, 2 * hidden))
    b = np.zeros(4 * hidden)
    X = rng.normal(size=(n, hidden))
    h0 = np.zeros(hidden)
    B = rng.uniform(size=(n + 1, n + 1))
    H = rng.normal(size=(n + 1, 2 * hidden))
    a = rng.integers(0, 20, 60)
    c = rng.integers(0, 20, 60)
    return {
        f"lstm_sequence_forward h={hidden} n={n}": lambda: kernels.lstm_sequence_forward(W, b, X, h0, h0, False),
        f"lstm_cell_forward h={hidden}": lambda: kernels.lstm_cell_forward(W, b, X[0], h0, h0),
        f"weighted_maxpool_forward n={n}": lambda: kernels.weighted_maxpool_forward(B, H),
        "lcs_length 60x60": lambda: kernels.lcs_length(a, c),
    }


def training_step_case(hidden):
    corpus = synthetic_parenthetical_corpus(4, seed=0, max_words=20)
    fs = FeatureSet(contextual=(SyntheticContextual("ctx", 2, 16),))
    model = SlahanModel(ModelConfig(hidden_dim=hidden, contextual=(("ctx", 2, 16),), syntax_lambda=1.0), seed=0)
    feats = [fs.for_sentence(i, s) for i, s in enumerate(corpus)]

    def step():
        model.params.zero_grad()
        for s, f in zip(corpus, feats):
            t = Tape()
            t.backward(model.sentence_loss(t, s, f))

    return {f"train step (4 sentences, h={hidden})": step}


def best_time(fn, repeat):
    number = max(1, int(0.2 / max(timeit.timeit(fn, number=1), 1e-7)))
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def compare(repeat, hidden, n):
    cases = {**kernel_cases(np.random.default_rng(0), hidden, n), **training_step_case(hidden)}
    backends = ["python"] + (["compiled"] if kernels.compiled_available() else [])
    results = {}
    previous = kernels.BACKEND
    try:
        for backend in backends:
            kernels.set_backend(backend)
            results[backend] = {name: best_time(fn, repeat) for name, fn in cases.items()}
    finally:
        kernels.set_backend(previous)
    width = max(map(len, cases))
    print(f"{'case':<{width}}  " + "  ".join(f"{b:>12}" for b in backends) + "  speedup")
    for name in cases:
        row = "  ".join(f"{1e6 * results[b][name]:>10.1f}us" for b in backends)
        speed = results["python"][name] / results["compiled"][name] if "compiled" in results else float("nan")
        print(f"{name:<{width}}  {row}  {speed:6.2f}x")
    if "compiled" not in results:
        print("compiled extension not built; only the fallback was timed")


def scaling(repeat, hidden, lengths=(8, 16, 32, 64, 128)):
    cfg = ModelConfig(hidden_dim=hidden, contextual=(("ctx", 2, 16),), dropout=0.0)
    model = SlahanModel(cfg, seed=0)
    fs = FeatureSet(contextual=(SyntheticContextual("ctx", 2, 16),))
    print(f"\ninference time vs sentence length (h={hidden}, backend={kernels.BACKEND})")
    print(f"{'n':>5} {'prepare ms':>11} {'decode ms':>10} {'total ms':>9}")
    for n in lengths:
        s = Sentence.from_words([f"w{i}" for i in range(n)])
        f = fs.for_sentence(0, s)
        prep = best_time(lambda: model.prepare(Tape(record=False), s, f), repeat)
        total = best_time(lambda: model.greedy_decode(s, f), repeat)
        print(f"{n:>5} {1e3 * prep:>11.2f} {1e3 * (total - prep):>10.2f} {1e3 * total:>9.2f}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--hidden", type=int, default=32)
    ap.add_argument("--length", type=int, default=30)
    ap.add_argument("--scaling", action="store_true")
    args = ap.parse_args()
    compare(args.repeat, args.hidden, args.length)
    if args.scaling:
        scaling(args.repeat, args.hidden)


if __name__ == "__main__":
    main()
