"""Recorded SLAHAN step outputs guarding against silent numerical drift.

Run ``python tests/golden.py`` to regenerate ``tests/data/golden_step.npz``
after an intentional change to the forward computation.
"""

import os

import numpy as np

from slahan.corpus import FeatureSet, Sentence, SyntheticContextual, SyntheticStaticTable
from slahan.model import ModelConfig, SlahanModel
from slahan.numerics import Tape, kernels

PATH = os.path.join(os.path.dirname(__file__), "data", "golden_step.npz")


def golden_values(backend="python"):
    """First decoder step of a fixed n=3, hidden=4 SLAHAN; recorded under the numpy backend."""
    previous = kernels.BACKEND
    kernels.set_backend(backend)
    try:
        cfg = ModelConfig(variant="slahan", orders=(1, 2), hidden_dim=4, lstm_depth=2, dropout=0.3,
                          static_dim=3, contextual=(("ctx", 2, 3),))
        model = SlahanModel(cfg, seed=11)
        sent = Sentence.from_words(["w1", "(", "w2"], [0, 1, 2], ["KEEP", "DELETE", "DELETE"])
        fs = FeatureSet(static=SyntheticStaticTable(3, seed=4), contextual=(SyntheticContextual("ctx", 2, 3, seed=4),))
        tape = Tape(record=False)
        enc = model.prepare(tape, sent, fs.for_sentence(0, sent))
        d0 = tape.constant(np.zeros(cfg.feedback_dim))
        logits, d1, states = model.decode_step(tape, enc, 1, None, d0, list(enc.init_states))
        return {
            "A1": enc.A1.value,
            "logits": logits.value,
            "d1": d1.value,
            "s1": states[-1][0].value,
        }
    finally:
        kernels.set_backend(previous)


if __name__ == "__main__":
    os.makedirs(os.path.dirname(PATH), exist_ok=True)
    np.savez(PATH, **golden_values())
    print(f"wrote {PATH}")
