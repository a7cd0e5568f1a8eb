"""Mini-batch Adam training with global-norm clipping and dev-accuracy early stopping."""

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .corpus import batch_iterator
from .model import save_checkpoint
from .numerics import NumericalError, Tape

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 0.001
    clip_threshold: float = 5.0
    clip_mode: str = "global"  # or "value"
    max_epochs: int = 20
    batch_size: int = 16
    seed: int = 0
    syntax_lambda: float = None  # None -> the model config's value
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    stop_at_accuracy: float = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.clip_threshold <= 0:
            raise ValueError("clip_threshold must be > 0")
        if self.clip_mode not in ("global", "value"):
            raise ValueError("clip_mode must be 'global' or 'value'")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


@dataclass
class TrainState:
    epoch: int = 0
    best_accuracy: float = -1.0
    best_epoch: int = 0
    best_checkpoint: str = None
    adam: AdamState = field(default_factory=AdamState)


@dataclass
class TrainResult:
    best_accuracy: float
    best_epoch: int
    best_params: dict
    history: list
    checkpoint_path: str = None


def adam_step(params, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update from the gradients held in ``params``."""
    for name in params.names():
        g = params.grad(name)
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for name in params.names():
        g = params.grad(name)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        params.value(name)[...] -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def clip_gradients(grads, threshold, mode="global"):
    """Clip a list of gradient arrays in place; returns the pre-clipping global norm.

    ``global``: if the joint L2 norm exceeds ``threshold`` every array is
    scaled by ``threshold / norm``. ``value``: each entry is clamped to
    ``[-threshold, threshold]``.
    """
    if threshold <= 0:
        raise ValueError("threshold must be > 0")
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if mode == "value":
        for g in grads:
            np.clip(g, -threshold, threshold, out=g)
    elif norm > threshold:
        scale = threshold / norm
        for g in grads:
            g *= scale
    return norm


def per_sentence_accuracy(model, corpus, features):
    """Fraction of sentences whose greedy label sequence equals the gold one exactly."""
    if not corpus:
        return 0.0
    hits = 0
    for i, s in enumerate(corpus):
        f = features[i] if isinstance(features, list) else features.for_sentence(i, s)
        labels, _ = model.greedy_decode(s, f)
        hits += list(labels) == list(s.labels)
    return hits / len(corpus)


def head_accuracy(model, corpus, features):
    """Unlabelled attachment score of the argmax head attention against gold heads."""
    correct = total = 0
    for i, s in enumerate(corpus):
        f = features[i] if isinstance(features, list) else features.for_sentence(i, s)
        pred = model.head_argmax(s, f)
        gold = np.asarray(s.heads)
        correct += int(np.sum(pred[1:] == gold[1:]))
        total += s.n
    return correct / total if total else 0.0


def _materialize(corpus, features):
    return [features.for_sentence(i, s) for i, s in enumerate(corpus)]


def train(train_corpus, dev_corpus, model, train_features, dev_features, config,
          out_dir=None, progress=None, vocab_hash=""):
    """Train ``model`` in place and return the best-dev-accuracy snapshot.

    Per batch: sentence losses are summed, gradients divided by the number of
    sentences, clipped, then Adam-stepped. Dev accuracy is measured with
    greedy decoding after each epoch.
    """
    if not train_corpus:
        raise ValueError("empty training corpus")
    if not dev_corpus:
        raise ValueError("empty dev corpus")
    if any(s.labels is None for s in dev_corpus):
        raise ValueError("dev corpus needs gold labels")
    lam = config.syntax_lambda
    train_feats = _materialize(train_corpus, train_features)
    dev_feats = _materialize(dev_corpus, dev_features)
    params = model.params
    state = TrainState()
    rng = np.random.default_rng([config.seed, 1])
    history = []
    best_params = params.state_dict()
    ckpt_path = log_fh = None
    if out_dir is not None:
        os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)
        os.makedirs(os.path.join(out_dir, "logs"), exist_ok=True)
        ckpt_path = os.path.join(out_dir, "checkpoints", "best.ckpt")
        log_fh = open(os.path.join(out_dir, "logs", "epochs.jsonl"), "w", encoding="utf-8")
    try:
        for epoch in range(1, config.max_epochs + 1):
            started = time.perf_counter()
            total_loss = 0.0
            for batch in batch_iterator(train_corpus, config.batch_size, config.seed, epoch):
                params.zero_grad()
                for idx, sent in batch:
                    tape = Tape()
                    loss = model.sentence_loss(
                        tape, sent, train_feats[idx], syntax_lambda=lam, train=True, rng=rng
                    )
                    tape.backward(loss)
                    total_loss += float(loss.value)
                params.scale_grads(1.0 / len(batch))
                clip_gradients(
                    [params.grad(n) for n in params.names()], config.clip_threshold, config.clip_mode
                )
                adam_step(params, state.adam, config.lr, config.beta1, config.beta2, config.adam_eps)
            acc = per_sentence_accuracy(model, dev_corpus, dev_feats)
            state.epoch = epoch
            record = {
                "epoch": epoch,
                "train_loss": total_loss / len(train_corpus),
                "dev_accuracy": acc,
                "seconds": time.perf_counter() - started,
            }
            history.append(record)
            if log_fh is not None:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            if progress is not None:
                progress(record)
            log.info("epoch %d loss %.4f dev acc %.4f", epoch, record["train_loss"], acc)
            if acc > state.best_accuracy:
                state.best_accuracy = acc
                state.best_epoch = epoch
                best_params = params.state_dict()
                if ckpt_path is not None:
                    save_checkpoint(ckpt_path, model, vocab_hash=vocab_hash, extra={"epoch": epoch, "dev_accuracy": acc})
                    state.best_checkpoint = ckpt_path
            if config.stop_at_accuracy is not None and acc >= config.stop_at_accuracy:
                break
    finally:
        if log_fh is not None:
            log_fh.close()
    return TrainResult(
        best_accuracy=state.best_accuracy,
        best_epoch=state.best_epoch,
        best_params=best_params,
        history=history,
        checkpoint_path=state.best_checkpoint,
    )


def train_config_dict(config):
    return asdict(config)
