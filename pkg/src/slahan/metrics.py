"""Compression evaluation: kept-token F1, ROUGE, compression ratios, significance, link statistics.

All scores are fractions in [0, 1]; compression-ratio differences are in
percentage points. Macro averages are plain means over sentences.
"""

import json
import warnings
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from .corpus import KEEP, CorpusError
from .numerics import kernels


def kept_token_f1(gold_keep, system_keep):
    """``(precision, recall, f1)`` over sets of retained token positions.

    Empty cases: both empty gives ``(1, 1, 1)``; otherwise an empty side
    gives zeros for the undefined ratio and an F1 of 0.
    """
    g, s = set(gold_keep), set(system_keep)
    if not g and not s:
        return 1.0, 1.0, 1.0
    hit = len(g & s)
    p = hit / len(s) if s else 0.0
    r = hit / len(g) if g else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def byte_length(tokens):
    """UTF-8 length of the tokens joined by single spaces."""
    return len(" ".join(tokens).encode("utf-8"))


def byte_truncate(tokens, limit):
    """Longest prefix of whole tokens whose space-joined UTF-8 length is <= ``limit``."""
    out = []
    used = 0
    for tok in tokens:
        cost = len(tok.encode("utf-8")) + (1 if out else 0)
        if used + cost > limit:
            break
        out.append(tok)
        used += cost
    return out


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(reference, candidate, n, warn=True):
    """Clipped n-gram recall of ``candidate`` against ``reference``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if len(reference) < n:
        if warn:
            warnings.warn(f"reference has {len(reference)} tokens, fewer than n={n}; ROUGE-{n} is 0")
        return 0.0
    ref = _ngrams(list(reference), n)
    cand = _ngrams(list(candidate), n)
    overlap = sum(min(c, cand[g]) for g, c in ref.items())
    return overlap / sum(ref.values())


def lcs_length(a, b):
    """Longest common subsequence length (token equality)."""
    if not a or not b:
        return 0
    ids = {}
    ia = np.fromiter((ids.setdefault(t, len(ids)) for t in a), dtype=np.int64, count=len(a))
    ib = np.fromiter((ids.setdefault(t, len(ids)) for t in b), dtype=np.int64, count=len(b))
    return int(kernels.lcs_length(ia, ib))


def rouge_l(reference, candidate, beta=None):
    """LCS-based F-measure; ``beta=None`` is the recall limit (beta -> infinity)."""
    if not reference or not candidate:
        return 0.0
    lcs = lcs_length(reference, candidate)
    if lcs == 0:
        return 0.0
    r = lcs / len(reference)
    p = lcs / len(candidate)
    if beta is None:
        return r
    b2 = beta * beta
    return (1 + b2) * r * p / (r + b2 * p)


def delta_c(system_cr, gold_cr):
    return system_cr - gold_cr


def token_compression_ratio(words, keep):
    """Percentage of words kept."""
    return 100.0 * len(keep) / len(words) if words else 0.0


def char_compression_ratio(words, keep):
    """Percentage of characters kept (token characters only; root and spaces excluded)."""
    total = sum(len(w) for w in words)
    if total == 0:
        return 0.0
    return 100.0 * sum(len(words[i]) for i in keep) / total


def paired_bootstrap(scores_a, scores_b, samples=100_000, seed=0, chunk=None):
    """One-sided paired bootstrap p-value for the observed winner.

    Sentence indices are resampled with replacement; p is the fraction of
    resamples where the observed loser's mean reaches the winner's. Exact ties
    count one half, so identical systems score 0.5 rather than 1. When the
    observed means are equal, A is treated as the winner.
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"score vectors must be 1-D and equal length, got {a.shape} and {b.shape}")
    if a.size == 0:
        raise ValueError("empty score vectors")
    if samples < 1:
        raise ValueError("samples must be >= 1")
    diff = a - b
    if diff.mean() < 0:
        diff = -diff
    m = diff.size
    rng = np.random.default_rng(seed)
    if chunk is None:
        chunk = max(1, min(samples, 4_000_000 // m))
    losses = ties = 0.0
    done = 0
    while done < samples:
        k = min(chunk, samples - done)
        means = diff[rng.integers(0, m, size=(k, m))].mean(axis=1)
        losses += np.count_nonzero(means < 0)
        ties += np.count_nonzero(means == 0)
        done += k
    return (losses + 0.5 * ties) / samples


def lookahead_link_proportion(corpus, bucket_edges=(10, 20, 30, 40)):
    """Share of retained words linked to a later retained word as parent or child.

    ``bucket_edges`` are inclusive upper bounds on sentence length; a final
    open bucket catches longer sentences. Returns ``{label: {"retained",
    "parent", "child", "either"}}`` with proportions in [0, 1].
    """
    edges = sorted(bucket_edges)
    labels = []
    lo = 1
    for hi in edges:
        labels.append(f"{lo}-{hi}")
        lo = hi + 1
    labels.append(f"{lo}+")
    acc = {lab: np.zeros(4, dtype=np.int64) for lab in labels}
    for k, s in enumerate(corpus):
        if s.heads is None or s.labels is None:
            raise CorpusError(f"sentence {k} lacks gold heads or labels")
        lab = labels[int(np.searchsorted(edges, s.n))]
        kept = set(s.keep_indices())
        heads = s.heads
        for t in sorted(kept):
            par = heads[t] > t and heads[t] in kept
            chi = any(heads[u] == t for u in kept if u > t)
            acc[lab] += (1, par, chi, par or chi)
    out = {}
    for lab in labels:
        n, p, c, e = acc[lab].tolist()
        out[lab] = {
            "retained": n,
            "parent": p / n if n else 0.0,
            "child": c / n if n else 0.0,
            "either": e / n if n else 0.0,
        }
    return out


@dataclass
class SentenceScores:
    f1: float
    rouge1: float
    rouge2: float
    rougeL: float
    cr_tokens: float
    cr_chars: float
    gold_cr_tokens: float
    gold_cr_chars: float


COLUMNS = (("F1", "f1"), ("R-1", "rouge1"), ("R-2", "rouge2"), ("R-L", "rougeL"))


@dataclass
class EvaluationReport:
    records: list
    averages: dict
    delta_c_tokens: float
    delta_c_chars: float
    significance: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "averages": self.averages,
            "delta_c_tokens": self.delta_c_tokens,
            "delta_c_chars": self.delta_c_chars,
            "significance": self.significance,
            "records": [asdict(r) for r in self.records],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self):
        """Aligned table: scores in percent, compression ratio difference in points."""
        head = [name for name, _ in COLUMNS] + ["dC", "CR", "dC(char)"]
        row = [f"{100 * self.averages[key]:.1f}" for _, key in COLUMNS]
        row += [
            f"{self.delta_c_tokens:+.1f}",
            f"{self.averages['cr_tokens']:.1f}",
            f"{self.delta_c_chars:+.1f}",
        ]
        widths = [max(len(h), len(v)) for h, v in zip(head, row)]
        lines = [
            "  ".join(h.rjust(w) for h, w in zip(head, widths)),
            "  ".join(v.rjust(w) for v, w in zip(row, widths)),
            f"sentences: {len(self.records)}",
        ]
        for metric, sig in sorted(self.significance.items()):
            lines.append(f"{metric}: p={sig['p_value']:.4g} ({sig['samples']} samples)")
        return "\n".join(lines) + "\n"


def score_sentence(words, gold_labels, system_labels):
    """Per-sentence scores from word lists and keep/delete label sequences."""
    if len(gold_labels) != len(words) or len(system_labels) != len(words):
        raise ValueError("label sequences must match the sentence length")
    gold = [i for i, y in enumerate(gold_labels) if y == KEEP]
    sys_ = [i for i, y in enumerate(system_labels) if y == KEEP]
    ref = [words[i] for i in gold]
    cand = byte_truncate([words[i] for i in sys_], byte_length(ref))
    return SentenceScores(
        f1=kept_token_f1(gold, sys_)[2],
        rouge1=rouge_n(ref, cand, 1, warn=False),
        rouge2=rouge_n(ref, cand, 2, warn=False),
        rougeL=rouge_l(ref, cand),
        cr_tokens=token_compression_ratio(words, sys_),
        cr_chars=char_compression_ratio(words, sys_),
        gold_cr_tokens=token_compression_ratio(words, gold),
        gold_cr_chars=char_compression_ratio(words, gold),
    )


def evaluate(corpus, system_labels, baseline_labels=None, samples=100_000, seed=0):
    """Score system labels against a gold corpus; optionally test against a baseline."""
    if len(corpus) != len(system_labels):
        raise ValueError(f"{len(corpus)} gold sentences but {len(system_labels)} system outputs")
    if not corpus:
        raise ValueError("empty corpus")
    records = [score_sentence(s.words, s.labels, y) for s, y in zip(corpus, system_labels)]
    keys = [f for f in SentenceScores.__dataclass_fields__]
    averages = {k: float(np.mean([getattr(r, k) for r in records])) for k in keys}
    report = EvaluationReport(
        records=records,
        averages=averages,
        delta_c_tokens=delta_c(averages["cr_tokens"], averages["gold_cr_tokens"]),
        delta_c_chars=delta_c(averages["cr_chars"], averages["gold_cr_chars"]),
    )
    if baseline_labels is not None:
        base = [score_sentence(s.words, s.labels, y) for s, y in zip(corpus, baseline_labels)]
        for _, key in COLUMNS:
            p = paired_bootstrap(
                [getattr(r, key) for r in records], [getattr(r, key) for r in base], samples, seed
            )
            report.significance[key] = {"p_value": p, "samples": samples}
    return report
