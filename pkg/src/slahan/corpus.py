"""Sentences, gold trees and labels, token features, and batching.

Canonical corpus format is line-delimited JSON, one record per sentence::

    {"tokens": ["a", "b"], "heads": [0, 1], "labels": ["KEEP", "DELETE"]}

``heads`` are given for the words only, 0 means the root and ``k`` means the
k-th word (1-based). On load the root symbol is prepended, so inside a
:class:`Sentence` every index refers to a position in ``tokens`` and
``heads[0] == 0``.
"""

import hashlib
import json
import logging
import os
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

ROOT = "<root>"

KEEP, DELETE, EOS = 0, 1, 2
LABEL_NAMES = ("KEEP", "DELETE", "EOS")
NUM_LABELS = 3


class CorpusError(ValueError):
    """Malformed corpus or feature data."""


class LabelCodec:
    """Fixed bijection KEEP<->0, DELETE<->1, EOS<->2."""

    names = LABEL_NAMES

    @staticmethod
    def encode(label):
        if isinstance(label, (int, np.integer)) and 0 <= int(label) < NUM_LABELS:
            return int(label)
        if isinstance(label, str) and label.upper() in LABEL_NAMES:
            return LABEL_NAMES.index(label.upper())
        raise CorpusError(f"unknown label {label!r}")

    @staticmethod
    def decode(index):
        return LABEL_NAMES[int(index)]

    @staticmethod
    def one_hot(index):
        v = np.zeros(NUM_LABELS)
        if index is not None:
            v[int(index)] = 1.0
        return v


def validate_tree(heads):
    """Check ``heads`` (root-prefixed) is a tree rooted at 0; raise :class:`CorpusError` otherwise."""
    size = len(heads)
    if size == 0 or heads[0] != 0:
        raise CorpusError("heads must start with the root entry 0")
    for t in range(1, size):
        h = heads[t]
        if not 0 <= h < size:
            raise CorpusError(f"head index {h} of token {t} out of range 0..{size - 1}")
        if h == t:
            raise CorpusError(f"token {t} is its own head")
    for t in range(1, size):
        seen = set()
        cur = t
        while cur != 0:
            if cur in seen:
                raise CorpusError(f"cycle in dependency tree through token {t}")
            seen.add(cur)
            cur = heads[cur]


@dataclass(frozen=True)
class Sentence:
    tokens: tuple
    heads: tuple = None
    labels: tuple = None

    def __post_init__(self):
        if len(self.tokens) < 2:
            raise CorpusError("a sentence needs at least one token besides the root")
        if self.heads is not None:
            if len(self.heads) != len(self.tokens):
                raise CorpusError("heads length must equal tokens length")
            validate_tree(self.heads)
        if self.labels is not None and len(self.labels) != self.n:
            raise CorpusError(f"labels length {len(self.labels)} != number of words {self.n}")

    @property
    def n(self):
        return len(self.tokens) - 1

    @property
    def words(self):
        return list(self.tokens[1:])

    @classmethod
    def from_words(cls, words, heads=None, labels=None):
        if not words:
            raise CorpusError("empty token list")
        words = [str(w) for w in words]
        if heads is not None:
            if len(heads) != len(words):
                raise CorpusError(f"{len(heads)} heads for {len(words)} tokens")
            heads = (0, *(int(h) for h in heads))
        if labels is not None:
            labels = tuple(LabelCodec.encode(lab) for lab in labels)
        return cls((ROOT, *words), heads, labels)

    def keep_indices(self, labels=None):
        """1-based word positions labelled KEEP."""
        labels = self.labels if labels is None else labels
        return {t for t, lab in enumerate(labels, 1) if lab == KEEP}

    def compress(self, labels=None):
        """Words labelled KEEP, in order; EOS and DELETE both drop the word."""
        labels = self.labels if labels is None else labels
        return [w for w, lab in zip(self.tokens[1:], labels) if lab == KEEP]

    def to_record(self):
        rec = {"tokens": self.words}
        if self.heads is not None:
            rec["heads"] = list(self.heads[1:])
        if self.labels is not None:
            rec["labels"] = [LABEL_NAMES[lab] for lab in self.labels]
        return rec


def sentence_from_record(rec, where="record"):
    if not isinstance(rec, dict) or "tokens" not in rec:
        raise CorpusError(f"{where}: missing 'tokens'")
    try:
        return Sentence.from_words(rec["tokens"], rec.get("heads"), rec.get("labels"))
    except CorpusError as exc:
        raise CorpusError(f"{where}: {exc}") from None


def load_corpus(path, format="jsonl"):
    """Load sentences from ``path``; ``format`` is ``"jsonl"`` or ``"google"``."""
    if format == "google":
        sentences, _ = convert_google_records(iter_json_objects(path))
        return sentences
    if format != "jsonl":
        raise ValueError(f"unknown corpus format {format!r}")
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            out.append(sentence_from_record(rec, f"{path}:{lineno}"))
    return out


def save_corpus(sentences, path):
    with open(path, "w", encoding="utf-8") as fh:
        for s in sentences:
            fh.write(json.dumps(s.to_record(), ensure_ascii=False) + "\n")


# -- public dataset conversion ---------------------------------------------


def iter_json_objects(path):
    """Yield JSON values from a file holding a list, JSON lines, or concatenated objects."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    stripped = text.lstrip()
    if stripped.startswith("["):
        yield from json.loads(text)
        return
    dec = json.JSONDecoder()
    pos = 0
    while True:
        while pos < len(text) and text[pos].isspace():
            pos += 1
        if pos >= len(text):
            return
        try:
            obj, pos = dec.raw_decode(text, pos)
        except json.JSONDecodeError as exc:
            yield CorpusError(f"offset {pos}: {exc.msg}")
            nxt = text.find("\n{", pos + 1)
            if nxt < 0:
                return
            pos = nxt + 1
            continue
        yield obj


def google_record_to_sentence(rec):
    """Convert one record of the public sentence-compression dataset.

    Returns ``(sentence, has_tree)``. Word ids in the dataset are 0-based with
    -1 for the root; kept words are the children of compression edges, and
    words inside a kept multi-word node are kept with it.
    """
    graph = rec["graph"]
    words = {}
    node_of = {}
    for node in graph["node"]:
        ids = []
        for w in node["word"]:
            if w["id"] >= 0:
                words[w["id"]] = w["form"]
                ids.append(w["id"])
        for wid in ids:
            node_of[wid] = ids
    if not words:
        raise CorpusError("record has no words")
    order = sorted(words)
    if order != list(range(len(order))):
        raise CorpusError("word ids are not contiguous")
    tokens = [words[i] for i in order]

    heads = {}
    for e in graph.get("edge", []):
        heads[e["child_id"]] = e["parent_id"]
    for wid, group in node_of.items():
        if wid not in heads:
            anchors = [g for g in group if g in heads]
            if anchors:
                heads[wid] = anchors[0]
    has_tree = all(i in heads for i in order)
    head_list = [heads[i] + 1 for i in order] if has_tree else None

    kept = set()
    for e in rec.get("compression", {}).get("edge", []):
        kept.update(node_of.get(e["child_id"], [e["child_id"]]))
    labels = ["KEEP" if i in kept else "DELETE" for i in order]
    try:
        sent = Sentence.from_words(tokens, head_list, labels)
    except CorpusError:
        if head_list is None:
            raise
        sent = Sentence.from_words(tokens, None, labels)
        has_tree = False
    return sent, has_tree


def convert_google_records(records):
    """Returns ``(sentences, stats)``; unparseable records are skipped and counted."""
    out = []
    stats = {"sentences": 0, "skipped": 0, "without_tree": 0}
    for k, rec in enumerate(records):
        if isinstance(rec, Exception):
            log.warning("record %d unparseable: %s", k, rec)
            stats["skipped"] += 1
            continue
        try:
            sent, has_tree = google_record_to_sentence(rec)
        except (KeyError, TypeError, CorpusError) as exc:
            log.warning("record %d skipped: %r", k, exc)
            stats["skipped"] += 1
            continue
        if not has_tree:
            stats["without_tree"] += 1
        out.append(sent)
        stats["sentences"] += 1
    return out, stats


# -- features ----------------------------------------------------------------


def _seed_from(*parts):
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little")


class StaticTable:
    """Single-layer word vectors. Tokens not in the table resolve to ``None`` (UNK)."""

    def __init__(self, vectors, dim, identity):
        self.vectors = vectors
        self.dim = dim
        self.identity = identity

    def lookup(self, token):
        return self.vectors.get(token)

    @classmethod
    def from_text(cls, path):
        """Whitespace-separated ``word v1 ... vD`` lines (GloVe text format)."""
        vectors = {}
        dim = None
        digest = hashlib.sha256()
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.rstrip("\n").split(" ")
                if len(parts) < 2:
                    continue
                vec = np.asarray(parts[1:], dtype=np.float64)
                if dim is None:
                    dim = vec.shape[0]
                elif vec.shape[0] != dim:
                    raise CorpusError(f"{path}:{lineno}: expected {dim} values")
                vectors[parts[0]] = vec
                digest.update(parts[0].encode("utf-8") + b"\n")
        if dim is None:
            raise CorpusError(f"{path}: no vectors")
        return cls(vectors, dim, "table:" + digest.hexdigest()[:16])


class SyntheticStaticTable(StaticTable):
    """Deterministic pseudo-random vector per token type; never returns UNK."""

    def __init__(self, dim, seed=0, scale=1.0):
        super().__init__({}, dim, f"synthetic-static:{dim}:{seed}")
        self.seed = seed
        self.scale = scale

    def lookup(self, token):
        vec = self.vectors.get(token)
        if vec is None:
            rng = np.random.default_rng(_seed_from("static", self.seed, token))
            vec = self.vectors[token] = rng.normal(0.0, self.scale, self.dim)
        return vec


class SyntheticContextual:
    """Random multi-layer features per sentence, keyed by the sentence's tokens."""

    def __init__(self, name, layers, dim, seed=0, scale=1.0):
        self.name = name
        self.layers = layers
        self.dim = dim
        self.seed = seed
        self.scale = scale
        self.identity = f"synthetic-contextual:{name}:{layers}x{dim}:{seed}"

    def get(self, index, sentence):
        rng = np.random.default_rng(_seed_from("ctx", self.name, self.seed, *sentence.tokens))
        return rng.normal(0.0, self.scale, (self.layers, sentence.n + 1, self.dim))


class FeatureContainer:
    """Contextual features stored on disk.

    ``<prefix>.bin`` holds little-endian float32 arrays back to back, one
    ``(layers, n + 1, dim)`` block per sentence; ``<prefix>.json`` is the
    manifest ``{"name", "layers", "dim", "dtype", "entries": [{"offset",
    "positions"}]}`` with offsets in elements.
    """

    def __init__(self, manifest_path):
        with open(manifest_path, encoding="utf-8") as fh:
            meta = json.load(fh)
        self.manifest_path = manifest_path
        self.name = meta["name"]
        self.layers = int(meta["layers"])
        self.dim = int(meta["dim"])
        self.entries = meta["entries"]
        if meta.get("dtype", "<f4") != "<f4":
            raise CorpusError(f"unsupported dtype {meta.get('dtype')!r}")
        bin_path = os.path.splitext(manifest_path)[0] + ".bin"
        self._data = np.memmap(bin_path, dtype="<f4", mode="r")
        self.identity = f"container:{self.name}:{self.layers}x{self.dim}"

    def __len__(self):
        return len(self.entries)

    def get(self, index, sentence=None):
        if not 0 <= index < len(self.entries):
            raise CorpusError(f"no features for sentence {index} in {self.manifest_path}")
        e = self.entries[index]
        size = self.layers * e["positions"] * self.dim
        block = np.asarray(self._data[e["offset"] : e["offset"] + size], dtype=np.float64)
        block = block.reshape(self.layers, e["positions"], self.dim)
        if sentence is not None and e["positions"] != sentence.n + 1:
            raise CorpusError(
                f"feature block {index} has {e['positions']} positions, "
                f"sentence has {sentence.n + 1}"
            )
        return block


def write_feature_container(prefix, name, arrays):
    """Write ``arrays`` (each ``(layers, n + 1, dim)``) as ``prefix.bin`` + ``prefix.json``."""
    arrays = [np.asarray(a) for a in arrays]
    if not arrays:
        raise CorpusError("no feature arrays to write")
    layers, _, dim = arrays[0].shape
    entries = []
    offset = 0
    with open(prefix + ".bin", "wb") as fh:
        for a in arrays:
            if a.ndim != 3 or a.shape[0] != layers or a.shape[2] != dim:
                raise CorpusError(f"inconsistent feature block shape {a.shape}")
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
            entries.append({"offset": offset, "positions": int(a.shape[1])})
            offset += a.size
    manifest = {"name": name, "layers": int(layers), "dim": int(dim), "dtype": "<f4",
                "entries": entries}
    with open(prefix + ".json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh)
    return prefix + ".json"


@dataclass
class FeatureSet:
    """Static table (optional) plus any number of contextual sources."""

    static: StaticTable = None
    contextual: tuple = ()

    @property
    def static_dim(self):
        return 0 if self.static is None else self.static.dim

    def signature(self):
        """Feature layout the model is built for: static dim and (name, layers, dim) per source."""
        return {
            "static_dim": self.static_dim,
            "contextual": [[c.name, c.layers, c.dim] for c in self.contextual],
        }

    def identity(self):
        parts = [self.static.identity if self.static else "none"]
        parts += [c.identity for c in self.contextual]
        return hashlib.sha256("|".join(parts).encode("utf-8")).hexdigest()[:16]

    def for_sentence(self, index, sentence):
        """``(static_vectors, contextual_blocks)``; UNK tokens give ``None`` static vectors."""
        static = None
        if self.static is not None:
            static = [self.static.lookup(tok) for tok in sentence.tokens]
        ctx = []
        for src in self.contextual:
            block = src.get(index, sentence)
            if block.shape[1] != sentence.n + 1 or block.shape[0] != src.layers:
                raise CorpusError(
                    f"features of source {src.name!r} for sentence {index} have shape "
                    f"{block.shape}, expected ({src.layers}, {sentence.n + 1}, {src.dim})"
                )
            ctx.append(block)
        return static, ctx


def merge_subword_vectors(subword_vectors, alignment):
    """Average sub-word vectors into one vector per token.

    ``alignment[i]`` lists the sub-word positions of token ``i``; the groups
    must be non-empty, contiguous, and together cover every position once,
    in order.
    """
    subword_vectors = np.asarray(subword_vectors, dtype=np.float64)
    expected = 0
    out = []
    for i, group in enumerate(alignment):
        group = list(group)
        if not group:
            raise CorpusError(f"token {i} has no sub-word vectors")
        if group != list(range(expected, expected + len(group))):
            raise CorpusError(f"sub-word group {i} is not contiguous at position {expected}")
        expected += len(group)
        out.append(subword_vectors[group].mean(axis=0))
    if expected != subword_vectors.shape[0]:
        raise CorpusError(
            f"alignment covers {expected} sub-words, input has {subword_vectors.shape[0]}"
        )
    return np.stack(out)


# -- batching ----------------------------------------------------------------


def batch_iterator(corpus, batch_size, seed, epoch):
    """Yield lists of ``(index, sentence)``; the order is a function of ``(seed, epoch)`` only."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = np.random.default_rng([int(seed), int(epoch)])
    order = rng.permutation(len(corpus))
    for start in range(0, len(order), batch_size):
        yield [(int(i), corpus[int(i)]) for i in order[start : start + batch_size]]


def vocabulary(corpus):
    """Sorted word types of a corpus (root symbol excluded)."""
    return sorted({w for s in corpus for w in s.tokens[1:]})


# -- synthetic data ----------------------------------------------------------


def synthetic_parenthetical_corpus(num_sentences, seed=0, min_words=4, max_words=9,
                                   paren_prob=0.7, vocab_size=40):
    """Rule-based toy corpus: words inside parentheses, and the parentheses, are deleted.

    Trees are regular: each main word attaches to the next main word, the last
    main word attaches to the root, ``(`` attaches to the word before it, and
    the bracketed words and ``)`` attach to ``(``.
    """
    rng = np.random.default_rng(seed)
    lexicon = [f"w{k}" for k in range(vocab_size)]
    out = []
    for _ in range(num_sentences):
        main = [lexicon[k] for k in rng.integers(0, vocab_size, rng.integers(min_words, max_words + 1))]
        tokens = list(main)
        is_main = [True] * len(main)
        if rng.random() < paren_prob:
            at = int(rng.integers(1, len(main) + 1))
            inner = [lexicon[k] for k in rng.integers(0, vocab_size, rng.integers(1, 4))]
            tokens = main[:at] + ["("] + inner + [")"] + main[at:]
            is_main = [True] * at + [False] * (len(inner) + 2) + [True] * (len(main) - at)
        main_pos = [i + 1 for i, m in enumerate(is_main) if m]
        heads = [0] * len(tokens)
        for a, b in zip(main_pos, main_pos[1:]):
            heads[a - 1] = b
        heads[main_pos[-1] - 1] = 0
        open_pos = None
        for i, tok in enumerate(tokens, 1):
            if not is_main[i - 1]:
                if tok == "(" and open_pos is None:
                    open_pos = i
                    heads[i - 1] = i - 1
                else:
                    heads[i - 1] = open_pos
        labels = ["KEEP" if m else "DELETE" for m in is_main]
        out.append(Sentence.from_words(tokens, heads, labels))
    return out
