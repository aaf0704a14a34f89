"""Desk-scale datasets and metrics.

Synthetic copy / reverse / sort translation tasks, a character-level LM
corpus, corpus BLEU, bits per character and padded batching.

Dataset tokens are raw symbols in ``[0, V)``. Models see them shifted by
:data:`OFFSET` so that ids 0..2 are free for PAD, BOS and EOS.
"""

import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError

PAD, BOS, EOS = 0, 1, 2
OFFSET = 3
TASKS = ("copy", "reverse", "sort")


def model_vocab_size(v):
    """Model vocabulary for ``v`` raw symbols (adds PAD/BOS/EOS)."""
    return v + OFFSET


@dataclass(frozen=True)
class SyntheticSeq2SeqSpec:
    task: str = "copy"
    vocab_size: int = 32
    min_len: int = 5
    max_len: int = 20
    n_train: int = 4000
    n_val: int = 200
    n_test: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task: expected one of {TASKS}, got {self.task!r}")
        if self.vocab_size < 2:
            raise ConfigError(f"vocab_size: need at least 2 symbols, got {self.vocab_size}")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError(f"min_len/max_len: need 1 <= min_len <= max_len, got {self.min_len}, {self.max_len}")


def apply_task(task, source):
    source = list(source)
    if task == "copy":
        return source
    if task == "reverse":
        return source[::-1]
    if task == "sort":
        return sorted(source)
    raise ConfigError(f"task: unknown task {task!r}")


def generate_seq2seq(spec):
    """``{"train", "val", "test"}`` lists of ``(source, target)`` pairs.

    Each split draws from its own child of ``SeedSequence(spec.seed)``.
    """
    streams = np.random.SeedSequence(spec.seed).spawn(3)
    out = {}
    for name, size, ss in zip(("train", "val", "test"), (spec.n_train, spec.n_val, spec.n_test), streams):
        rng = np.random.default_rng(ss)
        pairs = []
        for _ in range(size):
            n = int(rng.integers(spec.min_len, spec.max_len + 1))
            src = rng.integers(0, spec.vocab_size, size=n).tolist()
            pairs.append((src, apply_task(spec.task, src)))
        out[name] = pairs
    return out


def dump_pairs(pairs, path):
    """One ``source<TAB>target`` line per pair, tokens space-separated."""
    lines = [" ".join(map(str, s)) + "\t" + " ".join(map(str, t)) for s, t in pairs]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_pairs(path):
    pairs = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            src, tgt = line.split("\t")
            pairs.append(([int(x) for x in src.split()], [int(x) for x in tgt.split()]))
        except ValueError as exc:
            raise ContractError(f"{path}:{lineno}: expected 'source<TAB>target' integer tokens") from exc
    return pairs


# -- batching ----------------------------------------------------------------------


@dataclass
class Seq2SeqBatch:
    """Padded batch in model ids. ``*_pad`` masks are True at padding."""

    src: np.ndarray
    src_pad: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    tgt_pad: np.ndarray
    references: list

    @property
    def n_tokens(self):
        return int((~self.tgt_pad).sum())

    def __len__(self):
        return self.src.shape[0]


def _pad(rows, pad_id):
    width = max(len(r) for r in rows)
    arr = np.full((len(rows), width), pad_id, dtype=np.int64)
    for i, r in enumerate(rows):
        arr[i, : len(r)] = r
    return arr


def make_batch(pairs, pad_id=PAD):
    src = _pad([[t + OFFSET for t in s] for s, _ in pairs], pad_id)
    tgt_in = _pad([[BOS] + [t + OFFSET for t in tg] for _, tg in pairs], pad_id)
    tgt_out = _pad([[t + OFFSET for t in tg] + [EOS] for _, tg in pairs], pad_id)
    lengths = np.array([len(tg) + 1 for _, tg in pairs])
    tgt_pad = np.arange(tgt_out.shape[1])[None, :] >= lengths[:, None]
    src_lengths = np.array([len(s) for s, _ in pairs])
    src_pad = np.arange(src.shape[1])[None, :] >= src_lengths[:, None]
    return Seq2SeqBatch(src, src_pad, tgt_in, tgt_out, tgt_pad, [list(tg) for _, tg in pairs])


def batcher(pairs, batch_size, pad_id=PAD, seed=None):
    """Split ``pairs`` into padded batches.

    With ``seed`` the order is a seeded permutation, otherwise it is the
    dataset order. Every example lands in exactly one batch.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size: must be >= 1, got {batch_size}")
    order = np.arange(len(pairs))
    if seed is not None:
        order = np.random.default_rng(seed).permutation(len(pairs))
    return [make_batch([pairs[i] for i in order[s : s + batch_size]], pad_id)
            for s in range(0, len(pairs), batch_size)]


def strip_offset(tokens):
    return [t - OFFSET for t in tokens]


# -- BLEU ----------------------------------------------------------------------------------


def _tokens(x):
    return x.split() if isinstance(x, str) else list(x)


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses, references, max_n=4):
    """Corpus BLEU in [0, 100].

    Clipped n-gram precisions for n = 1..max_n; orders n >= 2 use add-one
    smoothing ``(m + 1) / (c + 1)``. Brevity penalty ``exp(1 - r / c)`` when
    the hypothesis corpus is shorter than the reference corpus.
    """
    if len(hypotheses) != len(references):
        raise ContractError(f"bleu: {len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ContractError("bleu: empty corpus")
    matches = [0] * max_n
    counts = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = _tokens(hyp), _tokens(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            counts[n - 1] += max(len(hyp) - n + 1, 0)
    if hyp_len == 0 or matches[0] == 0:
        return 0.0
    log_p = math.log(matches[0] / counts[0])
    for n in range(1, max_n):
        log_p += math.log((matches[n] + 1) / (counts[n] + 1))
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p / max_n)


# -- character LM --------------------------------------------------------------------------


def bits_per_character(model, stream):
    """Mean ``-log2 p(char | context)`` over ``stream``.

    ``model.next_char_log_probs(stream)`` must return one row of natural-log
    probabilities per position.
    """
    stream = np.asarray(stream, dtype=np.int64)
    if stream.size == 0:
        raise ContractError("bits_per_character: empty stream")
    logp = np.asarray(model.next_char_log_probs(stream))
    if logp.shape[0] != stream.size:
        raise ContractError(f"bits_per_character: model returned {logp.shape[0]} rows for {stream.size} chars")
    bits = -logp[np.arange(stream.size), stream] / math.log(2.0)
    return math.fsum(bits) / stream.size  # exact when every position costs the same


class UniformCharModel:
    """Assigns probability ``1/V`` to every symbol."""

    def __init__(self, vocab_size):
        self.vocab_size = vocab_size

    def next_char_log_probs(self, stream):
        return np.full((len(stream), self.vocab_size), -math.log(self.vocab_size))


_WORDS = {
    "det": ["the", "a", "every", "no", "some", "this", "that"],
    "adj": ["quiet", "old", "bright", "small", "restless", "green", "heavy", "distant", "cold", "gentle"],
    "noun": ["river", "keeper", "lamp", "garden", "sailor", "clock", "mountain", "letter", "window",
             "orchard", "bridge", "child", "engine", "harbor", "winter"],
    "verb": ["watches", "carries", "forgets", "follows", "remembers", "crosses", "finds", "opens",
             "mends", "answers"],
    "prep": ["under", "beyond", "near", "behind", "across", "beside"],
    "adv": ["slowly", "again", "at dawn", "without a word", "before the rain", "every evening"],
}


def synthetic_text(n_chars, seed=0):
    """English-like prose from a small seeded grammar (no external corpus needed)."""
    rng = np.random.default_rng(seed)

    def pick(cat):
        words = _WORDS[cat]
        return words[int(rng.integers(len(words)))]

    def phrase():
        out = [pick("det")]
        if rng.random() < 0.6:
            out.append(pick("adj"))
        out.append(pick("noun"))
        return out

    parts, size = [], 0
    while size < n_chars:
        words = phrase() + [pick("verb")] + phrase()
        if rng.random() < 0.5:
            words += [pick("prep")] + phrase()
        if rng.random() < 0.4:
            words.append(pick("adv"))
        sentence = " ".join(words)
        sentence = sentence[0].upper() + sentence[1:] + ("." if rng.random() < 0.8 else "!")
        sentence += "\n" if rng.random() < 0.15 else " "
        parts.append(sentence)
        size += len(sentence)
    return "".join(parts)[:n_chars]


@dataclass
class CharLmCorpus:
    """A byte stream with a compact vocabulary and ordered split boundaries."""

    data: np.ndarray  # model ids
    byte_values: tuple  # id -> byte value, ids start at OFFSET
    splits: tuple  # (train_end, val_end)

    @classmethod
    def from_bytes(cls, raw, val_frac=0.05, test_frac=0.05):
        raw = bytes(raw)
        if not raw:
            raise ContractError("CharLmCorpus: empty text")
        present = sorted(set(raw))
        lut = np.zeros(256, dtype=np.int64)
        lut[present] = np.arange(len(present)) + OFFSET
        data = lut[np.frombuffer(raw, dtype=np.uint8)]
        n = len(data)
        train_end = int(n * (1.0 - val_frac - test_frac))
        val_end = int(n * (1.0 - test_frac))
        return cls(data, tuple(present), (train_end, val_end))

    @classmethod
    def from_text(cls, text, **kw):
        return cls.from_bytes(text.encode("utf-8"), **kw)

    @classmethod
    def from_file(cls, path, **kw):
        return cls.from_bytes(Path(path).read_bytes(), **kw)

    @classmethod
    def synthetic(cls, n_chars=1_000_000, seed=0, **kw):
        return cls.from_text(synthetic_text(n_chars, seed), **kw)

    @property
    def vocab_size(self):
        return len(self.byte_values) + OFFSET

    def split(self, name):
        a, b = self.splits
        return {"train": self.data[:a], "val": self.data[a:b], "test": self.data[b:]}[name]

    def decode(self, ids):
        return bytes(self.byte_values[i - OFFSET] for i in ids if i >= OFFSET).decode("utf-8", "replace")

    def batches(self, name, batch_size, context, rng=None):
        """Random ``(inputs, targets)`` windows from one split (one batch per call)."""
        stream = self.split(name)
        if len(stream) <= context + 1:
            raise ContractError(f"split {name!r} is shorter than the context window {context}")
        rng = rng if rng is not None else np.random.default_rng()
        starts = rng.integers(0, len(stream) - context - 1, size=batch_size)
        idx = starts[:, None] + np.arange(context + 1)[None, :]
        window = stream[idx]
        return LmBatch(window[:, :-1], window[:, 1:])


@dataclass
class LmBatch:
    inputs: np.ndarray
    targets: np.ndarray

    def __len__(self):
        return self.inputs.shape[0]


# -- toy regression for backskipping -------------------------------------------------------


def make_toy_regression(n, d_in=8, noise=0.3, seed=0, split="train"):
    """``y = sin(x . u) + 0.5 * (x . v)^2 / d_in + noise``; returns ``(x, y)`` arrays.

    The teacher (``u``, ``v``) depends on ``seed`` only; inputs and noise also
    depend on ``split``.
    """
    teacher = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(99,)))
    u = teacher.standard_normal(d_in) / np.sqrt(d_in)
    v = teacher.standard_normal(d_in)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(100 + ("train", "val", "test").index(split),)))
    x = rng.standard_normal((n, d_in))
    y = np.sin(x @ u) + 0.5 * (x @ v) ** 2 / d_in + noise * rng.standard_normal(n)
    return x, y[:, None]
