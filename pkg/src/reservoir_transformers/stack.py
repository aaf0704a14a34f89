"""Reservoir placement, model assembly and parameter census."""

import re
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .errors import ConfigError
from .layers import LAYER_KINDS, NEG_INF, default_init, make_layer, orthogonal_init
from .tasks import BOS, EOS, PAD

STRATEGIES = ("alternating_middle", "bottom", "middle", "top")

# spawn-key groups for per-component seeds
_EMBED, _ENCODER, _DECODER = 0, 1, 2


@dataclass(frozen=True)
class Slot:
    kind: str = "transformer"
    frozen: bool = False

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"kind: unknown layer kind {self.kind!r}")


@dataclass(frozen=True)
class StackPattern:
    """Ordered layer plan, bottom (input side) first.

    Printed with ``L`` for a trainable slot and ``R`` for a frozen one, so
    ``str(place_reservoirs(7, 2))`` is ``"LLRLRLL"``.
    """

    slots: tuple

    def __post_init__(self):
        object.__setattr__(self, "slots", tuple(self.slots))
        if not self.slots:
            raise ConfigError("pattern: a stack needs at least one layer")
        if all(s.frozen for s in self.slots):
            raise ConfigError(f"pattern: {self} has no trainable readout layer")

    @classmethod
    def parse(cls, text, kind="ffn_reservoir"):
        """Read a ``"LLRLRLL"`` string; ``R`` slots become frozen ``kind`` layers."""
        if not re.fullmatch(r"[LR]+", text or ""):
            raise ConfigError(f"pattern: expected a string over 'L'/'R', got {text!r}")
        return cls(tuple(Slot(kind, True) if c == "R" else Slot("transformer", False) for c in text))

    def __str__(self):
        return "".join("R" if s.frozen else "L" for s in self.slots)

    def __len__(self):
        return len(self.slots)

    @property
    def n_frozen(self):
        return sum(s.frozen for s in self.slots)

    def unfrozen(self):
        """Same kinds, every slot trainable."""
        return StackPattern(tuple(Slot(s.kind, False) for s in self.slots))


def place_reservoirs(n_total, n_reservoir, strategy="alternating_middle", kind="ffn_reservoir"):
    """Choose which of ``n_total`` layers become reservoirs.

    ``alternating_middle`` centres the block ``R(LR)^(k-1)`` (left bias on
    ties). ``bottom``, ``middle`` and ``top`` place a contiguous run.
    """
    if strategy not in STRATEGIES:
        raise ConfigError(f"strategy: expected one of {STRATEGIES}, got {strategy!r}")
    if n_total < 1:
        raise ConfigError(f"n_total: must be >= 1, got {n_total}")
    if not 0 <= n_reservoir < n_total:
        raise ConfigError(
            f"n_reservoir: need 0 <= n_reservoir < n_total (a readout layer must remain), "
            f"got {n_reservoir} of {n_total}"
        )
    marks = ["L"] * n_total
    k = n_reservoir
    if k and strategy == "alternating_middle":
        block = "R" + "LR" * (k - 1)
        if len(block) > n_total:
            raise ConfigError(
                f"n_reservoir: {k} non-adjacent reservoirs need at least {len(block)} layers, got {n_total}"
            )
        start = (n_total - len(block)) // 2
        marks[start : start + len(block)] = block
    elif k:
        start = {"bottom": 0, "top": n_total - k, "middle": (n_total - k) // 2}[strategy]
        marks[start : start + k] = "R" * k
    return StackPattern.parse("".join(marks), kind=kind)


def _as_pattern(value, kind):
    if isinstance(value, StackPattern):
        return value
    if isinstance(value, str):
        return StackPattern.parse(value, kind)
    if isinstance(value, int):
        return StackPattern.parse("L" * value, kind)
    raise ConfigError(f"pattern: cannot interpret {value!r}")


@dataclass
class ModelSpec:
    """Everything needed to rebuild a model bit-for-bit.

    ``mode="seq2seq"`` builds an encoder from ``encoder_pattern`` and a
    decoder of ``decoder_pattern`` cross-attention layers. ``mode="lm"``
    builds a decoder-only stack from ``decoder_pattern``.
    """

    d_model: int = 64
    heads: int = 4
    d_ff: int = None
    src_vocab: int = 35
    tgt_vocab: int = 35
    encoder_pattern: object = "LLLLLL"
    decoder_pattern: object = "LL"
    mode: str = "seq2seq"
    seed: int = 0
    max_len: int = 256
    reservoir_kind: str = "ffn_reservoir"
    kernel_width: int = 3
    gru_width_mult: int = 1
    dtype: str = "float64"

    def __post_init__(self):
        if self.d_ff is None:
            self.d_ff = 4 * self.d_model
        if self.mode not in ("seq2seq", "lm"):
            raise ConfigError(f"mode: expected 'seq2seq' or 'lm', got {self.mode!r}")
        for name in ("d_model", "heads", "d_ff", "src_vocab", "tgt_vocab", "max_len"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name}: must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.heads:
            raise ConfigError(f"heads: d_model={self.d_model} is not divisible by heads={self.heads}")
        self.encoder_pattern = _as_pattern(self.encoder_pattern, self.reservoir_kind)
        self.decoder_pattern = _as_pattern(self.decoder_pattern, self.reservoir_kind)
        if self.mode == "seq2seq" and self.decoder_pattern.n_frozen:
            raise ConfigError("decoder_pattern: seq2seq reservoirs belong in the encoder only")

    def with_patterns(self, **kw):
        return replace(self, **kw)


def _component_rng(seed, group, index):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(group, index)))


def build_layer(spec, stack, index):
    """Rebuild one stack layer from ``(spec, stack, index)`` alone."""
    if stack == "encoder":
        slot, group = spec.encoder_pattern.slots[index], _ENCODER
        kind = slot.kind
    elif stack == "decoder":
        slot, group = spec.decoder_pattern.slots[index], _DECODER
        kind = "decoder" if spec.mode == "seq2seq" else slot.kind
    else:
        raise ConfigError(f"stack: expected 'encoder' or 'decoder', got {stack!r}")
    layer = make_layer(
        kind, spec.d_model, spec.heads, spec.d_ff, _component_rng(spec.seed, group, index),
        frozen=slot.frozen, kernel_width=spec.kernel_width, gru_width_mult=spec.gru_width_mult,
    )
    layer.params.astype(np.dtype(spec.dtype))
    return layer


def sinusoidal_positions(max_len, d):
    pos = np.arange(max_len)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _key_pad_mask(pad, dtype):
    # [B, 1, Tk] additive
    return np.where(pad[:, None, :], NEG_INF, 0.0).astype(dtype)


def _causal_mask(t, dtype):
    return np.triu(np.full((t, t), NEG_INF), k=1).astype(dtype)


class _Model:
    spec: ModelSpec

    def _init_common(self, spec):
        self.spec = spec
        self.dtype = np.dtype(spec.dtype)
        self.positions = sinusoidal_positions(spec.max_len, spec.d_model).astype(self.dtype)
        self._extra = {}

    def _param(self, name, tensor):
        tensor.data = np.ascontiguousarray(tensor.data, dtype=self.dtype)
        tensor.requires_grad = True
        tensor.name = name
        self._extra[name] = tensor
        return tensor

    def layers(self):
        return [("encoder", i, l) for i, l in enumerate(getattr(self, "encoder", []))] + [
            ("decoder", i, l) for i, l in enumerate(self.decoder)
        ]

    def named_parameters(self):
        out = dict(self._extra)
        for stack, i, layer in self.layers():
            for name, t in layer.named_parameters().items():
                out[f"{stack}.{i}.{name}"] = t
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def _embed(self, table, ids):
        t = ids.shape[1]
        if t > self.spec.max_len:
            raise ConfigError(f"max_len: sequence of length {t} exceeds {self.spec.max_len}")
        x = ad.scale(ad.embedding_lookup(table, ids), np.sqrt(self.spec.d_model))
        return ad.add(x, self.positions[:t])

    @staticmethod
    def _run(layers, x, skip, **kw):
        for j, layer in enumerate(layers):
            if skip is not None and skip[j]:
                continue
            x = layer(x, **kw)
        return x


class Seq2SeqModel(_Model):
    """Pre-LN encoder-decoder transformer with reservoir slots in the encoder."""

    def __init__(self, spec):
        self._init_common(spec)
        d = spec.d_model
        rng = _component_rng(spec.seed, _EMBED, 0)
        self.src_embed = self._param("src_embed", default_init("embedding", (spec.src_vocab, d), rng))
        self.tgt_embed = self._param("tgt_embed", default_init("embedding", (spec.tgt_vocab, d), rng))
        self.enc_ln_g = self._param("enc_ln_g", default_init("ln_gamma", (d,)))
        self.enc_ln_b = self._param("enc_ln_b", default_init("ln_beta", (d,)))
        self.dec_ln_g = self._param("dec_ln_g", default_init("ln_gamma", (d,)))
        self.dec_ln_b = self._param("dec_ln_b", default_init("ln_beta", (d,)))
        self.out_w = self._param("out_w", default_init("xavier", (d, spec.tgt_vocab), rng))
        self.out_b = self._param("out_b", default_init("bias", (spec.tgt_vocab,)))
        self.encoder = [build_layer(spec, "encoder", i) for i in range(len(spec.encoder_pattern))]
        self.decoder = [build_layer(spec, "decoder", i) for i in range(len(spec.decoder_pattern))]

    @property
    def droppable(self):
        return self.encoder

    # -- forward pieces ---------------------------------------------------------
    def embed_source(self, batch):
        return self._embed(self.src_embed, batch.src)

    def encoder_masks(self, batch):
        return {"attn_mask": _key_pad_mask(batch.src_pad, self.dtype), "pad_mask": batch.src_pad}

    def encode(self, batch, skip=None):
        x = self._run(self.encoder, self.embed_source(batch), skip, **self.encoder_masks(batch))
        return ad.layer_norm(x, self.enc_ln_g, self.enc_ln_b)

    def decode(self, memory, batch, tgt_in=None, tgt_pad=None):
        tgt_in = batch.tgt_in if tgt_in is None else tgt_in
        tgt_pad = batch.tgt_pad if tgt_pad is None else tgt_pad
        t = tgt_in.shape[1]
        self_mask = _causal_mask(t, self.dtype)[None] + _key_pad_mask(tgt_pad, self.dtype)
        mem_mask = _key_pad_mask(batch.src_pad, self.dtype)
        y = self._embed(self.tgt_embed, tgt_in)
        for layer in self.decoder:
            y = layer(y, attn_mask=self_mask, memory=memory, memory_mask=mem_mask)
        y = ad.layer_norm(y, self.dec_ln_g, self.dec_ln_b)
        return ad.linear(y, self.out_w, self.out_b)

    def loss(self, batch, skip=None):
        logits = self.decode(self.encode(batch, skip), batch)
        return ad.cross_entropy(logits, batch.tgt_out, ~batch.tgt_pad)

    def logits(self, batch):
        return self.decode(self.encode(batch), batch)

    def nll_sum(self, batch):
        """Summed target-token NLL (nats) and token count, without building a graph."""
        with ad.no_grad():
            logits = self.decode(self.encode(batch), batch)
            total = ad.cross_entropy(logits, batch.tgt_out, ~batch.tgt_pad, reduction="sum")
        return float(total.item()), int((~batch.tgt_pad).sum())

    def greedy_decode(self, batch, max_len=None):
        """Argmax decoding; returns token lists (model ids, EOS stripped)."""
        b = batch.src.shape[0]
        max_len = max_len or batch.src.shape[1] + 2
        with ad.no_grad():
            memory = self.encode(batch)
            out = np.full((b, 1), BOS, dtype=np.int64)
            done = np.zeros(b, dtype=bool)
            for _ in range(max_len):
                logits = self.decode(memory, batch, out, np.zeros(out.shape, dtype=bool))
                nxt = logits.data[:, -1].argmax(-1)
                nxt = np.where(done, PAD, nxt)
                out = np.concatenate([out, nxt[:, None]], axis=1)
                done |= nxt == EOS
                if done.all():
                    break
        result = []
        for row in out[:, 1:]:
            toks = []
            for tok in row:
                if tok in (EOS, PAD):
                    break
                toks.append(int(tok))
            result.append(toks)
        return result

    # -- backskipping hooks -----------------------------------------------------------
    def backskip_triplet(self):
        return _find_triplet(self.encoder)

    def forward_to(self, batch, i):
        """Embedding plus encoder layers ``0..i``; returns (activation, context)."""
        kw = self.encoder_masks(batch)
        x = self._run(self.encoder[: i + 1], self.embed_source(batch), None, **kw)
        return x, {"kw": kw, "keep": (~batch.src_pad).astype(self.dtype)[..., None]}

    def loss_from(self, h, i, batch, ctx):
        x = self._run(self.encoder[i + 1 :], h, None, **ctx["kw"])
        memory = ad.layer_norm(x, self.enc_ln_g, self.enc_ln_b)
        return ad.cross_entropy(self.decode(memory, batch), batch.tgt_out, ~batch.tgt_pad)

    def backskip_layer(self, j):
        return self.encoder[j]


class LanguageModel(_Model):
    """Decoder-only causal stack; reservoir slots are allowed anywhere but the top."""

    def __init__(self, spec):
        self._init_common(spec)
        d = spec.d_model
        rng = _component_rng(spec.seed, _EMBED, 0)
        self.embed = self._param("embed", default_init("embedding", (spec.tgt_vocab, d), rng))
        self.ln_g = self._param("ln_g", default_init("ln_gamma", (d,)))
        self.ln_b = self._param("ln_b", default_init("ln_beta", (d,)))
        self.out_w = self._param("out_w", default_init("xavier", (d, spec.tgt_vocab), rng))
        self.out_b = self._param("out_b", default_init("bias", (spec.tgt_vocab,)))
        self.decoder = [build_layer(spec, "decoder", i) for i in range(len(spec.decoder_pattern))]
        if any(l.kind in ("bigru_reservoir", "conv_reservoir") for l in self.decoder):
            raise ConfigError("decoder_pattern: BiGRU and symmetric-conv layers see future tokens; not usable in an LM")

    @property
    def droppable(self):
        return self.decoder

    def _masks(self, inputs):
        t = inputs.shape[1]
        return {"attn_mask": _causal_mask(t, self.dtype)[None], "pad_mask": None}

    def hidden(self, inputs, skip=None):
        x = self._run(self.decoder, self._embed(self.embed, inputs), skip, **self._masks(inputs))
        return ad.linear(ad.layer_norm(x, self.ln_g, self.ln_b), self.out_w, self.out_b)

    def loss(self, batch, skip=None):
        return ad.cross_entropy(self.hidden(batch.inputs, skip), batch.targets)

    def next_char_log_probs(self, stream, context=None, bos=None):
        """Natural-log next-symbol distributions, one row per position of ``stream``.

        The stream is cut into windows of ``context`` symbols; each window is
        fed with its preceding symbol (or ``bos``) prepended.
        """
        stream = np.asarray(stream, dtype=np.int64)
        context = context or self.spec.max_len
        bos = BOS if bos is None else bos
        rows = []
        with ad.no_grad():
            for start in range(0, len(stream), context):
                chunk = stream[start : start + context]
                prev = stream[start - 1] if start else bos
                inp = np.concatenate([[prev], chunk[:-1]])[None]
                rows.append(ad.log_softmax(self.hidden(inp)).data[0])
        return np.concatenate(rows) if rows else np.zeros((0, self.spec.tgt_vocab))

    def backskip_triplet(self):
        return _find_triplet(self.decoder)

    def forward_to(self, batch, i):
        kw = self._masks(batch.inputs)
        return self._run(self.decoder[: i + 1], self._embed(self.embed, batch.inputs), None, **kw), {"kw": kw}

    def loss_from(self, h, i, batch, ctx):
        x = self._run(self.decoder[i + 1 :], h, None, **ctx["kw"])
        logits = ad.linear(ad.layer_norm(x, self.ln_g, self.ln_b), self.out_w, self.out_b)
        return ad.cross_entropy(logits, batch.targets)

    def backskip_layer(self, j):
        return self.decoder[j]


def _find_triplet(layers):
    for j in range(1, len(layers) - 1):
        if layers[j].frozen and not layers[j - 1].frozen and not layers[j + 1].frozen:
            return j - 1, j, j + 1
    raise ConfigError("model: backskipping needs a frozen layer with trainable layers directly below and above")


def build_model(spec):
    """Initialise a model from its spec; deterministic in ``spec.seed``."""
    return Seq2SeqModel(spec) if spec.mode == "seq2seq" else LanguageModel(spec)


# -- a tiny dense stack for backskipping experiments ----------------------------------


@dataclass
class DenseLayer:
    w: ad.Tensor
    b: ad.Tensor
    activation: str = "tanh"
    kind: str = field(default="dense", init=False)

    @property
    def frozen(self):
        return self.w.frozen

    def parameters(self):
        return [self.w, self.b]

    def named_parameters(self):
        return {"w": self.w, "b": self.b}

    def num_parameters(self):
        return self.w.size + self.b.size

    def __call__(self, x):
        y = ad.linear(x, self.w, self.b)
        return ad.tanh(y) if self.activation == "tanh" else y


class ToyRegressor:
    """``x -> tanh(W0 x) -> tanh(W1 .) [frozen] -> W2 .`` with squared loss.

    The hidden reservoir is orthogonally initialised with a gain so it
    stays in tanh's responsive range.
    """

    def __init__(self, d_in=8, hidden=32, d_out=1, seed=0, frozen_middle=True, gain=1.5):
        rngs = [_component_rng(seed, _ENCODER, i) for i in range(3)]
        shapes = [(d_in, hidden), (hidden, hidden), (hidden, d_out)]
        self.layers = []
        for i, ((a, b), rng) in enumerate(zip(shapes, rngs)):
            w = orthogonal_init(a, b, rng, gain=gain if i < 2 else 1.0)
            layer = DenseLayer(ad.parameter(w.data, name=f"{i}.w"),
                               ad.parameter(np.zeros(b), name=f"{i}.b"),
                               "tanh" if i < 2 else "linear")
            self.layers.append(layer)
        if frozen_middle:
            for t in self.layers[1].parameters():
                t.frozen = True

    def parameters(self):
        return [t for layer in self.layers for t in layer.parameters()]

    def named_parameters(self):
        return {f"{i}.{k}": t for i, l in enumerate(self.layers) for k, t in l.named_parameters().items()}

    def predict(self, x):
        h = ad.Tensor(np.asarray(x))
        for layer in self.layers:
            h = layer(h)
        return h

    def loss(self, batch, skip=None):
        x, y = batch
        return ad.mean(ad.square(ad.sub(self.predict(x), y)))

    def backskip_triplet(self):
        return _find_triplet(self.layers)

    def forward_to(self, batch, i):
        h = ad.Tensor(np.asarray(batch[0]))
        for layer in self.layers[: i + 1]:
            h = layer(h)
        return h, {}

    def loss_from(self, h, i, batch, ctx):
        for layer in self.layers[i + 1 :]:
            h = layer(h)
        return ad.mean(ad.square(ad.sub(h, batch[1])))

    def backskip_layer(self, j):
        return self.layers[j]


# -- census -----------------------------------------------------------------------------


def param_census(model):
    """Trainable and total parameter counts, with a per-layer breakdown."""
    per_layer = []
    for stack, i, layer in model.layers():
        per_layer.append({"stack": stack, "index": i, "kind": layer.kind,
                          "frozen": layer.frozen, "params": layer.num_parameters()})
    other = int(sum(t.size for t in model._extra.values()))
    frozen_other = int(sum(t.size for t in model._extra.values() if t.frozen))
    total = other + sum(row["params"] for row in per_layer)
    frozen = frozen_other + sum(row["params"] for row in per_layer if row["frozen"])
    return {"trainable": total - frozen, "total": total, "other": other, "per_layer": per_layer}
