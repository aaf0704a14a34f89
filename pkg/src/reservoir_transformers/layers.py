"""Layer kinds used in reservoir stacks, plus their initialisers.

Every layer is a residual block over ``[B, T, d]`` inputs:

* ``transformer``: pre-LN self-attention block followed by a pre-LN FFN block.
* ``ffn_reservoir``: the FFN block alone, so it never mixes tokens.
* ``bigru_reservoir``: bidirectional GRU whose two state streams are merged
  back to width ``d``.
* ``conv_reservoir``: lightweight convolution, with softmax-normalised taps
  shared by all channels of a head, followed by a pointwise mix.
* ``decoder``: causal self-attention, cross-attention over encoder memory,
  then FFN (only used on the decoder side of seq2seq models).

Any kind can be trainable or frozen. When frozen it acts as a reservoir.
With all weights and biases set to zero, every kind is the identity map.
"""

from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ShapeError

LAYER_KINDS = ("transformer", "ffn_reservoir", "bigru_reservoir", "conv_reservoir")
NEG_INF = -1e9
LN_EPS = 1e-5


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def orthogonal_init(rows, cols, seed=None, gain=1.0):
    """Random (semi-)orthogonal matrix of shape ``(rows, cols)``.

    Columns are orthonormal when ``rows >= cols``, rows otherwise. The sign of
    each QR factor column is fixed by ``diag(R)`` so the draw is uniform.
    """
    if rows < 1 or cols < 1:
        raise ConfigError(f"orthogonal_init: rows and cols must be >= 1, got ({rows}, {cols})")
    rng = _rng(seed)
    flat = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(flat)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    # C order: BLAS rounding depends on layout, and frozen weights keep theirs forever
    return ad.Tensor(np.ascontiguousarray(gain * q))


def default_init(kind, shape, seed=None):
    """PyTorch-style defaults for everything that is not orthogonally initialised.

    ``kind`` is one of ``"xavier"``, ``"bias"``, ``"ln_gamma"``, ``"ln_beta"``,
    ``"embedding"`` (normal with std ``d ** -0.5``).
    """
    shape = tuple(shape)
    if kind == "xavier":
        fan_in, fan_out = shape[0], shape[-1]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return ad.Tensor(_rng(seed).uniform(-bound, bound, size=shape))
    if kind in ("bias", "ln_beta"):
        return ad.Tensor(np.zeros(shape))
    if kind == "ln_gamma":
        return ad.Tensor(np.ones(shape))
    if kind == "embedding":
        return ad.Tensor(_rng(seed).normal(0.0, shape[-1] ** -0.5, size=shape))
    raise ConfigError(f"default_init: unknown kind {kind!r}")


class _Params:
    """Mixin for dataclasses whose array fields are all :class:`Tensor` leaves."""

    def tensors(self):
        return {f.name: getattr(self, f.name) for f in fields(self) if f.metadata.get("param", True)
                and isinstance(getattr(self, f.name), ad.Tensor)}

    @property
    def frozen(self):
        return all(t.frozen for t in self.tensors().values())

    def set_frozen(self, frozen):
        for t in self.tensors().values():
            t.frozen = bool(frozen)
            t.grad = None

    def astype(self, dtype):
        for t in self.tensors().values():
            t.data = t.data.astype(dtype, order="C")
        return self

    def zero_(self):
        for t in self.tensors().values():
            t.data = np.zeros_like(t.data)
        return self

    def num_parameters(self):
        return int(sum(t.size for t in self.tensors().values()))


def _mark(params, frozen):
    for name, t in params.tensors().items():
        t.requires_grad = True
        t.frozen = bool(frozen)
        t.name = name
    return params


def _ortho(rng, rows, cols):
    return orthogonal_init(rows, cols, rng)


def _zeros(n):
    return default_init("bias", (n,))


def _ones(n):
    return default_init("ln_gamma", (n,))


# -- attention / FFN sub-blocks --------------------------------------------------


@dataclass
class AttentionParams(_Params):
    wq: ad.Tensor
    bq: ad.Tensor
    wk: ad.Tensor
    bk: ad.Tensor
    wv: ad.Tensor
    bv: ad.Tensor
    wo: ad.Tensor
    bo: ad.Tensor

    @classmethod
    def init(cls, d, rng):
        return cls(
            _ortho(rng, d, d), _zeros(d),
            _ortho(rng, d, d), _zeros(d),
            _ortho(rng, d, d), _zeros(d),
            _ortho(rng, d, d), _zeros(d),
        )


def _split_heads(x, heads):
    b, t, d = x.shape
    return ad.transpose(ad.reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x):
    b, h, t, dh = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def multi_head_attention(query, memory, p, heads, mask=None):
    """Scaled dot-product attention with ``heads`` heads, scale ``1/sqrt(d/heads)``.

    ``mask`` is additive and broadcastable to ``[B, Tq, Tk]``.
    """
    d = query.shape[-1]
    if d % heads:
        raise ConfigError(f"heads: d_model={d} is not divisible by heads={heads}")
    q = _split_heads(ad.linear(query, p.wq, p.bq), heads)
    k = _split_heads(ad.linear(memory, p.wk, p.bk), heads)
    v = _split_heads(ad.linear(memory, p.wv, p.bv), heads)
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(d // heads))
    if mask is not None:
        mask = np.asarray(mask, dtype=scores.dtype)
        if mask.ndim == 3:
            mask = mask[:, None]
        scores = ad.add(scores, mask)
    ctx = ad.matmul(ad.softmax(scores, axis=-1), v)
    return ad.linear(_merge_heads(ctx), p.wo, p.bo)


@dataclass
class FfnParams(_Params):
    w1: ad.Tensor
    b1: ad.Tensor
    w2: ad.Tensor
    b2: ad.Tensor

    @classmethod
    def init(cls, d, d_ff, rng):
        return cls(_ortho(rng, d, d_ff), _zeros(d_ff), _ortho(rng, d_ff, d), _zeros(d))


def feed_forward(x, p):
    return ad.linear(ad.relu(ad.linear(x, p.w1, p.b1)), p.w2, p.b2)


# -- layer parameter sets ----------------------------------------------------------


@dataclass
class TransformerLayerParams(_Params):
    attn: AttentionParams
    ffn: FfnParams
    ln1_g: ad.Tensor
    ln1_b: ad.Tensor
    ln2_g: ad.Tensor
    ln2_b: ad.Tensor
    heads: int = field(default=1, metadata={"param": False})

    def tensors(self):
        out = {f"attn.{k}": v for k, v in self.attn.tensors().items()}
        out.update({f"ffn.{k}": v for k, v in self.ffn.tensors().items()})
        out.update(ln1_g=self.ln1_g, ln1_b=self.ln1_b, ln2_g=self.ln2_g, ln2_b=self.ln2_b)
        return out

    @classmethod
    def init(cls, d, heads, d_ff, seed=None, frozen=False):
        if d % heads:
            raise ConfigError(f"heads: d_model={d} is not divisible by heads={heads}")
        rng = _rng(seed)
        p = cls(AttentionParams.init(d, rng), FfnParams.init(d, d_ff, rng),
                _ones(d), _zeros(d), _ones(d), _zeros(d), heads=heads)
        return _mark(p, frozen)


@dataclass
class FfnReservoirParams(_Params):
    ffn: FfnParams
    ln_g: ad.Tensor
    ln_b: ad.Tensor

    def tensors(self):
        out = {f"ffn.{k}": v for k, v in self.ffn.tensors().items()}
        out.update(ln_g=self.ln_g, ln_b=self.ln_b)
        return out

    @classmethod
    def init(cls, d, d_ff, seed=None, frozen=True):
        rng = _rng(seed)
        return _mark(cls(FfnParams.init(d, d_ff, rng), _ones(d), _zeros(d)), frozen)


@dataclass
class GruParams(_Params):
    """One direction: input and recurrent projections for (reset, update, candidate)."""

    w_ih: ad.Tensor
    b_ih: ad.Tensor
    w_hh: ad.Tensor
    b_hh: ad.Tensor

    @classmethod
    def init(cls, d_in, hidden, rng):
        w_ih = np.concatenate([_ortho(rng, d_in, hidden).data for _ in range(3)], axis=1)
        w_hh = np.concatenate([_ortho(rng, hidden, hidden).data for _ in range(3)], axis=1)
        return cls(ad.Tensor(w_ih), _zeros(3 * hidden), ad.Tensor(w_hh), _zeros(3 * hidden))


@dataclass
class BiGruParams(_Params):
    fwd: GruParams
    bwd: GruParams
    w_merge: ad.Tensor
    b_merge: ad.Tensor
    ln_g: ad.Tensor
    ln_b: ad.Tensor

    def tensors(self):
        out = {f"fwd.{k}": v for k, v in self.fwd.tensors().items()}
        out.update({f"bwd.{k}": v for k, v in self.bwd.tensors().items()})
        out.update(w_merge=self.w_merge, b_merge=self.b_merge, ln_g=self.ln_g, ln_b=self.ln_b)
        return out

    @property
    def hidden(self):
        return self.fwd.w_hh.shape[0]

    @classmethod
    def init(cls, d, seed=None, frozen=True, width_mult=1):
        rng = _rng(seed)
        hidden = int(width_mult * d)
        if hidden < 1:
            raise ConfigError(f"width_mult: hidden width {hidden} must be >= 1")
        p = cls(GruParams.init(d, hidden, rng), GruParams.init(d, hidden, rng),
                _ortho(rng, 2 * hidden, d), _zeros(d), _ones(d), _zeros(d))
        return _mark(p, frozen)


@dataclass
class ConvReservoirParams(_Params):
    kernel: ad.Tensor  # [K, conv_heads] tap logits
    w_pw: ad.Tensor
    b_pw: ad.Tensor
    ln_g: ad.Tensor
    ln_b: ad.Tensor

    @property
    def kernel_width(self):
        return self.kernel.shape[0]

    @classmethod
    def init(cls, d, kernel_width=3, conv_heads=4, seed=None, frozen=True):
        if kernel_width < 1 or kernel_width % 2 == 0:
            raise ConfigError(f"kernel_width: must be odd for symmetric padding, got {kernel_width}")
        if d % conv_heads:
            raise ConfigError(f"conv_heads: d_model={d} is not divisible by conv_heads={conv_heads}")
        rng = _rng(seed)
        kernel = default_init("xavier", (kernel_width, conv_heads), rng)
        p = cls(kernel, _ortho(rng, d, d), _zeros(d), _ones(d), _zeros(d))
        return _mark(p, frozen)


@dataclass
class DecoderLayerParams(_Params):
    self_attn: AttentionParams
    cross_attn: AttentionParams
    ffn: FfnParams
    ln1_g: ad.Tensor
    ln1_b: ad.Tensor
    ln2_g: ad.Tensor
    ln2_b: ad.Tensor
    ln3_g: ad.Tensor
    ln3_b: ad.Tensor
    heads: int = field(default=1, metadata={"param": False})

    def tensors(self):
        out = {f"self_attn.{k}": v for k, v in self.self_attn.tensors().items()}
        out.update({f"cross_attn.{k}": v for k, v in self.cross_attn.tensors().items()})
        out.update({f"ffn.{k}": v for k, v in self.ffn.tensors().items()})
        for name in ("ln1_g", "ln1_b", "ln2_g", "ln2_b", "ln3_g", "ln3_b"):
            out[name] = getattr(self, name)
        return out

    @classmethod
    def init(cls, d, heads, d_ff, seed=None, frozen=False):
        if d % heads:
            raise ConfigError(f"heads: d_model={d} is not divisible by heads={heads}")
        rng = _rng(seed)
        p = cls(AttentionParams.init(d, rng), AttentionParams.init(d, rng), FfnParams.init(d, d_ff, rng),
                _ones(d), _zeros(d), _ones(d), _zeros(d), _ones(d), _zeros(d), heads=heads)
        return _mark(p, frozen)


# -- forward functions -----------------------------------------------------------------


def _check_input(x, d):
    if x.ndim != 3 or x.shape[-1] != d:
        raise ShapeError(f"expected input [B, T, {d}], got {x.shape}")


def transformer_layer_forward(x, p, mask=None):
    """``H = MHSA(LN(x)) + x``; ``out = FFN(LN(H)) + H``."""
    _check_input(x, p.ln1_g.shape[0])
    y = ad.layer_norm(x, p.ln1_g, p.ln1_b, LN_EPS)
    h = ad.add(multi_head_attention(y, y, p.attn, p.heads, mask), x)
    return ad.add(feed_forward(ad.layer_norm(h, p.ln2_g, p.ln2_b, LN_EPS), p.ffn), h)


def ffn_reservoir_forward(x, p):
    """``FFN(LN(x)) + x``; position ``t`` of the output sees only position ``t``."""
    _check_input(x, p.ln_g.shape[0])
    return ad.add(feed_forward(ad.layer_norm(x, p.ln_g, p.ln_b, LN_EPS), p.ffn), x)


def _gru_scan(xi, p, keep, reverse):
    b, t, _ = xi.shape
    hidden = p.w_hh.shape[0]
    h = ad.Tensor(np.zeros((b, hidden), dtype=xi.dtype))
    states = [None] * t
    steps = range(t - 1, -1, -1) if reverse else range(t)
    for i in steps:
        gx = ad.getitem(xi, (slice(None), i))
        gh = ad.linear(h, p.w_hh, p.b_hh)
        r = ad.sigmoid(ad.add(gx[:, :hidden], gh[:, :hidden]))
        z = ad.sigmoid(ad.add(gx[:, hidden : 2 * hidden], gh[:, hidden : 2 * hidden]))
        n = ad.tanh(ad.add(gx[:, 2 * hidden :], ad.mul(r, gh[:, 2 * hidden :])))
        h_new = ad.add(ad.mul(ad.sub(1.0, z), n), ad.mul(z, h))
        if keep is not None:
            k = keep[:, i, None]
            h_new = ad.add(ad.mul(h_new, k), ad.mul(h, 1.0 - k))
        h = h_new
        states[i] = h
    return ad.stack(states, axis=1)


def bigru_forward(x, p, pad_mask=None):
    """Bidirectional GRU over ``LN(x)``; states concatenated, merged to ``d``, residual.

    Positions flagged in ``pad_mask`` (``[B, T]``, True = pad) leave the
    recurrent state untouched.
    """
    _check_input(x, p.ln_g.shape[0])
    y = ad.layer_norm(x, p.ln_g, p.ln_b, LN_EPS)
    keep = None if pad_mask is None else (~np.asarray(pad_mask, dtype=bool)).astype(x.dtype)
    hf = _gru_scan(ad.linear(y, p.fwd.w_ih, p.fwd.b_ih), p.fwd, keep, reverse=False)
    hb = _gru_scan(ad.linear(y, p.bwd.w_ih, p.bwd.b_ih), p.bwd, keep, reverse=True)
    merged = ad.linear(ad.concat([hf, hb], axis=-1), p.w_merge, p.b_merge)
    return ad.add(merged, x)


def conv_reservoir_forward(x, p, pad_mask=None):
    """Lightweight convolution over ``LN(x)``, pointwise mix, residual."""
    d = p.ln_g.shape[0]
    _check_input(x, d)
    k, heads = p.kernel.shape
    if k % 2 == 0:
        raise ConfigError(f"kernel_width: must be odd for symmetric padding, got {k}")
    y = ad.layer_norm(x, p.ln_g, p.ln_b, LN_EPS)
    if pad_mask is not None:
        y = ad.mul(y, (~np.asarray(pad_mask, dtype=bool)).astype(x.dtype)[..., None])
    taps = ad.softmax(p.kernel, axis=0)
    channel_head = np.repeat(np.arange(heads), d // heads)
    conv = ad.depthwise_conv1d(y, ad.getitem(taps, (slice(None), channel_head)))
    return ad.add(ad.linear(conv, p.w_pw, p.b_pw), x)


def decoder_layer_forward(x, memory, p, self_mask=None, memory_mask=None):
    _check_input(x, p.ln1_g.shape[0])
    y = ad.layer_norm(x, p.ln1_g, p.ln1_b, LN_EPS)
    h = ad.add(multi_head_attention(y, y, p.self_attn, p.heads, self_mask), x)
    y = ad.layer_norm(h, p.ln2_g, p.ln2_b, LN_EPS)
    h = ad.add(multi_head_attention(y, memory, p.cross_attn, p.heads, memory_mask), h)
    return ad.add(feed_forward(ad.layer_norm(h, p.ln3_g, p.ln3_b, LN_EPS), p.ffn), h)


# -- a uniform wrapper ------------------------------------------------------------------


class Layer:
    """A layer of some ``kind`` with its parameters and a shared frozen flag."""

    def __init__(self, kind, params):
        if kind not in LAYER_KINDS + ("decoder",):
            raise ConfigError(f"kind: unknown layer kind {kind!r}")
        self.kind = kind
        self.params = params

    @property
    def frozen(self):
        return self.params.frozen

    @frozen.setter
    def frozen(self, value):
        self.params.set_frozen(value)

    def parameters(self):
        return list(self.params.tensors().values())

    def named_parameters(self):
        return dict(self.params.tensors())

    def num_parameters(self):
        return self.params.num_parameters()

    def __call__(self, x, attn_mask=None, pad_mask=None, memory=None, memory_mask=None):
        if self.kind == "transformer":
            return transformer_layer_forward(x, self.params, attn_mask)
        if self.kind == "ffn_reservoir":
            return ffn_reservoir_forward(x, self.params)
        if self.kind == "bigru_reservoir":
            return bigru_forward(x, self.params, pad_mask)
        if self.kind == "conv_reservoir":
            return conv_reservoir_forward(x, self.params, pad_mask)
        return decoder_layer_forward(x, memory, self.params, attn_mask, memory_mask)

    def __repr__(self):
        state = "frozen" if self.frozen else "trainable"
        return f"Layer({self.kind}, {state}, params={self.num_parameters()})"


def make_layer(kind, d, heads=4, d_ff=None, seed=None, frozen=False, *, kernel_width=3,
               conv_heads=None, gru_width_mult=1):
    """Construct a :class:`Layer` of the given kind, initialised from ``seed``."""
    d_ff = 4 * d if d_ff is None else d_ff
    if kind == "transformer":
        params = TransformerLayerParams.init(d, heads, d_ff, seed, frozen)
    elif kind == "ffn_reservoir":
        params = FfnReservoirParams.init(d, d_ff, seed, frozen)
    elif kind == "bigru_reservoir":
        params = BiGruParams.init(d, seed, frozen, width_mult=gru_width_mult)
    elif kind == "conv_reservoir":
        params = ConvReservoirParams.init(d, kernel_width, conv_heads or heads, seed, frozen)
    elif kind == "decoder":
        params = DecoderLayerParams.init(d, heads, d_ff, seed, frozen)
    else:
        raise ConfigError(f"kind: unknown layer kind {kind!r}")
    return Layer(kind, params)
