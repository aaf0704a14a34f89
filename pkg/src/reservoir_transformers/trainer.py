"""Training loops: standard updates, LayerDrop, and backskipping.

Frozen parameters are never touched here: the optimiser keeps no state for
them and they never receive gradients (see :mod:`.autodiff`).
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError, NumericError
from .tasks import bleu, bits_per_character, strip_offset


@dataclass
class Optimizer:
    """Adam (or plain SGD) with an optional inverse-square-root warmup.

    With ``warmup_steps > 0`` the rate ramps linearly to ``lr`` and then
    decays as ``lr * sqrt(warmup / step)``.
    """

    lr: float = 1e-3
    betas: tuple = (0.9, 0.98)
    eps: float = 1e-9
    kind: str = "adam"
    warmup_steps: int = 0
    clip_norm: float = None
    step_count: int = 0
    state: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ConfigError(f"optimizer: expected 'adam' or 'sgd', got {self.kind!r}")

    def current_lr(self):
        t = max(self.step_count, 1)
        if self.warmup_steps <= 0:
            return self.lr
        return self.lr * min(t / self.warmup_steps, math.sqrt(self.warmup_steps / t))

    def step(self, params):
        """Apply one update to every non-frozen parameter holding a gradient, then clear grads."""
        self.step_count += 1
        live = [p for p in params if p.grad is not None and not p.frozen]
        lr = self.current_lr()
        factor = 1.0
        if self.clip_norm is not None and live:
            norm = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in live))
            if norm > self.clip_norm:
                factor = self.clip_norm / (norm + 1e-12)
        b1, b2 = self.betas
        for p in live:
            g = p.grad * factor if factor != 1.0 else p.grad
            if self.kind == "sgd":
                p.data = p.data - lr * g
            else:
                m, v, t = self.state.get(id(p), (0.0, 0.0, 0))
                t += 1
                m = b1 * m + (1.0 - b1) * g
                v = b2 * v + (1.0 - b2) * (g * g)
                m_hat = m / (1.0 - b1**t)
                v_hat = v / (1.0 - b2**t)
                p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)
                self.state[id(p)] = (m, v, t)
            p.grad = None
        for p in params:
            p.grad = None


def _check_finite(value, step):
    if not np.isfinite(value):
        raise NumericError(f"loss is {value}", step=step)


def train_step(model, batch, opt, step=None, skip=None):
    """Forward, backward, update. Returns the loss as a float."""
    loss = model.loss(batch, skip=skip)
    value = float(loss.item())
    _check_finite(value, step if step is not None else opt.step_count)
    ad.backward(loss)
    opt.step(model.parameters())
    return value


# -- LayerDrop ------------------------------------------------------------------------------


@dataclass(frozen=True)
class LayerDropConfig:
    p: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.p < 1.0:
            raise ConfigError(f"layerdrop_p: need 0 <= p < 1, got {self.p}")


def sample_layer_drop(n_layers, cfg, rng):
    """Independent Bernoulli(p) skip flags, one per droppable layer."""
    return rng.random(n_layers) < cfg.p


def layerdrop_forward(model, batch, cfg, rng, training=True):
    """Loss with each droppable layer bypassed with probability ``cfg.p``.

    Returns ``(loss, dropped)``. With ``training=False`` nothing is dropped.
    """
    n = len(model.droppable)
    dropped = sample_layer_drop(n, cfg, rng) if training else np.zeros(n, dtype=bool)
    return model.loss(batch, skip=dropped), dropped


def layerdrop_step(model, batch, opt, cfg, rng, step=None):
    loss, dropped = layerdrop_forward(model, batch, cfg, rng)
    value = float(loss.item())
    _check_finite(value, step if step is not None else opt.step_count)
    ad.backward(loss)
    opt.step(model.parameters())
    return value, dropped


# -- backskipping -----------------------------------------------------------------------------


@dataclass
class BackskipState:
    """Policy and value heads plus the annealed true-backward probability.

    The policy maps the pooled, stop-gradient output of the layer below the
    reservoir to a mean action ``mu``; actions are drawn from ``N(mu, noise_std^2)``
    and stand in for the gradient entering that layer. The value head maps
    an action to a scalar baseline.

    With ``train_above`` (the default) a backskipped step still backpropagates
    from the loss down to the input of the reservoir, so the layers above it
    keep learning; only the backward pass through the reservoir is replaced.
    With ``train_above=False`` nothing above the reservoir gets a gradient.
    """

    width: int
    warmup_steps: int = 100
    anneal_factor: float = 0.99
    noise_std: float = 1.0
    reward_mode: str = "grad_mean"
    p_true: float = 1.0
    step: int = 0
    seed: int = 0
    head_lr: float = 1e-3
    train_above: bool = True
    policy_w: ad.Tensor = None
    policy_b: ad.Tensor = None
    value_w: ad.Tensor = None
    value_b: ad.Tensor = None
    head_opt: Optimizer = None
    rng: np.random.Generator = None
    last_reward: float = None

    def __post_init__(self):
        if self.reward_mode not in ("grad_mean", "neg_loss"):
            raise ConfigError(f"reward_mode: expected 'grad_mean' or 'neg_loss', got {self.reward_mode!r}")
        if not 0.0 < self.anneal_factor <= 1.0:
            raise ConfigError(f"anneal_factor: need 0 < factor <= 1, got {self.anneal_factor}")
        if not self.noise_std > 0:
            raise ConfigError(f"noise_std: must be > 0, got {self.noise_std}")
        if self.warmup_steps < 0:
            raise ConfigError(f"warmup_steps: must be >= 0, got {self.warmup_steps}")
        d = self.width
        defaults = {
            "policy_w": lambda: ad.parameter(np.zeros((d, d)), name="policy_w"),
            "policy_b": lambda: ad.parameter(np.zeros(d), name="policy_b"),
            "value_w": lambda: ad.parameter(np.zeros((d, 1)), name="value_w"),
            "value_b": lambda: ad.parameter(np.zeros(1), name="value_b"),
            "head_opt": lambda: Optimizer(lr=self.head_lr),
            "rng": lambda: np.random.default_rng(self.seed),
        }
        for name, make in defaults.items():
            if getattr(self, name) is None:
                setattr(self, name, make())

    @classmethod
    def for_model(cls, model, planned_steps=None, **kw):
        """Heads sized for ``model``'s backskip layer; warmup defaults to 10% of ``planned_steps``."""
        i, _, _ = model.backskip_triplet()
        layer = model.backskip_layer(i)
        width = layer.w.shape[-1] if hasattr(layer, "w") else model.spec.d_model
        if "warmup_steps" not in kw and planned_steps is not None:
            kw["warmup_steps"] = max(1, planned_steps // 10)
        return cls(width=width, **kw)

    @property
    def in_warmup(self):
        return self.step < self.warmup_steps

    def head_parameters(self):
        return [self.policy_w, self.policy_b, self.value_w, self.value_b]

    def policy_state(self, h):
        """Stop-gradient activation, mean-pooled over tokens when there is a token axis."""
        data = h.data
        return data.mean(axis=1) if data.ndim == 3 else data

    def sample_action(self, s):
        mu = s @ self.policy_w.data + self.policy_b.data
        return mu, mu + self.noise_std * self.rng.standard_normal(mu.shape)

    def update_heads(self, s, action, reward):
        """One Adam step on value MSE plus REINFORCE with the value as baseline."""
        s_t = ad.Tensor(s)
        a_t = ad.Tensor(action)
        mu = ad.linear(s_t, self.policy_w, self.policy_b)
        value = ad.linear(a_t, self.value_w, self.value_b)  # [B, 1]
        value_loss = ad.mean(ad.square(ad.sub(reward, value)))
        advantage = reward - value.data  # baseline is not differentiated through
        log_prob = ad.scale(ad.sum(ad.square(ad.sub(a_t, mu)), axis=-1, keepdims=True),
                            -0.5 / self.noise_std**2)
        reinforce = ad.neg(ad.mean(ad.mul(log_prob, advantage)))
        total = ad.add(value_loss, reinforce)
        ad.backward(total)
        self.head_opt.step(self.head_parameters())
        return float(value_loss.item()), float(reinforce.item())


def reward_from_gradients(grads):
    """Sign-flipped mean over every entry of the given gradient arrays."""
    flat = np.concatenate([np.ravel(g) for g in grads])
    if flat.size == 0:
        raise ContractError("reward: no gradient entries")
    return -float(flat.mean())


def backskip_step(model, batch, bs, opt, step=None):
    """One backskipping iteration.

    With probability ``p_true`` (always during warmup) this is an ordinary
    step that also trains the policy and value heads. Otherwise the backward
    pass stops at the reservoir: a sampled action is injected as the gradient
    of the layer below it, and the reservoir's own backward is never run.
    After warmup ``p_true`` is multiplied by ``anneal_factor`` every step.
    """
    i, _, top = model.backskip_triplet()
    step = bs.step if step is None else step
    use_true = bs.in_warmup or bs.rng.random() < bs.p_true
    h, ctx = model.forward_to(batch, i)
    s = bs.policy_state(h)
    mu, action = bs.sample_action(s)

    if use_true:
        loss = model.loss_from(h, i, batch, ctx)
        value = float(loss.item())
        _check_finite(value, step)
        ad.backward(loss)
        if bs.reward_mode == "grad_mean":
            top_grads = [p.grad for p in model.backskip_layer(top).parameters() if p.grad is not None]
            reward = reward_from_gradients(top_grads)
        else:
            reward = -value
        bs.update_heads(s, action, reward)
        bs.last_reward = reward
    else:
        if bs.train_above:
            loss = model.loss_from(ad.detach(h), i, batch, ctx)
            value = float(loss.item())
            _check_finite(value, step)
            ad.backward(loss)
        else:
            with ad.no_grad():
                value = float(model.loss_from(ad.detach(h), i, batch, ctx).item())
            _check_finite(value, step)
        inject = action[:, None, :] if h.ndim == 3 else action
        if "keep" in ctx:
            inject = inject * ctx["keep"]
        surrogate = ad.sum(ad.mul(h, inject.astype(h.dtype)))
        ad.backward(surrogate)

    opt.step(model.parameters())
    if not bs.in_warmup:
        bs.p_true *= bs.anneal_factor
    bs.step += 1
    return {"loss": value, "used_true_backward": bool(use_true)}


# -- evaluation ---------------------------------------------------------------------------------


def evaluate(model, dataset, metric="bleu", batch_size=64):
    """Deterministic evaluation; never drops layers or samples.

    ``metric`` is ``"bleu"`` or ``"nll"`` for seq2seq pair lists, ``"bpc"``
    for an LM over an id stream, ``"mse"`` for ``(x, y)`` regression arrays.
    """
    from .tasks import batcher

    if dataset is None or len(dataset) == 0 or (isinstance(dataset, tuple) and len(dataset[0]) == 0):
        raise ContractError("evaluate: empty dataset")
    if metric == "bleu":
        hyps, refs = [], []
        for batch in batcher(dataset, batch_size):
            hyps.extend(strip_offset(h) for h in model.greedy_decode(batch))
            refs.extend(batch.references)
        return bleu(hyps, refs)
    if metric == "nll":
        total = count = 0
        for batch in batcher(dataset, batch_size):
            s, n = model.nll_sum(batch)
            total += s
            count += n
        return total / count
    if metric == "bpc":
        return bits_per_character(model, dataset)
    if metric == "mse":
        x, y = dataset
        with ad.no_grad():
            return float(np.mean((model.predict(x).data - y) ** 2))
    raise ConfigError(f"metric: unknown metric {metric!r}")
