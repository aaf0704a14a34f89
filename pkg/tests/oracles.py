"""Independent reference implementations used by the tests.

Nothing here imports the package's metric or integration code; each oracle
is written the slow, obvious way.
"""

import math
from itertools import product

import numpy as np

from reservoir_transformers import autodiff as ad


def numeric_grad(f, t, h=1e-5):
    """Central differences of scalar ``f()`` with respect to ``t.data`` (in place)."""
    num = np.zeros_like(t.data)
    for idx in np.ndindex(t.data.shape):
        orig = t.data[idx]
        t.data[idx] = orig + h
        with ad.no_grad():
            fp = float(f().item())
        t.data[idx] = orig - h
        with ad.no_grad():
            fm = float(f().item())
        t.data[idx] = orig
        num[idx] = (fp - fm) / (2 * h)
    return num


def rel_err(analytic, numeric, floor=1e-6):
    """Max abs difference scaled by the larger of the gradient's max magnitude and ``floor``."""
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), floor)
    return float(np.abs(analytic - numeric).max() / scale)


def grad_check(f, tensors, h=1e-5):
    """Worst relative error over ``tensors`` between backward and central differences.

    Each tensor's error is scaled by its own largest gradient entry, floored
    at 1e-3 of the largest entry over all tensors. Without the floor a
    tensor whose true gradient is exactly zero (an attention key bias, say)
    would compare finite-difference round-off against itself.
    """
    out = f()
    grads = ad.backward(out)
    pairs = [(grads[t], numeric_grad(f, t, h)) for t in tensors]
    floor = 1e-3 * max(max(np.abs(a).max(), np.abs(n).max()) for a, n in pairs)
    return max(rel_err(a, n, floor=max(floor, 1e-12)) for a, n in pairs)


# -- BLEU ---------------------------------------------------------------------------------


def brute_bleu(hyps, refs, max_n=4):
    """Corpus BLEU by explicit n-gram enumeration (lists, no Counter)."""
    match = [0] * max_n
    total = [0] * max_n
    hl = rl = 0
    for h, r in zip(hyps, refs):
        h, r = list(h), list(r)
        hl += len(h)
        rl += len(r)
        for n in range(1, max_n + 1):
            hg = [tuple(h[i : i + n]) for i in range(len(h) - n + 1)]
            rg = [tuple(r[i : i + n]) for i in range(len(r) - n + 1)]
            used = [False] * len(rg)
            for g in hg:
                for j, q in enumerate(rg):
                    if not used[j] and q == g:
                        used[j] = True
                        match[n - 1] += 1
                        break
            total[n - 1] += len(hg)
    if match[0] == 0:
        return 0.0
    precisions = [match[0] / total[0]] + [(match[n] + 1) / (total[n] + 1) for n in range(1, max_n)]
    geo = math.exp(sum(math.log(p) for p in precisions) / max_n)
    bp = 1.0 if hl > rl else math.exp(1 - rl / hl)
    return 100 * bp * geo


# -- AUCC --------------------------------------------------------------------------------


def trapezoid_oracle(times, values, t_hat, pieces=1):
    """Integrate the held/interpolated curve by splitting every segment into ``pieces`` slices."""
    def at(t):
        if t >= times[-1]:
            return values[-1]
        for k in range(len(times) - 1):
            if times[k] <= t <= times[k + 1]:
                w = (t - times[k]) / (times[k + 1] - times[k])
                return values[k] + w * (values[k + 1] - values[k])
        raise ValueError(t)

    knots = sorted({t for t in times if t < t_hat} | {t_hat})
    area = 0.0
    for a, b in zip(knots, knots[1:]):
        for j in range(pieces):
            x0 = a + (b - a) * j / pieces
            x1 = a + (b - a) * (j + 1) / pieces
            area += 0.5 * (at(x0) + at(x1)) * (x1 - x0)
    return area


def scan_time_to_fraction(times, values, fraction, higher_better=True):
    """Linear scan: first time the running best reaches the target fraction of the final best."""
    best = None
    env = []
    for v in values:
        best = v if best is None else (max(best, v) if higher_better else min(best, v))
        env.append(best)
    final = env[-1]
    for t, e in zip(times, env):
        if higher_better and e >= fraction * final:
            return t
        if not higher_better and e <= final / fraction:
            return t
    raise AssertionError("unreachable")


# -- optimiser ---------------------------------------------------------------------------


def adam_scalar(theta, grads, lr, b1=0.9, b2=0.98, eps=1e-9):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return theta


# -- placement ---------------------------------------------------------------------------


def non_adjacent_exists(n, k):
    """Brute force: is there any length-n L/R string with k R's and no 'RR'?"""
    for bits in product("LR", repeat=n):
        s = "".join(bits)
        if s.count("R") == k and "RR" not in s:
            return True
    return False
