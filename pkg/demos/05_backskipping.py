"""
Backskipping on a toy regression
================================

Three dense layers with the middle one frozen. On a backskipped step the
backward pass stops at the frozen layer and a sampled gradient is injected
into the layer below instead. The sampling policy is trained with
REINFORCE while true gradients are still being computed.
"""

import numpy as np

from reservoir_transformers.stack import ToyRegressor
from reservoir_transformers.tasks import make_toy_regression
from reservoir_transformers.trainer import BackskipState, Optimizer, backskip_step, evaluate, train_step

train = make_toy_regression(512, seed=0)
val = make_toy_regression(512, seed=0, split="val")
steps = 2000


def run(backskip):
    model = ToyRegressor(seed=0)
    opt = Optimizer(lr=3e-3)
    bs = BackskipState.for_model(model, planned_steps=steps, seed=0) if backskip else None
    rng = np.random.default_rng(0)
    true_steps = 0
    for step in range(steps):
        idx = rng.integers(0, 512, size=64)
        batch = (train[0][idx], train[1][idx])
        if backskip:
            true_steps += backskip_step(model, batch, bs, opt, step=step)["used_true_backward"]
        else:
            train_step(model, batch, opt, step=step)
    return evaluate(model, val, "mse"), true_steps, bs


base, _, _ = run(False)
skip, true_steps, bs = run(True)
print(f"initial val MSE        {evaluate(ToyRegressor(seed=0), val, 'mse'):.3f}")
print(f"true gradients         {base:.3f}")
print(f"backskipping           {skip:.3f}  ({true_steps}/{steps} steps used the true backward,"
      f" final p_true {bs.p_true:.2e})")
