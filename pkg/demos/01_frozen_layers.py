"""
Frozen random layers
====================

A reservoir is an ordinary layer whose weights are drawn once and never
updated. Gradients still pass through it to the layers below.
"""

import numpy as np

from reservoir_transformers import autodiff as ad
from reservoir_transformers import layers as L
from reservoir_transformers.trainer import Optimizer

# one layer of each kind, all at width 16
x = ad.tensor(np.random.default_rng(0).standard_normal((2, 5, 16)))
for kind in L.LAYER_KINDS:
    layer = L.make_layer(kind, 16, heads=4, seed=0, frozen=True)
    print(f"{kind:16s} params={layer.num_parameters():6d}  output shape={layer(x).shape}")

# %%
# Train a readout on top of a frozen FFN reservoir and check the reservoir
# did not move while the readout did.
reservoir = L.make_layer("ffn_reservoir", 16, seed=1, frozen=True)
readout = L.make_layer("transformer", 16, heads=4, seed=2)
before = {k: t.data.copy() for k, t in reservoir.named_parameters().items()}
target = np.random.default_rng(3).standard_normal((2, 5, 16))

opt = Optimizer(lr=3e-3)
for step in range(200):
    loss = ad.mean(ad.square(ad.sub(readout(reservoir(x)), target)))
    ad.backward(loss)
    opt.step(reservoir.parameters() + readout.parameters())
    if step % 50 == 0:
        print(f"step {step:3d}  loss {loss.item():.4f}")

unchanged = all(np.array_equal(t.data, before[k]) for k, t in reservoir.named_parameters().items())
print("reservoir unchanged after training:", unchanged)
print("reservoir gradient buffers:", {t.grad for t in reservoir.parameters()})
