"""
Placing reservoirs in a stack
=============================

Reservoirs go in the middle of the encoder, separated by trainable layers.
Freezing k layers keeps the total parameter count and removes k layers'
worth of trainable parameters.
"""

from reservoir_transformers import stack as S
from reservoir_transformers.tasks import model_vocab_size

for n, k in [(6, 0), (7, 2), (7, 3), (8, 2), (12, 4)]:
    print(f"n={n:2d} k={k}  {S.place_reservoirs(n, k)}")

for strategy in S.STRATEGIES:
    print(f"{strategy:20s} {S.place_reservoirs(8, 2, strategy)}")

# %%
# Parameter census at a small width. "T reservoir" freezes transformer
# layers; its trainable count matches the shallower baseline while the total
# matches the deeper one.
common = dict(d_model=64, heads=4, src_vocab=model_vocab_size(32), tgt_vocab=model_vocab_size(32),
              decoder_pattern=2)
rows = [
    ("transformer 6", "LLLLLL", "transformer"),
    ("transformer 8", "LLLLLLLL", "transformer"),
    ("T reservoir 8|2", "LLRLRLLL", "transformer"),
    ("FFN reservoir 8|2", "LLRLRLLL", "ffn_reservoir"),
    ("BiGRU reservoir 8|2", "LLRLRLLL", "bigru_reservoir"),
    ("conv reservoir 8|2", "LLRLRLLL", "conv_reservoir"),
]
for name, pattern, kind in rows:
    model = S.build_model(S.ModelSpec(encoder_pattern=S.StackPattern.parse(pattern, kind), **common))
    c = S.param_census(model)
    print(f"{name:22s} {pattern:10s} trainable {c['trainable']:7d}  total {c['total']:7d}")

# %%
# Any frozen layer can be rebuilt from the spec and seed alone.
spec = S.ModelSpec(encoder_pattern="LLRLRLLL", seed=42, **common)
model = S.build_model(spec)
rebuilt = S.build_layer(spec, "encoder", 2)
same = all((a.data == b.data).all() for a, b in zip(model.encoder[2].parameters(), rebuilt.parameters()))
print("layer 2 rebuilt bit-for-bit:", same)
