"""
Transformer vs FFN reservoir on the copy task
=============================================

A short run through the experiment harness: two variants, two seeds,
curves written to ``demo_runs/``. Takes well under a minute on a laptop.
"""

from reservoir_transformers.cli import ExperimentConfig, run_experiment

common = dict(task="copy", vocab_size=16, min_len=4, max_len=10, n_train=1000, n_val=100,
              d_model=32, heads=4, layers=6, decoder_layers=1, lr=3e-3, warmup_steps=50,
              batch_size=32, max_steps=300, eval_interval_steps=50, eval_examples=100, seeds=[1, 2])
configs = [
    ExperimentConfig(model="transformer", **common),
    ExperimentConfig(model="ffn_reservoir", family="transformer", n_reservoir=2, **common),
]
result = run_experiment(configs, out="demo_runs", log=print)

for row in result["rows"]:
    print(f"{row['model']:14s} {row['pattern']:8s} best BLEU {row['max_metric']:5.1f} +/- {row['max_metric_std']:4.1f}"
          f"  AUCC {row['aucc_normalized']:.3f}  s/epoch {row['seconds_per_epoch']:.2f}  params {row['params']}")
print("comparison table:", result["comparison"])
