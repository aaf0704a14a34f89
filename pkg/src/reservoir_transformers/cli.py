"""Experiment runner.

``run`` trains every model variant of a config over several seeds, logs
validation curves, and writes AUCC reports and a comparison table.
``aucc`` and ``compare`` redo the last two stages from files on disk.

Set ``RESERVOIR_WORKERS`` to run seeds and variants in parallel processes.
"""

import argparse
import csv
import glob
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import aucc as aucc_mod
from .errors import ConfigError, ContractError, NumericError, ReservoirError
from .stack import ModelSpec, build_model, param_census, place_reservoirs
from .tasks import (
    CharLmCorpus,
    SyntheticSeq2SeqSpec,
    batcher,
    bits_per_character,
    generate_seq2seq,
    model_vocab_size,
)
from .trainer import BackskipState, LayerDropConfig, Optimizer, backskip_step, evaluate, layerdrop_step, train_step

WORKERS_ENV = "RESERVOIR_WORKERS"
SEQ2SEQ_TASKS = ("copy", "reverse", "sort")
TRAINER_MODES = ("standard", "layerdrop", "backskip")
COMPARISON_COLUMNS = (
    "model", "layers", "frozen", "pattern",
    "max_metric", "max_metric_std", "time_to_max", "time_to_max_std", "ratio",
    "trainable", "total", "params",
    "seconds_per_epoch", "seconds_per_epoch_std",
    "time_to_95", "time_to_95_std", "time_to_99", "time_to_99_std",
    "aucc_raw", "aucc_normalized",
)


@dataclass
class ExperimentConfig:
    """One flat record per model variant; ``variants`` in the JSON file override fields."""

    model: str = "transformer"
    family: str = None
    # task
    task: str = "copy"
    vocab_size: int = 32
    min_len: int = 5
    max_len: int = 20
    n_train: int = 4000
    n_val: int = 200
    n_test: int = 200
    data_seed: int = 0
    corpus_path: str = None
    corpus_chars: int = 200_000
    context: int = 64
    # model
    d_model: int = 64
    heads: int = 4
    d_ff: int = None
    layers: int = 6
    decoder_layers: int = 2
    pattern: str = None
    n_reservoir: int = 0
    strategy: str = "alternating_middle"
    kind: str = "ffn_reservoir"
    kernel_width: int = 3
    gru_width_mult: int = 1
    dtype: str = "float32"
    # trainer
    trainer_mode: str = "standard"
    layerdrop_p: float = 0.2
    backskip_warmup: int = None
    lr: float = 1e-3
    warmup_steps: int = 100
    batch_size: int = 32
    # run
    seeds: list = field(default_factory=lambda: [1, 2, 3])
    t_hat_seconds: float = None
    eval_interval_steps: int = 100
    max_steps: int = 1000
    eval_examples: int = 200
    output_dir: str = "runs"

    def __post_init__(self):
        if self.family is None:
            self.family = self.model
        if self.task not in SEQ2SEQ_TASKS + ("char_lm",):
            raise ConfigError(f"task: expected one of {SEQ2SEQ_TASKS + ('char_lm',)}, got {self.task!r}")
        if self.trainer_mode not in TRAINER_MODES:
            raise ConfigError(f"trainer_mode: expected one of {TRAINER_MODES}, got {self.trainer_mode!r}")
        if not self.seeds:
            raise ConfigError("seeds: at least one seed is required")
        self.seeds = [int(s) for s in self.seeds]
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"seeds: duplicates in {self.seeds}")
        for name in ("max_steps", "eval_interval_steps", "batch_size", "layers", "eval_examples"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name}: must be >= 1, got {getattr(self, name)}")
        if self.eval_interval_steps > self.max_steps:
            raise ConfigError(f"eval_interval_steps: {self.eval_interval_steps} exceeds max_steps={self.max_steps}")
        if self.t_hat_seconds is not None and not self.t_hat_seconds > 0:
            raise ConfigError(f"t_hat_seconds: must be > 0, got {self.t_hat_seconds}")
        if not self.lr > 0:
            raise ConfigError(f"lr: must be > 0, got {self.lr}")
        if self.trainer_mode == "layerdrop":
            LayerDropConfig(self.layerdrop_p)
        if self.pattern is None:
            place_reservoirs(self.layers, self.n_reservoir, self.strategy, self.kind)
        elif len(self.pattern) != self.layers and self.task != "char_lm":
            raise ConfigError(f"pattern: {self.pattern!r} has {len(self.pattern)} slots but layers={self.layers}")

    @property
    def metric(self):
        return "bpc" if self.task == "char_lm" else "bleu"

    @property
    def direction(self):
        return "lower_better" if self.metric == "bpc" else "higher_better"

    def stack_pattern(self):
        if self.pattern is not None:
            from .stack import StackPattern

            return StackPattern.parse(self.pattern, self.kind)
        return place_reservoirs(self.layers, self.n_reservoir, self.strategy, self.kind)

    def model_spec(self, seed, vocab):
        common = dict(
            d_model=self.d_model, heads=self.heads, d_ff=self.d_ff, src_vocab=vocab, tgt_vocab=vocab,
            seed=seed, reservoir_kind=self.kind, kernel_width=self.kernel_width,
            gru_width_mult=self.gru_width_mult, dtype=self.dtype,
        )
        if self.task == "char_lm":
            return ModelSpec(mode="lm", encoder_pattern="L", decoder_pattern=self.stack_pattern(),
                             max_len=max(self.context, 16), **common)
        return ModelSpec(mode="seq2seq", encoder_pattern=self.stack_pattern(),
                         decoder_pattern=self.decoder_layers, max_len=self.max_len + 2, **common)


_CONFIG_FIELDS = {f.name for f in fields(ExperimentConfig)}


def parse_config(obj):
    """A list of per-variant configs from a flat JSON object (with optional ``variants``)."""
    if not isinstance(obj, dict):
        raise ConfigError("config: top level must be a JSON object")
    base = dict(obj)
    variants = base.pop("variants", None) or [{}]
    base.pop("name", None)
    unknown = sorted(set(base) - _CONFIG_FIELDS)
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown config field")
    out = []
    for i, v in enumerate(variants):
        if not isinstance(v, dict):
            raise ConfigError(f"variants[{i}]: must be an object")
        unknown = sorted(set(v) - _CONFIG_FIELDS)
        if unknown:
            raise ConfigError(f"variants[{i}].{unknown[0]}: unknown config field")
        out.append(ExperimentConfig(**{**base, **v}))
    names = [c.model for c in out]
    if len(set(names)) != len(names):
        raise ConfigError(f"model: variant names must be unique, got {names}")
    return out


def load_config(path):
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: {path} is not valid JSON ({exc})") from None
    return parse_config(obj)


# -- one run ----------------------------------------------------------------------------------


def _load_task(cfg):
    if cfg.task == "char_lm":
        if cfg.corpus_path:
            corpus = CharLmCorpus.from_file(cfg.corpus_path)
        else:
            corpus = CharLmCorpus.synthetic(cfg.corpus_chars, seed=cfg.data_seed)
        return corpus, corpus.vocab_size
    spec = SyntheticSeq2SeqSpec(
        task=cfg.task, vocab_size=cfg.vocab_size, min_len=cfg.min_len, max_len=cfg.max_len,
        n_train=cfg.n_train, n_val=cfg.n_val, n_test=cfg.n_test, seed=cfg.data_seed,
    )
    return generate_seq2seq(spec), model_vocab_size(cfg.vocab_size)


def _train_batches(cfg, data, seed):
    if cfg.task == "char_lm":
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,)))
        while True:
            yield data.batches("train", cfg.batch_size, cfg.context, rng)
    epoch = 0
    while True:
        yield from batcher(data["train"], cfg.batch_size, seed=seed * 100_003 + epoch)
        epoch += 1


def _steps_per_epoch(cfg, data):
    n = len(data.split("train")) // cfg.context if cfg.task == "char_lm" else len(data["train"])
    return max(1, math.ceil(n / cfg.batch_size))


def _evaluate(cfg, model, data):
    if cfg.task == "char_lm":
        stream = data.split("val")[: cfg.eval_examples * cfg.context]
        return bits_per_character(_ContextModel(model, cfg.context), stream)
    return evaluate(model, data["val"][: cfg.eval_examples], "bleu")


class _ContextModel:
    def __init__(self, model, context):
        self.model, self.context = model, context

    def next_char_log_probs(self, stream):
        return self.model.next_char_log_probs(stream, context=self.context)


def run_single(cfg, seed, virtual_clock=False):
    """Train one (variant, seed) and return its curve plus timing statistics."""
    data, vocab = _load_task(cfg)
    model = build_model(cfg.model_spec(seed, vocab))
    opt = Optimizer(lr=cfg.lr, warmup_steps=cfg.warmup_steps)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(11,)))
    ld = LayerDropConfig(cfg.layerdrop_p) if cfg.trainer_mode == "layerdrop" else None
    bs = None
    if cfg.trainer_mode == "backskip":
        kw = {} if cfg.backskip_warmup is None else {"warmup_steps": cfg.backskip_warmup}
        bs = BackskipState.for_model(model, planned_steps=cfg.max_steps, seed=seed, **kw)

    times, values = [0.0], [_evaluate(cfg, model, data)]
    train_clock = 0.0
    step_times = []
    batches = _train_batches(cfg, data, seed)
    for step in range(1, cfg.max_steps + 1):
        batch = next(batches)
        t0 = time.perf_counter()
        if bs is not None:
            backskip_step(model, batch, bs, opt, step=step)
        elif ld is not None:
            layerdrop_step(model, batch, opt, ld, rng, step=step)
        else:
            train_step(model, batch, opt, step=step)
        dt = time.perf_counter() - t0
        step_times.append(dt)
        train_clock += dt
        if step % cfg.eval_interval_steps == 0 or step == cfg.max_steps:
            times.append(float(step) if virtual_clock else train_clock)
            values.append(_evaluate(cfg, model, data))

    if virtual_clock:
        sec_per_step = 1.0
    else:
        sec_per_step = float(np.mean(step_times))
    census = param_census(model)
    curve = aucc_mod.ConvergenceCurve(cfg.model, seed, times, values, cfg.direction)
    return {
        "curve": curve,
        "seconds_per_step": sec_per_step,
        "seconds_per_epoch": sec_per_step * _steps_per_epoch(cfg, data),
        "trainable": census["trainable"],
        "total": census["total"],
    }


def _run_job(args):
    cfg, seed, virtual_clock = args
    return cfg.model, seed, run_single(cfg, seed, virtual_clock)


def _workers():
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV}: expected an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{WORKERS_ENV}: must be >= 1, got {n}")
    return n


# -- experiment -----------------------------------------------------------------------------------


def summarize(cfg, results):
    """Per-model summary fields stored alongside the AUCC report."""
    curves = [r["curve"] for r in results]
    pattern = cfg.stack_pattern()

    def ms(values):
        m, s = aucc_mod.mean_std(values)
        return {"mean": m, "std": s}

    return {
        "family": cfg.family,
        "layers": len(pattern),
        "frozen": pattern.n_frozen,
        "pattern": str(pattern),
        "trainer_mode": cfg.trainer_mode,
        "metric": cfg.metric,
        "max_metric": ms([aucc_mod.best_value(c) for c in curves]),
        "time_to_max": ms([aucc_mod.time_to_max(c) for c in curves]),
        "time_to_95": ms([aucc_mod.time_to_fraction(c, 0.95) for c in curves]),
        "time_to_99": ms([aucc_mod.time_to_fraction(c, 0.99) for c in curves]),
        "seconds_per_step": ms([r["seconds_per_step"] for r in results]),
        "seconds_per_epoch": ms([r["seconds_per_epoch"] for r in results]),
        "trainable": results[0]["trainable"],
        "total": results[0]["total"],
    }


def run_experiment(configs, seeds=None, virtual_clock=False, out=None, log=None):
    """Train every variant on every seed and write curves, reports and a comparison table.

    Returns a dict of the written paths plus the in-memory reports.
    """
    if isinstance(configs, ExperimentConfig):
        configs = [configs]
    if seeds is not None:
        configs = [ExperimentConfig(**{**asdict(c), "seeds": list(seeds)}) for c in configs]
    out = Path(out or configs[0].output_dir)
    (out / "curves").mkdir(parents=True, exist_ok=True)
    (out / "reports").mkdir(parents=True, exist_ok=True)

    jobs = [(c, s, virtual_clock) for c in configs for s in c.seeds]
    n_workers = min(_workers(), len(jobs))
    if n_workers > 1:
        with ProcessPoolExecutor(n_workers) as pool:
            finished = list(pool.map(_run_job, jobs))
    else:
        finished = []
        for job in jobs:
            finished.append(_run_job(job))
            if log:
                log(f"finished {job[0].model} seed {job[1]}")

    by_model = {c.model: [] for c in configs}
    curve_paths = []
    for model, seed, result in finished:
        by_model[model].append(result)
        path = out / "curves" / f"{model}__seed{seed}.csv"
        aucc_mod.write_curves_csv(result["curve"], path)
        curve_paths.append(path)

    t_hat = configs[0].t_hat_seconds
    if t_hat is None:
        t_hat = max(r["curve"].times[-1] for rs in by_model.values() for r in rs)
    reports = aucc_mod.aggregate_seeds({m: [r["curve"] for r in rs] for m, rs in by_model.items()}, t_hat)
    report_paths = []
    for cfg in configs:
        reports[cfg.model].summary = summarize(cfg, by_model[cfg.model])
        path = out / "reports" / f"{cfg.model}.json"
        reports[cfg.model].save(path)
        report_paths.append(path)

    baseline = configs[0].family
    rows = compare(list(reports.values()), baseline)
    table_path = out / "comparison.csv"
    write_comparison_csv(rows, table_path)
    return {"curves": curve_paths, "reports": report_paths, "comparison": table_path,
            "aucc": reports, "rows": rows, "t_hat": t_hat}


# -- comparison ------------------------------------------------------------------------------------


def _baseline_for(report, baselines, name):
    layers = report.summary.get("layers")
    same = [b for b in baselines if b.summary.get("layers") == layers]
    if len(same) > 1:
        same = [b for b in same if b.model == name] or same
    if len(same) == 1:
        return same[0]
    if len(baselines) == 1:
        return baselines[0]
    return None


def compare(reports, baseline):
    """Comparison rows; the ratio divides time-to-max by the baseline's at equal total depth.

    Baseline rows are reports whose model or family equals ``baseline``.
    When several exist, each variant is matched with the one having the same
    number of layers, preferring an exact model-name match on ties.
    """
    baselines = [r for r in reports if baseline in (r.model, r.summary.get("family"))]
    if not baselines:
        raise ConfigError(f"baseline: no report named {baseline!r} among {[r.model for r in reports]}")
    rows = []
    for r in reports:
        s = r.summary
        if not s:
            raise ContractError(f"report {r.model!r}: no summary block")
        base = _baseline_for(r, baselines, baseline)
        ratio = float("nan")
        if base is r:
            ratio = 1.0
        elif base is not None:
            denom = base.summary["time_to_max"]["mean"]
            ratio = s["time_to_max"]["mean"] / denom if denom > 0 else float("nan")
        rows.append({
            "model": r.model,
            "layers": s["layers"],
            "frozen": s["frozen"],
            "pattern": s["pattern"],
            "max_metric": s["max_metric"]["mean"],
            "max_metric_std": s["max_metric"]["std"],
            "time_to_max": s["time_to_max"]["mean"],
            "time_to_max_std": s["time_to_max"]["std"],
            "ratio": ratio,
            "trainable": s["trainable"],
            "total": s["total"],
            "params": f"{s['trainable']} ({s['total']})",
            "seconds_per_epoch": s["seconds_per_epoch"]["mean"],
            "seconds_per_epoch_std": s["seconds_per_epoch"]["std"],
            "time_to_95": s["time_to_95"]["mean"],
            "time_to_95_std": s["time_to_95"]["std"],
            "time_to_99": s["time_to_99"]["mean"],
            "time_to_99_std": s["time_to_99"]["std"],
            "aucc_raw": r.raw_mean,
            "aucc_normalized": r.normalized,
        })
    return rows


def write_comparison_csv(rows, path_or_file):
    own = isinstance(path_or_file, (str, Path))
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        w = csv.DictWriter(fh, fieldnames=COMPARISON_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    finally:
        if own:
            fh.close()


_INT_COLUMNS = {"layers", "frozen", "trainable", "total"}
_STR_COLUMNS = {"model", "pattern", "params"}


def read_comparison_csv(path):
    with open(path, newline="") as fh:
        r = csv.DictReader(fh)
        if tuple(r.fieldnames or ()) != COMPARISON_COLUMNS:
            raise ContractError(f"{path}: unexpected columns {r.fieldnames}")
        rows = []
        for row in r:
            rows.append({
                k: v if k in _STR_COLUMNS else int(v) if k in _INT_COLUMNS else float(v)
                for k, v in row.items()
            })
    return rows


# -- command line ---------------------------------------------------------------------------------


def _expand(pattern):
    paths = sorted(glob.glob(pattern))
    if not paths:
        raise ContractError(f"no files match {pattern!r}")
    return paths


def _parse_seeds(text):
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"seeds: expected comma-separated integers, got {text!r}") from None


def cmd_run(args):
    configs = load_config(args.config)
    seeds = _parse_seeds(args.seeds) if args.seeds else None
    res = run_experiment(configs, seeds=seeds, virtual_clock=args.virtual_clock, out=args.out,
                         log=lambda m: print(m, file=sys.stderr))
    write_comparison_csv(res["rows"], sys.stdout)
    print(f"wrote {len(res['curves'])} curves, {len(res['reports'])} reports, {res['comparison']}", file=sys.stderr)
    return 0


def cmd_aucc(args):
    by_model = {}
    for path in _expand(args.curves):
        for c in aucc_mod.read_curves_csv(path, args.direction):
            by_model.setdefault(c.run_id, []).append(c)
    reports = aucc_mod.aggregate_seeds(by_model, args.t_hat)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        for r in reports.values():
            r.save(Path(args.out) / f"{r.model}.json")
    print(json.dumps([r.to_json() for r in reports.values()], indent=2, sort_keys=True))
    return 0


def cmd_compare(args):
    reports = [aucc_mod.AuccReport.load(p) for p in _expand(args.reports)]
    rows = compare(reports, args.baseline)
    if args.out:
        write_comparison_csv(rows, args.out)
    write_comparison_csv(rows, sys.stdout)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="reservoir-transformers", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train every variant of a config over seeds")
    r.add_argument("--config", required=True)
    r.add_argument("--seeds", help="comma-separated, overrides the config")
    r.add_argument("--virtual-clock", action="store_true", help="time = step count")
    r.add_argument("--out", help="output directory, overrides the config")
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("aucc", help="AUCC reports from curve CSVs")
    a.add_argument("--curves", required=True, help="glob of curve CSV files")
    a.add_argument("--t-hat", type=float, required=True, help="window end in seconds")
    a.add_argument("--direction", choices=aucc_mod.DIRECTIONS, default="higher_better")
    a.add_argument("--out", help="directory for per-model JSON reports")
    a.set_defaults(func=cmd_aucc)

    c = sub.add_parser("compare", help="comparison table from AUCC reports")
    c.add_argument("--reports", required=True, help="glob of report JSON files")
    c.add_argument("--baseline", required=True, help="baseline model or family name")
    c.add_argument("--out", help="also write the table to this CSV path")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    except (ReservoirError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
