"""Convergence curves and the area under them.

A curve is a list of ``(wall_clock_seconds, metric)`` checkpoints for one
run. Its AUCC is the trapezoid integral of the metric from the first
checkpoint up to a window end ``t_hat``; past the last checkpoint the final
value is held, before ``t_hat`` the curve is cut with linear interpolation.
Raw scores of several models are normalised by dividing by the largest.
"""

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError

DIRECTIONS = ("higher_better", "lower_better")
CURVE_HEADER = ("run_id", "seed", "wall_clock_s", "metric")


@dataclass(frozen=True)
class ConvergenceCurve:
    run_id: str
    seed: int
    times: tuple
    values: tuple
    direction: str = "higher_better"

    def __post_init__(self):
        times = tuple(float(t) for t in self.times)
        values = tuple(float(v) for v in self.values)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        if self.direction not in DIRECTIONS:
            raise ContractError(f"direction: expected one of {DIRECTIONS}, got {self.direction!r}")
        if len(times) == 0:
            raise ContractError(f"curve {self.run_id!r}: needs at least one sample")
        if len(times) != len(values):
            raise ContractError(f"curve {self.run_id!r}: {len(times)} times but {len(values)} values")
        if not all(math.isfinite(x) for x in times + values):
            raise ContractError(f"curve {self.run_id!r}: non-finite sample")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ContractError(f"curve {self.run_id!r}: timestamps must be strictly increasing")

    @classmethod
    def from_samples(cls, run_id, seed, samples, direction="higher_better"):
        samples = list(samples)
        return cls(run_id, seed, [s[0] for s in samples], [s[1] for s in samples], direction)

    @property
    def samples(self):
        return list(zip(self.times, self.values))

    def __len__(self):
        return len(self.times)

    def value_at(self, t):
        """Linear interpolation inside the samples, last value held after them."""
        if t < self.times[0]:
            raise ContractError(f"curve {self.run_id!r}: t={t} precedes the first sample")
        return float(np.interp(t, self.times, self.values))


def compute_aucc(curve, t_hat):
    """Raw AUCC of ``curve`` over ``[first sample time, t_hat]`` (metric x seconds)."""
    t_hat = float(t_hat)
    if not t_hat > 0:
        raise ContractError(f"t_hat: must be > 0, got {t_hat}")
    t0 = curve.times[0]
    if t_hat <= t0:
        raise ContractError(f"t_hat: window end {t_hat} is not after the first sample at {t0}")
    t = np.asarray(curve.times)
    v = np.asarray(curve.values)
    inside = t < t_hat
    ts = np.append(t[inside], t_hat)
    vs = np.append(v[inside], curve.value_at(t_hat))
    return float(np.sum(0.5 * (vs[1:] + vs[:-1]) * np.diff(ts)))


def normalize(raw):
    """Divide every raw score by the largest one, giving values in [0, 1]."""
    if not raw:
        raise ContractError("normalize: no scores")
    if any(v < 0 or not math.isfinite(v) for v in raw.values()):
        raise ContractError(f"normalize: scores must be finite and >= 0, got {raw}")
    top = max(raw.values())
    if top == 0:
        raise ContractError("normalize: every score is zero")
    return {k: v / top for k, v in raw.items()}


@dataclass
class AuccReport:
    model: str
    t_hat_s: float
    per_seed: dict
    raw_mean: float
    raw_std: float
    normalized: float = None
    direction: str = "higher_better"
    summary: dict = field(default_factory=dict)

    def to_json(self):
        return {
            "model": self.model,
            "t_hat_s": self.t_hat_s,
            "per_seed": {str(k): v for k, v in self.per_seed.items()},
            "raw_mean": self.raw_mean,
            "raw_std": self.raw_std,
            "normalized": self.normalized,
            "direction": self.direction,
            "summary": self.summary,
        }

    @classmethod
    def from_json(cls, obj):
        missing = [k for k in ("model", "t_hat_s", "per_seed", "raw_mean", "raw_std", "normalized") if k not in obj]
        if missing:
            raise ContractError(f"aucc report: missing fields {missing}")
        return cls(
            model=obj["model"],
            t_hat_s=float(obj["t_hat_s"]),
            per_seed={int(k): float(v) for k, v in obj["per_seed"].items()},
            raw_mean=float(obj["raw_mean"]),
            raw_std=float(obj["raw_std"]),
            normalized=None if obj["normalized"] is None else float(obj["normalized"]),
            direction=obj.get("direction", "higher_better"),
            summary=obj.get("summary", {}),
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_json(json.loads(Path(path).read_text()))


def mean_std(values):
    """Mean and sample standard deviation (ddof=1; 0 for a single value)."""
    a = np.asarray(values, dtype=np.float64)
    if a.size == 0:
        raise ContractError("mean_std: no values")
    return float(a.mean()), float(a.std(ddof=1)) if a.size > 1 else 0.0


def aggregate_seeds(curves_by_model, t_hat):
    """One report per model; normalisation is applied to the seed means."""
    if not curves_by_model:
        raise ContractError("aggregate_seeds: no models")
    reports = {}
    for model, curves in curves_by_model.items():
        if not curves:
            raise ContractError(f"aggregate_seeds: model {model!r} has no curves")
        directions = {c.direction for c in curves}
        if len(directions) != 1:
            raise ContractError(f"aggregate_seeds: model {model!r} mixes directions {sorted(directions)}")
        per_seed = {c.seed: compute_aucc(c, t_hat) for c in curves}
        if len(per_seed) != len(curves):
            raise ContractError(f"aggregate_seeds: model {model!r} has duplicate seeds")
        mean, std = mean_std(list(per_seed.values()))
        reports[model] = AuccReport(model, float(t_hat), per_seed, mean, std, direction=directions.pop())
    for model, value in normalize({m: r.raw_mean for m, r in reports.items()}).items():
        reports[model].normalized = value
    return reports


# -- curve summaries ---------------------------------------------------------------------------


def best_so_far(curve):
    """Running best of the metric, respecting its direction."""
    acc = np.maximum.accumulate if curve.direction == "higher_better" else np.minimum.accumulate
    return acc(np.asarray(curve.values))


def best_value(curve):
    return float(best_so_far(curve)[-1])


def time_to_fraction(curve, fraction):
    """First time the best-so-far envelope reaches ``fraction`` of its final best.

    For lower-better metrics the target is ``best / fraction``. ``fraction=1``
    is time-to-max.
    """
    if not 0.0 < fraction <= 1.0:
        raise ContractError(f"fraction: need 0 < fraction <= 1, got {fraction}")
    env = best_so_far(curve)
    best = env[-1]
    if curve.direction == "higher_better":
        hit = env >= fraction * best if best >= 0 else env >= best / fraction
    else:
        hit = env <= best / fraction if best >= 0 else env <= fraction * best
    return float(np.asarray(curve.times)[np.argmax(hit)])


def time_to_max(curve):
    return time_to_fraction(curve, 1.0)


# -- files ----------------------------------------------------------------------------------------


def write_curves_csv(curves, path):
    if isinstance(curves, ConvergenceCurve):
        curves = [curves]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_HEADER)
        for c in curves:
            for t, v in c.samples:
                w.writerow([c.run_id, c.seed, repr(t), repr(v)])


def read_curves_csv(path, direction="higher_better"):
    """All curves in a file, one per ``(run_id, seed)`` in order of appearance."""
    rows = {}
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if tuple(header or ()) != CURVE_HEADER:
            raise ContractError(f"{path}: expected header {','.join(CURVE_HEADER)}, got {header}")
        for lineno, row in enumerate(r, start=2):
            if len(row) != 4:
                raise ContractError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            try:
                key = (row[0], int(row[1]))
                rows.setdefault(key, []).append((float(row[2]), float(row[3])))
            except ValueError as exc:
                raise ContractError(f"{path}:{lineno}: {exc}") from None
    return [ConvergenceCurve.from_samples(k[0], k[1], s, direction) for k, s in rows.items()]
