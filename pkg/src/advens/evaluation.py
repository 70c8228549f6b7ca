"""Clean and robust accuracy, black-box transfer sets, per-member evaluation,
and post-processing of evaluation time series.
"""

from __future__ import annotations

import io
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .attacks import AttackConfig, attack, robust_correct
from .autodiff import LossKind
from .checkpoint import Checkpoint, decode, encode
from .data import Dataset
from .models import LOGIT, PROBABILITY, Ensemble, ModelParams, ensemble_forward

log = logging.getLogger(__name__)

SMOOTH_WINDOW = 50
OUTLIER_RULE = "replace x_i by its centred rolling median m_i iff |x_i - m_i| > mean(d) + 3 * std(d), d = |x - m|"


@dataclass
class EvalSeries:
    steps: np.ndarray
    values: np.ndarray
    metric: str = ""
    model_class: str = ""
    seed: int | None = None

    def __post_init__(self):
        self.steps = np.asarray(self.steps, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.steps.shape != self.values.shape or self.steps.ndim != 1:
            raise ValueError("steps and values must be 1-D arrays of equal length")
        if np.any(np.diff(self.steps) <= 0):
            raise ValueError("series steps must be strictly increasing")

    def __len__(self):
        return len(self.steps)

    def with_values(self, values) -> "EvalSeries":
        return replace(self, values=np.asarray(values, dtype=np.float64))


# ---------------------------------------------------------------------------
# accuracies


def accuracy(target: Ensemble, dataset: Dataset) -> float:
    """Fraction of argmax predictions (lowest index on ties) equal to the label."""
    if len(dataset) == 0:
        raise ValueError("empty evaluation set")
    pred = np.argmax(ensemble_forward(target, dataset.inputs).data, axis=-1)
    return float(np.mean(pred == dataset.labels))


def _with_clamp(cfg: AttackConfig, dataset: Dataset) -> AttackConfig:
    if cfg.domain_clamp is None and dataset.domain_clamp is not None:
        return replace(cfg, domain_clamp=dataset.domain_clamp)
    return cfg


def robust_accuracy(target: Ensemble, dataset: Dataset, cfg: AttackConfig, seed: int = 0) -> float:
    if len(dataset) == 0:
        raise ValueError("empty evaluation set")
    cfg = _with_clamp(cfg, dataset)
    return float(robust_correct(target, dataset.inputs, dataset.labels, cfg, seed).mean())


def attack_curve(target: Ensemble, dataset: Dataset, cfg: AttackConfig, steps_list: Sequence[int],
                 seed: int = 0, metric: str | None = None) -> EvalSeries:
    """Robust accuracy per attack step count.

    Every step count reuses the same per-example seeds, hence the same
    initial noise.
    """
    steps_list = [int(s) for s in steps_list]
    if not steps_list or any(b <= a for a, b in zip(steps_list, steps_list[1:])):
        raise ValueError("steps_list must be non-empty and increasing")
    values = [robust_accuracy(target, dataset, cfg.with_steps(n), seed) for n in steps_list]
    return EvalSeries(steps_list, values, metric or f"{cfg.rule}-curve")


def running_min(values) -> np.ndarray:
    return np.minimum.accumulate(np.asarray(values, dtype=np.float64))


# ---------------------------------------------------------------------------
# black-box transfer set


@dataclass
class BlackboxSet:
    inputs: np.ndarray
    labels: np.ndarray
    indices: np.ndarray  # positions in the source dataset
    fooled: np.ndarray  # (n, members) bool
    sources: list  # ModelParams of the source members
    cfg: AttackConfig
    coverage: float
    total: int
    steps_used: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self):
        return len(self.labels)

    def descriptors(self) -> list[dict]:
        return [{"spec": m.spec.to_dict(), "seed": int(m.seed)} for m in self.sources]


def fooled_matrix(members: Sequence[ModelParams], x, y) -> np.ndarray:
    if len(x) == 0:
        return np.zeros((0, len(members)), dtype=bool)
    cols = [np.argmax(ensemble_forward(Ensemble([m]), x).data, axis=-1) != y for m in members]
    return np.stack(cols, axis=1)


def blackbox_generate(source_members: Sequence[ModelParams], dataset: Dataset, cfg: AttackConfig,
                      max_steps: int | None = None, seed: int = 0) -> BlackboxSet:
    """Attack the logit-mean source ensemble and keep examples that fool every member.

    Examples that are not yet fooling all members are re-attacked from
    scratch with doubled step counts until ``max_steps``.
    """
    members = list(source_members)
    if len(members) < 2:
        raise ValueError("blackbox_generate needs at least two source members")
    max_steps = cfg.steps if max_steps is None else max_steps
    if max_steps < cfg.steps:
        raise ValueError("max_steps must be >= cfg.steps")
    cfg = _with_clamp(cfg, dataset)
    source = Ensemble(members, LOGIT)
    n = len(dataset)
    x_adv = dataset.inputs.copy()
    done = np.zeros(n, dtype=bool)
    steps_used = np.zeros(n, dtype=np.int64)
    pending = np.arange(n)
    steps = cfg.steps
    while pending.size:
        res = attack(source, dataset.inputs[pending], dataset.labels[pending], cfg.with_steps(steps),
                     seed, pending)
        ok = fooled_matrix(members, res.x_adv, dataset.labels[pending]).all(axis=1)
        x_adv[pending[ok]] = res.x_adv[ok]
        steps_used[pending[ok]] = steps
        done[pending[ok]] = True
        pending = pending[~ok]
        if 2 * steps > max_steps:
            break
        steps *= 2
    keep = np.nonzero(done)[0]
    coverage = keep.size / n if n else 0.0
    if keep.size == 0:
        log.warning("black-box generation retained no examples")
    return BlackboxSet(x_adv[keep], dataset.labels[keep].copy(), keep,
                       np.ones((keep.size, len(members)), dtype=bool), members, cfg, coverage, n,
                       steps_used[keep])


def verify_blackbox(bb: BlackboxSet) -> np.ndarray:
    """Recompute which sources each retained example fools; raise if any is not fooled by all."""
    fooled = fooled_matrix(bb.sources, bb.inputs, bb.labels)
    if fooled.size and not fooled.all():
        bad = np.nonzero(~fooled.all(axis=1))[0]
        raise ValueError(f"black-box set invariant violated for {bad.size} example(s), first {int(bad[0])}")
    return fooled


def blackbox_eval(target: Ensemble, bb: BlackboxSet) -> float:
    if len(bb) == 0:
        raise ValueError("empty evaluation set")
    pred = np.argmax(ensemble_forward(target, bb.inputs).data, axis=-1)
    return float(np.mean(pred == bb.labels))


def save_blackbox(bb: BlackboxSet, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg = {k: (v.value if isinstance(v, LossKind) else v) for k, v in bb.cfg.__dict__.items()}
    meta = {"coverage": bb.coverage, "total": bb.total, "cfg": cfg}
    src = np.frombuffer(encode(Checkpoint(Ensemble(bb.sources, LOGIT))), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, inputs=bb.inputs, labels=bb.labels, indices=bb.indices, steps_used=bb.steps_used,
             sources=src, meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8))
    path.write_bytes(buf.getvalue())
    return path


def load_blackbox(path, verify: bool = True) -> BlackboxSet:
    with np.load(Path(path)) as z:
        meta = json.loads(z["meta"].tobytes().decode())
        sources = decode(z["sources"].tobytes()).ensemble.members
        cfg_d = dict(meta["cfg"])
        if cfg_d.get("domain_clamp") is not None:
            cfg_d["domain_clamp"] = tuple(cfg_d["domain_clamp"])
        bb = BlackboxSet(z["inputs"], z["labels"], z["indices"], np.zeros(0), sources,
                         AttackConfig(**cfg_d), meta["coverage"], meta["total"], z["steps_used"])
    bb.fooled = verify_blackbox(bb) if verify else np.ones((len(bb), len(sources)), dtype=bool)
    return bb


# ---------------------------------------------------------------------------
# per-member evaluation


def submodel_eval(ensemble: Ensemble, dataset: Dataset, cfg: AttackConfig, seed: int = 0) -> list[dict]:
    """Clean and robust accuracy of every member attacked alone, plus both ensemble modes."""
    if cfg.loss_kind is not LossKind.MARGIN:
        raise ValueError("submodel_eval uses the margin attack (cfg.loss_kind = margin)")
    rows = []
    for i, m in enumerate(ensemble.members):
        single = Ensemble([m], PROBABILITY)
        rows.append({"row": f"member-{i}", "clean": accuracy(single, dataset),
                     "robust": robust_accuracy(single, dataset, cfg, seed)})
    for name, mode in (("ensemble", PROBABILITY), ("ensemble-logit", LOGIT)):
        target = ensemble.with_mode(mode)
        rows.append({"row": name, "clean": accuracy(target, dataset),
                     "robust": robust_accuracy(target, dataset, cfg, seed)})
    return rows


# ---------------------------------------------------------------------------
# time-series post-processing


def rolling_median(values, window: int = SMOOTH_WINDOW) -> np.ndarray:
    """Centred rolling median; near the ends the window shrinks symmetrically.

    Interior points use indices [i - w//2, i + w - w//2 - 1]; a point closer
    than that to an end uses [i - r, i + r] with r its distance to that end.
    """
    v = np.asarray(values, dtype=np.float64)
    n = len(v)
    left, right = window // 2, window - window // 2 - 1
    out = np.empty(n)
    for i in range(n):
        lo_room, hi_room = i, n - 1 - i
        if lo_room >= left and hi_room >= right:
            lo, hi = i - left, i + right
        else:
            r = min(lo_room, hi_room, left)
            lo, hi = i - r, i + r
        out[i] = np.median(v[lo:hi + 1])
    return out


def outlier_mask(values, window: int = SMOOTH_WINDOW) -> tuple[np.ndarray, np.ndarray]:
    v = np.asarray(values, dtype=np.float64)
    med = rolling_median(v, window)
    d = np.abs(v - med)
    return d > d.mean() + 3.0 * d.std(), med


def smooth_outliers(series: EvalSeries, window: int = SMOOTH_WINDOW) -> EvalSeries:
    """Replace points far from the rolling median by the median (rule in OUTLIER_RULE)."""
    if len(series) < 2:
        raise ValueError("smooth_outliers needs at least two points")
    mask, med = outlier_mask(series.values, window)
    return series.with_values(np.where(mask, med, series.values))


def interpolate(series: EvalSeries, grid_size: int = 1000, span: tuple | None = None) -> EvalSeries:
    """Linear interpolation onto ``grid_size`` evenly spaced steps over ``span``."""
    if len(series) < 2:
        raise ValueError("interpolate needs at least two points")
    lo, hi = span if span is not None else (series.steps[0], series.steps[-1])
    if lo < series.steps[0] or hi > series.steps[-1]:
        raise ValueError(f"span {lo}..{hi} exceeds series range {series.steps[0]}..{series.steps[-1]}")
    grid = np.linspace(lo, hi, grid_size)
    if len(series) == grid_size and np.array_equal(series.steps, grid):
        return replace(series)
    return replace(series, steps=grid, values=np.interp(grid, series.steps, series.values))


def overlap(series_list: Sequence[EvalSeries]) -> tuple[float, float]:
    lo = max(s.steps[0] for s in series_list)
    hi = min(s.steps[-1] for s in series_list)
    if lo >= hi:
        ranges = ", ".join(f"[{s.steps[0]:g}, {s.steps[-1]:g}]" for s in series_list)
        raise ValueError(f"series ranges do not overlap: {ranges}")
    return lo, hi


def aggregate_seeds(series_list: Sequence[EvalSeries]) -> EvalSeries:
    """Pointwise mean of series that share metric and step grid."""
    if not series_list:
        raise ValueError("aggregate_seeds needs at least one series")
    first = series_list[0]
    for s in series_list[1:]:
        if s.metric != first.metric:
            raise ValueError(f"metric mismatch: {first.metric!r} vs {s.metric!r}")
        if not np.array_equal(s.steps, first.steps):
            raise ValueError("series are not on a common grid; interpolate them first")
    values = np.mean([s.values for s in series_list], axis=0)
    return replace(first, values=values, seed=None)


def align_and_aggregate(series_list: Sequence[EvalSeries], grid_size: int = 1000) -> EvalSeries:
    span = overlap(series_list)
    return aggregate_seeds([interpolate(s, grid_size, span) for s in series_list])


# ---------------------------------------------------------------------------
# summaries


def history_series(history: Sequence[dict], metric: str, model_class: str = "", seed=None) -> EvalSeries:
    steps = [h["step"] for h in history if h.get(metric) is not None]
    values = [h[metric] for h in history if h.get(metric) is not None]
    return EvalSeries(steps, values, metric, model_class, seed)


def _smoothed(series: EvalSeries) -> EvalSeries:
    return smooth_outliers(series) if len(series) >= 2 else series


def last_k_average(series: EvalSeries, k: int = 10) -> float:
    """Mean of the final ``k`` smoothed points (all points if fewer exist)."""
    return float(np.mean(_smoothed(series).values[-k:]))


def best_snapshot(histories: dict, select: str) -> int:
    """Index of the snapshot maximising the smoothed selection metric (earliest on ties)."""
    return int(np.argmax(_smoothed(histories[select]).values))


def summarize(runs: dict, metrics: Sequence[str], select: str, k: int = 10) -> dict:
    """Tables over ``runs[model_class][seed] -> list of snapshot dicts``.

    ``last10[class][metric]`` averages, over seeds, the mean of the final
    ``k`` smoothed points; ``best[class][metric]`` averages, over seeds, the
    smoothed metric read at the snapshot maximising ``select``.
    """
    last, best = {}, {}
    for cls, by_seed in runs.items():
        last[cls], best[cls] = {}, {}
        per_seed_last = {m: [] for m in metrics}
        per_seed_best = {m: [] for m in metrics}
        for seed, history in by_seed.items():
            series = {m: history_series(history, m, cls, seed) for m in metrics}
            smoothed = {m: _smoothed(s) for m, s in series.items() if len(s)}
            if select in smoothed:
                pick_step = smoothed[select].steps[int(np.argmax(smoothed[select].values))]
            else:
                pick_step = None
            for m, s in smoothed.items():
                per_seed_last[m].append(float(np.mean(s.values[-k:])))
                if pick_step is not None:
                    hit = np.nonzero(s.steps == pick_step)[0]
                    if hit.size:
                        per_seed_best[m].append(float(s.values[hit[0]]))
        for m in metrics:
            last[cls][m] = float(np.mean(per_seed_last[m])) if per_seed_last[m] else None
            best[cls][m] = float(np.mean(per_seed_best[m])) if per_seed_best[m] else None
    return {"last10": last, "best": best, "select": select, "outlier_rule": OUTLIER_RULE}


def fmt(v) -> str:
    """Fixed 17-significant-digit formatting for reproducible text output."""
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return format(float(v), ".17g")


def series_rows(series: EvalSeries, smoothed: EvalSeries | None = None) -> Iterable[list[str]]:
    sm = smoothed if smoothed is not None else _smoothed(series)
    for st, v, s in zip(series.steps, series.values, sm.values):
        yield [fmt(int(st) if float(st).is_integer() else st), series.model_class,
               "" if series.seed is None else str(series.seed), series.metric, fmt(v), fmt(s)]


SERIES_HEADER = ["step", "model_class", "seed", "metric", "value", "smoothed_value"]
