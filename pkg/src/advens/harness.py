"""Run configuration, the experiment grid, and report generation.

A run directory looks like::

    <root>/config.json
    <root>/manifest.json
    <root>/blackbox/set.npz
    <root>/runs/<class>/<seed>/checkpoints/step-000000.advn ...
    <root>/runs/<class>/<seed>/series.csv
    <root>/runs/<class>/<seed>/meta.json
    <root>/report/{table_last10,table_best,table_500,curves,training_curves}.csv
    <root>/report/{summary,strongest}.json

Every file is a pure function of the configuration, so rerunning with the
same config reproduces it byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import attacks, evaluation as ev
from .attacks import AttackConfig
from .autodiff import LossKind
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import Dataset, gen_blobs, gen_two_moons, load_cifar10_binary, split
from .models import PROBABILITY, Ensemble, ModelSpec, match_width, mlp, param_count, small_cnn
from .training import TrainConfig, build_separate_ensemble, make_ensemble, train_adversarial, train_standard

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

OUTPUT_ENV = "ADVENS_OUT"

DEFAULTS: dict = {
    # data
    "dataset": "blobs10",  # blobs10 | two-moons | cifar10
    "data_n": 3000,
    "data_seed": 123,
    "data_dim": 8,
    "data_spread": 0.3,
    "data_fine_dims": 3,
    "data_fine_scale": 0.05,
    "data_modes": 1,
    "data_noise": 0.1,
    "data_path": "",
    "test_fraction": 1 / 3,
    "split_seed": 5,
    # models
    "arch": "mlp",  # mlp | small-cnn
    "hidden": [5, 5],
    "cnn_input_shape": [1, 2, 4],
    "channels": [4],
    "kernels": [3],
    "pools": [1],
    "classes": ["baseline", "ensemble-2", "single-adv", "double-adv", "ensemble-2-adv",
                "separate-ensemble-2-adv", "ensemble-4-adv"],
    "seeds": [0, 1, 2],
    # training
    "steps": 3000,
    "batch_size": 64,
    "lr": 0.1,
    "momentum": 0.9,
    "boundaries": [1800, 2550],
    "decay": 0.2,
    "rho": 1.0,
    "delta": 0.1,
    "train_attack_rule": "sign",
    "train_attack_steps": 7,
    "eval_every": 300,
    # evaluation
    "metrics": ["clean", "ifgsm-5", "pgd-5", "pgd-20", "blackbox"],
    "select_metric": "ifgsm-5",
    "eval_size": 0,  # 0 = whole test split
    "eval_seed": 9,
    "final_metrics": ["clean", "pgd-20", "pgd-500"],
    "curve_steps": [1, 2, 5, 10, 20, 50, 100, 200, 500],
    "curve_size": 300,
    "grid_size": 1000,
    "blackbox_steps": 20,
    "blackbox_max_steps": 160,
    "blackbox_train_steps": 1500,
    "blackbox_hidden": [16, 16],
    "strongest_start": 20,
    "strongest_max": 512,
    "strongest_tol": 0.001,
    "strongest_check": True,
    # execution
    "workers": 1,
    "output": "",
}


class UsageError(ValueError):
    """Bad command line or configuration."""


# ---------------------------------------------------------------------------
# configuration


def _check_type(key: str, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = isinstance(value, str)
    if not ok:
        raise UsageError(f"config key {key!r}: expected {type(default).__name__}, got {value!r}")
    return value


def make_config(values: dict | None = None) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS))
    for key, value in (values or {}).items():
        if key not in DEFAULTS:
            raise UsageError(f"unknown config key {key!r}")
        cfg[key] = _check_type(key, value, DEFAULTS[key])
    if isinstance(cfg["seeds"], int):
        cfg["seeds"] = list(range(cfg["seeds"]))
    for name in cfg["classes"]:
        parse_class(name)
    for name in cfg["metrics"] + cfg["final_metrics"]:
        if name != "blackbox":
            metric_attack(name, cfg["delta"])
    return cfg


def load_config(path=None, overrides: dict | None = None) -> dict:
    values = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            values = tomllib.loads(path.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise UsageError(f"{path}: malformed config: {exc}") from None
        for key, value in values.items():
            if isinstance(value, dict):
                raise UsageError(f"{path}: config is flat; table [{key}] not allowed")
    values.update(overrides or {})
    if isinstance(values.get("seeds"), int):
        values["seeds"] = list(range(values["seeds"]))
    return make_config(values)


def parse_override(text: str) -> tuple[str, object]:
    """``key=value`` with the value read as a TOML literal (bare words are strings)."""
    if "=" not in text:
        raise UsageError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return key, value


def config_digest(cfg: dict) -> str:
    body = {k: v for k, v in cfg.items() if k not in ("workers", "output")}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]


def output_root(cfg: dict) -> Path:
    return Path(cfg["output"] or os.environ.get(OUTPUT_ENV, "runs"))


# ---------------------------------------------------------------------------
# model classes

_CLASS_RE = re.compile(r"^(baseline|single-adv|double-adv|ensemble-(\d+)(-adv)?|separate-ensemble-(\d+)-adv)$")


@dataclass(frozen=True)
class ModelClass:
    name: str
    kind: str  # single | double | ensemble | separate
    k: int
    adversarial: bool


def parse_class(name: str) -> ModelClass:
    m = _CLASS_RE.match(name)
    if not m:
        raise UsageError(f"unknown model class {name!r}")
    if name == "baseline":
        return ModelClass(name, "single", 1, False)
    if name == "single-adv":
        return ModelClass(name, "single", 1, True)
    if name == "double-adv":
        return ModelClass(name, "double", 2, True)
    if m.group(4):
        return ModelClass(name, "separate", int(m.group(4)), True)
    k = int(m.group(2))
    if k < 1:
        raise UsageError(f"model class {name!r}: k must be >= 1")
    return ModelClass(name, "ensemble", k, bool(m.group(3)))


def base_spec(cfg: dict, input_dim: int, classes: int) -> ModelSpec:
    if cfg["arch"] == "mlp":
        return mlp(input_dim, cfg["hidden"], classes)
    if cfg["arch"] == "small-cnn":
        return cnn_spec(cfg, input_dim, classes)
    raise UsageError(f"config key 'arch': unknown architecture {cfg['arch']!r}")


def cnn_spec(cfg: dict, input_dim: int, classes: int, hidden=None) -> ModelSpec:
    shape = tuple(cfg["cnn_input_shape"])
    if int(np.prod(shape)) != input_dim:
        raise UsageError(f"cnn_input_shape {shape} does not hold {input_dim} features")
    hidden = cfg["hidden"] if hidden is None else hidden
    return small_cnn(shape, cfg["channels"], cfg["kernels"], cfg["pools"], hidden, classes)


def class_spec(mc: ModelClass, base: ModelSpec) -> ModelSpec:
    """Member architecture; double-adv matches the parameter count of k = 2 members."""
    if mc.kind == "double":
        return match_width(base, mc.k * param_count(base))
    return base


# ---------------------------------------------------------------------------
# data and attacks


def build_data(cfg: dict) -> tuple[Dataset, Dataset]:
    name = cfg["dataset"]
    if name == "blobs10":
        ds = gen_blobs(cfg["data_n"], 10, cfg["data_dim"], cfg["data_spread"], cfg["data_seed"],
                       fine_dims=cfg["data_fine_dims"], fine_scale=cfg["data_fine_scale"],
                       modes=cfg["data_modes"])
    elif name == "two-moons":
        ds = gen_two_moons(cfg["data_n"], cfg["data_noise"], cfg["data_seed"])
    elif name == "cifar10":
        if not cfg["data_path"]:
            raise UsageError("dataset 'cifar10' needs config key 'data_path'")
        ds = load_cifar10_binary(cfg["data_path"])
        ds = replace(ds, inputs=ds.inputs.reshape(len(ds), -1))
    else:
        raise UsageError(f"config key 'dataset': unknown dataset {name!r}")
    return split(ds, cfg["test_fraction"], cfg["split_seed"])


def eval_subset(test: Dataset, size: int) -> Dataset:
    return test if size <= 0 or size >= len(test) else test.subset(np.arange(size))


_METRIC_RE = re.compile(r"^(ifgsm|pgd|margin)-(\d+)$")


def metric_attack(name: str, delta: float, clamp=None) -> AttackConfig | None:
    """Attack behind a metric name: ifgsm-N (sign rule), pgd-N (Adam), margin-N (Adam on margin)."""
    if name == "clean":
        return None
    m = _METRIC_RE.match(name)
    if not m:
        raise UsageError(f"unknown metric {name!r}")
    rule, steps = m.group(1), int(m.group(2))
    if rule == "ifgsm":
        return attacks.ifgsm(delta, steps, domain_clamp=clamp)
    if rule == "pgd":
        return attacks.pgd(delta, steps, domain_clamp=clamp)
    return attacks.pgd(delta, steps, loss_kind=LossKind.MARGIN, domain_clamp=clamp)


def train_config(cfg: dict, mc: ModelClass, seed: int) -> TrainConfig:
    train_attack = None
    if mc.adversarial:
        train_attack = AttackConfig(delta=cfg["delta"], steps=cfg["train_attack_steps"],
                                    rule=cfg["train_attack_rule"])
    return TrainConfig(steps=cfg["steps"], batch_size=cfg["batch_size"], lr=cfg["lr"],
                       momentum=cfg["momentum"], boundaries=tuple(cfg["boundaries"]),
                       decay=cfg["decay"], rho=cfg["rho"], train_attack=train_attack,
                       eval_every=cfg["eval_every"], seed=seed)


def make_evaluator(cfg: dict, test: Dataset, bb: ev.BlackboxSet | None, metrics=None):
    metrics = list(cfg["metrics"] if metrics is None else metrics)
    subset = eval_subset(test, cfg["eval_size"])

    def evaluate(ensemble: Ensemble, step: int) -> dict:
        out = {}
        for name in metrics:
            if name == "clean":
                out[name] = ev.accuracy(ensemble, subset)
            elif name == "blackbox":
                out[name] = ev.blackbox_eval(ensemble, bb) if bb is not None and len(bb) else None
            else:
                out[name] = ev.robust_accuracy(ensemble, subset, metric_attack(name, cfg["delta"]),
                                               cfg["eval_seed"])
        return out

    return evaluate


# ---------------------------------------------------------------------------
# black-box set


def blackbox_sources(cfg: dict, train: Dataset) -> list:
    """Two standard-trained source models: the base mlp and a small cnn."""
    dim, classes = train.inputs.shape[1], train.classes
    steps = cfg["blackbox_train_steps"]
    tc = TrainConfig(steps=steps, batch_size=cfg["batch_size"], lr=cfg["lr"], momentum=cfg["momentum"],
                     boundaries=(int(0.6 * steps) + 1, int(0.85 * steps) + 2), decay=cfg["decay"],
                     eval_every=max(steps, 1), seed=0)
    hid = cfg["blackbox_hidden"]
    specs = [mlp(dim, hid, classes), cnn_spec(cfg, dim, classes, hid)]
    members = []
    for i, spec in enumerate(specs):
        state = train_standard(make_ensemble(spec, 1, 1000 + i), train, replace(tc, seed=1000 + i))
        members.extend(state.ensemble.members)
    return members


def ensure_blackbox(cfg: dict, root: Path, train: Dataset, test: Dataset) -> ev.BlackboxSet | None:
    if "blackbox" not in cfg["metrics"]:
        return None
    path = root / "blackbox" / "set.npz"
    if path.exists():
        return ev.load_blackbox(path)
    sources = blackbox_sources(cfg, train)
    gen = attacks.pgd(cfg["delta"], cfg["blackbox_steps"], domain_clamp=test.domain_clamp)
    bb = ev.blackbox_generate(sources, eval_subset(test, cfg["eval_size"]), gen,
                              max(cfg["blackbox_max_steps"], cfg["blackbox_steps"]), cfg["eval_seed"])
    ev.save_blackbox(bb, path)
    write_json(root / "blackbox" / "meta.json", {"coverage": bb.coverage, "retained": len(bb),
                                                "total": bb.total, "sources": bb.descriptors()})
    return bb


# ---------------------------------------------------------------------------
# output helpers


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def cell_dir(root: Path, model_class: str, seed: int) -> Path:
    return root / "runs" / model_class / str(seed)


def ckpt_path(cdir: Path, step: int) -> Path:
    return cdir / "checkpoints" / f"step-{step:06d}.advn"


def write_series(path: Path, history: list, metrics, model_class: str, seed: int) -> None:
    rows = []
    for m in metrics:
        s = ev.history_series(history, m, model_class, seed)
        if len(s):
            rows.extend(ev.series_rows(s))
    write_csv(path, ev.SERIES_HEADER, rows)


def read_series(path: Path) -> list[dict]:
    """Back to a snapshot history: one dict per step with every metric present."""
    by_step: dict[int, dict] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            step = int(float(row["step"]))
            by_step.setdefault(step, {"step": step})[row["metric"]] = float(row["value"])
    return [by_step[s] for s in sorted(by_step)]


def _final_eval(cfg: dict, ensemble: Ensemble, test: Dataset) -> tuple[dict, list]:
    subset = eval_subset(test, cfg["eval_size"])
    finals = {}
    for name in cfg["final_metrics"]:
        acfg = metric_attack(name, cfg["delta"], test.domain_clamp)
        finals[name] = (ev.accuracy(ensemble, subset) if acfg is None
                        else ev.robust_accuracy(ensemble, subset, acfg, cfg["eval_seed"]))
    curve = []
    if cfg["curve_steps"]:
        cset = eval_subset(test, cfg["curve_size"])
        s = ev.attack_curve(ensemble, cset, attacks.pgd(cfg["delta"], 1, domain_clamp=test.domain_clamp),
                            cfg["curve_steps"], cfg["eval_seed"])
        curve = [[int(a), float(v)] for a, v in zip(s.steps, s.values)]
    return finals, curve


# ---------------------------------------------------------------------------
# one grid cell


def run_cell(cfg: dict, model_class: str, seed: int, root=None) -> dict:
    """Train (or assemble) and evaluate one (model class, seed); returns its meta record."""
    root = Path(root) if root is not None else output_root(cfg)
    mc = parse_class(model_class)
    train, test = build_data(cfg)
    bb = ensure_blackbox(cfg, root, train, test)
    base = base_spec(cfg, train.inputs.shape[1], train.classes)
    cdir = cell_dir(root, model_class, seed)
    evaluator = make_evaluator(cfg, test, bb)

    if mc.kind == "separate":
        history, ensemble, extra = _assemble_separate(cfg, root, mc, seed, evaluator)
        flagged, floor_hits, step = False, 0, cfg["steps"]
    else:
        spec = class_spec(mc, base)
        target = make_ensemble(spec, mc.k, seed)
        tc = train_config(cfg, mc, seed)
        saver = _checkpointing_evaluator(evaluator, cdir, cfg)
        state = (train_adversarial if mc.adversarial else train_standard)(target, train, tc, saver)
        history, ensemble, extra = state.history, state.ensemble, {}
        flagged, floor_hits, step = state.flagged, state.floor_hits, state.step

    finals, curve = _final_eval(cfg, ensemble, test)
    write_series(cdir / "series.csv", history, cfg["metrics"], model_class, seed)
    meta = {
        "model_class": model_class, "seed": seed, "step": step,
        "members": [m.spec.to_dict() for m in ensemble.members],
        "param_count": sum(param_count(m.spec) for m in ensemble.members),
        "config_digest": config_digest(cfg), "flagged": flagged, "floor_hits": floor_hits,
        "final": finals, "curve": curve, "snapshots": [h["step"] for h in history], **extra,
    }
    write_json(cdir / "meta.json", meta)
    return meta


def _checkpointing_evaluator(evaluator, cdir: Path, cfg: dict):
    digest = config_digest(cfg)

    def evaluate(ensemble: Ensemble, step: int) -> dict:
        save_checkpoint(Checkpoint(ensemble, step, config_digest=digest), ckpt_path(cdir, step))
        return evaluator(ensemble, step)

    return evaluate


def separate_member_seeds(cfg: dict, seed: int, k: int) -> list[int]:
    """Seeds of the k single-adv runs an ensemble built from separately trained models uses."""
    seeds = list(cfg["seeds"])
    if len(seeds) < k:
        raise UsageError(f"separate-ensemble-{k}-adv needs at least {k} seeds, config has {len(seeds)}")
    j = seeds.index(seed) if seed in seeds else 0
    return [seeds[(j + i) % len(seeds)] for i in range(k)]


def _assemble_separate(cfg, root: Path, mc: ModelClass, seed: int, evaluator):
    member_seeds = separate_member_seeds(cfg, seed, mc.k)
    dirs = [cell_dir(root, "single-adv", s) for s in member_seeds]
    for d in dirs:
        if not (d / "meta.json").exists():
            raise FileNotFoundError(f"single-adv run needed for {mc.name} not found: {d}")
    steps = sorted(set.intersection(*[set(json.loads((d / "meta.json").read_text())["snapshots"])
                                      for d in dirs]))
    history, ensemble = [], None
    for step in steps:
        parts = [load_checkpoint(ckpt_path(d, step)).ensemble for d in dirs]
        ensemble = build_separate_ensemble(parts)
        history.append({"step": step, **evaluator(ensemble, step)})
    if ensemble is None:
        raise ValueError(f"{mc.name}: member runs share no snapshot steps")
    save_checkpoint(Checkpoint(ensemble, steps[-1], config_digest=config_digest(cfg)),
                    ckpt_path(cell_dir(root, mc.name, seed), steps[-1]))
    return history, ensemble, {"member_runs": [f"single-adv/{s}" for s in member_seeds]}


# ---------------------------------------------------------------------------
# the grid


def _cell_job(args):
    cfg, name, seed, root = args
    try:
        run_cell(cfg, name, seed, root)
        return name, seed, None
    except Exception as exc:  # the grid keeps going and records the failure
        log.exception("cell %s/%s failed", name, seed)
        return name, seed, f"{type(exc).__name__}: {exc}"


def _run_jobs(jobs, workers: int):
    if workers <= 1 or len(jobs) <= 1:
        return [_cell_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_cell_job, jobs))


def run_grid(cfg: dict, root=None) -> tuple[int, dict]:
    """Train every (class, seed) cell, then run the strongest-attack check and write the report.

    Returns (exit code, manifest). Failed cells do not stop the others.
    """
    root = Path(root) if root is not None else output_root(cfg)
    root.mkdir(parents=True, exist_ok=True)
    write_json(root / "config.json", {k: v for k, v in cfg.items() if k not in ("workers", "output")})
    train, test = build_data(cfg)
    ensure_blackbox(cfg, root, train, test)
    classes = list(cfg["classes"])
    seps = [c for c in classes if parse_class(c).kind == "separate"]
    if seps and "single-adv" not in classes:
        classes.insert(0, "single-adv")
    first = [(cfg, c, s, str(root)) for c in classes if c not in seps for s in cfg["seeds"]]
    second = [(cfg, c, s, str(root)) for c in seps for s in cfg["seeds"]]
    failures = {}
    for results in (_run_jobs(first, cfg["workers"]), _run_jobs(second, cfg["workers"])):
        for name, seed, err in results:
            if err:
                failures[(name, seed)] = err
    strongest_error = None
    if cfg["strongest_check"]:
        try:
            run_strongest_check(cfg, root)
        except Exception as exc:
            log.exception("strongest-attack check failed")
            strongest_error = f"{type(exc).__name__}: {exc}"
    report(root, cfg)
    manifest = build_manifest(cfg, root, classes, failures, strongest_error)
    write_json(root / "manifest.json", manifest)
    return (0 if manifest["ok"] else 1), manifest


def build_manifest(cfg, root: Path, classes, failures: dict, strongest_error=None) -> dict:
    cells = []
    for c in classes:
        for s in cfg["seeds"]:
            err = failures.get((c, s))
            present = set()
            series = cell_dir(root, c, s) / "series.csv"
            if err is None and series.exists():
                for h in read_series(series):
                    present.update(k for k in h if k != "step")
            for m in cfg["metrics"]:
                if err is not None:
                    status, note = "failed", err
                elif m in present:
                    status, note = "ok", ""
                else:
                    status, note = "missing", "metric not produced"
                cells.append({"model_class": c, "seed": s, "metric": m, "status": status, "note": note})
    ok = all(c["status"] == "ok" or (c["metric"] == "blackbox" and c["status"] == "missing")
             for c in cells) and strongest_error is None
    return {"cells": cells, "ok": ok, "strongest_error": strongest_error}


# ---------------------------------------------------------------------------
# strongest attack and per-member evaluation


def best_adversarial_ensemble(cfg: dict, root: Path) -> tuple[str, int, int]:
    """(class, seed, step) of the adversarial ensemble with the best smoothed selection metric."""
    select = cfg["select_metric"]
    best = None
    for c in cfg["classes"]:
        mc = parse_class(c)
        if not mc.adversarial or mc.k < 2 or mc.kind == "double":
            continue
        for s in cfg["seeds"]:
            series = cell_dir(root, c, s) / "series.csv"
            if not series.exists():
                continue
            sm = ev.smooth_outliers(ev.history_series(read_series(series), select))
            i = int(np.argmax(sm.values))
            key = (float(sm.values[i]), -mc.k, c, -s)
            if best is None or key > best[0]:
                best = (key, c, s, int(sm.steps[i]))
    if best is None:
        raise ValueError("no adversarially trained ensemble in the grid")
    return best[1], best[2], best[3]


def run_strongest_check(cfg: dict, root: Path) -> dict:
    name, seed, step = best_adversarial_ensemble(cfg, root)
    ckpt = ckpt_path(cell_dir(root, name, seed), step)
    if not ckpt.exists():  # separate ensembles only keep their last snapshot
        ckpt = sorted((cell_dir(root, name, seed) / "checkpoints").glob("step-*.advn"))[-1]
    ensemble = load_checkpoint(ckpt).ensemble.with_mode(PROBABILITY)
    _, test = build_data(cfg)
    subset = eval_subset(test, cfg["eval_size"])
    margin = attacks.pgd(cfg["delta"], cfg["strongest_start"], loss_kind=LossKind.MARGIN,
                         domain_clamp=test.domain_clamp)
    strongest = attacks.strongest_attack(ensemble, subset, margin, cfg["strongest_start"],
                                         cfg["strongest_max"], cfg["strongest_tol"], cfg["eval_seed"])
    rows = ev.submodel_eval(ensemble, subset, margin.with_steps(strongest["steps"][-1]), cfg["eval_seed"])
    out = {"model_class": name, "seed": seed, "step": step, "checkpoint": str(ckpt.relative_to(root)),
           "strongest_attack": strongest, "submodels": rows}
    write_json(root / "report" / "strongest.json", out)
    return out


# ---------------------------------------------------------------------------
# report


def collect_runs(root: Path, cfg: dict) -> tuple[dict, dict]:
    runs, metas = {}, {}
    for c in cfg["classes"]:
        for s in cfg["seeds"]:
            d = cell_dir(root, c, s)
            if (d / "series.csv").exists() and (d / "meta.json").exists():
                runs.setdefault(c, {})[s] = read_series(d / "series.csv")
                metas.setdefault(c, {})[s] = json.loads((d / "meta.json").read_text())
    return runs, metas


def report(root, cfg: dict | None = None) -> dict:
    """Tables over the finished cells: last-10, best-snapshot, final-attack, curves."""
    root = Path(root)
    if cfg is None:
        cfg_file = root / "config.json"
        if not cfg_file.exists():
            raise FileNotFoundError(f"no config.json in run directory {root}")
        cfg = make_config(json.loads(cfg_file.read_text()))
    runs, metas = collect_runs(root, cfg)
    metrics = list(cfg["metrics"])
    summary = ev.summarize(runs, metrics, cfg["select_metric"])
    out = root / "report"
    classes = [c for c in cfg["classes"] if c in runs]

    for table, fname in (("last10", "table_last10.csv"), ("best", "table_best.csv")):
        rows = [[c] + [ev.fmt(summary[table][c][m]) for m in metrics] for c in classes]
        write_csv(out / fname, ["model_class"] + metrics, rows)

    finals = {}
    for c in classes:
        finals[c] = {m: float(np.mean([metas[c][s]["final"][m] for s in metas[c]])) for m in cfg["final_metrics"]}
    write_csv(out / "table_500.csv", ["model_class"] + cfg["final_metrics"],
              [[c] + [ev.fmt(finals[c][m]) for m in cfg["final_metrics"]] for c in classes])

    curve_rows = []
    for c in classes:
        curves = [metas[c][s]["curve"] for s in metas[c] if metas[c][s]["curve"]]
        if curves:
            mean = np.mean([[v for _, v in cur] for cur in curves], axis=0)
            curve_rows.extend([c, a, ev.fmt(v)] for (a, _), v in zip(curves[0], mean))
    write_csv(out / "curves.csv", ["model_class", "attack_steps", "robust_accuracy"], curve_rows)

    training_rows = []
    for c in classes:
        for m in metrics:
            series = [ev.smooth_outliers(ev.history_series(h, m, c, s)) for s, h in runs[c].items()
                      if len(ev.history_series(h, m)) >= 2]
            if not series:
                continue
            agg = ev.align_and_aggregate(series, cfg["grid_size"])
            training_rows.extend([ev.fmt(st), c, m, ev.fmt(v)] for st, v in zip(agg.steps, agg.values))
    write_csv(out / "training_curves.csv", ["step", "model_class", "metric", "value"], training_rows)

    result = {"last10": summary["last10"], "best": summary["best"], "final": finals,
              "select_metric": cfg["select_metric"], "outlier_rule": ev.OUTLIER_RULE,
              "seeds": {c: sorted(runs[c]) for c in classes}}
    write_json(out / "summary.json", result)
    return result
