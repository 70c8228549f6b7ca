"""End-to-end acceptance checks; each criterion prints one PASS/FAIL line.

The desk grid (criteria 4 to 7) trains every model class on blobs10 over five
seeds once per session, so this module dominates the suite's runtime.
"""

import json
import time

import numpy as np
import pytest

from advens import gradsuite, harness
from advens import evaluation as ev
from advens.attacks import AttackConfig, attack, project_linf
from advens.autodiff import LossKind
from advens.checkpoint import Checkpoint, CheckpointError, decode, encode
from advens.data import CIFAR_RECORD, FormatError, parse_cifar10_binary
from advens.models import Ensemble, ModelParams, init_params, mlp

NON_ADV = ["baseline", "ensemble-2"]
ADV = ["single-adv", "double-adv", "ensemble-2-adv", "separate-ensemble-2-adv", "ensemble-4-adv"]
DESK_SEEDS = [0, 1, 2, 3, 4]
GRID_BUDGET_S = 30 * 60


def _mean_final(metas, cls, metric):
    return float(np.mean([metas[cls][s]["final"][metric] for s in DESK_SEEDS]))


@pytest.fixture(scope="session")
def desk_grid(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    cfg = harness.make_config({"seeds": DESK_SEEDS, "classes": NON_ADV + ADV})
    t0 = time.perf_counter()
    code, manifest = harness.run_grid(cfg, root)
    elapsed = time.perf_counter() - t0
    runs, metas = harness.collect_runs(root, cfg)
    return {"cfg": cfg, "root": root, "code": code, "manifest": manifest, "elapsed": elapsed,
            "runs": runs, "metas": metas}


def test_criterion_1_gradients(verdict):
    t0 = time.perf_counter()
    results = gradsuite.run_suite(100, tol=1e-6)
    elapsed = time.perf_counter() - t0
    table = gradsuite.summarize_suite(results)
    worst = max(err for _, err in table.values())
    failed = [name for name, (ok, _) in table.items() if not ok]
    cases = {name.split("[")[0] for name in table}
    covers = {"matmul", "relu", "softmax", "log_softmax", "conv2d", "avg_pool2d"} <= cases
    ok = [
        verdict("1 grad_check over 100 seeds", not failed,
                f"{len(results)} checks, {len(table)} cases, max rel error {worst:.2e}, failed {failed[:3]}"),
        verdict("1 coverage of primitives, losses, architectures, ensemble training loss",
                covers and any("training" in n for n in table) and any("cnn" in n for n in table)),
        verdict("1 runtime under one minute", elapsed < 60, f"{elapsed:.1f}s"),
    ]
    assert all(ok)


def _random_attack_case(rng):
    dim, classes = int(rng.integers(2, 6)), int(rng.integers(2, 5))
    k = int(rng.integers(1, 4))
    members = [init_params(mlp(dim, (int(rng.integers(2, 8)),), classes), int(s)) for s in rng.integers(0, 10 ** 6, k)]
    cfg = AttackConfig(float(rng.uniform(0.0, 1.0)), steps=int(rng.integers(1, 8)),
                       rule=["sign", "gradient", "adam"][int(rng.integers(3))],
                       loss_kind=list(LossKind)[int(rng.integers(3))],
                       domain_clamp=(0.0, 1.0) if rng.random() < 0.5 else None)
    x = rng.uniform(0, 1, (4, dim)) if cfg.domain_clamp else rng.normal(0, 2, (4, dim))
    mode = "logit" if rng.random() < 0.3 else "probability"
    return Ensemble(members, mode), x, rng.integers(0, classes, 4), cfg


def test_criterion_2_threat_model(verdict):
    rng = np.random.default_rng(20240601)
    ball_ok = clamp_ok = idem_ok = True
    seen = set()
    for i in range(1000):
        target, x, y, cfg = _random_attack_case(rng)
        seen.add((cfg.rule, cfg.loss_kind))
        res = attack(target, x, y, cfg, rng_seed=i)
        ball_ok &= bool(np.abs(res.x_adv - x).max() <= cfg.delta + 1e-12)
        if cfg.domain_clamp:
            clamp_ok &= bool(res.x_adv.min() >= 0.0 and res.x_adv.max() <= 1.0)
        p = project_linf(res.x_adv + rng.normal(0, 1, x.shape), x, cfg.delta, cfg.domain_clamp)
        idem_ok &= bool(np.array_equal(project_linf(p, x, cfg.delta, cfg.domain_clamp), p))
    ok = [
        verdict("2 perturbation within the L-inf ball (1000 runs)", ball_ok),
        verdict("2 domain clamp respected", clamp_ok),
        verdict("2 projection idempotent", idem_ok),
        verdict("2 every rule x loss kind exercised", len(seen) == 9, f"{len(seen)}/9 combinations"),
    ]
    assert all(ok)


def test_criterion_3_fgsm_oracle(verdict):
    w, x = np.array([1.0, 0.0]), np.array([[0.2, 0.0]])
    model = ModelParams(mlp(2, (), 2), [np.stack([w, -w], axis=1), np.zeros(2)])
    # closed form for logits (w.x, -w.x): d(-log p0)/dx = -(1 - p0) * 2w
    p0 = 1.0 / (1.0 + np.exp(-2 * 0.2))
    g = -(1 - p0) * 2 * w
    cfg = AttackConfig(0.3, steps=1, step_size=0.3, init_sigma=0.0, rule="sign")
    res = attack(Ensemble([model]), x, [0], cfg)
    step = np.sign(res.x_adv[0] - x[0])
    ok = [
        verdict("3 step follows the analytic gradient sign", np.array_equal(step, np.sign(g))),
        verdict("3 adversarial point is [-0.1, 0]", np.allclose(res.x_adv, [[-0.1, 0.0]], atol=1e-15)),
        verdict("3 zero-gradient coordinate unmoved", res.x_adv[0, 1] == 0.0),
        verdict("3 prediction flips to class 1", res.predictions.tolist() == [1] and res.success.all()),
    ]
    assert all(ok)


def test_criterion_4_table_ordering(desk_grid, verdict):
    metas = desk_grid["metas"]
    pgd = {c: _mean_final(metas, c, "pgd-20") for c in NON_ADV + ADV}
    detail = ", ".join(f"{c}={v:.3f}" for c, v in pgd.items())
    gap = min(pgd[a] for a in ADV) - max(pgd[n] for n in NON_ADV)
    ens, single, double, sep = pgd["ensemble-2-adv"], pgd["single-adv"], pgd["double-adv"], pgd["separate-ensemble-2-adv"]
    base_clean = _mean_final(metas, "baseline", "clean")
    base_500 = _mean_final(metas, "baseline", "pgd-500")
    ok = [
        verdict("4 all model classes trained on 5 seeds", desk_grid["code"] == 0, f"exit {desk_grid['code']}"),
        verdict("4a adversarial classes beat non-adversarial by >= 0.05 under PGD-20", gap >= 0.05,
                f"gap {gap:.3f}; {detail}"),
        verdict("4b ensemble-2-adv >= single-adv + 0.02", ens >= single + 0.02, f"{ens:.3f} vs {single:.3f}"),
        verdict("4b ensemble-2-adv >= double-adv", ens >= double, f"{ens:.3f} vs {double:.3f}"),
        verdict("4c ensemble-2-adv >= separate-ensemble-2-adv", ens >= sep, f"{ens:.3f} vs {sep:.3f}"),
        verdict("4d baseline PGD-500 below 0.3 x clean", base_500 < 0.3 * base_clean,
                f"{base_500:.3f} vs 0.3 x {base_clean:.3f}"),
        verdict("4 grid within 30 minutes", desk_grid["elapsed"] <= GRID_BUDGET_S, f"{desk_grid['elapsed']:.0f}s"),
    ]
    assert all(ok)


def test_criterion_5_clean_cost(desk_grid, verdict):
    metas = desk_grid["metas"]
    single, base = _mean_final(metas, "single-adv", "clean"), _mean_final(metas, "baseline", "clean")
    assert verdict("5 single-adv clean accuracy below baseline", single < base, f"{single:.3f} vs {base:.3f}")


def test_criterion_6_blackbox(desk_grid, verdict):
    root = desk_grid["root"]
    bb = ev.load_blackbox(root / "blackbox" / "set.npz")  # re-verifies on load
    fooled = ev.fooled_matrix(bb.sources, bb.inputs, bb.labels).all() if len(bb) else False
    # swap one retained example back to its clean input, which the sources classify correctly
    _, test = harness.build_data(desk_grid["cfg"])
    test = harness.eval_subset(test, desk_grid["cfg"]["eval_size"])
    clean_fools = ev.fooled_matrix(bb.sources, test.inputs[bb.indices], bb.labels).all(axis=1)
    caught = True
    if len(bb) and not clean_fools.all():
        j = int(np.argmin(clean_fools))
        tampered = ev.BlackboxSet(bb.inputs.copy(), bb.labels, bb.indices, bb.fooled, bb.sources,
                                  bb.cfg, bb.coverage, bb.total)
        tampered.inputs[j] = test.inputs[bb.indices[j]]
        try:
            ev.verify_blackbox(tampered)
            caught = False
        except ValueError:
            pass
    final_bb = {c: float(np.mean([desk_grid["runs"][c][s][-1]["blackbox"] for s in DESK_SEEDS]))
                for c in NON_ADV + ADV}
    worst_adv, best_non = min(final_bb[a] for a in ADV), max(final_bb[n] for n in NON_ADV)
    ok = [
        verdict("6 every retained example fools every source", fooled,
                f"{len(bb)} examples, coverage {bb.coverage:.3f}"),
        verdict("6 loader detects a violated example", caught),
        verdict("6 adversarial classes beat non-adversarial on the transfer set", worst_adv > best_non,
                ", ".join(f"{c}={v:.3f}" for c, v in final_bb.items())),
    ]
    assert all(ok)


def test_criterion_7_strongest_attack(desk_grid, verdict):
    app = json.loads((desk_grid["root"] / "report" / "strongest.json").read_text())
    cfg = desk_grid["cfg"]
    sa = app["strongest_attack"]
    steps, acc, env = sa["steps"], sa["accuracy"], sa["envelope"]
    doubling = steps[0] == cfg["strongest_start"] and all(b == 2 * a for a, b in zip(steps, steps[1:]))
    stopped = (len(acc) >= 2 and acc[-2] - acc[-1] <= cfg["strongest_tol"]) or 2 * steps[-1] > cfg["strongest_max"]
    rows = {r["row"]: r for r in app["submodels"]}
    members = [r for name, r in rows.items() if name.startswith("member-")]
    ens_robust = rows["ensemble"]["robust"]
    ok = [
        verdict("7 strongest attack doubles steps and stops by rule", doubling and stopped, f"steps {steps}"),
        verdict("7 accuracy envelope nonincreasing", all(b <= a for a, b in zip(env, env[1:])), f"{env}"),
        verdict("7 every member robust accuracy <= ensemble", all(m["robust"] <= ens_robust for m in members),
                f"{app['model_class']}/{app['seed']}: members {[m['robust'] for m in members]} vs {ens_robust}"),
        verdict("7 probability and logit ensemble rows present", {"ensemble", "ensemble-logit"} <= set(rows)),
    ]
    assert all(ok)


def _brute_smooth(v, window=50):
    n = len(v)
    out, med = [], []
    for i in range(n):
        if i >= window // 2 and i + window // 2 - 1 <= n - 1:
            win = sorted(v[i - window // 2:i + window // 2])
        else:
            r = min(i, n - 1 - i, window // 2)
            win = sorted(v[i - r:i + r + 1])
        m = len(win)
        med.append(win[m // 2] if m % 2 else (win[m // 2 - 1] + win[m // 2]) / 2)
    d = [abs(a - b) for a, b in zip(v, med)]
    mu = sum(d) / n
    sd = (sum((e - mu) ** 2 for e in d) / n) ** 0.5
    for a, b, e in zip(v, med, d):
        out.append(b if e > mu + 3 * sd else a)
    return out


def test_criterion_8_series_pipeline(verdict):
    rng = np.random.default_rng(8)
    exact = True
    replaced = 0
    for _ in range(50):
        n = int(rng.integers(20, 300))
        v = 0.5 + 0.02 * rng.standard_normal(n)
        idx = rng.choice(n, size=int(rng.integers(1, 5)), replace=False)
        v[idx] += rng.uniform(0.3, 1.0, idx.size) * rng.choice([-1, 1], idx.size)
        s = ev.EvalSeries(np.arange(n) * 50, v, "m")
        got = ev.smooth_outliers(s).values.tolist()
        want = _brute_smooth(v.tolist())
        exact &= got == want
        replaced += int(np.sum(np.asarray(got) != v))
    grid = ev.EvalSeries(np.linspace(0, 10, 11), np.arange(11.0) ** 2, "m")
    line = ev.interpolate(ev.EvalSeries([0, 10], [0.0, 1.0], "m"), 11)
    same = ev.aggregate_seeds([grid, grid])
    ok = [
        verdict("8 smoothing equals brute-force reimplementation on 50 spiked series", exact,
                f"{replaced} points replaced"),
        verdict("8 interpolation on its own grid is the identity",
                ev.interpolate(grid, 11).values.tolist() == grid.values.tolist()),
        verdict("8 linear interpolation midpoint", line.values[5] == 0.5),
        verdict("8 aggregating identical seeds is the identity", np.allclose(same.values, grid.values, rtol=1e-15)),
    ]
    assert all(ok)


def test_criterion_9_determinism(tmp_path, verdict):
    cfg = harness.make_config({"data_n": 600, "steps": 60, "boundaries": [40, 50], "eval_every": 20,
                               "seeds": [3], "metrics": ["clean", "ifgsm-5", "pgd-5"], "eval_size": 150,
                               "final_metrics": ["clean"], "curve_steps": [], "strongest_check": False})
    for sub in ("a", "b"):
        harness.run_cell(cfg, "ensemble-2-adv", 3, tmp_path / sub)
    csv_a = (tmp_path / "a" / "runs" / "ensemble-2-adv" / "3" / "series.csv").read_bytes()
    csv_b = (tmp_path / "b" / "runs" / "ensemble-2-adv" / "3" / "series.csv").read_bytes()
    ens = Ensemble([init_params(mlp(8, (16, 16), 10), s) for s in (1, 2)])
    raw = encode(Checkpoint(ens, 7))
    back = decode(raw)
    exact = all(a.tobytes() == b.tobytes() for m, n in zip(ens.members, back.ensemble.members)
                for a, b in zip(m.arrays, n.arrays)) and encode(back) == raw
    rng = np.random.default_rng(9)
    detected = 0
    positions = rng.integers(8, len(raw), 500)
    for pos in positions:
        bad = bytearray(raw)
        bad[pos] ^= int(rng.integers(1, 256))
        try:
            decode(bytes(bad))
        except CheckpointError:
            detected += 1
    ok = [
        verdict("9 same-seed cells give byte-identical series CSVs", csv_a == csv_b, f"{len(csv_a)} bytes"),
        verdict("9 checkpoint round trip bit-exact", exact),
        verdict("9 single-byte payload mutations detected", detected == len(positions),
                f"{detected}/{len(positions)}"),
    ]
    assert all(ok)


def test_criterion_10_cifar(tmp_path, verdict):
    labels = [0, 9, 4]
    raw = bytearray()
    for i, lab in enumerate(labels):
        raw.append(lab)
        raw.extend(((np.arange(3072) + i) % 256).astype(np.uint8).tobytes())
    ds = parse_cifar10_binary(bytes(raw))
    rec1 = np.frombuffer(bytes(raw[CIFAR_RECORD + 1:2 * CIFAR_RECORD]), np.uint8)
    layout = np.array_equal(ds.inputs[1], rec1.reshape(3, 32, 32) / 255.0)

    fixture = parse_cifar10_binary(b"".join(bytes([lab]) + b"\xff" * 3072 for lab in (3, 7)))

    def raises(blob, needle):
        try:
            parse_cifar10_binary(blob)
        except FormatError as exc:
            return needle in str(exc)
        return False

    ok = [
        verdict("10 record length 3073", CIFAR_RECORD == 3073),
        verdict("10 labels and channel-major pixels parsed exactly",
                ds.labels.tolist() == labels and layout and ds.inputs.shape == (3, 3, 32, 32)),
        verdict("10 truncated file reports the offset", raises(bytes(raw[:-5]), f"offset {2 * CIFAR_RECORD}")),
        verdict("10 out-of-range label reports the record", raises(bytes([10]) + bytes(3072), "record 0")),
        verdict("10 two-record fixture with labels 3, 7 and pixels 255", fixture.labels.tolist() == [3, 7]
                and np.all(fixture.inputs == 1.0)),
        verdict("10 a 3072-byte file reports offset 0", raises(bytes(3072), "offset 0")),
    ]
    assert all(ok)
