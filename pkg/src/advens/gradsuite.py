"""Randomised gradient checks over every primitive, loss and architecture.

Each case builds a scalar function of one array and hands it to
:func:`advens.autodiff.grad_check`. Cases are regenerated per seed so the
suite covers many random points.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import LossKind, Tensor
from .models import Ensemble, ensemble_forward, init_params, mlp, small_cnn

MLP_SPEC = mlp(3, (5,), 4)
CNN_SPEC = small_cnn((1, 4, 4), (2,), (3,), (2,), (4,), 3)


@dataclass
class CaseResult:
    name: str
    seed: int
    passed: bool
    max_rel_error: float


def _weighted_sum(out: Tensor, c: np.ndarray) -> Tensor:
    return ad.summation(ad.mul_scalar(out, c))


def _primitive_cases(rng) -> Iterator[tuple[str, Callable, np.ndarray]]:
    def proj(shape):
        return rng.standard_normal(shape)

    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2))
    c_ab = proj((3, 2))
    yield "matmul[a]", lambda t: _weighted_sum(ad.matmul(t, b), c_ab), a
    yield "matmul[b]", lambda t: _weighted_sum(ad.matmul(a, t), c_ab), b
    v = rng.standard_normal(4)
    yield "matmul[vec]", lambda t: ad.matmul(t, v), rng.standard_normal(4)

    row = rng.standard_normal(4)
    c_add = proj((3, 4))
    yield "add[broadcast]", lambda t: _weighted_sum(ad.add(a, t), c_add), row
    yield "add[full]", lambda t: _weighted_sum(ad.add(t, a), c_add), rng.standard_normal((3, 4))

    k = float(rng.uniform(-2, 2))
    yield "mul_scalar", lambda t: _weighted_sum(ad.mul_scalar(t, k), c_add), a.copy()
    yield "relu", lambda t: _weighted_sum(ad.relu(t), c_add), rng.standard_normal((3, 4))
    c_r = proj((2, 6))
    yield "reshape", lambda t: _weighted_sum(ad.reshape(t, (2, 6)), c_r), a.copy()
    yield "softmax", lambda t: _weighted_sum(ad.softmax(t), c_add), 2 * rng.standard_normal((3, 4))
    yield "log_softmax", lambda t: _weighted_sum(ad.log_softmax(t), c_add), 2 * rng.standard_normal((3, 4))
    yield "log", lambda t: _weighted_sum(ad.log(t), c_add), rng.uniform(0.5, 2.0, (3, 4))
    c_s = proj(4)
    yield "summation[axis]", lambda t: _weighted_sum(ad.summation(t, axis=0), c_s), a.copy()
    yield "mean[axis]", lambda t: _weighted_sum(ad.mean(t, axis=0), c_s), a.copy()
    idx = rng.integers(0, 4, size=3)
    c_i = proj(3)
    yield "index_select[rows]", lambda t: _weighted_sum(ad.index_select(t, idx), c_i), a.copy()
    j = int(rng.integers(0, 4))
    yield "index_select[scalar]", lambda t: ad.index_select(t, j), rng.standard_normal(4)

    x = rng.standard_normal((2, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    c_c = proj((2, 3, 3, 3))
    yield "conv2d[x]", lambda t: _weighted_sum(ad.conv2d(t, w, 2, 1), c_c), x
    yield "conv2d[w]", lambda t: _weighted_sum(ad.conv2d(x, t, 2, 1), c_c), w
    c_p = proj((2, 2, 2, 2))
    yield "avg_pool2d", lambda t: _weighted_sum(ad.avg_pool2d(t, 2), c_p), rng.standard_normal((2, 2, 4, 4))


def _loss_cases(rng) -> Iterator[tuple[str, Callable, np.ndarray]]:
    members = {"mlp": MLP_SPEC, "cnn": CNN_SPEC}
    for arch, spec in members.items():
        seeds = rng.integers(0, 2 ** 31, size=2)
        single = Ensemble([init_params(spec, int(seeds[0]))])
        pair = Ensemble([init_params(spec, int(s)) for s in seeds])
        dim = spec.input_size
        x = rng.standard_normal(dim)
        label = int(rng.integers(spec.classes))
        for kind in LossKind:
            def f(t, kind=kind, e=single, lab=label):
                z = ensemble_forward(e, t, mode="logit")
                term = ad.softmax(z) if kind is LossKind.CE_PROB else z
                return ad.loss(kind, term, lab)
            yield f"{arch}/{kind.value}/input", f, x.copy()
        yield f"{arch}/ensemble-ce/input", (
            lambda t, e=pair, lab=label: ad.loss(LossKind.CE_PROB, ensemble_forward(e, t), lab)), x.copy()
        yield from _training_loss_cases(arch, pair, rng)


def _training_loss_cases(arch: str, ensemble: Ensemble, rng):
    """L_clean + rho * L_adv through the ensemble mean, wrt every parameter array."""
    spec = ensemble.members[0].spec
    B = 3
    x = rng.standard_normal((B,) + spec.input_shape)
    x_adv = x + 0.1 * np.sign(rng.standard_normal(x.shape))
    y = rng.integers(0, spec.classes, size=B)
    rho = float(rng.uniform(0.5, 2.0))
    x_all = np.concatenate([x, x_adv])
    y_all = np.concatenate([y, y])
    w = np.concatenate([np.full(B, 1.0 / B), np.full(B, rho / B)])
    for mi, member in enumerate(ensemble.members):
        for ai, arr in enumerate(member.arrays):
            def f(t, mi=mi, ai=ai):
                weights = [[Tensor(a) for a in m.arrays] for m in ensemble.members]
                weights[mi][ai] = t
                probs = ensemble_forward(ensemble, x_all, weights)
                per = ad.per_example_loss(LossKind.CE_PROB, probs, y_all)
                return ad.summation(ad.mul_scalar(per, w))
            yield f"{arch}/adv-training-loss/member{mi}/param{ai}", f, arr.copy()


def run_suite(seeds: int = 100, step: float = 1e-5, tol: float = 1e-6) -> list[CaseResult]:
    results = []
    for seed in range(seeds):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6772]))
        for name, fn, point in list(_primitive_cases(rng)) + list(_loss_cases(rng)):
            rep = ad.grad_check(fn, point, step, tol)
            results.append(CaseResult(name, seed, rep.passed, rep.max_rel_error))
    return results


def summarize_suite(results: list[CaseResult]) -> dict[str, tuple[bool, float]]:
    out: dict[str, tuple[bool, float]] = {}
    for r in results:
        ok, err = out.get(r.name, (True, 0.0))
        out[r.name] = (ok and r.passed, max(err, r.max_rel_error))
    return out


def main(seeds: int = 100, echo=print) -> bool:
    t0 = time.perf_counter()
    results = run_suite(seeds)
    table = summarize_suite(results)
    for name, (ok, err) in table.items():
        echo(f"{'PASS' if ok else 'FAIL'}  {name:<40s} max_rel_error={err:.3e}")
    passed = all(ok for ok, _ in table.values())
    echo(f"{len(results)} checks over {seeds} seeds in {time.perf_counter() - t0:.1f}s: "
         f"{'all passed' if passed else 'FAILURES'}")
    return passed
