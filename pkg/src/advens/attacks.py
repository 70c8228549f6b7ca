"""Gradient attacks inside an L-infinity ball.

Everything is batched: ``x`` is (B, *input_shape) and ``y`` has B labels.
Examples never interact (no batch statistics), so a batched run equals B
independent runs. Per-example randomness comes from
``SeedSequence([rng_seed, example_index])``, which keeps results identical
however the examples are chunked.

The objective being ascended is the cross-entropy for the two
cross-entropy loss kinds and the negated margin for ``margin``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import LossKind, Tensor
from .models import LOGIT, PROBABILITY, Ensemble, ModelParams, ensemble_forward, forward_logits

SIGN = "sign"
GRADIENT = "gradient"
ADAM = "adam"

RANDOM_MEMBER = "random-member"
MEAN_LOSS = "mean-loss"
MAX_LOSS = "max-loss"


@dataclass(frozen=True)
class AttackConfig:
    """Threat model and optimiser of an attack.

    ``step_size`` and ``init_sigma`` left as None resolve to the defaults:
    2.5 * delta / steps for the sign and gradient rules, delta / 4 for Adam,
    and delta / 2 for the initial Gaussian noise.
    """

    delta: float
    steps: int = 7
    step_size: float | None = None
    init_sigma: float | None = None
    rule: str = SIGN
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    loss_kind: LossKind = LossKind.CE_PROB
    domain_clamp: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "loss_kind", LossKind(self.loss_kind))
        if self.domain_clamp is not None:
            object.__setattr__(self, "domain_clamp", tuple(float(v) for v in self.domain_clamp))
        if self.delta < 0:
            raise ValueError("delta must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.rule not in (SIGN, GRADIENT, ADAM):
            raise ValueError(f"unknown update rule {self.rule!r}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.adam_eps > 0):
            raise ValueError("adam parameters need 0 <= beta1, beta2 < 1 and eps > 0")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be > 0")
        if self.init_sigma is not None and self.init_sigma < 0:
            raise ValueError("init_sigma must be >= 0")

    @property
    def eta(self) -> float:
        if self.step_size is not None:
            return self.step_size
        if self.rule == ADAM:
            return self.delta / 4.0
        return 2.5 * self.delta / self.steps

    @property
    def sigma(self) -> float:
        if self.delta == 0:
            return 0.0
        return self.delta / 2.0 if self.init_sigma is None else self.init_sigma

    def with_steps(self, steps: int) -> "AttackConfig":
        return replace(self, steps=steps)


def ifgsm(delta: float, steps: int, **kw) -> AttackConfig:
    return AttackConfig(delta=delta, steps=steps, rule=SIGN, **kw)


def pgd(delta: float, steps: int, **kw) -> AttackConfig:
    return AttackConfig(delta=delta, steps=steps, rule=ADAM, **kw)


@dataclass
class AttackResult:
    x_adv: np.ndarray
    losses: np.ndarray  # (steps + 1, B): objective at every iterate, final one included
    success: np.ndarray  # (B,) bool, prediction != label at the final iterate
    aborted: np.ndarray  # (B,) bool, a non-finite gradient stopped the example
    predictions: np.ndarray

    @property
    def loss_trace(self) -> list[float]:
        return [float(v) for v in self.losses.mean(axis=1)]


def project_linf(x, x_nom, delta: float, domain_clamp=None) -> np.ndarray:
    """Clamp to the L-infinity ball around ``x_nom``, then to ``domain_clamp``."""
    x = np.asarray(x, dtype=np.float64)
    x_nom = np.asarray(x_nom, dtype=np.float64)
    if x.shape != x_nom.shape:
        raise ad.ShapeError("project_linf", x.shape, x_nom.shape)
    out = np.clip(x, x_nom - delta, x_nom + delta)
    if domain_clamp is not None:
        out = np.clip(out, domain_clamp[0], domain_clamp[1])
    return out


def example_rngs(rng_seed: int, indices) -> list[np.random.Generator]:
    seed = int(rng_seed) % (1 << 64)
    return [np.random.default_rng(np.random.SeedSequence([seed, int(i)])) for i in indices]


def _initial_point(x, cfg: AttackConfig, rngs) -> np.ndarray:
    sigma = cfg.sigma
    if sigma > 0:
        noise = np.stack([r.standard_normal(x.shape[1:]) for r in rngs])
        x0 = x + sigma * noise
    else:
        x0 = x.copy()
    return project_linf(x0, x, cfg.delta, cfg.domain_clamp)


def _ensemble_objective(target: Ensemble, xt: Tensor, y, kind: LossKind) -> Tensor:
    """Per-example attack objective through the whole ensemble."""
    if kind is LossKind.MARGIN:
        z = ensemble_forward(target, xt, mode=LOGIT)
        return -ad.per_example_loss(kind, z, y)
    out = ensemble_forward(target, xt)
    if target.mode == LOGIT:
        logits = out
    else:
        if kind is LossKind.CE_PROB:
            return ad.per_example_loss(kind, out, y)
        # log of averaged probabilities are valid logits of the same distribution
        logits = ad.log(out, floor=ad.PROB_FLOOR)
    if kind is LossKind.CE_PROB:
        return ad.per_example_loss(kind, ad.softmax(logits), y)
    return ad.per_example_loss(kind, logits, y)


def _member_objective(member: ModelParams, xt: Tensor, y, kind: LossKind) -> Tensor:
    z = forward_logits(member, xt)
    if kind is LossKind.CE_PROB:
        return ad.per_example_loss(kind, ad.softmax(z), y)
    if kind is LossKind.MARGIN:
        return -ad.per_example_loss(kind, z, y)
    return ad.per_example_loss(kind, z, y)


class _Stepper:
    def __init__(self, cfg: AttackConfig, shape):
        self.cfg = cfg
        self.t = 0
        if cfg.rule == ADAM:
            self.m = np.zeros(shape)
            self.v = np.zeros(shape)

    def __call__(self, g: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        if cfg.rule == SIGN:
            return cfg.eta * np.sign(g)
        if cfg.rule == GRADIENT:
            return cfg.eta * g
        self.t += 1
        self.m = cfg.beta1 * self.m + (1 - cfg.beta1) * g
        self.v = cfg.beta2 * self.v + (1 - cfg.beta2) * g * g
        m_hat = self.m / (1 - cfg.beta1 ** self.t)
        v_hat = self.v / (1 - cfg.beta2 ** self.t)
        return cfg.eta * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


def _ascend(objective, x, y, cfg: AttackConfig, rngs, judge: Ensemble) -> AttackResult:
    """Shared projected ascent loop; ``objective(xt, it)`` -> per-example Tensor."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    B = len(x)
    flat = (B, -1)
    xk = _initial_point(x, cfg, rngs)
    step = _Stepper(cfg, x.shape)
    aborted = np.zeros(B, dtype=bool)
    losses = np.zeros((cfg.steps + 1, B))
    for it in range(cfg.steps):
        xt = Tensor(xk, requires_grad=True)
        obj = objective(xt, it)
        losses[it] = obj.data
        g = ad.grad(ad.summation(obj), [xt])[0]
        bad = ~np.all(np.isfinite(g.reshape(flat)), axis=1)
        if bad.any():
            aborted |= bad
            g = np.where(bad.reshape((B,) + (1,) * (x.ndim - 1)), 0.0, g)
        moved = project_linf(xk + step(g), x, cfg.delta, cfg.domain_clamp)
        keep = aborted.reshape((B,) + (1,) * (x.ndim - 1))
        xk = np.where(keep, xk, moved)
    losses[cfg.steps] = objective(Tensor(xk), cfg.steps).data
    pred = np.argmax(ensemble_forward(judge, xk).data, axis=-1)
    return AttackResult(xk, losses, pred != y, aborted, pred)


def attack(target: Ensemble, x, y, cfg: AttackConfig, rng_seed: int = 0,
           indices: Sequence[int] | None = None) -> AttackResult:
    """White-box attack on the ensemble treated as one differentiable model.

    ``indices`` are the dataset positions of the batch rows (default
    0..B-1); they select each example's noise stream.
    """
    x = np.asarray(x, dtype=np.float64)
    if indices is None:
        indices = range(len(x))
    rngs = example_rngs(rng_seed, indices)
    kind = cfg.loss_kind
    y_arr = np.asarray(y, dtype=np.int64)
    return _ascend(lambda xt, it: _ensemble_objective(target, xt, y_arr, kind), x, y_arr, cfg, rngs, target)


def transfer_attack(members: Sequence[ModelParams], x, y, cfg: AttackConfig, strategy: str = MEAN_LOSS,
                    rng_seed: int = 0, indices: Sequence[int] | None = None,
                    judge: Ensemble | None = None) -> AttackResult:
    """Attack treating the members as separate models.

    Each iteration ascends one uniformly drawn member's loss (drawn per
    example), the mean of member losses, or the largest member loss
    (lowest member index on ties). Success is judged by ``judge``, by
    default the probability-averaged ensemble of ``members``.
    """
    members = list(members)
    if not members:
        raise ValueError("transfer_attack needs at least one member")
    if strategy not in (RANDOM_MEMBER, MEAN_LOSS, MAX_LOSS):
        raise ValueError(f"unknown transfer strategy {strategy!r}")
    x = np.asarray(x, dtype=np.float64)
    y_arr = np.asarray(y, dtype=np.int64)
    if indices is None:
        indices = range(len(x))
    rngs = example_rngs(rng_seed, indices)
    judge = judge or Ensemble(members, PROBABILITY)
    kind = cfg.loss_kind
    k = len(members)
    B = len(x)
    # noise is drawn first inside _ascend, member choices afterwards
    choice_cache: dict[int, np.ndarray] = {}

    def objective(xt, it):
        per_member = [_member_objective(m, xt, y_arr, kind) for m in members]
        if k == 1:
            return per_member[0]
        if strategy == MEAN_LOSS:
            total = per_member[0]
            for obj in per_member[1:]:
                total = ad.add(total, obj)
            return ad.mul_scalar(total, 1.0 / k)
        if strategy == MAX_LOSS:
            vals = np.stack([o.data for o in per_member])
            pick = np.argmax(vals, axis=0)
        else:
            if it not in choice_cache:
                choice_cache[it] = np.array([r.integers(k) for r in rngs]) if it < cfg.steps else np.zeros(B, int)
            pick = choice_cache[it]
        total = None
        for j, obj in enumerate(per_member):
            term = ad.mul_scalar(obj, (pick == j).astype(np.float64))
            total = term if total is None else ad.add(total, term)
        return total

    return _ascend(objective, x, y_arr, cfg, rngs, judge)


def fgsm(target: Ensemble, x, y, delta: float, **kw) -> AttackResult:
    """Single-step fast gradient sign attack from the clean point."""
    cfg = AttackConfig(delta=delta, steps=1, step_size=delta, init_sigma=0.0, rule=SIGN, **kw)
    return attack(target, x, y, cfg)


def clean_correct(target: Ensemble, x, y) -> np.ndarray:
    return np.argmax(ensemble_forward(target, x).data, axis=-1) == np.asarray(y)


def robust_correct(target: Ensemble, x, y, cfg: AttackConfig, rng_seed: int = 0,
                   indices=None, chunk: int = 1000) -> np.ndarray:
    """Per-example correctness under attack, processed in chunks."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if indices is None:
        indices = np.arange(len(x))
    out = np.zeros(len(x), dtype=bool)
    for s in range(0, len(x), chunk):
        sl = slice(s, s + chunk)
        res = attack(target, x[sl], y[sl], cfg, rng_seed, indices[sl])
        out[sl] = ~res.success
    return out


def strongest_attack(target: Ensemble, dataset, cfg: AttackConfig, start_steps: int = 20,
                     max_steps: int = 512, tol: float = 0.001, rng_seed: int = 0) -> dict:
    """Double the step count until accuracy under attack stops decreasing.

    Stops once accuracy drops by no more than ``tol`` after a doubling, or
    when the next doubling would exceed ``max_steps``. ``envelope`` is the
    running minimum of accuracy over the step counts tried.
    """
    if start_steps < 1:
        raise ValueError("start_steps must be >= 1")
    steps, accs = [], []
    n = start_steps
    while True:
        acc = float(robust_correct(target, dataset.inputs, dataset.labels, cfg.with_steps(n), rng_seed).mean())
        steps.append(n)
        accs.append(acc)
        if len(accs) >= 2 and accs[-2] - acc <= tol:
            break
        if 2 * n > max_steps:
            break
        n *= 2
    envelope = list(np.minimum.accumulate(accs))
    return {"steps": steps, "accuracy": accs, "envelope": [float(v) for v in envelope],
            "final": float(envelope[-1])}
