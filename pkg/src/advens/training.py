"""Momentum SGD and the standard / adversarial training regimes.

The adversarial regime attacks the whole ensemble (probability averaging)
and then takes one step on ``L_clean + rho * L_adv``, both cross-entropies
through the ensemble mean. With k = 1 this is ordinary adversarial
training.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .attacks import AttackConfig, attack
from .data import Dataset, minibatch_stream
from .models import PROBABILITY, Ensemble, ModelParams, ModelSpec, ensemble_forward, init_params

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 5000
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    boundaries: tuple = (3000, 6000, 9000)
    decay: float = 0.2
    rho: float = 1.0
    train_attack: AttackConfig | None = None
    eval_every: int = 50
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "boundaries", tuple(int(b) for b in self.boundaries))
        if any(b2 <= b1 for b1, b2 in zip(self.boundaries, self.boundaries[1:])):
            raise ValueError("lr boundaries must be strictly increasing")
        if not 0.0 < self.decay <= 1.0:
            raise ValueError("decay factor must lie in (0, 1]")
        if self.rho < 0:
            raise ValueError("rho must be >= 0")
        if self.steps < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("steps >= 0, batch_size >= 1 and eval_every >= 1 required")


def lr_schedule(cfg: TrainConfig, step: int) -> float:
    """Piecewise-constant decay: lr * decay ** (number of boundaries <= step)."""
    passed = sum(1 for b in cfg.boundaries if b <= step)
    return cfg.lr * cfg.decay ** passed


@dataclass
class TrainState:
    step: int
    ensemble: Ensemble
    buffers: list  # per member, one momentum array per parameter array
    seed: int
    momentum: float = 0.9
    history: list = field(default_factory=list)
    flagged: bool = False
    floor_hits: int = 0

    @classmethod
    def fresh(cls, ensemble: Ensemble, seed: int, momentum: float = 0.9) -> "TrainState":
        buffers = [[np.zeros_like(a) for a in m.arrays] for m in ensemble.members]
        return cls(0, ensemble, buffers, seed, momentum)


def momentum_step(state: TrainState, gradients: Sequence[Sequence[np.ndarray]], lr: float) -> TrainState:
    """buffer <- mu * buffer + grad; param <- param - lr * buffer, in place.

    A non-finite gradient anywhere aborts the whole step and flags the run.
    """
    for member, grads in zip(state.ensemble.members, gradients):
        for a, g in zip(member.arrays, grads):
            if g.shape != a.shape:
                raise ad.ShapeError("momentum_step", a.shape, g.shape)
    if not all(np.all(np.isfinite(g)) for grads in gradients for g in grads):
        state.flagged = True
        log.warning("non-finite gradient at step %d; update skipped", state.step)
        return state
    mu = state.momentum
    for member, bufs, grads in zip(state.ensemble.members, state.buffers, gradients):
        for a, buf, g in zip(member.arrays, bufs, grads):
            buf *= mu
            buf += g
            a -= lr * buf
    return state


def make_ensemble(specs: ModelSpec | Sequence[ModelSpec], k: int, seed: int,
                  mode: str = PROBABILITY) -> Ensemble:
    """k freshly initialised members; member i uses seed derived from (seed, i)."""
    if isinstance(specs, ModelSpec):
        specs = [specs] * k
    members = []
    for i, spec in enumerate(specs):
        member_seed = int(np.random.SeedSequence([int(seed) % (1 << 64), 7, i]).generate_state(1, np.uint64)[0])
        members.append(init_params(spec, member_seed))
    return Ensemble(members, mode)


def _as_ensemble(target, seed: int) -> Ensemble:
    if isinstance(target, Ensemble):
        return Ensemble([m.copy() for m in target.members], target.mode)
    if isinstance(target, ModelParams):
        return Ensemble([target.copy()])
    if isinstance(target, ModelSpec):
        return make_ensemble(target, 1, seed)
    raise TypeError(f"cannot train {type(target).__name__}")


def _attack_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([int(seed) % (1 << 64), 11, step]).generate_state(1, np.uint64)[0])


def ensemble_loss_grads(ensemble: Ensemble, x, y, weights, counter=None):
    """Value and per-member gradients of sum_i weights[i] * CE(ensemble(x_i), y_i)."""
    tensors = [[ad.Tensor(a, requires_grad=True) for a in m.arrays] for m in ensemble.members]
    probs = ensemble_forward(ensemble, x, tensors, mode=PROBABILITY)
    per = ad.per_example_loss(ad.LossKind.CE_PROB, probs, y, counter)
    total = ad.summation(ad.mul_scalar(per, weights))
    grads = ad.backward(total)
    return total.item(), [[grads.get(t.id, np.zeros(t.shape)) for t in ts] for ts in tensors], probs.data


Evaluator = Callable[[Ensemble, int], dict]


def _snapshot(state: TrainState, evaluator: Evaluator | None, train_loss: float | None):
    if evaluator is None:
        return
    metrics = dict(evaluator(state.ensemble, state.step))
    metrics.setdefault("train_loss", train_loss)
    state.history.append({"step": state.step, **metrics})


def _train(target, dataset: Dataset, cfg: TrainConfig, adversarial: bool,
           evaluator: Evaluator | None = None) -> TrainState:
    ensemble = _as_ensemble(target, cfg.seed)
    state = TrainState.fresh(ensemble, cfg.seed, cfg.momentum)
    counter = ad.FloorCounter()
    stream = minibatch_stream(dataset, cfg.batch_size, cfg.seed)
    _snapshot(state, evaluator, None)
    use_attack = adversarial and cfg.rho > 0
    last = None
    for step in range(cfg.steps):
        xb, yb = next(stream)
        B = len(yb)
        if use_attack:
            target_view = Ensemble(state.ensemble.members, PROBABILITY)
            x_adv = attack(target_view, xb, yb, cfg.train_attack, _attack_seed(cfg.seed, step)).x_adv
            x_all = np.concatenate([xb, x_adv])
            y_all = np.concatenate([yb, yb])
            w = np.concatenate([np.full(B, 1.0 / B), np.full(B, cfg.rho / B)])
        else:
            x_all, y_all, w = xb, yb, np.full(B, 1.0 / B)
        last, grads, _ = ensemble_loss_grads(state.ensemble, x_all, y_all, w, counter)
        momentum_step(state, grads, lr_schedule(cfg, step))
        state.step = step + 1
        if state.step % cfg.eval_every == 0 and state.step != cfg.steps:
            _snapshot(state, evaluator, last)
    if cfg.steps > 0:
        _snapshot(state, evaluator, last)
    state.floor_hits = counter.count
    return state


def train_standard(target, dataset: Dataset, cfg: TrainConfig, evaluator: Evaluator | None = None) -> TrainState:
    """Minimise cross-entropy through the ensemble mean (no attack)."""
    if cfg.train_attack is not None:
        raise ValueError("train_standard: cfg.train_attack must be None")
    return _train(target, dataset, cfg, False, evaluator)


def train_adversarial(target, dataset: Dataset, cfg: TrainConfig, evaluator: Evaluator | None = None) -> TrainState:
    """Adversarial training of the ensemble as a single model.

    With rho = 0 the attack is skipped and the run coincides with
    :func:`train_standard`.
    """
    if cfg.train_attack is None:
        raise ValueError("train_adversarial: cfg.train_attack is required")
    return _train(target, dataset, cfg, True, evaluator)


def build_separate_ensemble(members: Sequence[TrainState | Ensemble | ModelParams]) -> Ensemble:
    """Probability-averaged ensemble over independently trained models."""
    params = []
    for m in members:
        if isinstance(m, TrainState):
            params.extend(m.ensemble.members)
        elif isinstance(m, Ensemble):
            params.extend(m.members)
        else:
            params.append(m)
    if not params:
        raise ValueError("build_separate_ensemble needs at least one member")
    classes = {p.spec.classes for p in params}
    if len(classes) > 1:
        raise ValueError(f"members disagree on class count: {sorted(classes)}")
    return Ensemble(list(params), PROBABILITY)


def default_train_attack(delta: float) -> AttackConfig:
    return AttackConfig(delta=delta, steps=7, rule="sign")


def desk_config(**overrides) -> TrainConfig:
    cfg = TrainConfig()
    return replace(cfg, **overrides)
