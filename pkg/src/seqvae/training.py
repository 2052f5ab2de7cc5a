"""Training loop: aggressive encoder optimization with an MI stopping rule,
plus the joint, annealing, and constant-beta baseline modes.

The aggressive mode alternates an inner loop of encoder-only updates
(driven to approximate convergence on fresh random minibatches) with a
single decoder-only update, and reverts permanently to joint updates the
first epoch validation mutual information fails to climb.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Callable

import numpy as np

from . import metrics as diag
from .data import Dataset, batches, make_batch
from .model import VaeModel
from .tensor import Tensor, global_norm

MODES = ("basic", "aggressive", "annealing", "beta", "aggressive_annealing")


class TrainingError(RuntimeError):
    """Raised when training hits a non-finite loss; carries a state dump."""

    def __init__(self, message: str, state: "TrainState | None" = None):
        super().__init__(message)
        self.state = state


@dataclass
class AnnealSchedule:
    start: float = 0.1
    end: float = 1.0
    span: int = 10
    unit: str = "epochs"  # or "iterations"


@dataclass
class TrainConfig:
    mode: str = "basic"
    beta: float = 1.0
    anneal: AnnealSchedule = field(default_factory=AnnealSchedule)
    inner_patience: int = 10
    inner_budget: int | None = None  # fixed budget overrides patience
    inner_max: int = 100             # hard cap on one inner loop
    encoder_lr: float = 0.01
    decoder_lr: float = 1.0
    optimizer: str = "sgd"  # decoder optimizer: "sgd" or "adam"
    encoder_optimizer: str = "adam"
    lr_decay_factor: float = 2.0
    lr_decay_patience: int = 2
    lr_max_decays: int = 5
    clip_norm: float | None = 5.0
    batch_size: int = 32
    max_epochs: int = 60
    seed: int = 0
    monitor_iw_samples: int = 50
    monitor_iw_every: int = 1  # 0 disables per-epoch IW monitoring
    mi_samples_per_x: int = 1

    def __post_init__(self):
        if isinstance(self.anneal, dict):
            self.anneal = AnnealSchedule(**self.anneal)
        if self.mode not in MODES:
            raise ValueError(f"unknown mode '{self.mode}'; valid: {', '.join(MODES)}")
        if self.encoder_lr <= 0 or self.decoder_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.inner_patience < 1:
            raise ValueError("inner-loop patience must be at least 1")
        if not 0.0 < self.beta <= 1.0:
            raise ValueError("beta must be in (0, 1]")


@dataclass
class TrainState:
    epoch: int = 0
    generator_updates: int = 0
    inference_updates: int = 0
    aggressive: bool = False
    best_val_loss: float = math.inf
    epochs_since_improvement: int = 0
    decay_count: int = 0
    mi_history: list[float] = field(default_factory=list)
    kl_weight: float = 1.0
    lr_scale: float = 1.0
    terminated: bool = False


# -- schedules ------------------------------------------------------------


def kl_weight(config: TrainConfig, epoch: int, iteration: int) -> float:
    """Current KL weight for the configured mode.

    Epoch-based annealing interpolates linearly from start at epoch 0 to
    end at epoch ``span``; iteration-based annealing interpolates over
    ``span`` iterations. Beta mode is constant; other modes use 1.0.
    """
    if config.mode == "beta":
        return config.beta
    if config.mode in ("annealing", "aggressive_annealing"):
        sched = config.anneal
        t = epoch if sched.unit == "epochs" else iteration
        if t >= sched.span:
            return sched.end
        return sched.start + (sched.end - sched.start) * (t / sched.span)
    return 1.0


class LrSchedule:
    """Halve learning rates after N non-improving epochs; terminate after
    the configured number of decays."""

    def __init__(self, factor: float, patience: int, max_decays: int):
        self.factor = factor
        self.patience = patience
        self.max_decays = max_decays

    def step(self, state: TrainState, val_loss: float) -> bool:
        """Update state from one epoch's validation loss; True means stop."""
        if val_loss < state.best_val_loss:
            state.best_val_loss = val_loss
            state.epochs_since_improvement = 0
            return False
        state.epochs_since_improvement += 1
        if state.epochs_since_improvement >= self.patience:
            state.decay_count += 1
            state.lr_scale /= self.factor
            state.epochs_since_improvement = 0
            if state.decay_count >= self.max_decays:
                state.terminated = True
                return True
        return False


def update_aggressive_flag(state: TrainState, validation_mi: float) -> bool:
    """Latch the aggressive flag off the first epoch MI stops climbing."""
    if state.aggressive:
        if state.mi_history and validation_mi <= state.mi_history[-1]:
            state.aggressive = False
    state.mi_history.append(validation_mi)
    return state.aggressive


# -- optimizers -----------------------------------------------------------


class Sgd:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: dict[str, Tensor], lr_scale: float = 1.0) -> None:
        for name, p in params.items():
            if p.grad is None:
                continue
            if not np.all(np.isfinite(p.grad)):
                raise TrainingError(f"non-finite gradient for parameter '{name}'")
            p.data -= self.lr * lr_scale * p.grad

    def state_dict(self) -> dict:
        return {"kind": "sgd"}

    def load_state_dict(self, state: dict, params: dict[str, Tensor]) -> None:
        pass


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, params: dict[str, Tensor], lr_scale: float = 1.0) -> None:
        for name, p in params.items():
            if p.grad is None:
                continue
            if not np.all(np.isfinite(p.grad)):
                raise TrainingError(f"non-finite gradient for parameter '{name}'")
            g = p.grad
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
                self.t[name] = 0
            v = self.v[name]
            self.t[name] += 1
            t = self.t[name]
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            p.data -= self.lr * lr_scale * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self) -> dict:
        return {"kind": "adam",
                "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()},
                "t": dict(self.t)}

    def load_state_dict(self, state: dict, params: dict[str, Tensor]) -> None:
        self.m = {k: np.asarray(v) for k, v in state["m"].items()}
        self.v = {k: np.asarray(v) for k, v in state["v"].items()}
        self.t = {k: int(v) for k, v in state["t"].items()}


def make_optimizer(kind: str, lr: float):
    if kind == "sgd":
        return Sgd(lr)
    if kind == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer '{kind}'")


def clip_gradients(params: dict[str, Tensor], max_norm: float | None) -> None:
    if max_norm is None:
        return
    grads = [p.grad for p in params.values() if p.grad is not None]
    if not grads:
        return
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale


def zero_gradients(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


# -- inner-loop control ---------------------------------------------------


def run_inner_loop(step_fn: Callable[[], float], patience: int,
                   budget: int | None, hard_cap: int = 100) -> int:
    """Drive encoder-only updates until convergence or budget exhaustion.

    ``step_fn`` performs one update and returns that minibatch's objective
    value. With a fixed budget, exactly ``budget`` steps run. Otherwise the
    loop exits once the objective, averaged over the last ``patience``
    steps, fails to exceed the previous ``patience``-step average (minibatch
    values are too noisy to compare individually), or at ``hard_cap``.
    """
    if budget is not None:
        for _ in range(budget):
            step_fn()
        return budget
    prev_avg = -math.inf
    block = 0.0
    steps = 0
    while steps < hard_cap:
        block += step_fn()
        steps += 1
        if steps % patience == 0:
            avg = block / patience
            if avg <= prev_avg:
                break
            prev_avg = avg
            block = 0.0
    return steps


# -- random streams -------------------------------------------------------

STREAM_NAMES = ("init", "shuffle", "sample", "dropout", "reparam", "eval")


class RngStreams:
    """Named substreams fanned out from one master seed.

    Each purpose gets an independent generator so e.g. evaluation sampling
    never perturbs the training trajectory.
    """

    def __init__(self, master_seed: int):
        self.master_seed = master_seed
        self.streams = {
            name: np.random.Generator(np.random.PCG64(
                np.random.SeedSequence(entropy=master_seed, spawn_key=(i,))))
            for i, name in enumerate(STREAM_NAMES)}

    def __getitem__(self, name: str) -> np.random.Generator:
        return self.streams[name]

    def state_dict(self) -> dict:
        return {name: g.bit_generator.state for name, g in self.streams.items()}

    def load_state_dict(self, state: dict) -> None:
        for name, s in state.items():
            self.streams[name].bit_generator.state = s


# -- the loop -------------------------------------------------------------


def _one_update(model: VaeModel, batch, beta: float, params: dict[str, Tensor],
                optimizer, config: TrainConfig, state: TrainState,
                rngs: RngStreams) -> float:
    """Forward/backward on one minibatch, then update the given params."""
    noise = rngs["reparam"].normal(size=(batch.ids.shape[0], model.latent_dim))
    breakdown = model.elbo(batch.ids, batch.mask, beta, noise,
                           training=True, dropout_rng=rngs["dropout"])
    loss = -breakdown.objective
    if not math.isfinite(loss.item()):
        raise TrainingError(
            f"non-finite loss at epoch {state.epoch} "
            f"(gen updates {state.generator_updates})", state)
    zero_gradients(params)
    loss.backward()
    clip_gradients(params, config.clip_norm)
    optimizer.step(params, lr_scale=state.lr_scale)
    zero_gradients(params)
    return breakdown.objective.item()


def train(model: VaeModel, ds: Dataset, config: TrainConfig,
          rngs: RngStreams | None = None,
          state: TrainState | None = None,
          optimizers: tuple | None = None,
          on_epoch: Callable[..., None] | None = None,
          quiet: bool = True):
    """Run the full training procedure; returns (model, metrics history).

    ``on_epoch(state, model, record, rngs)`` fires after each epoch's
    metrics are recorded, before termination checks take effect, so callers
    can checkpoint at exact epoch boundaries.
    """
    if rngs is None:
        rngs = RngStreams(config.seed)
    if state is None:
        state = TrainState()
        state.aggressive = config.mode in ("aggressive", "aggressive_annealing")
    theta = model.generator_parameters()
    phi = model.inference_parameters()
    if optimizers is None:
        opt_theta = make_optimizer(config.optimizer, config.decoder_lr)
        opt_phi = make_optimizer(config.encoder_optimizer, config.encoder_lr)
    else:
        opt_theta, opt_phi = optimizers
    schedule = LrSchedule(config.lr_decay_factor, config.lr_decay_patience,
                          config.lr_max_decays)
    history: list[diag.MetricsRecord] = []

    while state.epoch < config.max_epochs and not state.terminated:
        for batch in batches(ds.train, config.batch_size, rngs["shuffle"]):
            beta = kl_weight(config, state.epoch, state.generator_updates)
            state.kl_weight = beta
            if state.aggressive:
                def inner_step():
                    idx = rngs["sample"].integers(0, len(ds.train),
                                                  size=config.batch_size)
                    inner_batch = make_batch(ds.train, idx)
                    value = _one_update(model, inner_batch, beta, phi,
                                        opt_phi, config, state, rngs)
                    state.inference_updates += 1
                    return value

                run_inner_loop(inner_step, config.inner_patience,
                               config.inner_budget, config.inner_max)
                _one_update(model, batch, beta, theta, opt_theta,
                            config, state, rngs)
                state.generator_updates += 1
            else:
                joint = {**theta, **phi}
                noise = rngs["reparam"].normal(
                    size=(batch.ids.shape[0], model.latent_dim))
                breakdown = model.elbo(batch.ids, batch.mask, beta, noise,
                                       training=True, dropout_rng=rngs["dropout"])
                loss = -breakdown.objective
                if not math.isfinite(loss.item()):
                    raise TrainingError(
                        f"non-finite loss at epoch {state.epoch}", state)
                zero_gradients(joint)
                loss.backward()
                clip_gradients(joint, config.clip_norm)
                opt_theta.step(theta, lr_scale=state.lr_scale)
                opt_phi.step(phi, lr_scale=state.lr_scale)
                zero_gradients(joint)
                state.generator_updates += 1
                state.inference_updates += 1

        record = evaluate_epoch(model, ds, config, state, rngs)
        history.append(record)
        if state.aggressive:
            update_aggressive_flag(state, record.mi)
        else:
            state.mi_history.append(record.mi)
        schedule.step(state, record.neg_elbo)
        state.epoch += 1
        if on_epoch is not None:
            on_epoch(state, model, record, rngs)
        if not quiet:
            print(f"epoch {state.epoch}: -elbo={record.neg_elbo:.3f} "
                  f"kl={record.kl:.3f} mi={record.mi:.3f} au={record.au} "
                  f"aggressive={record.aggressive}")
    return model, history


def evaluate_epoch(model: VaeModel, ds: Dataset, config: TrainConfig,
                   state: TrainState, rngs: RngStreams) -> diag.MetricsRecord:
    """Validation metrics at an epoch boundary (dropout off, eval stream)."""
    rng = rngs["eval"]
    neg_elbo, kl = diag.validation_elbo(model, ds.val, rng,
                                        batch_size=config.batch_size)
    mi, agg_kl = diag.mutual_info(model, ds.val, config.mi_samples_per_x, rng)
    au, _ = diag.active_units(model, ds.val)
    iw = math.nan
    if config.monitor_iw_every and (state.epoch + 1) % config.monitor_iw_every == 0:
        iw = diag.iw_nll(model, ds.val, config.monitor_iw_samples, rng)
    return diag.MetricsRecord(
        epoch=state.epoch, neg_elbo=neg_elbo, kl=kl, iw_nll=iw, mi=mi,
        agg_kl=agg_kl, au=au,
        lr=config.decoder_lr * state.lr_scale,
        kl_weight=state.kl_weight, aggressive=state.aggressive)


def config_to_dict(config: TrainConfig) -> dict:
    return asdict(config)
