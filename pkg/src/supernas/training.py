"""Supernet training: warm-up of the largest candidate, then sampled distillation.

Each main-phase iteration zeroes every gradient, trains the largest
candidate with cross entropy, then samples ``K`` candidates uniformly and
trains each against the largest candidate's (detached) logits. Gradients
from all ``K + 1`` backward passes accumulate before a single SGD update.
"""
from __future__ import annotations

import copy
import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError, Tensor
from .data import AugmentPolicy, BatchStream, Dataset
from .space import SearchSpace, SubnetEncoding
from .supernet import DenseNet, SupernetParams, init_supernet, progressive_split, slice_forward

log = logging.getLogger(__name__)

GRAD_NORMALIZATIONS = ("sum", "mean_over_networks")


def derive_seed(seed: int, *keys) -> int:
    """Seed of the named substream ``keys`` under the global ``seed``.

    The first 8 bytes of SHA-256 over ``"seed/key1/key2..."``, masked to 63 bits.
    """
    text = "/".join(str(k) for k in (seed,) + keys)
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little") & ((1 << 63) - 1)


@dataclass
class TrainConfig:
    iterations: int = 100
    samples_per_step: int = 8
    batch_size: int = 64
    lr_init: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    alpha: float = 0.5
    seed: int = 0
    grad_normalization: str = "mean_over_networks"
    warmup_iterations: int = 0
    warmup_lr: float = 0.1
    augment: bool = False

    def __post_init__(self):
        if self.samples_per_step < 0:
            raise ValueError("samples_per_step (K) must be >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.lr_init <= 0 or self.warmup_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.iterations < 0 or self.warmup_iterations < 0:
            raise ValueError("iteration budgets must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 for batch norm")
        if self.grad_normalization not in GRAD_NORMALIZATIONS:
            raise ValueError(f"grad_normalization must be one of {GRAD_NORMALIZATIONS}")

    def to_dict(self) -> dict:
        return asdict(self)


class Sampler:
    """Uniform, independent per-layer channel choices from a seeded stream."""

    def __init__(self, space: SearchSpace, seed: int):
        self.space = space
        self.rng = np.random.default_rng(seed)

    def sample(self) -> SubnetEncoding:
        return SubnetEncoding(tuple(
            layer.options[int(self.rng.integers(len(layer.options)))] for layer in self.space.layers
        ))

    def get_state(self) -> dict:
        return self.rng.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.rng.bit_generator.state = state


def sample_uniform(sampler: Sampler) -> SubnetEncoding:
    return sampler.sample()


def distill_loss(student: Tensor, teacher, labels, alpha: float) -> Tensor:
    """``(1 - alpha) * CE(student, labels) + alpha * KL(teacher || student)``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha == 0.0:
        return ad.softmax_cross_entropy(student, labels)
    if alpha == 1.0:
        return ad.kl_divergence(student, teacher)
    return ad.add(ad.scale(ad.softmax_cross_entropy(student, labels), 1.0 - alpha),
                  ad.scale(ad.kl_divergence(student, teacher), alpha))


def cosine_lr(t: int, T: int, lr_init: float) -> float:
    if T <= 0:
        raise ValueError("cosine schedule needs T > 0")
    if not 0 <= t <= T:
        raise ValueError(f"step {t} outside [0, {T}]")
    return lr_init * 0.5 * (1.0 + math.cos(math.pi * t / T))


def sgd_update(w: np.ndarray, g: np.ndarray, v: np.ndarray, lr: float, momentum: float,
               weight_decay: float) -> tuple[np.ndarray, np.ndarray]:
    """One heavy-ball step: ``v <- m v + (g + wd w)``, ``w <- w - lr v``."""
    v = momentum * v + (g + weight_decay * w if weight_decay else g)
    return w - lr * v, v


class SGD:
    """SGD with momentum; weight decay only on tensors flagged for it (conv/linear weights)."""

    def __init__(self, named_tensors: Iterable[tuple[str, Tensor, bool]], momentum: float = 0.9,
                 weight_decay: float = 5e-4):
        self.entries = list(named_tensors)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(t.data) for name, t, _ in self.entries}

    def step(self, lr: float, grad_scale: float = 1.0) -> None:
        for name, t, decay in self.entries:
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in {name}")
            if grad_scale != 1.0:
                g = g * grad_scale
            w, v = sgd_update(t.data, g, self.velocity[name], lr, self.momentum,
                              self.weight_decay if decay else 0.0)
            t.data[...] = w
            self.velocity[name] = v


def sgd_step(params, lr: float, momentum: float, weight_decay: float, velocity: Optional[dict] = None) -> dict:
    """Functional form over an object exposing ``named_tensors()``; returns the new velocities."""
    opt = SGD(params.named_tensors(), momentum, weight_decay)
    if velocity is not None:
        opt.velocity.update({k: v.copy() for k, v in velocity.items()})
    opt.step(lr)
    return opt.velocity


def accumulate_step(params: SupernetParams, images: np.ndarray, labels: np.ndarray,
                    encodings: list[SubnetEncoding], alpha: float) -> dict:
    """The gradient part of one iteration: add all K + 1 gradients into the grad buffers.

    Does not zero gradients or update weights. Returns the per-network losses.
    """
    x = Tensor(images)
    logits = slice_forward(params, params.space.max_encoding(), x, mode="train")
    ce = ad.softmax_cross_entropy(logits, labels)
    ce.backward()
    teacher = logits.data.copy()
    losses = [float(ce.data)]
    for enc in encodings:
        out = slice_forward(params, enc, x, mode="train")
        loss = distill_loss(out, teacher, labels, alpha)
        loss.backward()
        losses.append(float(loss.data))
    return {"ce_largest": losses[0], "distill": losses[1:]}


@dataclass
class TrainerState:
    """Everything needed to resume supernet training bit-exactly."""

    params: SupernetParams
    config: TrainConfig
    phase: str = "warmup"  # warmup | train | done
    iteration: int = 0
    velocity: dict = field(default_factory=dict)
    sampler_state: Optional[dict] = None
    lr: float = 0.0
    history: list = field(default_factory=list)  # learning rates of completed stages


class SupernetTrainer:
    """Runs the warm-up and main phases of one training stage.

    Batches and augmentation are pure functions of (seed, phase, stage,
    iteration), so only optimizer velocities and the sampler stream need to
    be carried across a checkpoint.
    """

    def __init__(self, state: TrainerState, data: Dataset,
                 metrics: Optional[Callable[[dict], None]] = None):
        self.state = state
        self.data = data
        self.metrics = metrics
        cfg = state.config
        self.sampler = Sampler(state.params.space, derive_seed(cfg.seed, "sampler", state.params.stage))
        if state.sampler_state is not None:
            self.sampler.set_state(state.sampler_state)
        self.optimizer = self._new_optimizer()
        if state.velocity:
            for k, v in state.velocity.items():
                self.optimizer.velocity[k] = v.copy()

    @classmethod
    def fresh(cls, params: SupernetParams, data: Dataset, config: TrainConfig, metrics=None,
              skip_warmup: bool = False) -> "SupernetTrainer":
        phase = "warmup" if config.warmup_iterations > 0 and not skip_warmup else "train"
        return cls(TrainerState(params, config, phase=phase), data, metrics)

    def _new_optimizer(self) -> SGD:
        cfg = self.state.config
        return SGD(self.state.params.named_tensors(), cfg.momentum, cfg.weight_decay)

    def _stream(self, phase: str) -> BatchStream:
        cfg = self.state.config
        policy = AugmentPolicy() if cfg.augment else None
        return BatchStream(self.data, cfg.batch_size, derive_seed(cfg.seed, phase, self.state.params.stage), policy)

    def snapshot(self) -> TrainerState:
        st = self.state
        st.velocity = {k: v.copy() for k, v in self.optimizer.velocity.items()}
        st.sampler_state = copy.deepcopy(self.sampler.get_state())
        return copy.deepcopy(st)

    def _advance_phase(self) -> None:
        st, cfg = self.state, self.state.config
        if st.phase == "warmup" and st.iteration >= cfg.warmup_iterations:
            st.phase, st.iteration = "train", 0
            self.optimizer = self._new_optimizer()
        if st.phase == "train" and st.iteration >= cfg.iterations:
            st.phase = "done"

    def run(self, max_steps: Optional[int] = None) -> SupernetParams:
        """Advance up to ``max_steps`` optimizer updates (all remaining if None)."""
        st = self.state
        steps = 0
        self._advance_phase()
        while st.phase != "done" and (max_steps is None or steps < max_steps):
            if st.phase == "warmup":
                self._warmup_step()
            else:
                self._train_step()
            steps += 1
            self._advance_phase()
        return st.params

    def _warmup_step(self) -> None:
        st, cfg = self.state, self.state.config
        x, y = self._stream("warmup").batch(st.iteration)
        params = st.params
        params.zero_grad()
        loss = ad.softmax_cross_entropy(slice_forward(params, params.space.max_encoding(), Tensor(x)), y)
        loss.backward()
        st.lr = cosine_lr(st.iteration, cfg.warmup_iterations, cfg.warmup_lr)
        self.optimizer.step(st.lr)
        self._emit("warmup", float(loss.data))
        st.iteration += 1

    def _train_step(self) -> None:
        st, cfg = self.state, self.state.config
        x, y = self._stream("train").batch(st.iteration)
        params = st.params
        params.zero_grad()
        encodings = [self.sampler.sample() for _ in range(cfg.samples_per_step)]
        losses = accumulate_step(params, x, y, encodings, cfg.alpha)
        scale = 1.0 / (cfg.samples_per_step + 1) if cfg.grad_normalization == "mean_over_networks" else 1.0
        st.lr = cosine_lr(st.iteration, cfg.iterations, cfg.lr_init)
        self.optimizer.step(st.lr, grad_scale=scale)
        d = losses["distill"]
        self._emit("train", losses["ce_largest"], float(np.mean(d)) if d else None)
        st.iteration += 1

    def _emit(self, phase: str, loss: float, distill: Optional[float] = None) -> None:
        if not math.isfinite(loss):
            raise NumericError(f"loss diverged at {phase} iteration {self.state.iteration}")
        if self.metrics is not None:
            rec = {"stage": self.state.params.stage, "phase": phase, "iteration": self.state.iteration,
                   "lr": self.state.lr, "loss": loss}
            if distill is not None:
                rec["distill_loss"] = distill
            self.metrics(rec)


def warmup_largest(params: SupernetParams, data: Dataset, config: TrainConfig, metrics=None) -> SupernetParams:
    """Train only the all-max candidate with cross entropy for ``config.warmup_iterations``."""
    if config.warmup_iterations == 0:
        return params
    trainer = SupernetTrainer.fresh(params, data, _with(config, iterations=0), metrics)
    return trainer.run()


def train_supernet(params: SupernetParams, data: Dataset, config: TrainConfig, metrics=None) -> SupernetParams:
    """The main loop only (warm-up assumed done or skipped)."""
    trainer = SupernetTrainer.fresh(params, data, config, metrics, skip_warmup=True)
    return trainer.run()


def _with(cfg: TrainConfig, **changes) -> TrainConfig:
    d = cfg.to_dict()
    d.update(changes)
    return TrainConfig(**d)


def run_progressive_pipeline(
    space: SearchSpace,
    data: Dataset,
    stage_configs: list[TrainConfig],
    init_seed: int = 0,
    metrics=None,
    start: Optional[TrainerState] = None,
    on_stage_end: Optional[Callable[[TrainerState], None]] = None,
) -> list[TrainerState]:
    """Train stage 1 from scratch (with warm-up), then split and fine-tune per stage.

    Returns a snapshot after each completed stage. ``start`` resumes from a
    checkpointed stage; later stages split from the latest snapshot.
    """
    if not 1 <= len(stage_configs) <= 3:
        raise ValueError("between one and three stage configs are required")
    results: list[TrainerState] = []
    history: list = []
    if start is None:
        params = init_supernet(space, init_seed)
        trainer = SupernetTrainer.fresh(params, data, stage_configs[0], metrics)
    else:
        trainer = SupernetTrainer(copy.deepcopy(start), data, metrics)
        history = list(start.history)
    while True:
        trainer.run()
        stage = trainer.state.params.stage
        snap = trainer.snapshot()
        snap.history = history + [{"stage": stage, "lr_init": snap.config.lr_init}]
        history = snap.history
        results.append(snap)
        if on_stage_end is not None:
            on_stage_end(snap)
        if stage >= len(stage_configs):
            return results
        params = progressive_split(trainer.state.params)
        trainer = SupernetTrainer.fresh(params, data, stage_configs[stage], metrics, skip_warmup=True)


def train_dense(net: DenseNet, data: Dataset, config: TrainConfig, metrics=None) -> DenseNet:
    """Plain cross-entropy training of a stand-alone network (the warm-up step rule)."""
    if config.iterations == 0:
        return net
    opt = SGD(net.named_tensors(), config.momentum, config.weight_decay)
    policy = AugmentPolicy() if config.augment else None
    stream = BatchStream(data, config.batch_size, derive_seed(config.seed, "standalone"), policy)
    for t in range(config.iterations):
        x, y = stream.batch(t)
        net.zero_grad()
        loss = ad.softmax_cross_entropy(net.forward(Tensor(x), mode="train"), y)
        if not math.isfinite(float(loss.data)):
            raise NumericError(f"stand-alone loss diverged at iteration {t}")
        loss.backward()
        lr = cosine_lr(t, config.iterations, config.lr_init)
        opt.step(lr)
        if metrics is not None:
            metrics({"phase": "standalone", "iteration": t, "lr": lr, "loss": float(loss.data)})
    return net
