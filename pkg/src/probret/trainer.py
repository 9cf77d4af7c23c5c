"""Mini-batch AdaGrad training of the two-tower model."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from typing import Callable, List, Optional

import numpy as np

from . import losses
from .data import ClickLogDataset
from .model import (TwoTowerModel, Vocabulary, backward, forward, head_backward,
                    head_forward, init_model)

__all__ = ["LOSSES", "TrainConfig", "AdaGradState", "TrainingError", "TrainingTrace",
           "adagrad_step", "train", "batch_loss"]

log = logging.getLogger(__name__)

LOSSES = ("pointwise", "pairwise", "infonce", "expnce", "betance", "mle")
TAU_LOSSES = ("infonce", "expnce", "betance")


class TrainingError(ArithmeticError):
    """Non-finite loss; ``step`` is the 1-based step that produced it."""

    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    loss: str = "betance"
    learning_rate: float = 0.05
    batch_size: int = 64
    steps: int = 5000
    seed: int = 0
    global_tau: Optional[float] = None
    checkpoint_every: int = 0
    dim: int = 32
    hidden: int = 64
    corrected_pointwise: bool = False

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.loss == "pairwise" and self.global_tau is None:
            self.global_tau = 0.1
        if self.global_tau is not None and not self.global_tau > 0:
            raise ValueError("global_tau must be > 0")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")

    @classmethod
    def from_mapping(cls, values) -> "TrainConfig":
        """Build from string key/values (config files); unknown keys raise."""
        kinds = {f.name: f.type for f in fields(cls)}
        kw = {}
        for key, raw in values.items():
            if key not in kinds:
                raise ValueError(f"unknown TrainConfig field {key!r}")
            kw[key] = _coerce(kinds[key], raw)
        return cls(**kw)


def _coerce(kind, raw):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    if "Optional" in str(kind):
        if raw.lower() in ("", "none"):
            return None
        return float(raw)
    if kind in ("int", int):
        return int(raw)
    if kind in ("float", float):
        return float(raw)
    if kind in ("bool", bool):
        return raw.lower() in ("1", "true", "yes", "on")
    return raw


@dataclass
class AdaGradState:
    accumulators: List[np.ndarray]
    epsilon: float = 1e-8

    @classmethod
    def zeros_like(cls, params: List[np.ndarray], epsilon: float = 1e-8) -> "AdaGradState":
        return cls([np.zeros_like(p) for p in params], epsilon)


def adagrad_step(params: List[np.ndarray], grads: List[np.ndarray], state: AdaGradState,
                 lr: float) -> None:
    """In place: ``acc += g**2; p -= lr * g / sqrt(acc + eps)``."""
    if len(params) != len(grads) or len(params) != len(state.accumulators):
        raise ValueError("params, grads and state must align")
    for p, g, acc in zip(params, grads, state.accumulators):
        if p.shape != g.shape or p.shape != acc.shape:
            raise ValueError(f"shape mismatch {p.shape} / {g.shape} / {acc.shape}")
        acc += g * g
        p -= lr * g / np.sqrt(acc + state.epsilon)


@dataclass
class TrainingTrace:
    losses: List[float] = field(default_factory=list)
    saturated: List[int] = field(default_factory=list)

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.losses)


def batch_loss(model: TwoTowerModel, config: TrainConfig, xq, xd):
    """Loss and gradients (aligned with ``model.parameters()``) for one batch."""
    q, qcache = forward(model.query_tower, xq)
    d, dcache = forward(model.item_tower, xd)
    tau, tau_s = head_forward(model.temperature_head, q)
    kind = config.loss
    batch = losses.Batch(q, d, tau if kind in TAU_LOSSES else None)
    shape_state = {}
    if kind == "pointwise":
        out = losses.pointwise_loss(batch, corrected=config.corrected_pointwise)
    elif kind == "pairwise":
        out = losses.pairwise_softmax_loss(batch, config.global_tau)
    elif kind == "infonce":
        out = losses.info_nce_loss(batch)
    elif kind == "expnce":
        out = losses.exp_nce_loss(batch)
    elif kind == "betance":
        out = losses.beta_nce_loss(batch)
    else:
        for name in ("alpha_pos", "beta_neg"):
            shape_state[name] = head_forward(model.heads[name], q)
        cfg = losses.MleDensityConfig(shape_state["alpha_pos"][0], shape_state["beta_neg"][0])
        out = losses.mle_beta_loss(batch, cfg)

    grad_q = out.grad_queries.copy()
    head = model.temperature_head
    if out.grad_tau is not None:
        gw, gb, gv = head_backward(head, q, tau_s, out.grad_tau)
        grad_q += gv
    else:
        gw, gb = np.zeros_like(head.weight), np.zeros_like(head.bias)
    head_grads = [gw, gb]
    for name in sorted(model.heads):
        h = model.heads[name]
        if name in shape_state:
            hw, hb, hv = head_backward(h, q, shape_state[name][1], out.grad_extra[name])
            grad_q += hv
            head_grads += [hw, hb]
        else:
            head_grads += [np.zeros_like(h.weight), np.zeros_like(h.bias)]
    grads = backward(model.query_tower, qcache, grad_q)
    grads += backward(model.item_tower, dcache, out.grad_positives)
    grads += head_grads
    return out, grads


def train(config: TrainConfig, data: ClickLogDataset, init: Optional[TwoTowerModel] = None,
          on_checkpoint: Optional[Callable[[int, TwoTowerModel], None]] = None):
    """Run ``config.steps`` AdaGrad updates; returns ``(model, trace)``.

    Batches are ``batch_size`` click pairs drawn uniformly with replacement
    from the deduplicated pairs, using a generator seeded with ``config.seed``.
    ``init`` is modified in place when given.
    """
    if data.num_pairs == 0:
        raise ValueError("empty dataset")
    extra = ("alpha_pos", "beta_neg") if config.loss == "mle" else ()
    if init is None:
        model = init_model(Vocabulary.from_texts(data.query_text),
                           Vocabulary.from_texts(data.item_text),
                           dim=config.dim, hidden=config.hidden, seed=config.seed,
                           extra_heads=extra)
    else:
        model = init
        missing = [h for h in extra if h not in model.heads]
        if missing:
            raise ValueError(f"initial model lacks heads {missing}")
    xq_all = model.query_vocab.featurize(data.query_text)
    xd_all = model.item_vocab.featurize(data.item_text)
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    state = AdaGradState.zeros_like(params)
    trace = TrainingTrace()
    for step in range(1, config.steps + 1):
        pick = rng.integers(0, data.num_pairs, config.batch_size)
        xq = xq_all[data.pair_query[pick]]
        xd = xd_all[data.pair_item[pick]]
        out, grads = batch_loss(model, config, xq, xd)
        if not np.isfinite(out.value) or not all(np.all(np.isfinite(g)) for g in grads):
            raise TrainingError(step, out.value)
        adagrad_step(params, grads, state, config.learning_rate)
        trace.losses.append(out.value)
        trace.saturated.append(out.saturated)
        if config.checkpoint_every and step % config.checkpoint_every == 0:
            log.info("step %d loss %.5f", step, np.mean(trace.losses[-config.checkpoint_every:]))
            if on_checkpoint is not None:
                on_checkpoint(step, model)
    return model, trace
