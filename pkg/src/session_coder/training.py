"""Losses, Adam, batching and the early-stopped training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .data import CODES, Example, class_weights
from .model import ModelConfig, ModelParams, forward, init_params, predict_total
from .numerics import GradTape, Parameter, Tensor

logger = logging.getLogger(__name__)

PROB_CLIP = 1e-12


class ProtocolError(ValueError):
    """Train/validation split violates the no-therapist-overlap rule."""


def default_batch_size(role_filter: str) -> int:
    return 128 if role_filter == "therapist_only" else 64


def default_max_len(role_filter: str) -> int:
    return 256 if role_filter == "therapist_only" else 512


@dataclass
class TrainConfig:
    mode: str = "multi_task"
    learning_rate: float = 0.001
    max_epochs: int = 200
    patience: int = 10
    role_filter: str = "therapist_only"
    batch_size: int | None = None
    max_len: int | None = None
    metadata_enabled: bool = True
    hidden_units: int = 64
    attention_units: int = 10
    mlp_units: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.batch_size is None:
            self.batch_size = default_batch_size(self.role_filter)
        if self.max_len is None:
            self.max_len = default_max_len(self.role_filter)
        if self.batch_size < 1 or self.patience < 1 or self.max_epochs < 1:
            raise ValueError("batch_size, patience and max_epochs must be >= 1")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Parameter]) -> "AdamState":
        return cls(
            m={p.name: np.zeros_like(p.data) for p in params},
            v={p.name: np.zeros_like(p.data) for p in params},
        )


def adam_step(params: Sequence[Parameter], state: AdamState, lr: float = 0.001) -> None:
    """Bias-corrected Adam update; clears the gradients afterwards."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p in params:
        g = p.grad
        m = state.m[p.name]
        v = state.v[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.zero_grad()


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0

    def to_json(self) -> dict:
        return {
            "epochs": [{"train_loss": t, "val_loss": v} for t, v in zip(self.train_loss, self.val_loss)],
            "best_epoch": self.best_epoch,
            "stopped_epoch": self.stopped_epoch,
        }


class EarlyStopping:
    """Tracks the best validation loss; ``update`` returns True when training should stop.

    Epochs are numbered from 1.
    """

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.wait = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = epoch
            self.wait = 0
            return False
        self.wait += 1
        return self.wait >= self.patience


def weighted_bce(p_hat, y, w0: float = 1.0, w1: float = 1.0) -> Tensor:
    """Mean over samples of -w_y [y ln p + (1 - y) ln(1 - p)]."""
    y = np.asarray(y, dtype=np.float64)
    p = nx.clip(p_hat, PROB_CLIP, 1.0 - PROB_CLIP)
    w = np.where(y == 1, w1, w0)
    ll = nx.log(p) * y + nx.log(1.0 - p) * (1.0 - y)
    return (ll * (-w)).mean()


def multi_task_loss(preds, targets) -> tuple[Tensor, Tensor]:
    """Sum over codes of the per-code mean squared error across the batch.

    Returns ``(L, per_code)`` where ``per_code`` has one entry per code.
    """
    preds = nx._lift(preds)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.data.ndim == 1:
        preds = preds.reshape(1, -1)
        targets = targets.reshape(1, -1)
    per_code = nx.square(preds - targets).mean(axis=0)
    return per_code.sum(), per_code


@dataclass
class Batch:
    session_ids: list[str]
    X: np.ndarray  # B x T x d
    mask: np.ndarray  # B x T
    meta: np.ndarray  # B x m
    codes: np.ndarray  # B x 11
    labels: np.ndarray  # B

    def __len__(self) -> int:
        return len(self.session_ids)


def collate(examples: Sequence[Example], max_len: int) -> Batch:
    """Stack examples, zero-padding to the longest retained length in the batch.

    Outputs are invariant to extra padding, so padding to ``max_len`` itself
    would change nothing but the cost.
    """
    lengths = [min(len(e.matrix), max_len) for e in examples]
    T = max(lengths)
    d = examples[0].matrix.shape[1]
    X = np.zeros((len(examples), T, d))
    mask = np.zeros((len(examples), T))
    for i, (e, n) in enumerate(zip(examples, lengths)):
        X[i, :n] = e.matrix[:n]
        mask[i, :n] = 1.0
    return Batch(
        session_ids=[e.session_id for e in examples],
        X=X,
        mask=mask,
        meta=np.stack([e.meta for e in examples]),
        codes=np.stack([e.codes for e in examples]),
        labels=np.array([e.label for e in examples], dtype=np.float64),
    )


def make_batches(dataset: Sequence[Example], batch_size: int, max_len: int, epoch_seed=None) -> list[Batch]:
    """Shuffle (when ``epoch_seed`` is given) and cut into padded batches.

    ``epoch_seed`` is an int or a ``(seed, epoch)`` pair.
    """
    if not dataset:
        raise ValueError("cannot batch an empty dataset")
    order = np.arange(len(dataset))
    if epoch_seed is not None:
        seq = list(epoch_seed) if isinstance(epoch_seed, (tuple, list)) else [epoch_seed]
        order = np.random.default_rng(seq).permutation(len(dataset))
    return [
        collate([dataset[i] for i in order[start:start + batch_size]], max_len)
        for start in range(0, len(dataset), batch_size)
    ]


def batch_loss(params: ModelParams, batch: Batch, weights: tuple[float, float]) -> Tensor:
    out, _ = forward(batch.X, batch.mask, batch.meta, params)
    if params.mode == "single_task":
        return weighted_bce(out, batch.labels, *weights)
    return multi_task_loss(out, batch.codes)[0]


def dataset_loss(params: ModelParams, batches: Sequence[Batch], weights: tuple[float, float]) -> float:
    """Sample-weighted mean loss over fixed batches, no tape."""
    total, n = 0.0, 0
    for b in batches:
        total += batch_loss(params, b, weights).item() * len(b)
        n += len(b)
    return total / n


def model_config_for(config: TrainConfig, examples: Sequence[Example]) -> ModelConfig:
    return ModelConfig(
        mode=config.mode,
        d=examples[0].matrix.shape[1],
        hidden_units=config.hidden_units,
        attention_units=config.attention_units,
        mlp_units=config.mlp_units,
        meta_width=examples[0].meta.shape[0],
        max_len=config.max_len,
    )


def check_disjoint(train: Sequence[Example], val: Sequence[Example]) -> None:
    overlap = {e.therapist_id for e in train} & {e.therapist_id for e in val}
    if overlap:
        raise ProtocolError(f"therapists in both train and validation: {sorted(overlap)}")


def train(
    dataset_train: Sequence[Example],
    dataset_val: Sequence[Example],
    config: TrainConfig,
    init_seed: int | None = None,
    shuffle_seed: int | None = None,
) -> tuple[ModelParams, TrainHistory]:
    """Fit a model with Adam and early stopping; returns the best-validation parameters."""
    if not dataset_train or not dataset_val:
        raise ValueError("train and validation sets must be non-empty")
    check_disjoint(dataset_train, dataset_val)
    init_seed = config.seed if init_seed is None else init_seed
    shuffle_seed = config.seed if shuffle_seed is None else shuffle_seed

    params = init_params(model_config_for(config, dataset_train), init_seed)
    plist = params.named_parameters()
    state = AdamState.for_params(plist)
    if config.mode == "single_task":
        weights = class_weights([e.label for e in dataset_train])
    else:
        weights = (1.0, 1.0)
    val_batches = make_batches(dataset_val, config.batch_size, config.max_len)

    history = TrainHistory()
    stopper = EarlyStopping(config.patience)
    best_state = params.state()
    for epoch in range(1, config.max_epochs + 1):
        running, seen = 0.0, 0
        for batch in make_batches(dataset_train, config.batch_size, config.max_len, (shuffle_seed, epoch)):
            with GradTape() as tape:
                loss = batch_loss(params, batch, weights)
            tape.backward(loss)
            adam_step(plist, state, config.learning_rate)
            running += loss.item() * len(batch)
            seen += len(batch)
        val = dataset_loss(params, val_batches, weights)
        history.train_loss.append(running / seen)
        history.val_loss.append(val)
        stop = stopper.update(epoch, val)
        if stopper.best_epoch == epoch:
            best_state = params.state()
        logger.debug("epoch %d train %.6f val %.6f", epoch, running / seen, val)
        if stop:
            break
    history.best_epoch = stopper.best_epoch
    history.stopped_epoch = epoch
    params.load_state(best_state)
    return params, history


def predict(params: ModelParams, dataset: Sequence[Example], batch_size: int = 64) -> dict[str, dict]:
    """Per-session predictions keyed by session_id.

    Single-task entries hold ``prob`` and ``label``; multi-task entries hold
    clamped ``codes``, ``total`` and ``label``.
    """
    out = {}
    for batch in make_batches(dataset, batch_size, params.config.max_len):
        y, _ = forward(batch.X, batch.mask, batch.meta, params)
        for i, sid in enumerate(batch.session_ids):
            if params.mode == "single_task":
                prob = float(y.data[i])
                out[sid] = {"prob": prob, "label": int(prob >= 0.5)}
            else:
                clamped, total, label = predict_total(y.data[i])
                out[sid] = {"codes": dict(zip(CODES, clamped.tolist())), "total": total, "label": label}
    return out
