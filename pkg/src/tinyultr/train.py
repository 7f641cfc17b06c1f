"""Training loop with click-based early stopping, and hyperparameter sweeps."""

from __future__ import annotations

import dataclasses
import logging

from typing import Callable, Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np

import tinyultr.losses
import tinyultr.model
import tinyultr.utils

from tinyultr.corpus import ClickLog, Session
from tinyultr.exceptions import TrainingError, ValidationError
from tinyultr.losses import LossKind, LossSpec
from tinyultr.model import OptimizerState, ScoringModel
from tinyultr.propensity import MIN_PROPENSITY
from tinyultr.utils import Stream

log = logging.getLogger(__name__)

MIN_IMPROVEMENT = 1e-7
EVAL_CHUNK = 1024

Callback = Callable[[int, OptimizerState], None]


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters.

    Args:
        loss (LossSpec): Objective.
        lr (float): AdamW learning rate.
        weight_decay (float): Decoupled weight decay of the layer weights.
        dropout (float): Dropout rate of hidden activations.
        max_epochs (int): Epoch limit.
        patience (int): Epochs without validation improvement before stopping.
        batch_size (int): Sessions per optimizer step.
        seed (int): Initialisation, shuffling and dropout seed.
        hidden_dims (tuple[int]): Hidden layer widths.
        n_ranks (int): Ranks with per-rank parameters; defaults to the deepest rank in the logs.
    """

    loss: LossSpec
    lr: float = 1e-4
    weight_decay: float = 0.01
    dropout: float = 0.0
    max_epochs: int = 50
    patience: int = 5
    batch_size: int = 256
    seed: int = 0
    hidden_dims: Tuple[int, ...] = (512, 512, 512, 512)
    n_ranks: Optional[int] = None

    def __post_init__(self):
        if not isinstance(self.loss, LossSpec):
            raise ValidationError(f"'loss' expects a LossSpec, got {type(self.loss).__name__}.")

        object.__setattr__(self, "hidden_dims", tuple(int(each) for each in self.hidden_dims))

        if self.lr <= 0:
            raise ValidationError(f"lr must be positive, got {self.lr}.")

        if self.max_epochs < 1 or self.batch_size < 1:
            raise ValidationError("max_epochs and batch_size must be positive.")

        if not 0 < self.patience < self.max_epochs:
            raise ValidationError(
                f"patience must lie in 1..max_epochs - 1, got {self.patience} with max_epochs {self.max_epochs}."
            )

        if self.weight_decay < 0 or not 0.0 <= self.dropout < 1.0:
            raise ValidationError("weight_decay must be non-negative and dropout in [0, 1).")

        if self.n_ranks is not None and self.n_ranks < 1:
            raise ValidationError(f"n_ranks must be positive, got {self.n_ranks}.")

    def to_dict(self) -> dict:
        result = tinyultr.utils.to_jsonable(self)
        result["loss"] = self.loss.to_dict()
        return result

    @classmethod
    def from_dict(cls, data: Mapping) -> TrainConfig:
        """Return the config from a mapping; ``loss`` may be a kind name or a LossSpec mapping."""

        data = tinyultr.utils.check_keys(cls, data)
        loss = data.get("loss")

        if isinstance(loss, str):
            data["loss"] = LossSpec(loss)
        elif isinstance(loss, Mapping):
            data["loss"] = LossSpec.from_dict(loss)

        return cls(**data)


class EpochRecord(NamedTuple):
    epoch: int
    train_loss: float
    val_loss: float


@dataclasses.dataclass
class TrainedModel:
    """Best-validation snapshot with the training history.

    Args:
        model (ScoringModel): Parameters at the epoch with the lowest validation loss.
        history (list[EpochRecord]): Mean train and validation session loss per epoch.
        stopped_epoch (int): Last epoch run.
        best_epoch (int): Epoch of the returned snapshot.
    """

    model: ScoringModel
    history: List[EpochRecord]
    stopped_epoch: int
    best_epoch: int

    @property
    def best_val_loss(self) -> float:
        return self.history[self.best_epoch - 1].val_loss


def _offsets(sessions: Sequence[Session]) -> np.ndarray:
    return np.cumsum([0] + [len(session) for session in sessions])


def batch_gradient(
    model: ScoringModel,
    sessions: Sequence[Session],
    spec: LossSpec,
    train_mode: bool = False,
    seed: tinyultr.model.Seed = 0,
) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    """Return the per-session losses of a batch and the gradients of their sum.

    The batch is scored in one forward pass; session gradients are reduced in batch order.
    """

    sessions = [session for session in sessions if len(session)]
    params = model.params
    grads = {name: np.zeros_like(value) for name, value in params.items()}

    if not sessions:
        return np.zeros(0), grads

    offsets = _offsets(sessions)
    features = np.concatenate([session.features for session in sessions])
    scores = model.forward(features, train_mode, seed)
    position_params = model.position_params
    upstream = np.empty_like(scores)
    losses = np.empty(len(sessions))

    for i, session in enumerate(sessions):
        start, stop = offsets[i], offsets[i + 1]
        result = tinyultr.losses.compute(spec, scores[start:stop], session.clicks, session.ranks, position_params)

        losses[i] = result.loss
        upstream[start:stop] = result.d_scores

        for name, value in result.d_params.items():
            grads[name] += value

    grads.update(model.grad(features, upstream, train_mode, seed))

    return losses, grads


def log_gradient(model: ScoringModel, data: ClickLog, spec: LossSpec, batch_size: int = 256) -> Dict[str, np.ndarray]:
    """Return the gradient of the summed session losses over the whole log, accumulated per batch."""

    result = {name: np.zeros_like(value) for name, value in model.params.items()}

    for batch in tinyultr.utils.chunks(data.sessions, batch_size):
        __, grads = batch_gradient(model, batch, spec)

        for name, value in grads.items():
            result[name] += value

    return result


def session_losses(model: ScoringModel, data: ClickLog, spec: LossSpec) -> np.ndarray:
    """Return the loss of every non-empty session, with dropout off."""

    losses = [batch_gradient(model, batch, spec)[0] for batch in tinyultr.utils.chunks(data.sessions, EVAL_CHUNK)]

    return np.concatenate(losses) if losses else np.zeros(0)


def _renormalize_propensities(model: ScoringModel) -> None:
    for name in (tinyultr.model.PROPENSITIES_PLUS, tinyultr.model.PROPENSITIES_MINUS):
        values = model.params.get(name)

        if values is not None:
            np.maximum(values, MIN_PROPENSITY, out=values)
            values /= values[0]
            np.maximum(values, MIN_PROPENSITY, out=values)


def _check_logs(train_log: ClickLog, val_log: ClickLog) -> int:
    if not train_log.n_impressions or not val_log.n_impressions:
        raise ValidationError("Training and validation logs must be non-empty.")

    if train_log.n_features != val_log.n_features:
        raise ValidationError(
            f"Feature dimensionality differs: train {train_log.n_features}, validation {val_log.n_features}."
        )

    if not train_log.n_features:
        raise ValidationError("Cannot train on sessions without features.")

    return train_log.n_features


def train(
    train_log: ClickLog, val_log: ClickLog, cfg: TrainConfig, callbacks: Sequence[Callback] = ()
) -> TrainedModel:
    """Train a scorer on clicks.

    Each epoch shuffles the training sessions with a seeded generator and takes one AdamW step per
    ``batch_size`` sessions. After each epoch the mean validation session loss is computed with the
    same objective, the callbacks run, and training stops once ``patience`` epochs pass without the
    validation loss dropping by at least 1e-7.

    Args:
        train_log (ClickLog): Training sessions.
        val_log (ClickLog): Validation sessions.
        cfg (TrainConfig): Hyperparameters.
        callbacks (list[callable]): Called as ``callback(epoch, optimizer_state)`` after each epoch.

    Raises:
        tinyultr.exceptions.ValidationError: If a log is empty or the logs disagree on features.
        tinyultr.exceptions.TrainingError: If a loss or gradient becomes non-finite.

    Returns:
        TrainedModel: The snapshot with the lowest validation loss.
    """

    spec = cfg.loss
    input_dim = _check_logs(train_log, val_log)
    n_ranks = None

    if spec.kind.has_position_params:
        n_ranks = cfg.n_ranks or max(train_log.n_ranks, val_log.n_ranks)

    model = tinyultr.model.init_model(
        input_dim,
        cfg.hidden_dims,
        n_ranks,
        cfg.dropout,
        cfg.seed,
        pairwise=spec.kind == LossKind.PAIR_DEBIAS,
    )
    state = OptimizerState.create(
        model.params, lr=cfg.lr, weight_decay=cfg.weight_decay, decay=model.decay_names
    )

    n_sessions = len(train_log)
    history = []
    best, best_epoch, best_loss = model.copy(), 0, np.inf
    stale = 0
    epoch = 0

    log.info(
        "Training %s on %d sessions (validation %d), %d features",
        spec.kind.value,
        n_sessions,
        len(val_log),
        input_dim,
    )

    for epoch in range(1, cfg.max_epochs + 1):
        order = tinyultr.utils.rng(cfg.seed, Stream.SHUFFLE, epoch).permutation(n_sessions)
        total = 0.0

        for step, batch in enumerate(tinyultr.utils.chunks(order, cfg.batch_size)):
            sessions = [train_log.sessions[i] for i in batch]
            losses, grads = batch_gradient(model, sessions, spec, True, (cfg.seed, epoch, step))
            loss = float(losses.sum())

            if not np.isfinite(loss):
                raise TrainingError(f"Non-finite training loss at epoch {epoch}, step {step}.")

            try:
                tinyultr.model.adamw_step(state, model.params, grads)
            except TrainingError as e:
                raise TrainingError(f"Epoch {epoch}, step {step}: {e}") from None

            if spec.kind == LossKind.PAIR_DEBIAS:
                _renormalize_propensities(model)

            total += loss
            log.debug("epoch %d step %d: loss %.6f", epoch, step, loss / max(len(losses), 1))

        val_loss = float(np.mean(session_losses(model, val_log, spec)))

        if not np.isfinite(val_loss):
            raise TrainingError(f"Non-finite validation loss at epoch {epoch}.")

        history.append(EpochRecord(epoch, total / n_sessions, val_loss))

        if val_loss < best_loss - MIN_IMPROVEMENT:
            best, best_epoch, best_loss = model.copy(), epoch, val_loss
            stale = 0
        else:
            stale += 1

        log.info(
            "epoch %d: train %.6f, validation %.6f, %d/%d without improvement",
            epoch,
            total / n_sessions,
            val_loss,
            stale,
            cfg.patience,
        )

        for callback in callbacks:
            callback(epoch, state)

        if stale >= cfg.patience:
            break

    log.info("Stopped after epoch %d; best validation loss %.6f at epoch %d", epoch, best_loss, best_epoch)

    return TrainedModel(best, history, epoch, best_epoch)


class SweepRow(NamedTuple):
    """One (config, seed) run of a sweep; failed runs carry the error and no loss."""

    config_index: int
    config: TrainConfig
    seed: int
    val_loss: Optional[float]
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


def sweep(grid: Sequence[TrainConfig], train_log: ClickLog, val_log: ClickLog, seeds: Sequence[int]) -> List[SweepRow]:
    """Train every config with every seed.

    A failing run is recorded as a row with its error and the sweep carries on.

    Returns:
        list[SweepRow]: Sorted by the config's mean validation loss over its successful seeds,
            failed rows last.
    """

    if not grid:
        raise ValueError("Sweep grid is empty.")

    if not seeds:
        raise ValueError("Sweep needs at least one seed.")

    rows = []

    for i, cfg in enumerate(grid):
        for seed in seeds:
            try:
                trained = train(train_log, val_log, dataclasses.replace(cfg, seed=seed))
                rows.append(SweepRow(i, cfg, seed, trained.best_val_loss))
            except Exception as e:
                log.warning("Sweep config %d seed %d failed: %s", i, seed, e)
                rows.append(SweepRow(i, cfg, seed, None, f"{type(e).__name__}: {e}"))

    means = {}

    for i in range(len(grid)):
        losses = [row.val_loss for row in rows if row.config_index == i and row.ok]
        means[i] = float(np.mean(losses)) if losses else np.inf

    return sorted(rows, key=lambda row: (not row.ok, means[row.config_index], row.config_index, row.seed))
