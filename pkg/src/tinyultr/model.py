"""Feed-forward relevance scorer with per-rank examination parameters and AdamW."""

from __future__ import annotations

import collections
import copy
import dataclasses
import json
import logging
import os

from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.special

import tinyultr.utils

from tinyultr.exceptions import ParseError, TrainingError
from tinyultr.utils import PathLike, Stream

log = logging.getLogger(__name__)

POSITION_LOGITS = "position_logits"
PROPENSITIES_PLUS = "propensities_plus"
PROPENSITIES_MINUS = "propensities_minus"
POSITION_PARAMS = (POSITION_LOGITS, PROPENSITIES_PLUS, PROPENSITIES_MINUS)

EXAMINATION_PRIOR = 0.9

CHECKPOINT_FORMAT = "tinyultr-model"

Params = Dict[str, np.ndarray]
Seed = Union[int, Sequence[int]]


def log1p_transform(x: np.ndarray) -> np.ndarray:
    """Return sign(x) * ln(1 + |x|), elementwise."""

    x = np.asarray(x, dtype=np.float64)

    return np.sign(x) * np.log1p(np.abs(x))


def _dropout_rng(seed: Seed) -> np.random.Generator:
    seed, *keys = (seed,) if np.isscalar(seed) else tuple(seed)

    return tinyultr.utils.rng(seed, Stream.DROPOUT, *keys)


class ScoringModel(object):
    """Feed-forward scorer: log1p features, linear + ReLU layers, one output logit.

    Per-rank parameters ride along in the same parameter map: ``position_logits`` for
    Two-Tower, RegressionEM and DLA, or ``propensities_plus``/``propensities_minus`` for PairD.
    They never enter :meth:`forward`; the losses consume them directly.
    """

    def __init__(self, input_dim: int, hidden_dims: Sequence[int], params: Params, dropout: float = 0.0):
        """Initialize.

        Args:
            input_dim (int): Feature dimensionality.
            hidden_dims (list[int]): Hidden layer widths; empty for a linear model.
            params (dict[str, numpy.ndarray]): Parameters by name.
            dropout (float): Dropout rate of hidden activations, in [0, 1).
        """

        if not 0.0 <= dropout < 1.0:
            raise ValueError(f"Dropout must lie in [0, 1), got {dropout}.")

        self.log = logging.getLogger(__name__ + "." + self.__class__.__name__)

        self.input_dim = int(input_dim)
        self.hidden_dims = tuple(int(each) for each in hidden_dims)
        self.dropout = float(dropout)
        self.params = collections.OrderedDict(params)

        for i, (fan_in, fan_out) in enumerate(self.layer_dims):
            if self.params[f"weight_{i}"].shape != (fan_in, fan_out):
                raise ValueError(f"Parameter 'weight_{i}' expects shape {(fan_in, fan_out)}.")

    @property
    def layer_dims(self) -> List[Tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_dims, 1]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def network_names(self) -> List[str]:
        return [name for name in self.params if name not in POSITION_PARAMS]

    @property
    def decay_names(self) -> FrozenSet[str]:
        """Return the names of the parameters subject to weight decay."""

        return frozenset(name for name in self.params if name.startswith("weight_"))

    @property
    def position_logits(self) -> Optional[np.ndarray]:
        return self.params.get(POSITION_LOGITS)

    @property
    def position_params(self) -> Params:
        return {name: value for name, value in self.params.items() if name in POSITION_PARAMS}

    @property
    def n_ranks(self) -> int:
        return max((len(value) for value in self.position_params.values()), default=0)

    def copy(self) -> ScoringModel:
        """Return a deep copy."""

        return ScoringModel(self.input_dim, self.hidden_dims, copy.deepcopy(self.params), self.dropout)

    def _check_features(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)

        if features.ndim != 2 or features.shape[1] != self.input_dim:
            raise ValueError(f"Expected features of shape (n, {self.input_dim}), got {features.shape}.")

        return features

    def _forward(self, features: np.ndarray, train_mode: bool, seed: Seed):
        features = self._check_features(features)
        n_hidden = len(self.hidden_dims)
        rng = _dropout_rng(seed) if train_mode and self.dropout > 0 else None

        h = log1p_transform(features)
        cache = []

        for i in range(n_hidden):
            z = h @ self.params[f"weight_{i}"] + self.params[f"bias_{i}"]
            mask = None
            out = np.maximum(z, 0.0)

            if rng is not None:
                mask = (rng.random(z.shape) >= self.dropout) / (1.0 - self.dropout)
                out = out * mask

            cache.append((h, z, mask))
            h = out

        scores = h @ self.params[f"weight_{n_hidden}"][:, 0] + self.params[f"bias_{n_hidden}"][0]

        return scores, h, cache

    def forward(self, features: np.ndarray, train_mode: bool = False, seed: Seed = 0) -> np.ndarray:
        """Return one relevance logit per document.

        Args:
            features (numpy.ndarray): Raw features, shape (n, input_dim).
            train_mode (bool): Apply dropout.
            seed (int | tuple[int]): Dropout seed; ignored outside train mode.

        Raises:
            ValueError: If the feature shape does not match the model.

        Returns:
            numpy.ndarray: Scores of shape (n,).
        """

        return self._forward(features, train_mode, seed)[0]

    def grad(
        self, features: np.ndarray, upstream: np.ndarray, train_mode: bool = False, seed: Seed = 0
    ) -> Params:
        """Return the gradients of ``upstream . scores`` w.r.t. every network parameter.

        The dropout masks are regenerated from ``seed``, so pass the seed of the matching forward.
        """

        upstream = np.asarray(upstream, dtype=np.float64)
        __, h, cache = self._forward(features, train_mode, seed)

        if upstream.shape != (h.shape[0],):
            raise ValueError(f"Expected upstream of shape ({h.shape[0]},), got {upstream.shape}.")

        n_hidden = len(self.hidden_dims)
        result = {
            f"weight_{n_hidden}": h.T @ upstream[:, None],
            f"bias_{n_hidden}": np.array([upstream.sum()]),
        }
        gh = upstream[:, None] @ self.params[f"weight_{n_hidden}"].T

        for i in reversed(range(n_hidden)):
            h_in, z, mask = cache[i]
            gz = (gh if mask is None else gh * mask) * (z > 0)

            result[f"weight_{i}"] = h_in.T @ gz
            result[f"bias_{i}"] = gz.sum(axis=0)
            gh = gz @ self.params[f"weight_{i}"].T

        return {name: result[name] for name in self.network_names}


def init_model(
    input_dim: int,
    hidden_dims: Sequence[int] = (),
    n_ranks: Optional[int] = None,
    dropout: float = 0.0,
    seed: int = 0,
    pairwise: bool = False,
) -> ScoringModel:
    """Return a freshly initialised scorer.

    Weights are drawn from U(-sqrt(6 / fan_in), sqrt(6 / fan_in)); biases start at zero.
    Position logits start at logit(0.9) on every rank; PairD propensities start at one.

    Args:
        input_dim (int): Feature dimensionality.
        hidden_dims (list[int]): Hidden layer widths.
        n_ranks (int): Number of ranks K with position parameters; None for none.
        dropout (float): Dropout rate.
        seed (int): Initialisation seed.
        pairwise (bool): Carry PairD positive/negative propensities instead of logits.

    Returns:
        ScoringModel
    """

    if input_dim < 1 or any(each < 1 for each in hidden_dims):
        raise ValueError(f"Dimensions must be positive, got {input_dim} and {list(hidden_dims)}.")

    rng = tinyultr.utils.rng(seed, Stream.INIT)
    dims = [input_dim, *hidden_dims, 1]
    params = collections.OrderedDict()

    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        bound = np.sqrt(6.0 / fan_in)
        params[f"weight_{i}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        params[f"bias_{i}"] = np.zeros(fan_out)

    if n_ranks:
        if pairwise:
            params[PROPENSITIES_PLUS] = np.ones(n_ranks)
            params[PROPENSITIES_MINUS] = np.ones(n_ranks)
        else:
            params[POSITION_LOGITS] = np.full(n_ranks, scipy.special.logit(EXAMINATION_PRIOR))

    return ScoringModel(input_dim, hidden_dims, params, dropout)


def save(model: ScoringModel, path: PathLike) -> List[str]:
    """Write the model checkpoint.

    The JSON file holds the architecture and parameter layout; the parameters themselves are
    a flat little-endian float64 blob in a sidecar ``.bin`` file next to it.

    Returns:
        list[str]: Paths written.
    """

    path = os.fspath(path)
    blob_path = os.path.splitext(path)[0] + ".bin"

    meta = {
        "format": CHECKPOINT_FORMAT,
        "input_dim": model.input_dim,
        "hidden_dims": list(model.hidden_dims),
        "dropout": model.dropout,
        "blob": os.path.basename(blob_path),
        "parameters": [{"name": name, "shape": list(value.shape)} for name, value in model.params.items()],
    }
    blob = np.concatenate([value.ravel() for value in model.params.values()]).astype("<f8")

    tinyultr.utils.atomic_write_bytes(blob_path, blob.tobytes())
    tinyultr.utils.atomic_write_text(path, json.dumps(meta, indent=2, sort_keys=True) + "\n")

    return [path, blob_path]


def load(path: PathLike) -> ScoringModel:
    """Read a checkpoint written by :func:`save`.

    Raises:
        FileNotFoundError: If the checkpoint or its blob does not exist.
        tinyultr.exceptions.ParseError: If the checkpoint is malformed.
    """

    path = tinyultr.utils.check_path(path)

    with open(path, "r", encoding="utf-8") as fp:
        meta = json.load(fp)

    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ParseError(f"{path} is not a model checkpoint.")

    blob_path = tinyultr.utils.check_path(os.path.join(os.path.dirname(path), meta["blob"]))

    with open(blob_path, "rb") as fp:
        blob = np.frombuffer(fp.read(), dtype="<f8")

    params = collections.OrderedDict()
    offset = 0

    for spec in meta["parameters"]:
        size = int(np.prod(spec["shape"], dtype=np.int64))
        params[spec["name"]] = blob[offset : offset + size].astype(np.float64).reshape(spec["shape"])
        offset += size

    if offset != blob.size:
        raise ParseError(f"{blob_path} holds {blob.size} values, expected {offset}.")

    return ScoringModel(meta["input_dim"], meta["hidden_dims"], params, meta["dropout"])


@dataclasses.dataclass
class OptimizerState:
    """AdamW hyperparameters, moment accumulators and step counter.

    Args:
        decay (frozenset[str]): Names of the parameters subject to weight decay; None decays all.
    """

    lr: float = 1e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: Params = dataclasses.field(default_factory=dict)
    second_moment: Params = dataclasses.field(default_factory=dict)
    decay: Optional[FrozenSet[str]] = None

    @classmethod
    def create(cls, params: Params, **kwargs) -> OptimizerState:
        """Return a fresh state with zero moments shaped like ``params``."""

        return cls(
            first_moment={name: np.zeros_like(value) for name, value in params.items()},
            second_moment={name: np.zeros_like(value) for name, value in params.items()},
            **kwargs,
        )


def adamw_step(state: OptimizerState, params: Params, grads: Params) -> Tuple[Params, OptimizerState]:
    """Apply one AdamW update in place.

    Weight decay is decoupled (``p -= lr * wd * p``) and moments are bias-corrected.
    Parameters without a gradient are treated as having a zero gradient.

    Raises:
        tinyultr.exceptions.TrainingError: If any gradient is not finite.

    Returns:
        tuple[dict, OptimizerState]: The updated parameters and state.
    """

    for name, value in grads.items():
        if not np.all(np.isfinite(value)):
            raise TrainingError(f"Non-finite gradient for '{name}' at optimizer step {state.step + 1}.")

    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step

    for name, param in params.items():
        grad = grads.get(name)
        grad = np.zeros_like(param) if grad is None else grad

        m = state.first_moment.setdefault(name, np.zeros_like(param))
        v = state.second_moment.setdefault(name, np.zeros_like(param))

        if state.weight_decay and (state.decay is None or name in state.decay):
            param *= 1.0 - state.lr * state.weight_decay

        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad

        param -= state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)

    return params, state
