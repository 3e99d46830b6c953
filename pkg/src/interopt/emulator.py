"""Fully connected neural-network emulator trained with Adam.

The network maps normalized input features to a normalized scalar target:
hidden layers apply ``tanh`` (or ``relu``) after the affine map, the output
layer is affine only. Weight matrices are stored ``(out, in)``.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import Dataset, FeatureSchema, NormStats, fit_normalizer
from .errors import DivergenceError, ModelIntegrityError, SchemaMismatchError, ShapeError, TrainTooSmallError

log = logging.getLogger(__name__)

ARTIFACT_FORMAT = "interopt-emulator/1"

_ACTIVATIONS = {
    "tanh": (np.tanh, lambda a: 1.0 - a * a),
    "relu": (lambda h: np.maximum(h, 0.0), lambda a: (a > 0).astype(float)),
}


@dataclass(frozen=True)
class LayerParams:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    def __post_init__(self):
        w = np.array(self.weight, dtype=float, ndmin=2)
        b = np.array(self.bias, dtype=float).reshape(-1)
        if w.ndim != 2 or b.shape[0] != w.shape[0]:
            raise ShapeError(f"layer shapes disagree: weight {w.shape}, bias {b.shape}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("layer parameters must be finite")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 500
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int | None = None  # None = full batch
    seed: int = 0
    hidden: tuple[int, ...] = (20, 10)
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden widths must all be >= 1")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(_ACTIVATIONS)}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1 or None")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass(frozen=True)
class EmulatorModel:
    layers: tuple[LayerParams, ...]
    activation: str = "tanh"
    norm: NormStats | None = None
    schema: FeatureSchema | None = None
    train_config: TrainConfig | None = None
    loss_history: tuple[float, ...] = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ShapeError("model needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if nxt.weight.shape[1] != prev.weight.shape[0]:
                raise ShapeError(
                    f"layer widths do not chain: {prev.weight.shape} -> {nxt.weight.shape}"
                )
        if self.layers[-1].weight.shape[0] != 1:
            raise ShapeError("emulator output width must be 1")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.schema is not None and len(self.schema.inputs) != self.input_width:
            raise ShapeError("input width does not match the schema's non-target features")

    @property
    def input_width(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def schema_fingerprint(self) -> str | None:
        return None if self.schema is None else self.schema.fingerprint

    def __call__(self, Z):
        return batch_forward(self, Z)

    def predict(self, X) -> np.ndarray:
        """Predicted target in physical units for physical-unit rows ``X``."""
        if self.norm is None:
            raise ValueError("model carries no normalization statistics")
        t = batch_forward(self, self.norm.normalize_x(np.atleast_2d(X)))
        return self.norm.denormalize_y(t)


def forward(model: EmulatorModel, x) -> float:
    """Evaluate one normalized feature vector."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] != model.input_width:
        raise ShapeError(f"expected a vector of length {model.input_width}, got shape {x.shape}")
    return float(batch_forward(model, x[None, :])[0])


def batch_forward(model: EmulatorModel, Z) -> np.ndarray:
    """Evaluate each row of ``Z``; returns a vector of length ``len(Z)``."""
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 2 and Z.shape[0] == 0:
        return np.empty(0)
    if Z.ndim != 2 or Z.shape[1] != model.input_width:
        raise ShapeError(f"expected rows of width {model.input_width}, got shape {Z.shape}")
    act, _ = _ACTIVATIONS[model.activation]
    a = Z
    for layer in model.layers[:-1]:
        a = act(a @ layer.weight.T + layer.bias)
    last = model.layers[-1]
    return (a @ last.weight.T + last.bias)[:, 0]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def init_layers(widths: Sequence[int], rng: np.random.Generator) -> list[LayerParams]:
    """Uniform(-sqrt(3/fan_in), sqrt(3/fan_in)) weights, zero biases."""
    layers = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        lim = np.sqrt(3.0 / fan_in)
        layers.append(LayerParams(rng.uniform(-lim, lim, (fan_out, fan_in)), np.zeros(fan_out)))
    return layers


def loss_and_grads(weights, biases, Z, t, activation="tanh"):
    """Mean squared error over the batch and its gradients.

    Returns ``(loss, dW, db)`` with ``dW``/``db`` lists matching the inputs.
    """
    act, dact = _ACTIVATIONS[activation]
    acts = [Z]
    a = Z
    for W, b in zip(weights[:-1], biases[:-1]):
        a = act(a @ W.T + b)
        acts.append(a)
    pred = (a @ weights[-1].T + biases[-1])[:, 0]
    resid = pred - t
    n = Z.shape[0]
    loss = float(np.mean(resid * resid))

    delta = (2.0 / n) * resid[:, None]  # dL/d(output pre-activation)
    dW = [None] * len(weights)
    db = [None] * len(weights)
    for k in range(len(weights) - 1, -1, -1):
        dW[k] = delta.T @ acts[k]
        db[k] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ weights[k]) * dact(acts[k])
    return loss, dW, db


def _mse(weights, biases, Z, t, activation):
    act, _ = _ACTIVATIONS[activation]
    a = Z
    for W, b in zip(weights[:-1], biases[:-1]):
        a = act(a @ W.T + b)
    resid = (a @ weights[-1].T + biases[-1])[:, 0] - t
    return float(np.mean(resid * resid))


def _train_normalized(Z, t, cfg: TrainConfig, rng: np.random.Generator):
    widths = [Z.shape[1], *cfg.hidden, 1]
    init = init_layers(widths, rng)
    W = [np.array(l.weight) for l in init]
    b = [np.array(l.bias) for l in init]
    mW = [np.zeros_like(w) for w in W]
    vW = [np.zeros_like(w) for w in W]
    mb = [np.zeros_like(x) for x in b]
    vb = [np.zeros_like(x) for x in b]
    n = Z.shape[0]
    bs = n if cfg.batch_size is None else min(cfg.batch_size, n)
    history = []
    step = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = np.arange(n) if bs == n else rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            loss, dW, db = loss_and_grads(W, b, Z[idx], t[idx], cfg.activation)
            if not np.isfinite(loss):
                raise DivergenceError(epoch, loss)
            step += 1
            c1 = 1.0 - cfg.beta1 ** step
            c2 = 1.0 - cfg.beta2 ** step
            for params, grads, m, v in ((W, dW, mW, vW), (b, db, mb, vb)):
                for k in range(len(params)):
                    m[k] = cfg.beta1 * m[k] + (1 - cfg.beta1) * grads[k]
                    v[k] = cfg.beta2 * v[k] + (1 - cfg.beta2) * grads[k] ** 2
                    params[k] = params[k] - cfg.learning_rate * (m[k] / c1) / (np.sqrt(v[k] / c2) + cfg.epsilon)
        full_loss = _mse(W, b, Z, t, cfg.activation)
        if not np.isfinite(full_loss):
            raise DivergenceError(epoch, full_loss)
        history.append(full_loss)
    return [LayerParams(w, x) for w, x in zip(W, b)], tuple(history)


def train(data: Dataset, cfg: TrainConfig = TrainConfig()) -> EmulatorModel:
    """Fit an emulator on ``data`` by minimizing MSE on normalized targets.

    The result is fully determined by ``(data, cfg)``; the normalization
    statistics fitted here travel with the model.
    """
    data.require_targets()
    if len(data) < 2:
        raise TrainTooSmallError(f"need at least 2 records to train, got {len(data)}")
    norm = fit_normalizer(data)
    Z = norm.normalize_x(data.X)
    t = norm.normalize_y(data.y)
    rng = np.random.default_rng(cfg.seed)
    layers, history = _train_normalized(Z, t, cfg, rng)
    log.debug("trained %s: final mse %.4g", [l.weight.shape for l in layers], history[-1])
    return EmulatorModel(tuple(layers), cfg.activation, norm, data.schema, cfg, history)


def r_squared(pred, obs) -> float:
    """Coefficient of determination; ``-inf`` when ``obs`` has no variance."""
    pred = np.asarray(pred, dtype=float).reshape(-1)
    obs = np.asarray(obs, dtype=float).reshape(-1)
    if pred.shape != obs.shape or pred.size == 0:
        raise ShapeError("r_squared needs two non-empty vectors of equal length")
    ss_res = float(np.sum((obs - pred) ** 2))
    ss_tot = float(np.sum((obs - obs.mean()) ** 2))
    if ss_tot == 0.0:
        return float("-inf")
    return 1.0 - ss_res / ss_tot


@dataclass(frozen=True)
class CVResult:
    ids: tuple[str, ...]
    observed: np.ndarray
    cv_predicted: np.ndarray
    fit_predicted: np.ndarray
    cv_r2: float
    fit_r2: float


def fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


def _fold(args):
    data, cfg, i = args
    train_part = data.subset([j for j in range(len(data)) if j != i])
    model = train(train_part, replace(cfg, seed=fold_seed(cfg.seed, i)))
    return float(model.predict(data.X[i:i + 1])[0])


def loo_cv(data: Dataset, cfg: TrainConfig = TrainConfig(), n_jobs: int = 1) -> CVResult:
    """Leave-one-out cross-validation plus a full-data fit.

    Fold ``i`` trains with a seed derived from ``(cfg.seed, i)`` so running
    folds in parallel gives the same numbers as running them in order.
    """
    data.require_targets()
    if len(data) < 3:
        raise TrainTooSmallError(f"LOO-CV needs at least 3 records, got {len(data)}")
    jobs = [(data, cfg, i) for i in range(len(data))]
    if n_jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            cv_pred = list(pool.map(_fold, jobs))
    else:
        cv_pred = [_fold(j) for j in jobs]
    cv_pred = np.array(cv_pred)
    full = train(data, cfg)
    fit_pred = full.predict(data.X)
    return CVResult(
        data.ids,
        np.array(data.y),
        cv_pred,
        fit_pred,
        r_squared(cv_pred, data.y),
        r_squared(fit_pred, data.y),
    )


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _digest(payload: dict) -> str:
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def model_to_dict(model: EmulatorModel) -> dict:
    payload = {
        "format": ARTIFACT_FORMAT,
        "schema": None if model.schema is None else model.schema.to_dict(),
        "schema_fingerprint": model.schema_fingerprint,
        "activation": model.activation,
        "layer_dims": [list(l.weight.shape) for l in model.layers],
        "weights": [l.weight.reshape(-1).tolist() for l in model.layers],
        "biases": [l.bias.tolist() for l in model.layers],
        "norm": None if model.norm is None else model.norm.to_dict(),
        "train_config": None if model.train_config is None else model.train_config.to_dict(),
        "final_train_mse": model.loss_history[-1] if model.loss_history else None,
    }
    payload["sha256"] = _digest(payload)
    return payload


def model_from_dict(d: dict, schema: FeatureSchema | None = None) -> EmulatorModel:
    try:
        body = {k: v for k, v in d.items() if k != "sha256"}
        if d.get("format") != ARTIFACT_FORMAT:
            raise ModelIntegrityError(f"unknown artifact format {d.get('format')!r}")
        if d.get("sha256") != _digest(body):
            raise ModelIntegrityError("artifact checksum mismatch (file corrupted or edited)")
        layers = []
        for (out, inp), w, b in zip(d["layer_dims"], d["weights"], d["biases"]):
            layers.append(LayerParams(np.array(w, dtype=float).reshape(out, inp), np.array(b, dtype=float)))
        stored = None if d["schema"] is None else FeatureSchema.from_dict(d["schema"])
        norm = None if d["norm"] is None else NormStats.from_dict(d["norm"])
        cfg = None if d["train_config"] is None else TrainConfig.from_dict(d["train_config"])
    except ModelIntegrityError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelIntegrityError(f"malformed model artifact: {exc}") from exc
    if schema is not None and d.get("schema_fingerprint") != schema.fingerprint:
        raise SchemaMismatchError("model was trained against a different schema")
    return EmulatorModel(tuple(layers), d["activation"], norm, schema or stored, cfg)


def save_model(model: EmulatorModel, path):
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1) + "\n", encoding="utf-8")


def load_model(path, schema: FeatureSchema | None = None) -> EmulatorModel:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ModelIntegrityError(f"{path}: not a valid JSON artifact ({exc})") from exc
    if not isinstance(d, dict):
        raise ModelIntegrityError(f"{path}: artifact must be a JSON object")
    return model_from_dict(d, schema)
