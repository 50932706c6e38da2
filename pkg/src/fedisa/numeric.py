"""Deep auto-encoder detector.

Parameters are plain numpy arrays grouped in small dataclasses. Every
function here is pure: inputs are never mutated and all randomness comes
from an explicit seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    ArchitectureError,
    DimensionError,
    DomainError,
    EmptyDatasetError,
    InsufficientDataError,
    UnsupportedModeError,
)

NATURAL = 0
ATTACK = 1

DEFAULT_WIDTHS = (100, 72, 48, 24, 12)
CHECKPOINT_FORMAT = "fedisa-dae"
CHECKPOINT_SCHEMA = 1


@dataclass(frozen=True)
class LayerParams:
    """Affine map ``x -> weights @ x + bias``; weights are (out_dim, in_dim)."""

    weights: np.ndarray
    bias: np.ndarray

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class ModelParams:
    encoder: tuple[LayerParams, ...]
    decoder: tuple[LayerParams, ...]
    head: LayerParams | None = None
    version: int = 0

    @property
    def widths(self) -> list[int]:
        return [self.encoder[0].in_dim] + [layer.out_dim for layer in self.encoder]

    @property
    def latent_dim(self) -> int:
        return self.encoder[-1].out_dim

    def layers(self) -> list[LayerParams]:
        out = list(self.encoder) + list(self.decoder)
        if self.head is not None:
            out.append(self.head)
        return out

    def arrays(self) -> list[np.ndarray]:
        """Flat list of parameter arrays: (weights, bias) per layer, encoder first."""
        out = []
        for layer in self.layers():
            out.extend((layer.weights, layer.bias))
        return out

    def with_arrays(self, arrays: Sequence[np.ndarray], version: int | None = None) -> "ModelParams":
        if len(arrays) != 2 * len(self.layers()):
            raise DimensionError("array count does not match model layout")
        it = iter(arrays)
        rebuilt = [LayerParams(next(it), next(it)) for _ in self.layers()]
        n_enc, n_dec = len(self.encoder), len(self.decoder)
        return ModelParams(
            encoder=tuple(rebuilt[:n_enc]),
            decoder=tuple(rebuilt[n_enc:n_enc + n_dec]),
            head=rebuilt[-1] if self.head is not None else None,
            version=self.version if version is None else version,
        )

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())


@dataclass(frozen=True)
class Gradient:
    """Per-array deltas in the same order as ``ModelParams.arrays()``."""

    arrays: tuple[np.ndarray, ...]
    sample_count: int

    def layer_groups(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(self.arrays[i], self.arrays[i + 1]) for i in range(0, len(self.arrays), 2)]


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 100
    learning_rate: float = 1e-3
    local_epochs: int = 1
    cd_pretrain_epochs: int = 0
    rng_seed: int = 0
    # virtual seconds charged per processed sample
    sample_cost: float = 1e-3

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be positive")
        if self.cd_pretrain_epochs < 0:
            raise ValueError("cd_pretrain_epochs must be non-negative")
        if self.sample_cost < 0:
            raise ValueError("sample_cost must be non-negative")


def _as_matrix(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {arr.shape}")
    return arr


def _relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _uniform_layer(rng: np.random.Generator, fan_in: int, fan_out: int) -> LayerParams:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
    return LayerParams(w, np.zeros(fan_out))


def dae_init(layer_widths: Sequence[int], seed: int, with_head: bool = False) -> ModelParams:
    """Build a symmetric auto-encoder for the given encoder widths.

    ``[100, 72, 48, 24, 12]`` yields four encoder layers ending in a 12-unit
    latent code and four decoder layers mirroring them. Weights are drawn
    uniformly from ``±sqrt(6 / (fan_in + fan_out))``, biases start at zero.
    The optional softmax head maps the latent code to two logits.
    """
    widths = list(layer_widths)
    if len(widths) < 2 or any(int(w) != w or w < 1 for w in widths):
        raise ArchitectureError(f"invalid layer widths {widths!r}")
    widths = [int(w) for w in widths]
    rng = np.random.default_rng(seed)
    encoder = tuple(_uniform_layer(rng, a, b) for a, b in zip(widths[:-1], widths[1:]))
    rev = widths[::-1]
    decoder = tuple(_uniform_layer(rng, a, b) for a, b in zip(rev[:-1], rev[1:]))
    head = _uniform_layer(rng, widths[-1], 2) if with_head else None
    return ModelParams(encoder, decoder, head, version=0)


def _check_input(params: ModelParams, batch: np.ndarray) -> None:
    if batch.shape[1] != params.encoder[0].in_dim:
        raise DimensionError(
            f"batch has {batch.shape[1]} columns, model expects {params.encoder[0].in_dim}"
        )


def _forward_trace(params: ModelParams, x: np.ndarray):
    """Return activations (including input) and pre-activations for every layer."""
    acts = [x]
    pres = []
    layers = list(params.encoder) + list(params.decoder)
    for i, layer in enumerate(layers):
        z = acts[-1] @ layer.weights.T + layer.bias
        pres.append(z)
        acts.append(z if i == len(layers) - 1 else _relu(z))
    return acts, pres


def forward(params: ModelParams, batch) -> tuple[np.ndarray, np.ndarray]:
    """Reconstruct ``batch``; returns ``(reconstruction, latent)``.

    Hidden layers (latent code included) use ReLU, the last decoder layer is
    linear.
    """
    x = _as_matrix(batch)
    _check_input(params, x)
    acts, _ = _forward_trace(params, x)
    return acts[-1], acts[len(params.encoder)]


def mse_loss(x, x_hat) -> float:
    x = _as_matrix(x)
    x_hat = _as_matrix(x_hat)
    if x.shape != x_hat.shape:
        raise DimensionError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    return float(np.mean((x - x_hat) ** 2))


def backward(params: ModelParams, batch) -> Gradient:
    """Analytic gradient of the mean squared reconstruction error.

    The ReLU derivative at exactly zero is taken as zero. The softmax head,
    if present, does not influence the reconstruction and gets a zero
    gradient.
    """
    x = _as_matrix(batch)
    _check_input(params, x)
    acts, pres = _forward_trace(params, x)
    layers = list(params.encoder) + list(params.decoder)
    delta = 2.0 * (acts[-1] - x) / x.size
    grads: list[np.ndarray] = []
    for i in range(len(layers) - 1, -1, -1):
        if i != len(layers) - 1:
            delta = delta * (pres[i] > 0.0)
        grads.append(delta.sum(axis=0))
        grads.append(delta.T @ acts[i])
        if i > 0:
            delta = delta @ layers[i].weights
    grads.reverse()
    if params.head is not None:
        grads.extend((np.zeros_like(params.head.weights), np.zeros_like(params.head.bias)))
    return Gradient(tuple(grads), sample_count=x.shape[0])


def _check_compatible(params: ModelParams, grad: Gradient) -> list[np.ndarray]:
    arrays = params.arrays()
    if len(arrays) != len(grad.arrays) or any(
        a.shape != g.shape for a, g in zip(arrays, grad.arrays)
    ):
        raise DimensionError("gradient layout does not match model")
    return arrays


def sgd_step(params: ModelParams, grad: Gradient, lr: float) -> ModelParams:
    arrays = _check_compatible(params, grad)
    return params.with_arrays([p - lr * g for p, g in zip(arrays, grad.arrays)])


def _cd1(weights, hidden_bias, visible_bias, data, epochs, lr, rng, batch_size):
    w, bh, bv = weights.copy(), hidden_bias.copy(), visible_bias.copy()
    n = data.shape[0]
    step = min(batch_size, n)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, step):
            v0 = data[order[start:start + step]]
            ph0 = _sigmoid(v0 @ w.T + bh)
            h0 = (rng.random(ph0.shape) < ph0).astype(np.float64)
            v1 = _sigmoid(h0 @ w + bv)
            ph1 = _sigmoid(v1 @ w.T + bh)
            m = v0.shape[0]
            w = w + lr * (ph0.T @ v0 - ph1.T @ v1) / m
            bh = bh + lr * (ph0 - ph1).mean(axis=0)
            bv = bv + lr * (v0 - v1).mean(axis=0)
    return w, bh, bv


def cd1_pretrain(
    layer: LayerParams,
    data,
    epochs: int,
    lr: float,
    seed: int,
    visible_bias=None,
    batch_size: int = 100,
) -> LayerParams:
    """Train one layer as a Bernoulli RBM with one-step contrastive divergence.

    Positive phase uses the data and the hidden probabilities; hidden states
    are sampled once, the visible layer is reconstructed from mean-field
    probabilities and the negative phase uses the reconstructed hidden
    probabilities. The visible bias is trained alongside but not returned;
    use ``pretrain_stack`` when it is needed.
    """
    x = _as_matrix(data)
    if x.shape[1] != layer.in_dim:
        raise DimensionError(f"data has {x.shape[1]} columns, layer expects {layer.in_dim}")
    if np.any(x < 0.0) or np.any(x > 1.0) or not np.all(np.isfinite(x)):
        raise DomainError("contrastive divergence needs data in [0, 1]")
    if epochs == 0:
        return layer
    bv = np.zeros(layer.in_dim) if visible_bias is None else np.asarray(visible_bias, float)
    w, bh, _ = _cd1(layer.weights, layer.bias, bv, x, epochs, lr, np.random.default_rng(seed), batch_size)
    return LayerParams(w, bh)


def pretrain_stack(params: ModelParams, data, epochs: int, lr: float, seed: int) -> ModelParams:
    """Greedy layerwise RBM pretraining, then unroll into the auto-encoder.

    Each encoder layer is trained on the mean-field hidden activations of the
    layer below. The mirrored decoder layer takes the transposed weights and
    the RBM's visible bias.
    """
    x = _as_matrix(data)
    _check_input(params, x)
    if epochs == 0:
        return params
    seeds = np.random.SeedSequence(seed).spawn(len(params.encoder))
    encoder, decoder = [], []
    for layer, ss in zip(params.encoder, seeds):
        if np.any(x < 0.0) or np.any(x > 1.0):
            raise DomainError("contrastive divergence needs data in [0, 1]")
        w, bh, bv = _cd1(
            layer.weights, layer.bias, np.zeros(layer.in_dim), x, epochs, lr,
            np.random.default_rng(ss), 100,
        )
        encoder.append(LayerParams(w, bh))
        decoder.append(LayerParams(w.T.copy(), bv))
        x = _sigmoid(x @ w.T + bh)
    return ModelParams(tuple(encoder), tuple(decoder[::-1]), params.head, params.version)


def local_sgd(params: ModelParams, data, cfg: TrainConfig) -> tuple[ModelParams, list[np.ndarray], int]:
    """Mini-batch SGD; returns (final params, summed step gradients, samples processed)."""
    x = _as_matrix(data)
    if x.shape[0] == 0:
        raise EmptyDatasetError("local dataset is empty")
    _check_input(params, x)
    n = x.shape[0]
    step = min(cfg.batch_size, n)
    rng = np.random.default_rng(cfg.rng_seed)
    total = [np.zeros_like(a) for a in params.arrays()]
    processed = 0
    current = params
    for _ in range(cfg.local_epochs):
        # a single batch covering every row needs no shuffle
        order = rng.permutation(n) if step < n else np.arange(n)
        for start in range(0, n, step):
            g = backward(current, x[order[start:start + step]])
            current = sgd_step(current, g, cfg.learning_rate)
            total = [t + a for t, a in zip(total, g.arrays)]
            processed += g.sample_count
    return current, total, processed


def train_local(params: ModelParams, data, cfg: TrainConfig) -> tuple[Gradient, float]:
    """Run local epochs and report the equivalent gradient and virtual cost.

    The equivalent gradient is the net parameter displacement divided by the
    learning rate, accumulated as the sum of the step gradients, so one
    full-batch epoch returns exactly ``backward`` of that batch. The cost is
    ``samples processed * cfg.sample_cost``.
    """
    x = _as_matrix(data)
    _, total, processed = local_sgd(params, x, cfg)
    return Gradient(tuple(total), sample_count=x.shape[0]), processed * cfg.sample_cost


def reconstruction_errors(params: ModelParams, data) -> np.ndarray:
    x = _as_matrix(data)
    recon, _ = forward(params, x)
    return np.mean((x - recon) ** 2, axis=1)


def knee_distances(sorted_errors: np.ndarray) -> np.ndarray:
    """Perpendicular distance of each point to the end-to-end chord."""
    e = np.asarray(sorted_errors, dtype=np.float64)
    n = e.size
    rise = e[-1] - e[0]
    run = n - 1
    idx = np.arange(n, dtype=np.float64)
    return np.abs(rise * idx - run * (e - e[0])) / math.hypot(run, rise)


def select_threshold(errors) -> float:
    """Anomaly threshold at the knee of the ascending error curve.

    Falls back to the 95th percentile when the curve is a straight line.
    """
    e = np.sort(np.asarray(errors, dtype=np.float64).ravel())
    if e.size < 3:
        raise InsufficientDataError("need at least 3 errors to locate a knee")
    d = knee_distances(e)
    if d.max() < 1e-12:
        return float(np.percentile(e, 95))
    return float(e[int(np.argmax(d))])


def detect_batch(params: ModelParams, tau: float, data) -> np.ndarray:
    return (reconstruction_errors(params, data) > tau).astype(np.int64)


def detect(params: ModelParams, tau: float, sample) -> int:
    """Label one sample: attack iff its reconstruction error is above ``tau``."""
    x = _as_matrix(sample)
    if x.shape[0] != 1:
        raise DimensionError("detect expects a single row")
    return int(detect_batch(params, tau, x)[0])


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=-1, keepdims=True)


def softmax_proba(params: ModelParams, data) -> np.ndarray:
    if params.head is None:
        raise UnsupportedModeError("model has no softmax head")
    _, latent = forward(params, data)
    return _softmax(latent @ params.head.weights.T + params.head.bias)


def softmax_classify(params: ModelParams, sample) -> tuple[int, np.ndarray]:
    """Class label and probabilities from the softmax head; ties go to natural."""
    x = _as_matrix(sample)
    if x.shape[0] != 1:
        raise DimensionError("softmax_classify expects a single row")
    probs = softmax_proba(params, x)[0]
    return int(np.argmax(probs)), probs


def fit_softmax_head(params: ModelParams, data, labels, epochs: int = 50, lr: float = 0.5, seed: int = 0) -> ModelParams:
    """Fit the softmax head on frozen latent codes by full-batch cross-entropy descent."""
    _, latent = forward(params, data)
    y = np.asarray(labels, dtype=np.int64)
    if y.shape[0] != latent.shape[0]:
        raise DimensionError("labels length does not match data rows")
    head = params.head or _uniform_layer(np.random.default_rng(seed), params.latent_dim, 2)
    w, b = head.weights.copy(), head.bias.copy()
    onehot = np.eye(2)[y]
    for _ in range(epochs):
        p = _softmax(latent @ w.T + b)
        delta = (p - onehot) / y.shape[0]
        w = w - lr * delta.T @ latent
        b = b - lr * delta.sum(axis=0)
    return replace(params, head=LayerParams(w, b))


DECISION_POLICIES = ("threshold", "softmax", "either", "both")


def predict(params: ModelParams, tau: float, data, policy: str = "threshold") -> np.ndarray:
    """Batch labels under a decision policy combining the threshold and softmax rules."""
    if policy not in DECISION_POLICIES:
        raise UnsupportedModeError(f"unknown decision policy {policy!r}")
    if policy == "threshold":
        return detect_batch(params, tau, data)
    soft = np.argmax(softmax_proba(params, data), axis=1).astype(np.int64)
    if policy == "softmax":
        return soft
    thr = detect_batch(params, tau, data)
    return (thr | soft) if policy == "either" else (thr & soft)


def _layer_to_dict(layer: LayerParams) -> dict:
    return {"weights": layer.weights.tolist(), "bias": layer.bias.tolist()}


def _layer_from_dict(d: dict) -> LayerParams:
    w = np.asarray(d["weights"], dtype=np.float64)
    b = np.asarray(d["bias"], dtype=np.float64)
    if w.ndim != 2 or b.shape != (w.shape[0],):
        raise DimensionError("malformed layer in checkpoint")
    return LayerParams(w, b)


def checkpoint_dict(params: ModelParams, tau: float | None = None) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "schema_version": CHECKPOINT_SCHEMA,
        "widths": params.widths,
        "version": params.version,
        "tau": tau,
        "encoder": [_layer_to_dict(l) for l in params.encoder],
        "decoder": [_layer_to_dict(l) for l in params.decoder],
        "head": None if params.head is None else _layer_to_dict(params.head),
    }


def params_from_dict(d: dict) -> tuple[ModelParams, float | None]:
    if d.get("format") != CHECKPOINT_FORMAT or d.get("schema_version") != CHECKPOINT_SCHEMA:
        raise ValueError("not a supported checkpoint")
    params = ModelParams(
        encoder=tuple(_layer_from_dict(l) for l in d["encoder"]),
        decoder=tuple(_layer_from_dict(l) for l in d["decoder"]),
        head=None if d["head"] is None else _layer_from_dict(d["head"]),
        version=int(d["version"]),
    )
    if params.widths != list(d["widths"]):
        raise ArchitectureError("checkpoint widths disagree with its layers")
    tau = d.get("tau")
    return params, None if tau is None else float(tau)


def save_checkpoint(path, params: ModelParams, tau: float | None = None) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(params, tau), sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[ModelParams, float | None]:
    return params_from_dict(json.loads(Path(path).read_text()))
