"""Multilayer perceptrons with explicit capture of per-layer statistics.

The forward pass records, for every layer, the input activations (with a
homogeneous constant-1 bias coordinate appended) and the pre-activations;
the backward pass records the pre-activation gradients. Those two streams
are exactly what Kronecker-factored curvature estimation consumes: for a
single example the weight gradient of layer ``l`` is the outer product
``a_l g_l^T``.

Weight matrices have shape (fan_in + 1, fan_out); the final row multiplies
the constant bias input. The output layer is linear. Likelihoods: Gaussian
with a shared precision ``tau`` across output dimensions, or categorical
over logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma, log_softmax

ACTIVATIONS = ("relu", "tanh")
LIKELIHOODS = ("gaussian", "categorical")

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class MlpArchitecture:
    """Layer sizes (input, hidden..., output), activation and likelihood."""

    layer_sizes: tuple[int, ...]
    activation: str = "relu"
    likelihood: str = "gaussian"

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        if len(self.layer_sizes) < 2:
            raise ValueError("need at least input and output sizes")
        if any(s < 1 for s in self.layer_sizes):
            raise ValueError("all layer sizes must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.likelihood not in LIKELIHOODS:
            raise ValueError(f"unknown likelihood {self.likelihood!r}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def weight_shapes(self) -> list[tuple[int, int]]:
        sizes = self.layer_sizes
        return [(sizes[i] + 1, sizes[i + 1]) for i in range(self.n_layers)]

    @property
    def n_weights(self) -> int:
        return sum(p * q for p, q in self.weight_shapes)

    def to_dict(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "activation": self.activation,
            "likelihood": self.likelihood,
        }

    @staticmethod
    def from_dict(d: dict) -> "MlpArchitecture":
        return MlpArchitecture(
            tuple(d["layer_sizes"]), d["activation"], d["likelihood"]
        )


# A weight set is one matrix per layer, shapes per MlpArchitecture.weight_shapes.
WeightSet = list


def init_weights(arch: MlpArchitecture, rng: np.random.Generator) -> WeightSet:
    """Fan-in scaled Gaussian init, zero bias row."""
    weights = []
    for fan_in_p1, fan_out in arch.weight_shapes:
        w = rng.standard_normal((fan_in_p1, fan_out)) / np.sqrt(fan_in_p1 - 1)
        w[-1, :] = 0.0
        weights.append(w)
    return weights


def pack_weights(weights: WeightSet) -> np.ndarray:
    """Flatten a weight set into one vector (column-major per layer)."""
    return np.concatenate([w.reshape(-1, order="F") for w in weights])


def unpack_weights(vector: np.ndarray, arch: MlpArchitecture) -> WeightSet:
    """Inverse of :func:`pack_weights`."""
    out, offset = [], 0
    for p, q in arch.weight_shapes:
        out.append(vector[offset : offset + p * q].reshape((p, q), order="F"))
        offset += p * q
    if offset != vector.shape[0]:
        raise ValueError(f"weight vector has {vector.shape[0]} entries, expected {offset}")
    return out


def _activate(arch: MlpArchitecture, s: np.ndarray) -> np.ndarray:
    if arch.activation == "relu":
        return np.maximum(s, 0.0)
    return np.tanh(s)


def _activate_deriv(arch: MlpArchitecture, s: np.ndarray) -> np.ndarray:
    # ReLU subgradient at exactly 0 is taken as 0.
    if arch.activation == "relu":
        return (s > 0.0).astype(float)
    return 1.0 - np.tanh(s) ** 2


@dataclass
class BatchTrace:
    """Per-layer inputs (with bias column) and pre-activations for a batch."""

    inputs: list = field(default_factory=list)  # n x (fan_in + 1) per layer
    preacts: list = field(default_factory=list)  # n x fan_out per layer
    outputs: np.ndarray | None = None  # n x output_size


@dataclass
class ForwardTrace:
    """Single-example trace: a_l (bias appended), s_l, and the output."""

    inputs: list
    preacts: list
    output: np.ndarray


@dataclass
class LayerGradients:
    """Per-layer weight gradients and pre-activation gradients g_l."""

    weight_grads: list
    preact_grads: list


def forward_batch(arch: MlpArchitecture, weights: WeightSet, x: np.ndarray) -> BatchTrace:
    """Run a batch (n, input_size) through the network, recording a_l and s_l."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != arch.layer_sizes[0]:
        raise ValueError(f"input has {x.shape[1]} features, expected {arch.layer_sizes[0]}")
    trace = BatchTrace()
    ones = np.ones((x.shape[0], 1))
    a = np.hstack([x, ones])
    for layer, w in enumerate(weights):
        if w.shape != arch.weight_shapes[layer]:
            raise ValueError(
                f"layer {layer} weights are {w.shape}, expected {arch.weight_shapes[layer]}"
            )
        s = a @ w
        trace.inputs.append(a)
        trace.preacts.append(s)
        if layer < arch.n_layers - 1:
            a = np.hstack([_activate(arch, s), ones])
    trace.outputs = trace.preacts[-1]
    return trace


def forward(arch: MlpArchitecture, weights: WeightSet, x: np.ndarray) -> ForwardTrace:
    """Single-example forward pass (identity output activation)."""
    t = forward_batch(arch, weights, np.asarray(x, dtype=float)[None, :])
    return ForwardTrace(
        inputs=[a[0] for a in t.inputs],
        preacts=[s[0] for s in t.preacts],
        output=t.outputs[0],
    )


def backward_batch(
    arch: MlpArchitecture,
    weights: WeightSet,
    trace: BatchTrace,
    output_grads: np.ndarray,
) -> list:
    """Reverse-mode pass; returns per-layer pre-activation gradients (n x fan_out).

    ``output_grads`` is the gradient of the objective with respect to the
    network outputs, one row per example.
    """
    output_grads = np.atleast_2d(np.asarray(output_grads, dtype=float))
    if output_grads.shape != trace.outputs.shape:
        raise ValueError(
            f"output gradient is {output_grads.shape}, outputs are {trace.outputs.shape}"
        )
    gs = [None] * arch.n_layers
    g = output_grads
    for layer in range(arch.n_layers - 1, -1, -1):
        gs[layer] = g
        if layer > 0:
            # Propagate through W (dropping the bias row) and the activation.
            da = g @ weights[layer][:-1, :].T
            g = da * _activate_deriv(arch, trace.preacts[layer - 1])
    return gs


def backward(
    arch: MlpArchitecture, weights: WeightSet, trace: ForwardTrace, output_grad: np.ndarray
) -> LayerGradients:
    """Single-example gradients; weight gradient of layer l is a_l g_l^T."""
    bt = BatchTrace(
        inputs=[a[None, :] for a in trace.inputs],
        preacts=[s[None, :] for s in trace.preacts],
        outputs=trace.output[None, :],
    )
    gs = backward_batch(arch, weights, bt, np.asarray(output_grad, dtype=float)[None, :])
    weight_grads = [bt.inputs[l].T @ gs[l] for l in range(arch.n_layers)]
    return LayerGradients(weight_grads=weight_grads, preact_grads=[g[0] for g in gs])


def mean_weight_grads(trace: BatchTrace, gs: list) -> list:
    """Mean over the batch of per-example weight gradients a_i g_i^T."""
    n = trace.outputs.shape[0]
    return [trace.inputs[l].T @ gs[l] / n for l in range(len(gs))]


def _as_targets(arch: MlpArchitecture, y) -> np.ndarray:
    y = np.asarray(y)
    if arch.likelihood == "categorical":
        return y.astype(int)
    y = y.astype(float)
    if y.ndim == 1:
        y = y[:, None]
    return y


def log_likelihood(arch: MlpArchitecture, output: np.ndarray, y, tau: float | None = None) -> float:
    """Log-likelihood of one target given the network output.

    Gaussian: 0.5 * (log tau - tau (y - yhat)^2 - log 2 pi) summed over
    output dimensions. Categorical: log softmax probability of the class.
    """
    output = np.atleast_1d(np.asarray(output, dtype=float))
    if arch.likelihood == "gaussian":
        if tau is None or tau <= 0:
            raise ValueError("gaussian likelihood needs tau > 0")
        resid = np.atleast_1d(np.asarray(y, dtype=float)) - output
        return float(0.5 * np.sum(np.log(tau) - tau * resid**2 - LOG_2PI))
    return float(log_softmax(output)[int(y)])


def expected_gaussian_ll(output: np.ndarray, y, q_tau) -> float:
    """Gaussian log-likelihood averaged over tau ~ Gamma(alpha, beta).

    0.5 * [digamma(alpha) - log beta - (alpha/beta)(y - yhat)^2 - log 2 pi]
    per output dimension.
    """
    alpha, beta = float(q_tau.alpha), float(q_tau.beta)
    if alpha <= 0 or beta <= 0:
        raise ValueError("Gamma parameters must be positive")
    output = np.atleast_1d(np.asarray(output, dtype=float))
    resid = np.atleast_1d(np.asarray(y, dtype=float)) - output
    return float(
        0.5 * np.sum(digamma(alpha) - np.log(beta) - (alpha / beta) * resid**2 - LOG_2PI)
    )


def sample_targets(arch: MlpArchitecture, output: np.ndarray, tau, rng: np.random.Generator):
    """Draw a target from the model's own predictive distribution."""
    output = np.atleast_1d(np.asarray(output, dtype=float))
    if arch.likelihood == "gaussian":
        if tau is None or tau <= 0:
            raise ValueError("gaussian likelihood needs tau > 0")
        return output + rng.standard_normal(output.shape) / np.sqrt(tau)
    probs = np.exp(log_softmax(output))
    return int(rng.choice(output.shape[0], p=probs))


def sample_targets_batch(
    arch: MlpArchitecture, outputs: np.ndarray, tau, rng: np.random.Generator
):
    """Batch version of :func:`sample_targets` (one draw per row)."""
    outputs = np.atleast_2d(outputs)
    if arch.likelihood == "gaussian":
        if tau is None or tau <= 0:
            raise ValueError("gaussian likelihood needs tau > 0")
        return outputs + rng.standard_normal(outputs.shape) / np.sqrt(tau)
    logp = log_softmax(outputs, axis=1)
    u = rng.random(outputs.shape[0])
    cum = np.cumsum(np.exp(logp), axis=1)
    return (u[:, None] < cum).argmax(axis=1)


def output_grads(arch: MlpArchitecture, outputs: np.ndarray, y, tau: float | None = None):
    """Gradient of the summed log-likelihood with respect to the outputs.

    Gaussian: tau * (y - yhat). Categorical: one-hot(y) - softmax(logits).
    """
    outputs = np.atleast_2d(outputs)
    if arch.likelihood == "gaussian":
        if tau is None or tau <= 0:
            raise ValueError("gaussian likelihood needs tau > 0")
        y = _as_targets(arch, y)
        return tau * (y - outputs)
    y = _as_targets(arch, y)
    probs = np.exp(log_softmax(outputs, axis=1))
    grad = -probs
    grad[np.arange(outputs.shape[0]), y] += 1.0
    return grad


def batch_log_likelihood(
    arch: MlpArchitecture, outputs: np.ndarray, y, tau: float | None = None
) -> float:
    """Mean per-example log-likelihood over a batch."""
    outputs = np.atleast_2d(outputs)
    if arch.likelihood == "gaussian":
        if tau is None or tau <= 0:
            raise ValueError("gaussian likelihood needs tau > 0")
        resid = _as_targets(arch, y) - outputs
        per_ex = 0.5 * np.sum(np.log(tau) - tau * resid**2 - LOG_2PI, axis=1)
    else:
        y = _as_targets(arch, y)
        logp = log_softmax(outputs, axis=1)
        per_ex = logp[np.arange(outputs.shape[0]), y]
    return float(np.mean(per_ex))
