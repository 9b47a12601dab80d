"""Fully connected tanh network with hand-written reverse mode and Adam.

Parameters flatten layer by layer: the weight matrix of a layer (shape
out x in, row-major) followed by its bias vector.
"""
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import OptimizationError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SGLMMMLP"
CHECKPOINT_VERSION = 1


@dataclass
class MlpMixer:
    layer_dims: Tuple[int, ...]
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("need one weight matrix and one bias vector per layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            expected = (self.layer_dims[i + 1], self.layer_dims[i])
            if w.shape != expected or b.shape != (expected[0],):
                raise ValueError(f"layer {i}: expected weight {expected} and bias ({expected[0]},), "
                                 f"got {w.shape} and {b.shape}")

    @property
    def d_in(self) -> int:
        return self.layer_dims[0]

    @property
    def d_out(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def flatten(self) -> np.ndarray:
        pieces = []
        for w, b in zip(self.weights, self.biases):
            pieces.append(w.ravel())
            pieces.append(b)
        return np.concatenate(pieces)

    @classmethod
    def from_flat(cls, layer_dims: Sequence[int], flat: np.ndarray) -> "MlpMixer":
        dims = tuple(int(d) for d in layer_dims)
        flat = np.asarray(flat, dtype=float)
        expected = sum(o * i + o for i, o in zip(dims[:-1], dims[1:]))
        if flat.shape != (expected,):
            raise ValueError(f"expected {expected} parameters for dims {dims}, got shape {flat.shape}")
        weights, biases, pos = [], [], 0
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            weights.append(flat[pos:pos + d_out * d_in].reshape(d_out, d_in).copy())
            pos += d_out * d_in
            biases.append(flat[pos:pos + d_out].copy())
            pos += d_out
        return cls(dims, weights, biases)


def mlp_init(dims: Sequence[int], rng: np.random.Generator) -> MlpMixer:
    """Glorot-uniform weights and zero biases."""
    dims = tuple(int(d) for d in dims)
    if len(dims) < 2:
        raise ValueError(f"an MLP needs at least 2 layer dims, got {dims}")
    if any(d <= 0 for d in dims):
        raise ValueError(f"layer dims must be positive, got {dims}")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpMixer(dims, weights, biases)


def _check_input(net: MlpMixer, eps: np.ndarray) -> np.ndarray:
    eps = np.asarray(eps, dtype=float)
    if eps.shape[-1:] != (net.d_in,) or eps.ndim > 2:
        raise ValueError(f"input must have trailing dimension {net.d_in}, got shape {eps.shape}")
    return eps


def mlp_forward_cached(net: MlpMixer, eps: np.ndarray) -> List[np.ndarray]:
    """Forward pass keeping every layer's output; the last entry is the network output."""
    h = _check_input(net, eps)
    activations = [h]
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w.T + b
        if i < last:
            h = np.tanh(h)
        activations.append(h)
    return activations


def mlp_forward(net: MlpMixer, eps: np.ndarray) -> np.ndarray:
    """Map noise of shape (d_in,) or (B, d_in) to outputs of shape (d_out,) or (B, d_out)."""
    return mlp_forward_cached(net, eps)[-1]


def mlp_backward(net: MlpMixer, eps: np.ndarray, upstream_grad: np.ndarray,
                 activations: Optional[List[np.ndarray]] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Reverse-mode gradients of <upstream_grad, mlp_forward(net, eps)>.

    For batched input the parameter gradient is summed over the batch.

    Args:
        net: Network
        eps: Input, shape (d_in,) or (B, d_in)
        upstream_grad: Gradient on the outputs, same leading shape as eps
        activations: Cached forward pass for eps, recomputed when omitted

    Returns:
        Tuple of (flat parameter gradient, gradient on the input)
    """
    if activations is None:
        activations = mlp_forward_cached(net, eps)
    delta = np.asarray(upstream_grad, dtype=float)
    if delta.shape != activations[-1].shape:
        raise ValueError(f"upstream_grad must have shape {activations[-1].shape}, got {delta.shape}")
    batched = delta.ndim == 2

    grads_w: List[np.ndarray] = [None] * len(net.weights)
    grads_b: List[np.ndarray] = [None] * len(net.weights)
    for i in range(len(net.weights) - 1, -1, -1):
        h_prev = activations[i]
        if batched:
            grads_w[i] = delta.T @ h_prev
            grads_b[i] = delta.sum(axis=0)
        else:
            grads_w[i] = np.outer(delta, h_prev)
            grads_b[i] = delta.copy()
        delta = delta @ net.weights[i]
        if i > 0:
            # tanh'(a) = 1 - tanh(a)^2
            delta = delta * (1.0 - h_prev ** 2)

    pieces = []
    for gw, gb in zip(grads_w, grads_b):
        pieces.append(gw.ravel())
        pieces.append(gb)
    return np.concatenate(pieces), delta


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    clip_norm: Optional[float] = 100.0
    n_clipped: int = field(default=0)

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError(f"Adam betas must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> Tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam ascent step (parameters move along +grads).

    Raises:
        OptimizationError: if any gradient entry is non-finite
    """
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if params.shape != grads.shape:
        raise ValueError(f"params and grads differ in shape: {params.shape} vs {grads.shape}")
    if not np.all(np.isfinite(grads)):
        raise OptimizationError("non-finite gradient passed to Adam", iteration=state.t + 1)
    if state.m is None:
        state.m = np.zeros_like(params)
        state.v = np.zeros_like(params)
    elif state.m.shape != params.shape:
        raise ValueError(f"Adam state has shape {state.m.shape}, params have {params.shape}")

    if state.clip_norm is not None:
        norm = float(np.linalg.norm(grads))
        if norm > state.clip_norm:
            logger.debug(f"[ADAM] adam_step: clipping gradient norm {norm:.4g} to {state.clip_norm:g} at step {state.t + 1}")
            grads = grads * (state.clip_norm / norm)
            state.n_clipped += 1

    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads ** 2
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    return params + state.lr * m_hat / (np.sqrt(v_hat) + state.eps), state


def save_mlp(net: MlpMixer, path: Union[str, Path]) -> None:
    """Write the checkpoint: magic, version, dim count, uint32 dims, then little-endian float64 params."""
    header = CHECKPOINT_MAGIC + struct.pack(f"<II{len(net.layer_dims)}I", CHECKPOINT_VERSION,
                                            len(net.layer_dims), *net.layer_dims)
    with open(path, "wb") as f:
        f.write(header)
        f.write(net.flatten().astype("<f8").tobytes())


def load_mlp(path: Union[str, Path]) -> MlpMixer:
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path} is not an MLP checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    version, n_dims = struct.unpack_from("<II", blob, pos)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos += 8
    dims = struct.unpack_from(f"<{n_dims}I", blob, pos)
    pos += 4 * n_dims
    flat = np.frombuffer(blob, dtype="<f8", offset=pos).astype(float)
    return MlpMixer.from_flat(dims, flat)
