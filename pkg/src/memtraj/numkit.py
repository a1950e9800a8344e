"""Small multilayer perceptrons with analytic gradients and plain SGD.

Every network in this package is an :class:`Mlp`: a stack of affine layers
with ReLU or Tanh hidden activations and an identity output layer.  All
parameters and activations are float64 numpy arrays.  Backward passes are
hand-derived chain rule, validated against central finite differences via
:func:`finite_diff_check`; there is no autodiff framework anywhere.

Forward and backward accept either a single vector ``(in_dim,)`` or a batch
``(n, in_dim)``.  For a batch, parameter gradients are summed over the rows,
which is what the mini-batch trainers need (they scale the upstream signal
by ``1/n`` themselves).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, NumericError

RELU = "relu"
TANH = "tanh"

_MAGIC = b"MTNN"
_VERSION = 1
_ACT_TO_CODE = {RELU: 0, TANH: 1}
_CODE_TO_ACT = {code: act for act, code in _ACT_TO_CODE.items()}


@dataclass
class Mlp:
    """Feed-forward net: affine layers, hidden activation, identity output.

    ``weights[l]`` has shape ``(layer_dims[l+1], layer_dims[l])`` and
    ``biases[l]`` has shape ``(layer_dims[l+1],)``.  Instances are treated as
    frozen once training finishes; forward passes on a frozen net are safe
    from multiple threads, training mutates a net from a single thread only.
    """

    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    hidden_activation: str = RELU

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "Mlp":
        return Mlp(
            layer_dims=list(self.layer_dims),
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            hidden_activation=self.hidden_activation,
        )

    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))


@dataclass
class GradBundle:
    """Gradients from one backward pass: per-layer weights/biases plus input."""

    d_weights: list[np.ndarray]
    d_biases: list[np.ndarray]
    d_input: np.ndarray


@dataclass
class ForwardCache:
    """Intermediate activations kept around for a cheap backward pass.

    ``activations[0]`` is the (batched) input, ``activations[l+1]`` the output
    of layer ``l`` after its activation; ``preacts[l]`` is layer ``l`` before
    the activation.  Everything is 2-D internally.
    """

    activations: list[np.ndarray]
    preacts: list[np.ndarray]
    input_was_vector: bool


def _check_activation(name: str) -> None:
    if name not in _ACT_TO_CODE:
        raise ValueError(f"unknown hidden activation {name!r}; expected one of {sorted(_ACT_TO_CODE)}")


def mlp_init(seed: int, layer_dims: Sequence[int], hidden_activation: str = RELU) -> Mlp:
    """Build an Mlp with uniform Glorot weights and zero biases.

    Weights for a layer with fan_in/fan_out are drawn uniformly from
    ``[-s, s]`` with ``s = sqrt(6 / (fan_in + fan_out))``.  The draw order is
    fixed (layer by layer), so a seed pins every parameter.
    """
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2:
        raise ValueError(f"need at least input and output dims, got {dims}")
    if any(d < 1 for d in dims):
        raise ValueError(f"all layer dims must be >= 1, got {dims}")
    _check_activation(hidden_activation)
    rng = np.random.default_rng(seed)
    weights = []
    biases = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Mlp(layer_dims=dims, weights=weights, biases=biases, hidden_activation=hidden_activation)


def identity_mlp(dim: int) -> Mlp:
    """Single affine layer that maps x to x exactly (used for raw-cosine scoring)."""
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    return Mlp(layer_dims=[dim, dim], weights=[np.eye(dim)], biases=[np.zeros(dim)])


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == RELU:
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activate_grad(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == RELU:
        return (z > 0.0).astype(np.float64)
    t = np.tanh(z)
    return 1.0 - t * t


def _as_batch(x, dim: int, what: str) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        if arr.shape[0] != dim:
            raise ValueError(f"{what} has length {arr.shape[0]}, expected {dim}")
        return arr[None, :], True
    if arr.ndim == 2:
        if arr.shape[1] != dim:
            raise ValueError(f"{what} has width {arr.shape[1]}, expected {dim}")
        return arr, False
    raise ValueError(f"{what} must be 1-D or 2-D, got shape {arr.shape}")


def mlp_forward_cached(net: Mlp, x) -> tuple[np.ndarray, ForwardCache]:
    """Forward pass that also returns the activations needed for backward."""
    a, was_vector = _as_batch(x, net.in_dim, "input")
    activations = [a]
    preacts = []
    last = net.n_layers - 1
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ w.T + b
        preacts.append(z)
        a = z if l == last else _activate(z, net.hidden_activation)
        activations.append(a)
    out = a[0] if was_vector else a
    return out, ForwardCache(activations=activations, preacts=preacts, input_was_vector=was_vector)


def mlp_forward(net: Mlp, x) -> np.ndarray:
    """Map an input vector (or batch of rows) through the network."""
    out, _ = mlp_forward_cached(net, x)
    return out


def mlp_backward_from_cache(net: Mlp, cache: ForwardCache, upstream) -> GradBundle:
    """Backward pass reusing a forward cache.

    ``upstream`` is the gradient of some scalar with respect to the network
    output; the bundle holds that scalar's gradients with respect to every
    weight, bias, and the input.
    """
    delta, up_was_vector = _as_batch(upstream, net.out_dim, "upstream")
    if up_was_vector != cache.input_was_vector or delta.shape[0] != cache.activations[0].shape[0]:
        raise ValueError(
            f"upstream batch shape {np.shape(upstream)} does not match forward input "
            f"shape {cache.activations[0].shape}"
        )
    d_weights: list[np.ndarray] = [None] * net.n_layers  # type: ignore[list-item]
    d_biases: list[np.ndarray] = [None] * net.n_layers  # type: ignore[list-item]
    for l in range(net.n_layers - 1, -1, -1):
        d_weights[l] = delta.T @ cache.activations[l]
        d_biases[l] = delta.sum(axis=0)
        delta = delta @ net.weights[l]
        if l > 0:
            delta = delta * _activate_grad(cache.preacts[l - 1], net.hidden_activation)
    d_input = delta[0] if cache.input_was_vector else delta
    return GradBundle(d_weights=d_weights, d_biases=d_biases, d_input=d_input)


def mlp_backward(net: Mlp, x, upstream) -> GradBundle:
    """Gradients of ``upstream . output`` w.r.t. all parameters and the input."""
    _, cache = mlp_forward_cached(net, x)
    return mlp_backward_from_cache(net, cache, upstream)


def sgd_step(net: Mlp, grads: GradBundle, learning_rate: float) -> Mlp:
    """Apply one plain SGD update in place and return the net."""
    if len(grads.d_weights) != net.n_layers or len(grads.d_biases) != net.n_layers:
        raise ValueError("gradient bundle does not match the network's layer count")
    for w, dw in zip(net.weights, grads.d_weights):
        if w.shape != dw.shape:
            raise ValueError(f"weight gradient shape {dw.shape} != {w.shape}")
        if not np.all(np.isfinite(dw)):
            raise NumericError("non-finite weight gradient in sgd_step")
    for b, db in zip(net.biases, grads.d_biases):
        if b.shape != db.shape:
            raise ValueError(f"bias gradient shape {db.shape} != {b.shape}")
        if not np.all(np.isfinite(db)):
            raise NumericError("non-finite bias gradient in sgd_step")
    for w, dw in zip(net.weights, grads.d_weights):
        w -= learning_rate * dw
    for b, db in zip(net.biases, grads.d_biases):
        b -= learning_rate * db
    return net


def hidden_preactivations(net: Mlp, x) -> list[np.ndarray]:
    """Pre-activation values of the hidden layers (used to stay off ReLU kinks)."""
    _, cache = mlp_forward_cached(net, x)
    return cache.preacts[:-1]


def finite_diff_check(net: Mlp, x, eps: float = 1e-5, upstream=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    The scalar being differentiated is ``upstream . output`` (all-ones
    upstream by default).  Every weight, bias, and input entry is perturbed
    by ``+-eps``; the relative error for one coordinate is
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.
    """
    if not eps > 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    x = np.asarray(x, dtype=np.float64)
    if upstream is None:
        up = np.ones(net.out_dim)
    else:
        up = np.asarray(upstream, dtype=np.float64)
        if up.shape != (net.out_dim,):
            raise ValueError(f"upstream shape {up.shape} != ({net.out_dim},)")
    if x.shape != (net.in_dim,):
        raise ValueError(f"input shape {x.shape} != ({net.in_dim},)")

    bundle = mlp_backward(net, x, up)

    def scalar() -> float:
        return float(mlp_forward(net, x) @ up)

    def rel_err(analytic: float, numeric: float) -> float:
        return abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))

    worst = 0.0
    for l in range(net.n_layers):
        for arr, grad in ((net.weights[l], bundle.d_weights[l]), (net.biases[l], bundle.d_biases[l])):
            flat = arr.ravel()
            gflat = grad.ravel()
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                f_plus = scalar()
                flat[i] = orig - eps
                f_minus = scalar()
                flat[i] = orig
                worst = max(worst, rel_err(gflat[i], (f_plus - f_minus) / (2.0 * eps)))
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + eps
        f_plus = scalar()
        x[i] = orig - eps
        f_minus = scalar()
        x[i] = orig
        worst = max(worst, rel_err(bundle.d_input[i], (f_plus - f_minus) / (2.0 * eps)))
    return worst


def shuffled_batches(n: int, batch_size: int, rng: np.random.Generator):
    """Yield index arrays covering ``range(n)`` in shuffled mini-batches."""
    order = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo : lo + batch_size]


def save_mlp(net: Mlp, path) -> None:
    """Write a network as versioned little-endian binary.

    Layout: magic ``MTNN``, format version u32, layer-dim count u32, hidden
    activation code u32, the dims as u32s, then for each layer its row-major
    float64 weight matrix followed by its float64 bias vector.
    """
    parts = [
        _MAGIC,
        struct.pack("<III", _VERSION, len(net.layer_dims), _ACT_TO_CODE[net.hidden_activation]),
        struct.pack(f"<{len(net.layer_dims)}I", *net.layer_dims),
    ]
    for w, b in zip(net.weights, net.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_mlp(path) -> Mlp:
    """Read a network written by :func:`save_mlp`, validating as it goes."""
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise FormatError("file too short for a net header", offset=len(raw))
    if raw[:4] != _MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {_MAGIC!r}", offset=0)
    version, n_dims, act_code = struct.unpack_from("<III", raw, 4)
    if version != _VERSION:
        raise FormatError(f"unsupported format version {version}", offset=4)
    if n_dims < 2:
        raise FormatError(f"layer-dim count {n_dims} < 2", offset=8)
    if act_code not in _CODE_TO_ACT:
        raise FormatError(f"unknown activation code {act_code}", offset=12)
    offset = 16
    if len(raw) < offset + 4 * n_dims:
        raise FormatError("truncated layer dims", offset=len(raw))
    dims = list(struct.unpack_from(f"<{n_dims}I", raw, offset))
    offset += 4 * n_dims
    if any(d < 1 for d in dims):
        raise FormatError(f"non-positive layer dim in {dims}", offset=16)
    weights = []
    biases = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        n_bytes = 8 * fan_out * fan_in
        if len(raw) < offset + n_bytes:
            raise FormatError("truncated weight matrix", offset=len(raw))
        weights.append(np.frombuffer(raw, dtype="<f8", count=fan_out * fan_in, offset=offset).reshape(fan_out, fan_in).copy())
        offset += n_bytes
        n_bytes = 8 * fan_out
        if len(raw) < offset + n_bytes:
            raise FormatError("truncated bias vector", offset=len(raw))
        biases.append(np.frombuffer(raw, dtype="<f8", count=fan_out, offset=offset).copy())
        offset += n_bytes
    if offset != len(raw):
        raise FormatError(f"{len(raw) - offset} trailing bytes after parameters", offset=offset)
    return Mlp(layer_dims=dims, weights=weights, biases=biases, hidden_activation=_CODE_TO_ACT[act_code])
