"""Independently recurrent network over image rows.

Each layer computes ``h_t = relu(W x_t + u * h_{t-1} + b)`` where ``u`` is a
per-neuron recurrent weight vector, so neurons inside a layer never see each
other's history.  Stacked layers mix neurons; a logistic head turns the last
hidden state at each step into a nodule probability for that pixel.

All arrays are ``float64``.  Sequences are batched as ``(batch, T, dim)``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .imaging import as_gray, as_mask

logger = logging.getLogger(__name__)

__all__ = [
    "IndRnnLayer",
    "IndRnnNetwork",
    "TrainConfig",
    "encode_rows",
    "layer_forward",
    "layer_forward_per_neuron",
    "network_forward",
    "bptt_gradients",
    "loss_and_gradients",
    "mean_bce",
    "clip_recurrent",
    "init_network",
    "train",
    "predict_prob_map",
    "binarize",
]

_LOGIT_CLIP = 30.0


@dataclass
class IndRnnLayer:
    W: np.ndarray  # (units, input_dim)
    u: np.ndarray  # (units,)
    b: np.ndarray  # (units,)

    def __post_init__(self):
        self.W = np.atleast_2d(np.asarray(self.W, dtype=np.float64))
        self.u = np.asarray(self.u, dtype=np.float64).reshape(-1)
        self.b = np.asarray(self.b, dtype=np.float64).reshape(-1)
        if not (self.u.shape[0] == self.b.shape[0] == self.W.shape[0]):
            raise ValueError(
                f"layer shapes disagree: W{self.W.shape}, u{self.u.shape}, b{self.b.shape}"
            )

    @property
    def units(self) -> int:
        return self.W.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W.shape[1]


@dataclass
class IndRnnNetwork:
    layers: list[IndRnnLayer]
    v: np.ndarray  # output head weights, (units of last layer,)
    c: float = 0.0

    def __post_init__(self):
        if not self.layers:
            raise ValueError("network needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if nxt.input_dim != prev.units:
                raise ValueError(
                    f"layer input dim {nxt.input_dim} != previous layer units {prev.units}"
                )
        self.v = np.asarray(self.v, dtype=np.float64).reshape(-1)
        self.c = float(self.c)
        if self.v.shape[0] != self.layers[-1].units:
            raise ValueError("output head size does not match last layer")

    @property
    def input_dim(self) -> int:
        return self.layers[0].input_dim

    def copy(self) -> "IndRnnNetwork":
        return IndRnnNetwork(
            [IndRnnLayer(l.W.copy(), l.u.copy(), l.b.copy()) for l in self.layers],
            self.v.copy(), self.c,
        )

    def parameters(self) -> list[np.ndarray]:
        """Flat list of parameter arrays in a fixed order (W, u, b per layer, v, c)."""
        params = []
        for layer in self.layers:
            params += [layer.W, layer.u, layer.b]
        params += [self.v, np.array([self.c])]
        return params

    def set_parameters(self, params: list[np.ndarray]) -> None:
        it = iter(params)
        for layer in self.layers:
            layer.W, layer.u, layer.b = (np.array(next(it), dtype=np.float64) for _ in range(3))
        self.v = np.array(next(it), dtype=np.float64)
        self.c = float(np.asarray(next(it)).reshape(-1)[0])

    # -- checkpoint --------------------------------------------------------

    def to_dict(self, gamma: float, k: int, seed: int | None) -> dict:
        return {
            "layer-dims": [[l.input_dim, l.units] for l in self.layers],
            "layers": [
                {"W": l.W.ravel().tolist(), "u": l.u.tolist(), "b": l.b.tolist()}
                for l in self.layers
            ],
            "head": {"v": self.v.tolist(), "c": self.c},
            "clip-gamma": gamma,
            "neighborhood-k": k,
            "seed": seed,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "IndRnnNetwork":
        layers = []
        for (in_dim, units), params in zip(doc["layer-dims"], doc["layers"]):
            W = np.asarray(params["W"], dtype=np.float64).reshape(units, in_dim)
            layers.append(IndRnnLayer(W, params["u"], params["b"]))
        return cls(layers, doc["head"]["v"], doc["head"]["c"])

    def save(self, path, gamma: float, k: int, seed: int | None) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(gamma, k, seed), fh, indent=1)
            fh.write("\n")


def load_checkpoint(path) -> tuple[IndRnnNetwork, dict]:
    """Return the network and the raw checkpoint document."""
    with open(path) as fh:
        doc = json.load(fh)
    return IndRnnNetwork.from_dict(doc), doc


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 60
    batch_size: int = 32
    clip_gamma: float = 2.0
    seed: int | None = None
    neighborhood_k: int = 3

    def __post_init__(self):
        if not self.learning_rate >= 0:
            # zero is allowed so a run can be frozen deliberately
            raise ValueError("learning-rate must be non-negative")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch-size must be >= 1")
        if not self.clip_gamma > 0:
            raise ValueError("clip-gamma must be positive")
        if self.neighborhood_k < 1 or self.neighborhood_k % 2 == 0:
            raise ValueError("neighborhood-k must be odd and >= 1")


# --------------------------------------------------------------------------
# Forward
# --------------------------------------------------------------------------

def encode_rows(image, k: int = 3) -> np.ndarray:
    """Turn each image row into a sequence of flattened k x k neighborhoods.

    Returns an array of shape ``(height, width, k*k)``; row ``r`` is the
    sequence for image row ``r`` scanned left to right.
    """
    image = as_gray(image)
    if k < 1 or k % 2 == 0:
        raise ValueError("neighborhood size k must be odd and >= 1")
    r = k // 2
    padded = np.pad(image, r, mode="edge")
    win = sliding_window_view(padded, (k, k))
    return win.reshape(image.shape[0], image.shape[1], k * k).copy()


def _as_batch(inputs: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 2:
        return x[None], True
    if x.ndim != 3:
        raise ValueError(f"expected (T, dim) or (batch, T, dim) inputs, got {x.shape}")
    return x, False


def _project(W: np.ndarray, x: np.ndarray) -> np.ndarray:
    # Accumulate W x column by column in a fixed order. Matches the scalar
    # per-neuron loop bit for bit, independent of BLAS blocking.
    out = np.zeros(x.shape[:-1] + (W.shape[0],))
    for j in range(W.shape[1]):
        out += x[..., j:j + 1] * W[:, j]
    return out


def _layer_pass(layer: IndRnnLayer, x: np.ndarray, h0=None) -> tuple[np.ndarray, np.ndarray]:
    """Batched forward returning (pre-activations, hidden states)."""
    if x.shape[-1] != layer.input_dim:
        raise ValueError(f"input dim {x.shape[-1]} does not match layer input dim {layer.input_dim}")
    batch, steps, _ = x.shape
    proj = _project(layer.W, x)
    pre = np.empty_like(proj)
    hs = np.empty_like(proj)
    h = np.zeros((batch, layer.units)) if h0 is None else np.broadcast_to(
        np.asarray(h0, dtype=np.float64), (batch, layer.units))
    for t in range(steps):
        a = proj[:, t] + layer.u * h
        a = a + layer.b
        pre[:, t] = a
        h = np.maximum(a, 0.0)
        hs[:, t] = h
    return pre, hs


def layer_forward(layer: IndRnnLayer, inputs, h0=None) -> np.ndarray:
    """Hidden sequence of one layer; accepts ``(T, dim)`` or ``(batch, T, dim)``."""
    x, single = _as_batch(inputs)
    _, hs = _layer_pass(layer, x, h0)
    return hs[0] if single else hs


def layer_forward_per_neuron(layer: IndRnnLayer, inputs, h0=None) -> np.ndarray:
    """Scalar reference: each neuron runs its own recurrence on plain floats."""
    x = np.asarray(inputs, dtype=np.float64)
    steps = x.shape[0]
    out = np.zeros((steps, layer.units))
    for n in range(layer.units):
        w_n = layer.W[n]
        u_n = float(layer.u[n])
        b_n = float(layer.b[n])
        h = 0.0 if h0 is None else float(np.asarray(h0).reshape(-1)[n])
        for t in range(steps):
            acc = 0.0
            for j in range(layer.input_dim):
                acc += float(x[t, j]) * float(w_n[j])
            a = acc + u_n * h
            a = a + b_n
            h = a if a > 0.0 else 0.0
            out[t, n] = h
    return out


def _head_logits(net: IndRnnNetwork, top: np.ndarray) -> np.ndarray:
    return _project(net.v[None, :], top)[..., 0] + net.c


def _expit(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # clipped so probabilities stay strictly inside (0, 1)
    return _expit(np.clip(z, -_LOGIT_CLIP, _LOGIT_CLIP))


def _forward_cache(net: IndRnnNetwork, x: np.ndarray):
    cache = []
    h = x
    for layer in net.layers:
        pre, hs = _layer_pass(layer, h)
        cache.append((h, pre, hs))
        h = hs
    return cache, _head_logits(net, h)


def network_forward(net: IndRnnNetwork, inputs) -> np.ndarray:
    """Per-step probabilities; ``(T,)`` for one sequence or ``(batch, T)``."""
    x, single = _as_batch(inputs)
    if x.shape[-1] != net.input_dim:
        raise ValueError(f"input dim {x.shape[-1]} does not match network input dim {net.input_dim}")
    _, logits = _forward_cache(net, x)
    p = _sigmoid(logits)
    return p[0] if single else p


# --------------------------------------------------------------------------
# Loss and BPTT
# --------------------------------------------------------------------------

def _bce_from_logits(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    # softplus(z) - y z, stable for large |z|
    return np.logaddexp(0.0, z) - y * z


def mean_bce(net: IndRnnNetwork, inputs, targets) -> float:
    x, _ = _as_batch(inputs)
    y = np.asarray(targets, dtype=np.float64).reshape(x.shape[:2])
    _, logits = _forward_cache(net, x)
    return float(np.mean(_bce_from_logits(logits, y)))


def loss_and_gradients(net: IndRnnNetwork, inputs, targets) -> tuple[float, list[np.ndarray]]:
    """Mean binary cross-entropy and its exact gradient by backprop through time.

    Gradients come back in :meth:`IndRnnNetwork.parameters` order.  The ReLU
    derivative at exactly zero is taken as zero.
    """
    x, _ = _as_batch(inputs)
    y = np.asarray(targets, dtype=np.float64)
    if y.size != x.shape[0] * x.shape[1]:
        raise ValueError(f"targets shape {y.shape} does not align with inputs {x.shape[:2]}")
    y = y.reshape(x.shape[:2])
    if x.shape[-1] != net.input_dim:
        raise ValueError(f"input dim {x.shape[-1]} does not match network input dim {net.input_dim}")

    cache, logits = _forward_cache(net, x)
    count = logits.size
    loss = float(np.mean(_bce_from_logits(logits, y)))

    dz = (_expit(logits) - y) / count  # (B, T)
    top = cache[-1][2]
    dv = np.einsum("bt,btn->n", dz, top)
    dc = np.array([dz.sum()])
    dh = dz[..., None] * net.v  # (B, T, units)

    layer_grads = []
    for layer, (inp, pre, hs) in zip(reversed(net.layers), reversed(cache)):
        batch, steps, units = hs.shape
        da = np.empty_like(pre)
        carry = np.zeros((batch, units))
        du = np.zeros(units)
        for t in range(steps - 1, -1, -1):
            g = (dh[:, t] + carry) * (pre[:, t] > 0.0)
            da[:, t] = g
            if t > 0:
                du += np.einsum("bn,bn->n", g, hs[:, t - 1])
            carry = g * layer.u
        db = da.sum(axis=(0, 1))
        dW = da.reshape(-1, units).T @ inp.reshape(-1, inp.shape[-1])
        dh = da @ layer.W
        layer_grads.append([dW, du, db])

    grads: list[np.ndarray] = []
    for g in reversed(layer_grads):
        grads += g
    grads += [dv, dc]
    return loss, grads


def bptt_gradients(net: IndRnnNetwork, inputs, targets) -> list[np.ndarray]:
    return loss_and_gradients(net, inputs, targets)[1]


def clip_recurrent(layer: IndRnnLayer, gamma: float, steps: int) -> None:
    """Clamp each recurrent weight to ``[-gamma**(1/T), gamma**(1/T)]`` in place."""
    bound = gamma ** (1.0 / steps)
    np.clip(layer.u, -bound, bound, out=layer.u)


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------

def init_network(
    input_dim: int,
    layer_sizes=(16, 16),
    gamma: float = 2.0,
    steps: int = 64,
    rng: np.random.Generator | int | None = None,
) -> IndRnnNetwork:
    rng = np.random.default_rng(rng)
    bound = gamma ** (1.0 / steps)
    layers = []
    dim = input_dim
    for units in layer_sizes:
        s = 1.0 / np.sqrt(dim)
        W = rng.uniform(-s, s, size=(units, dim))
        u = rng.uniform(0.0, bound, size=units)
        layers.append(IndRnnLayer(W, u, np.zeros(units)))
        dim = units
    s = 1.0 / np.sqrt(dim)
    v = rng.uniform(-s, s, size=dim)
    return IndRnnNetwork(layers, v, 0.0)


@dataclass
class TrainResult:
    net: IndRnnNetwork
    losses: list[float] = field(default_factory=list)


def train(
    net: IndRnnNetwork,
    pairs,
    config: TrainConfig,
    callback=None,
) -> TrainResult:
    """Mini-batch gradient descent on mean BCE over (image, mask) pairs.

    Every image row is one training sequence.  The network is copied, never
    mutated.  ``callback(epoch, loss)`` is invoked after each epoch.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("training set is empty")
    k = config.neighborhood_k
    if net.input_dim != k * k:
        raise ValueError(f"network input dim {net.input_dim} != k*k = {k * k}")
    widths = {np.shape(img)[1] for img, _ in pairs}
    if len(widths) != 1:
        raise ValueError("all training images must share a width")
    steps = widths.pop()

    seqs, targets = [], []
    for img, mask in pairs:
        img = as_gray(img)
        mask = as_mask(mask)
        if img.shape != mask.shape:
            raise ValueError(f"image/mask dimension mismatch {img.shape} vs {mask.shape}")
        seqs.append(encode_rows(img, k))
        targets.append(mask.astype(np.float64))
    X = np.concatenate(seqs)
    Y = np.concatenate(targets)

    rng = np.random.default_rng(config.seed)
    net = net.copy()
    for layer in net.layers:
        clip_recurrent(layer, config.clip_gamma, steps)
    result = TrainResult(net)
    for epoch in range(config.epochs):
        order = rng.permutation(len(X))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads = loss_and_gradients(net, X[idx], Y[idx])
            total += loss * len(idx)
            params = net.parameters()
            net.set_parameters([p - config.learning_rate * g for p, g in zip(params, grads)])
            for layer in net.layers:
                clip_recurrent(layer, config.clip_gamma, steps)
        epoch_loss = total / len(X)
        result.losses.append(epoch_loss)
        logger.info("epoch %d loss %.6f", epoch + 1, epoch_loss)
        if callback is not None:
            callback(epoch + 1, epoch_loss)
    return result


def predict_prob_map(net: IndRnnNetwork, image, k: int = 3) -> np.ndarray:
    if net.input_dim != k * k:
        raise ValueError(f"network input dim {net.input_dim} != k*k = {k * k}")
    return network_forward(net, encode_rows(image, k))


def binarize(probs, threshold: float = 0.5) -> np.ndarray:
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    return (np.asarray(probs) >= threshold).astype(np.uint8)
