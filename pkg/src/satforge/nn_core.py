"""Dense neural-network engine with exact gradients.

Every hidden block is ``affine -> batch norm -> activation``; the output
block is a plain linear layer producing class logits. An optional
conditioner (see :mod:`satforge.conditioning`) is invoked at the input
site (index 0) and after each hidden block (indices 1..n_hidden).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

ACTIVATIONS = ("relu", "sigmoid", "tanh", "linear")
SHADOW_DTYPE = np.longdouble


class NumericError(ArithmeticError):
    """A non-finite value surfaced where only finite values are allowed."""


def sigmoid(z):
    # split form avoids overflow in exp for large |z|
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0)
    if name == "sigmoid":
        return sigmoid(z)
    if name == "tanh":
        return np.tanh(z)
    if name == "linear":
        return z
    raise ValueError(f"unknown activation {name!r}")


def activation_backward(name: str, z: np.ndarray, a: np.ndarray, da: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. pre-activation ``z`` given output ``a = act(z)``."""
    if name == "relu":
        return da * (z > 0)
    if name == "sigmoid":
        return da * a * (1 - a)
    if name == "tanh":
        return da * (1 - a * a)
    if name == "linear":
        return da
    raise ValueError(f"unknown activation {name!r}")


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


@dataclass
class DenseLayer:
    weight: np.ndarray  # (in_dim, out_dim)
    bias: np.ndarray  # (out_dim,)
    activation: str = "relu"

    def __post_init__(self):
        if self.weight.ndim != 2 or self.weight.shape[1] != self.bias.shape[0]:
            raise ValueError(f"weight {self.weight.shape} does not match bias {self.bias.shape}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class BatchNormLayer:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5
    momentum: float = 0.1
    mode: str = "train"

    @classmethod
    def create(cls, dim: int, dtype=np.float32) -> "BatchNormLayer":
        return cls(
            gamma=np.ones(dim, dtype=dtype),
            beta=np.zeros(dim, dtype=dtype),
            running_mean=np.zeros(dim, dtype=dtype),
            running_var=np.ones(dim, dtype=dtype),
        )

    def forward(self, z: np.ndarray, training: bool) -> tuple[np.ndarray, tuple]:
        if training and self.mode == "train":
            mean = z.mean(axis=0)
            var = z.var(axis=0)
            inv_std = 1.0 / np.sqrt(var + self.epsilon)
            zhat = (z - mean) * inv_std
            m = self.momentum
            self.running_mean[...] = (1 - m) * self.running_mean + m * mean
            self.running_var[...] = (1 - m) * self.running_var + m * var
            return self.gamma * zhat + self.beta, ("batch", zhat, inv_std)
        inv_std = 1.0 / np.sqrt(self.running_var + self.epsilon)
        zhat = (z - self.running_mean) * inv_std
        return self.gamma * zhat + self.beta, ("running", zhat, inv_std)

    def backward(self, dy: np.ndarray, cache: tuple) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        kind, zhat, inv_std = cache
        dgamma = (dy * zhat).sum(axis=0)
        dbeta = dy.sum(axis=0)
        dzhat = dy * self.gamma
        if kind == "running":
            return dzhat * inv_std, dgamma, dbeta
        n = dy.shape[0]
        dz = (inv_std / n) * (n * dzhat - dzhat.sum(axis=0) - zhat * (dzhat * zhat).sum(axis=0))
        return dz, dgamma, dbeta


@dataclass
class ForwardCache:
    token: object
    training: bool
    layer_inputs: list = field(default_factory=list)
    pre_acts: list = field(default_factory=list)
    bn_caches: list = field(default_factory=list)
    post_acts: list = field(default_factory=list)
    logits: np.ndarray | None = None

    @property
    def activations(self) -> list[np.ndarray]:
        """Representations fed to each layer (h_0 = conditioned input, h_1, ...)."""
        return self.layer_inputs


class MLP:
    """Feed-forward frame classifier.

    ``layers[i]`` is paired with ``norms[i]`` (``None`` for the output layer).
    """

    def __init__(self, layers: list[DenseLayer], norms: list[BatchNormLayer | None], conditioner=None):
        if len(layers) != len(norms):
            raise ValueError("layers and norms must have equal length")
        for i in range(1, len(layers)):
            if layers[i].in_dim != layers[i - 1].out_dim:
                raise ValueError(
                    f"layer {i} expects {layers[i].in_dim} inputs but layer {i - 1} emits {layers[i - 1].out_dim}"
                )
        self.layers = layers
        self.norms = norms
        self.conditioner = conditioner
        self._token: object | None = None

    @classmethod
    def build(
        cls,
        in_dim: int,
        hidden: list[int],
        num_classes: int,
        *,
        activation: str = "relu",
        batch_norm: bool = True,
        seed: int = 0,
        dtype=np.float32,
    ) -> "MLP":
        rng = np.random.default_rng(seed)
        dims = [in_dim, *hidden, num_classes]
        layers, norms = [], []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            last = i == len(dims) - 2
            layers.append(DenseLayer(glorot_uniform(rng, a, b, dtype), np.zeros(b, dtype), "linear" if last else activation))
            norms.append(BatchNormLayer.create(b, dtype) if batch_norm and not last else None)
        return cls(layers, norms)

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_dim

    @property
    def n_hidden(self) -> int:
        return len(self.layers) - 1

    def site_dim(self, site: int) -> int:
        """Width of the representation at a conditioning site (0 = raw input)."""
        if site == 0:
            if self.conditioner is not None:
                return self.conditioner.input_dim(self.layers[0].in_dim)
            return self.layers[0].in_dim
        return self.layers[site - 1].out_dim

    # parameter plumbing -------------------------------------------------

    def params(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for i, (layer, norm) in enumerate(zip(self.layers, self.norms)):
            out[f"layer{i}.W"] = layer.weight
            out[f"layer{i}.b"] = layer.bias
            if norm is not None:
                out[f"bn{i}.gamma"] = norm.gamma
                out[f"bn{i}.beta"] = norm.beta
        if self.conditioner is not None:
            out.update(self.conditioner.params())
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, norm in enumerate(self.norms):
            if norm is not None:
                out[f"bn{i}.running_mean"] = norm.running_mean
                out[f"bn{i}.running_var"] = norm.running_var
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        """All tensors (parameters then buffers), copied."""
        state = {k: v.copy() for k, v in self.params().items()}
        state.update({k: v.copy() for k, v in self.buffers().items()})
        return state

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        targets = {**self.params(), **self.buffers()}
        missing = set(targets) - set(state)
        extra = set(state) - set(targets)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, arr in targets.items():
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise ValueError(f"{name}: shape {src.shape} != {arr.shape}")
            arr[...] = src
        self._token = None

    def set_bn_mode(self, mode: str) -> None:
        for norm in self.norms:
            if norm is not None:
                norm.mode = mode

    def astype(self, dtype) -> "MLP":
        clone = copy.deepcopy(self)
        for layer in clone.layers:
            layer.weight = layer.weight.astype(dtype)
            layer.bias = layer.bias.astype(dtype)
        for norm in clone.norms:
            if norm is not None:
                for attr in ("gamma", "beta", "running_mean", "running_var"):
                    setattr(norm, attr, getattr(norm, attr).astype(dtype))
        if clone.conditioner is not None:
            clone.conditioner.cast(dtype)
        clone._token = None
        return clone

    @property
    def dtype(self):
        return self.layers[0].weight.dtype

    # forward / backward ---------------------------------------------------

    def forward(self, batch: np.ndarray, embedding: np.ndarray | None = None, training: bool = False) -> ForwardCache:
        """Run the network, caching everything needed by :meth:`backward`."""
        if batch.ndim != 2:
            raise ValueError(f"batch must be 2-D, got shape {batch.shape}")
        cond = self.conditioner
        if cond is not None:
            if embedding is None:
                raise ValueError("conditioned model requires an embedding")
            cond.begin(np.asarray(embedding, dtype=self.dtype), batch.shape[0])
        elif embedding is not None:
            raise ValueError("embedding given to an unconditioned model")
        token = object()
        self._token = token
        cache = ForwardCache(token=token, training=training)
        h = batch.astype(self.dtype, copy=False)
        if cond is not None and cond.applies_at(0):
            h = cond.apply(0, h)
        for i, (layer, norm) in enumerate(zip(self.layers, self.norms)):
            if h.shape[1] != layer.in_dim:
                raise ValueError(f"layer {i}: expected {layer.in_dim} input columns, got {h.shape[1]}")
            cache.layer_inputs.append(h)
            z = h @ layer.weight + layer.bias
            bn_cache = None
            if norm is not None:
                zn, bn_cache = norm.forward(z, training)
            else:
                zn = z
            a = activate(layer.activation, zn)
            cache.pre_acts.append(zn)
            cache.bn_caches.append(bn_cache)
            cache.post_acts.append(a)
            if i < self.n_hidden and cond is not None and cond.applies_at(i + 1):
                a = cond.apply(i + 1, a)
            h = a
        if not np.all(np.isfinite(h)):
            raise NumericError("non-finite logits in forward pass")
        cache.logits = h
        return cache

    def predict(self, batch: np.ndarray, embedding: np.ndarray | None = None) -> np.ndarray:
        return self.forward(batch, embedding, training=False).logits

    def backward(self, cache: ForwardCache | None, dlogits: np.ndarray, skip: frozenset[str] | set[str] = frozenset()) -> dict[str, np.ndarray]:
        """Gradients of the loss for every parameter not named in ``skip``."""
        if cache is None or cache.token is not self._token:
            raise ValueError("backward needs the cache of the most recent forward pass")
        grads: dict[str, np.ndarray] = {}
        cond = self.conditioner
        dh = dlogits
        for i in range(len(self.layers) - 1, -1, -1):
            layer, norm = self.layers[i], self.norms[i]
            if i < self.n_hidden and cond is not None and cond.applies_at(i + 1):
                dh = cond.backward(i + 1, dh, grads, skip)
            dz = activation_backward(layer.activation, cache.pre_acts[i], cache.post_acts[i], dh)
            if norm is not None:
                dz, dgamma, dbeta = norm.backward(dz, cache.bn_caches[i])
                if f"bn{i}.gamma" not in skip:
                    grads[f"bn{i}.gamma"] = dgamma
                if f"bn{i}.beta" not in skip:
                    grads[f"bn{i}.beta"] = dbeta
            if f"layer{i}.W" not in skip:
                grads[f"layer{i}.W"] = cache.layer_inputs[i].T @ dz
            if f"layer{i}.b" not in skip:
                grads[f"layer{i}.b"] = dz.sum(axis=0)
            if i > 0 or cond is not None:
                dh = dz @ layer.weight.T
        if cond is not None:
            if cond.applies_at(0):
                cond.backward(0, dh, grads, skip)
            cond.finish_backward(grads, skip)
        self._token = None
        return grads


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=1, keepdims=True)


def cross_entropy_loss(logits: np.ndarray, labels) -> tuple[np.floating, np.ndarray]:
    """Mean negative log-likelihood and its gradient w.r.t. the logits.

    The loss keeps the dtype of ``logits`` (grad checks rely on this).
    """
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    labels = labels.astype(np.int64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    log_probs = shifted[np.arange(n), labels] - log_norm
    loss = -log_probs.mean()
    if not np.isfinite(loss):
        raise NumericError("non-finite cross-entropy loss")
    grad = np.exp(shifted - log_norm[:, None])
    grad[np.arange(n), labels] -= 1
    return loss, grad / n


class SGD:
    """Momentum SGD: v <- momentum * v + g; p <- p - lr * v."""

    def __init__(self, momentum: float = 0.9):
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        sgd_step(params, grads, lr, self.momentum, self.velocity)


def sgd_step(params, grads, lr, momentum=0.0, velocity=None):
    """Update ``params`` in place for every name present in ``grads``.

    All gradients are validated before any parameter moves, so a non-finite
    gradient leaves the model untouched.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name}")
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    if velocity is None:
        velocity = {}
    for name, g in grads.items():
        p = params[name]
        if momentum:
            v = velocity.get(name)
            v = g.astype(p.dtype) if v is None else momentum * v + g
            velocity[name] = v
        else:
            v = g
        p -= (lr * v).astype(p.dtype, copy=False)
    return params


def count_params(model: MLP) -> int:
    return sum(int(p.size) for p in model.params().values())


def grad_check(
    model: MLP,
    batch: np.ndarray,
    labels,
    embedding: np.ndarray | None = None,
    epsilon: float = 1e-5,
    training: bool = True,
) -> float:
    """Max relative error between backprop and central differences.

    Both sides run on a shadow copy of ``model`` in extended precision
    (``np.longdouble``, at least 64-bit). Gradients that are structurally
    zero, e.g. biases feeding a train-mode batch norm, leave only round-off
    in the numeric side, and float64 round-off divided by the 1e-8 floor
    would swamp the error measure. Error per entry is
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    shadow = model.astype(SHADOW_DTYPE)
    n_params = count_params(shadow)
    if n_params >= 20_000:
        raise ValueError(f"model too large for exhaustive grad check ({n_params} params)")
    x = np.asarray(batch, dtype=SHADOW_DTYPE)
    e = None if embedding is None else np.asarray(embedding, dtype=SHADOW_DTYPE)
    # freeze running statistics so repeated forwards stay comparable
    saved = {k: v.copy() for k, v in shadow.buffers().items()}

    def loss_fn():
        cache = shadow.forward(x, e, training=training)
        for k, v in shadow.buffers().items():
            v[...] = saved[k]
        return cross_entropy_loss(cache.logits, labels)[0]

    cache = shadow.forward(x, e, training=training)
    for k, v in shadow.buffers().items():
        v[...] = saved[k]
    _, dlogits = cross_entropy_loss(cache.logits, labels)
    analytic = shadow.backward(cache, dlogits)
    worst = 0.0
    for name, p in shadow.params().items():
        a = analytic[name]
        flat = p.reshape(-1)
        af = a.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + epsilon
            up = loss_fn()
            flat[j] = orig - epsilon
            down = loss_fn()
            flat[j] = orig
            num = (up - down) / (2 * epsilon)
            err = abs(af[j] - num) / max(abs(af[j]), abs(num), 1e-8)
            worst = max(worst, err)
    return worst


def numeric_gradient(fn: Callable[[], float], arr: np.ndarray, epsilon: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``fn`` w.r.t. the entries of ``arr`` (mutated in place, restored)."""
    out = np.zeros(arr.shape, dtype=np.result_type(arr.dtype, np.float64))
    flat = arr.reshape(-1)
    of = out.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + epsilon
        up = fn()
        flat[j] = orig - epsilon
        down = fn()
        flat[j] = orig
        of[j] = (up - down) / (2 * epsilon)
    return out


def describe(model: MLP) -> dict[str, Any]:
    return {
        "dims": [model.layers[0].in_dim] + [l.out_dim for l in model.layers],
        "activation": model.layers[0].activation,
        "batch_norm": model.norms[0] is not None,
        "params": count_params(model),
    }
