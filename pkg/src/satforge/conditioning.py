"""Embedding-driven shift/scale transforms for inputs and hidden layers.

Mechanisms, from most to fewest trainable parameters:

* ``control_network``  shared relu trunk + per-site sigmoid scale / tanh shift heads
* ``control_layer``    ``x + act(W^T e + b)`` (shift) or ``x * act(W^T e + b)`` (scale)
* ``control_vector``   ``x + sigmoid(w) * e``
* ``control_variable`` ``x + w * e`` with scalar ``w``
* ``constant_scale``   ``x + c * e``, ``c`` fixed (0.1 by default)
* ``concatenate``      ``[x, e]`` at the input only

Embeddings are either one vector (broadcast to every frame) or a matrix
with one row per frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from satforge.nn_core import activate, activation_backward, glorot_uniform, sigmoid

MECHANISMS = (
    "control_network",
    "control_layer",
    "control_vector",
    "control_variable",
    "constant_scale",
    "concatenate",
)

# CLI spellings
MECHANISM_ALIASES = {
    "ctrl-network": "control_network",
    "ctrl-layer": "control_layer",
    "ctrl-vector": "control_vector",
    "ctrl-variable": "control_variable",
    "ctrl-scale": "constant_scale",
    "concat": "concatenate",
}

DEFAULT_CONSTANT_SCALE = 0.1
SCALE_HEAD_INIT = 4.0


@dataclass(frozen=True)
class Embedding:
    vector: np.ndarray
    level: str = "utterance"  # frame | utterance | speaker
    kind: str = "oracle_full"

    def __post_init__(self):
        if self.level not in ("frame", "utterance", "speaker"):
            raise ValueError(f"unknown embedding level {self.level!r}")
        expected = 2 if self.level == "frame" else 1
        if np.ndim(self.vector) != expected:
            raise ValueError(f"{self.level}-level embedding must be {expected}-D")

    @property
    def dim(self) -> int:
        return int(np.shape(self.vector)[-1])

    def per_frame(self, n_frames: int) -> np.ndarray:
        if self.level == "frame":
            if self.vector.shape[0] != n_frames:
                raise ValueError(f"frame-level embedding has {self.vector.shape[0]} rows, need {n_frames}")
            return self.vector
        return np.broadcast_to(self.vector, (n_frames, self.dim))


@dataclass(frozen=True)
class ConditioningSpec:
    mechanism: str
    site: str | tuple[int, ...] = "input"  # input | all_hidden | explicit site indices
    mode: str = "shift"  # shift | scale | both (both: control network only)
    activation: str = "linear"
    shared_units: int = 100
    use_skip: bool = True
    constant: float = DEFAULT_CONSTANT_SCALE

    def __post_init__(self):
        mech = MECHANISM_ALIASES.get(self.mechanism, self.mechanism)
        object.__setattr__(self, "mechanism", mech)
        if mech not in MECHANISMS:
            raise ValueError(f"unknown conditioning mechanism {self.mechanism!r}")
        if self.mode not in ("shift", "scale", "both"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "both" and mech != "control_network":
            raise ValueError("mode 'both' is only defined for the control network")
        if self.mode == "scale" and mech in ("control_vector", "control_variable", "constant_scale"):
            raise ValueError(f"{mech} only shifts")
        if isinstance(self.site, str) and self.site not in ("input", "all_hidden"):
            raise ValueError(f"unknown site {self.site!r}")
        if mech == "concatenate" and self.site != "input":
            raise ValueError("concatenation is only defined at the input")

    def sites(self, n_hidden: int) -> tuple[int, ...]:
        if self.site == "input":
            return (0,)
        if self.site == "all_hidden":
            return tuple(range(1, n_hidden + 1))
        sites = tuple(sorted(set(int(s) for s in self.site)))
        if not sites or sites[0] < 0 or sites[-1] > n_hidden:
            raise ValueError(f"sites {sites} out of range 0..{n_hidden}")
        if self.mechanism == "concatenate" and sites != (0,):
            raise ValueError("concatenation is only defined at the input")
        return sites

    @property
    def label(self) -> str:
        site = self.site if isinstance(self.site, str) else "+".join(map(str, self.site))
        return f"{self.mechanism}:{self.mode}:{site}"


# ---------------------------------------------------------------------------
# functional forms


def _check(x: np.ndarray, e: np.ndarray, dim: int | None = None) -> np.ndarray:
    x = np.atleast_2d(x)
    e = np.asarray(e, dtype=x.dtype)
    if e.ndim == 2 and e.shape[0] not in (1, x.shape[0]):
        raise ValueError(f"frame-level embedding has {e.shape[0]} rows for {x.shape[0]} frames")
    if dim is not None and e.shape[-1] != dim:
        raise ValueError(f"embedding dim {e.shape[-1]} != site dim {dim}")
    return e


def apply_control_layer(x, e, weight, bias, activation="linear", mode="shift"):
    x = np.atleast_2d(x)
    e = _check(x, e)
    if weight.shape != (e.shape[-1], x.shape[1]) or bias.shape != (x.shape[1],):
        raise ValueError(f"control layer params {weight.shape}/{bias.shape} do not map {e.shape[-1]} -> {x.shape[1]}")
    f = activate(activation, e @ weight + bias)
    return x + f if mode == "shift" else x * f


def apply_control_vector(x, e, w):
    x = np.atleast_2d(x)
    e = _check(x, e, x.shape[1])
    if np.shape(w) != (x.shape[1],):
        raise ValueError("control vector must match the site dim")
    return x + sigmoid(np.asarray(w, dtype=x.dtype)) * e


def apply_control_variable(x, e, w):
    x = np.atleast_2d(x)
    e = _check(x, e, x.shape[1])
    return x + float(np.ravel(w)[0]) * e


def apply_constant_scale(x, e, c=DEFAULT_CONSTANT_SCALE):
    x = np.atleast_2d(x)
    e = _check(x, e, x.shape[1])
    return x + c * e


def apply_concatenate(x, e, site: int = 0):
    if site != 0:
        raise ValueError("concatenation is only defined at the input")
    x = np.atleast_2d(x)
    e = _check(x, e)
    e = np.broadcast_to(e, (x.shape[0], e.shape[-1]))
    return np.concatenate([x, e], axis=1)


@dataclass
class ControlNetworkParams:
    trunk: list[tuple[np.ndarray, np.ndarray]]
    scale_head: tuple[np.ndarray, np.ndarray] | None
    shift_head: tuple[np.ndarray, np.ndarray] | None


def control_network_heads(e, p: ControlNetworkParams):
    t = np.atleast_2d(e)
    for w, b in p.trunk:
        t = np.maximum(t @ w + b, 0)
    s = sigmoid(t @ p.scale_head[0] + p.scale_head[1]) if p.scale_head is not None else None
    b = np.tanh(t @ p.shift_head[0] + p.shift_head[1]) if p.shift_head is not None else None
    return s, b


def combine_control_network(h, s, b, use_skip: bool):
    """``(h * s) + b``, plus ``h`` again when the skip path is on.

    Missing heads drop their term: shift-only is ``h + b`` (the identity path
    is already present), scale-only is ``h * s`` or ``h * (1 + s)`` with skip.
    """
    if s is None:
        return h + b
    out = h * (1 + s) if use_skip else h * s
    return out if b is None else out + b


def apply_control_network(h_prev, e, p: ControlNetworkParams, use_skip: bool = True):
    h_prev = np.atleast_2d(h_prev)
    _check(h_prev, e)
    s, b = control_network_heads(e, p)
    return combine_control_network(h_prev, s, b, use_skip)


def count_conditioning_params(spec: ConditioningSpec, embed_dim: int, site_dims, first_hidden: int | None = None) -> int:
    """Trainable parameters owned by the conditioning mechanism.

    ``site_dims`` lists the width at each conditioned site. Concatenation
    owns the embedding rows of the first layer, so it needs ``first_hidden``.
    """
    if isinstance(site_dims, int):
        site_dims = [site_dims]
    d_e = embed_dim
    mech = spec.mechanism
    if mech == "control_network":
        u = spec.shared_units
        heads = 2 if spec.mode == "both" else 1
        trunk = d_e * u + u + u * u + u
        return trunk + sum(heads * (u * d + d) for d in site_dims)
    if mech == "control_layer":
        return sum(d_e * d + d for d in site_dims)
    if mech == "control_vector":
        return sum(site_dims)
    if mech == "control_variable":
        return len(site_dims)
    if mech == "constant_scale":
        return 0
    if first_hidden is None:
        raise ValueError("concatenation count needs the first hidden width")
    return d_e * first_hidden


# ---------------------------------------------------------------------------
# differentiable module used inside MLP


def _inverse_init(activation: str, target: float) -> float:
    """Bias that makes ``act(bias)`` close to ``target`` (0 or 1)."""
    if target == 0.0:
        return -SCALE_HEAD_INIT if activation == "sigmoid" else 0.0
    return {"linear": 1.0, "relu": 1.0, "sigmoid": SCALE_HEAD_INIT, "tanh": 3.0}[activation]


def _unbroadcast(g: np.ndarray, rows: int) -> np.ndarray:
    return g.sum(axis=0, keepdims=True) if rows == 1 and g.shape[0] != 1 else g


@dataclass
class Conditioner:
    """Parameter state and forward/backward hooks for one ConditioningSpec.

    Initialised near the identity transform so a freshly attached
    conditioner leaves the host network's outputs (almost) unchanged.
    """

    spec: ConditioningSpec
    embed_dim: int
    site_dims: dict[int, int]
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self._e = None
        self._trunk_cache: list = []
        self._site_cache: dict[int, tuple] = {}
        self._d_trunk = None
        mech = self.spec.mechanism
        if mech in ("control_vector", "control_variable", "constant_scale"):
            for s, d in self.site_dims.items():
                if d != self.embed_dim:
                    raise ValueError(f"{mech} needs embedding dim == site dim (site {s}: {d} vs {self.embed_dim})")
        if mech == "concatenate" and set(self.site_dims) != {0}:
            raise ValueError("concatenation is only defined at the input")

    @classmethod
    def create(cls, spec: ConditioningSpec, embed_dim: int, site_dims: dict[int, int], seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        t: dict[str, np.ndarray] = {}
        mech = spec.mechanism
        if mech == "control_network":
            u = spec.shared_units
            t["cond.trunk0.W"] = glorot_uniform(rng, embed_dim, u, dtype)
            t["cond.trunk0.b"] = np.zeros(u, dtype)
            t["cond.trunk1.W"] = glorot_uniform(rng, u, u, dtype)
            t["cond.trunk1.b"] = np.zeros(u, dtype)
            for s, d in site_dims.items():
                if spec.mode in ("scale", "both"):
                    t[f"cond.site{s}.scale.W"] = np.zeros((u, d), dtype)
                    init = -SCALE_HEAD_INIT if spec.use_skip else SCALE_HEAD_INIT
                    t[f"cond.site{s}.scale.b"] = np.full(d, init, dtype)
                if spec.mode in ("shift", "both"):
                    t[f"cond.site{s}.shift.W"] = np.zeros((u, d), dtype)
                    t[f"cond.site{s}.shift.b"] = np.zeros(d, dtype)
        elif mech == "control_layer":
            target = 0.0 if spec.mode == "shift" else 1.0
            for s, d in site_dims.items():
                t[f"cond.site{s}.W"] = np.zeros((embed_dim, d), dtype)
                t[f"cond.site{s}.b"] = np.full(d, _inverse_init(spec.activation, target), dtype)
        elif mech == "control_vector":
            for s, d in site_dims.items():
                t[f"cond.site{s}.w"] = np.full(d, -SCALE_HEAD_INIT, dtype)
        elif mech == "control_variable":
            for s in site_dims:
                t[f"cond.site{s}.w"] = np.zeros(1, dtype)
        return cls(spec, embed_dim, dict(site_dims), t)

    # MLP protocol ---------------------------------------------------------

    def params(self) -> dict[str, np.ndarray]:
        return dict(self.tensors)

    def cast(self, dtype) -> None:
        for k in list(self.tensors):
            self.tensors[k] = self.tensors[k].astype(dtype)

    def applies_at(self, site: int) -> bool:
        return site in self.site_dims

    def input_dim(self, first_layer_in: int) -> int:
        if self.spec.mechanism == "concatenate":
            return first_layer_in - self.embed_dim
        return first_layer_in

    def begin(self, e: np.ndarray, n_rows: int) -> None:
        e = np.atleast_2d(e)
        if e.shape[1] != self.embed_dim:
            raise ValueError(f"embedding dim {e.shape[1]} != configured {self.embed_dim}")
        if e.shape[0] not in (1, n_rows):
            raise ValueError(f"embedding rows {e.shape[0]} do not align with {n_rows} frames")
        self._e = e
        self._site_cache = {}
        self._trunk_cache = []
        self._d_trunk = None
        if self.spec.mechanism == "control_network":
            t = e
            for i in range(2):
                z = t @ self.tensors[f"cond.trunk{i}.W"] + self.tensors[f"cond.trunk{i}.b"]
                self._trunk_cache.append((t, z))
                t = np.maximum(z, 0)
            self._trunk_out = t

    def apply(self, site: int, h: np.ndarray) -> np.ndarray:
        d = self.site_dims[site]
        if h.shape[1] != d:
            raise ValueError(f"site {site}: expected width {d}, got {h.shape[1]}")
        e = self._e
        mech = self.spec.mechanism
        p = self.tensors
        if mech == "control_network":
            t = self._trunk_out
            s = b = None
            if f"cond.site{site}.scale.W" in p:
                s = sigmoid(t @ p[f"cond.site{site}.scale.W"] + p[f"cond.site{site}.scale.b"])
            if f"cond.site{site}.shift.W" in p:
                b = np.tanh(t @ p[f"cond.site{site}.shift.W"] + p[f"cond.site{site}.shift.b"])
            self._site_cache[site] = (h, s, b)
            return combine_control_network(h, s, b, self.spec.use_skip)
        if mech == "control_layer":
            z = e @ p[f"cond.site{site}.W"] + p[f"cond.site{site}.b"]
            f = activate(self.spec.activation, z)
            self._site_cache[site] = (h, z, f)
            return h + f if self.spec.mode == "shift" else h * f
        if mech == "control_vector":
            g = sigmoid(p[f"cond.site{site}.w"])
            self._site_cache[site] = (g,)
            return h + g * e
        if mech == "control_variable":
            return h + p[f"cond.site{site}.w"][0] * e
        if mech == "constant_scale":
            return h + self.spec.constant * e
        return np.concatenate([h, np.broadcast_to(e, (h.shape[0], e.shape[1]))], axis=1)

    def backward(self, site: int, dy: np.ndarray, grads: dict, skip) -> np.ndarray:
        e = self._e
        mech = self.spec.mechanism
        p = self.tensors
        rows = e.shape[0]
        if mech == "control_network":
            h, s, b = self._site_cache[site]
            use_skip = self.spec.use_skip
            dt = None
            if s is None:
                dh = dy.copy()
            else:
                dh = dy * (1 + s) if use_skip else dy * s
                dz = _unbroadcast(dy * h, rows) * s * (1 - s)
                key = f"cond.site{site}.scale"
                dt = dz @ p[key + ".W"].T
                if key + ".W" not in skip:
                    grads[key + ".W"] = self._trunk_out.T @ dz
                if key + ".b" not in skip:
                    grads[key + ".b"] = dz.sum(axis=0)
            if b is not None:
                dz = _unbroadcast(dy, rows) * (1 - b * b)
                key = f"cond.site{site}.shift"
                contrib = dz @ p[key + ".W"].T
                dt = contrib if dt is None else dt + contrib
                if key + ".W" not in skip:
                    grads[key + ".W"] = self._trunk_out.T @ dz
                if key + ".b" not in skip:
                    grads[key + ".b"] = dz.sum(axis=0)
            self._d_trunk = dt if self._d_trunk is None else self._d_trunk + dt
            return dh
        if mech == "control_layer":
            h, z, f = self._site_cache[site]
            if self.spec.mode == "shift":
                dh, df = dy, dy
            else:
                dh, df = dy * f, dy * h
            dz = activation_backward(self.spec.activation, z, f, _unbroadcast(df, rows))
            if f"cond.site{site}.W" not in skip:
                grads[f"cond.site{site}.W"] = e.T @ dz
            if f"cond.site{site}.b" not in skip:
                grads[f"cond.site{site}.b"] = dz.sum(axis=0)
            return dh
        if mech == "control_vector":
            (g,) = self._site_cache[site]
            if f"cond.site{site}.w" not in skip:
                grads[f"cond.site{site}.w"] = (dy * e).sum(axis=0) * g * (1 - g)
            return dy
        if mech == "control_variable":
            if f"cond.site{site}.w" not in skip:
                grads[f"cond.site{site}.w"] = np.array([(dy * e).sum()], dtype=dy.dtype)
            return dy
        if mech == "constant_scale":
            return dy
        return dy[:, : dy.shape[1] - self.embed_dim]

    def finish_backward(self, grads: dict, skip) -> None:
        if self.spec.mechanism != "control_network" or self._d_trunk is None:
            return
        dt = self._d_trunk
        for i in (1, 0):
            t_in, z = self._trunk_cache[i]
            dz = dt * (z > 0)
            if f"cond.trunk{i}.W" not in skip:
                grads[f"cond.trunk{i}.W"] = t_in.T @ dz
            if f"cond.trunk{i}.b" not in skip:
                grads[f"cond.trunk{i}.b"] = dz.sum(axis=0)
            if i:
                dt = dz @ self.tensors[f"cond.trunk{i}.W"].T
        self._d_trunk = None


def attach(model, spec: ConditioningSpec, embed_dim: int, seed: int = 0):
    """Return a conditioned copy of an unconditioned ``model``.

    Main-network weights are copied exactly. For concatenation the first
    layer grows zero rows for the embedding inputs, so the conditioned
    model reproduces the original outputs before any further training.
    """
    import copy

    from satforge.nn_core import MLP, DenseLayer

    if model.conditioner is not None:
        raise ValueError("model is already conditioned")
    layers = copy.deepcopy(model.layers)
    norms = copy.deepcopy(model.norms)
    dtype = model.dtype
    sites = spec.sites(model.n_hidden)
    site_dims = {s: model.site_dim(s) for s in sites}
    if spec.mechanism == "concatenate":
        first = layers[0]
        extra = np.zeros((embed_dim, first.out_dim), dtype)
        layers[0] = DenseLayer(np.concatenate([first.weight, extra], axis=0), first.bias, first.activation)
    cond = Conditioner.create(spec, embed_dim, site_dims, seed=seed, dtype=dtype)
    return MLP(layers, norms, conditioner=cond)


def main_param_names(model) -> list[str]:
    return [k for k in model.params() if not k.startswith("cond.")]


def conditioning_param_names(model) -> list[str]:
    names = [k for k in model.params() if k.startswith("cond.")]
    if model.conditioner is not None and model.conditioner.spec.mechanism == "concatenate":
        # the embedding rows of layer0.W are the only conditioning weights
        names.append("layer0.W")
    return names
