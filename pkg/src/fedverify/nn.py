"""Small numpy MLP with analytic gradients and exact Hessian-vector products.

Parameters live in one flat float64 vector.  Layer ``l`` contributes its
weight matrix ``W_l`` (shape ``in x out``, row-major) followed by its bias
``b_l``.  Every function here is pure: nothing is cached between calls.
"""

from __future__ import annotations

from dataclasses import dataclass
import numpy as np

from .errors import CapabilityError, ConfigError, NumericError

ACTIVATIONS = ("relu", "tanh")
DEFAULT_PARAM_CAP = 50_000


@dataclass(frozen=True)
class ModelSpec:
    layer_sizes: tuple[int, ...]
    activation: str = "relu"
    loss_kind: str = "cross_entropy"
    param_cap: int = DEFAULT_PARAM_CAP

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ConfigError("layer_sizes needs at least an input and an output size")
        if any(s <= 0 for s in sizes):
            raise ConfigError(f"layer sizes must be positive, got {sizes}")
        if sizes[-1] < 2:
            raise ConfigError("output layer must have at least 2 classes")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.loss_kind != "cross_entropy":
            raise ConfigError(f"unknown loss {self.loss_kind!r}")
        if self.n_params > self.param_cap:
            raise ConfigError(
                f"model has {self.n_params} parameters, above the cap of {self.param_cap}"
            )

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def class_count(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def n_params(self) -> int:
        s = self.layer_sizes
        return sum(s[i] * s[i + 1] + s[i + 1] for i in range(len(s) - 1))

    def layer_slices(self) -> list[tuple[slice, slice]]:
        """(weight slice, bias slice) into the flat vector, per layer."""
        out = []
        off = 0
        s = self.layer_sizes
        for i in range(len(s) - 1):
            nw = s[i] * s[i + 1]
            out.append((slice(off, off + nw), slice(off + nw, off + nw + s[i + 1])))
            off += nw + s[i + 1]
        return out

    def to_dict(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "activation": self.activation,
            "loss_kind": self.loss_kind,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            layer_sizes=tuple(d["layer_sizes"]),
            activation=d.get("activation", "relu"),
            loss_kind=d.get("loss_kind", "cross_entropy"),
            param_cap=d.get("param_cap", DEFAULT_PARAM_CAP),
        )


def init_params(spec: ModelSpec, rng: np.random.Generator) -> np.ndarray:
    """Glorot-uniform weights, zero biases."""
    params = np.zeros(spec.n_params)
    for (ws, _), fan_in, fan_out in zip(
        spec.layer_slices(), spec.layer_sizes[:-1], spec.layer_sizes[1:]
    ):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params[ws] = rng.uniform(-limit, limit, size=fan_in * fan_out)
    return params


def unpack(spec: ModelSpec, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    params = np.asarray(params, dtype=np.float64)
    if params.ndim != 1 or params.shape[0] != spec.n_params:
        raise ConfigError(
            f"parameter vector has shape {params.shape}, model expects ({spec.n_params},)"
        )
    s = spec.layer_sizes
    return [
        (params[ws].reshape(s[i], s[i + 1]), params[bs])
        for i, (ws, bs) in enumerate(spec.layer_slices())
    ]


def ensure_finite(values: np.ndarray, what: str = "parameters") -> np.ndarray:
    if not np.all(np.isfinite(values)):
        raise NumericError(f"non-finite values in {what}")
    return values


def _check_inputs(spec: ModelSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ConfigError(f"inputs have shape {x.shape}, model expects (*, {spec.input_dim})")
    return x


def _check_labels(spec: ModelSpec, y, n: int) -> np.ndarray:
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if y.shape != (n,):
        raise ConfigError(f"labels have shape {y.shape}, expected ({n},)")
    if n == 0:
        raise ConfigError("empty batch")
    if y.min() < 0 or y.max() >= spec.class_count:
        raise ConfigError(f"labels must lie in [0, {spec.class_count})")
    return y


def _act(kind: str, z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _act_d1(kind: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    return (z > 0).astype(np.float64) if kind == "relu" else 1.0 - a * a


def _act_d2(kind: str, z: np.ndarray, a: np.ndarray):
    if kind == "relu":
        return None
    return -2.0 * a * (1.0 - a * a)


def _forward_cache(spec, layers, x):
    acts = [x]
    zs = []
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        z = acts[-1] @ w + b
        if not np.all(np.isfinite(z)):
            raise NumericError(f"non-finite pre-activation at layer {i}", layer=i)
        zs.append(z)
        acts.append(z if i == last else _act(spec.activation, z))
    return zs, acts


def forward(spec: ModelSpec, params: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Logits for a batch of inputs, shape (batch, C)."""
    layers = unpack(spec, params)
    zs, _ = _forward_cache(spec, layers, _check_inputs(spec, x))
    return zs[-1]


def log_softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def per_sample_losses(spec: ModelSpec, params: np.ndarray, x, y) -> np.ndarray:
    x = _check_inputs(spec, x)
    y = _check_labels(spec, y, x.shape[0])
    logp = log_softmax(forward(spec, params, x))
    return -logp[np.arange(len(y)), y]


def _backward(spec, layers, zs, acts, y):
    """Per-layer (dW, db) of the mean cross-entropy plus dL/dx."""
    n = len(y)
    probs = softmax_probs(zs[-1])
    g = probs.copy()
    g[np.arange(n), y] -= 1.0
    g /= n
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        grads[i] = (acts[i].T @ g, g.sum(axis=0))
        g = g @ w.T
        if i > 0:
            g = g * _act_d1(spec.activation, zs[i - 1], acts[i])
    return grads, g


def loss_and_grad(spec: ModelSpec, params: np.ndarray, x, y) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the parameters."""
    layers = unpack(spec, params)
    x = _check_inputs(spec, x)
    y = _check_labels(spec, y, x.shape[0])
    zs, acts = _forward_cache(spec, layers, x)
    logp = log_softmax(zs[-1])
    loss = float(-logp[np.arange(len(y)), y].mean())
    if not np.isfinite(loss):
        raise NumericError("non-finite loss", layer=len(layers) - 1)
    grads, _ = _backward(spec, layers, zs, acts, y)
    flat = np.empty(spec.n_params)
    for (ws, bs), (dw, db) in zip(spec.layer_slices(), grads):
        flat[ws] = dw.ravel()
        flat[bs] = db
    return loss, flat


def input_gradient(spec: ModelSpec, params: np.ndarray, x, y) -> np.ndarray:
    """Gradient of each sample's own loss w.r.t. its input.

    A single sample (1-D ``x``, scalar ``y``) returns a 1-D vector; a batch
    returns one row per sample.
    """
    single = np.ndim(x) == 1
    layers = unpack(spec, params)
    xb = _check_inputs(spec, x)
    yb = _check_labels(spec, y, xb.shape[0])
    zs, acts = _forward_cache(spec, layers, xb)
    _, gx = _backward(spec, layers, zs, acts, yb)
    # _backward divides by the batch size; undo so each row is a per-sample gradient
    gx = gx * xb.shape[0]
    return gx[0] if single else gx


def sgd_step(params: np.ndarray, gradient: np.ndarray, lr: float) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    gradient = np.asarray(gradient, dtype=np.float64)
    if params.shape != gradient.shape:
        raise ConfigError(f"shape mismatch: params {params.shape}, gradient {gradient.shape}")
    if lr < 0:
        raise ConfigError("learning rate must be non-negative")
    return ensure_finite(params - lr * gradient)


def hessian_vector_product(
    spec: ModelSpec,
    params: np.ndarray,
    x,
    y,
    v: np.ndarray,
    damping: float = 0.0,
) -> np.ndarray:
    """(H + damping*I) v for the mean cross-entropy Hessian H over (x, y).

    Uses the R-operator (forward-over-reverse), so the cost is a small
    multiple of one gradient evaluation.  ``v`` may be a single vector of
    length P or a (P, k) block of directions.
    """
    if damping < 0:
        raise ConfigError("damping must be non-negative")
    if spec.n_params > spec.param_cap:
        raise CapabilityError(
            "parameter count above cap; stochastic Hessian estimation is not implemented"
        )
    v = np.asarray(v, dtype=np.float64)
    single = v.ndim == 1
    V = v[:, None] if single else v
    if V.shape[0] != spec.n_params:
        raise ConfigError(f"direction has length {V.shape[0]}, expected {spec.n_params}")
    k = V.shape[1]
    layers = unpack(spec, params)
    x = _check_inputs(spec, x)
    y = _check_labels(spec, y, x.shape[0])
    n = len(y)
    s = spec.layer_sizes
    dirs = [
        (V[ws].T.reshape(k, s[i], s[i + 1]), V[bs].T)
        for i, (ws, bs) in enumerate(spec.layer_slices())
    ]
    zs, acts = _forward_cache(spec, layers, x)
    n_layers = len(layers)

    # R-forward pass
    r_acts = [None]
    r_zs = []
    for i, (w, _) in enumerate(layers):
        vw, vb = dirs[i]
        rz = np.einsum("bi,kio->kbo", acts[i], vw) + vb[:, None, :]
        if r_acts[i] is not None:
            rz = rz + r_acts[i] @ w
        r_zs.append(rz)
        if i < n_layers - 1:
            r_acts.append(_act_d1(spec.activation, zs[i], acts[i + 1]) * rz)

    probs = softmax_probs(zs[-1])
    g = probs.copy()
    g[np.arange(n), y] -= 1.0
    g /= n
    rz_out = r_zs[-1]
    rg = probs * (rz_out - (probs * rz_out).sum(axis=-1, keepdims=True)) / n

    out = np.empty((spec.n_params, k))
    for i in range(n_layers - 1, -1, -1):
        w, _ = layers[i]
        vw, _ = dirs[i]
        ws, bs = spec.layer_slices()[i]
        r_dw = np.einsum("bi,kbo->kio", acts[i], rg)
        if r_acts[i] is not None:
            r_dw = r_dw + np.einsum("kbi,bo->kio", r_acts[i], g)
        out[ws] = r_dw.reshape(k, -1).T
        out[bs] = rg.sum(axis=1).T
        if i > 0:
            pre = g @ w.T
            r_pre = rg @ w.T + np.einsum("bo,kio->kbi", g, vw)
            a_prev = acts[i]
            d1 = _act_d1(spec.activation, zs[i - 1], a_prev)
            d2 = _act_d2(spec.activation, zs[i - 1], a_prev)
            rg = r_pre * d1
            if d2 is not None:
                rg = rg + pre * d2 * r_zs[i - 1]
            g = pre * d1
    if damping:
        out += damping * V
    return out[:, 0] if single else out


def gauss_newton_vector_product(
    spec: ModelSpec,
    params: np.ndarray,
    x,
    y,
    v: np.ndarray,
    damping: float = 0.0,
) -> np.ndarray:
    """(G + damping*I) v with G the Gauss-Newton curvature of the mean cross-entropy.

    G = mean_i J_i^T (diag(p_i) - p_i p_i^T) J_i is positive semi-definite,
    unlike the exact Hessian of a ReLU network.  ``y`` only fixes the batch.
    """
    if damping < 0:
        raise ConfigError("damping must be non-negative")
    if spec.n_params > spec.param_cap:
        raise CapabilityError(
            "parameter count above cap; stochastic Hessian estimation is not implemented"
        )
    v = np.asarray(v, dtype=np.float64)
    single = v.ndim == 1
    V = v[:, None] if single else v
    if V.shape[0] != spec.n_params:
        raise ConfigError(f"direction has length {V.shape[0]}, expected {spec.n_params}")
    k = V.shape[1]
    layers = unpack(spec, params)
    x = _check_inputs(spec, x)
    _check_labels(spec, y, x.shape[0])
    n = x.shape[0]
    s = spec.layer_sizes
    slices = spec.layer_slices()
    zs, acts = _forward_cache(spec, layers, x)
    # J v, layer by layer
    r_act = None
    for i, (w, _) in enumerate(layers):
        vw = V[slices[i][0]].T.reshape(k, s[i], s[i + 1])
        rz = np.einsum("bi,kio->kbo", acts[i], vw) + V[slices[i][1]].T[:, None, :]
        if r_act is not None:
            rz = rz + r_act @ w
        if i < len(layers) - 1:
            r_act = _act_d1(spec.activation, zs[i], acts[i + 1]) * rz
    probs = softmax_probs(zs[-1])
    u = probs * (rz - (probs * rz).sum(axis=-1, keepdims=True)) / n
    # J^T u
    out = np.empty((spec.n_params, k))
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        ws, bs = slices[i]
        out[ws] = np.einsum("bi,kbo->kio", acts[i], u).reshape(k, -1).T
        out[bs] = u.sum(axis=1).T
        if i > 0:
            u = (u @ w.T) * _act_d1(spec.activation, zs[i - 1], acts[i])
    if damping:
        out += damping * V
    return out[:, 0] if single else out


def hessian(spec: ModelSpec, params: np.ndarray, x, y, chunk: int = 256) -> np.ndarray:
    """Dense loss Hessian, assembled column-block by column-block from HVPs."""
    p = spec.n_params
    h = np.empty((p, p))
    for start in range(0, p, chunk):
        stop = min(p, start + chunk)
        basis = np.zeros((p, stop - start))
        basis[np.arange(start, stop), np.arange(stop - start)] = 1.0
        h[:, start:stop] = hessian_vector_product(spec, params, x, y, basis)
    return 0.5 * (h + h.T)


def accuracy(spec: ModelSpec, params: np.ndarray, x, y) -> float:
    x = _check_inputs(spec, x)
    y = np.atleast_1d(np.asarray(y))
    return float((forward(spec, params, x).argmax(axis=1) == y).mean())

