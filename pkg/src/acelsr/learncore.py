"""Dense networks with hand-written reverse-mode gradients, losses and optimizers.

Weights follow the ``y = W @ x + b`` convention (``W`` has shape
``(out, in)``); batched inputs are rows, so a layer computes ``X @ W.T + b``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

LEAK = 0.01


class ShapeError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass
class ModelParams:
    layers: list[tuple[np.ndarray, np.ndarray]]
    activations: list[str]
    arch: dict = field(default_factory=dict)

    @property
    def in_width(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def out_width(self) -> int:
        return self.layers[-1][0].shape[0]

    def arrays(self) -> list[np.ndarray]:
        return [a for wb in self.layers for a in wb]

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "ModelParams":
        it = iter(arrays)
        return ModelParams([(next(it), next(it)) for _ in self.layers], list(self.activations), dict(self.arch))

    def copy(self) -> "ModelParams":
        return self.with_arrays([a.copy() for a in self.arrays()])


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    optimizer: str = "adam"

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size <= 0 or self.learning_rate <= 0:
            raise ValueError("epochs must be >= 0, batch_size and learning_rate > 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


def init_mlp(sizes: Sequence[int], seed: int, hidden: str = "leaky_relu", out: str = "linear",
             dtype=np.float32) -> ModelParams:
    """He-style uniform fan-in initialization; biases start at zero."""
    rng = np.random.default_rng(seed)
    layers, acts = [], []
    for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = np.sqrt(6.0 / n_in)
        W = rng.uniform(-bound, bound, size=(n_out, n_in)).astype(dtype)
        layers.append((W, np.zeros(n_out, dtype=dtype)))
        acts.append(out if k == len(sizes) - 2 else hidden)
    return ModelParams(layers, acts, {"sizes": list(sizes), "init": "he_uniform", "seed": seed})


def _act(name, z):
    if name == "linear":
        return z
    if name == "leaky_relu":
        return np.where(z > 0, z, LEAK * z)
    if name == "relu":
        return np.maximum(z, 0)
    if name == "tanh":
        return np.tanh(z)
    if name == "sigmoid":
        return 1.0 / (1.0 + np.exp(-z))
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name, z, a, g):
    if name == "linear":
        return g
    if name == "leaky_relu":
        return np.where(z > 0, g, LEAK * g)
    if name == "relu":
        return np.where(z > 0, g, 0)
    if name == "tanh":
        return g * (1 - a * a)
    if name == "sigmoid":
        return g * a * (1 - a)
    raise ValueError(f"unknown activation {name!r}")


def forward(params: ModelParams, x: np.ndarray):
    """Returns ``(output, cache)``; a 1-D ``x`` yields a 1-D output."""
    x = np.asarray(x)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.ndim != 2 or h.shape[1] != params.in_width:
        raise ShapeError(f"expected input width {params.in_width}, got shape {x.shape}")
    cache = [(single, None, h)]
    for (W, b), name in zip(params.layers, params.activations):
        z = h @ W.T + b
        h = _act(name, z)
        cache.append((name, z, h))
    return (h[0] if single else h), cache


def backward(params: ModelParams, cache, grad_out: np.ndarray):
    """Returns ``(param_grads, grad_input)`` where ``param_grads`` mirrors ``params.layers``."""
    single = cache[0][0]
    g = np.asarray(grad_out)
    g = g[None, :] if single else g
    if g.shape != cache[-1][2].shape:
        raise ShapeError(f"upstream gradient shape {g.shape} != output shape {cache[-1][2].shape}")
    grads = [None] * len(params.layers)
    for k in range(len(params.layers) - 1, -1, -1):
        name, z, a = cache[k + 1]
        h_in = cache[k][2]
        gz = _act_grad(name, z, a, g)
        W = params.layers[k][0]
        grads[k] = (gz.T @ h_in, gz.sum(axis=0))
        g = gz @ W
    return grads, (g[0] if single else g)


def predict(params: ModelParams, x: np.ndarray, batch: int = 4096) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 1 or len(x) <= batch:
        return forward(params, x)[0]
    return np.concatenate([forward(params, x[i:i + batch])[0] for i in range(0, len(x), batch)])


# losses: each returns the mean value over leading axes; *_grad gives the matching gradient

def mse(x, y) -> float:
    d = np.asarray(x) - np.asarray(y)
    return float(np.mean(d * d))


def mse_grad(x, y) -> np.ndarray:
    d = np.asarray(x) - np.asarray(y)
    return 2.0 * d / d.size


def kl_standard_normal(mean, logvar) -> float:
    """KL(N(mean, exp(logvar)) || N(0, I)), summed over the last axis, averaged over rows."""
    mean, logvar = np.atleast_2d(mean), np.atleast_2d(logvar)
    kl = 0.5 * np.sum(np.exp(logvar) + mean * mean - 1.0 - logvar, axis=-1)
    return float(np.mean(kl))


def kl_standard_normal_grad(mean, logvar):
    mean, logvar = np.asarray(mean), np.asarray(logvar)
    n = mean.shape[0] if mean.ndim > 1 else 1
    return mean / n, 0.5 * (np.exp(logvar) - 1.0) / n


def hinge_repel(d, d_m):
    """``max(0, d_m - d)**2``; elementwise on arrays."""
    return np.maximum(0.0, d_m - np.asarray(d)) ** 2


def hinge_repel_grad(d, d_m):
    return -2.0 * np.maximum(0.0, d_m - np.asarray(d))


def attract(d):
    return np.asarray(d) ** 2


def attract_grad(d):
    return 2.0 * np.asarray(d)


def l1_distance(a, b):
    return np.abs(np.asarray(a) - np.asarray(b)).sum(axis=-1)


def l1_distance_grad(a, b):
    """Gradient of ``l1_distance`` w.r.t. ``a`` (the gradient w.r.t. ``b`` is its negation)."""
    return np.sign(np.asarray(a) - np.asarray(b))


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, arrays: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        return [p - self.lr * g for p, g in zip(arrays, grads)]


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, arrays: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        if self.m is None:
            self.m = [np.zeros_like(p) for p in arrays]
            self.v = [np.zeros_like(p) for p in arrays]
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        scale = self.lr * np.sqrt(1 - b2 ** self.t) / (1 - b1 ** self.t)
        out = []
        for k, (p, g) in enumerate(zip(arrays, grads)):
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * (g * g)
            out.append((p - scale * self.m[k] / (np.sqrt(self.v[k]) + self.eps)).astype(p.dtype, copy=False))
        return out


def make_optimizer(cfg: TrainConfig):
    return Adam(cfg.learning_rate) if cfg.optimizer == "adam" else SGD(cfg.learning_rate)


LossFn = Callable[[list, tuple, np.random.Generator], tuple[float, list]]


def train(params, data: Sequence[np.ndarray], cfg: TrainConfig, loss_fn: LossFn):
    """Minibatch training loop.

    ``params`` is a :class:`ModelParams` or a list of them; ``data`` is a tuple of
    arrays sharing their first axis. ``loss_fn(params_list, batch, rng)`` must
    return ``(loss, grads)`` with ``grads`` a list of per-model layer-gradient
    lists. Returns ``(params, per-epoch mean loss trace)``; input parameters are
    never modified.
    """
    single = isinstance(params, ModelParams)
    models = [params] if single else list(params)
    n = len(data[0])
    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(cfg)
    flat = [a for m in models for a in m.arrays()]
    trace = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = tuple(arr[idx] for arr in data)
            current = _unflatten(models, flat)
            loss, grads = loss_fn(current, batch, rng)
            gflat = [a for mg in grads for wb in mg for a in wb]
            if not np.isfinite(loss) or not all(np.isfinite(g).all() for g in gflat):
                raise DivergenceError(f"non-finite loss/gradient at epoch {len(trace)}")
            flat = opt.step(flat, gflat)
            total += loss * len(idx)
            seen += len(idx)
        trace.append(total / max(seen, 1))
        if not np.isfinite(trace[-1]) or not all(np.isfinite(a).all() for a in flat):
            raise DivergenceError(f"non-finite parameters after epoch {len(trace) - 1}")
    out = _unflatten(models, flat)
    return (out[0] if single else out), trace


def _unflatten(models, flat):
    out, pos = [], 0
    for m in models:
        k = 2 * len(m.layers)
        out.append(m.with_arrays(flat[pos:pos + k]))
        pos += k
    return out


def numerical_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x`` (float64)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def relative_error(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


def pack_model(prefix: str, params: ModelParams) -> tuple[dict, dict[str, np.ndarray]]:
    meta = {"activations": params.activations, "arch": params.arch, "n_layers": len(params.layers)}
    arrays = {}
    for k, (W, b) in enumerate(params.layers):
        arrays[f"{prefix}.{k}.W"] = W
        arrays[f"{prefix}.{k}.b"] = b
    return meta, arrays


def unpack_model(prefix: str, meta: dict, arrays: dict[str, np.ndarray]) -> ModelParams:
    layers = [(arrays[f"{prefix}.{k}.W"], arrays[f"{prefix}.{k}.b"]) for k in range(meta["n_layers"])]
    return ModelParams(layers, list(meta["activations"]), dict(meta["arch"]))
