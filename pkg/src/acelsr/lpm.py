"""Latent prediction model: next latent state from (latent state, action)."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import learncore as lc
from .datastore import Dataset
from .roadmap import CoveredSpace


class NoActionPairs(ValueError):
    pass


class UnknownAction(KeyError):
    pass


@dataclass
class LPMParams:
    """MLP over ``[z, onehot(u)]`` predicting the latent displacement ``z' - z``."""

    net: lc.ModelParams
    latent_dim: int
    n_actions: int
    trace: list = field(default_factory=list)

    def _inputs(self, z, u):
        z = np.atleast_2d(np.asarray(z, dtype=np.float32))
        u = np.atleast_1d(np.asarray(u, dtype=np.int64))
        if z.shape[1] != self.latent_dim:
            raise lc.ShapeError(f"latent width {z.shape[1]} != {self.latent_dim}")
        if np.any((u < 0) | (u >= self.n_actions)):
            raise UnknownAction(u[(u < 0) | (u >= self.n_actions)].tolist())
        onehot = np.zeros((len(u), self.n_actions), dtype=np.float32)
        onehot[np.arange(len(u)), u] = 1.0
        return np.concatenate([z, onehot], axis=1), z

    def predict(self, z, u) -> np.ndarray:
        """Vectorized over rows of ``z`` and entries of ``u`` (broadcast if one is single)."""
        single = np.ndim(z) == 1 and np.ndim(u) == 0
        z2 = np.atleast_2d(z)
        u1 = np.atleast_1d(u)
        if len(z2) == 1 and len(u1) > 1:
            z2 = np.repeat(z2, len(u1), axis=0)
        elif len(u1) == 1 and len(z2) > 1:
            u1 = np.repeat(u1, len(z2))
        x, zf = self._inputs(z2, u1)
        out = zf + lc.predict(self.net, x)
        return out[0] if single else out

    def to_pack(self):
        meta, arrays = lc.pack_model("net", self.net)
        return "lpm", {"net": meta, "latent_dim": self.latent_dim, "n_actions": self.n_actions,
                       "trace": self.trace}, arrays

    @classmethod
    def from_pack(cls, meta, arrays):
        return cls(lc.unpack_model("net", meta["net"], arrays), meta["latent_dim"], meta["n_actions"], meta["trace"])


def lpm_loss(net, batch, rng=None):
    x, z0, z1 = batch
    pred, cache = lc.forward(net, x)
    target = z1 - z0
    loss = lc.mse(pred, target)
    grads, _ = lc.backward(net, cache, lc.mse_grad(pred, target).astype(pred.dtype))
    return loss, [grads]


def train_lpm(ds: Dataset, encoder, cfg: lc.TrainConfig, hidden=(100, 100),
              latents: Optional[np.ndarray] = None) -> LPMParams:
    """Fit on ``(encode(O1), onehot(u)) -> encode(O2)`` over the action pairs of ``ds``."""
    rows = np.flatnonzero(ds.a == 1)
    if len(rows) == 0:
        raise NoActionPairs("dataset has no action pairs")
    if latents is None:
        z0 = encoder.encode(ds.obs_a[rows])
        z1 = encoder.encode(ds.obs_b[rows])
    else:
        q = len(ds)
        z0, z1 = latents[rows], latents[q + rows]
    z0 = np.asarray(z0, dtype=np.float32)
    z1 = np.asarray(z1, dtype=np.float32)
    L, K = z0.shape[1], len(ds.actions)
    net = lc.init_mlp([L + K, *hidden, L], cfg.seed)
    shell = LPMParams(net, L, K)
    x, _ = shell._inputs(z0, ds.u[rows])
    net, trace = lc.train(net, (x, z0, z1), cfg, lambda p, b, r: lpm_loss(p[0], b, r))
    return LPMParams(net, L, K, trace)


def predict(lpm, z, u):
    return lpm.predict(z, u)


def predict_reliable(lpm, z, u, covered: CoveredSpace, rho_gate: float = 1.0) -> Optional[np.ndarray]:
    """The prediction if it lies within ``eps * rho_gate`` (L1) of a covered state, else None."""
    zn = lpm.predict(z, u)
    return zn if bool(covered.contains(zn, rho_gate)) else None
