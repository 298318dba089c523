"""Mapping module: a VAE over flattened observations with an action term.

The action term pulls the posterior means of similar pairs together and pushes
action pairs at least ``d_m`` apart in L1 distance.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import learncore as lc
from .datastore import Dataset

EPS_FLOOR = 1e-6


class NoSimilarPairs(ValueError):
    pass


@dataclass(frozen=True)
class MMWeights:
    beta_kl: float = 1e-3
    gamma_action: float = 1.0
    d_m: float = 5.0


@dataclass
class MMParams:
    encoder: lc.ModelParams
    decoder: lc.ModelParams
    latent_dim: int
    image_shape: tuple
    weights: MMWeights = field(default_factory=MMWeights)
    trace: list = field(default_factory=list)
    normalize: bool = True

    def encode(self, obs: np.ndarray) -> np.ndarray:
        return encode(self, obs)

    def decode(self, z: np.ndarray) -> np.ndarray:
        return decode(self, z)

    def to_pack(self):
        em, ea = lc.pack_model("enc", self.encoder)
        dm, da = lc.pack_model("dec", self.decoder)
        meta = {"enc": em, "dec": dm, "latent_dim": self.latent_dim, "image_shape": list(self.image_shape),
                "weights": asdict(self.weights), "trace": self.trace, "normalize": self.normalize}
        return "mm", meta, {**ea, **da}

    @classmethod
    def from_pack(cls, meta, arrays):
        return cls(lc.unpack_model("enc", meta["enc"], arrays), lc.unpack_model("dec", meta["dec"], arrays),
                   meta["latent_dim"], tuple(meta["image_shape"]), MMWeights(**meta["weights"]), meta["trace"],
                   meta.get("normalize", True))


def _flat(obs: np.ndarray, image_shape) -> tuple[np.ndarray, bool]:
    obs = np.asarray(obs, dtype=np.float32)
    width = int(np.prod(image_shape))
    single = obs.size == width and obs.ndim in (1, len(image_shape))
    if obs.size % width:
        raise lc.ShapeError(f"observation shape {obs.shape} incompatible with {image_shape}")
    x = obs.reshape(1 if single else -1, width) if obs.size else obs.reshape(0, width)
    if x.shape[1] != width:
        raise lc.ShapeError(f"observation shape {obs.shape} incompatible with {image_shape}")
    return x, single


def peak_normalize(x: np.ndarray) -> np.ndarray:
    """Scale each flattened image to unit peak intensity (removes global lighting)."""
    peak = x.max(axis=1, keepdims=True) if x.size else np.ones((len(x), 1), x.dtype)
    return x / np.maximum(peak, 1e-6)


def init_mm(image_shape, latent_dim: int = 16, hidden=(256, 256), seed: int = 0,
            weights: MMWeights = MMWeights(), normalize: bool = True) -> MMParams:
    d = int(np.prod(image_shape))
    enc = lc.init_mlp([d, *hidden, 2 * latent_dim], seed)
    dec = lc.init_mlp([latent_dim, *hidden[::-1], d], seed + 1)
    # start with small posterior variance
    W, b = enc.layers[-1]
    b = b.copy()
    b[latent_dim:] = -4.0
    enc.layers[-1] = (W, b)
    return MMParams(enc, dec, latent_dim, tuple(image_shape), weights, normalize=normalize)


def mm_loss(enc, dec, batch, rng, latent_dim, w: MMWeights, with_grads=True):
    """Loss and gradients for one batch ``(obs_a, obs_b, a)`` of flattened observations."""
    xa, xb, a = batch
    B = len(a)
    x = np.concatenate([xa, xb])
    h, enc_cache = lc.forward(enc, x)
    mean, logvar = h[:, :latent_dim], h[:, latent_dim:]
    logvar = np.clip(logvar, -12.0, 8.0)
    std = np.exp(0.5 * logvar)
    noise = rng.standard_normal(mean.shape).astype(mean.dtype)
    z = mean + std * noise
    xr, dec_cache = lc.forward(dec, z)
    diff = xr - x
    recon = float(np.sum(diff * diff)) / (2 * B)
    kl = lc.kl_standard_normal(mean, logvar)
    d = lc.l1_distance(mean[:B], mean[B:])
    sim_mask = a == 0
    term = np.where(sim_mask, lc.attract(d), lc.hinge_repel(d, w.d_m))
    action = float(np.mean(term))
    loss = recon + w.beta_kl * kl + w.gamma_action * action
    if not with_grads:
        return loss, {"recon": recon, "kl": kl, "action": action}
    dxr = 2.0 * diff / (2 * B)
    dec_grads, dz = lc.backward(dec, dec_cache, dxr.astype(xr.dtype))
    dmean = dz.copy()
    dlogvar = dz * noise * 0.5 * std
    gkm, gkl = lc.kl_standard_normal_grad(mean, logvar)
    dmean += w.beta_kl * gkm
    dlogvar += w.beta_kl * gkl
    gd = np.where(sim_mask, lc.attract_grad(d), lc.hinge_repel_grad(d, w.d_m)) * (w.gamma_action / B)
    sgn = lc.l1_distance_grad(mean[:B], mean[B:]) * gd[:, None]
    dmean[:B] += sgn
    dmean[B:] -= sgn
    raw = h[:, latent_dim:]
    dlogvar = np.where((raw > -12.0) & (raw < 8.0), dlogvar, 0.0)
    enc_grads, _ = lc.backward(enc, enc_cache, np.concatenate([dmean, dlogvar], axis=1).astype(h.dtype))
    return loss, [enc_grads, dec_grads]


def train_mm(ds: Dataset, cfg: lc.TrainConfig, weights: MMWeights = MMWeights(), latent_dim: int = 16,
             hidden=(256, 256), init: MMParams | None = None, normalize: bool = True) -> MMParams:
    """Train from scratch (or from ``init`` when fine-tuning) on every tuple of ``ds``."""
    if len(ds) == 0:
        raise ValueError("empty dataset")
    image_shape = ds.obs_a.shape[1:]
    mm = init or init_mm(image_shape, latent_dim, hidden, cfg.seed, weights, normalize)
    xa = ds.obs_a.reshape(len(ds), -1).astype(np.float32)
    xb = ds.obs_b.reshape(len(ds), -1).astype(np.float32)
    if mm.normalize:
        xa, xb = peak_normalize(xa), peak_normalize(xb)
    L = mm.latent_dim

    def loss_fn(params, batch, rng):
        return mm_loss(params[0], params[1], batch, rng, L, weights)

    (enc, dec), trace = lc.train([mm.encoder, mm.decoder], (xa, xb, ds.a), cfg, loss_fn)
    return MMParams(enc, dec, L, tuple(image_shape), weights, trace, mm.normalize)


def encode(mm: MMParams, obs: np.ndarray) -> np.ndarray:
    """Posterior mean of the latent state (no sampling)."""
    x, single = _flat(obs, mm.image_shape)
    if mm.normalize:
        x = peak_normalize(x)
    h = lc.predict(mm.encoder, x)
    z = h[:, :mm.latent_dim]
    return z[0] if single else z


def decode(mm: MMParams, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float32)
    single = z.ndim == 1
    if z.shape[-1] != mm.latent_dim:
        raise lc.ShapeError(f"latent width {z.shape[-1]} != {mm.latent_dim}")
    x = lc.predict(mm.decoder, z[None] if single else z)
    out = np.clip(x, 0.0, 1.0).reshape((-1, *mm.image_shape))
    return out[0] if single else out


@dataclass(frozen=True)
class LatentStats:
    mu0: float
    sigma0: float


def latent_stats(encoder, ds: Dataset) -> LatentStats:
    """Mean and std of L1 latent distances over the similar pairs of ``ds``."""
    rows = np.flatnonzero(ds.a == 0)
    if len(rows) == 0:
        raise NoSimilarPairs("dataset has no similar pairs")
    d = lc.l1_distance(encoder.encode(ds.obs_a[rows]), encoder.encode(ds.obs_b[rows]))
    return LatentStats(float(np.mean(d)), float(np.std(d)))


def epsilon(stats: LatentStats, w_eps: float) -> float:
    return max(stats.mu0 + w_eps * stats.sigma0, EPS_FLOOR)


W_EPS_GRID = tuple(np.round(np.arange(-0.65, -0.05 + 1e-9, 0.1), 2))
