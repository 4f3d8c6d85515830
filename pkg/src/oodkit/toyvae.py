"""A minimal nonlinear VAE for 2-D data with manual gradients.

Encoder and decoder are 3-layer MLPs (hidden width 10, LeakyReLU 0.01);
the encoder emits a diagonal-Gaussian posterior, the decoder a diagonal
Gaussian over the 2-D observation.  Training is Adam ascent on the
single-draw ELBO with hand-derived backpropagation; the fused
forward/backward batch step lives in ``_kernels`` (numba-accelerated with
a numpy fallback).
"""

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import TrainingDivergedError
from .php import record_seed
from .records import Dataset, SampleRecord, valid_split

LOGVAR_CLAMP = 10.0
HIDDEN = 10
_LOG2PI = float(np.log(2.0 * np.pi))

_PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3",
                "v1", "c1", "v2", "c2", "v3", "c3")


@dataclass
class ToyVaeParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    v1: np.ndarray
    c1: np.ndarray
    v2: np.ndarray
    c2: np.ndarray
    v3: np.ndarray
    c3: np.ndarray

    @property
    def d_z(self):
        return self.w3.shape[1] // 2

    @property
    def data_dim(self):
        return self.w1.shape[0]

    def arrays(self):
        return [getattr(self, name) for name in _PARAM_NAMES]

    def copy(self):
        return ToyVaeParams(*[a.copy() for a in self.arrays()])

    def all_finite(self):
        return all(np.all(np.isfinite(a)) for a in self.arrays())


def init_params(seed, d_z=2, data_dim=2, hidden=HIDDEN):
    """Weights ~ uniform(+-1/sqrt(fan_in)), biases zero, seeded."""
    rng = np.random.default_rng(seed)

    def layer(fan_in, fan_out):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        return w, np.zeros(fan_out)

    w1, b1 = layer(data_dim, hidden)
    w2, b2 = layer(hidden, hidden)
    w3, b3 = layer(hidden, 2 * d_z)
    v1, c1 = layer(d_z, hidden)
    v2, c2 = layer(hidden, hidden)
    v3, c3 = layer(hidden, 2 * data_dim)
    return ToyVaeParams(w1, b1, w2, b2, w3, b3, v1, c1, v2, c2, v3, c3)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int
    seed: int
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")


@dataclass(frozen=True)
class ForwardResult:
    elbo: float
    recon_loglik: float
    kl_prior: float
    mu: np.ndarray
    logvar: np.ndarray
    z: np.ndarray


def _lrelu(a):
    return np.where(a > 0.0, a, 0.01 * a)


def elbo_forward_eps(params, x, eps):
    """Single-sample ELBO with frozen reparameterization noise."""
    x = np.asarray(x, dtype=float)
    d_z = params.d_z
    h1 = _lrelu(x @ params.w1 + params.b1)
    h2 = _lrelu(h1 @ params.w2 + params.b2)
    enc = h2 @ params.w3 + params.b3
    mu = enc[:d_z]
    logvar = np.clip(enc[d_z:], -LOGVAR_CLAMP, LOGVAR_CLAMP)
    z = mu + np.exp(0.5 * logvar) * eps

    g1 = _lrelu(z @ params.v1 + params.c1)
    g2 = _lrelu(g1 @ params.v2 + params.c2)
    dec = g2 @ params.v3 + params.c3
    mx = dec[:len(x)]
    sx = np.clip(dec[len(x):], -LOGVAR_CLAMP, LOGVAR_CLAMP)

    diff = x - mx
    recon = float(-0.5 * np.sum(_LOG2PI + sx + diff * diff * np.exp(-sx)))
    kl = float(0.5 * np.sum(mu * mu + np.exp(logvar) - 1.0 - logvar))
    return ForwardResult(
        elbo=recon - kl, recon_loglik=recon, kl_prior=kl,
        mu=mu.copy(), logvar=logvar.copy(), z=z,
    )


def elbo_forward(params, x, seed):
    """Single-sample ELBO with one seeded reparameterized draw."""
    eps = np.random.default_rng(seed).standard_normal(params.d_z)
    return elbo_forward_eps(params, x, eps)


def batch_grads(params, x, eps):
    """Gradients of the batch-mean ELBO (selected kernel path).

    Returns (grads in parameter order, mean elbo, mean recon, mean kl).
    """
    out = _kernels.toyvae_batch_grads(
        np.ascontiguousarray(x, dtype=float),
        np.ascontiguousarray(eps, dtype=float),
        *params.arrays(), LOGVAR_CLAMP,
    )
    return list(out[:12]), float(out[12]), float(out[13]), float(out[14])


def train(params, data, cfg):
    """Adam ascent on the mean ELBO; deterministic given cfg.seed.

    Returns (trained params, per-epoch mean-ELBO trace).  A non-finite
    loss aborts with the failing step index.
    """
    data = np.asarray(data, dtype=float)
    n = data.shape[0]
    if n < cfg.batch_size:
        raise ValueError(f"need at least batch_size={cfg.batch_size} points")
    params = params.copy()
    rng = np.random.default_rng(cfg.seed)
    arrays = params.arrays()
    m_state = [np.zeros_like(a) for a in arrays]
    v_state = [np.zeros_like(a) for a in arrays]
    t = 0
    step = 0
    trace = []
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        epoch_elbos = []
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            batch = data[idx]
            eps = rng.standard_normal((len(idx), params.d_z))
            grads, elbo, _, _ = batch_grads(params, batch, eps)
            if not np.isfinite(elbo):
                raise TrainingDivergedError(step)
            t += 1
            correct1 = 1.0 - cfg.beta1 ** t
            correct2 = 1.0 - cfg.beta2 ** t
            for a, g, m, v in zip(arrays, grads, m_state, v_state):
                m *= cfg.beta1
                m += (1.0 - cfg.beta1) * g
                v *= cfg.beta2
                v += (1.0 - cfg.beta2) * g * g
                a += cfg.lr * (m / correct1) / (np.sqrt(v / correct2) + cfg.adam_eps)
            epoch_elbos.append(elbo)
            step += 1
        trace.append(float(np.mean(epoch_elbos)))
    return params, trace


def grad_check(params, x, eps=1e-5, seed=0):
    """Max relative error of the analytic gradients against central
    finite differences, with the reparameterization noise frozen."""
    x = np.asarray(x, dtype=float)
    noise = np.random.default_rng(seed).standard_normal(params.d_z)
    grads, _, _, _ = batch_grads(params, x[None, :], noise[None, :])

    worst = 0.0
    perturbed = params.copy()
    for arr, grad in zip(perturbed.arrays(), grads):
        flat = arr.ravel()
        gflat = np.asarray(grad).ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = elbo_forward_eps(perturbed, x, noise).elbo
            flat[i] = orig - eps
            lo = elbo_forward_eps(perturbed, x, noise).elbo
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            denom = max(abs(gflat[i]) + abs(numeric), 1e-3)
            worst = max(worst, abs(gflat[i] - numeric) / denom)
    return worst


def encode_dataset(params, data, splits, seed):
    """One record per point, with per-sample seeded draws.

    ``splits`` assigns each row its split label.  Pixel tensors are not
    attached: complexity terms for the 2-D toy enter through synthetic
    image fixtures instead.
    """
    data = np.asarray(data, dtype=float)
    if len(splits) != len(data):
        raise ValueError("splits must label every row")
    records = []
    for i, (x, split) in enumerate(zip(data, splits)):
        if not valid_split(split):
            raise ValueError(f"bad split label {split!r}")
        sid = f"s{i:06d}"
        fwd = elbo_forward(params, x, record_seed(seed, sid))
        records.append(SampleRecord(
            sample_id=sid,
            split=split,
            recon_loglik=fwd.recon_loglik,
            kl_prior=fwd.kl_prior,
            mu=fwd.mu,
            logvar=fwd.logvar,
        ))
    return Dataset(records=tuple(records), latent_dim=params.d_z)


def save_params(params, path):
    lines = [json.dumps({
        "kind": "toy_vae_params",
        "d_z": params.d_z,
        "data_dim": params.data_dim,
        "hidden": params.w1.shape[1],
    })]
    for name, arr in zip(_PARAM_NAMES, params.arrays()):
        lines.append(json.dumps({
            "kind": "array", "name": name,
            "shape": list(arr.shape),
            "values": [float(v) for v in arr.ravel()],
        }))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_params(path):
    raw = [json.loads(l) for l in Path(path).read_text(encoding="utf-8").splitlines()
           if l.strip()]
    if not raw or raw[0].get("kind") != "toy_vae_params":
        raise ValueError(f"{path}: not a toy VAE params file")
    arrays = {}
    for obj in raw[1:]:
        arrays[obj["name"]] = np.array(obj["values"]).reshape(obj["shape"])
    return ToyVaeParams(*[arrays[name] for name in _PARAM_NAMES])
