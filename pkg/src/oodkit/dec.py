"""Dataset entropy-mutual calibration: an SVD compressor profile, the
piecewise complexity credit C(x), and the rescaled calibration score.

The compressor is simulated by truncated SVD per channel; the error metric
is fixed to mean absolute error per pixel per channel.  A sample needing
more singular values than the in-distribution operating point is penalized
by the descending branch of the credit.
"""

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import DataError, DependencyError

ERROR_METRIC = "mean_absolute_error"


@dataclass(frozen=True)
class CompressorProfile:
    """Calibrated SVD-compressor state for one image shape."""

    n_id_max: int
    n_id: int
    epsilon: float
    tau: float
    channels: int
    height: int
    width: int

    def __post_init__(self):
        if not 1 <= self.n_id <= self.n_id_max <= min(self.height, self.width):
            raise DataError(
                f"need 1 <= n_id ({self.n_id}) <= n_id_max ({self.n_id_max})"
                f" <= min(H, W) ({min(self.height, self.width)})"
            )
        if self.epsilon < 0:
            raise DataError("epsilon must be nonnegative")


@dataclass(frozen=True)
class DecScale:
    """Nats-per-unit-complexity rescaling, from the id_train averages."""

    scale: float
    mean_php_id: float
    mean_c_id: float


def _as_channels(img):
    img = np.asarray(img, dtype=float)
    if img.ndim == 2:
        img = img[None, :, :]
    if img.ndim != 3:
        raise DataError(f"expected a CxHxW or HxW image, got shape {img.shape}")
    return img


def _check_shape(img, profile):
    c, h, w = img.shape
    if (c, h, w) != (profile.channels, profile.height, profile.width):
        raise DataError(
            f"image shape {(c, h, w)} does not match calibrated shape "
            f"{(profile.channels, profile.height, profile.width)}"
        )


def svd_recon_error(img, n):
    """Mean |x_hat - x| of the rank-n truncated-SVD reconstruction,
    averaged over pixels and channels."""
    img = _as_channels(img)
    _, h, w = img.shape
    if not 1 <= n <= min(h, w):
        raise DataError(f"n must be in [1, {min(h, w)}], got {n}")
    return _error_at(_svd_factors(img), n)


def _svd_factors(img):
    factors = []
    for chan in img:
        u, s, vt = np.linalg.svd(chan, full_matrices=False)
        factors.append((chan, u, s, vt))
    return factors


def _error_at(factors, n):
    """Rank-n error from precomputed factors.  Both search strategies use
    this one routine so their n_i agree exactly."""
    total = 0.0
    for chan, u, s, vt in factors:
        recon = (u[:, :n] * s[:n]) @ vt[:n]
        total += float(np.mean(np.abs(recon - chan)))
    return total / len(factors)


def error_curve(img):
    """Reconstruction error for every rank 1..min(H, W) (hot kernel)."""
    img = _as_channels(img)
    curves = []
    for chan, u, s, vt in _svd_factors(img):
        curves.append(_kernels.svd_error_curve(chan, u, s, vt))
    return np.mean(curves, axis=0)


def calibrate_profile(id_images, tau=1e-4, max_images=512, seed=0,
                      n_id_override=None):
    """Calibrate the compressor on ID images.

    The mean error curve e(n) is computed over a seeded subsample of at
    most ``max_images`` images; n_id_max is the smallest n after which
    every |e(n) - e(n+1)| stays below ``tau`` (falling back to min(H, W)),
    n_id defaults to half of that, and epsilon is the dataset-mean error
    at n_id.
    """
    if not id_images:
        raise DataError("need at least one calibration image")
    imgs = [_as_channels(im) for im in id_images]
    shape = imgs[0].shape
    for im in imgs[1:]:
        if im.shape != shape:
            raise DataError(
                f"inconsistent image shapes: {im.shape} vs {shape}"
            )
    if len(imgs) > max_images:
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(len(imgs), size=max_images, replace=False))
        imgs = [imgs[i] for i in keep]

    curve = np.mean([error_curve(im) for im in imgs], axis=0)
    n_max = len(curve)  # = min(H, W)

    diffs_small = np.abs(np.diff(curve)) < tau
    n_id_max = n_max  # fallback: the curve never settles
    for n in range(1, n_max + 1):
        if diffs_small[n - 1:].all():
            n_id_max = n
            break

    n_id = max(1, n_id_max // 2) if n_id_override is None else n_id_override
    c, h, w = shape
    return CompressorProfile(
        n_id_max=n_id_max,
        n_id=n_id,
        epsilon=float(curve[n_id - 1]),
        tau=tau,
        channels=c,
        height=h,
        width=w,
    )


def find_rank(img, profile, use_binary_search=True):
    """Smallest n_i in [1, n_id_max] whose error is <= profile.epsilon;
    n_id_max when no rank achieves it.

    Binary search assumes the error is non-increasing in n; a local guard
    re-runs the linear scan when that assumption is visibly violated.
    """
    img = _as_channels(img)
    _check_shape(img, profile)
    factors = _svd_factors(img)
    eps = profile.epsilon
    n_max = profile.n_id_max

    def err(n):
        return _error_at(factors, n)

    if not use_binary_search:
        return _linear_scan(err, eps, n_max)

    if err(n_max) > eps:
        return n_max
    lo, hi = 1, n_max
    while lo < hi:
        mid = (lo + hi) // 2
        if err(mid) <= eps:
            hi = mid
        else:
            lo = mid + 1
    if lo > 1 and err(lo - 1) <= eps:  # monotonicity violated
        return _linear_scan(err, eps, n_max)
    return lo


def _linear_scan(err, eps, n_max):
    for n in range(1, n_max + 1):
        if err(n) <= eps:
            return n
    return n_max


def piecewise_credit(value, reference):
    """Ascending credit below the ID operating point, descending above it."""
    if value < reference:
        return value / reference
    return (reference - (value - reference)) / reference


def complexity(img, profile, use_binary_search=True):
    """Complexity credit C(x) from the SVD compressor (always <= 1)."""
    n_i = find_rank(img, profile, use_binary_search=use_binary_search)
    return piecewise_credit(n_i, profile.n_id)


def bits_complexity(bits, bits_id):
    """Complexity credit from an external compressor's bit count."""
    if bits_id <= 0:
        raise DataError("bits_id must be positive")
    if bits < 0:
        raise DataError("bits must be nonnegative")
    return piecewise_credit(bits, bits_id)


def dec_scale(php_scores_id_train, c_id_train):
    """scale = E_id[-PHP] / E_id[C] over the training split."""
    php_scores = np.asarray(php_scores_id_train, dtype=float)
    c_values = np.asarray(c_id_train, dtype=float)
    if php_scores.size == 0 or c_values.size == 0:
        raise DataError("need non-empty id_train score and complexity lists")
    mean_php = float(np.mean(php_scores))
    mean_c = float(np.mean(c_values))
    if mean_c <= 0:
        raise DataError(f"mean id_train complexity must be positive, got {mean_c}")
    if mean_php > 0:
        warnings.warn(
            f"mean id_train PHP is positive ({mean_php:.6g}); the resulting "
            "scale is negative and is passed through unclamped",
            stacklevel=2,
        )
    return DecScale(scale=-mean_php / mean_c, mean_php_id=mean_php,
                    mean_c_id=mean_c)


def dec_score(rec, c, scale):
    """Calibrated likelihood: (recon_loglik - kl_prior) + C(x) * scale."""
    return (rec.recon_loglik - rec.kl_prior) + c * scale.scale


# --- artifact serialization -------------------------------------------------


def save_dec_artifacts(path, profile=None, scale=None, bits_id=None):
    lines = []
    if profile is not None:
        lines.append(json.dumps({
            "kind": "compressor_profile",
            "n_id_max": profile.n_id_max,
            "n_id": profile.n_id,
            "epsilon": profile.epsilon,
            "tau": profile.tau,
            "channels": profile.channels,
            "height": profile.height,
            "width": profile.width,
            "error_metric": ERROR_METRIC,
        }))
    if scale is not None:
        lines.append(json.dumps({
            "kind": "dec_scale",
            "scale": scale.scale,
            "mean_php_id": scale.mean_php_id,
            "mean_c_id": scale.mean_c_id,
        }))
    if bits_id is not None:
        lines.append(json.dumps({"kind": "bits_id", "value": float(bits_id)}))
    if not lines:
        raise DataError("nothing to save")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dec_artifacts(path):
    """Returns (profile | None, scale | None, bits_id | None)."""
    profile = scale = bits_id = None
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        if not raw.strip():
            continue
        obj = json.loads(raw)
        kind = obj.get("kind")
        if kind == "compressor_profile":
            profile = CompressorProfile(
                n_id_max=obj["n_id_max"], n_id=obj["n_id"],
                epsilon=obj["epsilon"], tau=obj["tau"],
                channels=obj["channels"], height=obj["height"],
                width=obj["width"],
            )
        elif kind == "dec_scale":
            scale = DecScale(scale=obj["scale"], mean_php_id=obj["mean_php_id"],
                             mean_c_id=obj["mean_c_id"])
        elif kind == "bits_id":
            bits_id = obj["value"]
        else:
            raise DependencyError(f"{path}: unknown artifact kind {kind!r}")
    return profile, scale, bits_id
