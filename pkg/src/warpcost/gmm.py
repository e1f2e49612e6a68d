"""Zero-mean full-covariance Gaussian mixtures over warp-error patches.

Training is stepwise EM on mini-batches: sufficient statistics are
blended with step size t^-0.7 across batches; a mini-batch covering the
whole dataset degenerates to exact EM (step size 1), which is the mode
with the monotone-likelihood guarantee. Covariances are floored by
eigenvalue clipping and weights are floored and renormalized after
every update.
"""

import json
import math

from dataclasses import dataclass, field

import numpy as np

from scipy.linalg import cho_factor, cho_solve, cholesky, solve_triangular

from .errors import DimensionMismatchError, FitError, FormatError

STEP_DECAY = 0.7


@dataclass
class GmmConfig:
    minibatch_size: int = 10000
    epochs: int = 20
    seed: int = 0
    cov_floor: float = 1e-6
    weight_floor: float = None  # None: 1e-6 / k

    def resolved_weight_floor(self, k):
        return self.weight_floor if self.weight_floor is not None else 1e-6 / k


@dataclass
class GmmModel:
    """k zero-mean Gaussians with full covariances and mixing weights."""

    weights: np.ndarray
    covariances: np.ndarray  # (k, dim, dim)
    family: str = "GMM"
    _chols: np.ndarray = field(default=None, repr=False)
    _log_dets: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.covariances = np.asarray(self.covariances, dtype=np.float64)
        if self.covariances.ndim != 3 or \
                self.covariances.shape[1] != self.covariances.shape[2]:
            raise DimensionMismatchError(
                f"covariances must be (k, dim, dim), got {self.covariances.shape}")
        if self.weights.shape != (self.covariances.shape[0],):
            raise DimensionMismatchError("one weight per component required")
        if abs(float(self.weights.sum()) - 1.0) > 1e-9 or (self.weights <= 0).any():
            raise FitError("weights must be positive and sum to 1")
        self._refresh_cache()

    def _refresh_cache(self):
        k, dim = self.k, self.dim
        self._chols = np.empty((k, dim, dim))
        self._log_dets = np.empty(k)
        for j in range(k):
            self._chols[j] = cholesky(self.covariances[j], lower=True)
            self._log_dets[j] = 2.0 * np.log(np.diag(self._chols[j])).sum()

    @property
    def k(self):
        return self.weights.shape[0]

    @property
    def dim(self):
        return self.covariances.shape[1]

    @property
    def name(self):
        return f"GMM{self.k}"


def _as_rows(patches, dim):
    x = np.asarray(patches, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != dim:
        raise DimensionMismatchError(
            f"patch dim {x.shape[1]} does not match model dim {dim}")
    return x, single


def _component_logpdfs(model, x):
    """(N, k) per-component Gaussian log densities at zero mean."""
    n = x.shape[0]
    out = np.empty((n, model.k))
    c = -0.5 * model.dim * math.log(2.0 * math.pi)
    for j in range(model.k):
        y = solve_triangular(model._chols[j], x.T, lower=True)
        out[:, j] = c - 0.5 * model._log_dets[j] \
            - 0.5 * np.einsum("ij,ij->j", y, y)
    return out


def _logsumexp(a, axis=-1):
    m = np.max(a, axis=axis, keepdims=True)
    return (m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))) \
        .squeeze(axis)


def gmm_logpdf(model, patches):
    """Mixture log density of a patch or batch via log-sum-exp."""
    x, single = _as_rows(patches, model.dim)
    lp = _component_logpdfs(model, x) + np.log(model.weights)
    out = _logsumexp(lp, axis=1)
    return float(out[0]) if single else out


def _kmeanspp_centers(x, k, rng):
    """Seeded k-means++ center selection; requires k distinct samples."""
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            raise FitError(
                f"k={k} exceeds the number of distinct samples")
        centers[j] = x[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(axis=1))
    return centers


def _floor_covariance(cov, cov_floor):
    """Symmetrize and clip eigenvalues from below."""
    cov = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(cov)
    if vals[0] >= cov_floor:
        return cov
    vals = np.maximum(vals, cov_floor)
    return (vecs * vals) @ vecs.T


def gmm_fit(train, k, config=None):
    """Fit a k-component zero-mean GMM; returns (model, ll_trace).

    Initialization groups patches by nearest k-means++ center and uses
    per-group zero-mean scatter matrices. The trace holds the full-dataset
    mean log-likelihood at initialization and after each epoch.
    """
    if config is None:
        config = GmmConfig()
    patches = getattr(train, "patches", train)
    x = np.atleast_2d(np.asarray(patches, dtype=np.float64))
    n, dim = x.shape
    if n < 10 * k:
        raise FitError(f"need at least {10 * k} samples to fit k={k}, got {n}")
    rng = np.random.default_rng(config.seed)
    wfloor = config.resolved_weight_floor(k)

    centers = _kmeanspp_centers(x, k, rng)
    # single nearest-center assignment (no Lloyd iterations); expanded
    # quadratic keeps this one GEMM instead of an (n, k, dim) broadcast
    d2 = (x * x).sum(axis=1)[:, None] - 2.0 * (x @ centers.T) \
        + (centers * centers).sum(axis=1)[None, :]
    assign = d2.argmin(axis=1)

    weights = np.empty(k)
    covs = np.empty((k, dim, dim))
    global_scatter = (x.T @ x) / n
    for j in range(k):
        members = x[assign == j]
        weights[j] = max(len(members), 1) / n
        scatter = global_scatter if len(members) == 0 \
            else (members.T @ members) / len(members)
        covs[j] = _floor_covariance(scatter + config.cov_floor * np.eye(dim),
                                    config.cov_floor)
    weights = np.maximum(weights / weights.sum(), wfloor)
    weights /= weights.sum()
    model = GmmModel(weights, covs)

    trace = [float(np.mean(gmm_logpdf(model, x)))]
    # running sufficient statistics (per-sample normalized)
    stat_w = model.weights.copy()
    stat_s = model.covariances * model.weights[:, None, None]
    batch = min(config.minibatch_size, n)
    t = 0
    for _ in range(config.epochs):
        order = rng.permutation(n) if batch < n else np.arange(n)
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            xb = x[idx]
            t += 1
            # a batch covering the dataset is exact EM (step size 1)
            eta = 1.0 if batch >= n else t ** -STEP_DECAY
            lp = _component_logpdfs(model, xb) + np.log(model.weights)
            lse = _logsumexp(lp, axis=1)
            resp = np.exp(lp - lse[:, None])
            bw = resp.sum(axis=0) / len(xb)
            bs = np.empty((k, dim, dim))
            for j in range(k):
                bs[j] = (xb * resp[:, j:j + 1]).T @ xb / len(xb)
            if not (np.isfinite(bw).all() and np.isfinite(bs).all()):
                raise FitError("non-finite EM statistics; aborting")
            stat_w = (1.0 - eta) * stat_w + eta * bw
            stat_s = (1.0 - eta) * stat_s + eta * bs
            weights = np.maximum(stat_w / stat_w.sum(), wfloor)
            weights /= weights.sum()
            covs = np.empty_like(stat_s)
            for j in range(k):
                covs[j] = _floor_covariance(stat_s[j] / stat_w[j],
                                            config.cov_floor)
            model = GmmModel(weights, covs)
        trace.append(float(np.mean(gmm_logpdf(model, x))))
    return model, np.array(trace)


def gmm_sample(model, n, seed=0):
    """n mixture draws: component by weight, then Cholesky transform."""
    rng = np.random.default_rng(seed)
    comp = rng.choice(model.k, size=n, p=model.weights)
    z = rng.standard_normal((n, model.dim))
    out = np.empty((n, model.dim))
    for j in range(model.k):
        mask = comp == j
        if mask.any():
            out[mask] = z[mask] @ model._chols[j].T
    return out


def gmm_map_denoise_patch(model, noisy, noise_var):
    """Approximate MAP denoising of patches under the mixture prior.

    Selects the component maximizing the posterior responsibility of the
    noisy patch under N(0, Sigma_j + noise_var I) and returns its Wiener
    estimate Sigma_j (Sigma_j + noise_var I)^-1 y. Accepts a single patch
    or a batch.
    """
    if noise_var <= 0:
        raise ValueError("noise_var must be positive")
    y, single = _as_rows(noisy, model.dim)
    n, dim = y.shape
    k = model.k
    eye = noise_var * np.eye(dim)
    lp = np.empty((n, k))
    c = -0.5 * dim * math.log(2.0 * math.pi)
    factors = []
    for j in range(k):
        noisy_cov = model.covariances[j] + eye
        ell = cholesky(noisy_cov, lower=True)
        factors.append(ell)
        z = solve_triangular(ell, y.T, lower=True)
        lp[:, j] = c - np.log(np.diag(ell)).sum() \
            - 0.5 * np.einsum("ij,ij->j", z, z) + math.log(model.weights[j])
    pick = lp.argmax(axis=1)
    out = np.empty_like(y)
    for j in np.unique(pick):
        mask = pick == j
        # Wiener estimate: Sigma (Sigma + v I)^-1 y
        rhs = cho_solve((factors[j], True), y[mask].T)
        out[mask] = (model.covariances[j] @ rhs).T
    return out[0] if single else out


def save_gmm(model, path):
    doc = {"family": "GMM", "k": model.k, "dim": model.dim,
           "weights": model.weights.tolist(),
           "covariances": model.covariances.tolist()}
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_gmm(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: unreadable model file ({exc})") from exc
    if doc.get("family") != "GMM":
        raise FormatError(f"{path}: not a GMM model file")
    try:
        model = GmmModel(np.array(doc["weights"]),
                         np.array(doc["covariances"]))
    except (KeyError, ValueError, DimensionMismatchError) as exc:
        raise FormatError(f"{path}: invalid mixture payload ({exc})") from exc
    if model.k != doc.get("k") or model.dim != doc.get("dim"):
        raise FormatError(f"{path}: header fields disagree with payload")
    return model
