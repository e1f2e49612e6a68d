"""Warp-error density models and diagnostic costs.

Families over flattened patches d (all log densities in nats):

  BCL2   -lam*||d||_2^2 + (dim/2) log(lam/pi)
  BCL1   -lam*||d||_1   + dim log(lam/2)
  GCL2   -d' (lam A'A + eps I) d + 1/2 logdet((lam A'A + eps I)/pi)
  GCL1   -(lam ||A d||_1 + eps ||d||_1) - log_z        (AIS-normalized)
  CSAD   same form with the 5x5-neighborhood difference matrix
  GMM    dispatched to the gmm module

A stacks within-patch forward differences (GCL1/GCL2) or all ordered
in-neighborhood differences (CSAD); A @ ones == 0 exactly, so the eps
term alone controls the flat direction. The eps regularizer for the L1
families acts as appended identity rows, keeping the stacked transform
injective and the density normalizable.
"""

import json
import math

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from scipy.linalg import cholesky, solve_triangular

from . import gmm as gmm_mod
from .ais import AisConfig, ais_log_z, hmc_sample
from .errors import DimensionMismatchError, FitError, FormatError

BASELINE_FAMILIES = ("BCL2", "BCL1", "GCL2", "GCL1", "CSAD")

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass
class DensityModel:
    """Fitted baseline density model (GMMs live in gmm.GmmModel)."""

    family: str
    dim: int
    lam: float
    epsilon: float = 0.0
    a_matrix: Optional[np.ndarray] = None
    log_z: Optional[float] = None
    log_z_stderr: float = 0.0
    ais_info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.family = self.family.upper()
        if self.family not in BASELINE_FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.lam <= 0:
            raise FitError(f"lambda must be positive, got {self.lam}")
        if self.family in ("GCL2", "GCL1", "CSAD") and self.epsilon <= 0:
            raise FitError(f"{self.family} requires epsilon > 0")
        if self.a_matrix is not None:
            self.a_matrix = np.asarray(self.a_matrix, dtype=np.float64)

    @property
    def name(self):
        return self.family


@dataclass
class EigenSummary:
    """Descending eigen-spectrum with the 95%-variance leading block."""

    eigenvalues: np.ndarray
    leading_count: int
    leading_vectors: np.ndarray  # (leading_count, dim) rows are unit vectors


def grad_transform(patch_size):
    """Within-patch forward-difference matrix, 2*p*(p-1) rows."""
    p = patch_size
    rows = []
    for y in range(p):
        for x in range(p - 1):
            r = np.zeros(p * p)
            r[y * p + x + 1] = 1.0
            r[y * p + x] = -1.0
            rows.append(r)
    for y in range(p - 1):
        for x in range(p):
            r = np.zeros(p * p)
            r[(y + 1) * p + x] = 1.0
            r[y * p + x] = -1.0
            rows.append(r)
    return np.array(rows)


def csad_transform(patch_size, radius=2):
    """All ordered in-patch difference pairs within a (2r+1)^2 neighborhood.

    One row e_q - e_p per ordered pair (p, q) with q != p inside both the
    neighborhood of p and the patch; 1092 rows for 8x8 with radius 2.
    """
    p = patch_size
    rows = []
    for y in range(p):
        for x in range(p):
            for dy in range(-radius, radius + 1):
                for dx in range(-radius, radius + 1):
                    if dy == 0 and dx == 0:
                        continue
                    qy, qx = y + dy, x + dx
                    if 0 <= qy < p and 0 <= qx < p:
                        r = np.zeros(p * p)
                        r[qy * p + qx] = 1.0
                        r[y * p + x] = -1.0
                        rows.append(r)
    return np.array(rows)


def family_transform(family, patch_size):
    family = family.upper()
    if family in ("GCL2", "GCL1"):
        return grad_transform(patch_size)
    if family == "CSAD":
        return csad_transform(patch_size)
    return None


def _as_rows(patches, dim):
    x = np.asarray(patches, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != dim:
        raise DimensionMismatchError(
            f"patch dim {x.shape[1]} does not match model dim {dim}")
    return x, single


def _precision_matrix(model):
    m = model.lam * (model.a_matrix.T @ model.a_matrix)
    m[np.diag_indices_from(m)] += model.epsilon
    return m


def logpdf(model, patches):
    """Log density of one patch (1-d) or a batch (2-d, row per patch)."""
    if getattr(model, "family", None) == "GMM":
        return gmm_mod.gmm_logpdf(model, patches)
    x, single = _as_rows(patches, model.dim)
    fam = model.family
    if fam == "BCL2":
        out = -model.lam * np.einsum("ij,ij->i", x, x) \
            + 0.5 * model.dim * math.log(model.lam / math.pi)
    elif fam == "BCL1":
        out = -model.lam * np.abs(x).sum(axis=1) \
            + model.dim * math.log(model.lam / 2.0)
    elif fam == "GCL2":
        m = _precision_matrix(model)
        ell = cholesky(m, lower=True)
        y = x @ ell
        logdet = 2.0 * np.log(np.diag(ell)).sum()
        out = -np.einsum("ij,ij->i", y, y) \
            + 0.5 * (logdet - model.dim * math.log(math.pi))
    elif fam in ("GCL1", "CSAD"):
        if model.log_z is None:
            raise FitError(f"{fam} model is unnormalized (log_z missing)")
        cost = model.lam * np.abs(x @ model.a_matrix.T).sum(axis=1) \
            + model.epsilon * np.abs(x).sum(axis=1)
        out = -cost - model.log_z
    else:
        raise ValueError(f"unknown family {fam!r}")
    return float(out[0]) if single else out


def _l1_cost_terms(model_or_parts):
    """(A, lam, eps) triple for the L1 families."""
    return model_or_parts.a_matrix, model_or_parts.lam, model_or_parts.epsilon


def _l1_whitening(a_matrix, rho, dim):
    """Whitening map for the unit-lambda target exp(-||Ay||_1 - rho||y||_1).

    With small rho the target is a needle: extent ~1/(rho dim) along
    null(A) against ~1/row-mass across it, and an isotropic AIS base
    misses the null-space tail entirely. The quadratic proxy
    A'A + rho^2 I matches the squared directional decay rates within a
    bounded factor, so in y = W z coordinates, W = proxy^(-1/2), every
    direction has unit-order extent. Returns (W, log det W, rows of the
    transformed stacked norm R with ||R z||_1 = ||A W z||_1 + rho||W z||_1).
    """
    proxy = a_matrix.T @ a_matrix + (rho * rho) * np.eye(dim)
    s, u = np.linalg.eigh(proxy)
    w = (u / np.sqrt(s)) @ u.T
    rows = np.vstack([a_matrix @ w, rho * w])
    return w, -0.5 * float(np.log(s).sum()), rows


def _golden_max(fn, lo, hi, iters=80):
    """Golden-section maximization of a unimodal fn on [lo, hi]."""
    a, b = lo, hi
    x1 = b - GOLDEN * (b - a)
    x2 = a + GOLDEN * (b - a)
    f1, f2 = fn(x1), fn(x2)
    for _ in range(iters):
        if f1 < f2:
            a, x1, f1 = x1, x2, f2
            x2 = a + GOLDEN * (b - a)
            f2 = fn(x2)
        else:
            b, x2, f2 = x2, x1, f1
            x1 = b - GOLDEN * (b - a)
            f1 = fn(x1)
    return 0.5 * (a + b)


def _fit_gcl2(x, a_matrix, dim):
    # LL depends on the data only through per-eigencoordinate second
    # moments; coordinate golden-section on (log lam, log eps) then
    # converges on the jointly concave exact likelihood
    s, u = np.linalg.eigh(a_matrix.T @ a_matrix)
    s = np.maximum(s, 0.0)
    t = np.mean((x @ u) ** 2, axis=0)
    if not t.any():
        raise FitError("degenerate all-zero data: lambda unbounded")

    def mean_ll(lam, eps):
        ev = lam * s + eps
        return -float(np.dot(ev, t)) + 0.5 * float(np.log(ev).sum()) \
            - 0.5 * dim * math.log(math.pi)

    log_lam, log_eps = 0.0, 0.0
    lo, hi = math.log(1e-8), math.log(1e12)
    for _ in range(6):
        log_lam = _golden_max(lambda ll: mean_ll(math.exp(ll),
                                                 math.exp(log_eps)), lo, hi)
        log_eps = _golden_max(lambda le: mean_ll(math.exp(log_lam),
                                                 math.exp(le)), lo, hi)
    lam, eps = math.exp(log_lam), math.exp(log_eps)
    m = lam * (a_matrix.T @ a_matrix) + eps * np.eye(dim)
    sign, logdet = np.linalg.slogdet(m)
    log_z = 0.5 * (dim * math.log(math.pi) - logdet)
    return DensityModel("GCL2", dim, lam, eps, a_matrix, log_z=log_z)


def _stacked_l1_target(rows):
    """Unnormalized log density and gradient of exp(-||R z||_1)."""

    def log_f(z):
        return -np.abs(z @ rows.T).sum(axis=1)

    def grad_f(z):
        return -(np.sign(z @ rows.T) @ rows)

    return log_f, grad_f


def _log_z1(a_matrix, rho, dim, config):
    """AIS estimate of log Z for the unit-lambda target at ratio rho."""
    w, logdet_w, rows = _l1_whitening(a_matrix, rho, dim)
    log_f, grad_f = _stacked_l1_target(rows)
    sigma0 = math.sqrt(2.0) * dim / np.abs(rows).sum()
    est = ais_log_z(log_f, dim, sigma0, config, grad_log_density=grad_f)
    return replace(est, log_z=est.log_z + logdet_w)


def _fit_l1(family, x, a_matrix, dim, seed, ais_config, search_ais_config,
            rho_grid):
    # Scaling identity: log Z(lam, eps) = -dim log lam + log Z(1, eps/lam),
    # so the (lam, eps) grid collapses to a 1-d search over rho = eps/lam
    # with the lam profile in closed form: lam*(rho) = dim/(a + rho b).
    a = float(np.abs(x @ a_matrix.T).sum(axis=1).mean())
    b = float(np.abs(x).sum(axis=1).mean())
    if b == 0.0:
        raise FitError("degenerate all-zero data: lambda unbounded")
    if rho_grid is None:
        rho_grid = np.logspace(-4, 0.5, 8)
    if search_ais_config is None:
        search_ais_config = AisConfig(n_chains=128, n_temps=250, seed=seed)
    if ais_config is None:
        ais_config = AisConfig(seed=seed + 1)

    def profiled_ll(rho, config):
        est = _log_z1(a_matrix, rho, dim, config)
        lam = dim / (a + rho * b)
        return -dim + dim * math.log(lam) - est.log_z, est

    scores = [profiled_ll(r, search_ais_config)[0] for r in rho_grid]
    best = int(np.argmax(scores))
    # local refinement around the best grid point
    lo = rho_grid[max(best - 1, 0)]
    hi = rho_grid[min(best + 1, len(rho_grid) - 1)]
    refined = np.geomspace(lo, hi, 5)[1:-1] if hi > lo else []
    best_rho = rho_grid[best]
    best_score = scores[best]
    for r in refined:
        sc = profiled_ll(r, search_ais_config)[0]
        if sc > best_score:
            best_rho, best_score = r, sc

    final = _log_z1(a_matrix, best_rho, dim, ais_config)
    lam = dim / (a + best_rho * b)
    eps = best_rho * lam
    log_z = -dim * math.log(lam) + final.log_z
    info = {"ess": final.ess, "acceptance": final.acceptance,
            "n_chains": ais_config.n_chains, "n_temps": ais_config.n_temps,
            "warnings": list(final.warnings)}
    return DensityModel(family, dim, lam, eps, a_matrix, log_z=log_z,
                        log_z_stderr=final.stderr, ais_info=info)


def fit(family, train, seed=0, ais_config=None, search_ais_config=None,
        rho_grid=None):
    """Maximum-likelihood fit of a baseline family on a PatchSet.

    BCL2/BCL1 are closed form; GCL2 maximizes the exact likelihood by
    coordinate golden-section search on log-scale (lam, eps); GCL1/CSAD
    maximize the AIS-estimated likelihood over a log-spaced grid of the
    ratio eps/lam (lam profiled out in closed form), storing the final
    AIS log Z and its standard error.
    """
    family = family.upper()
    patches = getattr(train, "patches", train)
    x = np.atleast_2d(np.asarray(patches, dtype=np.float64))
    if x.size == 0:
        raise FitError("cannot fit on an empty patch set")
    dim = x.shape[1]
    patch_size = int(round(math.sqrt(dim)))
    if patch_size * patch_size != dim:
        raise FitError(f"patch dim {dim} is not a square")

    if family == "BCL2":
        ms = float(np.mean(x * x))
        if ms == 0.0:
            raise FitError("degenerate all-zero data: lambda unbounded")
        lam = 1.0 / (2.0 * ms)
        log_z = 0.5 * dim * math.log(math.pi / lam)
        return DensityModel("BCL2", dim, lam, log_z=log_z)
    if family == "BCL1":
        ma = float(np.mean(np.abs(x)))
        if ma == 0.0:
            raise FitError("degenerate all-zero data: lambda unbounded")
        lam = 1.0 / ma
        log_z = dim * math.log(2.0 / lam)
        return DensityModel("BCL1", dim, lam, log_z=log_z)
    if family == "GCL2":
        return _fit_gcl2(x, grad_transform(patch_size), dim)
    if family in ("GCL1", "CSAD"):
        return _fit_l1(family, x, family_transform(family, patch_size), dim,
                       seed, ais_config, search_ais_config, rho_grid)
    raise ValueError(f"unknown family {family!r}")


def sample(model, n, seed=0, burn_in=200):
    """Draw n i.i.d. (or long-run HMC for the L1 transform families)
    patches from a fitted model; deterministic per seed."""
    if getattr(model, "family", None) == "GMM":
        return gmm_mod.gmm_sample(model, n, seed)
    rng = np.random.default_rng(seed)
    fam = model.family
    if fam == "BCL2":
        return rng.normal(0.0, math.sqrt(0.5 / model.lam), (n, model.dim))
    if fam == "BCL1":
        return rng.laplace(0.0, 1.0 / model.lam, (n, model.dim))
    if fam == "GCL2":
        m = _precision_matrix(model)
        ell = cholesky(m, lower=True)
        z = rng.standard_normal((n, model.dim))
        # x = L^-T z / sqrt(2) has covariance (2 M)^-1
        return solve_triangular(ell.T, z.T, lower=False).T / math.sqrt(2.0)
    if fam in ("GCL1", "CSAD"):
        if model.log_z is None:
            raise FitError(f"{fam} model is unnormalized (log_z missing)")
        a, lam, eps = model.a_matrix, model.lam, model.epsilon
        # run HMC on the whitened unit-lambda target, then map back
        # through y = W z / lam (the scaling identity of the density)
        w, _, rows = _l1_whitening(a, eps / lam, model.dim)
        log_f, grad_f = _stacked_l1_target(rows)
        sigma0 = math.sqrt(2.0) * model.dim / np.abs(rows).sum()
        z = hmc_sample(log_f, model.dim, n, seed, sigma_init=sigma0,
                       grad_log_density=grad_f, burn_in=burn_in)
        return (z @ w.T) / lam
    raise ValueError(f"unknown family {fam!r}")


def _soft_threshold(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def _l1_prox_admm(model, noisy, noise_var, iters=10):
    """Proximal map of the transformed-L1 families by scaled ADMM.

    Minimizes ||B x||_1 + ||x - y||^2 / (2 noise_var) per patch with
    B = [lam*A; eps*I]; fixed iteration count keeps it deterministic.
    """
    a, lam, eps = model.a_matrix, model.lam, model.epsilon
    dim = model.dim
    rho = 1.0 / noise_var
    b_mat = np.concatenate([lam * a, eps * np.eye(dim)])  # (rows+dim, dim)
    h = (1.0 / noise_var) * np.eye(dim) + rho * (b_mat.T @ b_mat)
    ell = cholesky(h, lower=True)

    y = noisy
    x = y.copy()
    bx = x @ b_mat.T
    z = bx.copy()
    u = np.zeros_like(z)
    for _ in range(iters):
        rhs = y / noise_var + rho * ((z - u) @ b_mat)
        x = solve_triangular(
            ell.T, solve_triangular(ell, rhs.T, lower=True), lower=False).T
        bx = x @ b_mat.T
        z = _soft_threshold(bx + u, 1.0 / rho)
        u = u + bx - z
    return x


def map_denoise(model, noisy, noise_var):
    """Per-patch MAP denoising under any fitted model.

    GMM dispatches to the mixture Wiener rule; BCL2/GCL2 use their
    closed-form quadratic solutions; BCL1 soft-thresholds; GCL1/CSAD run
    their ADMM proximal map. Accepts a single patch or a batch.
    """
    if getattr(model, "family", None) == "GMM":
        return gmm_mod.gmm_map_denoise_patch(model, noisy, noise_var)
    if noise_var <= 0:
        raise ValueError("noise_var must be positive")
    y, single = _as_rows(noisy, model.dim)
    fam = model.family
    if fam == "BCL2":
        out = y / (1.0 + 2.0 * model.lam * noise_var)
    elif fam == "BCL1":
        out = _soft_threshold(y, model.lam * noise_var)
    elif fam == "GCL2":
        # minimizer of x'Mx + ||x-y||^2/(2v): (I + 2v M) x = y
        m = 2.0 * noise_var * _precision_matrix(model)
        m[np.diag_indices_from(m)] += 1.0
        ell = cholesky(m, lower=True)
        out = solve_triangular(
            ell.T, solve_triangular(ell, y.T, lower=True), lower=False).T
    elif fam in ("GCL1", "CSAD"):
        out = _l1_prox_admm(model, y, noise_var)
    else:
        raise ValueError(f"unknown family {fam!r}")
    return out[0] if single else out


def census_cost(p1, p2):
    """Census cost of one neighborhood pair: the number of non-center
    pixels whose sign relative to the center differs between the two
    neighborhoods (sign(0) counts as its own class)."""
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    if p1.shape != p2.shape or p1.ndim != 2:
        raise DimensionMismatchError(
            f"neighborhoods must be equal-shaped 2-d, got {p1.shape} "
            f"and {p2.shape}")
    if p1.shape[0] % 2 == 0 or p1.shape[1] % 2 == 0:
        raise DimensionMismatchError(
            "neighborhood dimensions must be odd so the center is defined")
    cy, cx = p1.shape[0] // 2, p1.shape[1] // 2
    s1 = np.sign(p1 - p1[cy, cx])
    s2 = np.sign(p2 - p2[cy, cx])
    diff = s1 != s2
    diff[cy, cx] = False
    return int(diff.sum())


def csad_cost(p1, p2, radius=2):
    """Centralized SAD between two patches.

    Sum over all ordered pixel pairs (p, q), q within the
    (2*radius+1)^2 neighborhood of p clipped to the patch, of
    |(p1(q) - p1(p)) - (p2(q) - p2(p))|; invariant to adding a constant
    to either patch.
    """
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    if p1.shape != p2.shape or p1.ndim != 2:
        raise DimensionMismatchError(
            f"patches must be equal-shaped 2-d, got {p1.shape} and {p2.shape}")
    d = p1 - p2
    h, w = d.shape
    total = 0.0
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dy == 0 and dx == 0:
                continue
            ys = slice(max(0, -dy), min(h, h - dy))
            xs = slice(max(0, -dx), min(w, w - dx))
            qys = slice(max(0, dy), min(h, h + dy))
            qxs = slice(max(0, dx), min(w, w + dx))
            total += float(np.abs(d[qys, qxs] - d[ys, xs]).sum())
    return total


def eigen_summary(covariance, threshold=0.95):
    """Descending eigendecomposition with the smallest leading block
    whose cumulative eigenvalue fraction reaches `threshold`."""
    cov = np.asarray(covariance, dtype=np.float64)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise DimensionMismatchError(f"covariance must be square, got {cov.shape}")
    if not np.allclose(cov, cov.T, atol=1e-10):
        raise ValueError("covariance must be symmetric")
    vals, vecs = np.linalg.eigh(cov)
    vals = np.maximum(vals[::-1], 0.0)
    vecs = vecs[:, ::-1]
    total = float(vals.sum())
    if total == 0.0:
        return EigenSummary(vals, 0, vecs.T[:0])
    cum = np.cumsum(vals)
    k = int(np.searchsorted(cum, threshold * total - 1e-12 * total)) + 1
    return EigenSummary(vals, k, vecs[:, :k].T.copy())


def save_model(model, path):
    """Serialize a model to JSON (GMMs use the gmm module schema)."""
    if getattr(model, "family", None) == "GMM":
        gmm_mod.save_gmm(model, path)
        return
    doc = {
        "family": model.family,
        "dim": model.dim,
        "lambda": model.lam,
        "epsilon": model.epsilon,
        "log_z": model.log_z,
        "log_z_stderr": model.log_z_stderr,
        "a_matrix": None if model.a_matrix is None else model.a_matrix.tolist(),
    }
    if model.ais_info:
        doc["ais"] = model.ais_info
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_model(path):
    """Load a model saved by save_model or gmm.save_gmm."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: unreadable model file ({exc})") from exc
    family = doc.get("family")
    if family == "GMM":
        return gmm_mod.load_gmm(path)
    if family not in BASELINE_FAMILIES:
        raise FormatError(f"{path}: unknown model family {family!r}")
    return DensityModel(
        family, int(doc["dim"]), float(doc["lambda"]),
        float(doc.get("epsilon") or 0.0),
        None if doc.get("a_matrix") is None else np.array(doc["a_matrix"]),
        log_z=doc.get("log_z"),
        log_z_stderr=float(doc.get("log_z_stderr") or 0.0),
        ais_info=doc.get("ais", {}))
