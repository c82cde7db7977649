"""Closed-form Student-t posterior over linear model coefficients.

For a voxel with log-signal ``y``, design ``A``, diagonal weights ``W`` and
Tikhonov matrix ``L``::

    H      = A^T W A + L
    mu     = H^-1 A^T W y
    nu     = tr(I - A M),           M = H^-1 A^T W
    sigma2 = |y - A mu|^2 / nu
    R      = (nu - 2) / nu * sigma2 * H^-1

and ``c | y ~ t_nu(mu, R)``.  ``R`` is the shape matrix of the t law, so the
coefficient covariance is ``nu / (nu - 2) R = sigma2 H^-1``.  With ``W = I``
and ``L = 0`` the smoother ``A M`` is the hat matrix and ``nu = n - d``.
"""

import json
import logging
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from . import __version__
from ._parallel import map_chunks
from ._rng import DOMAIN_POSTERIOR, GAMMA_COUNTERS, chi2_variates, stream_keys, uniforms
from .dti import COLUMN_LABELS, build_design_matrix, property_function, wls_weights
from .errors import ContractError, DatasetValidationError, RankDeficientError
from .io import NiftiVolume, read_nifti, validate_dataset, write_nifti

logger = logging.getLogger(__name__)

COND_LIMIT = 1e12
EPS64 = np.finfo(np.float64).eps

REASON_OK = 0
REASON_NU_LE_2 = 1
REASON_SINGULAR = 2
REASON_DEGENERATE = 3
REASONS = {REASON_OK: "ok", REASON_NU_LE_2: "nu_le_2", REASON_SINGULAR: "singular",
           REASON_DEGENERATE: "degenerate_signal"}

SEED_POLICY = ("splitmix64 counter streams keyed by (seed, C-order linear voxel index); "
               "draw j of a voxel uses counters j*(d+9) .. j*(d+9)+d+8: d normals, "
               "then a Marsaglia-Tsang chi-squared block")


@dataclass(frozen=True)
class RegularizerSpec:
    """Ridge penalty ``Lambda = lam * diag(column_scale)``."""

    lam: float = 0.0
    column_scale: tuple | None = None

    def __post_init__(self):
        if not self.lam >= 0:
            raise ContractError(f"ridge coefficient must be >= 0, got {self.lam}")
        if self.column_scale is not None and any(s < 0 for s in self.column_scale):
            raise ContractError("column_scale entries must be >= 0")

    def matrix(self, d):
        scale = np.ones(d) if self.column_scale is None else np.asarray(self.column_scale, float)
        if scale.shape != (d,):
            raise ContractError(f"column_scale has length {len(scale)}, design has {d} columns")
        return np.diag(self.lam * scale)


@dataclass(frozen=True, eq=False)
class VoxelPosterior:
    mu: np.ndarray
    nu: float
    r_chol: np.ndarray
    sigma2_hat: float
    reason: str = "ok"

    @property
    def valid(self):
        return self.reason == "ok"

    @property
    def R(self):
        return self.r_chol @ self.r_chol.T


def _posterior_batch(A, Y, Wt, Lam):
    """Posterior parameters for a stack of voxels sharing one design.

    ``Y`` and ``Wt`` have shape (V, n).  Returns mu (V, d), nu (V,),
    rchol (V, d, d), sigma2 (V,), reason (V,) int8.
    """
    V, n = Y.shape
    d = A.shape[1]
    G = np.einsum("ni,vn,nj->vij", A, Wt, A)
    H = G + Lam
    rhs = np.einsum("ni,vn->vi", A, Wt * Y)

    mu = np.full((V, d), np.nan)
    nu = np.full(V, np.nan)
    sigma2 = np.full(V, np.nan)
    rchol = np.full((V, d, d), np.nan)
    reason = np.full(V, REASON_SINGULAR, dtype=np.int8)

    finite = np.isfinite(H).all(axis=(1, 2))
    cond = np.full(V, np.inf)
    if finite.any():
        cond[finite] = np.linalg.cond(H[finite])
    ok = np.flatnonzero(cond <= COND_LIMIT)
    if ok.size == 0:
        return mu, nu, rchol, sigma2, reason

    # Cholesky on the diagonally equilibrated system, then undo the scaling.
    Hk = H[ok]
    s = np.sqrt(np.diagonal(Hk, axis1=1, axis2=2))
    outer = s[:, :, None] * s[:, None, :]
    L = np.linalg.cholesky(Hk / outer)
    Linv = np.linalg.inv(L)
    Hs_inv = np.einsum("vki,vkj->vij", Linv, Linv)
    Hinv = Hs_inv / outer

    mu_k = np.einsum("vij,vj->vi", Hinv, rhs[ok])
    nu_k = n - np.einsum("vij,vji->v", Hinv, G[ok])
    resid = Y[ok] - mu_k @ A.T
    rss = np.einsum("vn,vn->v", resid, resid)
    # Residuals at round-off level are exact fits; zero them so that
    # noiseless posteriors collapse exactly onto mu.
    yk = Y[ok]
    rss = np.where(rss <= (n * EPS64) ** 2 * np.einsum("vn,vn->v", yk, yk), 0.0, rss)
    with np.errstate(divide="ignore", invalid="ignore"):
        sig_k = np.where(nu_k > 0, rss / nu_k, np.nan)

    mu[ok] = mu_k
    nu[ok] = nu_k
    sigma2[ok] = sig_k
    good = nu_k > 2
    reason[ok] = np.where(good, REASON_OK, REASON_NU_LE_2)

    g = ok[good]
    if g.size:
        factor = (nu_k[good] - 2.0) / nu_k[good] * sig_k[good]
        chol_inv = np.linalg.cholesky(Hs_inv[good]) / s[good][:, :, None]
        rchol[g] = np.sqrt(factor)[:, None, None] * chol_inv
    return mu, nu, rchol, sigma2, reason


def fit_voxel_posterior(A, y, w=None, reg=None):
    """Posterior of the coefficients for one voxel.

    Parameters
    ----------
    A : ndarray, shape (n, d)
    y : ndarray, shape (n,)
        Log-signal (or any linear-model response).
    w : ndarray, shape (n,), optional
        Positive diagonal weights; ones by default.
    reg : RegularizerSpec, optional

    Returns
    -------
    VoxelPosterior
        Numerical failures are reported through ``reason`` ("singular",
        "nu_le_2") rather than raised.
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).ravel()
    n, d = A.shape
    w = np.ones(n) if w is None else np.asarray(w, dtype=np.float64).ravel()
    if y.shape != (n,) or w.shape != (n,):
        raise ContractError(f"design has {n} rows but y has {y.size} and w has {w.size} entries")
    if n < d:
        raise ContractError(f"need at least {d} measurements, got {n}")
    if not np.all(w > 0):
        raise ContractError("weights must be positive")
    Lam = (reg or RegularizerSpec()).matrix(d)
    mu, nu, rchol, sigma2, reason = _posterior_batch(A, y[None], w[None], Lam)
    return VoxelPosterior(mu=mu[0], nu=float(nu[0]), r_chol=rchol[0],
                          sigma2_hat=float(sigma2[0]), reason=REASONS[int(reason[0])])


@dataclass(frozen=True, eq=False)
class PosteriorVolume:
    """Per-voxel posteriors over the masked region of a volume.

    Arrays are indexed by position in ``indices``, the C-order linear
    indices of the masked voxels.
    """

    shape: tuple
    indices: np.ndarray
    mu: np.ndarray
    nu: np.ndarray
    rchol: np.ndarray
    sigma2: np.ndarray
    reason: np.ndarray
    fingerprint: str = ""
    reg: RegularizerSpec = field(default_factory=RegularizerSpec)
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))
    voxel_size: tuple = (1.0, 1.0, 1.0)

    @property
    def d(self):
        return self.mu.shape[1]

    @property
    def valid(self):
        return self.reason == REASON_OK

    @property
    def mask(self):
        m = np.zeros(int(np.prod(self.shape)), dtype=bool)
        m[self.indices] = True
        return m.reshape(self.shape)

    @property
    def valid_mask(self):
        m = np.zeros(int(np.prod(self.shape)), dtype=bool)
        m[self.indices[self.valid]] = True
        return m.reshape(self.shape)

    def invalid_counts(self):
        codes, counts = np.unique(self.reason[~self.valid], return_counts=True)
        return {REASONS[int(c)]: int(k) for c, k in zip(codes, counts)}

    def to_map(self, values, fill=np.nan):
        """Scatter per-voxel values (leading axis = voxels) into the grid."""
        values = np.asarray(values)
        out = np.full((int(np.prod(self.shape)),) + values.shape[1:], fill, dtype=np.float64)
        out[self.indices] = values
        return out.reshape(tuple(self.shape) + values.shape[1:])

    def voxel(self, k):
        return VoxelPosterior(mu=self.mu[k], nu=float(self.nu[k]), r_chol=self.rchol[k],
                              sigma2_hat=float(self.sigma2[k]),
                              reason=REASONS[int(self.reason[k])])


def fit_volume(ds, reg=None, weighting="wls", threads=None):
    """Fit the DTI posterior in every masked voxel of a dataset.

    Signals are floored at 1e-6 times the volume maximum before the log.
    WLS weights are rescaled to unit mean per voxel, which leaves ``mu`` and
    ``nu`` unchanged and makes ``R`` independent of the signal scale.

    Raises
    ------
    DatasetValidationError
        If :func:`nuq.io.validate_dataset` reports violations.
    """
    report = validate_dataset(ds)
    if report:
        raise DatasetValidationError(report)
    if weighting not in ("wls", "ols"):
        raise ContractError(f"weighting must be 'wls' or 'ols', got {weighting!r}")
    reg = reg or RegularizerSpec()
    A = build_design_matrix(ds.gradients)
    n, d = A.shape
    Lam = reg.matrix(d)
    shape = tuple(ds.spatial_shape)
    indices = np.flatnonzero(ds.mask_or_full().ravel())
    V = indices.size

    common = dict(shape=shape, indices=indices, fingerprint=ds.gradients.fingerprint, reg=reg,
                  affine=ds.signal.affine, voxel_size=ds.signal.voxel_size)
    if V == 0:
        warnings.warn("mask selects no voxels; returning an empty posterior volume")
        return PosteriorVolume(mu=np.zeros((0, d)), nu=np.zeros(0), rchol=np.zeros((0, d, d)),
                               sigma2=np.zeros(0), reason=np.zeros(0, dtype=np.int8), **common)

    signal = ds.signal.data.reshape(-1, n)
    vmax = np.nanmax(ds.signal.data)
    floor = 1e-6 * vmax if vmax > 0 else 1.0

    try:
        wls_weights(A, np.zeros(n), ols=True)
        full_rank = True
    except RankDeficientError:
        full_rank = False
        logger.warning("design matrix is rank deficient; every voxel is singular")

    def work(sl):
        S = signal[indices[sl]]
        m = S.shape[0]
        if not full_rank:
            return (np.full((m, d), np.nan), np.full(m, np.nan), np.full((m, d, d), np.nan),
                    np.full(m, np.nan), np.full(m, REASON_SINGULAR, dtype=np.int8))
        degenerate = ~np.any(S > 0, axis=1) | ~np.all(np.isfinite(S), axis=1)
        Y = np.log(np.maximum(np.nan_to_num(S, nan=floor), floor))
        W = wls_weights(A, Y, ols=(weighting == "ols"))
        W = W / W.mean(axis=1, keepdims=True)
        mu, nu, rchol, sigma2, reason = _posterior_batch(A, Y, W, Lam)
        mu[degenerate] = np.nan
        nu[degenerate] = np.nan
        rchol[degenerate] = np.nan
        sigma2[degenerate] = np.nan
        reason[degenerate] = REASON_DEGENERATE
        return mu, nu, rchol, sigma2, reason

    parts = map_chunks(work, V, threads=threads)
    mu, nu, rchol, sigma2, reason = (np.concatenate(p) for p in zip(*parts))
    pv = PosteriorVolume(mu=mu, nu=nu, rchol=rchol, sigma2=sigma2, reason=reason, **common)
    bad = pv.invalid_counts()
    if bad:
        logger.info("%d of %d voxels invalid: %s", V - int(pv.valid.sum()), V, bad)
    return pv


def _draw_coefficients(mu, nu, rchol, keys, start, stop):
    """Draws ``start .. stop-1`` of the t posterior for a stack of voxels.

    Returns an array of shape (V, stop - start, d).
    """
    d = mu.shape[1]
    stride = d + GAMMA_COUNTERS
    first = np.arange(start, stop, dtype=np.uint64) * np.uint64(stride)
    z = ndtri(uniforms(keys, first[:, None] + np.arange(d, dtype=np.uint64)))
    g = chi2_variates(keys[:, None], first[None, :] + np.uint64(d), nu[:, None])
    scale = np.sqrt(nu[:, None] / g)
    return mu[:, None, :] + scale[..., None] * (z @ np.swapaxes(rchol, 1, 2))


def sample_posterior(p, m, seed, voxel_index=0):
    """Draw ``m`` coefficient vectors from a voxel posterior.

    ``c = mu + L u sqrt(nu / g)`` with ``u`` standard normal, ``g``
    chi-squared with ``nu`` degrees of freedom and ``L`` the Cholesky factor
    of ``R``.  The stream is keyed by ``(seed, voxel_index)``.

    Returns
    -------
    ndarray, shape (m, d)
    """
    if not p.valid:
        raise ContractError(f"cannot sample an invalid posterior (reason {p.reason!r})")
    m = int(m)
    if m < 1:
        raise ContractError(f"sample count must be >= 1, got {m}")
    keys = stream_keys(seed, [voxel_index], DOMAIN_POSTERIOR)
    return _draw_coefficients(np.atleast_2d(p.mu), np.atleast_1d(float(p.nu)),
                              p.r_chol[None], keys, 0, m)[0]


def property_draws(pv, prop, stop, seed, start=0, positions=None, threads=None):
    """Property draws ``start .. stop-1`` for selected voxels.

    Parameters
    ----------
    positions : ndarray of int, optional
        Positions into ``pv.indices``; all masked voxels by default.

    Returns
    -------
    ndarray, shape (stop - start, len(positions))
        NaN for invalid voxels.
    """
    f = property_function(prop)
    if positions is None:
        positions = np.arange(pv.indices.size)
    positions = np.asarray(positions)
    if stop <= start:
        raise ContractError(f"need at least one draw, got range [{start}, {stop})")
    out = np.full((positions.size, stop - start), np.nan)

    def work(sl):
        pos = positions[sl]
        ok = pv.valid[pos]
        if ok.any():
            p = pos[ok]
            keys = stream_keys(seed, pv.indices[p], DOMAIN_POSTERIOR)
            c = _draw_coefficients(pv.mu[p], pv.nu[p], pv.rchol[p], keys, start, stop)
            block = out[sl]
            block[ok] = f(c)
            out[sl] = block

    map_chunks(work, positions.size, threads=threads)
    return out.T


def sample_property(pv, prop, m, seed, threads=None):
    """``m`` posterior draws of a scalar property map.

    Returns
    -------
    ndarray, shape (m,) + pv.shape
        NaN outside the mask and at invalid voxels.
    """
    m = int(m)
    if m < 1:
        raise ContractError(f"sample count must be >= 1, got {m}")
    draws = property_draws(pv, prop, m, seed, threads=threads)
    return np.moveaxis(pv.to_map(draws.T), -1, 0)


def residual_variance_map(pv):
    """Map of the residual variance estimate plus summary statistics."""
    values = np.where(pv.valid, pv.sigma2, np.nan)
    finite = values[np.isfinite(values)]
    if finite.size:
        q1, med, q3 = np.percentile(finite, [25, 50, 75])
    else:
        q1 = med = q3 = float("nan")
    summary = {"median": float(med), "q1": float(q1), "q3": float(q3),
               "iqr": float(q3 - q1), "n": int(finite.size)}
    return pv.to_map(values), summary


def _tri_pairs(d):
    return [(i, j) for i in range(d) for j in range(i + 1)]


def save_posterior(pv, out_dir):
    """Persist a posterior volume as NIfTI maps plus ``manifest.json``."""
    os.makedirs(out_dir, exist_ok=True)

    def put(name, values, datatype=64):
        vol = NiftiVolume(data=pv.to_map(values, fill=np.nan if datatype == 64 else 0),
                          affine=pv.affine, voxel_size=pv.voxel_size)
        write_nifti(vol, os.path.join(out_dir, f"{name}.nii.gz"), datatype=datatype)

    for k in range(pv.d):
        put(f"mu_{k}", pv.mu[:, k])
    put("nu", pv.nu)
    put("sigma2", pv.sigma2)
    for i, j in _tri_pairs(pv.d):
        put(f"rchol_{i}{j}", pv.rchol[:, i, j])
    put("valid", pv.valid.astype(np.float64), datatype=2)
    put("reason", pv.reason.astype(np.float64), datatype=2)
    put("mask", np.ones(pv.indices.size), datatype=2)

    manifest = {
        "d": pv.d,
        "column_labels": list(COLUMN_LABELS) if pv.d == len(COLUMN_LABELS) else None,
        "lambda": pv.reg.lam,
        "column_scale": list(pv.reg.column_scale) if pv.reg.column_scale is not None else None,
        "gradient_fingerprint": pv.fingerprint,
        "shape": list(pv.shape),
        "n_voxels": int(pv.indices.size),
        "n_valid": int(pv.valid.sum()),
        "invalid_counts": pv.invalid_counts(),
        "cond_limit": COND_LIMIT,
        "seed_policy": SEED_POLICY,
        "version": __version__,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_posterior(in_dir):
    """Inverse of :func:`save_posterior`."""
    path = os.path.join(in_dir, "manifest.json")
    try:
        with open(path) as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise ContractError(f"no posterior manifest at {path}") from None

    def get(name):
        return read_nifti(os.path.join(in_dir, f"{name}.nii.gz"))

    mask_vol = get("mask")
    shape = tuple(manifest["shape"])
    indices = np.flatnonzero(mask_vol.data.reshape(shape).ravel() != 0)

    def flat(name):
        return get(name).data.reshape(-1)[indices]

    d = int(manifest["d"])
    mu = np.stack([flat(f"mu_{k}") for k in range(d)], axis=1) if indices.size else np.zeros((0, d))
    rchol = np.zeros((indices.size, d, d))
    for i, j in _tri_pairs(d):
        rchol[:, i, j] = flat(f"rchol_{i}{j}")
    invalid = flat("reason") != REASON_OK
    rchol[invalid] = np.nan
    scale = manifest.get("column_scale")
    reg = RegularizerSpec(lam=manifest["lambda"],
                          column_scale=tuple(scale) if scale is not None else None)
    return PosteriorVolume(shape=shape, indices=indices, mu=mu, nu=flat("nu"), rchol=rchol,
                           sigma2=flat("sigma2"), reason=flat("reason").astype(np.int8),
                           fingerprint=manifest["gradient_fingerprint"], reg=reg,
                           affine=mask_vol.affine, voxel_size=mask_vol.voxel_size)
