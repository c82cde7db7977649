"""Diffusion tensor model: log-linear design, WLS weights and scalar maps.

Coefficient layout (d = 7)::

    c = [ln S0, Dxx, Dyy, Dzz, Dxy, Dxz, Dyz]

so that ``ln S = A @ c`` for the design matrix ``A`` built from a gradient
table.  Diffusivities are in mm^2/s when b-values are in s/mm^2.
"""

import numpy as np

from .errors import ContractError, DegenerateVoxelError, NumericError, RankDeficientError

COLUMN_LABELS = ("ln_S0", "Dxx", "Dyy", "Dzz", "Dxy", "Dxz", "Dyz")
N_COEFFS = len(COLUMN_LABELS)

# eval_fa flag bits
FA_CLAMPED = 1
FA_NEGATIVE_EIGENVALUE = 2
FA_DEGENERATE = 4


def build_design_matrix(gtab):
    """Return the n x 7 DTI design matrix for a gradient table.

    Row i is ``[1, -b gx^2, -b gy^2, -b gz^2, -2b gx gy, -2b gx gz, -2b gy gz]``.
    """
    b = gtab.bvals
    gx, gy, gz = gtab.bvecs.T
    A = np.empty((len(b), N_COEFFS))
    A[:, 0] = 1.0
    A[:, 1] = -b * gx * gx
    A[:, 2] = -b * gy * gy
    A[:, 3] = -b * gz * gz
    A[:, 4] = -2.0 * b * gx * gy
    A[:, 5] = -2.0 * b * gx * gz
    A[:, 6] = -2.0 * b * gy * gz
    return A


def log_transform_signal(s, floor=None):
    """Log of a signal vector with non-positive entries floored.

    Parameters
    ----------
    s : array_like, shape (n,)
    floor : float, optional
        Positive lower bound applied before the logarithm.  Defaults to
        1e-6 times the largest entry of ``s``.

    Returns
    -------
    y_log : ndarray
    n_floored : int

    Raises
    ------
    DegenerateVoxelError
        If no entry of ``s`` is positive.
    """
    s = np.asarray(s, dtype=np.float64)
    if not np.any(s > 0):
        raise DegenerateVoxelError("signal has no positive entry")
    if floor is None:
        floor = 1e-6 * s.max()
    if not floor > 0:
        raise ValueError(f"floor must be positive, got {floor}")
    n_floored = int(np.count_nonzero(s < floor))
    return np.log(np.maximum(s, floor)), n_floored


def _check_rank(A):
    if A.shape[0] < A.shape[1] or np.linalg.matrix_rank(A) < A.shape[1]:
        raise RankDeficientError(
            f"design matrix of shape {A.shape} does not have full column rank")


def ols_coefficients(A, y_log):
    """Ordinary least-squares fit; ``y_log`` may hold one voxel per row."""
    A = np.asarray(A, dtype=np.float64)
    _check_rank(A)
    return np.asarray(y_log, dtype=np.float64) @ np.linalg.pinv(A).T


def wls_weights(A, y_log, ols=False):
    """Diagonal WLS weights from a first-pass OLS fit.

    Each weight is the squared predicted signal ``exp(2 (A c_ols)_i)``,
    which is the usual variance correction after taking the log of a
    magnitude signal.  With ``ols=True`` all weights are one.
    """
    A = np.asarray(A, dtype=np.float64)
    y_log = np.asarray(y_log, dtype=np.float64)
    if ols:
        _check_rank(A)
        return np.ones_like(y_log)
    c0 = ols_coefficients(A, y_log)
    return np.exp(2.0 * (c0 @ A.T))


def tensor_from_coefficients(c):
    """Symmetric 3x3 tensors from coefficient vectors of shape (..., 7)."""
    c = np.asarray(c, dtype=np.float64)
    D = np.empty(c.shape[:-1] + (3, 3))
    D[..., 0, 0] = c[..., 1]
    D[..., 1, 1] = c[..., 2]
    D[..., 2, 2] = c[..., 3]
    D[..., 0, 1] = D[..., 1, 0] = c[..., 4]
    D[..., 0, 2] = D[..., 2, 0] = c[..., 5]
    D[..., 1, 2] = D[..., 2, 1] = c[..., 6]
    return D


def coefficients_from_tensor(D, ln_s0=0.0):
    D = np.asarray(D, dtype=np.float64)
    c = np.empty(D.shape[:-2] + (N_COEFFS,))
    c[..., 0] = ln_s0
    c[..., 1] = D[..., 0, 0]
    c[..., 2] = D[..., 1, 1]
    c[..., 3] = D[..., 2, 2]
    c[..., 4] = D[..., 0, 1]
    c[..., 5] = D[..., 0, 2]
    c[..., 6] = D[..., 1, 2]
    return c


def eigendecompose_tensor(c):
    """Eigenvalues (descending) and eigenvectors of the tensor in ``c``.

    Returns
    -------
    evals : ndarray, shape (..., 3)
    evecs : ndarray, shape (..., 3, 3)
        ``evecs[..., :, i]`` belongs to ``evals[..., i]``.
    """
    c = np.asarray(c, dtype=np.float64)
    if not np.all(np.isfinite(c)):
        raise NumericError("non-finite tensor coefficients")
    w, v = np.linalg.eigh(tensor_from_coefficients(c))
    return w[..., ::-1], v[..., :, ::-1]


def tensor_eigenvalues(D):
    """Closed-form eigenvalues of symmetric 3x3 matrices, descending.

    Trigonometric solution of the characteristic cubic; vectorized over
    leading axes.
    """
    D = np.asarray(D, dtype=np.float64)
    q = np.trace(D, axis1=-2, axis2=-1) / 3.0
    off = D[..., 0, 1] ** 2 + D[..., 0, 2] ** 2 + D[..., 1, 2] ** 2
    diag = np.stack([D[..., i, i] - q for i in range(3)], axis=-1)
    p2 = (diag ** 2).sum(-1) + 2.0 * off
    p = np.sqrt(p2 / 6.0)
    safe_p = np.where(p > 0, p, 1.0)
    B = (D - q[..., None, None] * np.eye(3)) / safe_p[..., None, None]
    r = np.clip(np.linalg.det(B) / 2.0, -1.0, 1.0)
    phi = np.arccos(r) / 3.0
    l1 = q + 2.0 * p * np.cos(phi)
    l3 = q + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0)
    l2 = 3.0 * q - l1 - l3
    return np.stack([l1, l2, l3], axis=-1)


def _fa_unclamped(c):
    dxx, dyy, dzz, dxy, dxz, dyz = (c[..., i] for i in range(1, 7))
    md = (dxx + dyy + dzz) / 3.0
    off2 = 2.0 * (dxy * dxy + dxz * dxz + dyz * dyz)
    dev2 = (dxx - md) ** 2 + (dyy - md) ** 2 + (dzz - md) ** 2 + off2
    norm2 = dxx * dxx + dyy * dyy + dzz * dzz + off2
    degenerate = norm2 == 0
    with np.errstate(invalid="ignore", divide="ignore"):
        raw = np.sqrt(1.5 * dev2 / np.where(degenerate, 1.0, norm2))
    return np.where(degenerate, 0.0, raw), degenerate


def fa_with_flags(c):
    """Fractional anisotropy and a flag bitmask, vectorized over (..., 7).

    FA is ``sqrt(3/2) |D - tr(D)/3 I|_F / |D|_F``, which equals the
    eigenvalue form ``sqrt(3/2) sqrt(sum (l_i - l_mean)^2) / sqrt(sum l_i^2)``
    without needing the eigenvalues.  Negative eigenvalues are kept; the
    result is clamped to [0, 1] afterwards.

    Flags: ``FA_CLAMPED`` when clamping changed the value,
    ``FA_NEGATIVE_EIGENVALUE`` when any eigenvalue is below zero,
    ``FA_DEGENERATE`` for the zero tensor (FA defined as 0).
    """
    c = np.asarray(c, dtype=np.float64)
    raw, degenerate = _fa_unclamped(c)
    fa = np.clip(raw, 0.0, 1.0)

    lmin = tensor_eigenvalues(tensor_from_coefficients(c))[..., 2]
    flags = (np.where(fa != raw, FA_CLAMPED, 0)
             | np.where(lmin < 0, FA_NEGATIVE_EIGENVALUE, 0)
             | np.where(degenerate, FA_DEGENERATE, 0)).astype(np.uint8)
    if np.ndim(fa) == 0:
        return float(fa), int(flags)
    return fa, flags


def eval_fa(c):
    """Fractional anisotropy in [0, 1] of coefficient vector(s) ``c``."""
    return fa_with_flags(c)[0]


def _fa_fast(c):
    # Sampling hot path: same value as eval_fa, no flag bookkeeping.
    return np.clip(_fa_unclamped(c)[0], 0.0, 1.0)


def eval_md(c):
    """Mean diffusivity ``(Dxx + Dyy + Dzz) / 3``."""
    c = np.asarray(c, dtype=np.float64)
    md = (c[..., 1] + c[..., 2] + c[..., 3]) / 3.0
    return float(md) if np.ndim(md) == 0 else md


PROPERTIES = {"fa": _fa_fast, "md": eval_md}


def property_function(name):
    try:
        return PROPERTIES[name.lower()]
    except (KeyError, AttributeError):
        raise ContractError(f"unknown property {name!r}; choose from {sorted(PROPERTIES)}") from None
