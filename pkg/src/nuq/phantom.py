"""Synthetic single-tensor diffusion phantoms with known ground truth.

Signals follow ``S = S0 exp(-b g^T D g)``.  Noise is drawn from the same
(seed, element index) keyed streams as posterior sampling, under a
separate domain tag, so phantoms are reproducible element by element.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from ._rng import DOMAIN_NOISE, stream_keys, uniforms
from .dti import coefficients_from_tensor, eval_fa, eval_md
from .errors import ContractError
from .io import DwiDataset, NiftiVolume, gradient_table

PRESETS = ("uniform_iso", "crossing_free", "fa_gradient")
NOISE_KINDS = ("rician", "gaussian", "none")
DEFAULT_MD = 0.7e-3  # mm^2/s


def fibonacci_hemisphere(n):
    """``n`` near-uniform unit vectors on the upper hemisphere."""
    i = np.arange(n) + 0.5
    z = 1.0 - i / n
    r = np.sqrt(1.0 - z * z)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    v = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def default_gradient_table(n_dirs=32, n_b0=4, bval=1000.0):
    """``n_b0`` unweighted measurements followed by ``n_dirs`` at ``bval``."""
    bvals = np.concatenate([np.zeros(n_b0), np.full(n_dirs, float(bval))])
    bvecs = np.vstack([np.zeros((n_b0, 3)), fibonacci_hemisphere(n_dirs)])
    return gradient_table(bvals, bvecs)


def prolate_tensor(fa, md, direction):
    """Axially symmetric tensor(s) with given FA, MD and principal axis.

    With eigenvalues ``md (1 + 2k)`` and ``md (1 - k)`` (twice), FA equals
    ``sqrt(3) k / sqrt(1 + 2 k^2)``, so ``k = FA / sqrt(3 - 2 FA^2)``.
    """
    fa = np.asarray(fa, dtype=np.float64)
    md = np.asarray(md, dtype=np.float64)
    e = np.asarray(direction, dtype=np.float64)
    e = e / np.linalg.norm(e, axis=-1, keepdims=True)
    k = fa / np.sqrt(3.0 - 2.0 * fa * fa)
    lpar = md * (1.0 + 2.0 * k)
    lperp = md * (1.0 - k)
    outer = e[..., :, None] * e[..., None, :]
    return lperp[..., None, None] * np.eye(3) + (lpar - lperp)[..., None, None] * outer


@dataclass(frozen=True, eq=False)
class PhantomSpec:
    """Phantom geometry, ground truth and noise.

    ``tensor_field`` (shape dims + (3, 3)) overrides ``preset``.  ``s0`` and
    ``sigma`` may be scalars or arrays broadcastable to the spatial dims.
    """

    dims: tuple = (20, 20, 20)
    preset: str = "fa_gradient"
    tensor_field: np.ndarray | None = None
    s0: float | np.ndarray = 1.0
    gradients: object = None
    noise: str = "rician"
    sigma: float | np.ndarray = 0.0
    seed: int = 0
    axis: int = 0
    md: float = DEFAULT_MD
    fa_max: float = 0.9

    def __post_init__(self):
        if len(self.dims) != 3 or any(int(n) < 1 for n in self.dims):
            raise ContractError(f"dims must be three positive extents, got {self.dims}")
        if self.tensor_field is None and self.preset not in PRESETS:
            raise ContractError(f"unknown preset {self.preset!r}; choose from {PRESETS}")
        if self.noise not in NOISE_KINDS:
            raise ContractError(f"unknown noise kind {self.noise!r}; choose from {NOISE_KINDS}")
        if np.any(np.asarray(self.sigma) < 0):
            raise ContractError("sigma must be >= 0")
        if np.any(np.asarray(self.s0) <= 0):
            raise ContractError("s0 must be positive")
        if not 0 <= self.fa_max < 1:
            raise ContractError(f"fa_max must be in [0, 1), got {self.fa_max}")


def preset_tensors(preset, dims, md=DEFAULT_MD, fa_max=0.9, axis=0):
    dims = tuple(int(n) for n in dims)
    grid = np.indices(dims, dtype=np.float64)
    if preset == "uniform_iso":
        return np.broadcast_to(md * np.eye(3), dims + (3, 3)).copy()
    if preset == "fa_gradient":
        n = dims[axis]
        frac = grid[axis] / (n - 1) if n > 1 else np.zeros(dims)
        return prolate_tensor(fa_max * frac, md, np.array([1.0, 0.5, 0.25]))
    if preset == "crossing_free":
        # one fibre per voxel, orientation sweeping smoothly in the xy-plane
        theta = 0.5 * np.pi * (grid[0] / max(dims[0] - 1, 1) + grid[1] / max(dims[1] - 1, 1))
        e = np.stack([np.cos(theta), np.sin(theta), np.full(dims, 0.3)], axis=-1)
        return prolate_tensor(np.full(dims, 0.7), md, e)
    raise ContractError(f"unknown preset {preset!r}; choose from {PRESETS}")


def _noise_normals(shape, seed, channels):
    keys = stream_keys(seed, np.arange(int(np.prod(shape))), DOMAIN_NOISE)
    z = ndtri(uniforms(keys, np.arange(channels)))
    return [z[:, c].reshape(shape) for c in range(channels)]


def add_rician_noise(signal, sigma, seed):
    """Magnitude of the signal plus complex Gaussian noise of std ``sigma``.

    ``out = sqrt((S + n1)^2 + n2^2)`` with ``n1, n2 ~ N(0, sigma^2)``.
    """
    signal = np.asarray(signal, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < 0):
        raise ContractError("sigma must be >= 0")
    if not np.any(sigma):
        return signal.copy()
    n1, n2 = _noise_normals(signal.shape, seed, 2)
    return np.sqrt((signal + sigma * n1) ** 2 + (sigma * n2) ** 2)


def add_gaussian_noise(signal, sigma, seed):
    """``signal + n`` with ``n ~ N(0, sigma^2)``."""
    signal = np.asarray(signal, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < 0):
        raise ContractError("sigma must be >= 0")
    if not np.any(sigma):
        return signal.copy()
    (n1,) = _noise_normals(signal.shape, seed, 1)
    return signal + sigma * n1


def simulate_signal(spec):
    """Generate a phantom dataset and its ground-truth maps.

    Returns
    -------
    ds : DwiDataset
        Full-volume mask.
    truth : dict
        ``"fa"``, ``"md"`` (3-D maps), ``"tensor"`` (dims + (3, 3)),
        ``"coefficients"`` (dims + (7,)) and the noiseless ``"signal"``.
    """
    dims = tuple(int(n) for n in spec.dims)
    gtab = spec.gradients if spec.gradients is not None else default_gradient_table()
    if spec.tensor_field is not None:
        D = np.asarray(spec.tensor_field, dtype=np.float64)
        if D.shape != dims + (3, 3):
            raise ContractError(f"tensor_field shape {D.shape} != {dims + (3, 3)}")
    else:
        D = preset_tensors(spec.preset, dims, spec.md, spec.fa_max, spec.axis)

    s0 = np.broadcast_to(np.asarray(spec.s0, dtype=np.float64), dims)
    g = gtab.bvecs
    quad = np.einsum("ni,xyzij,nj->xyzn", g, D, g)
    clean = s0[..., None] * np.exp(-gtab.bvals * quad)

    sigma = np.asarray(spec.sigma, dtype=np.float64)
    if sigma.ndim == 3:
        sigma = sigma[..., None]
    if spec.noise == "rician":
        noisy = add_rician_noise(clean, sigma, spec.seed)
    elif spec.noise == "gaussian":
        noisy = add_gaussian_noise(clean, sigma, spec.seed)
    else:
        noisy = clean.copy()

    coeffs = coefficients_from_tensor(D, ln_s0=np.log(s0))
    truth = {
        "fa": eval_fa(coeffs),
        "md": eval_md(coeffs),
        "tensor": D,
        "coefficients": coeffs,
        "signal": clean,
    }
    ds = DwiDataset(signal=NiftiVolume(data=noisy), gradients=gtab,
                    mask=np.ones(dims, dtype=bool))
    return ds, truth
