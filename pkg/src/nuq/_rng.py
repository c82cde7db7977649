"""Counter-based random streams keyed by (seed, element index).

Every voxel (or array element) owns an independent SplitMix64 stream whose
starting state is a hash of the user seed, a domain tag and the element's
linear index.  The k-th variate of a stream is a pure function of
(seed, domain, index, k), so results never depend on traversal order,
chunking or the number of worker threads.
"""

import numpy as np
from scipy.special import gammaincinv, ndtri

from .errors import ContractError

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)

# Domain tags keep streams of different consumers apart under a shared seed.
DOMAIN_POSTERIOR = 1
DOMAIN_NOISE = 2


def _mix(z):
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _as_seed(seed):
    seed = int(seed)
    if seed < 0 or seed >= 2**64:
        raise ContractError(f"seed must be in [0, 2**64), got {seed}")
    return np.uint64(seed)


def stream_keys(seed, indices, domain):
    """Return one 64-bit stream key per element index."""
    idx = np.asarray(indices, dtype=np.uint64)
    with np.errstate(over="ignore"):
        base = _mix(_mix(_as_seed(seed) + _GOLDEN) ^ np.uint64(domain) * _M2)
        return _mix(base + (idx + np.uint64(1)) * _GOLDEN)


def _unit(state):
    bits = _mix(state) >> np.uint64(11)
    return (bits.astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)


def uniforms(keys, counters):
    """Uniform variates in the open interval (0, 1).

    Returns an array of shape ``keys.shape + counters.shape``.
    """
    keys = np.asarray(keys, dtype=np.uint64)
    ctr = np.asarray(counters, dtype=np.uint64)
    with np.errstate(over="ignore"):
        state = keys[..., None] + (ctr.ravel() + np.uint64(1)) * _GOLDEN
    return _unit(state).reshape(keys.shape + ctr.shape)


def uniforms_at(keys, counters):
    """Elementwise variant: one uniform per (key, counter) pair."""
    keys, ctr = np.broadcast_arrays(np.asarray(keys, dtype=np.uint64),
                                    np.asarray(counters, dtype=np.uint64))
    with np.errstate(over="ignore"):
        return _unit(keys + (ctr + np.uint64(1)) * _GOLDEN)


def normals(keys, counters):
    """Standard normal variates by inverse CDF, same shape rules as uniforms."""
    return ndtri(uniforms(keys, counters))


GAMMA_ATTEMPTS = 4
GAMMA_COUNTERS = 2 * GAMMA_ATTEMPTS + 1


def chi2_variates(keys, base, dof):
    """Chi-squared variates, one per element of ``keys``/``base``/``dof``.

    Marsaglia-Tsang squeeze-free rejection for Gamma(dof/2) using counters
    ``base .. base + 2 * GAMMA_ATTEMPTS - 1``; elements rejected on every
    attempt (or with dof/2 < 1) fall back to the inverse CDF at counter
    ``base + 2 * GAMMA_ATTEMPTS``.  Each element reserves
    ``GAMMA_COUNTERS`` counters.
    """
    keys, base, dof = np.broadcast_arrays(np.asarray(keys, dtype=np.uint64),
                                          np.asarray(base, dtype=np.uint64),
                                          np.asarray(dof, dtype=np.float64))
    shape = keys.shape
    keys, base, a = keys.ravel(), base.ravel(), 0.5 * dof.ravel()
    out = np.full(a.shape, np.nan)
    todo = np.flatnonzero(a >= 1.0)
    d = a - 1.0 / 3.0
    c = 1.0 / np.sqrt(9.0 * np.where(a >= 1.0, d, 1.0))
    for k in range(GAMMA_ATTEMPTS):
        if todo.size == 0:
            break
        kk, bb = keys[todo], base[todo] + np.uint64(2 * k)
        x = ndtri(uniforms_at(kk, bb))
        u = uniforms_at(kk, bb + np.uint64(1))
        v = (1.0 + c[todo] * x) ** 3
        dt = d[todo]
        with np.errstate(invalid="ignore", divide="ignore"):
            ok = (v > 0) & (np.log(u) < 0.5 * x * x + dt - dt * v + dt * np.log(v))
        out[todo[ok]] = 2.0 * dt[ok] * v[ok]
        todo = todo[~ok]
    rest = np.flatnonzero(np.isnan(out))
    if rest.size:
        u = uniforms_at(keys[rest], base[rest] + np.uint64(2 * GAMMA_ATTEMPTS))
        out[rest] = 2.0 * gammaincinv(a[rest], u)
    return out.reshape(shape)
