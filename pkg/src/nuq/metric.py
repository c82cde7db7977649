"""NUQ quality maps and pooled scores.

Voxel maps average the absolute difference between paired posterior draws
of a property.  Pooled scores draw 2m independent property maps over a
region, split them by draw order into two sets of m, and report the squared
MMD between the sets.  Scores are only comparable at equal m and kernel.
"""

import json
import logging
import re
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .discrepancy import KernelSpec, mmd_squared
from .errors import ContractError
from .posterior import RegularizerSpec, fit_volume, property_draws

logger = logging.getLogger(__name__)

DEFAULT_DRAWS = 50
DEFAULT_PAIRS = 16
REGION_KINDS = ("subject", "slice", "patch", "voxel")


@dataclass(frozen=True)
class Region:
    """A box of voxels with inclusive index bounds, or the whole subject."""

    kind: str = "subject"
    bounds: tuple | None = None

    def __post_init__(self):
        if self.kind not in REGION_KINDS:
            raise ContractError(f"unknown region kind {self.kind!r}")
        if self.kind != "subject":
            if self.bounds is None or len(self.bounds) != 3:
                raise ContractError("box regions need (lo, hi) bounds for 3 axes")
            for lo, hi in self.bounds:
                if lo < 0 or hi < lo:
                    raise ContractError(f"invalid bounds {self.bounds}")

    @classmethod
    def subject(cls):
        return cls()

    @classmethod
    def box(cls, bounds):
        """Region from inclusive bounds; kind follows from the box shape."""
        bounds = tuple((int(lo), int(hi)) for lo, hi in bounds)
        extents = [hi - lo + 1 for lo, hi in bounds]
        wide = sum(e > 1 for e in extents)
        kind = "voxel" if wide == 0 else "slice" if wide == 2 else "patch"
        return cls(kind=kind, bounds=bounds)

    def selector(self, shape):
        sel = np.zeros(shape, dtype=bool)
        if self.kind == "subject":
            sel[...] = True
            return sel
        for (lo, hi), n in zip(self.bounds, shape):
            if hi >= n:
                raise ContractError(f"region bounds {self.bounds} exceed volume shape {shape}")
        (x0, x1), (y0, y1), (z0, z1) = self.bounds
        sel[x0:x1 + 1, y0:y1 + 1, z0:z1 + 1] = True
        return sel

    def to_dict(self):
        return {"kind": self.kind, "bounds": [list(b) for b in self.bounds] if self.bounds else None}


_RANGE = re.compile(r"^\s*(\d+)\s*(?::\s*(\d+)\s*)?$")


def parse_region(text):
    """Parse ``"x0:x1,y0:y1,z0:z1"`` (inclusive; ``"x"`` means ``"x:x"``)."""
    parts = text.split(",")
    if len(parts) != 3:
        raise ContractError(f"region must have 3 comma-separated ranges, got {text!r}")
    bounds = []
    for part in parts:
        m = _RANGE.match(part)
        if not m:
            raise ContractError(f"malformed range {part!r} in region {text!r}")
        lo = int(m.group(1))
        hi = int(m.group(2)) if m.group(2) is not None else lo
        bounds.append((lo, hi))
    return Region.box(bounds)


def default_kernel(region):
    """Linear kernel for 1-D/3-D regions, degree-2 polynomial for 2-D ones."""
    if region.kind == "slice":
        return KernelSpec(kind="polynomial", degree=2)
    return KernelSpec(kind="linear")


@dataclass(frozen=True)
class NuqReport:
    score: float
    region: Region
    kernel: KernelSpec
    m_per_set: int
    seed: int
    property: str
    voxel_count: int
    sigma2_median: float
    version: str = __version__

    def to_dict(self):
        return {
            "score": self.score,
            "region": self.region.to_dict(),
            "kernel": self.kernel.to_dict(),
            "m_per_set": self.m_per_set,
            "seed": self.seed,
            "property": self.property,
            "voxel_count": self.voxel_count,
            "sigma2_median": self.sigma2_median,
            "version": self.version,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _positions(pv, region, voxel_mask=None):
    sel = region.selector(pv.shape)
    if voxel_mask is not None:
        sel &= np.asarray(voxel_mask, dtype=bool)
    pos = np.flatnonzero(sel.ravel()[pv.indices])
    if pos.size == 0:
        raise ContractError(f"region {region.to_dict()} contains no masked voxels")
    return pos


def voxel_nuq_map(pv, prop="fa", pairs=DEFAULT_PAIRS, seed=0, threads=None):
    """Voxel quality map: mean over ``pairs`` of ``|z1 - z2|``.

    ``z1`` and ``z2`` are independent posterior draws of the property (draws
    2k and 2k+1 of each voxel stream).  NaN outside the mask and at invalid
    voxels.
    """
    pairs = int(pairs)
    if pairs < 1:
        raise ContractError(f"pairs must be >= 1, got {pairs}")
    draws = property_draws(pv, prop, 2 * pairs, seed, threads=threads)
    diff = np.abs(draws[0::2] - draws[1::2]).mean(axis=0)
    return pv.to_map(diff)


def region_nuq_score(pv, prop="fa", region=None, kernel=None, m=DEFAULT_DRAWS, seed=0,
                     threads=None, voxel_mask=None):
    """Pooled NUQ score of a region.

    Parameters
    ----------
    pv : PosteriorVolume
    prop : {"fa", "md"}
    region : Region, optional
        Whole subject by default.
    kernel : KernelSpec, optional
        Defaults per :func:`default_kernel`.
    m : int
        Draws per set; 2m property maps are drawn in total.
    seed : int
    voxel_mask : ndarray of bool, optional
        Extra restriction intersected with the region.

    Returns
    -------
    NuqReport
    """
    region = region or Region.subject()
    kernel = kernel or default_kernel(region)
    m = int(m)
    if m < 1:
        raise ContractError(f"draws per set must be >= 1, got {m}")
    pos = _positions(pv, region, voxel_mask)
    draws = property_draws(pv, prop, 2 * m, seed, positions=pos, threads=threads)
    keep = np.all(np.isfinite(draws), axis=0)
    if not keep.any():
        raise ContractError(f"region {region.to_dict()} has no valid voxels")
    draws = draws[:, keep]
    X, Y = draws[:m], draws[m:]
    kernel = kernel.resolve(X, Y)
    sig = pv.sigma2[pos[keep]]
    return NuqReport(
        score=float(mmd_squared(X, Y, kernel)),
        region=region,
        kernel=kernel,
        m_per_set=m,
        seed=int(seed),
        property=prop,
        voxel_count=int(keep.sum()),
        sigma2_median=float(np.median(sig)),
    )


def subject_nuq_score(pv, prop="fa", kernel=None, m=DEFAULT_DRAWS, seed=0, threads=None,
                      voxel_mask=None):
    return region_nuq_score(pv, prop, Region.subject(), kernel, m, seed, threads=threads,
                            voxel_mask=voxel_mask)


@dataclass(frozen=True)
class NuqConfig:
    prop: str = "fa"
    kernel: KernelSpec | None = None
    m: int = DEFAULT_DRAWS
    pairs: int = DEFAULT_PAIRS
    seed: int = 0
    reg: RegularizerSpec = field(default_factory=RegularizerSpec)
    weighting: str = "wls"
    threads: int | None = None


@dataclass(frozen=True, eq=False)
class ComparisonReport:
    raw: NuqReport
    processed: NuqReport
    sigma2_median_raw: float
    sigma2_median_processed: float
    raw_map: np.ndarray
    processed_map: np.ndarray

    @property
    def delta(self):
        return self.processed.score - self.raw.score

    @property
    def worse(self):
        return self.delta > 0

    def to_dict(self):
        return {
            "raw": self.raw.to_dict(),
            "processed": self.processed.to_dict(),
            "delta": self.delta,
            "processed_worse_than_raw": bool(self.worse),
            "sigma2_median_raw": self.sigma2_median_raw,
            "sigma2_median_processed": self.sigma2_median_processed,
        }


def _check_comparable(raw, processed):
    if tuple(raw.spatial_shape) != tuple(processed.spatial_shape):
        raise ContractError(
            f"spatial shapes differ: {raw.spatial_shape} vs {processed.spatial_shape}")
    if raw.gradients.fingerprint != processed.gradients.fingerprint:
        raise ContractError("gradient table fingerprints differ")
    if not np.array_equal(raw.mask_or_full(), processed.mask_or_full()):
        raise ContractError("masks differ")


def compare_datasets(raw, processed, config=None):
    """Score a raw and a processed (e.g. denoised) dataset side by side.

    Both are scored with the same seed over the voxels valid in both fits.
    A positive delta means the processed data carry more fit uncertainty
    than the raw data.
    """
    cfg = config or NuqConfig()
    _check_comparable(raw, processed)
    pv_raw = fit_volume(raw, reg=cfg.reg, weighting=cfg.weighting, threads=cfg.threads)
    pv_proc = fit_volume(processed, reg=cfg.reg, weighting=cfg.weighting, threads=cfg.threads)
    joint = pv_raw.valid_mask & pv_proc.valid_mask

    reports, maps, medians = [], [], []
    for pv in (pv_raw, pv_proc):
        reports.append(subject_nuq_score(pv, cfg.prop, cfg.kernel, cfg.m, cfg.seed,
                                         threads=cfg.threads, voxel_mask=joint))
        vmap = voxel_nuq_map(pv, cfg.prop, cfg.pairs, cfg.seed, threads=cfg.threads)
        vmap[~joint] = np.nan
        maps.append(vmap)
        medians.append(float(np.median(pv.to_map(pv.sigma2)[joint])))
    out = ComparisonReport(raw=reports[0], processed=reports[1], sigma2_median_raw=medians[0],
                           sigma2_median_processed=medians[1], raw_map=maps[0],
                           processed_map=maps[1])
    if out.worse:
        logger.warning("processed data score higher than raw (%.6g > %.6g)",
                       out.processed.score, out.raw.score)
    return out
