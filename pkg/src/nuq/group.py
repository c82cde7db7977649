"""Precision-weighted Bayesian comparison of two groups of subjects.

Each subject contributes m posterior draws of a property per voxel, all
on a shared grid.  At every voxel and draw index j the weighted group means
are differenced::

    delta_j = sum_A w_s z_sj / sum_A w_s  -  sum_B w_s z_sj / sum_B w_s

with ``w_s = 1 / std_j(z_sj)``.  The Bayesian t-score is
``mean_j(delta_j) / std_j(delta_j)``; positive values mean group A is larger.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .io import NiftiVolume, read_nifti

EPS = 1e-8

T_UNDEFINED = 1
ZERO_DIFFERENCE = 2
EMPTY_GROUP = 4


def subject_weight(samples, eps=EPS):
    """Reciprocal posterior standard deviation of one subject at one voxel.

    Returns
    -------
    weight : float
    degenerate : bool
        True when the standard deviation fell below ``eps``.
    """
    s = np.asarray(samples, dtype=np.float64).ravel()
    if s.size < 2:
        raise ContractError(f"need at least 2 draws for a standard deviation, got {s.size}")
    sd = float(np.std(s, ddof=1))
    return 1.0 / max(sd, eps), sd < eps


@dataclass(frozen=True, eq=False)
class CohortSamples:
    """Per-subject draw stacks of shape (m,) + grid, with labels "A"/"B"."""

    stacks: list
    labels: list
    mask: np.ndarray | None = None
    reference: NiftiVolume | None = None  # output geometry

    def __post_init__(self):
        if len(self.stacks) != len(self.labels) or not self.stacks:
            raise ContractError("need one label per subject and at least one subject")
        shapes = {np.shape(s) for s in self.stacks}
        if len(shapes) != 1:
            raise ContractError(f"subject stacks differ in shape: {sorted(shapes)}")
        if np.shape(self.stacks[0])[0] < 2:
            raise ContractError("need at least 2 draws per subject")
        bad = set(self.labels) - {"A", "B"}
        if bad:
            raise ContractError(f"labels must be 'A' or 'B', got {sorted(bad)}")
        if "A" not in self.labels or "B" not in self.labels:
            raise ContractError("both groups need at least one subject")
        if self.mask is not None and np.shape(self.mask) != self.grid_shape:
            raise ContractError(f"mask shape {np.shape(self.mask)} != grid {self.grid_shape}")

    @property
    def grid_shape(self):
        return tuple(np.shape(self.stacks[0])[1:])

    @property
    def draws(self):
        return np.shape(self.stacks[0])[0]

    def swapped(self):
        return CohortSamples(self.stacks, ["B" if g == "A" else "A" for g in self.labels],
                             self.mask, self.reference)


@dataclass(frozen=True, eq=False)
class GroupReport:
    t_map: np.ndarray
    mean_diff_map: np.ndarray
    std_diff_map: np.ndarray
    weights: np.ndarray
    flags: np.ndarray

    def summary(self, threshold=2.0):
        t = self.t_map[np.isfinite(self.t_map)]
        return {
            "n_defined": int(t.size),
            "n_undefined": int(np.count_nonzero(self.flags & T_UNDEFINED)),
            "n_zero_difference": int(np.count_nonzero(self.flags & ZERO_DIFFERENCE)),
            "threshold": threshold,
            "frac_abs_t_gt_threshold": float(np.mean(np.abs(t) > threshold)) if t.size else 0.0,
            "median_abs_t": float(np.median(np.abs(t))) if t.size else None,
            "max_abs_t": float(np.max(np.abs(t))) if t.size else None,
        }


def _weights(Z, valid, weighting, eps):
    with np.errstate(invalid="ignore"):
        sd = np.std(np.where(valid[:, None, :], Z, 0.0), axis=1, ddof=1)
    if weighting == "voxel":
        w = 1.0 / np.maximum(sd, eps)
    elif weighting == "global":
        med = np.array([np.median(s[v]) if v.any() else np.inf for s, v in zip(sd, valid)])
        w = np.broadcast_to((1.0 / np.maximum(med, eps))[:, None], sd.shape).copy()
    else:
        raise ContractError(f"weighting must be 'voxel' or 'global', got {weighting!r}")
    w[~valid] = 0.0
    return w


def bayesian_t_map(cohort, weighting="voxel", eps=EPS):
    """Voxelwise Bayesian t-scores for group A minus group B.

    Parameters
    ----------
    cohort : CohortSamples
    weighting : {"voxel", "global"}
        Per-voxel reciprocal posterior std, or one weight per subject from
        the median std over the mask.
    eps : float
        Floor on the standard deviation.

    Returns
    -------
    GroupReport
        ``t_map`` is NaN where undefined, with the reason in ``flags``.
    """
    grid = cohort.grid_shape
    sel = np.ones(grid, dtype=bool) if cohort.mask is None else np.asarray(cohort.mask, bool)
    flat = sel.ravel()
    m = cohort.draws
    Z = np.stack([np.asarray(s, dtype=np.float64).reshape(m, -1)[:, flat] for s in cohort.stacks])
    valid = np.all(np.isfinite(Z), axis=1)
    Z = np.where(valid[:, None, :], Z, 0.0)
    w = _weights(Z, valid, weighting, eps)

    labels = np.asarray(cohort.labels)
    means, dens = [], []
    for g in ("A", "B"):
        num = np.zeros(Z.shape[1:])
        den = np.zeros(Z.shape[2])
        for s in np.flatnonzero(labels == g):
            num += w[s] * Z[s]
            den += w[s]
        with np.errstate(invalid="ignore", divide="ignore"):
            means.append(num / den)
        dens.append(den)
    delta = means[0] - means[1]

    mean_diff = delta.mean(axis=0)
    std_diff = delta.std(axis=0, ddof=1)
    empty = (dens[0] == 0) | (dens[1] == 0)
    zero = ~empty & np.all(delta == 0, axis=0)
    undefined = empty | ~(std_diff > 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.where(undefined, np.nan, mean_diff / np.where(undefined, 1.0, std_diff))
    flags = (np.where(undefined, T_UNDEFINED, 0) | np.where(zero, ZERO_DIFFERENCE, 0)
             | np.where(empty, EMPTY_GROUP, 0)).astype(np.uint8)

    def scatter(values, fill=np.nan, dtype=np.float64):
        out = np.full(flat.shape + values.shape[1:], fill, dtype=dtype)
        out[flat] = values
        return out.reshape(grid + values.shape[1:])

    return GroupReport(
        t_map=scatter(t),
        mean_diff_map=scatter(np.where(empty, np.nan, mean_diff)),
        std_diff_map=scatter(np.where(empty, np.nan, std_diff)),
        weights=np.moveaxis(scatter(w.T, fill=0.0), -1, 0),
        flags=scatter(flags, fill=0, dtype=np.uint8),
    )


def load_cohort(manifest_path):
    """Read a cohort manifest and the per-subject 4-D draw stacks it lists.

    The manifest is JSON::

        {"subjects": [{"path": "s01_fa_draws.nii.gz", "label": "A"}, ...],
         "mask": "skeleton.nii.gz"}

    Relative paths resolve against the manifest's directory; the 4th axis
    of every stack indexes draws.
    """
    with open(manifest_path) as f:
        manifest = json.load(f)
    root = os.path.dirname(os.path.abspath(manifest_path))

    def resolve(p):
        return p if os.path.isabs(p) else os.path.join(root, p)

    subjects = manifest.get("subjects")
    if not subjects:
        raise ContractError(f"{manifest_path}: no subjects listed")
    stacks, labels, reference = [], [], None
    for entry in subjects:
        vol = read_nifti(resolve(entry["path"]))
        if reference is None:
            reference = NiftiVolume(data=np.zeros(0), affine=vol.affine,
                                    voxel_size=vol.voxel_size)
        data = vol.data
        if data.ndim != 4:
            raise ContractError(f"{entry['path']}: expected a 4-D draw stack, got {data.ndim}-D")
        stacks.append(np.moveaxis(data, -1, 0))
        labels.append(entry["label"])
    mask = None
    if manifest.get("mask"):
        mask = read_nifti(resolve(manifest["mask"])).data != 0
    return CohortSamples(stacks=stacks, labels=labels, mask=mask, reference=reference)
