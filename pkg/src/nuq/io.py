"""NIfTI-1 volumes, FSL gradient tables and diffusion datasets.

Only the single-file NIfTI-1 variant (magic ``n+1``) is handled, plain or
gzip-compressed.  Voxel data are always returned as float64 arrays indexed
``[x, y, z, t]``.
"""

import gzip
import hashlib
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    GradientConsistencyError,
    GradientParseError,
    NiftiFormatError,
    NiftiIOError,
    UnsupportedDatatypeError,
)

logger = logging.getLogger(__name__)

HEADER_SIZE = 348
VOX_OFFSET = 352  # header + 4-byte extension flag
DEFAULT_B0_THRESHOLD = 50.0
UNIT_NORM_TOL = 1e-4

header_dtd = [
    ("sizeof_hdr", "i4"),
    ("data_type", "S10"),
    ("db_name", "S18"),
    ("extents", "i4"),
    ("session_error", "i2"),
    ("regular", "S1"),
    ("dim_info", "u1"),
    ("dim", "i2", (8,)),
    ("intent_p1", "f4"),
    ("intent_p2", "f4"),
    ("intent_p3", "f4"),
    ("intent_code", "i2"),
    ("datatype", "i2"),
    ("bitpix", "i2"),
    ("slice_start", "i2"),
    ("pixdim", "f4", (8,)),
    ("vox_offset", "f4"),
    ("scl_slope", "f4"),
    ("scl_inter", "f4"),
    ("slice_end", "i2"),
    ("slice_code", "u1"),
    ("xyzt_units", "u1"),
    ("cal_max", "f4"),
    ("cal_min", "f4"),
    ("slice_duration", "f4"),
    ("toffset", "f4"),
    ("glmax", "i4"),
    ("glmin", "i4"),
    ("descrip", "S80"),
    ("aux_file", "S24"),
    ("qform_code", "i2"),
    ("sform_code", "i2"),
    ("quatern_b", "f4"),
    ("quatern_c", "f4"),
    ("quatern_d", "f4"),
    ("qoffset_x", "f4"),
    ("qoffset_y", "f4"),
    ("qoffset_z", "f4"),
    ("srow_x", "f4", (4,)),
    ("srow_y", "f4", (4,)),
    ("srow_z", "f4", (4,)),
    ("intent_name", "S16"),
    ("magic", "S4"),
]
header_dtype = np.dtype(header_dtd)
assert header_dtype.itemsize == HEADER_SIZE

# NIfTI datatype code -> (numpy kind, bits)
DATATYPES = {2: ("u1", 8), 4: ("i2", 16), 16: ("f4", 32), 64: ("f8", 64)}
DATATYPE_NAMES = {"u8": 2, "i16": 4, "f32": 16, "f64": 64}


@dataclass(frozen=True, eq=False)
class NiftiVolume:
    """A loaded NIfTI-1 image.

    ``data`` is float64 with scaling already applied; ``datatype`` is the
    on-disk code the data was decoded from.
    """

    data: np.ndarray
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))
    voxel_size: tuple = (1.0, 1.0, 1.0)
    datatype: int = 64
    scl_slope: float = 1.0
    scl_inter: float = 0.0
    header: np.ndarray | None = None

    @property
    def dims(self):
        return self.data.shape


def _is_gzip(raw):
    return raw[:2] == b"\x1f\x8b"


def _read_bytes(path):
    try:
        with open(path, "rb") as f:
            raw = f.read()
        if _is_gzip(raw):
            raw = gzip.decompress(raw)
    except (OSError, EOFError) as e:
        raise NiftiIOError(f"cannot read {path}: {e}") from e
    return raw


def _parse_header(raw, path):
    if len(raw) < HEADER_SIZE:
        raise NiftiIOError(f"{path}: truncated header ({len(raw)} bytes)")
    for order in "<>":
        hdr = np.frombuffer(raw[:HEADER_SIZE], dtype=header_dtype.newbyteorder(order))[0]
        if hdr["sizeof_hdr"] == HEADER_SIZE:
            break
    else:
        raise NiftiFormatError(f"{path}: sizeof_hdr is not 348 in either byte order")
    if hdr["magic"] != b"n+1":
        raise NiftiFormatError(f"{path}: bad magic {bytes(hdr['magic'])!r}, expected b'n+1'")
    return hdr, order


def _quaternion_affine(hdr):
    b, c, d = (float(hdr[k]) for k in ("quatern_b", "quatern_c", "quatern_d"))
    a = np.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d)))
    rot = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ])
    pixdim = np.abs(hdr["pixdim"][1:4].astype(np.float64))
    pixdim[pixdim == 0] = 1.0
    qfac = -1.0 if hdr["pixdim"][0] < 0 else 1.0
    scale = pixdim * np.array([1.0, 1.0, qfac])
    aff = np.eye(4)
    aff[:3, :3] = rot * scale
    aff[:3, 3] = [hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"]]
    return aff


def _header_affine(hdr, voxel_size):
    if hdr["sform_code"] > 0:
        aff = np.eye(4)
        aff[0] = hdr["srow_x"]
        aff[1] = hdr["srow_y"]
        aff[2] = hdr["srow_z"]
        return aff
    if hdr["qform_code"] > 0:
        return _quaternion_affine(hdr)
    return np.diag(list(voxel_size) + [1.0])


def read_nifti(path):
    """Load a ``.nii`` or ``.nii.gz`` file.

    Parameters
    ----------
    path : str or os.PathLike

    Returns
    -------
    NiftiVolume
        Data decoded to float64, scaled by ``scl_slope``/``scl_inter`` when
        the slope is non-zero.

    Raises
    ------
    NiftiFormatError
        Bad magic or header size.
    UnsupportedDatatypeError
        Datatype code other than 2, 4, 16 or 64.
    NiftiIOError
        Unreadable or truncated file.
    """
    path = os.fspath(path)
    raw = _read_bytes(path)
    hdr, order = _parse_header(raw, path)

    ndim = int(hdr["dim"][0])
    if not 1 <= ndim <= 7:
        raise NiftiFormatError(f"{path}: dim[0]={ndim} out of range")
    dims = [int(v) for v in hdr["dim"][1:ndim + 1]]
    while len(dims) > 4 and dims[-1] == 1:
        dims.pop()
    if len(dims) > 4:
        raise NiftiFormatError(f"{path}: more than 4 non-singleton axes")
    if any(v < 1 for v in dims):
        raise NiftiFormatError(f"{path}: non-positive extent in dims {dims}")

    code = int(hdr["datatype"])
    if code not in DATATYPES:
        raise UnsupportedDatatypeError(f"{path}: unsupported datatype code {code}")
    dtype = np.dtype(DATATYPES[code][0]).newbyteorder(order)

    offset = int(hdr["vox_offset"])
    count = int(np.prod(dims))
    needed = offset + count * dtype.itemsize
    if len(raw) < needed:
        raise NiftiIOError(f"{path}: truncated payload ({len(raw)} of {needed} bytes)")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    data = data.reshape(dims, order="F").astype(np.float64)

    slope = float(hdr["scl_slope"])
    inter = float(hdr["scl_inter"])
    if slope != 0 and np.isfinite(slope) and not (slope == 1 and inter == 0):
        data = data * slope + inter

    spatial = min(len(dims), 3)
    vs = np.abs(hdr["pixdim"][1:1 + spatial].astype(np.float64))
    vs[vs == 0] = 1.0
    voxel_size = tuple(float(v) for v in vs)
    return NiftiVolume(
        data=data,
        affine=_header_affine(hdr, voxel_size + (1.0,) * (3 - spatial)),
        voxel_size=voxel_size,
        datatype=code,
        scl_slope=slope,
        scl_inter=inter,
        header=hdr.copy(),
    )


def encode_nifti(vol, datatype=64, byteorder="<"):
    """Serialize a volume to uncompressed NIfTI-1 bytes."""
    if isinstance(datatype, str):
        datatype = DATATYPE_NAMES[datatype]
    if datatype not in DATATYPES:
        raise UnsupportedDatatypeError(f"unsupported datatype code {datatype}")
    data = np.asarray(vol.data)
    if data.ndim < 1 or data.ndim > 4:
        raise ValueError(f"volume must have 1 to 4 axes, got {data.ndim}")
    kind, bits = DATATYPES[datatype]
    dtype = np.dtype(kind).newbyteorder(byteorder)

    hdr = np.zeros((), dtype=header_dtype.newbyteorder(byteorder))
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["regular"] = b"r"
    hdr["dim"][0] = data.ndim
    hdr["dim"][1:data.ndim + 1] = data.shape
    hdr["dim"][data.ndim + 1:] = 1
    hdr["datatype"] = datatype
    hdr["bitpix"] = bits
    hdr["pixdim"][:] = 1.0
    vs = list(vol.voxel_size)[:3]
    hdr["pixdim"][1:1 + len(vs)] = vs
    hdr["vox_offset"] = VOX_OFFSET
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["xyzt_units"] = 2 | 8  # mm, s
    hdr["sform_code"] = 2
    aff = np.asarray(vol.affine, dtype=np.float64)
    hdr["srow_x"] = aff[0]
    hdr["srow_y"] = aff[1]
    hdr["srow_z"] = aff[2]
    hdr["magic"] = b"n+1"

    payload = data.astype(dtype).tobytes(order="F")
    return hdr.tobytes() + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + payload


def write_nifti(vol, path, datatype=64):
    """Write ``vol`` as NIfTI-1; gzip-compressed iff ``path`` ends in ``.gz``.

    The default datatype is float64, which makes a write/read round trip
    bitwise exact.  Compressed output carries no timestamp so that reruns
    produce identical bytes.
    """
    path = os.fspath(path)
    raw = encode_nifti(vol, datatype=datatype)
    try:
        with open(path, "wb") as f:
            if path.endswith(".gz"):
                with gzip.GzipFile(filename="", mode="wb", fileobj=f, mtime=0) as gz:
                    gz.write(raw)
            else:
                f.write(raw)
    except OSError as e:
        raise NiftiIOError(f"cannot write {path}: {e}") from e


def volume_like(data, ref=None):
    """Wrap an array as a NiftiVolume sharing the geometry of ``ref``."""
    if ref is None:
        return NiftiVolume(data=np.asarray(data, dtype=np.float64))
    return NiftiVolume(data=np.asarray(data, dtype=np.float64), affine=ref.affine,
                       voxel_size=ref.voxel_size)


@dataclass(frozen=True, eq=False)
class GradientTable:
    """b-values (s/mm^2) and unit gradient directions, one per measurement.

    Build instances with :func:`gradient_table`, which normalizes and
    validates the directions.
    """

    bvals: np.ndarray
    bvecs: np.ndarray
    b0_threshold: float = DEFAULT_B0_THRESHOLD
    renormalized: np.ndarray | None = None
    original_norms: np.ndarray | None = None

    def __len__(self):
        return len(self.bvals)

    @property
    def b0_mask(self):
        return self.bvals <= self.b0_threshold

    @property
    def fingerprint(self):
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.bvals, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.bvecs, dtype="<f8").tobytes())
        return h.hexdigest()


def gradient_table(bvals, bvecs, b0_threshold=DEFAULT_B0_THRESHOLD):
    bvals = np.array(bvals, dtype=np.float64).ravel()
    bvecs = np.array(bvecs, dtype=np.float64)
    if bvecs.ndim != 2 or bvecs.shape[1] != 3:
        raise GradientConsistencyError(f"bvecs must have shape (n, 3), got {bvecs.shape}")
    if len(bvecs) != len(bvals):
        raise GradientConsistencyError(
            f"{len(bvals)} b-values but {len(bvecs)} gradient directions")
    if not np.all(np.isfinite(bvals)) or not np.all(np.isfinite(bvecs)):
        raise GradientConsistencyError("non-finite gradient entries")
    if np.any(bvals < 0):
        raise GradientConsistencyError("negative b-value")

    norms = np.linalg.norm(bvecs, axis=1)
    dw = bvals > b0_threshold
    if np.any(norms[dw] == 0):
        raise GradientConsistencyError("zero gradient direction on a diffusion-weighted measurement")
    out = bvecs.copy()
    out[dw] /= norms[dw, None]
    renorm = dw & (np.abs(norms - 1.0) > UNIT_NORM_TOL)
    if renorm.any():
        logger.warning("renormalized %d gradient directions", int(renorm.sum()))
    return GradientTable(bvals=bvals, bvecs=out, b0_threshold=float(b0_threshold),
                         renormalized=renorm, original_norms=norms)


def _parse_rows(path):
    try:
        with open(path) as f:
            lines = [ln for ln in f.read().splitlines() if ln.strip()]
    except OSError as e:
        raise NiftiIOError(f"cannot read {path}: {e}") from e
    rows = []
    for ln in lines:
        try:
            rows.append([float(tok) for tok in ln.split()])
        except ValueError as e:
            raise GradientParseError(f"{path}: {e}") from e
    return rows


def read_gradients(bval_path, bvec_path, b0_threshold=DEFAULT_B0_THRESHOLD):
    """Read FSL-style ``bval``/``bvec`` files.

    The bval file holds one row of n numbers, the bvec file three rows of n
    numbers.  Directions of diffusion-weighted measurements are normalized;
    ``renormalized`` marks those whose norm moved by more than 1e-4.
    """
    bval_rows = _parse_rows(bval_path)
    bvec_rows = _parse_rows(bvec_path)
    bvals = [v for row in bval_rows for v in row]
    if len(bvec_rows) != 3:
        raise GradientConsistencyError(f"{bvec_path}: expected 3 rows, found {len(bvec_rows)}")
    lengths = {len(r) for r in bvec_rows} | {len(bvals)}
    if len(lengths) != 1:
        raise GradientConsistencyError(
            f"row lengths differ between {bval_path} and {bvec_path}: {sorted(lengths)}")
    return gradient_table(bvals, np.array(bvec_rows).T, b0_threshold=b0_threshold)


def write_gradients(gtab, bval_path, bvec_path):
    np.savetxt(bval_path, gtab.bvals[None, :], fmt="%.17g")
    np.savetxt(bvec_path, gtab.bvecs.T, fmt="%.17g")


@dataclass(frozen=True, eq=False)
class DwiDataset:
    signal: NiftiVolume
    gradients: GradientTable
    mask: np.ndarray | None = None

    @property
    def spatial_shape(self):
        return self.signal.data.shape[:3]

    def mask_or_full(self):
        if self.mask is None:
            return np.ones(self.spatial_shape, dtype=bool)
        return np.asarray(self.mask, dtype=bool)


def validate_dataset(ds):
    """Return a list of invariant violations; empty when ``ds`` is valid."""
    report = []
    shape = ds.signal.data.shape
    if len(shape) != 4:
        report.append(f"signal must be 4D, got shape {shape}")
    elif shape[3] != len(ds.gradients):
        report.append(f"gradient count mismatch: {shape[3]} volumes, {len(ds.gradients)} gradients")
    if not ds.gradients.b0_mask.any():
        report.append("missing b0")
    if ds.mask is not None and np.shape(ds.mask) != tuple(shape[:3]):
        report.append(f"mask shape mismatch: {np.shape(ds.mask)} vs {tuple(shape[:3])}")
    return report


def load_dataset(dwi_path, bval_path, bvec_path, mask_path=None,
                 b0_threshold=DEFAULT_B0_THRESHOLD):
    signal = read_nifti(dwi_path)
    gtab = read_gradients(bval_path, bvec_path, b0_threshold=b0_threshold)
    mask = None
    if mask_path is not None:
        mask = read_nifti(mask_path).data != 0
    return DwiDataset(signal=signal, gradients=gtab, mask=mask)


def save_dataset(ds, out_dir, stem="dwi"):
    """Write ``<stem>.nii.gz``, ``<stem>.bval``, ``<stem>.bvec`` and ``mask.nii.gz``."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "dwi": os.path.join(out_dir, f"{stem}.nii.gz"),
        "bval": os.path.join(out_dir, f"{stem}.bval"),
        "bvec": os.path.join(out_dir, f"{stem}.bvec"),
    }
    write_nifti(ds.signal, paths["dwi"])
    write_gradients(ds.gradients, paths["bval"], paths["bvec"])
    if ds.mask is not None:
        paths["mask"] = os.path.join(out_dir, "mask.nii.gz")
        write_nifti(volume_like(ds.mask.astype(np.float64), ds.signal), paths["mask"], datatype=2)
    return paths
