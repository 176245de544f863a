"""
Reading and writing of 3D volumes.

Two on-disk formats are supported:

* a NIfTI-1 single-file subset (``.nii`` / ``.nii.gz``, little-endian,
  datatypes uint8, int16, float32 and float64), and
* a raw fixture format: a 16-byte header of four little-endian ``uint32``
  (three dims and a NIfTI datatype code) followed by the C-order payload.

Volumes are stored with the phase-encoding (PE) axis in any position on disk.
The solvers work with the PE axis last; :func:`permute_pe_last` and
:func:`unpermute` move between the two layouts.
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ShapeError, UnsupportedError, ValidationError, VolumeFormatError

HEADER_SIZE = 348
_GZIP_MAGIC = b"\x1f\x8b"

# NIfTI datatype code -> little-endian numpy dtype
DATATYPES = {
    2: np.dtype("u1"),
    4: np.dtype("<i2"),
    16: np.dtype("<f4"),
    64: np.dtype("<f8"),
}

PRECISIONS = {"single": np.float32, "double": np.float64}


@dataclass(frozen=True)
class Volume:
    """
    A 3D scalar image with grid metadata.

    Parameters
    ----------
    data : numpy.ndarray (n1, n2, n3)
        voxel intensities
    voxel_size : tuple of float
        voxel extents (h1, h2, h3) in mm
    affine : numpy.ndarray (4, 4), optional
        voxel-to-world transform; carried through unchanged, never interpreted
    """

    data: np.ndarray
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ShapeError(f"volume must be 3D, got shape {data.shape}")
        if min(data.shape) < 2:
            raise ShapeError(f"all dims must be >= 2, got {data.shape}")
        vs = tuple(float(h) for h in self.voxel_size)
        if len(vs) != 3 or not all(np.isfinite(h) and h > 0 for h in vs):
            raise ValidationError(f"voxel sizes must be three positive numbers, got {self.voxel_size}")
        affine = np.asarray(self.affine, dtype=np.float64)
        if affine.shape != (4, 4):
            raise ShapeError(f"affine must be 4x4, got {affine.shape}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "voxel_size", vs)
        object.__setattr__(self, "affine", affine)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype_tag(self) -> str:
        return "single" if self.data.dtype == np.float32 else "double"

    def validate(self) -> "Volume":
        if not np.all(np.isfinite(self.data)):
            raise ValidationError("volume contains NaN or Inf")
        return self

    def astype(self, precision: str) -> "Volume":
        return Volume(self.data.astype(PRECISIONS[precision], copy=False), self.voxel_size, self.affine)

    def with_data(self, data) -> "Volume":
        return Volume(data, self.voxel_size, self.affine)


@dataclass(frozen=True)
class Permutation:
    """Axis order applied by :func:`permute_pe_last` (0-based) and its inverse."""

    order: tuple[int, int, int]

    @property
    def inverse(self) -> tuple[int, int, int]:
        return tuple(int(i) for i in np.argsort(self.order))


def permute_pe_last(volume: Volume, pe_dim: int) -> tuple[Volume, Permutation]:
    """
    Move the phase-encoding axis to the last position.

    The two remaining axes keep their relative order, so ``pe_dim=1`` maps
    dims ``(a, b, c)`` to ``(b, c, a)``.

    Parameters
    ----------
    volume : Volume
    pe_dim : int
        1-based index of the phase-encoding axis (1, 2 or 3)

    Returns
    -------
    Volume, Permutation
    """
    if pe_dim not in (1, 2, 3):
        raise ValueError(f"pe_dim must be 1, 2 or 3, got {pe_dim!r}")
    pe = pe_dim - 1
    order = tuple(i for i in range(3) if i != pe) + (pe,)
    perm = Permutation(order)
    data = np.ascontiguousarray(np.transpose(volume.data, order))
    vs = tuple(volume.voxel_size[i] for i in order)
    return Volume(data, vs, volume.affine), perm


def unpermute(volume: Volume, perm: Permutation) -> Volume:
    inv = perm.inverse
    data = np.ascontiguousarray(np.transpose(volume.data, inv))
    vs = tuple(volume.voxel_size[i] for i in inv)
    return Volume(data, vs, volume.affine)


# --------------------------------------------------------------------------- NIfTI-1


def _read_bytes(path: Path) -> bytes:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == _GZIP_MAGIC:
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise VolumeFormatError(f"{path}: corrupt gzip stream") from exc
    return raw


def _affine_from_header(hdr: bytes, pixdim) -> np.ndarray:
    qform_code, sform_code = struct.unpack_from("<hh", hdr, 252)
    if sform_code > 0:
        rows = struct.unpack_from("<12f", hdr, 280)
        aff = np.eye(4)
        aff[:3, :] = np.asarray(rows, dtype=np.float64).reshape(3, 4)
        return aff
    if qform_code > 0:
        b, c, d, qx, qy, qz = struct.unpack_from("<6f", hdr, 256)
        a = 1.0 - (b * b + c * c + d * d)
        a = np.sqrt(a) if a > 0 else 0.0
        R = np.array([
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
        ])
        qfac = -1.0 if pixdim[0] < 0 else 1.0
        aff = np.eye(4)
        aff[:3, :3] = R * np.array([pixdim[1], pixdim[2], qfac * pixdim[3]])
        aff[:3, 3] = (qx, qy, qz)
        return aff
    return np.diag([pixdim[1], pixdim[2], pixdim[3], 1.0])


def read_volume(path, precision: str = "double") -> Volume:
    """
    Read a NIfTI-1 single file (optionally gzip-compressed).

    Parameters
    ----------
    path : str or Path
    precision : {'double', 'single'}
        working precision the data is promoted to

    Returns
    -------
    Volume

    Raises
    ------
    VolumeFormatError
        header size field is not 348, bad magic, or truncated data
    UnsupportedError
        datatype outside uint8/int16/float32/float64
    ShapeError
        not 3D (a singleton 4th dimension is squeezed)
    """
    path = Path(path)
    raw = _read_bytes(path)
    if len(raw) < HEADER_SIZE:
        raise VolumeFormatError(f"{path}: file shorter than a NIfTI-1 header")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        if struct.unpack_from(">i", raw, 0)[0] == HEADER_SIZE:
            raise VolumeFormatError(f"{path}: big-endian NIfTI files are not supported")
        raise VolumeFormatError(f"{path}: header size field is {sizeof_hdr}, expected 348")
    magic = raw[344:348]
    if magic == b"ni1\x00":
        raise VolumeFormatError(f"{path}: .hdr/.img pairs are not supported")
    if magic != b"n+1\x00":
        raise VolumeFormatError(f"{path}: bad NIfTI magic {magic!r}")

    dim = struct.unpack_from("<8h", raw, 40)
    datatype, _bitpix = struct.unpack_from("<hh", raw, 70)
    pixdim = struct.unpack_from("<8f", raw, 76)
    vox_offset, scl_slope, scl_inter = struct.unpack_from("<3f", raw, 108)

    ndim = dim[0]
    if ndim < 3 or ndim > 7:
        raise ShapeError(f"{path}: expected a 3D volume, header has {ndim} dims")
    shape = tuple(int(d) for d in dim[1:ndim + 1])
    if any(s > 1 for s in shape[3:]):
        raise ShapeError(f"{path}: only single 3D volumes are supported, got shape {shape}")
    shape = shape[:3]
    if datatype not in DATATYPES:
        raise UnsupportedError(f"{path}: unsupported NIfTI datatype code {datatype}")
    dt = DATATYPES[datatype]

    offset = int(vox_offset)
    nbytes = int(np.prod(shape)) * dt.itemsize
    if offset < HEADER_SIZE or len(raw) < offset + nbytes:
        raise VolumeFormatError(f"{path}: data section truncated (need {nbytes} bytes at offset {offset})")
    # NIfTI stores the first index fastest
    arr = np.frombuffer(raw, dtype=dt, count=int(np.prod(shape)), offset=offset)
    arr = arr.reshape(shape, order="F")

    work = PRECISIONS[precision]
    data = arr.astype(work)
    if np.isfinite(scl_slope) and scl_slope != 0 and (scl_slope != 1 or scl_inter != 0):
        data = (data * work(scl_slope) + work(scl_inter)).astype(work)

    vs = tuple(abs(float(p)) for p in pixdim[1:4])
    vol = Volume(np.ascontiguousarray(data), vs, _affine_from_header(raw, pixdim))
    return vol.validate()


def _build_header(volume: Volume, datatype: int) -> bytes:
    hdr = bytearray(HEADER_SIZE + 4)  # header + empty extension flag
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    dims = (3,) + tuple(volume.shape) + (1, 1, 1, 1)
    struct.pack_into("<8h", hdr, 40, *dims)
    struct.pack_into("<hh", hdr, 70, datatype, DATATYPES[datatype].itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *volume.voxel_size, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<3f", hdr, 108, float(HEADER_SIZE + 4), 1.0, 0.0)
    hdr[123] = 2  # xyzt_units: mm
    struct.pack_into("<hh", hdr, 252, 0, 2)  # qform_code, sform_code (aligned)
    struct.pack_into("<12f", hdr, 280, *volume.affine[:3, :].ravel())
    hdr[344:348] = b"n+1\x00"
    return bytes(hdr)


def write_volume(volume: Volume, path) -> None:
    """
    Write a NIfTI-1 single file; ``.gz`` suffix selects gzip compression.

    Single-precision volumes are stored as float32, everything else as
    float64. The affine goes into the sform (stored as float32 by the format).
    """
    volume.validate()
    path = Path(path)
    datatype = 16 if volume.data.dtype == np.float32 else 64
    payload = np.asarray(volume.data, dtype=DATATYPES[datatype]).tobytes(order="F")
    blob = _build_header(volume, datatype) + payload
    if path.suffix == ".gz":
        blob = gzip.compress(blob, mtime=0)
    with open(path, "wb") as fh:
        fh.write(blob)


# --------------------------------------------------------------------------- raw fixtures


def write_raw(volume: Volume, path) -> None:
    volume.validate()
    datatype = 16 if volume.data.dtype == np.float32 else 64
    header = struct.pack("<4I", *volume.shape, datatype)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(volume.data, dtype=DATATYPES[datatype]).tobytes(order="C"))


def read_raw(path, precision: str = "double", voxel_size=(1.0, 1.0, 1.0)) -> Volume:
    """Read the 16-byte-header raw fixture format (row-major payload)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16:
        raise VolumeFormatError(f"{path}: missing raw header")
    n1, n2, n3, code = struct.unpack_from("<4I", raw, 0)
    if code not in DATATYPES:
        raise UnsupportedError(f"{path}: unsupported raw datatype code {code}")
    dt = DATATYPES[code]
    count = n1 * n2 * n3
    if len(raw) != 16 + count * dt.itemsize:
        raise VolumeFormatError(f"{path}: payload size does not match dims {(n1, n2, n3)}")
    arr = np.frombuffer(raw, dtype=dt, count=count, offset=16).reshape(n1, n2, n3)
    return Volume(arr.astype(PRECISIONS[precision]), voxel_size).validate()
